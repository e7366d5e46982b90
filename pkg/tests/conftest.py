import numpy as np
import pytest
from scipy.optimize import brentq

from implicit_herd.controller import ReferenceSignal
from implicit_herd.dynamics import EvaderModel, EvaderParams, eval_herd
from implicit_herd.simulation import Scenario

INVERSE = EvaderParams(model=EvaderModel.INVERSE, theta=1.0)
EXPONENTIAL = EvaderParams(
    model=EvaderModel.EXPONENTIAL, theta=0.5, beta=0.5, sigma=2.0, d_min=1.0
)

# small, deliberately asymmetric displacement of the herd from its balanced layout
PENTAGON_OFFSET = 0.1 * np.array(
    [[1.0, 0.5], [-0.5, 1.0], [0.2, -0.8], [-1.0, -0.3], [0.6, 0.6]]
)


def _pentagons(a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
    angles = 2 * np.pi * np.arange(5) / 5
    x = a * np.column_stack([np.cos(angles), np.sin(angles)])
    u = b * np.column_stack([np.cos(angles + np.pi / 5), np.sin(angles + np.pi / 5)])
    return x.ravel(), u.ravel()


def pentagon_equilibrium(params: EvaderParams, a: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Evaders on a pentagon, herders on a rotated outer pentagon with zero net repulsion."""

    def radial(b: float) -> float:
        x, u = _pentagons(a, b)
        return float(eval_herd(x, u, params, saturate=False)[0])

    b = brentq(radial, 1.05 * a, 3.0 * a, xtol=1e-14)
    return _pentagons(a, b)


def settled_start(params: EvaderParams, k_f: float = 0.25):
    """Start beside the balanced layout with targets chosen so the working equation is zero."""
    x_eq, u0 = pentagon_equilibrium(params)
    x0 = x_eq + PENTAGON_OFFSET.ravel()
    targets = x0 + eval_herd(x0, u0, params, saturate=False) / k_f
    return x0, u0, targets


@pytest.fixture
def pentagon_scenario():
    """Factory for five-evader, five-herder scenarios starting with h = 0."""

    def build(params: EvaderParams = INVERSE, **kwargs) -> Scenario:
        x0, u0, targets = settled_start(params)
        kwargs.setdefault("horizon", 30.0)
        return Scenario(
            params=[params] * 5,
            x0=x0,
            u0=u0,
            reference=ReferenceSignal.static(targets),
            **kwargs,
        )

    return build


@pytest.fixture
def one_on_one():
    """Single Inverse evader pushed toward (0.304, 0) by one close herder.

    With K_f = 0.25 and theta = 0.005 the working equation starts at h = (0.004, 0)
    and the first herder velocity stays below the speed limit.
    """

    def build(**kwargs) -> Scenario:
        params = EvaderParams(theta=0.005)
        return Scenario(
            params=[params],
            x0=np.array([0.0, 0.0]),
            u0=np.array([-0.25, 0.0]),
            reference=ReferenceSignal.static([0.304, 0.0]),
            **kwargs,
        )

    return build


@pytest.fixture
def equilibrium_scenario():
    """One evader on its target between two symmetric herders."""

    def build(**kwargs) -> Scenario:
        kwargs.setdefault("horizon", 1.0)
        return Scenario(
            params=[INVERSE],
            x0=np.array([0.0, 0.0]),
            u0=np.array([-2.0, 0.0, 2.0, 0.0]),
            reference=ReferenceSignal.static([0.0, 0.0]),
            **kwargs,
        )

    return build
