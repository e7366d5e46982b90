# stdlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

# 3p
import numpy as np

# project
from implicit_herd.dynamics import (
    GUARD_RADIUS,
    V_MAX,
    EvaderParams,
    Saturation,
    eval_herd,
    jacobians_f,
    params_for,
    saturate_speed,
)
from implicit_herd.errors import RankDeficient


log = logging.getLogger(__name__)

# Singular values below this fraction of the largest count as zero.
RANK_TOLERANCE = 1e-8

GainMatrix = np.ndarray | Callable[[np.ndarray], np.ndarray]


@dataclass
class GainSet:
    """Controller gains. K_f and K_h may be callables of x_tilde and h respectively."""

    K_f: GainMatrix
    K_h: GainMatrix
    K_theta: np.ndarray
    lambda_pinv: float = 1e-8

    @classmethod
    def isotropic(
        cls,
        dim: int,
        k_f: float = 0.25,
        k_h: float = 50.0,
        k_theta: float = 200.0,
        lambda_pinv: float = 1e-8,
    ) -> "GainSet":
        eye = np.eye(dim)
        return cls(k_f * eye, k_h * eye, k_theta * eye, lambda_pinv)

    def kf(self, x_tilde: np.ndarray) -> np.ndarray:
        return self.K_f(x_tilde) if callable(self.K_f) else self.K_f

    def kh(self, h: np.ndarray) -> np.ndarray:
        return self.K_h(h) if callable(self.K_h) else self.K_h


@dataclass
class ReferenceSignal:
    x_star: Callable[[float], np.ndarray]
    x_star_dot: Callable[[float], np.ndarray]
    bound: float = 0.0

    @classmethod
    def static(cls, targets) -> "ReferenceSignal":
        x_star = np.asarray(targets, dtype=float).ravel().copy()
        zero = np.zeros_like(x_star)
        return cls(lambda t: x_star, lambda t: zero, 0.0)

    @classmethod
    def sinusoid(
        cls,
        start,
        w: Sequence[float],
        v: float | Sequence[float],
        amplitude: float = 0.5,
    ) -> "ReferenceSignal":
        """Targets drift along +x at speed v_j while oscillating in y.

        Evader j (counting from 1) follows y_dot = amplitude * w_j * cos(w_j t + 2 pi / j).
        Shorter w or v lists are cycled over the herd.
        """
        x0 = np.asarray(start, dtype=float).reshape(-1, 2)
        m = len(x0)
        ws = np.resize(np.asarray(w, dtype=float), m)
        vs = np.resize(np.atleast_1d(np.asarray(v, dtype=float)), m)
        phase = 2.0 * np.pi / np.arange(1, m + 1)

        def x_star(t: float) -> np.ndarray:
            out = x0.copy()
            out[:, 0] += vs * t
            out[:, 1] += amplitude * (np.sin(ws * t + phase) - np.sin(phase))
            return out.ravel()

        def x_star_dot(t: float) -> np.ndarray:
            return np.column_stack([vs, amplitude * ws * np.cos(ws * t + phase)]).ravel()

        bound = float(np.max(np.hypot(vs, amplitude * ws)))
        return cls(x_star, x_star_dot, bound)


@dataclass
class WorkingEquation:
    h: np.ndarray
    J_x: np.ndarray
    J_u: np.ndarray
    x_tilde: np.ndarray
    # model velocity f(x, u), unsaturated
    f: np.ndarray


@dataclass
class GainReport:
    ok: bool
    min_eigenvalue: float
    max_eigenvalue: float

    @property
    def margin(self) -> float:
        return -self.max_eigenvalue


@dataclass
class RankReport:
    rank: int
    condition_number: float
    min_singular_value: float


def f_star(x_tilde: np.ndarray, gains: GainSet) -> np.ndarray:
    return -gains.kf(x_tilde) @ x_tilde


def h_star(h: np.ndarray, gains: GainSet) -> np.ndarray:
    return -gains.kh(h) @ h


def _f_star_jacobian(x_tilde: np.ndarray, gains: GainSet, step: float = 1e-6) -> np.ndarray:
    if not callable(gains.K_f):
        return gains.K_f
    jac = np.empty((x_tilde.size, x_tilde.size))
    for k in range(x_tilde.size):
        dx = np.zeros_like(x_tilde)
        dx[k] = step
        jac[:, k] = (f_star(x_tilde - dx, gains) - f_star(x_tilde + dx, gains)) / (2 * step)
    return jac


def compute_h(
    x,
    u,
    params: EvaderParams | Sequence[EvaderParams],
    gains: GainSet,
    ref: ReferenceSignal,
    t: float,
    *,
    theta: np.ndarray | None = None,
    guard_radius: float = GUARD_RADIUS,
) -> WorkingEquation:
    x = np.asarray(x, dtype=float).ravel()
    x_tilde = x - ref.x_star(t)
    f = eval_herd(x, u, params, theta=theta, saturate=False, guard_radius=guard_radius)
    h = f - f_star(x_tilde, gains) - ref.x_star_dot(t)
    Fx, Fu = jacobians_f(x, u, params, theta=theta, guard_radius=guard_radius)
    return WorkingEquation(h, Fx + _f_star_jacobian(x_tilde, gains), Fu, x_tilde, f)


def existence_diagnostics(w: WorkingEquation) -> RankReport:
    s = np.linalg.svd(w.J_u, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return RankReport(0, float("inf"), 0.0)
    rank = int(np.sum(s > RANK_TOLERANCE * s[0]))
    cond = float(s[0] / s[-1]) if s[-1] > 0 else float("inf")
    return RankReport(rank, cond, float(s[-1]))


def input_rate(w: WorkingEquation, x_dot_model: np.ndarray, gains: GainSet) -> np.ndarray:
    """Input dynamics u_dot = J_u^+ (h*(h) - J_x x_dot) with a damped right pseudoinverse."""
    required = w.J_u.shape[0]
    report = existence_diagnostics(w)
    if report.rank < required:
        raise RankDeficient(report.rank, required)

    rhs = h_star(w.h, gains) - w.J_x @ x_dot_model
    gram = w.J_u @ w.J_u.T + gains.lambda_pinv * np.eye(required)
    return w.J_u.T @ np.linalg.solve(gram, rhs)


def check_K_negdef(
    gains: GainSet, h: np.ndarray | None = None, x_tilde: np.ndarray | None = None
) -> GainReport:
    """Negative definiteness of [[-K_f, I/2], [I/2, -K_h]] at (x_tilde, h)."""
    dim = gains.K_theta.shape[0]
    x_tilde = np.zeros(dim) if x_tilde is None else x_tilde
    h = np.zeros(dim) if h is None else h
    half = 0.5 * np.eye(dim)
    K = np.block([[-gains.kf(x_tilde), half], [half, -gains.kh(h)]])
    eig = np.linalg.eigvalsh(0.5 * (K + K.T))
    return GainReport(bool(eig[-1] < 0), float(eig[0]), float(eig[-1]))


def centroid_wrap(x) -> tuple[np.ndarray, np.ndarray]:
    """Herd centroid and its (2 x 2m) derivative with respect to x."""
    X = np.asarray(x, dtype=float).reshape(-1, 2)
    m = len(X)
    return X.mean(axis=0), np.tile(np.eye(2), m) / m


@dataclass
class ImplicitController:
    params: list[EvaderParams]
    gains: GainSet
    reference: ReferenceSignal
    v_max: float = V_MAX
    saturation: Saturation = "clamp"
    guard_radius: float = GUARD_RADIUS
    m: int = field(init=False)

    def __post_init__(self):
        self.params = params_for(self.params, len(self.params))
        self.m = len(self.params)

    def working_equation(self, x, u, t: float, theta=None) -> WorkingEquation:
        return compute_h(
            x, u, self.params, self.gains, self.reference, t,
            theta=theta, guard_radius=self.guard_radius,
        )

    def rate(
        self, x, u, t: float, theta=None, x_dot_model=None
    ) -> tuple[np.ndarray, WorkingEquation]:
        """Saturated herder velocities and the working equation they were derived from."""
        w = self.working_equation(x, u, t, theta)
        model = w.f if x_dot_model is None else x_dot_model
        u_dot = input_rate(w, model, self.gains)
        return saturate_speed(u_dot, self.v_max), w

    def evader_velocity(self, x, u, theta=None) -> np.ndarray:
        return eval_herd(
            x, u, self.params, theta=theta, v_max=self.v_max,
            saturation=self.saturation, guard_radius=self.guard_radius,
        )

    def expanded_field(self, xi: np.ndarray, t: float, theta=None) -> np.ndarray:
        """Joint (x, u) rate of the closed loop, used for state prediction."""
        x, u = xi[: 2 * self.m], xi[2 * self.m :]
        u_dot, _ = self.rate(x, u, t, theta)
        return np.concatenate([self.evader_velocity(x, u, theta), u_dot])
