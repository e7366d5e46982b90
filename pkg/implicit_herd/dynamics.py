# stdlib
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Literal, Sequence

# 3p
import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit

# project
from implicit_herd.errors import GuardViolation


log = logging.getLogger(__name__)

# Evaluation closer than this to a repulsion source is an error, not a clamp.
GUARD_RADIUS = 1e-3
V_MAX = 0.4

Saturation = Literal["clamp", "tanh"]


class EvaderModel(str, Enum):
    INVERSE = "inverse"
    EXPONENTIAL = "exponential"


class EvaderParams(BaseModel):
    """Reaction model of a single evader. Lengths in meters, time in seconds."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    model: EvaderModel = EvaderModel.INVERSE
    theta: float = Field(1.0, gt=0, description="repulsion gain")
    beta: float = Field(0.5, gt=0, lt=1, description="fear attenuation (exponential)")
    sigma: float = Field(2.0, gt=1, description="reaction length, m (exponential)")
    d_min: float = Field(1.0, gt=0, description="fear distance, m (exponential)")
    sigmoid_slope: float = Field(10.0, gt=0, description="logistic slope, 1/m")
    cohesion: float = Field(0.0, ge=0, description="herd cohesion gain")


@dataclass
class _Stack:
    theta: np.ndarray
    beta: np.ndarray
    sigma: np.ndarray
    d_min: np.ndarray
    slope: np.ndarray
    cohesion: np.ndarray
    exponential: np.ndarray


def as_points(v) -> np.ndarray:
    """View a stacked 2k vector (or k x 2 array) as k two-vectors."""
    return np.asarray(v, dtype=float).reshape(-1, 2)


def params_for(params: EvaderParams | Sequence[EvaderParams], m: int) -> list[EvaderParams]:
    if isinstance(params, EvaderParams):
        return [params] * m
    params = list(params)
    if len(params) != m:
        raise ValueError(f"expected {m} evader parameter sets, got {len(params)}")
    return params


def _stack(params: EvaderParams | Sequence[EvaderParams], m: int) -> _Stack:
    ps = params_for(params, m)
    return _Stack(
        theta=np.array([p.theta for p in ps]),
        beta=np.array([p.beta for p in ps]),
        sigma=np.array([p.sigma for p in ps]),
        d_min=np.array([p.d_min for p in ps]),
        slope=np.array([p.sigmoid_slope for p in ps]),
        cohesion=np.array([p.cohesion for p in ps]),
        exponential=np.array([p.model == EvaderModel.EXPONENTIAL for p in ps], dtype=bool),
    )


def _check_guard(r: np.ndarray, guard_radius: float, kind: str) -> None:
    if r.size and r.min() < guard_radius:
        j, i = np.unravel_index(np.argmin(r), r.shape)
        raise GuardViolation(kind, (int(j), int(i)), float(r[j, i]))


def _exp_weight(r, beta, sigma, d_min, slope):
    return np.exp(-(r**2) / sigma**2) * (1.0 - beta * expit(slope * (d_min - r)))


def eval_inverse(xj, u, theta: float, guard_radius: float = GUARD_RADIUS) -> np.ndarray:
    d = as_points(xj) - as_points(u)
    r = np.linalg.norm(d, axis=1)
    _check_guard(r[None, :], guard_radius, "evader-herder")
    return theta * (d / r[:, None] ** 3).sum(axis=0)


def eval_exponential(xj, u, p: EvaderParams) -> np.ndarray:
    d = as_points(xj) - as_points(u)
    r = np.linalg.norm(d, axis=1)
    w = _exp_weight(r, p.beta, p.sigma, p.d_min, p.sigmoid_slope)
    return p.theta * (d * w[:, None]).sum(axis=0)


def eval_cohesion(x, vartheta, guard_radius: float = GUARD_RADIUS) -> np.ndarray:
    """Weak inter-evader repulsion and long-range attraction, balanced at unit spacing."""
    X = as_points(x)
    m = len(X)
    gain = np.broadcast_to(np.asarray(vartheta, dtype=float), (m,))
    if m < 2 or not np.any(gain):
        return np.zeros(2 * m)

    d = X[:, None, :] - X[None, :, :]
    r = np.linalg.norm(d, axis=-1)
    off = ~np.eye(m, dtype=bool)
    _check_guard(np.where(off, r, np.inf), guard_radius, "evader-evader")

    r_safe = np.where(off, r, 1.0)
    w = np.where(off, 1.0 / r_safe**3 - r_safe**2, 0.0)
    return (gain[:, None] * (d * w[..., None]).sum(axis=1)).ravel()


def repulsion_field(
    x, u, params: EvaderParams | Sequence[EvaderParams], guard_radius: float = GUARD_RADIUS
) -> np.ndarray:
    """Per-evader field with theta factored out, shape (m, 2)."""
    X, U = as_points(x), as_points(u)
    d = X[:, None, :] - U[None, :, :]
    r = np.linalg.norm(d, axis=-1)
    _check_guard(r, guard_radius, "evader-herder")

    st = _stack(params, len(X))
    out = np.zeros_like(X)
    inv = ~st.exponential
    if inv.any():
        out[inv] = (d[inv] / r[inv][..., None] ** 3).sum(axis=1)
    e = st.exponential
    if e.any():
        w = _exp_weight(
            r[e], st.beta[e, None], st.sigma[e, None], st.d_min[e, None], st.slope[e, None]
        )
        out[e] = (d[e] * w[..., None]).sum(axis=1)
    return out


def theta_of(params: EvaderParams | Sequence[EvaderParams], m: int) -> np.ndarray:
    return np.array([p.theta for p in params_for(params, m)])


def saturate_speed(v, v_max: float = V_MAX, mode: Saturation = "clamp") -> np.ndarray:
    """Limit the speed of every entity in a stacked velocity vector."""
    pts = as_points(v)
    speed = np.linalg.norm(pts, axis=1)
    if mode == "tanh":
        scale = np.divide(
            v_max * np.tanh(speed / v_max), speed, out=np.ones_like(speed), where=speed > 0
        )
    else:
        scale = np.minimum(1.0, v_max / np.maximum(speed, np.finfo(float).tiny))
    return (pts * scale[:, None]).ravel()


def eval_herd(
    x,
    u,
    params: EvaderParams | Sequence[EvaderParams],
    *,
    theta: np.ndarray | None = None,
    v_max: float = V_MAX,
    saturate: bool = True,
    saturation: Saturation = "clamp",
    guard_radius: float = GUARD_RADIUS,
) -> np.ndarray:
    """Stacked evader velocities for herd x under herders u.

    Args:
        theta: overrides the per-evader gains (used to evaluate an estimated model).
        saturate: apply the v_max speed limit; the controller works on the raw model.
    """
    X = as_points(x)
    m = len(X)
    st = _stack(params, m)
    gain = st.theta if theta is None else np.asarray(theta, dtype=float)
    v = (gain[:, None] * repulsion_field(X, u, params, guard_radius)).ravel()
    v = v + eval_cohesion(X, st.cohesion, guard_radius)
    return saturate_speed(v, v_max, saturation) if saturate else v


def jacobians_f(
    x,
    u,
    params: EvaderParams | Sequence[EvaderParams],
    *,
    theta: np.ndarray | None = None,
    guard_radius: float = GUARD_RADIUS,
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic (df/dx, df/du) of the unsaturated herd field."""
    X, U = as_points(x), as_points(u)
    m, n = len(X), len(U)
    d = X[:, None, :] - U[None, :, :]
    r = np.linalg.norm(d, axis=-1)
    _check_guard(r, guard_radius, "evader-herder")

    st = _stack(params, m)
    gain = st.theta if theta is None else np.asarray(theta, dtype=float)
    eye = np.eye(2)
    dd = d[..., :, None] * d[..., None, :]

    # M[j, i] = d/dd of the theta-free pair term
    M = np.empty((m, n, 2, 2))
    inv = ~st.exponential
    if inv.any():
        ri = r[inv][..., None, None]
        M[inv] = eye / ri**3 - 3.0 * dd[inv] / ri**5
    e = st.exponential
    if e.any():
        re = r[e]
        beta, sigma = st.beta[e, None], st.sigma[e, None]
        slope, d_min = st.slope[e, None], st.d_min[e, None]
        g = np.exp(-(re**2) / sigma**2)
        sg = expit(slope * (d_min - re))
        fear = 1.0 - beta * sg
        radial = -2.0 * fear / sigma**2 + beta * slope * sg * (1.0 - sg) / re
        M[e] = g[..., None, None] * (
            fear[..., None, None] * eye + radial[..., None, None] * dd[e]
        )

    idx = np.arange(m)
    Fx = np.zeros((m, 2, m, 2))
    Fx[idx, :, idx, :] = gain[:, None, None] * M.sum(axis=1)
    Fu = -(gain[:, None, None, None] * M).transpose(0, 2, 1, 3)

    if m >= 2 and np.any(st.cohesion):
        dx = X[:, None, :] - X[None, :, :]
        rx = np.linalg.norm(dx, axis=-1)
        off = ~np.eye(m, dtype=bool)
        _check_guard(np.where(off, rx, np.inf), guard_radius, "evader-evader")
        rs = np.where(off, rx, 1.0)
        ddx = dx[..., :, None] * dx[..., None, :]
        C = (1.0 / rs**3 - rs**2)[..., None, None] * eye + (-3.0 / rs**5 - 2.0)[
            ..., None, None
        ] * ddx
        C[~off] = 0.0
        coh = st.cohesion
        Fx[idx, :, idx, :] += coh[:, None, None] * C.sum(axis=1)
        Fx -= (coh[:, None, None, None] * C).transpose(0, 2, 1, 3)

    return Fx.reshape(2 * m, 2 * m), Fu.reshape(2 * m, 2 * n)
