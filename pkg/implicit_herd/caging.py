# stdlib
import logging
from dataclasses import dataclass

# 3p
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.optimize import brentq

# project
from implicit_herd.dynamics import GUARD_RADIUS, V_MAX, as_points, saturate_speed
from implicit_herd.errors import DegenerateAngle, DegenerateBarrier


log = logging.getLogger(__name__)

# Regularization added to the herd covariance, m^2
EPS_P = 1e-6


class CbfParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    varphi: float = Field(3.0, gt=0, description="desired distance to the inner perimeter, m")
    k_cbf: float = Field(50.0, gt=0, description="class-K gain")
    T: float = Field(0.01, gt=0, description="sampling time, s")


class CagingParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mu1: float = Field(7.0, description="inflation of the ellipse the herders settle on")
    mu2: float = Field(4.0, description="inflation of the ellipse the herders must stay out of")
    cbf: CbfParams = CbfParams()
    radial_tol: float = Field(0.05, gt=0, description="m")
    angle_tol_deg: float = Field(5.0, gt=0, description="deg")
    hysteresis: int = Field(20, ge=1, description="ticks the switch test must hold")

    @model_validator(mode="after")
    def check_inflation(self) -> "CagingParams":
        if not self.mu1 > self.mu2 > 1:
            raise ValueError(f"need mu1 > mu2 > 1, got mu1={self.mu1}, mu2={self.mu2}")
        return self


@dataclass
class HerdEllipse:
    center: np.ndarray
    P: np.ndarray
    mu: float = 1.0

    def radius_at(self, angle, mu: float | None = None) -> np.ndarray:
        """Distance from the center to the mu-ellipse boundary along the given angles."""
        mu = self.mu if mu is None else mu
        angle = np.asarray(angle, dtype=float)
        d = np.stack([np.cos(angle), np.sin(angle)], axis=-1)
        quad = np.einsum("...i,ij,...j->...", d, np.linalg.inv(self.P), d)
        return mu / np.sqrt(quad)

    def semi_axes(self, mu: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Semi-axis lengths (ascending) and the matching unit directions as columns."""
        mu = self.mu if mu is None else mu
        lam, V = np.linalg.eigh(self.P)
        return mu * np.sqrt(lam), V


@dataclass
class PolarControl:
    psi: np.ndarray
    rho: np.ndarray
    rho_star: np.ndarray
    psi_dot: np.ndarray
    rho_dot: np.ndarray
    # nominal Cartesian herder velocities, stacked
    velocity: np.ndarray

    @property
    def radial_error(self) -> np.ndarray:
        return np.abs(self.rho - self.rho_star)

    def gap_deviation_deg(self) -> float:
        gaps = angle_gaps(self.psi)
        return float(np.degrees(np.max(np.abs(gaps - 2 * np.pi / len(gaps)))))


@dataclass
class CagingStep:
    u: np.ndarray
    barrier: np.ndarray
    polar: PolarControl


def herd_ellipse(x, eps_P: float = EPS_P) -> HerdEllipse:
    X = as_points(x)
    center = X.mean(axis=0)
    d = X - center
    P = d.T @ d / len(X) + eps_P * np.eye(2)
    return HerdEllipse(center, P)


def angle_order(psi: np.ndarray) -> np.ndarray:
    """Herder indices sorted by angle, ties broken by index."""
    wrapped = np.mod(psi, 2 * np.pi)
    return np.lexsort((np.arange(len(psi)), wrapped))


def angle_gaps(psi: np.ndarray) -> np.ndarray:
    """Counter-clockwise gaps between angularly adjacent herders, summing to 2 pi."""
    ordered = np.mod(psi, 2 * np.pi)[angle_order(psi)]
    gaps = np.diff(np.append(ordered, ordered[0] + 2 * np.pi))
    return gaps


def polar_control(
    u, ellipse: HerdEllipse, mu1: float, guard_radius: float = GUARD_RADIUS
) -> PolarControl:
    """Even spreading in angle around the herd plus radial feedback onto the mu1 ellipse."""
    U = as_points(u)
    n = len(U)
    rel = U - ellipse.center
    rho = np.linalg.norm(rel, axis=1)
    if np.any(rho < guard_radius):
        i = int(np.argmin(rho))
        raise DegenerateAngle(f"herder {i} sits at the herd center ({rho[i]:.3e} m)")
    psi = np.arctan2(rel[:, 1], rel[:, 0])

    order = angle_order(psi)
    wrapped = np.mod(psi, 2 * np.pi)
    psi_dot = np.zeros(n)
    for k, i in enumerate(order):
        ahead = order[(k + 1) % n]
        behind = order[(k - 1) % n]
        psi_dot[i] = np.mod(wrapped[ahead] - wrapped[i], 2 * np.pi) - np.mod(
            wrapped[i] - wrapped[behind], 2 * np.pi
        )

    rho_star = ellipse.radius_at(psi, mu1)
    rho_dot = -(rho - rho_star)
    e_r = rel / rho[:, None]
    e_psi = np.column_stack([-e_r[:, 1], e_r[:, 0]])
    velocity = rho_dot[:, None] * e_r + (rho * psi_dot)[:, None] * e_psi
    return PolarControl(psi, rho, rho_star, psi_dot, rho_dot, velocity.ravel())


def _closest_in_frame(a: float, b: float, y0: float, y1: float) -> tuple[float, float]:
    """Nearest boundary point for a >= b > 0 and a first-quadrant query."""
    if y1 > 0:
        if y0 > 0:
            z0, z1 = y0 / a, y1 / b
            g = z0**2 + z1**2 - 1
            if g == 0:
                return y0, y1
            r0 = (a / b) ** 2

            def stationarity(s: float) -> float:
                return (r0 * z0 / (s + r0)) ** 2 + (z1 / (s + 1)) ** 2 - 1

            lo = z1 - 1
            hi = 0.0 if g < 0 else float(np.hypot(r0 * z0, z1)) - 1
            s = brentq(stationarity, lo, hi, xtol=1e-15, maxiter=200)
            return r0 * y0 / (s + r0), y1 / (s + 1)
        return 0.0, b
    num, den = a * y0, a * a - b * b
    if num < den:
        xd = num / den
        return a * xd, b * np.sqrt(1 - xd * xd)
    return a, 0.0


def closest_point_on_ellipse(ellipse: HerdEllipse, q, mu: float | None = None) -> np.ndarray:
    """Euclidean-nearest point on the boundary of the mu-ellipse, for inside or outside queries."""
    axes, V = ellipse.semi_axes(mu)
    local = V.T @ (np.asarray(q, dtype=float) - ellipse.center)
    # eigh sorts ascending: column 1 is the major axis
    a, b = axes[1], axes[0]
    p_major, p_minor = _closest_in_frame(a, b, abs(local[1]), abs(local[0]))
    out = np.array([np.copysign(p_minor, local[0]), np.copysign(p_major, local[1])])
    return ellipse.center + V @ out


def barrier_value(delta: np.ndarray, velocity: np.ndarray, params: CbfParams) -> float:
    dist = float(np.linalg.norm(delta))
    return dist + params.T * float(delta @ velocity) / dist - params.varphi


def cbf_filter(
    u_nom: np.ndarray,
    u_i: np.ndarray,
    e_i: np.ndarray,
    params: CbfParams,
    guard_radius: float = GUARD_RADIUS,
) -> tuple[np.ndarray, float]:
    """Minimal change to u_nom keeping the herder outside the inner ellipse.

    Returns the filtered velocity and the barrier value at the nominal action.
    """
    delta = np.asarray(u_i, dtype=float) - np.asarray(e_i, dtype=float)
    dist = float(np.linalg.norm(delta))
    if dist < guard_radius:
        raise DegenerateBarrier(f"herder on the inner perimeter ({dist:.3e} m)")
    u_nom = np.asarray(u_nom, dtype=float)
    h = barrier_value(delta, u_nom, params)
    a = delta / dist
    b = -params.k_cbf * h**3
    slack = float(a @ u_nom) - b
    if slack >= 0:
        return u_nom, h
    return u_nom - slack * a, h


def caging_step(
    x,
    u,
    params: CagingParams,
    dt: float,
    v_max: float = V_MAX,
    guard_radius: float = GUARD_RADIUS,
) -> CagingStep:
    ellipse = herd_ellipse(x)
    polar = polar_control(u, ellipse, params.mu1, guard_radius)
    U = as_points(u)
    nominal = as_points(polar.velocity)
    inner = np.array([closest_point_on_ellipse(ellipse, u_i, params.mu2) for u_i in U])
    filtered = np.empty_like(U)
    for i, (u_i, v_i, e_i) in enumerate(zip(U, nominal, inner)):
        filtered[i], _ = cbf_filter(v_i, u_i, e_i, params.cbf, guard_radius)
    applied = as_points(saturate_speed(filtered.ravel(), v_max))
    barrier = np.array(
        [barrier_value(u_i - e_i, v_i, params.cbf) for u_i, e_i, v_i in zip(U, inner, applied)]
    )
    return CagingStep((U + dt * applied).ravel(), barrier, polar)


def caging_converged(polar: PolarControl, params: CagingParams) -> bool:
    return bool(
        np.all(polar.radial_error < params.radial_tol)
        and polar.gap_deviation_deg() < params.angle_tol_deg
    )
