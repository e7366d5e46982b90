# stdlib
import logging
from collections import deque
from dataclasses import dataclass

# 3p
import numpy as np
from scipy.linalg import expm

# project
from implicit_herd.controller import (
    GainReport,
    GainSet,
    ImplicitController,
    WorkingEquation,
)
from implicit_herd.dynamics import eval_cohesion, repulsion_field, saturate_speed
from implicit_herd.errors import LowExcitation


log = logging.getLogger(__name__)

EXCITATION_FLOOR = 1e-4
THETA_MIN = 1e-3


@dataclass
class ParamEstimate:
    theta_hat: np.ndarray
    theta_true: np.ndarray | None = None
    theta_min: float = THETA_MIN

    def project(self) -> None:
        self.theta_hat = np.maximum(self.theta_hat, self.theta_min)

    def relative_error(self) -> np.ndarray:
        if self.theta_true is None:
            raise ValueError("no ground truth attached to this estimate")
        return np.abs(self.theta_hat - self.theta_true) / self.theta_true


@dataclass
class AdaptState:
    """Finite-difference signals feeding the adaptation law.

    h_tilde is the model mismatch at the last completed tick. x_dot_measured,
    x_dot_hat and dh_dt are aligned one tick earlier, where the finite
    difference of h is centered.
    """

    h_tilde: np.ndarray
    x_dot_measured: np.ndarray
    x_dot_hat: np.ndarray
    dh_dt: np.ndarray
    # theta-free per-evader field, shape (m, 2)
    excitation: np.ndarray


def discrete_gain(K_theta: np.ndarray, dt: float) -> np.ndarray:
    """Gain whose explicit step reproduces exp(-K_theta dt) decay over one period."""
    return (np.eye(K_theta.shape[0]) - expm(-K_theta * dt)) / dt


def h_tilde_star(
    h_tilde: np.ndarray,
    dh_dt_measured: np.ndarray,
    J_x_hat: np.ndarray,
    x_dot: np.ndarray,
    x_dot_hat: np.ndarray,
    K_theta: np.ndarray,
    dt: float | None = None,
) -> np.ndarray:
    gain = K_theta if dt is None else discrete_gain(K_theta, dt)
    return -gain @ h_tilde - dh_dt_measured + J_x_hat @ (x_dot - x_dot_hat)


def block_pinv(f_j: np.ndarray, floor: float = EXCITATION_FLOOR, evader: int = 0) -> np.ndarray:
    """Least-squares inverse of a single 2x1 column."""
    norm = float(np.linalg.norm(f_j))
    if norm < floor:
        raise LowExcitation(evader, norm)
    return f_j / norm**2


def theta_rate(
    adapt: AdaptState,
    w_hat: WorkingEquation,
    u_dot: np.ndarray,
    K_theta: np.ndarray,
    *,
    dt: float | None = None,
    excitation_floor: float = EXCITATION_FLOOR,
) -> np.ndarray:
    target = (
        h_tilde_star(
            adapt.h_tilde, adapt.dh_dt, w_hat.J_x,
            adapt.x_dot_measured, adapt.x_dot_hat, K_theta, dt,
        )
        + w_hat.J_x @ adapt.x_dot_hat
        + w_hat.J_u @ u_dot
    )
    blocks = target.reshape(-1, 2)
    rate = np.zeros(len(blocks))
    for j, f_j in enumerate(adapt.excitation):
        try:
            rate[j] = -block_pinv(f_j, excitation_floor, j) @ blocks[j]
        except LowExcitation as e:
            log.debug(f"adaptation frozen: {e}")
    return rate


def check_Kbar_negdef(
    gains: GainSet,
    J_x: np.ndarray,
    x_tilde: np.ndarray | None = None,
    h: np.ndarray | None = None,
) -> GainReport:
    dim = gains.K_theta.shape[0]
    x_tilde = np.zeros(dim) if x_tilde is None else x_tilde
    h = np.zeros(dim) if h is None else h
    zero = np.zeros((dim, dim))
    half = 0.5 * np.eye(dim)
    coupling = -0.5 * J_x @ gains.K_theta
    K = np.block(
        [
            [-gains.kf(x_tilde), half, zero],
            [half, -gains.kh(h), coupling],
            [zero, coupling.T, -gains.K_theta],
        ]
    )
    eig = np.linalg.eigvalsh(0.5 * (K + K.T))
    return GainReport(bool(eig[-1] < 0), float(eig[0]), float(eig[-1]))


def kbar_envelope(gains: GainSet, upper: float = 1e3, iters: int = 60) -> float:
    """Largest s such that J_x = s I keeps the adaptive composite matrix negative definite."""
    dim = gains.K_theta.shape[0]
    eye = np.eye(dim)
    if not check_Kbar_negdef(gains, 0.0 * eye).ok:
        return 0.0
    if check_Kbar_negdef(gains, upper * eye).ok:
        return upper
    lo, hi = 0.0, upper
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if check_Kbar_negdef(gains, mid * eye).ok:
            lo = mid
        else:
            hi = mid
    return lo


@dataclass
class _Snapshot:
    x: np.ndarray
    phi: np.ndarray
    cohesion: np.ndarray
    # f*(x_tilde) + x_star_dot at this tick
    reference_term: np.ndarray
    w_hat: WorkingEquation
    u_dot: np.ndarray
    x_dot: np.ndarray | None = None
    x_dot_hat: np.ndarray | None = None
    h_measured: np.ndarray | None = None


class AdaptiveLaw:
    """Online estimate of the evader gains from backward differences of the observed herd."""

    def __init__(
        self,
        estimate: ParamEstimate,
        controller: ImplicitController,
        dt: float,
        *,
        excitation_floor: float = EXCITATION_FLOOR,
        exact_discretization: bool = True,
    ):
        self.estimate = estimate
        self.controller = controller
        self.dt = dt
        self.excitation_floor = excitation_floor
        self.exact_discretization = exact_discretization
        self.history: deque[_Snapshot] = deque(maxlen=2)
        self.state: AdaptState | None = None

    @property
    def theta_hat(self) -> np.ndarray:
        return self.estimate.theta_hat

    def record(self, x, u, w_hat: WorkingEquation, u_dot: np.ndarray) -> None:
        """Remember the tick that is about to be integrated."""
        ctl = self.controller
        cohesion = np.array([p.cohesion for p in ctl.params])
        self.history.append(
            _Snapshot(
                x=np.array(x, dtype=float),
                phi=repulsion_field(x, u, ctl.params, ctl.guard_radius),
                cohesion=eval_cohesion(x, cohesion, ctl.guard_radius),
                reference_term=w_hat.f - w_hat.h,
                w_hat=w_hat,
                u_dot=np.array(u_dot, dtype=float),
            )
        )

    def update(self, x_now) -> AdaptState | None:
        """Advance theta_hat by one period using the herd observed now."""
        if not self.history:
            return None
        prev = self.history[-1]
        older = self.history[0] if len(self.history) == 2 else None
        ctl = self.controller
        theta_hat = self.estimate.theta_hat

        x_dot = (np.asarray(x_now, dtype=float) - prev.x) / self.dt
        x_dot_hat = saturate_speed(
            (theta_hat[:, None] * prev.phi).ravel() + prev.cohesion,
            ctl.v_max,
            ctl.saturation,
        )
        prev.x_dot, prev.x_dot_hat = x_dot, x_dot_hat
        prev.h_measured = x_dot - prev.reference_term
        h_tilde = x_dot - x_dot_hat

        if older is not None and older.h_measured is not None:
            state = AdaptState(
                h_tilde=h_tilde,
                x_dot_measured=older.x_dot,
                x_dot_hat=older.x_dot_hat,
                dh_dt=(prev.h_measured - older.h_measured) / self.dt,
                excitation=prev.phi,
            )
            w_hat, u_dot = older.w_hat, older.u_dot
        else:
            zero = np.zeros_like(h_tilde)
            state = AdaptState(h_tilde, zero, zero, zero, prev.phi)
            w_hat, u_dot = prev.w_hat, np.zeros_like(prev.u_dot)

        rate = theta_rate(
            state,
            w_hat,
            u_dot,
            ctl.gains.K_theta,
            dt=self.dt if self.exact_discretization else None,
            excitation_floor=self.excitation_floor,
        )
        self.estimate.theta_hat = theta_hat + self.dt * rate
        self.estimate.project()
        self.state = state
        return state
