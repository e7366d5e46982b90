# stdlib
import logging
from dataclasses import dataclass

# 3p
import numpy as np
from pydantic import BaseModel, ConfigDict, Field

# project
from implicit_herd.controller import ImplicitController
from implicit_herd.errors import GridMismatch, GuardViolation, NoConvergence
from implicit_herd.trace import Trace


log = logging.getLogger(__name__)

# Damping is kept inside this band so the normal equations stay solvable.
_DAMPING_FLOOR = 1e-12
_DAMPING_CEILING = 1e12


class LMConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    damping0: float = Field(1e-3, gt=0)
    damping_up: float = Field(10.0, gt=1)
    damping_down: float = Field(10.0, gt=1)
    max_iters: int = Field(100, ge=1)
    tol_residual: float = Field(1e-8, gt=0, description="m/s")
    tol_step: float = Field(1e-12, gt=0, description="m")


@dataclass
class LMResult:
    u: np.ndarray
    iterations: int
    residual: float


def _lm_step(J: np.ndarray, h: np.ndarray, damping: float) -> np.ndarray:
    rows, cols = J.shape
    if cols <= rows:
        return -np.linalg.solve(J.T @ J + damping * np.eye(cols), J.T @ h)
    # same step through the smaller system when there are more inputs than residuals
    return -J.T @ np.linalg.solve(J @ J.T + damping * np.eye(rows), h)


def lm_solve(
    x,
    u0,
    controller: ImplicitController,
    t: float,
    cfg: LMConfig | None = None,
    theta=None,
) -> LMResult:
    """Root of the working equation in u by Levenberg-Marquardt, warm-started at u0.

    Iterates that cross the guard radius are rejected like any other failed step.
    """
    cfg = cfg or LMConfig()
    u = np.array(u0, dtype=float).ravel()
    w = controller.working_equation(x, u, t, theta)
    residual = float(np.linalg.norm(w.h))
    if residual <= cfg.tol_residual:
        return LMResult(u, 0, residual)

    damping = cfg.damping0
    for iteration in range(1, cfg.max_iters + 1):
        delta = _lm_step(w.J_u, w.h, damping)
        try:
            trial = controller.working_equation(x, u + delta, t, theta)
        except GuardViolation:
            damping = min(damping * cfg.damping_up, _DAMPING_CEILING)
            continue

        trial_residual = float(np.linalg.norm(trial.h))
        if trial_residual < residual:
            u, w, residual = u + delta, trial, trial_residual
            damping = max(damping / cfg.damping_down, _DAMPING_FLOOR)
            if residual <= cfg.tol_residual:
                return LMResult(u, iteration, residual)
            if np.linalg.norm(delta) <= cfg.tol_step:
                break
        else:
            damping = damping * cfg.damping_up
            if damping > _DAMPING_CEILING:
                break

    raise NoConvergence(iteration, residual)


def rate_limit(u_prev: np.ndarray, u_target: np.ndarray, v_max: float, dt: float) -> np.ndarray:
    """Move each herder toward its target by at most v_max * dt."""
    step = (np.asarray(u_target) - np.asarray(u_prev)).reshape(-1, 2)
    length = np.linalg.norm(step, axis=1)
    scale = np.minimum(1.0, v_max * dt / np.maximum(length, np.finfo(float).tiny))
    return np.asarray(u_prev) + (step * scale[:, None]).ravel()


@dataclass
class TrajectoryGap:
    t: np.ndarray
    evader_gap: np.ndarray
    input_gap: np.ndarray

    @property
    def max_evader_gap(self) -> float:
        return float(np.max(self.evader_gap, initial=0.0))

    @property
    def max_input_gap(self) -> float:
        return float(np.max(self.input_gap, initial=0.0))

    def after(self, t0: float) -> "TrajectoryGap":
        keep = self.t > t0
        return TrajectoryGap(self.t[keep], self.evader_gap[keep], self.input_gap[keep])


def compare_trajectories(a: Trace, b: Trace) -> TrajectoryGap:
    """Per-tick worst position difference between two runs on the same grid."""
    ta, tb = a.column("t"), b.column("t")
    if ta.shape != tb.shape or not np.array_equal(ta, tb):
        raise GridMismatch(f"time grids differ ({len(ta)} vs {len(tb)} rows)")
    if (a.header.m, a.header.n) != (b.header.m, b.header.n):
        raise GridMismatch("traces describe different herd sizes")

    evader_gap = np.linalg.norm(a.evaders() - b.evaders(), axis=-1).max(axis=1)
    input_gap = np.linalg.norm(a.herders() - b.herders(), axis=-1).max(axis=1)
    return TrajectoryGap(ta, evader_gap, input_gap)
