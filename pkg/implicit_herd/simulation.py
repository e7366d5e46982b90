# stdlib
import logging
import re
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Callable

# 3p
import numpy as np
from pydantic import BaseModel

# project
from implicit_herd.adaptation import AdaptiveLaw, ParamEstimate
from implicit_herd.baseline import LMConfig, lm_solve, rate_limit
from implicit_herd.caging import (
    CagingParams,
    PolarControl,
    caging_converged,
    caging_step,
    herd_ellipse,
)
from implicit_herd.controller import (
    GainSet,
    ImplicitController,
    ReferenceSignal,
    WorkingEquation,
    check_K_negdef,
    existence_diagnostics,
)
from implicit_herd.dynamics import (
    GUARD_RADIUS,
    V_MAX,
    EvaderParams,
    Saturation,
    as_points,
    theta_of,
)
from implicit_herd.errors import ConfigError, HerdError, NoConvergence, UnknownKind
from implicit_herd.estimator import (
    EstimatorBelief,
    EstimatorSettings,
    MeasurementPacket,
    absorb,
    fuse,
    initial_beliefs,
    propagate_covariance,
    relinearize,
    rmse_from_means,
    sense,
    stream_rng,
)
from implicit_herd.trace import Trace, TraceHeader, TraceRecord


log = logging.getLogger(__name__)


class ControllerMode(str, Enum):
    IMPLICIT = "implicit"
    ADAPTIVE = "adaptive"
    BASELINE = "baseline"


class Integrator(str, Enum):
    EULER = "euler"
    RK4 = "rk4"


class Phase(IntEnum):
    CAGING = 0
    HERDING = 1


@dataclass
class CentroidSettings:
    virtual: EvaderParams
    target: np.ndarray
    split_time: float | None = None
    # shape (2, 2): one target per sub-herd
    split_targets: np.ndarray | None = None

    @property
    def max_groups(self) -> int:
        return 1 if self.split_time is None else 2


@dataclass
class Scenario:
    params: list[EvaderParams]
    x0: np.ndarray
    u0: np.ndarray
    reference: ReferenceSignal
    name: str = "scenario"
    mode: ControllerMode = ControllerMode.IMPLICIT
    k_f: float = 0.25
    k_h: float = 50.0
    k_theta: float = 200.0
    lambda_pinv: float = 1e-8
    T: float = 0.01
    horizon: float = 30.0
    seed: int = 0
    v_max: float = V_MAX
    integrator: Integrator = Integrator.EULER
    saturation: Saturation = "clamp"
    guard_radius: float = GUARD_RADIUS
    # None means perfect state feedback
    estimator: EstimatorSettings | None = None
    caging: CagingParams | None = None
    centroid: CentroidSettings | None = None
    lm: LMConfig = field(default_factory=LMConfig)
    theta_hat0: np.ndarray | None = None
    theta_min: float = 1e-3
    excitation_floor: float = 1e-4
    settling_band: float = 0.02

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).ravel()
        self.u0 = np.asarray(self.u0, dtype=float).ravel()

    @property
    def m(self) -> int:
        return self.x0.size // 2

    @property
    def n(self) -> int:
        return self.u0.size // 2

    @property
    def theta_true(self) -> np.ndarray:
        return theta_of(self.params, self.m)

    @property
    def ticks(self) -> int:
        return int(round(self.horizon / self.T))

    def gains(self, dim: int | None = None) -> GainSet:
        dim = 2 * self.m if dim is None else dim
        return GainSet.isotropic(dim, self.k_f, self.k_h, self.k_theta, self.lambda_pinv)

    def validate(self) -> None:
        if self.T <= 0 or self.horizon <= 0:
            raise ConfigError("control period and horizon must be positive")
        if len(self.params) != self.m:
            raise ConfigError(f"{self.m} evaders but {len(self.params)} parameter sets")
        if self.mode == ControllerMode.BASELINE and self.estimator is not None:
            raise ConfigError("the root-finding baseline runs on perfect feedback only")
        if self.centroid is not None and self.mode != ControllerMode.IMPLICIT:
            raise ConfigError("centroid herding supports the implicit controller only")
        if self.caging is None and self.mode != ControllerMode.BASELINE:
            d_m = self.estimator.d_m if self.estimator else EstimatorSettings().d_m
            X, U = as_points(self.x0), as_points(self.u0)
            dist = np.linalg.norm(U[:, None, :] - X[None, :, :], axis=-1).min(axis=1)
            for i in np.flatnonzero(dist > d_m):
                log.warning(f"herder {i} starts {dist[i]:.2f} m from the nearest evader")


def make_reference(kind: str, targets, **params) -> ReferenceSignal:
    if kind == "static":
        return ReferenceSignal.static(targets)
    if kind == "sinusoid":
        return ReferenceSignal.sinusoid(
            targets,
            w=params.get("w", (0.05, 0.1, 0.02)),
            v=params.get("v", 0.05),
            amplitude=params.get("amplitude", 0.5),
        )
    raise UnknownKind(f"unknown reference kind '{kind}'")


def square_layout(
    m: int,
    n: int,
    side: float = 5.0,
    ring_scale: float = 1.5,
    target_offset=(2.0, 0.0),
    center=(0.0, 0.0),
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Evaders uniform in a square, herders evenly on a ring around them.

    Returns stacked (x0, u0, targets).
    """
    rng = np.random.default_rng(seed)
    X = np.asarray(center, dtype=float) + rng.uniform(-side / 2, side / 2, size=(m, 2))
    c = X.mean(axis=0)
    radius = max(float(np.linalg.norm(X - c, axis=1).max()), side / 2)
    angles = 2 * np.pi * np.arange(n) / n
    U = c + ring_scale * radius * np.column_stack([np.cos(angles), np.sin(angles)])
    targets = X + np.asarray(target_offset, dtype=float)
    return X.ravel(), U.ravel(), targets.ravel()


def split_herd(x, k: int = 2) -> list[np.ndarray]:
    """Two sub-herds split at the median along the herd's principal axis."""
    if k != 2:
        raise ValueError(f"only two-way splits are supported, got k={k}")
    X = as_points(x)
    if len(X) < 2:
        raise ValueError("cannot split a herd of fewer than two evaders")
    ellipse = herd_ellipse(X)
    _, V = ellipse.semi_axes()
    proj = (X - ellipse.center) @ V[:, 1]
    order = np.argsort(proj, kind="stable")
    half = len(X) // 2
    return [np.sort(order[:half]), np.sort(order[half:])]


class FailureRecord(BaseModel):
    tick: int
    t: float
    cause: str
    message: str


class MetricsReport(BaseModel):
    settling_time: float = float("nan")
    steady_state_error: float = float("nan")
    h_decay_rate: float = float("nan")
    theta_error_final: float = float("nan")
    rmse_final: float = float("nan")
    min_barrier_value: float = float("nan")
    switch_time: float = float("nan")
    # worst radial error and angular-gap deviation on the tick the cage handed over
    switch_radial_error: float = float("nan")
    switch_gap_deviation_deg: float = float("nan")
    rmse_curve: list[tuple[float, float, float]] = []

    def summary(self) -> dict[str, float]:
        return self.model_dump(exclude={"rmse_curve"})


@dataclass
class RunResult:
    trace: Trace
    metrics: MetricsReport
    failure: FailureRecord | None = None
    packets: list[tuple[int, int, bytes]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.failure is None


@dataclass
class SimState:
    k: int
    x: np.ndarray
    u: np.ndarray
    phase: Phase
    hold: int = 0
    u_limited: np.ndarray | None = None
    beliefs: list[EstimatorBelief] | None = None
    groups: list[np.ndarray] | None = None


def _rk4(f: Callable[[np.ndarray], np.ndarray], z: np.ndarray, dt: float) -> np.ndarray:
    k1 = f(z)
    k2 = f(z + 0.5 * dt * k1)
    k3 = f(z + 0.5 * dt * k2)
    k4 = f(z + dt * k3)
    return z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


class Simulation:
    """One scenario, advanced tick by tick."""

    def __init__(
        self,
        scenario: Scenario,
        scenario_hash: str = "",
        replay: dict[tuple[int, int], bytes] | None = None,
    ):
        scenario.validate()
        self.scenario = scenario
        self.scenario_hash = scenario_hash
        self.replay = replay
        self.controller = ImplicitController(
            scenario.params,
            scenario.gains(),
            scenario.reference,
            scenario.v_max,
            scenario.saturation,
            scenario.guard_radius,
        )
        self.laws: list[AdaptiveLaw] = []
        self.packets: list[tuple[int, int, bytes]] = []
        self._centroid_controllers: dict[int, ImplicitController] = {}
        self.switch_polar: PolarControl | None = None

    @property
    def m(self) -> int:
        return self.scenario.m

    @property
    def n(self) -> int:
        return self.scenario.n

    def initial_state(self) -> SimState:
        sc = self.scenario
        phase = Phase.CAGING if sc.caging is not None else Phase.HERDING
        state = SimState(0, sc.x0.copy(), sc.u0.copy(), phase)
        if sc.centroid is not None:
            state.groups = [np.arange(self.m)]
        if phase == Phase.HERDING:
            self._start_herding(state)
        return state

    def _start_herding(self, state: SimState) -> None:
        sc = self.scenario
        if sc.mode == ControllerMode.BASELINE:
            state.u_limited = state.u.copy()
        if sc.estimator is not None:
            truth = np.concatenate([state.x, state.u])
            state.beliefs = initial_beliefs(truth, self.n, sc.estimator, sc.seed)
        if sc.mode == ControllerMode.ADAPTIVE:
            theta0 = sc.theta_hat0 if sc.theta_hat0 is not None else 0.75 * sc.theta_true
            count = self.n if sc.estimator is not None else 1
            self.laws = [
                AdaptiveLaw(
                    ParamEstimate(np.array(theta0, dtype=float), sc.theta_true, sc.theta_min),
                    self.controller,
                    sc.T,
                    excitation_floor=sc.excitation_floor,
                )
                for _ in range(count)
            ]

    def step(self, state: SimState) -> tuple[SimState, TraceRecord]:
        """Advance one control period and describe the state it started from."""
        sc = self.scenario
        if state.phase == Phase.CAGING:
            return self._caging_tick(state)
        if sc.centroid is not None:
            return self._centroid_tick(state)
        if sc.mode == ControllerMode.BASELINE:
            return self._baseline_tick(state)
        if sc.estimator is not None:
            return self._estimated_tick(state)
        return self._implicit_tick(state)

    def _t(self, k: int) -> float:
        return k * self.scenario.T

    def _theta(self, law: AdaptiveLaw | None):
        return None if law is None else law.theta_hat

    def _diagnostics(self, w: WorkingEquation, gains: GainSet) -> tuple[int, float, float]:
        report = existence_diagnostics(w)
        margin = check_K_negdef(gains, w.h, w.x_tilde).margin
        return report.rank, report.condition_number, margin

    def _record(
        self, state: SimState, w: WorkingEquation, gains: GainSet | None = None, **extra
    ) -> TraceRecord:
        rank, cond, margin = self._diagnostics(w, gains or self.controller.gains)
        t = self._t(state.k)
        record = TraceRecord(
            t=t,
            phase=int(state.phase),
            x=state.x.copy(),
            x_star=self.scenario.reference.x_star(t).copy(),
            u=state.u.copy(),
            h=w.h.copy(),
            rank=rank,
            cond=cond,
            k_margin=margin,
        )
        if self.scenario.mode == ControllerMode.ADAPTIVE:
            record.theta_hat = np.mean([law.theta_hat for law in self.laws], axis=0)
            law_state = self.laws[0].state
            record.h_tilde = (
                np.zeros(2 * self.m) if law_state is None else law_state.h_tilde.copy()
            )
        for key, value in extra.items():
            setattr(record, key, value)
        return record

    def _evader_velocity(self, x, u) -> np.ndarray:
        return self.controller.evader_velocity(x, u)

    def _advance(self, x, u, u_dot, rate: Callable | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Integrate evaders with the true model and herders with u_dot (or rate(x, u) under RK4)."""
        sc = self.scenario
        if sc.integrator == Integrator.EULER:
            return x + sc.T * self._evader_velocity(x, u), u + sc.T * u_dot

        split = 2 * self.m

        def closed_loop(z: np.ndarray) -> np.ndarray:
            zx, zu = z[:split], z[split:]
            zu_dot = u_dot if rate is None else rate(zx, zu)
            return np.concatenate([self._evader_velocity(zx, zu), zu_dot])

        z = _rk4(closed_loop, np.concatenate([x, u]), sc.T)
        return z[:split], z[split:]

    def _next(self, state: SimState, x, u, **changes) -> SimState:
        return SimState(
            k=state.k + 1,
            x=x,
            u=u,
            phase=changes.get("phase", state.phase),
            hold=changes.get("hold", state.hold),
            u_limited=changes.get("u_limited", state.u_limited),
            beliefs=changes.get("beliefs", state.beliefs),
            groups=changes.get("groups", state.groups),
        )

    def _implicit_tick(self, state: SimState) -> tuple[SimState, TraceRecord]:
        x, u, t = state.x, state.u, self._t(state.k)
        law = self.laws[0] if self.laws else None
        if law is not None:
            law.update(x)
        theta = self._theta(law)
        u_dot, w = self.controller.rate(x, u, t, theta)
        if law is not None:
            law.record(x, u, w, u_dot)
            w = self.controller.working_equation(x, u, t)
        record = self._record(state, w)

        def rate(zx, zu):
            return self.controller.rate(zx, zu, t, theta)[0]

        x_next, u_next = self._advance(x, u, u_dot, rate)
        return self._next(state, x_next, u_next), record

    def _packet(self, truth: np.ndarray, herder: int, tick: int) -> MeasurementPacket:
        dim = truth.size
        if self.replay is not None:
            return MeasurementPacket.from_bytes(self.replay[(tick, herder)], dim)
        est = self.scenario.estimator
        R = est.r * np.eye(dim)
        rng = stream_rng(self.scenario.seed, herder, tick)
        return sense(truth, herder, self.m, R, est.d_m, rng, tick)

    def _estimated_tick(self, state: SimState) -> tuple[SimState, TraceRecord]:
        sc = self.scenario
        est = sc.estimator
        x, u, t = state.x, state.u, self._t(state.k)
        applied = np.zeros_like(u)
        beliefs: list[EstimatorBelief] = []
        thetas = []
        for i, belief in enumerate(state.beliefs):
            xb, ub = belief.split(self.m)
            law = self.laws[i] if self.laws else None
            if law is not None:
                law.update(xb)
            theta = self._theta(law)
            u_dot, w = self.controller.rate(xb, ub, t, theta)
            if law is not None:
                law.record(xb, ub, w, u_dot)
            applied[2 * i : 2 * i + 2] = u_dot[2 * i : 2 * i + 2]
            xi_dot = np.concatenate([self.controller.evader_velocity(xb, ub, theta), u_dot])
            beliefs.append(replace(belief, xi=belief.xi + sc.T * xi_dot))
            thetas.append(theta)

        truth_now = np.concatenate([x, u])
        means = np.array([b.xi for b in state.beliefs])
        report = rmse_from_means(means, truth_now, self.m)
        record = self._record(
            state,
            self.controller.working_equation(x, u, t),
            rmse=(report.evaders, report.herders),
            beliefs=means,
        )

        x_next, u_next = self._advance(x, u, applied)
        tick = state.k + 1
        t_next = self._t(tick)
        truth = np.concatenate([x_next, u_next])
        # relinearize on exchange rounds, propagate and sense every tick
        exchange = tick % est.ratio == 0
        for i, theta in enumerate(thetas):
            if exchange or beliefs[i].F is None:
                beliefs[i] = relinearize(beliefs[i], self._belief_field(theta), t_next, sc.T)
        beliefs = [propagate_covariance(b, sc.T) for b in beliefs]
        packets = [self._packet(truth, i, tick) for i in range(self.n)]
        self.packets.extend((tick, p.sender, p.to_bytes()) for p in packets)
        beliefs = [absorb(b, [p]) for b, p in zip(beliefs, packets)]
        if exchange:
            beliefs = fuse(beliefs, packets, u_next, include_own=False)
        return self._next(state, x_next, u_next, beliefs=beliefs), record

    def _belief_field(self, theta) -> Callable[[np.ndarray, float], np.ndarray]:
        def expanded(xi: np.ndarray, t: float) -> np.ndarray:
            return self.controller.expanded_field(xi, t, theta)

        return expanded

    def _baseline_tick(self, state: SimState) -> tuple[SimState, TraceRecord]:
        sc = self.scenario
        x, t = state.x, self._t(state.k)
        try:
            u_root = lm_solve(x, state.u, self.controller, t, sc.lm).u
        except NoConvergence as e:
            log.warning(f"tick {state.k}: {e}; keeping previous input")
            u_root = state.u
        w = self.controller.working_equation(x, u_root, t)
        at_root = SimState(state.k, x, u_root, state.phase)
        record = self._record(at_root, w, u_limited=state.u_limited.copy())
        x_next, _ = self._advance(x, u_root, np.zeros_like(u_root))
        u_limited = rate_limit(state.u_limited, u_root, sc.v_max, sc.T)
        return self._next(state, x_next, u_root.copy(), u_limited=u_limited), record

    def _caging_tick(self, state: SimState) -> tuple[SimState, TraceRecord]:
        sc = self.scenario
        x, u = state.x, state.u
        cage = caging_step(x, u, sc.caging, sc.T, sc.v_max, sc.guard_radius)
        hold = state.hold + 1 if caging_converged(cage.polar, sc.caging) else 0

        nan2m = np.full(2 * self.m, np.nan)
        t = self._t(state.k)
        record = TraceRecord(
            t=t,
            phase=int(state.phase),
            x=x.copy(),
            x_star=sc.reference.x_star(t).copy(),
            u=u.copy(),
            h=nan2m,
            rank=0,
            cond=float("nan"),
            k_margin=float("nan"),
            barrier_min=float(cage.barrier.min()),
        )
        self._fill_optional(record)

        x_next, _ = self._advance(x, u, np.zeros_like(u))
        nxt = self._next(state, x_next, cage.u, hold=hold)
        if hold >= sc.caging.hysteresis:
            log.info(f"Caging settled at t={self._t(state.k + 1):.2f}s, switching to herding")
            self.switch_polar = cage.polar
            nxt.phase = Phase.HERDING
            nxt.hold = 0
            self._start_herding(nxt)
        return nxt, record

    def _fill_optional(self, record: TraceRecord) -> None:
        """Keep optional columns present (as NaN) on rows where they are undefined."""
        sc = self.scenario
        m, n = self.m, self.n
        if sc.mode == ControllerMode.ADAPTIVE:
            record.h_tilde = np.full(2 * m, np.nan)
            record.theta_hat = np.full(m, np.nan)
        if sc.mode == ControllerMode.BASELINE:
            record.u_limited = record.u.copy()
        if sc.estimator is not None:
            record.rmse = (float("nan"), float("nan"))
            record.beliefs = np.full((n, 2 * (m + n)), np.nan)
        if sc.centroid is not None:
            groups = sc.centroid.max_groups
            record.centroids = np.full((groups, 2), np.nan)
            record.centroid_targets = np.full((groups, 2), np.nan)

    def _centroid_controller(self, groups: int) -> ImplicitController:
        if groups not in self._centroid_controllers:
            sc = self.scenario
            self._centroid_controllers[groups] = ImplicitController(
                [sc.centroid.virtual] * groups,
                sc.gains(2 * groups),
                ReferenceSignal.static(self._group_targets(groups)),
                sc.v_max,
                sc.saturation,
                sc.guard_radius,
            )
        return self._centroid_controllers[groups]

    def _group_targets(self, groups: int) -> np.ndarray:
        settings = self.scenario.centroid
        if groups == 1:
            return np.asarray(settings.target, dtype=float).reshape(1, 2)
        return np.asarray(settings.split_targets, dtype=float).reshape(2, 2)

    def _assign_split(self, x: np.ndarray) -> list[np.ndarray]:
        """Split the herd and pair each half with the closer of the two targets."""
        X = as_points(x)
        groups = split_herd(X)
        targets = self._group_targets(2)
        centers = np.array([X[g].mean(axis=0) for g in groups])
        straight = np.linalg.norm(centers - targets, axis=1).sum()
        crossed = np.linalg.norm(centers - targets[::-1], axis=1).sum()
        return groups if straight <= crossed else groups[::-1]

    def _centroid_tick(self, state: SimState) -> tuple[SimState, TraceRecord]:
        sc = self.scenario
        settings = sc.centroid
        x, u, t = state.x, state.u, self._t(state.k)
        groups = state.groups
        if settings.split_time is not None and len(groups) == 1 and t >= settings.split_time:
            groups = self._assign_split(x)
            log.info(f"Splitting herd at t={t:.2f}s into {[len(g) for g in groups]}")

        X = as_points(x)
        centers = np.array([X[g].mean(axis=0) for g in groups])
        ctl = self._centroid_controller(len(groups))
        u_dot, w = ctl.rate(centers.ravel(), u, t)

        targets = self._group_targets(len(groups))
        per_evader_target = np.empty_like(X)
        per_evader_h = np.empty_like(X)
        for g, idx in enumerate(groups):
            per_evader_target[idx] = targets[g]
            per_evader_h[idx] = w.h[2 * g : 2 * g + 2]

        rank, cond, margin = self._diagnostics(w, ctl.gains)
        slots = settings.max_groups
        centroid_cols = np.full((slots, 2), np.nan)
        target_cols = np.full((slots, 2), np.nan)
        centroid_cols[: len(groups)] = centers
        target_cols[: len(groups)] = targets
        record = TraceRecord(
            t=t,
            phase=int(state.phase),
            x=x.copy(),
            x_star=per_evader_target.ravel(),
            u=u.copy(),
            h=per_evader_h.ravel(),
            rank=rank,
            cond=cond,
            k_margin=margin,
            centroids=centroid_cols,
            centroid_targets=target_cols,
        )

        def rate(zx, zu):
            Z = as_points(zx)
            zc = np.array([Z[g].mean(axis=0) for g in groups]).ravel()
            return ctl.rate(zc, zu, t)[0]

        x_next, u_next = self._advance(x, u, u_dot, rate)
        return self._next(state, x_next, u_next, groups=groups), record


def settling_time(t: np.ndarray, err: np.ndarray, band: float) -> float:
    """Time after which err stays within band * err[0]; NaN if it never settles."""
    if len(err) == 0:
        return float("nan")
    if err[0] == 0:
        return 0.0
    outside = np.flatnonzero(err > band * err[0])
    if outside.size == 0:
        return 0.0
    last = outside[-1]
    if last == len(err) - 1:
        return float("nan")
    return float(t[last + 1] - t[0])


def h_decay_rate(t: np.ndarray, h_norm: np.ndarray, floor: float = 1e-3) -> float:
    """Log-linear decay rate of |h| over its transient."""
    if len(h_norm) < 3 or not h_norm[0] > 0:
        return float("nan")
    below = np.flatnonzero(h_norm < floor * h_norm[0])
    end = below[0] + 1 if below.size else len(h_norm)
    window = slice(0, end)
    tw, hw = t[window], h_norm[window]
    keep = hw > 0
    if keep.sum() < 3:
        return float("nan")
    slope = np.polyfit(tw[keep] - tw[0], np.log(hw[keep]), 1)[0]
    return float(-slope)


def tracking_error(trace: Trace) -> np.ndarray:
    """Infinity norm of the evader (or sub-herd centroid) tracking error on every row."""
    if trace.has("c0_x"):
        groups = sum(1 for c in trace.columns if re.fullmatch(r"c\d+_x", c))
        diff = trace.points("c", groups) - trace.points("cs", groups)
    else:
        diff = trace.evaders() - trace.targets()
    gap = np.abs(diff).reshape(len(diff), -1)
    # unused sub-herd slots are NaN
    return np.where(np.isnan(gap), -np.inf, gap).max(axis=1)


def compute_metrics(trace: Trace, scenario: Scenario) -> MetricsReport:
    if len(trace) == 0:
        return MetricsReport()
    t = trace.column("t")
    herding = trace.column("phase") == Phase.HERDING
    report = MetricsReport()
    if herding.any():
        th = t[herding]
        err = tracking_error(trace)[herding]
        report.switch_time = float(th[0])
        report.settling_time = settling_time(th, err, scenario.settling_band)
        tail = max(1, int(np.ceil(0.1 * len(err))))
        report.steady_state_error = float(np.mean(err[-tail:]))
        h = np.column_stack([trace.column(f"h{j}_{a}") for j in range(scenario.m) for a in "xy"])
        report.h_decay_rate = h_decay_rate(th, np.linalg.norm(h[herding], axis=1))
    if trace.has("theta0"):
        final = trace.theta()[-1]
        report.theta_error_final = float(
            np.max(np.abs(final - scenario.theta_true) / scenario.theta_true)
        )
    if trace.has("rmse_evaders"):
        ev, hd = trace.column("rmse_evaders"), trace.column("rmse_herders")
        # mean over the same final window as the steady-state error
        tail = ev[-max(1, int(np.ceil(0.1 * len(ev)))) :]
        if np.isfinite(tail).any():
            report.rmse_final = float(np.mean(tail[np.isfinite(tail)]))
        report.rmse_curve = [
            (float(a), float(b), float(c)) for a, b, c in zip(t, ev, hd) if np.isfinite(b)
        ]
    barrier = trace.column("barrier_min")
    if np.isfinite(barrier).any():
        report.min_barrier_value = float(np.nanmin(barrier))
    return report


def run(
    scenario: Scenario,
    scenario_hash: str = "",
    replay: dict[tuple[int, int], bytes] | None = None,
) -> RunResult:
    """Execute the scenario to its horizon, or until the first failure."""
    sim = Simulation(scenario, scenario_hash, replay)
    state = sim.initial_state()
    header = TraceHeader(
        scenario_hash=scenario_hash,
        seed=scenario.seed,
        m=scenario.m,
        n=scenario.n,
        mode=scenario.mode.value,
        name=scenario.name,
    )
    log.info(
        f"Running {scenario.name}: {scenario.m} evaders, {scenario.n} herders, "
        f"{scenario.mode.value} control, {scenario.ticks} ticks"
    )

    records: list[TraceRecord] = []
    failure = None
    for _ in range(scenario.ticks):
        try:
            state, record = sim.step(state)
        except (HerdError, np.linalg.LinAlgError) as e:
            cause = e.cause if isinstance(e, HerdError) else "linear-algebra"
            failure = FailureRecord(tick=state.k, t=state.k * scenario.T, cause=cause, message=str(e))
            log.error(f"Run halted at tick {state.k}: {e}")
            break
        records.append(record)

    trace = Trace.from_records(header, records)
    metrics = compute_metrics(trace, scenario)
    if sim.switch_polar is not None:
        metrics.switch_radial_error = float(sim.switch_polar.radial_error.max())
        metrics.switch_gap_deviation_deg = sim.switch_polar.gap_deviation_deg()
    log.info(f"Finished {scenario.name}: {len(records)} rows, settling {metrics.settling_time:.2f}s")
    return RunResult(trace, metrics, failure, sim.packets)


def run_centroid(scenario: Scenario, scenario_hash: str = "") -> RunResult:
    if scenario.centroid is None:
        raise ConfigError("centroid herding needs a designated virtual evader")
    return run(scenario, scenario_hash)
