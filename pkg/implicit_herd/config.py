# stdlib
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Literal

# 3p
import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

# project
from implicit_herd.baseline import LMConfig
from implicit_herd.caging import CagingParams
from implicit_herd.dynamics import GUARD_RADIUS, V_MAX, EvaderParams, Saturation
from implicit_herd.errors import ConfigError
from implicit_herd.estimator import EstimatorSettings
from implicit_herd.simulation import (
    CentroidSettings,
    ControllerMode,
    Integrator,
    Scenario,
    make_reference,
    square_layout,
)


log = logging.getLogger(__name__)

Point = tuple[float, float]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SimulationConfig(_Section):
    name: str = "scenario"
    T: float = Field(0.01, gt=0, description="control period, s")
    horizon: float = Field(30.0, gt=0, description="s")
    seed: int = Field(0, ge=0)
    v_max: float = Field(V_MAX, gt=0, description="speed limit of every entity, m/s")
    integrator: Integrator = Integrator.EULER
    saturation: Saturation = "clamp"
    guard_radius: float = Field(GUARD_RADIUS, gt=0, description="m")
    settling_band: float = Field(0.02, gt=0, lt=1, description="fraction of the initial error")


class EvaderConfig(_Section):
    position: Point = Field(description="m")
    # defaults to the starting position
    target: Point | None = Field(None, description="m")
    params: EvaderParams = EvaderParams()


class LayoutConfig(_Section):
    m: int = Field(ge=1)
    n: int = Field(ge=1)
    side: float = Field(5.0, gt=0, description="edge of the evader square, m")
    ring_scale: float = Field(1.5, gt=1, description="herder ring radius over herd radius")
    target_offset: Point = Field((2.0, 0.0), description="m")
    center: Point = Field((0.0, 0.0), description="m")
    seed: int = Field(0, ge=0)
    params: EvaderParams = EvaderParams()


class ReferenceConfig(_Section):
    kind: Literal["static", "sinusoid"] = "static"
    w: list[float] = Field([0.05, 0.1, 0.02], description="rad/s, cycled over evaders")
    v: float = Field(0.05, description="drift speed along x, m/s")
    amplitude: float = Field(0.5, ge=0, description="m")


class GainConfig(_Section):
    k_f: float = Field(0.25, gt=0, description="1/s")
    k_h: float = Field(50.0, gt=0, description="1/s")
    k_theta: float = Field(200.0, gt=0, description="1/s")
    lambda_pinv: float = Field(1e-8, ge=0)


class ControllerConfig(_Section):
    mode: ControllerMode = ControllerMode.IMPLICIT
    theta_hat0: list[float] | None = None
    # used when theta_hat0 is not given
    theta_hat_scale: float = Field(0.75, gt=0)
    theta_min: float = Field(1e-3, gt=0)
    excitation_floor: float = Field(1e-4, gt=0, description="m/s")


class EstimatorConfig(EstimatorSettings):
    kind: Literal["perfect", "dkf"] = "perfect"


class CagingConfig(CagingParams):
    enabled: bool = False


class CentroidConfig(_Section):
    enabled: bool = False
    virtual: EvaderParams = EvaderParams()
    target: Point = Field((0.0, 0.0), description="m")
    split_time: float | None = Field(None, gt=0, description="s")
    split_targets: tuple[Point, Point] | None = None

    @model_validator(mode="after")
    def check_split(self) -> "CentroidConfig":
        if (self.split_time is None) != (self.split_targets is None):
            raise ValueError("split_time and split_targets go together")
        return self


class OutputConfig(_Section):
    dir: str = "out"
    trace: str = "trace.csv"
    metrics: str = "metrics.json"
    packets: str = "packets.csv"


class ConfigDocument(_Section):
    simulation: SimulationConfig = SimulationConfig()
    evaders: list[EvaderConfig] | None = None
    herders: list[Point] | None = None
    layout: LayoutConfig | None = None
    reference: ReferenceConfig = ReferenceConfig()
    gains: GainConfig = GainConfig()
    controller: ControllerConfig = ControllerConfig()
    baseline: LMConfig = LMConfig()
    estimator: EstimatorConfig = EstimatorConfig()
    caging: CagingConfig = CagingConfig()
    centroid: CentroidConfig = CentroidConfig()
    output: OutputConfig = OutputConfig()

    @model_validator(mode="after")
    def check_population(self) -> "ConfigDocument":
        explicit = self.evaders is not None or self.herders is not None
        if explicit == (self.layout is not None):
            raise ValueError("give either evaders and herders, or a layout block")
        if explicit and not (self.evaders and self.herders):
            raise ValueError("explicit populations need both evaders and herders")
        if self.controller.theta_hat0 is not None and len(self.controller.theta_hat0) != self.m:
            raise ValueError(f"theta_hat0 has {len(self.controller.theta_hat0)} entries for {self.m} evaders")
        return self

    @property
    def m(self) -> int:
        return self.layout.m if self.layout is not None else len(self.evaders or [])


def parse_config(data: Any, source: str = "<config>") -> ConfigDocument:
    try:
        return ConfigDocument.model_validate(data or {})
    except ValidationError as e:
        raise ConfigError(f"{source}: {e}") from e


def load_config(path: str | Path) -> ConfigDocument:
    """Read and validate a YAML (or JSON) scenario document."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"Failed to load config file {path}: {e}") from e
    return parse_config(data, str(path))


def dump_config(doc: ConfigDocument) -> str:
    return yaml.safe_dump(doc.model_dump(mode="json"), sort_keys=False)


def scenario_hash(doc: ConfigDocument) -> str:
    """sha256 over the canonical JSON of the validated document."""
    canonical = json.dumps(doc.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def apply_overrides(
    doc: ConfigDocument,
    *,
    seed: int | None = None,
    mode: str | None = None,
    no_caging: bool = False,
    estimator: str | None = None,
    integrator: str | None = None,
    out_dir: str | None = None,
) -> ConfigDocument:
    """Command-line flags win over the document; the result is re-validated."""
    data = doc.model_dump(mode="json")
    if seed is not None:
        data["simulation"]["seed"] = seed
    if mode is not None:
        data["controller"]["mode"] = mode
    if no_caging:
        data["caging"]["enabled"] = False
    if estimator is not None:
        data["estimator"]["kind"] = estimator
    if integrator is not None:
        data["simulation"]["integrator"] = integrator
    if out_dir is not None:
        data["output"]["dir"] = out_dir
    return parse_config(data, "<overrides>")


def build_scenario(doc: ConfigDocument) -> Scenario:
    sim = doc.simulation
    if doc.layout is not None:
        lay = doc.layout
        x0, u0, targets = square_layout(
            lay.m, lay.n, lay.side, lay.ring_scale, lay.target_offset, lay.center, lay.seed
        )
        params = [lay.params] * lay.m
    else:
        evaders = doc.evaders or []
        x0 = np.array([e.position for e in evaders], dtype=float).ravel()
        targets = np.array(
            [e.target if e.target is not None else e.position for e in evaders], dtype=float
        ).ravel()
        u0 = np.array(doc.herders, dtype=float).ravel()
        params = [e.params for e in evaders]

    ref = doc.reference
    reference = make_reference(ref.kind, targets, w=ref.w, v=ref.v, amplitude=ref.amplitude)

    ctl = doc.controller
    theta_true = np.array([p.theta for p in params])
    theta_hat0 = (
        np.array(ctl.theta_hat0, dtype=float)
        if ctl.theta_hat0 is not None
        else ctl.theta_hat_scale * theta_true
    )

    centroid = None
    if doc.centroid.enabled:
        c = doc.centroid
        centroid = CentroidSettings(
            virtual=c.virtual,
            target=np.array(c.target, dtype=float),
            split_time=c.split_time,
            split_targets=None if c.split_targets is None else np.array(c.split_targets, dtype=float),
        )

    estimator = None
    if doc.estimator.kind == "dkf":
        estimator = EstimatorSettings(**doc.estimator.model_dump(exclude={"kind"}))
    caging = None
    if doc.caging.enabled:
        caging = CagingParams(**doc.caging.model_dump(exclude={"enabled"}))

    scenario = Scenario(
        params=params,
        x0=x0,
        u0=u0,
        reference=reference,
        name=sim.name,
        mode=ctl.mode,
        k_f=doc.gains.k_f,
        k_h=doc.gains.k_h,
        k_theta=doc.gains.k_theta,
        lambda_pinv=doc.gains.lambda_pinv,
        T=sim.T,
        horizon=sim.horizon,
        seed=sim.seed,
        v_max=sim.v_max,
        integrator=sim.integrator,
        saturation=sim.saturation,
        guard_radius=sim.guard_radius,
        estimator=estimator,
        caging=caging,
        centroid=centroid,
        lm=doc.baseline,
        theta_hat0=theta_hat0,
        theta_min=ctl.theta_min,
        excitation_floor=ctl.excitation_floor,
        settling_band=sim.settling_band,
    )
    return scenario
