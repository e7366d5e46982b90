# stdlib
import logging
import struct
from dataclasses import dataclass, replace
from typing import Callable, Sequence

# 3p
import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import expm


log = logging.getLogger(__name__)

ExpandedField = Callable[[np.ndarray, float], np.ndarray]

# RNG stream ids, appended to the (seed, herder, tick) key
SENSING_STREAM = 0
INITIAL_STREAM = 1

_TRAILER = struct.Struct("<HI")


class EstimatorSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    q: float = Field(0.02, ge=0, description="process noise intensity, m^2/s")
    r: float = Field(0.07, gt=0, description="measurement variance per coordinate, m^2")
    d_m: float = Field(6.5, ge=0, description="sensing radius, m")
    d_c: float = Field(6.5, ge=0, description="communication radius, m")
    ratio: int = Field(10, ge=1, description="control ticks per exchange round")


@dataclass
class EstimatorBelief:
    owner: int
    xi: np.ndarray
    Y: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    d_m: float
    d_c: float
    # transition over one covariance step, None until first linearized
    F: np.ndarray | None = None

    @property
    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.Y)

    def split(self, m: int) -> tuple[np.ndarray, np.ndarray]:
        return self.xi[: 2 * m], self.xi[2 * m :]


@dataclass
class MeasurementPacket:
    values: np.ndarray
    seen: np.ndarray
    sender: int
    tick: int

    @property
    def key(self) -> tuple[int, int]:
        return self.sender, self.tick

    def to_bytes(self) -> bytes:
        """Little-endian float64 values, bit-packed flags, then u16 sender and u32 tick."""
        return (
            np.asarray(self.values, dtype="<f8").tobytes()
            + np.packbits(self.seen.astype(bool), bitorder="little").tobytes()
            + _TRAILER.pack(self.sender, self.tick)
        )

    @classmethod
    def from_bytes(cls, payload: bytes, dim: int) -> "MeasurementPacket":
        n_flags = (dim + 7) // 8
        expected = 8 * dim + n_flags + _TRAILER.size
        if len(payload) != expected:
            raise ValueError(f"packet is {len(payload)} bytes, expected {expected}")
        values = np.frombuffer(payload, dtype="<f8", count=dim).astype(float)
        flags = np.frombuffer(payload, dtype=np.uint8, count=n_flags, offset=8 * dim)
        seen = np.unpackbits(flags, bitorder="little")[:dim].astype(bool)
        sender, tick = _TRAILER.unpack_from(payload, 8 * dim + n_flags)
        return cls(values, seen, sender, tick)


@dataclass
class RmseReport:
    evaders: float
    herders: float


def stream_rng(seed: int, herder: int, tick: int, stream: int = SENSING_STREAM) -> np.random.Generator:
    """Counter-based generator keyed by (seed, herder, tick) so draws do not depend on call order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, herder, tick, stream])))


def initial_beliefs(
    truth: np.ndarray, n: int, settings: EstimatorSettings, seed: int
) -> list[EstimatorBelief]:
    """Truth perturbed by one draw of R per herder, with information (10 R)^-1."""
    dim = truth.size
    R = settings.r * np.eye(dim)
    Q = settings.q * np.eye(dim)
    L = np.linalg.cholesky(R)
    Y0 = np.linalg.inv(10.0 * R)
    beliefs = []
    for i in range(n):
        rng = stream_rng(seed, i, 0, INITIAL_STREAM)
        xi = truth + L @ rng.standard_normal(dim)
        beliefs.append(EstimatorBelief(i, xi, Y0.copy(), Q, R, settings.d_m, settings.d_c))
    return beliefs


def sense(
    truth: np.ndarray,
    herder: int,
    m: int,
    R: np.ndarray,
    d_m: float,
    rng: np.random.Generator,
    tick: int = 0,
) -> MeasurementPacket:
    """Noisy positions of every entity within d_m of the herder, zeros elsewhere."""
    pts = truth.reshape(-1, 2)
    own = pts[m + herder]
    visible = np.linalg.norm(pts - own, axis=1) <= d_m
    seen = np.repeat(visible, 2)
    noise = np.linalg.cholesky(R) @ rng.standard_normal(truth.size)
    values = np.where(seen, truth + noise, 0.0)
    return MeasurementPacket(values, seen, herder, tick)


def information(packet: MeasurementPacket, R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(H^T R^-1 H, H^T R^-1 z) with H the identity rows flagged as seen."""
    dim = packet.values.size
    idx = np.flatnonzero(packet.seen)
    I = np.zeros((dim, dim))
    i = np.zeros(dim)
    if idx.size:
        R_inv = np.linalg.inv(R[np.ix_(idx, idx)])
        I[np.ix_(idx, idx)] = R_inv
        i[idx] = R_inv @ packet.values[idx]
    return I, i


def field_jacobian(field: ExpandedField, xi: np.ndarray, t: float, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of the expanded field at xi."""
    dim = xi.size
    jac = np.empty((dim, dim))
    for k in range(dim):
        h = step * max(1.0, abs(xi[k]))
        dx = np.zeros(dim)
        dx[k] = h
        jac[:, k] = (field(xi + dx, t) - field(xi - dx, t)) / (2 * h)
    return jac


def propagate_mean(belief: EstimatorBelief, field: ExpandedField, t: float, dt: float) -> EstimatorBelief:
    return replace(belief, xi=belief.xi + dt * field(belief.xi, t))


def relinearize(belief: EstimatorBelief, field: ExpandedField, t: float, dt: float) -> EstimatorBelief:
    """Cache the transition over dt of the field linearized at the current mean."""
    return replace(belief, F=expm(dt * field_jacobian(field, belief.xi, t)))


def propagate_covariance(belief: EstimatorBelief, dt: float) -> EstimatorBelief:
    """Covariance step P' = F P F^T + Q dt with the cached transition, identity if none."""
    F = np.eye(belief.xi.size) if belief.F is None else belief.F
    P = belief.covariance
    P_next = F @ P @ F.T + belief.Q * dt
    Y = np.linalg.inv(0.5 * (P_next + P_next.T))
    return replace(belief, Y=0.5 * (Y + Y.T))


def propagate_information(
    belief: EstimatorBelief, field: ExpandedField, t: float, dt: float
) -> EstimatorBelief:
    return propagate_covariance(relinearize(belief, field, t, dt), dt)


def predict(belief: EstimatorBelief, field: ExpandedField, t: float, dt: float) -> EstimatorBelief:
    if dt <= 0:
        raise ValueError("prediction step must be positive")
    # linearize before moving the mean
    moved = propagate_information(belief, field, t, dt)
    return propagate_mean(moved, field, t, dt)


def neighbors(herders: np.ndarray, d_c: float) -> list[list[int]]:
    """Herders within d_c of each herder, itself included."""
    pts = np.asarray(herders, dtype=float).reshape(-1, 2)
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    return [list(np.flatnonzero(row <= d_c)) for row in dist]


def absorb(belief: EstimatorBelief, packets: Sequence[MeasurementPacket]) -> EstimatorBelief:
    """Information-form update with every given packet."""
    Y = belief.Y.copy()
    y = belief.Y @ belief.xi
    for packet in packets:
        I, i = information(packet, belief.R)
        Y += I
        y += i
    Y = 0.5 * (Y + Y.T)
    if np.linalg.eigvalsh(Y)[0] <= 0:
        raise np.linalg.LinAlgError(f"information matrix of herder {belief.owner} lost definiteness")
    return replace(belief, xi=np.linalg.solve(Y, y), Y=Y)


def fuse(
    beliefs: Sequence[EstimatorBelief],
    packets: Sequence[MeasurementPacket],
    herders: np.ndarray,
    include_own: bool = True,
) -> list[EstimatorBelief]:
    """One exchange round: each herder sums the information of its neighbors' packets.

    With include_own the herder's own packet is summed as well; leave it out when
    the herder has already absorbed it locally.
    """
    by_key: dict[tuple[int, int], MeasurementPacket] = {}
    for packet in packets:
        if packet.key in by_key:
            log.debug(f"dropping duplicate packet {packet.key}")
            continue
        by_key[packet.key] = packet

    by_sender: dict[int, list[MeasurementPacket]] = {}
    for packet in by_key.values():
        by_sender.setdefault(packet.sender, []).append(packet)

    fused = []
    for belief in beliefs:
        heard = [
            packet
            for j in neighbors(herders, belief.d_c)[belief.owner]
            if include_own or int(j) != belief.owner
            for packet in by_sender.get(int(j), [])
        ]
        fused.append(absorb(belief, heard))
    return fused


def rmse(beliefs: Sequence[EstimatorBelief], truth: np.ndarray, m: int) -> RmseReport:
    """Position RMSE per entity class, averaged over herders."""
    return rmse_from_means(np.array([b.xi for b in beliefs]), truth, m)


def rmse_from_means(means: np.ndarray, truth: np.ndarray, m: int) -> RmseReport:
    err = (np.asarray(means) - np.asarray(truth)[None, :]).reshape(len(means), -1, 2)
    sq = np.sum(err**2, axis=-1)
    evaders = np.sqrt(sq[:, :m].mean(axis=1)).mean()
    herders = np.sqrt(sq[:, m:].mean(axis=1)).mean()
    return RmseReport(float(evaders), float(herders))
