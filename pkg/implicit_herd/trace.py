# stdlib
import logging
from dataclasses import dataclass
from pathlib import Path

# 3p
import numpy as np
from pydantic import BaseModel, ValidationError

# project
from implicit_herd.errors import EmptyData, GridMismatch, TraceSchemaError, UnknownKind


log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
PLOT_KINDS = ("error-curves", "input-diff", "theta", "rmse")


class TraceHeader(BaseModel):
    schema_version: int = SCHEMA_VERSION
    scenario_hash: str
    seed: int
    m: int
    n: int
    mode: str = "implicit"
    name: str = "scenario"


@dataclass
class TraceRecord:
    t: float
    phase: int
    x: np.ndarray
    x_star: np.ndarray
    u: np.ndarray
    h: np.ndarray
    rank: int
    cond: float
    k_margin: float
    barrier_min: float = float("nan")
    h_tilde: np.ndarray | None = None
    theta_hat: np.ndarray | None = None
    # (evaders, herders), averaged over herders
    rmse: tuple[float, float] | None = None
    # rate-limited copy of u for the root-finding baseline
    u_limited: np.ndarray | None = None
    # belief means, shape (n, 2m + 2n)
    beliefs: np.ndarray | None = None
    centroids: np.ndarray | None = None
    centroid_targets: np.ndarray | None = None


def _xy(prefix: str, count: int) -> list[str]:
    return [f"{prefix}{k}_{axis}" for k in range(count) for axis in ("x", "y")]


def record_columns(record: TraceRecord) -> list[str]:
    m, n = len(record.x) // 2, len(record.u) // 2
    cols = ["t", "phase"] + _xy("x", m) + _xy("xs", m) + _xy("u", n) + _xy("h", m)
    cols += ["rank", "cond", "k_margin", "barrier_min"]
    if record.h_tilde is not None:
        cols += _xy("ht", m)
    if record.theta_hat is not None:
        cols += [f"theta{j}" for j in range(m)]
    if record.rmse is not None:
        cols += ["rmse_evaders", "rmse_herders"]
    if record.u_limited is not None:
        cols += _xy("ul", n)
    if record.beliefs is not None:
        dim = record.beliefs.shape[1]
        cols += [f"b{i}_{k}" for i in range(n) for k in range(dim)]
    if record.centroids is not None:
        groups = len(record.centroids)
        cols += _xy("c", groups) + _xy("cs", groups)
    return cols


def record_values(record: TraceRecord) -> np.ndarray:
    parts = [
        [record.t, record.phase],
        record.x,
        record.x_star,
        record.u,
        record.h,
        [record.rank, record.cond, record.k_margin, record.barrier_min],
    ]
    for extra in (record.h_tilde, record.theta_hat, record.rmse, record.u_limited):
        if extra is not None:
            parts.append(extra)
    if record.beliefs is not None:
        parts.append(np.ravel(record.beliefs))
    if record.centroids is not None:
        parts.append(np.ravel(record.centroids))
        parts.append(np.ravel(record.centroid_targets))
    return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])


@dataclass
class Trace:
    header: TraceHeader
    columns: list[str]
    data: np.ndarray

    @classmethod
    def from_records(cls, header: TraceHeader, records: list[TraceRecord]) -> "Trace":
        if not records:
            return cls(header, [], np.zeros((0, 0)))
        columns = record_columns(records[0])
        data = np.vstack([record_values(r) for r in records])
        return cls(header, columns, data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def has(self, name: str) -> bool:
        return name in self.columns

    def column(self, name: str) -> np.ndarray:
        try:
            return self.data[:, self.columns.index(name)]
        except ValueError:
            raise EmptyData(f"trace has no column '{name}'")

    def points(self, prefix: str, count: int) -> np.ndarray:
        """Two-vector columns as an array of shape (rows, count, 2)."""
        idx = [self.columns.index(c) for c in _xy(prefix, count) if c in self.columns]
        if len(idx) != 2 * count:
            raise EmptyData(f"trace has no '{prefix}' position columns")
        return self.data[:, idx].reshape(len(self), count, 2)

    def evaders(self) -> np.ndarray:
        return self.points("x", self.header.m)

    def targets(self) -> np.ndarray:
        return self.points("xs", self.header.m)

    def herders(self) -> np.ndarray:
        return self.points("u", self.header.n)

    def theta(self) -> np.ndarray:
        return np.column_stack([self.column(f"theta{j}") for j in range(self.header.m)])

    def beliefs(self) -> np.ndarray:
        n, m = self.header.n, self.header.m
        dim = 2 * (m + n)
        cols = [f"b{i}_{k}" for i in range(n) for k in range(dim)]
        if not all(c in self.columns for c in cols):
            raise EmptyData("trace has no estimator beliefs")
        idx = [self.columns.index(c) for c in cols]
        return self.data[:, idx].reshape(len(self), n, dim)

    def truth(self) -> np.ndarray:
        """Stacked true (x, u) per row."""
        rows = len(self)
        return np.hstack([self.evaders().reshape(rows, -1), self.herders().reshape(rows, -1)])


def _format_row(values) -> str:
    return ",".join(format(float(v), ".17g") for v in values)


def write_trace(trace: Trace, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {key}={value}" for key, value in trace.header.model_dump().items()]
    lines.append(",".join(trace.columns))
    lines.extend(_format_row(row) for row in trace.data)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info(f"Wrote {len(trace)} trace rows to {path}")
    return path


def read_trace(path: str | Path, expected_hash: str | None = None) -> Trace:
    path = Path(path)
    meta: dict[str, str] = {}
    columns: list[str] | None = None
    rows: list[list[float]] = []
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                key, sep, value = line[1:].strip().partition("=")
                if not sep:
                    raise TraceSchemaError(f"{path}:{number}: malformed header line")
                meta[key] = value
            elif columns is None:
                columns = line.split(",")
            else:
                values = line.split(",")
                if len(values) != len(columns):
                    raise TraceSchemaError(
                        f"{path}:{number}: expected {len(columns)} fields, got {len(values)}"
                    )
                try:
                    rows.append([float(v) for v in values])
                except ValueError as e:
                    raise TraceSchemaError(f"{path}:{number}: {e}")

    try:
        header = TraceHeader.model_validate(meta)
    except ValidationError as e:
        raise TraceSchemaError(f"{path}: invalid trace header: {e}")
    if header.schema_version != SCHEMA_VERSION:
        raise TraceSchemaError(
            f"{path}: schema version {header.schema_version}, expected {SCHEMA_VERSION}"
        )
    if expected_hash is not None and header.scenario_hash != expected_hash:
        raise TraceSchemaError(
            f"{path}: scenario hash {header.scenario_hash[:12]} does not match "
            f"{expected_hash[:12]}"
        )
    columns = columns or []
    data = np.array(rows, dtype=float).reshape(len(rows), len(columns))
    return Trace(header, columns, data)


def _write_columns(path: Path, columns: list[str], data: np.ndarray) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(columns)] + [_format_row(row) for row in data]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def emit_plotdata(
    trace: Trace, kind: str, out_dir: str | Path, other: Trace | None = None
) -> Path:
    """Write one tidy CSV for the requested figure kind and return its path."""
    if kind not in PLOT_KINDS:
        raise UnknownKind(f"unknown plot kind '{kind}', expected one of {', '.join(PLOT_KINDS)}")
    if len(trace) == 0:
        raise EmptyData("trace has no rows")

    t = trace.column("t")
    m, n = trace.header.m, trace.header.n
    if kind == "error-curves":
        err = np.linalg.norm(trace.evaders() - trace.targets(), axis=-1)
        columns = ["t"] + [f"e{j}" for j in range(m)]
        data = np.column_stack([t, err])
    elif kind == "input-diff":
        if other is None:
            raise EmptyData("input-diff needs a second trace")
        if not np.array_equal(t, other.column("t")) or other.header.n != n:
            raise GridMismatch("input-diff traces do not share a grid")
        diff = np.linalg.norm(trace.herders() - other.herders(), axis=-1)
        columns = ["t"] + [f"du{i}" for i in range(n)] + ["du_max"]
        data = np.column_stack([t, diff, diff.max(axis=1)])
    elif kind == "theta":
        columns = ["t"] + [f"theta{j}" for j in range(m)]
        data = np.column_stack([t, trace.theta()])
    else:
        columns = ["t", "rmse_evaders", "rmse_herders"]
        data = np.column_stack(
            [t, trace.column("rmse_evaders"), trace.column("rmse_herders")]
        )

    path = _write_columns(Path(out_dir) / f"{kind}.csv", columns, data)
    log.info(f"Wrote {kind} plot data to {path}")
    return path


def write_packets(
    path: str | Path, scenario_hash: str, entries: list[tuple[int, int, bytes]]
) -> Path:
    """Network log: one row per packet, payload as hex of its wire encoding."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# scenario_hash={scenario_hash}", "tick,sender,payload"]
    lines.extend(f"{tick},{sender},{payload.hex()}" for tick, sender, payload in entries)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_packets(path: str | Path) -> tuple[str, list[tuple[int, int, bytes]]]:
    scenario_hash = ""
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line == "tick,sender,payload":
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                if key == "scenario_hash":
                    scenario_hash = value
                continue
            tick, sender, payload = line.split(",")
            entries.append((int(tick), int(sender), bytes.fromhex(payload)))
    return scenario_hash, entries
