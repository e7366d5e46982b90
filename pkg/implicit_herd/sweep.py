# stdlib
import asyncio
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Sequence

# 3p
from jinja2 import Template
from pydantic import BaseModel

# project
from implicit_herd.config import ConfigDocument, build_scenario, parse_config, scenario_hash
from implicit_herd.errors import ConfigError
from implicit_herd.simulation import run
from implicit_herd.trace import write_trace


log = logging.getLogger(__name__)

THREADS_ENV = "IMPLICIT_HERD_THREADS"

REPORT_TEMPLATE = Template(
    """# Sweep over `{{ param }}`

Scenario `{{ name }}`, {{ rows|length }} runs.

| {{ param }} | settling time [s] | steady-state error [m] | final RMSE [m] | status |
|---|---|---|---|---|
{% for row in rows -%}
| {{ row.value }} | {{ "%.3f"|format(row.settling_time) }} | {{ "%.4f"|format(row.steady_state_error) }} | {{ "%.4f"|format(row.rmse_final) }} | {{ row.failure or "ok" }} |
{% endfor %}"""
)


class SweepRow(BaseModel):
    value: Any
    settling_time: float
    steady_state_error: float
    rmse_final: float
    failure: str | None = None
    trace: str


def sweep_workers() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return os.cpu_count() or 1
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got '{raw}'")
    if workers < 1:
        raise ConfigError(f"{THREADS_ENV} must be at least 1")
    return workers


def set_param(doc: ConfigDocument, dotted: str, value: Any) -> ConfigDocument:
    """Copy of doc with one field replaced, addressed like 'estimator.r'."""
    data = doc.model_dump(mode="json")
    *parents, leaf = dotted.split(".")
    node = data
    for key in parents:
        if not isinstance(node, dict) or not isinstance(node.get(key), dict):
            raise ConfigError(f"no config section '{key}' in '{dotted}'")
        node = node[key]
    if leaf not in node:
        raise ConfigError(f"no config field '{dotted}'")
    node[leaf] = value
    return parse_config(data, f"<sweep {dotted}={value}>")


def _label(index: int, value: Any) -> str:
    return f"{index:02d}_{str(value).replace('/', '_')}"


def _run_one(data: dict, value: Any, out_dir: str, label: str) -> dict:
    doc = parse_config(data, f"<sweep {label}>")
    digest = scenario_hash(doc)
    result = run(build_scenario(doc), digest)
    path = write_trace(result.trace, Path(out_dir) / f"trace_{label}.csv")
    metrics = result.metrics
    return SweepRow(
        value=value,
        settling_time=metrics.settling_time,
        steady_state_error=metrics.steady_state_error,
        rmse_final=metrics.rmse_final,
        failure=result.failure.message if result.failure else None,
        trace=str(path),
    ).model_dump()


def render_report(param: str, name: str, rows: Sequence[SweepRow]) -> str:
    return REPORT_TEMPLATE.render(param=param, name=name, rows=rows)


async def run_sweep(
    doc: ConfigDocument,
    param: str,
    values: Sequence[Any],
    out_dir: str | Path,
    max_workers: int | None = None,
) -> list[SweepRow]:
    """Run one scenario per value in a process pool and write sweep_report.md."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    docs = [set_param(doc, param, v) for v in values]
    workers = min(max_workers or sweep_workers(), max(len(docs), 1))
    log.info(f"Sweeping {param} over {list(values)} with {workers} workers")

    loop = asyncio.get_running_loop()
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [
            loop.run_in_executor(
                pool, _run_one, d.model_dump(mode="json"), v, str(out), _label(i, v)
            )
            for i, (d, v) in enumerate(zip(docs, values))
        ]
        results = await asyncio.gather(*futures)

    rows = [SweepRow(**r) for r in results]
    report = out / "sweep_report.md"
    report.write_text(render_report(param, doc.simulation.name, rows), encoding="utf-8")
    log.info(f"Wrote sweep report to {report}")
    return rows
