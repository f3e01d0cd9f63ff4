"""Metrics rows: schema-validated, append-only, byte-reproducible CSV."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

METRICS_SCHEMA = "mirror.metrics.v1"

COLUMNS = [
    "schema",
    "method",
    "domain",
    "variant",
    "data_fraction",
    "persona",
    "seed",
    "episode",
    "scenario",
    "task_return",
    "collisions",
    "steps",
    "visual_items",
    "verbal_utterances",
    "comm_cost",
    "nll",
]

_TYPES = {
    "data_fraction": float,
    "seed": int,
    "episode": int,
    "scenario": int,
    "task_return": float,
    "collisions": int,
    "steps": int,
    "visual_items": float,
    "verbal_utterances": float,
    "comm_cost": float,
}


@dataclass
class MetricsRow:
    method: str
    domain: str
    variant: str
    data_fraction: float
    persona: str
    seed: int
    episode: int
    scenario: int
    task_return: float
    collisions: int
    steps: int
    visual_items: float
    verbal_utterances: float
    comm_cost: float
    nll: float | None = None
    schema: str = METRICS_SCHEMA


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics(path, rows: list[MetricsRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in rows:
            d = asdict(row)
            writer.writerow([_format(d[c]) for c in COLUMNS])


def read_metrics(path) -> list[MetricsRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != COLUMNS:
            raise ValueError(f"unexpected metrics columns: {reader.fieldnames}")
        for rec in reader:
            if rec["schema"] != METRICS_SCHEMA:
                raise ValueError(f"unsupported metrics schema {rec['schema']!r}")
            kwargs = {"schema": rec["schema"], "method": rec["method"], "domain": rec["domain"],
                      "variant": rec["variant"], "persona": rec["persona"]}
            for name, caster in _TYPES.items():
                kwargs[name] = caster(rec[name])
            kwargs["nll"] = float(rec["nll"]) if rec["nll"] != "" else None
            rows.append(MetricsRow(**kwargs))
    return rows
