"""Figure-data export: aggregate metrics into small mean +/- stderr tables."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path

from .metrics import MetricsRow


def _mean_se(values: list[float]) -> tuple[float, float]:
    n = len(values)
    mean = sum(values) / n
    if n < 2:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var / n)


def export_figure_data(rows: list[MetricsRow], figure: str, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if figure == "nll_curve":
        header = ["method", "data_fraction", "nll_mean", "nll_se", "n"]
        groups: dict[tuple, list[float]] = defaultdict(list)
        seen: set[tuple] = set()
        for r in rows:
            if r.nll is None:
                continue
            key = (r.method, r.data_fraction, r.persona, r.seed)
            group = (r.method, r.data_fraction)
            # one NLL value per (persona, seed) evaluation, not per episode
            if (group, r.persona) in seen:
                continue
            seen.add((group, r.persona))
            groups[group].append(r.nll)
        out = []
        for (method, frac), values in sorted(groups.items()):
            mean, se = _mean_se(values)
            out.append([method, repr(float(frac)), repr(mean), repr(se), len(values)])
    elif figure == "perf_comm":
        header = [
            "method", "return_mean", "return_se", "collisions_mean", "collisions_se",
            "visual_mean", "visual_se", "verbal_mean", "verbal_se", "n",
        ]
        groups = defaultdict(list)
        for r in rows:
            groups[r.method].append(r)
        out = []
        for method, rs in sorted(groups.items()):
            ret_m, ret_s = _mean_se([r.task_return for r in rs])
            col_m, col_s = _mean_se([float(r.collisions) for r in rs])
            vis_m, vis_s = _mean_se([r.visual_items for r in rs])
            verb_m, verb_s = _mean_se([r.verbal_utterances for r in rs])
            out.append([
                method, repr(ret_m), repr(ret_s), repr(col_m), repr(col_s),
                repr(vis_m), repr(vis_s), repr(verb_m), repr(verb_s), len(rs),
            ])
    else:
        raise ValueError(f"unknown figure {figure!r}")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(out)
    return path
