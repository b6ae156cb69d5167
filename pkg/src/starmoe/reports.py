"""Delimited report writers. Column orders here are the documented schemas."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .harness import ResultRow, later_expert_mass, medians

METRICS_COLUMNS = ("variant", "seed", "task", "A_t", "delta_total", "sara_loss", "bound", "bound_holds")
ABLATION_COLUMNS = ("variant", "weighting", "seed", "avg_acc", "last_acc", "later_expert_mass")
SWEEP_COLUMNS = ("parameter", "value", "seed", "avg_acc", "last_acc", "later_expert_mass")
MEDIAN_SEED = "median"


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def metrics_rows(variant: str, seed: int, metrics):
    for t, (acc, rep) in enumerate(zip(metrics.accuracies, metrics.drift), start=1):
        yield (variant, seed, t, acc, rep.total_drift, rep.sara_loss, rep.bound, rep.bound_holds)


def metrics_csv(runs) -> str:
    """``runs`` is an iterable of (variant, seed, Metrics)."""
    rows = [r for variant, seed, m in runs for r in metrics_rows(variant, seed, m)]
    return _csv_text(METRICS_COLUMNS, rows)


def summary(runs, config=None) -> dict:
    per_run = [{"variant": v, "seed": s, "avg_acc": m.average, "last_acc": m.last,
                "later_expert_mass": later_expert_mass(m.routing_mass),
                "bound_holds": all(r.bound_holds for r in m.drift)}
               for v, s, m in runs]
    groups = {}
    for row in per_run:
        groups.setdefault(row["variant"], []).append(row)
    med = {v: {"avg_acc": float(np.median([r["avg_acc"] for r in rs])),
               "last_acc": float(np.median([r["last_acc"] for r in rs])),
               "seeds": len(rs)}
           for v, rs in groups.items()}
    out = {"runs": per_run, "medians": med}
    if config is not None:
        out["config"] = config.to_dict()
    return out


def ablation_csv(rows: list[ResultRow]) -> str:
    body = [(r.label, r.weighting, r.seed, r.metrics.average, r.metrics.last,
             later_expert_mass(r.metrics.routing_mass)) for r in rows]
    if len({r.seed for r in rows}) >= 3:
        for (label, weighting), m in medians(rows).items():
            body.append((label, weighting, MEDIAN_SEED, m["avg_acc"], m["last_acc"], m["later_expert_mass"]))
    return _csv_text(ABLATION_COLUMNS, body)


def sweep_csv(parameter: str, rows: list[ResultRow]) -> str:
    body = [(parameter, r.label, r.seed, r.metrics.average, r.metrics.last,
             later_expert_mass(r.metrics.routing_mass)) for r in rows]
    return _csv_text(SWEEP_COLUMNS, body)


def heatmap_csv(mass: np.ndarray) -> str:
    header = ["task"] + [f"expert_{j + 1}" for j in range(mass.shape[1])]
    return _csv_text(header, [[i + 1, *row] for i, row in enumerate(mass)])


def directional_verdict(rows: list[ResultRow], weighting: str, min_gap: float = 5.0) -> tuple[bool | None, str]:
    """Forgetting-reduction ordering over ablation medians. None when variants are missing."""
    med = medians(rows)
    need = ("baseline", "sara_only", "full")
    if any((v, weighting) not in med for v in need):
        return None, "SKIP directional ordering: needs baseline, sara_only and full"
    base, sara, full = (med[(v, weighting)] for v in need)
    gap = full["last_acc"] - base["last_acc"]
    ok = gap >= min_gap and full["avg_acc"] >= sara["avg_acc"] >= base["avg_acc"]
    line = (f"{'PASS' if ok else 'FAIL'} directional ordering: A_T gap full-baseline {gap:.2f} (need >= {min_gap}); "
            f"avg acc full {full['avg_acc']:.2f} >= sara_only {sara['avg_acc']:.2f} >= baseline {base['avg_acc']:.2f}")
    return ok, line


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def write_json(path: Path, obj) -> None:
    write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")
