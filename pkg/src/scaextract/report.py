"""Report persistence: one JSON document plus CSV companions for plotting."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np


def _log2(v) -> float | None:
    if v is None:
        return None
    v = float(v)
    if v == 0:
        return float("-inf")
    return math.log2(v) if v > 0 and math.isfinite(v) else None


def _plain(obj):
    """JSON-safe copy (numpy scalars and arrays, enums, non-finite floats as strings)."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return _plain(obj.item())
    if hasattr(obj, "value") and not isinstance(obj, (int, float, str, bool)):
        return obj.value
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def companion(path, suffix: str) -> Path:
    p = Path(path)
    return p.with_name(f"{p.stem}_{suffix}.csv")


def layer_rows(report) -> list[dict]:
    rows = []
    for l in report.layers:
        row = {"layer": l.index, "op": l.op, "neurons": l.neurons, "points": l.points,
               "max_weight_error": l.max_weight_error, "log2_max_weight_error": _log2(l.max_weight_error),
               "max_bias_error": l.max_bias_error, "mean_activation_error": l.mean_activation_error,
               "sign_margin": l.sign_margin, "sign_correct": l.sign_correct,
               "queries": sum(l.queries.values()), "log2_queries": _log2(sum(l.queries.values()) or None),
               "failures": len(l.failures)}
        for kind, n in l.census.items():
            row[f"n_{kind}"] = n
            q = l.queries.get(kind, 0)
            row[f"queries_{kind}"] = q
            row[f"avg_queries_{kind}"] = q / n if n else None
        rows.append(row)
    return rows


def write_csv(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    fields = list(rows[0])
    for r in rows[1:]:
        fields += [k for k in r if k not in fields]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def save_report(report, path) -> list[Path]:
    """Write ``path`` (JSON) and the layer / ledger / (epsilon, delta) CSVs next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(report.to_dict()), indent=2))
    written = [path]
    p = companion(path, "layers")
    write_csv(p, layer_rows(report))
    written.append(p)
    p = companion(path, "ledger")
    write_csv(p, report.ledger)
    written.append(p)
    if report.evaluation:
        p = companion(path, "eps_delta")
        write_csv(p, [{"epsilon": d["epsilon"], "log2_epsilon": _log2(d["epsilon"]), "delta": d["delta"]}
                       for d in report.evaluation["epsilon_delta"]])
        written.append(p)
    return written


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())


def format_report(report) -> str:
    """Short human-readable summary."""
    lines = [f"total queries: {report.total_queries} (2^{report.log2_queries:.2f}), "
             f"stage-3 queries: {report.stage3_queries}, wall clock {report.wall_clock:.1f}s"]
    for r in layer_rows(report):
        err = r["log2_max_weight_error"]
        err_s = "n/a" if err is None else f"2^{err:.1f}"
        margin = "n/a" if r["sign_margin"] is None else f"{r['sign_margin']:.1f}"
        census = ", ".join(f"{k}={v}" for k, v in r.items() if k.startswith("n_") and v)
        lines.append(f"layer {r['layer']:2d} {r['op']:7s} err {err_s:>9s}  margin {margin:>5s}  "
                     f"queries {r['queries']:8d}  [{census}]" + (f"  failures {r['failures']}" if r["failures"] else ""))
    if report.head.get("max_weight_error") is not None:
        lines.append(f"head: err 2^{_log2(report.head['max_weight_error']):.1f}, rows {report.head.get('rows')}")
    ev = report.evaluation
    if ev:
        parts = [f"{k} {ev[k]:.4f}" for k in ("fidelity", "accuracy", "hybrid_agreement") if ev.get(k) is not None]
        parts.append(f"max |f-g| {ev['max_output_error']:.3g}")
        lines.append(", ".join(parts))
    return "\n".join(lines)
