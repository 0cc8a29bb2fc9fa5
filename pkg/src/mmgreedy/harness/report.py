"""Summary CSV and histogram bins, computed purely from a set of run records."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .io import write_json
from .runner import RECORD_FIELDS, RunRecord
from .sweep import aggregate

HIST_LO, HIST_HI, HIST_WIDTH = -1.5, 1.5, 0.1
N_BINS = round((HIST_HI - HIST_LO) / HIST_WIDTH)


def collect_records(root) -> list[RunRecord]:
    """Every ``record.json`` under ``root``, sorted by run id then path."""
    root = Path(root)
    found = []
    for p in sorted(root.rglob("record.json")):
        found.append((json.loads(p.read_text()), str(p.relative_to(root))))
    found.sort(key=lambda t: (t[0].get("run_id", ""), t[1]))
    return [RunRecord.from_dict(d) for d, _ in found]


def bin_edges() -> np.ndarray:
    return HIST_LO + HIST_WIDTH * np.arange(N_BINS + 1)


def histogram(values) -> dict:
    """Counts over fixed bins; values outside [-1.5, 1.5] are tallied separately, never clipped in."""
    v = np.asarray([x for x in values if x is not None], dtype=float)
    edges = bin_edges()
    inside = v[(v >= HIST_LO) & (v <= HIST_HI)]
    # index by arithmetic so the top edge is closed and bins are [lo, hi)
    idx = np.minimum(np.floor((inside - HIST_LO) / HIST_WIDTH + 1e-9).astype(int), N_BINS - 1)
    counts = np.bincount(idx, minlength=N_BINS)
    return {"edges": [round(float(e), 10) for e in edges], "counts": counts.tolist(),
            "below": int(np.sum(v < HIST_LO)), "above": int(np.sum(v > HIST_HI)), "n": int(v.size)}


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def write_summary(records: list[RunRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            d = r.to_dict()
            w.writerow([_cell(d[k]) for k in RECORD_FIELDS])


def report(runs_dir, out_csv, hist_path=None) -> dict:
    records = collect_records(runs_dir)
    out_csv = Path(out_csv)
    write_summary(records, out_csv)
    used = [r for r in records if r.usable()]
    summary = {
        "diff_util": histogram([r.diff_util for r in used]),
        "diff_speed": histogram([r.diff_speed for r in used]),
        "aggregate": aggregate(records),
    }
    hist_path = Path(hist_path) if hist_path else out_csv.with_suffix(".hist.json")
    write_json(hist_path, summary)
    return summary
