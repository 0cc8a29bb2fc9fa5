"""
Desk-scale greediness study
===========================
Runs the five experiment groups behind the acceptance checks on one CPU and
writes every run record plus a summary to an output directory:

  dup      vanilla sweep on identical modalities (the symmetric control)
  vanilla  vanilla sweep on the colored/gray shortcut data
  guided   guided sweep, same learning rates and seeds
  algos    vanilla / guided / random at lr 0.01, three seeds each
  l1       L1 weights {0, 1e-7, 1e-5, 1e-4, 1e-3}, three seeds each

Usage:  python demos/desk_study.py --out runs/desk [--only vanilla,guided] [--jobs N]
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from mmgreedy.harness import SweepSpec, aggregate, l1_summary, run_sweep
from mmgreedy.harness.report import histogram
from mmgreedy.harness.sweep import sign_consistency
from mmgreedy.synthdata import GeneratorSpec, gen_duplicated, gen_shortcut_bimodal

# ------------------------------------------------------------
# 1. DATA: reduced sizes so that a full study fits in ~30 min
# ------------------------------------------------------------
DATA_SPEC = GeneratorSpec(n_train=2000, n_val=500, n_test=1000, seed=0)

GROUPS = {
    "dup": dict(data="dup", spec=SweepSpec(algorithms=["vanilla"], n_lrs=10, seeds=2)),
    "vanilla": dict(data="shortcut", spec=SweepSpec(algorithms=["vanilla"], n_lrs=10, seeds=2)),
    "guided": dict(data="shortcut", spec=SweepSpec(algorithms=["guided"], n_lrs=10, seeds=2)),
    "algos": dict(data="shortcut", spec=SweepSpec(algorithms=["vanilla", "guided", "random"],
                                                  lrs=[0.01], seeds=3)),
    "l1": dict(data="shortcut", spec=SweepSpec(algorithms=["vanilla"], lrs=[0.01], seeds=3,
                                               l1s=[0.0, 1e-7, 1e-5, 1e-4, 1e-3])),
}


def load_data(kind):
    return gen_duplicated(DATA_SPEC, "m1") if kind == "dup" else gen_shortcut_bimodal(DATA_SPEC)


# ------------------------------------------------------------
# 2. RUN
# ------------------------------------------------------------
def run_group(name, out, jobs):
    g = GROUPS[name]
    t0 = time.time()
    records = run_sweep(g["spec"], load_data(g["data"]), out / name, jobs, dataset_id=g["data"])
    summary = aggregate(records)
    summary["sign_consistency"] = sign_consistency(records)
    summary["diff_util_hist"] = histogram([r.diff_util for r in records if r.usable()])
    if name == "algos":
        for alg in ("vanilla", "guided", "random"):
            accs = [r.test_acc_f for r in records if r.algorithm == alg and r.test_acc_f is not None]
            summary[f"{alg}_test_acc"] = float(np.mean(accs))
    if name == "l1":
        summary["l1_study"] = l1_summary(records, g["spec"].l1s)
    summary["minutes"] = (time.time() - t0) / 60
    return summary


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--only", default=",".join(GROUPS))
    ap.add_argument("--jobs", type=int, default=None)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for name in args.only.split(","):
        results[name] = run_group(name, out, args.jobs)
        short = {k: v for k, v in results[name].items() if not k.endswith("_hist") and k != "l1_study"}
        print(name, json.dumps(short), flush=True)
        if "l1_study" in results[name]:
            print("l1", json.dumps(results[name]["l1_study"]), flush=True)
        (out / "study.json").write_text(json.dumps(results, indent=2))
