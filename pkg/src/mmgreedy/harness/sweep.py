"""Seeded sweeps over learning rates, seeds, algorithms and L1 weights, plus their aggregates."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import binomtest, spearmanr

from ..synthdata import BimodalDataset
from ..trainers import ALGORITHMS, TrainConfig
from .io import write_json
from .runner import RunRecord, run_single

JOBS_ENV = "MMGREEDY_JOBS"


@dataclass
class SweepSpec:
    dataset: str | None = None
    algorithms: list[str] = field(default_factory=lambda: ["vanilla"])
    lrs: list[float] | None = None
    lr_range: tuple[float, float] = (1e-4, 1e-1)
    n_lrs: int = 10
    lr_seed: int = 123
    seeds: int = 2
    l1s: list[float] = field(default_factory=lambda: [0.0])
    base: dict = field(default_factory=dict)  # shared TrainConfig fields
    h_bar: str = "recomputed"
    save_checkpoints: bool = False

    def validate(self) -> None:
        for a in self.algorithms:
            if a not in ALGORITHMS:
                raise ValueError(f"unknown algorithm {a!r}")
        if self.lrs is None:
            lo, hi = self.lr_range
            if not 0 < lo <= hi:
                raise ValueError("lr_range must satisfy 0 < lo <= hi")
            if self.n_lrs < 1:
                raise ValueError("n_lrs must be positive")
        elif not self.lrs:
            raise ValueError("explicit lr list is empty")
        if self.seeds < 1:
            raise ValueError("seeds must be positive")
        if not self.l1s or any(l < 0 for l in self.l1s):
            raise ValueError("l1s must be a nonempty list of nonnegative weights")

    def learning_rates(self) -> list[float]:
        if self.lrs is not None:
            return [float(x) for x in self.lrs]
        lo, hi = self.lr_range
        rng = np.random.default_rng(self.lr_seed)
        return [float(x) for x in 10 ** rng.uniform(math.log10(lo), math.log10(hi), self.n_lrs)]

    def expand(self) -> list[tuple[str, TrainConfig]]:
        """Every (run id, config) pair; the count is |lrs| * seeds * |algorithms| * |l1s|."""
        self.validate()
        runs = []
        for alg in self.algorithms:
            for j, lam in enumerate(self.l1s):
                for i, lr in enumerate(self.learning_rates()):
                    for s in range(self.seeds):
                        cfg = TrainConfig.from_dict({**self.base, "algorithm": alg, "lr": lr,
                                                     "seed": s, "l1": float(lam)})
                        cfg.validate()
                        runs.append((f"{alg}-l{j}-lr{i:02d}-s{s}", cfg))
        return runs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_range"] = list(self.lr_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SweepSpec:
        d = dict(d)
        if "lr_range" in d:
            d["lr_range"] = tuple(d["lr_range"])
        return cls(**d)


def default_jobs() -> int:
    env = os.environ.get(JOBS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# worker-side dataset, installed once per process
_DATA: BimodalDataset | None = None


def _init_worker(data: BimodalDataset) -> None:
    global _DATA
    _DATA = data


def _run_one(args) -> dict:
    run_id, cfg_dict, dataset_id, out_dir, h_bar, save = args
    cfg = TrainConfig.from_dict(cfg_dict)
    try:
        rec = run_single(_DATA, cfg, run_id, dataset_id, out_dir, h_bar_source=h_bar, save_checkpoints=save)
    except Exception as exc:  # a broken run must not take the sweep down
        rec = RunRecord(run_id, dataset_id, cfg.algorithm, cfg.lr, cfg.seed, cfg.l1, cfg.window, cfg.alpha,
                        status="failed", null_reasons={"exception": f"{type(exc).__name__}: {exc}"})
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            write_json(Path(out_dir) / "record.json", rec.to_dict())
    return rec.to_dict()


def run_sweep(spec: SweepSpec, data: BimodalDataset, out_dir=None, jobs: int | None = None,
              dataset_id: str | None = None) -> list[RunRecord]:
    """Execute every run of ``spec``; records come back in expansion order whatever the parallelism."""
    runs = spec.expand()
    root = Path(out_dir) if out_dir is not None else None
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
        write_json(root / "sweep.json", spec.to_dict())
    tasks = [(rid, _json_cfg(cfg), dataset_id or spec.dataset, None if root is None else str(root / rid),
              spec.h_bar, spec.save_checkpoints) for rid, cfg in runs]
    jobs = min(jobs or default_jobs(), len(tasks)) or 1
    if jobs == 1:
        _init_worker(data)
        rows = [_run_one(t) for t in tasks]
    else:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(data,)) as pool:
            rows = list(pool.map(_run_one, tasks))
    records = [RunRecord.from_dict(r) for r in rows]
    if root is not None:
        write_json(root / "aggregate.json", aggregate(records))
    return records


def _json_cfg(cfg: TrainConfig) -> dict:
    d = cfg.to_dict()
    if math.isinf(d["alpha"]):
        d["alpha"] = "inf"
    return d


def _mean_std(xs: np.ndarray) -> tuple[float | None, float | None]:
    if xs.size == 0:
        return None, None
    return float(xs.mean()), float(xs.std(ddof=1)) if xs.size > 1 else 0.0


def sign_test(values) -> float:
    """Two-sided binomial p-value for the count of positive values among the nonzero ones."""
    v = np.asarray(values, dtype=float)
    pos, neg = int(np.sum(v > 0)), int(np.sum(v < 0))
    if pos + neg == 0:
        return 1.0
    return float(binomtest(pos, pos + neg, 0.5).pvalue)


def aggregate(records: list[RunRecord]) -> dict:
    """Summary statistics over usable runs; failed or incomplete runs are counted and excluded."""
    used = [r for r in records if r.usable()]
    du = np.array([r.diff_util for r in used], dtype=float)
    ds = np.array([r.diff_speed for r in used], dtype=float)
    m_du, s_du = _mean_std(du)
    m_ds, s_ds = _mean_std(ds)
    out = {
        "n_runs": len(records),
        "n_used": len(used),
        "n_excluded": len(records) - len(used),
        "mean_diff_util": m_du, "std_diff_util": s_du,
        "mean_diff_speed": m_ds, "std_diff_speed": s_ds,
        "diff_util_pos": int(np.sum(du > 0)), "diff_util_neg": int(np.sum(du < 0)),
        "diff_speed_pos": int(np.sum(ds > 0)), "diff_speed_neg": int(np.sum(ds < 0)),
        "sign_test_p": sign_test(du),
        "mean_test_acc": _mean_std(np.array([r.test_acc_f for r in used], dtype=float))[0],
        "spearman_rho": None, "spearman_p_greater": None,
    }
    if len(used) >= 3 and np.ptp(du) > 0 and np.ptp(ds) > 0:
        res = spearmanr(ds, du, alternative="greater")
        out["spearman_rho"], out["spearman_p_greater"] = float(res.statistic), float(res.pvalue)
    return out


def sign_consistency(records: list[RunRecord]) -> float:
    """Share of usable runs whose diff_util carries the majority sign."""
    du = np.array([r.diff_util for r in records if r.usable()], dtype=float)
    if du.size == 0:
        return 0.0
    return max(np.sum(du > 0), np.sum(du < 0)) / du.size


# ---------------------------------------------------------------------------
# L1 study


def l1_summary(records: list[RunRecord], l1s: list[float], inversion_slack: float = 0.02) -> dict:
    """Per-lambda means of R(f), |diff_util|, |diff_speed| plus monotonicity and rank-correlation checks."""
    if list(l1s) != sorted(l1s):
        raise ValueError("lambda list must be sorted ascending")
    rows = []
    for lam in l1s:
        group = [r for r in records if r.l1 == lam and r.status == "ok" and r.sparsity is not None]
        R = [r.sparsity for r in group]
        du = [abs(r.diff_util) for r in group if r.diff_util is not None]
        ds = [abs(r.diff_speed) for r in group if r.diff_speed is not None]
        rows.append({"l1": lam, "n": len(group),
                     "mean_sparsity": float(np.mean(R)) if R else None,
                     "mean_abs_diff_util": float(np.mean(du)) if du else None,
                     "mean_abs_diff_speed": float(np.mean(ds)) if ds else None})
    means = [r["mean_sparsity"] for r in rows if r["mean_sparsity"] is not None]
    drops = [a - b for a, b in zip(means, means[1:]) if b < a]
    pairs = [(r.sparsity, abs(r.diff_util)) for r in records
             if r.status == "ok" and r.sparsity is not None and r.diff_util is not None]
    rho = None
    if len(pairs) >= 3:
        x, y = np.array(pairs).T
        if np.ptp(x) > 0 and np.ptp(y) > 0:
            rho = float(spearmanr(x, y).statistic)
    return {
        "per_l1": rows,
        "inversions": len(drops),
        "max_inversion": max(drops) if drops else 0.0,
        "sparsity_monotone": len(drops) == 0 or (len(drops) == 1 and drops[0] <= inversion_slack),
        "largest_l1_has_max_sparsity": bool(means) and means[-1] == max(means),
        "spearman_sparsity_abs_diff_util": rho,
    }


def l1_study(spec: SweepSpec, data: BimodalDataset, out_dir=None, jobs: int | None = None,
             dataset_id: str | None = None) -> tuple[list[RunRecord], dict]:
    records = run_sweep(spec, data, out_dir, jobs, dataset_id)
    summary = l1_summary(records, spec.l1s)
    if out_dir is not None:
        write_json(Path(out_dir) / "l1_study.json", summary)
    return records, summary


def load_sweep_spec(path) -> SweepSpec:
    return SweepSpec.from_dict(json.loads(Path(path).read_text()))
