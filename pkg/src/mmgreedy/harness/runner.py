"""A single run: train, pick the best checkpoint, diagnose it, and record everything."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..diagnose import UtilizationUndefined, compute_h_bar, sparsity_fraction, utilization
from ..model import MultiModalNet, NetSpec, default_spec
from ..synthdata import BimodalDataset
from ..trainers import TrainConfig, train
from .io import save_checkpoint, write_json


@dataclass
class RunRecord:
    run_id: str
    dataset_id: str | None
    algorithm: str
    lr: float
    seed: int
    l1: float
    window: int
    alpha: float
    epochs_completed: int | None = None
    best_val: float | None = None
    test_acc_f: float | None = None
    acc_f0: float | None = None
    acc_f0_prime: float | None = None
    acc_f1: float | None = None
    acc_f1_prime: float | None = None
    u_m0_given_m1: float | None = None
    u_m1_given_m0: float | None = None
    diff_util: float | None = None
    diff_speed: float | None = None
    T: int | None = None
    sparsity: float | None = None
    h_bar_source: str | None = None
    wall_time: float | None = None
    status: str = "pending"
    null_reasons: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["alpha"], float) and math.isinf(d["alpha"]):
            d["alpha"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunRecord:
        d = dict(d)
        if d.get("alpha") == "inf":
            d["alpha"] = math.inf
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def usable(self) -> bool:
        return self.status == "ok" and self.diff_util is not None and self.diff_speed is not None


RECORD_FIELDS = [f.name for f in fields(RunRecord) if f.name != "null_reasons"]


def net_spec_for(data: BimodalDataset, batch_norm: bool = True, override: dict | None = None) -> NetSpec:
    if override:
        return NetSpec.from_dict(override)
    c0, c1 = data.channels
    return default_spec(c0, c1, data.spec.num_classes, batch_norm)


def run_single(data: BimodalDataset, cfg: TrainConfig, run_id: str = "run", dataset_id: str | None = None,
               out_dir=None, net_spec: NetSpec | None = None, h_bar_source: str = "recomputed",
               save_checkpoints: bool = True, speed_log: bool = False) -> RunRecord:
    spec = net_spec or net_spec_for(data)
    rec = RunRecord(run_id, dataset_id, cfg.algorithm, cfg.lr, cfg.seed, cfg.l1, cfg.window, cfg.alpha)
    net = MultiModalNet(spec, seed=cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if out is not None and speed_log:
        log_file = open(out / "speed.jsonl", "w")

    sink = None if log_file is None else (lambda row: log_file.write(json.dumps(row) + "\n"))
    try:
        result = train(net, data, cfg, speed_log=sink)
    finally:
        if log_file is not None:
            log_file.close()

    rec.epochs_completed = result.epochs_completed
    rec.best_val = result.best_val
    rec.T = result.T
    rec.diff_speed = result.diff_speed_at_T
    rec.wall_time = result.wall_time
    rec.status = result.status
    if result.error:
        rec.null_reasons["training"] = result.error
    if rec.diff_speed is None:
        rec.null_reasons.setdefault("diff_speed", "accumulators not populated")

    if result.best is not None:
        best = result.best.build_net()
        rec.sparsity = sparsity_fraction(best)
        if h_bar_source == "recomputed":
            hb = compute_h_bar(best, data.train)
            kwargs = {"h_bar": hb, "h_bar_count": len(data.train)}
        else:
            kwargs = {}
        try:
            rep = utilization(best, data.test, dataset=dataset_id, checkpoint=f"{run_id}/best", **kwargs)
            rec.test_acc_f = rep.acc_f
            rec.acc_f0, rec.acc_f0_prime = rep.acc_f0, rep.acc_f0_prime
            rec.acc_f1, rec.acc_f1_prime = rep.acc_f1, rep.acc_f1_prime
            rec.u_m0_given_m1, rec.u_m1_given_m0 = rep.u_m0_given_m1, rep.u_m1_given_m0
            rec.diff_util = rep.diff_util
            rec.h_bar_source = rep.h_bar_source
            if out is not None:
                write_json(out / "utilization.json", rep.to_dict())
        except UtilizationUndefined as exc:
            rec.null_reasons["utilization"] = str(exc)
    else:
        rec.null_reasons["checkpoint"] = "no validation measurement"

    if out is not None:
        if save_checkpoints and result.best is not None:
            save_checkpoint(result.best, out / "best")
            save_checkpoint(result.last, out / "last")
        write_epoch_log(result.history, out / "epochs.csv")
        write_json(out / "config.json", {"train": cfg.to_dict() | {"alpha": _alpha_json(cfg.alpha)},
                                         "net": spec.to_dict(), "h_bar": h_bar_source})
        write_json(out / "record.json", rec.to_dict())
    return rec


def _alpha_json(alpha: float):
    return "inf" if math.isinf(alpha) else alpha


EPOCH_FIELDS = ["epoch", "step", "train_loss", "train_acc", "val_acc", "diff_speed",
                "regular", "rebalance_m0", "rebalance_m1"]


def write_epoch_log(history: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EPOCH_FIELDS)
        for h in history:
            k = h["kinds"]
            w.writerow([h["epoch"], h["step"], repr(h["train_loss"]), h["train_acc"], h["val_acc"],
                        "" if h["diff_speed"] is None else repr(h["diff_speed"]),
                        k["regular"], k["rebalance_m0"], k["rebalance_m1"]])
