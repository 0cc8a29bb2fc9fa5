"""Post-hoc diagnostics on a trained network: derived-model accuracies, conditional
utilization rates, their difference, and parameter sparsity."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import ndcore as nd
from .fusion import FusionMode
from .model import MultiModalNet, predict
from .synthdata import Split
from .trainers import evaluate_probs

VARIANTS = ("f", "f0", "f1", "f0_prime", "f1_prime")


class UtilizationUndefined(ValueError):
    pass


def compute_h_bar(net: MultiModalNet, split: Split, batch_size: int = 500) -> list[tuple[np.ndarray, np.ndarray]]:
    """Mean squeezed vectors at every fusion module over ``split`` (evaluation mode, regular gating)."""
    n = len(split)
    if n == 0:
        raise ValueError("empty dataset")
    sums = None
    with nd.no_grad():
        for i in range(0, n, batch_size):
            taps: list = []
            net.forward(split.x0[i:i + batch_size], split.x1[i:i + batch_size], FusionMode.REGULAR,
                        training=False, taps=taps)
            part = [(h0.data.sum(axis=0), h1.data.sum(axis=0)) for h0, h1 in taps]
            sums = part if sums is None else [(a + c, b + d) for (a, b), (c, d) in zip(sums, part)]
    return [(a / n, b / n) for a, b in sums]


def set_h_bar(net: MultiModalNet, h_bar: list[tuple[np.ndarray, np.ndarray]], count: int) -> None:
    for f, (h0, h1) in zip(net.fusions.values(), h_bar):
        f.stats.h_bar = (np.asarray(h0), np.asarray(h1))
        f.stats.h_bar_count = count


def variant_probs(net: MultiModalNet, variant: str, split: Split, batch_size: int = 500) -> np.ndarray:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "f0_prime":
        return evaluate_probs(net, split, FusionMode.MARGINAL_M0, batch_size, drop_m1=True)[0]
    if variant == "f1_prime":
        return evaluate_probs(net, split, FusionMode.MARGINAL_M1, batch_size)[1]
    p0, p1, p = evaluate_probs(net, split, FusionMode.REGULAR, batch_size)
    return {"f": p, "f0": p0, "f1": p1}[variant]


def accuracy(net: MultiModalNet, variant: str, split: Split, batch_size: int = 500) -> float:
    if len(split) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(predict(variant_probs(net, variant, split, batch_size)) == split.y))


@dataclass
class UtilizationReport:
    acc_f: float
    acc_f0: float
    acc_f0_prime: float
    acc_f1: float
    acc_f1_prime: float
    u_m0_given_m1: float
    u_m1_given_m0: float
    diff_util: float
    h_bar_source: str
    out_of_bounds: bool  # some derived model beat its full-information counterpart
    dataset: str | None = None
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def utilization_from_accuracies(a_f0: float, a_f0p: float, a_f1: float, a_f1p: float) -> tuple[float, float, float]:
    """(u(m0|m1), u(m1|m0), diff_util) from the four derived-model accuracies."""
    if a_f0 <= 0 or a_f1 <= 0:
        raise UtilizationUndefined("utilization undefined: a branch has zero accuracy")
    u01 = (a_f1 - a_f1p) / a_f1
    u10 = (a_f0 - a_f0p) / a_f0
    return u01, u10, u10 - u01


def utilization(net: MultiModalNet, test: Split, h_bar=None, h_bar_count: int = 0,
                batch_size: int = 500, dataset: str | None = None, checkpoint: str | None = None) -> UtilizationReport:
    """Conditional utilization report on ``test``.

    ``h_bar`` (one pair per fusion module) overrides the training-time running means.
    """
    if h_bar is not None:
        set_h_bar(net, h_bar, h_bar_count or 1)
    p0, p1, p = evaluate_probs(net, test, FusionMode.REGULAR, batch_size)
    y = test.y
    a_f = float(np.mean(predict(p) == y))
    a_f0 = float(np.mean(predict(p0) == y))
    a_f1 = float(np.mean(predict(p1) == y))
    a_f0p = accuracy(net, "f0_prime", test, batch_size)
    a_f1p = accuracy(net, "f1_prime", test, batch_size)
    u01, u10, diff = utilization_from_accuracies(a_f0, a_f0p, a_f1, a_f1p)
    source = next(iter(net.fusions.values())).stats.h_source if net.fusions else "none"
    return UtilizationReport(a_f, a_f0, a_f0p, a_f1, a_f1p, u01, u10, diff, source,
                             a_f0p > a_f0 or a_f1p > a_f1, dataset, checkpoint)


def sparsity_fraction(net_or_arrays, threshold: float = 1e-7) -> float:
    """Fraction of trainable parameter entries with magnitude below ``threshold``."""
    if isinstance(net_or_arrays, MultiModalNet):
        arrays = [p.data for p in net_or_arrays.parameters()]
    else:
        arrays = [np.asarray(a) for a in net_or_arrays]
    total = sum(a.size for a in arrays)
    if total == 0:
        return 0.0
    small = sum(int(np.count_nonzero(np.abs(a) < threshold)) for a in arrays)
    return small / total
