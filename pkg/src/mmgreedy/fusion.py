"""MMTM-style gated fusion between two branches.

A module squeezes both feature maps to channel vectors, maps their concatenation
through ``fc -> relu -> (fc0, fc1)`` and rescales each branch by ``2*sigmoid(gate)``.
The non-regular modes swap in stored means so that one branch is cut off from
the other modality.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import ndcore as nd
from .ndcore import Tensor


class FusionMode(str, Enum):
    REGULAR = "regular"
    MARGINAL_M0 = "marginal_m0"
    MARGINAL_M1 = "marginal_m1"
    REBALANCE_M0 = "rebalance_m0"
    REBALANCE_M1 = "rebalance_m1"

    @property
    def is_marginal(self) -> bool:
        return self in (FusionMode.MARGINAL_M0, FusionMode.MARGINAL_M1)

    @property
    def is_rebalance(self) -> bool:
        return self in (FusionMode.REBALANCE_M0, FusionMode.REBALANCE_M1)


class StatsNotWarmedUp(RuntimeError):
    pass


@dataclass
class FusionStats:
    """Running sums of squeezed vectors and pre-sigmoid gates over regular steps.

    ``h_bar`` optionally overrides the running squeeze means with values
    recomputed over a full training pass (used by the diagnostics).
    """

    c0: int
    c1: int
    h0_sum: np.ndarray = None
    h1_sum: np.ndarray = None
    w0_sum: np.ndarray = None
    w1_sum: np.ndarray = None
    count: int = 0
    h_bar: tuple[np.ndarray, np.ndarray] | None = None
    h_bar_count: int = 0

    def __post_init__(self):
        for name, c in (("h0_sum", self.c0), ("h1_sum", self.c1), ("w0_sum", self.c0), ("w1_sum", self.c1)):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(c))

    def update(self, h0: np.ndarray, h1: np.ndarray, w0: np.ndarray, w1: np.ndarray) -> None:
        self.h0_sum += h0.sum(axis=0)
        self.h1_sum += h1.sum(axis=0)
        self.w0_sum += w0.sum(axis=0)
        self.w1_sum += w1.sum(axis=0)
        self.count += h0.shape[0]

    def _need(self, count: int) -> None:
        if count < 1:
            raise StatsNotWarmedUp("stats not warmed up: no regular samples observed yet")

    @property
    def h_source(self) -> str:
        return "recomputed" if self.h_bar is not None else "running"

    def h_means(self) -> tuple[np.ndarray, np.ndarray]:
        if self.h_bar is not None:
            self._need(self.h_bar_count)
            return self.h_bar
        self._need(self.count)
        return self.h0_sum / self.count, self.h1_sum / self.count

    def w_means(self) -> tuple[np.ndarray, np.ndarray]:
        self._need(self.count)
        return self.w0_sum / self.count, self.w1_sum / self.count

    def copy(self) -> FusionStats:
        hb = None if self.h_bar is None else (self.h_bar[0].copy(), self.h_bar[1].copy())
        return FusionStats(self.c0, self.c1, self.h0_sum.copy(), self.h1_sum.copy(),
                           self.w0_sum.copy(), self.w1_sum.copy(), self.count, hb, self.h_bar_count)


def default_hidden(c0: int, c1: int) -> int:
    return max(1, (c0 + c1) // 4)


class FusionModule:
    """One gate joining a branch-0 layer with C channels and a branch-1 layer with C' channels."""

    def __init__(self, c0: int, c1: int, rng: np.random.Generator, hidden: int | None = None,
                 prefix: str = "fusion"):
        self.c0, self.c1 = c0, c1
        self.hidden = hidden if hidden is not None else default_hidden(c0, c1)
        if self.hidden < 1:
            raise ValueError("fusion hidden width must be at least 1")
        H, cin = self.hidden, c0 + c1
        self.joint_w = nd.fan_in_uniform(rng, (cin, H), cin, f"{prefix}.joint.weight")
        self.joint_b = nd.fan_in_uniform(rng, (H,), cin, f"{prefix}.joint.bias")
        self.gate0_w = nd.fan_in_uniform(rng, (H, c0), H, f"{prefix}.gate0.weight")
        self.gate0_b = nd.fan_in_uniform(rng, (c0,), H, f"{prefix}.gate0.bias")
        self.gate1_w = nd.fan_in_uniform(rng, (H, c1), H, f"{prefix}.gate1.weight")
        self.gate1_b = nd.fan_in_uniform(rng, (c1,), H, f"{prefix}.gate1.bias")
        self.stats = FusionStats(c0, c1)

    @property
    def joint_params(self) -> list[Tensor]:
        return [self.joint_w, self.joint_b]

    @property
    def gate0_params(self) -> list[Tensor]:
        return [self.gate0_w, self.gate0_b]

    @property
    def gate1_params(self) -> list[Tensor]:
        return [self.gate1_w, self.gate1_b]

    def parameters(self) -> list[Tensor]:
        return self.joint_params + self.gate0_params + self.gate1_params

    # -- the three stages ---------------------------------------------------

    def squeeze(self, a0: Tensor | None, a1: Tensor | None) -> tuple[Tensor | None, Tensor | None]:
        h0 = h1 = None
        if a0 is not None:
            if a0.shape[1] != self.c0:
                raise nd.ShapeError(f"branch-0 map has {a0.shape[1]} channels, module expects {self.c0}")
            h0 = nd.global_avg_pool(a0)
        if a1 is not None:
            if a1.shape[1] != self.c1:
                raise nd.ShapeError(f"branch-1 map has {a1.shape[1]} channels, module expects {self.c1}")
            h1 = nd.global_avg_pool(a1)
        return h0, h1

    def excite(self, h0: Tensor | None, h1: Tensor | None,
               mode: FusionMode = FusionMode.REGULAR) -> tuple[Tensor | None, Tensor | None]:
        """Gate activations (pre-sigmoid). Marginal modes return only the evaluated branch's gate."""
        mode = FusionMode(mode)
        if mode is FusionMode.MARGINAL_M0:
            _, h1_bar = self.stats.h_means()
            h1 = Tensor(np.broadcast_to(h1_bar, (h0.shape[0], self.c1)))
        elif mode is FusionMode.MARGINAL_M1:
            h0_bar, _ = self.stats.h_means()
            h0 = Tensor(np.broadcast_to(h0_bar, (h1.shape[0], self.c0)))
        z = nd.relu(nd.linear(nd.concat_channels(h0, h1), self.joint_w, self.joint_b))
        w0 = None if mode is FusionMode.MARGINAL_M1 else nd.linear(z, self.gate0_w, self.gate0_b)
        w1 = None if mode is FusionMode.MARGINAL_M0 else nd.linear(z, self.gate1_w, self.gate1_b)
        return w0, w1

    def apply_gates(self, a0: Tensor | None, a1: Tensor | None, w0: Tensor | None, w1: Tensor | None,
                    mode: FusionMode = FusionMode.REGULAR) -> tuple[Tensor | None, Tensor | None]:
        mode = FusionMode(mode)
        if mode.is_rebalance:
            w0_bar, w1_bar = self.stats.w_means()
            if mode is FusionMode.REBALANCE_M0:
                w0 = Tensor(w0_bar)
            else:
                w1 = Tensor(w1_bar)
        out0 = None if a0 is None else nd.channel_scale(a0, w0)
        out1 = None if a1 is None else nd.channel_scale(a1, w1)
        return out0, out1

    def update_stats(self, h0, h1, w0, w1) -> None:
        as_np = [x.data if isinstance(x, Tensor) else np.asarray(x) for x in (h0, h1, w0, w1)]
        self.stats.update(*as_np)

    def __call__(self, a0: Tensor | None, a1: Tensor | None, mode: FusionMode = FusionMode.REGULAR,
                 record_stats: bool = False, taps: list | None = None):
        mode = FusionMode(mode)
        if mode is FusionMode.MARGINAL_M0:
            a1 = None
        elif mode is FusionMode.MARGINAL_M1:
            a0 = None
        h0, h1 = self.squeeze(a0, a1)
        if taps is not None:
            taps.append((h0, h1))
        w0, w1 = self.excite(h0, h1, mode)
        if record_stats:
            if mode is not FusionMode.REGULAR:
                raise ValueError("fusion stats are only collected on regular steps")
            self.update_stats(h0, h1, w0, w1)
        return self.apply_gates(a0, a1, w0, w1, mode)
