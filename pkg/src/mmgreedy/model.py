"""Two-branch convolutional network joined by fusion gates, its loss and parameter partition."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import ndcore as nd
from .fusion import FusionMode, FusionModule
from .ndcore import Tensor


@dataclass(frozen=True)
class LayerSpec:
    channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    batch_norm: bool = True


@dataclass(frozen=True)
class BranchSpec:
    in_channels: int
    layers: tuple[LayerSpec, ...]


@dataclass(frozen=True)
class NetSpec:
    branch0: BranchSpec
    branch1: BranchSpec
    num_classes: int = 10
    fusion_after: tuple[int, ...] = (1, 2)  # 0-based layer indices
    fusion_hidden: int | None = None
    average: str = "prob"  # or "logit"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> NetSpec:
        def branch(b):
            return BranchSpec(b["in_channels"], tuple(LayerSpec(**l) for l in b["layers"]))
        return cls(branch(d["branch0"]), branch(d["branch1"]), d.get("num_classes", 10),
                   tuple(d.get("fusion_after", (1, 2))), d.get("fusion_hidden"), d.get("average", "prob"))

    def mirrored(self) -> NetSpec:
        return NetSpec(self.branch1, self.branch0, self.num_classes, self.fusion_after,
                       self.fusion_hidden, self.average)


def default_layers(batch_norm: bool = True) -> tuple[LayerSpec, ...]:
    return (LayerSpec(8, 3, 2, 1, batch_norm), LayerSpec(16, 3, 2, 1, batch_norm),
            LayerSpec(32, 3, 1, 1, batch_norm))


def default_spec(in0: int = 3, in1: int = 1, num_classes: int = 10, batch_norm: bool = True) -> NetSpec:
    layers = default_layers(batch_norm)
    return NetSpec(BranchSpec(in0, layers), BranchSpec(in1, layers), num_classes)


class ConvBlock:
    """conv -> (batch norm) -> relu. The conv carries a bias only without normalization."""

    def __init__(self, cin: int, spec: LayerSpec, rng: np.random.Generator, prefix: str):
        fan_in = cin * spec.kernel * spec.kernel
        self.spec = spec
        self.weight = nd.fan_in_uniform(rng, (spec.channels, cin, spec.kernel, spec.kernel), fan_in,
                                        f"{prefix}.weight")
        self.bias = None
        if spec.batch_norm:
            self.gamma = Tensor(np.ones(spec.channels), requires_grad=True, name=f"{prefix}.bn.gamma")
            self.beta = Tensor(np.zeros(spec.channels), requires_grad=True, name=f"{prefix}.bn.beta")
            self.running_mean = np.zeros(spec.channels)
            self.running_var = np.ones(spec.channels)
        else:
            self.bias = nd.fan_in_uniform(rng, (spec.channels,), fan_in, f"{prefix}.bias")

    def parameters(self) -> list[Tensor]:
        if self.spec.batch_norm:
            return [self.weight, self.gamma, self.beta]
        return [self.weight, self.bias]

    def buffers(self) -> dict[str, np.ndarray]:
        if not self.spec.batch_norm:
            return {}
        p = self.weight.name.rsplit(".", 1)[0]
        return {f"{p}.bn.running_mean": self.running_mean, f"{p}.bn.running_var": self.running_var}

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        s = self.spec
        y = nd.conv2d(x, self.weight, s.stride, s.padding)
        if s.batch_norm:
            y = nd.batch_norm(y, self.gamma, self.beta, self.running_mean, self.running_var, training)
        else:
            y = _add_channel_bias(y, self.bias)
        return nd.relu(y)


def _add_channel_bias(y: Tensor, bias: Tensor) -> Tensor:
    data = y.data + bias.data[None, :, None, None]

    def bw(g):
        nd._accumulate(y, g)
        nd._accumulate(bias, g.sum(axis=(0, 2, 3)))
    return nd._result(data, (y, bias), bw)


class Branch:
    def __init__(self, spec: BranchSpec, num_classes: int, rng: np.random.Generator, prefix: str):
        self.spec = spec
        self.blocks = []
        cin = spec.in_channels
        for i, ls in enumerate(spec.layers):
            self.blocks.append(ConvBlock(cin, ls, rng, f"{prefix}.conv{i}"))
            cin = ls.channels
        self.head_w = nd.fan_in_uniform(rng, (cin, num_classes), cin, f"{prefix}.head.weight")
        self.head_b = nd.fan_in_uniform(rng, (num_classes,), cin, f"{prefix}.head.bias")

    def parameters(self) -> list[Tensor]:
        ps = [p for b in self.blocks for p in b.parameters()]
        return ps + [self.head_w, self.head_b]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for b in self.blocks:
            out.update(b.buffers())
        return out

    def head(self, a: Tensor) -> Tensor:
        return nd.linear(nd.global_avg_pool(a), self.head_w, self.head_b)


class NetOutput(NamedTuple):
    logits0: Tensor | None
    logits1: Tensor | None
    probs0: np.ndarray | None
    probs1: np.ndarray | None
    probs: np.ndarray | None


@dataclass
class ParamPartition:
    """Names of the parameters in each group. The joint blocks sit in both primed groups."""

    theta0: list[str] = field(default_factory=list)
    theta1: list[str] = field(default_factory=list)
    theta0_prime: list[str] = field(default_factory=list)
    theta1_prime: list[str] = field(default_factory=list)
    joint: list[str] = field(default_factory=list)

    def labels(self, name: str) -> list[str]:
        return [g for g in ("theta0", "theta1", "theta0_prime", "theta1_prime") if name in getattr(self, g)]


class MultiModalNet:
    def __init__(self, spec: NetSpec, seed: int = 0):
        self.spec = spec
        rng = nd.make_rng(seed)
        n0, n1 = len(spec.branch0.layers), len(spec.branch1.layers)
        if n0 != n1:
            raise ValueError("branches must have the same depth")
        self.branch0 = Branch(spec.branch0, spec.num_classes, rng, "branch0")
        self.branch1 = Branch(spec.branch1, spec.num_classes, rng, "branch1")
        self.fusions: dict[int, FusionModule] = {}
        for j, depth in enumerate(spec.fusion_after):
            if not 0 <= depth < n0:
                raise ValueError(f"fusion depth {depth} out of range")
            c0 = spec.branch0.layers[depth].channels
            c1 = spec.branch1.layers[depth].channels
            self.fusions[depth] = FusionModule(c0, c1, rng, spec.fusion_hidden, prefix=f"fusion{j}")

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        ps = self.branch0.parameters() + self.branch1.parameters()
        for f in self.fusions.values():
            ps += f.parameters()
        return ps

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {**self.branch0.buffers(), **self.branch1.buffers()}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def partition(self) -> ParamPartition:
        part = ParamPartition()
        part.theta0 = [p.name for p in self.branch0.parameters()]
        part.theta1 = [p.name for p in self.branch1.parameters()]
        for f in self.fusions.values():
            joint = [p.name for p in f.joint_params]
            part.joint += joint
            part.theta0_prime += joint + [p.name for p in f.gate0_params]
            part.theta1_prime += joint + [p.name for p in f.gate1_params]
        return part

    # -- forward ------------------------------------------------------------

    def forward(self, x0, x1=None, mode: FusionMode = FusionMode.REGULAR, training: bool = False,
                record_stats: bool = False, taps: list | None = None) -> NetOutput:
        mode = FusionMode(mode)
        if mode is not FusionMode.MARGINAL_M1 and x0 is None:
            raise ValueError(f"mode {mode.value} needs the m0 input")
        if mode is not FusionMode.MARGINAL_M0 and x1 is None:
            raise ValueError(f"mode {mode.value} needs the m1 input")
        a0 = None if mode is FusionMode.MARGINAL_M1 else nd.as_tensor(x0)
        a1 = None if mode is FusionMode.MARGINAL_M0 else nd.as_tensor(x1)
        for depth, (b0, b1) in enumerate(zip(self.branch0.blocks, self.branch1.blocks)):
            if a0 is not None:
                a0 = b0(a0, training)
            if a1 is not None:
                a1 = b1(a1, training)
            fusion = self.fusions.get(depth)
            if fusion is not None:
                a0, a1 = fusion(a0, a1, mode, record_stats=record_stats, taps=taps)
        logits0 = None if a0 is None else self.branch0.head(a0)
        logits1 = None if a1 is None else self.branch1.head(a1)
        probs0 = None if logits0 is None else nd.softmax_np(logits0.data)
        probs1 = None if logits1 is None else nd.softmax_np(logits1.data)
        probs = None
        if probs0 is not None and probs1 is not None:
            if self.spec.average == "logit":
                probs = nd.softmax_np(0.5 * (logits0.data + logits1.data))
            else:
                probs = 0.5 * (probs0 + probs1)
        return NetOutput(logits0, logits1, probs0, probs1, probs)

    __call__ = forward

    # -- mirroring ----------------------------------------------------------

    def mirrored(self) -> MultiModalNet:
        """The same function with the modality roles swapped (branches, gates and stats)."""
        twin = MultiModalNet(self.spec.mirrored(), seed=0)
        for mine, theirs in ((self.branch0, twin.branch1), (self.branch1, twin.branch0)):
            for pm, pt in zip(mine.parameters(), theirs.parameters()):
                pt.data = pm.data.copy()
            for km, kt in zip(mine.buffers().values(), theirs.buffers().values()):
                kt[...] = km
        for depth, f in self.fusions.items():
            g = twin.fusions[depth]
            c0 = f.c0
            g.joint_w.data = np.concatenate([f.joint_w.data[c0:], f.joint_w.data[:c0]], axis=0)
            g.joint_b.data = f.joint_b.data.copy()
            g.gate0_w.data, g.gate0_b.data = f.gate1_w.data.copy(), f.gate1_b.data.copy()
            g.gate1_w.data, g.gate1_b.data = f.gate0_w.data.copy(), f.gate0_b.data.copy()
            s = f.stats
            g.stats.h0_sum, g.stats.h1_sum = s.h1_sum.copy(), s.h0_sum.copy()
            g.stats.w0_sum, g.stats.w1_sum = s.w1_sum.copy(), s.w0_sum.copy()
            g.stats.count = s.count
            if s.h_bar is not None:
                g.stats.h_bar = (s.h_bar[1].copy(), s.h_bar[0].copy())
                g.stats.h_bar_count = s.h_bar_count
        return twin


def loss(logits0: Tensor, logits1: Tensor, y) -> Tensor:
    """Sum of the two modality-specific batch-mean cross-entropies."""
    if logits0 is None or logits1 is None:
        raise ValueError("loss needs both branch logits")
    return nd.softmax_cross_entropy(logits0, y) + nd.softmax_cross_entropy(logits1, y)


def predict(probs: np.ndarray) -> np.ndarray:
    """Argmax class; ties go to the lowest index."""
    return np.argmax(np.asarray(probs), axis=-1)
