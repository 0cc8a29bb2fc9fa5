"""Seeded bimodal datasets: a colored/gray shortcut task and duplicated-modality controls.

Each class owns a random binary blob prototype. The gray modality is the
prototype plus pixel noise (and an optional small translation). The colored
modality is the same luminance image tinted with one of K palette colors; the
tint equals the label with probability ``p`` and is otherwise one of the other
colors, so color is a shortcut whose reliability differs between splits.
"""

from __future__ import annotations

import colorsys
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class GeneratorSpec:
    num_classes: int = 10
    size: int = 12
    n_train: int = 5000
    n_val: int = 1000
    n_test: int = 1000
    p_train: float = 0.99
    p_val: float = 0.1
    p_test: float = 0.1
    sigma_shape: float = 0.6
    max_shift: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.size < 4:
            raise ValueError("image size must be at least 4")
        for name in ("p_train", "p_val", "p_test"):
            p = getattr(self, name)
            if not (1.0 / self.num_classes - 1e-12 <= p <= 1.0):
                raise ValueError(f"{name}={p} outside [1/K, 1]")
        if self.sigma_shape < 0:
            raise ValueError("sigma_shape must be nonnegative")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("every split needs at least one sample")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> GeneratorSpec:
        return cls(**d)


@dataclass
class Split:
    x0: np.ndarray  # (n, c0, S, S)
    x1: np.ndarray  # (n, c1, S, S)
    y: np.ndarray   # (n,) int64
    color: np.ndarray | None = None  # tint index of x0, when it is a colored image

    def __len__(self) -> int:
        return len(self.y)

    def take(self, idx) -> Split:
        c = None if self.color is None else self.color[idx]
        return Split(self.x0[idx], self.x1[idx], self.y[idx], c)

    def swapped(self) -> Split:
        return Split(self.x1, self.x0, self.y, self.color)


@dataclass
class BimodalDataset:
    train: Split
    val: Split
    test: Split
    spec: GeneratorSpec
    kind: str = "shortcut"  # or "dup-m0" / "dup-m1"

    def split(self, name: str) -> Split:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    @property
    def channels(self) -> tuple[int, int]:
        return self.train.x0.shape[1], self.train.x1.shape[1]

    def swapped(self) -> BimodalDataset:
        return BimodalDataset(self.train.swapped(), self.val.swapped(), self.test.swapped(), self.spec, self.kind)


def palette(k: int) -> np.ndarray:
    """K fully saturated colors with evenly spaced hues, shape (K, 3)."""
    return np.array([colorsys.hsv_to_rgb(i / k, 1.0, 1.0) for i in range(k)])


def prototypes(k: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Binary blob patterns: smoothed noise thresholded at its median."""
    out = np.empty((k, size, size))
    for i in range(k):
        field_ = gaussian_filter(rng.normal(size=(size, size)), sigma=1.2, mode="wrap")
        out[i] = (field_ > np.median(field_)).astype(float)
    return out


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def _render_split(n: int, p: float, spec: GeneratorSpec, protos: np.ndarray, colors: np.ndarray,
                  rng: np.random.Generator) -> Split:
    k = spec.num_classes
    y = _balanced_labels(n, k, rng)
    gray = protos[y].copy()
    if spec.max_shift:
        shifts = rng.integers(-spec.max_shift, spec.max_shift + 1, size=(n, 2))
        for i in range(n):
            gray[i] = np.roll(gray[i], tuple(shifts[i]), axis=(0, 1))
    gray += spec.sigma_shape * rng.normal(size=gray.shape)
    agree = rng.random(n) < p
    # uniform over the other K-1 colors
    other = (y + rng.integers(1, k, size=n)) % k
    color = np.where(agree, y, other)
    x1 = gray[:, None, :, :]
    x0 = colors[color][:, :, None, None] * x1
    return Split(x0, x1, y.astype(np.int64), color.astype(np.int64))


def gen_shortcut_bimodal(spec: GeneratorSpec) -> BimodalDataset:
    spec.validate()
    root = np.random.SeedSequence([spec.seed, 0xC010])
    proto_ss, *split_ss = root.spawn(4)
    protos = prototypes(spec.num_classes, spec.size, np.random.default_rng(proto_ss))
    colors = palette(spec.num_classes)
    sizes = (spec.n_train, spec.n_val, spec.n_test)
    ps = (spec.p_train, spec.p_val, spec.p_test)
    splits = [_render_split(n, p, spec, protos, colors, np.random.default_rng(ss))
              for n, p, ss in zip(sizes, ps, split_ss)]
    return BimodalDataset(*splits, spec=spec, kind="shortcut")


def gen_duplicated(spec: GeneratorSpec, source: str = "m1") -> BimodalDataset:
    """Both modality slots hold the same tensor. A gray source is replicated to three channels."""
    if source not in ("m0", "m1"):
        raise ValueError("source must be 'm0' or 'm1'")
    base = gen_shortcut_bimodal(spec)

    def dup(split: Split) -> Split:
        x = split.x0 if source == "m0" else np.repeat(split.x1, 3, axis=1)
        return Split(x, x.copy(), split.y, split.color if source == "m0" else None)

    return BimodalDataset(dup(base.train), dup(base.val), dup(base.test), spec, kind=f"dup-{source}")


def batches(n: int, batch_size: int, epoch_seed) -> list[np.ndarray]:
    """Seeded permutation of range(n) cut into batches; the last short batch is kept."""
    if not 1 <= batch_size:
        raise ValueError("batch size must be positive")
    perm = np.random.default_rng(epoch_seed).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def epoch_seed(seed: int, epoch: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, 1, epoch])


def color_probe_accuracy(train: Split, split: Split, num_classes: int) -> float:
    """Accuracy of classifying by the direction of x0's mean color, fitted as per-class means."""
    def mean_dir(x0):
        m = x0.mean(axis=(2, 3))
        return m / np.maximum(np.linalg.norm(m, axis=1, keepdims=True), 1e-12)
    d_train = mean_dir(train.x0)
    centers = np.stack([d_train[train.y == c].mean(axis=0) for c in range(num_classes)])
    pred = np.argmax(mean_dir(split.x0) @ centers.T, axis=1)
    return float(np.mean(pred == split.y))
