"""Vanilla, guided (balanced) and random training loops around SGD with momentum.

All three loops share one step function; they differ only in the policy that
picks each step's kind. Regular steps update the fusion statistics and the speed
accumulator; re-balancing steps touch neither.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import ndcore as nd
from .fusion import FusionMode
from .model import MultiModalNet, NetSpec, loss as net_loss, predict
from .speedtrack import SpeedAccumulator, diff_speed, mu
from .synthdata import BimodalDataset, Split, batches, epoch_seed

log = logging.getLogger(__name__)

ALGORITHMS = ("vanilla", "guided", "random")


class StepKind(str, Enum):
    REGULAR = "regular"
    REBALANCE_M0 = "rebalance_m0"
    REBALANCE_M1 = "rebalance_m1"

    @property
    def mode(self) -> FusionMode:
        return FusionMode(self.value)


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    algorithm: str = "vanilla"
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 60
    window: int = 5
    alpha: float = 0.1
    l1: float = 0.0
    seed: int = 0
    stop_at_full_train_acc: bool = True
    eval_batch_size: int = 500

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if not self.lr >= 0:
            raise ValueError("learning rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch size and epochs must be positive")
        if self.l1 < 0:
            raise ValueError("L1 weight must be nonnegative")
        if self.algorithm == "guided":
            if self.window < 1:
                raise ValueError("re-balancing window must be at least 1")
            if not self.alpha > 0:
                raise ValueError("imbalance tolerance must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if d.get("alpha") in ("inf", "Infinity"):
            d["alpha"] = math.inf
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], velocities: Sequence[np.ndarray],
             lr: float, momentum: float = 0.0, l1: float = 0.0) -> None:
    """In-place ``v <- momentum*v + g + l1*sign(theta)``, ``theta <- theta - lr*v``.

    ``sign(0) = 0``, so an exact zero only moves under the data gradient.
    """
    for p, g, v in zip(params, grads, velocities):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient")
        total = g + l1 * np.sign(p) if l1 else g
        v *= momentum
        v += total
        p -= lr * v


class SGD:
    def __init__(self, params: Sequence[nd.Tensor], lr: float, momentum: float = 0.0, l1: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum, self.l1 = lr, momentum, l1
        self.velocity = {p.name: np.zeros_like(p.data) for p in self.params}

    def gradients(self) -> dict[str, np.ndarray]:
        """Gradient of the full objective (data loss plus L1 term) at the current parameters."""
        out = {}
        for p in self.params:
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if self.l1:
                g = g + self.l1 * np.sign(p.data)
            out[p.name] = g
        return out

    def step(self, grads: dict[str, np.ndarray]) -> None:
        # l1 is already folded into ``grads``
        sgd_step([p.data for p in self.params], [grads[p.name] for p in self.params],
                 [self.velocity[p.name] for p in self.params], self.lr, self.momentum, 0.0)


# ---------------------------------------------------------------------------
# step-kind policies


class VanillaPolicy:
    name = "vanilla"

    def next_kind(self, epoch: int) -> StepKind:
        return StepKind.REGULAR

    def observe(self, diff: float | None, epoch: int) -> None:
        pass

    def state(self) -> dict:
        return {}

    def load(self, state: dict) -> None:
        pass


class GuidedPolicy:
    """Balanced-learning state machine.

    After a warm-up epoch of regular steps, a regular step is taken whenever
    ``q == window``; if that step finds ``|diff_speed| > alpha`` the counter resets
    to 1, and the following ``window - 1`` steps re-balance toward m0 when the last
    diff_speed was positive, else toward m1.
    """

    name = "guided"

    def __init__(self, window: int, alpha: float):
        self.window, self.alpha = window, alpha
        self.q = window
        self.last_diff = 0.0

    def next_kind(self, epoch: int) -> StepKind:
        if epoch <= 1 or self.q == self.window:
            return StepKind.REGULAR
        self.q += 1
        return StepKind.REBALANCE_M0 if self.last_diff > 0 else StepKind.REBALANCE_M1

    def observe(self, diff: float | None, epoch: int) -> None:
        if diff is None:
            return
        self.last_diff = diff
        if epoch > 1 and abs(diff) > self.alpha:
            self.q = 1

    def state(self) -> dict:
        return {"q": self.q, "last_diff": self.last_diff}

    def load(self, state: dict) -> None:
        self.q, self.last_diff = int(state["q"]), float(state["last_diff"])


class RandomPolicy:
    """Warm-up epoch of regular steps, then kinds drawn uniformly from ``choices``."""

    name = "random"

    def __init__(self, seed: int, choices: Sequence[StepKind] = tuple(StepKind)):
        self.seed = seed
        self.choices = tuple(choices)
        self._epoch = None
        self._rng = None

    def next_kind(self, epoch: int) -> StepKind:
        if epoch <= 1:
            return StepKind.REGULAR
        if epoch != self._epoch:
            # one stream per epoch keeps resumption exact
            self._epoch = epoch
            self._rng = np.random.default_rng(np.random.SeedSequence([self.seed, 2, epoch]))
        return self.choices[int(self._rng.integers(len(self.choices)))]

    def observe(self, diff: float | None, epoch: int) -> None:
        pass

    def state(self) -> dict:
        return {}

    def load(self, state: dict) -> None:
        pass


def make_policy(cfg: TrainConfig):
    if cfg.algorithm == "vanilla":
        return VanillaPolicy()
    if cfg.algorithm == "guided":
        return GuidedPolicy(cfg.window, cfg.alpha)
    return RandomPolicy(cfg.seed)


# ---------------------------------------------------------------------------
# network state <-> named arrays


def net_state(net: MultiModalNet) -> tuple[dict[str, np.ndarray], dict]:
    """Named copies of every parameter, buffer and fusion-stat array, plus scalar counts."""
    arrays = {name: p.data.copy() for name, p in net.named_parameters().items()}
    arrays.update({name: b.copy() for name, b in net.buffers().items()})
    counts = {}
    for j, f in enumerate(net.fusions.values()):
        s = f.stats
        for key in ("h0_sum", "h1_sum", "w0_sum", "w1_sum"):
            arrays[f"fusion{j}.stats.{key}"] = getattr(s, key).copy()
        counts[f"fusion{j}"] = s.count
    return arrays, counts


def load_net_state(net: MultiModalNet, arrays: dict[str, np.ndarray], counts: dict) -> None:
    for name, p in net.named_parameters().items():
        p.data = arrays[name].copy()
    for name, b in net.buffers().items():
        b[...] = arrays[name]
    for j, f in enumerate(net.fusions.values()):
        s = f.stats
        for key in ("h0_sum", "h1_sum", "w0_sum", "w1_sum"):
            setattr(s, key, arrays[f"fusion{j}.stats.{key}"].copy())
        s.count = int(counts[f"fusion{j}"])
        s.h_bar, s.h_bar_count = None, 0


@dataclass
class Checkpoint:
    """Everything needed to rebuild the network and continue training exactly."""

    net_spec: dict
    config: dict
    arrays: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    stats_counts: dict
    partition: dict
    step: int
    epoch: int
    best_val: float
    best_epoch: int
    best_step: int
    accumulator: dict
    policy: dict
    history: list = field(default_factory=list)

    def build_net(self) -> MultiModalNet:
        net = MultiModalNet(NetSpec.from_dict(self.net_spec), seed=0)
        load_net_state(net, self.arrays, self.stats_counts)
        return net


# ---------------------------------------------------------------------------
# evaluation helpers shared with the diagnostics


def evaluate_probs(net: MultiModalNet, split: Split, mode: FusionMode = FusionMode.REGULAR,
                   batch_size: int = 500, drop_m1: bool = False) -> tuple:
    outs = []
    with nd.no_grad():
        for i in range(0, len(split), batch_size):
            x0 = split.x0[i:i + batch_size]
            x1 = None if drop_m1 else split.x1[i:i + batch_size]
            o = net.forward(x0, x1, mode, training=False)
            outs.append((o.probs0, o.probs1, o.probs))
    cat = []
    for k in range(3):
        parts = [o[k] for o in outs]
        cat.append(None if parts[0] is None else np.concatenate(parts))
    return tuple(cat)


def accuracy_f(net: MultiModalNet, split: Split, batch_size: int = 500) -> float:
    _, _, probs = evaluate_probs(net, split, batch_size=batch_size)
    return float(np.mean(predict(probs) == split.y))


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class EpochLog:
    epoch: int
    step: int
    train_loss: float
    train_acc: float
    val_acc: float
    diff_speed: float | None
    kinds: dict


def select_best(val_accs: Sequence[float], steps_per_epoch: Sequence[int] | int) -> tuple[int, int]:
    """Best epoch (1-based, earliest on ties) and the cumulative step count at its end."""
    if len(val_accs) == 0:
        raise ValueError("no validation measurements")
    best = int(np.argmax(np.asarray(val_accs)))
    if isinstance(steps_per_epoch, int):
        cum = steps_per_epoch * (best + 1)
    else:
        cum = int(np.sum(steps_per_epoch[: best + 1]))
    return best + 1, cum


class Trainer:
    def __init__(self, net: MultiModalNet, data: BimodalDataset, cfg: TrainConfig, policy=None):
        cfg.validate()
        self.net, self.data, self.cfg = net, data, cfg
        self.policy = policy if policy is not None else make_policy(cfg)
        self.opt = SGD(net.parameters(), cfg.lr, cfg.momentum, cfg.l1)
        part = net.partition()
        self.partition = part
        named = net.named_parameters()
        self.groups = {g: [named[n] for n in getattr(part, g)]
                       for g in ("theta0", "theta0_prime", "theta1", "theta1_prime")}
        self.acc = SpeedAccumulator()
        self.step = 0
        self.epoch = 0
        self.best_val = -1.0
        self.best_epoch = 0
        self.best_step = 0
        self.best: Checkpoint | None = None
        self.history: list[dict] = []
        self.trace: list[StepKind] | None = None
        self.speed_log: Callable[[dict], None] | None = None

    # -- single step --------------------------------------------------------

    def take_step(self, idx: np.ndarray, kind: StepKind) -> tuple[float, np.ndarray]:
        net, split = self.net, self.data.train
        x0, x1, y = split.x0[idx], split.x1[idx], split.y[idx]
        net.zero_grad()
        regular = kind is StepKind.REGULAR
        out = net.forward(x0, x1, kind.mode, training=True, record_stats=regular)
        L = net_loss(out.logits0, out.logits1, y)
        if not np.isfinite(L.data):
            raise NonFiniteError(f"non-finite loss at step {self.step + 1}")
        nd.backward(L)
        grads = self.opt.gradients()
        self.opt.step(grads)
        self.step += 1
        if self.trace is not None:
            self.trace.append(kind)
        if regular:
            mus = [mu([grads[p.name] for p in self.groups[g]], [p.data for p in self.groups[g]])
                   if self.groups[g] else 0.0
                   for g in ("theta0", "theta0_prime", "theta1", "theta1_prime")]
            self.acc.accumulate(*mus)
            try:
                diff = diff_speed(self.acc)
            except ValueError:
                diff = None
            self.policy.observe(diff, self.epoch)
            if self.speed_log is not None:
                self.speed_log({"step": self.step, **self.acc.to_dict(), "diff_speed": diff})
        return float(L.data), out.probs

    # -- epochs -------------------------------------------------------------

    def run_epoch(self) -> EpochLog:
        self.epoch += 1
        n = len(self.data.train)
        kinds = {k.value: 0 for k in StepKind}
        loss_sum, correct = 0.0, 0
        for idx in batches(n, self.cfg.batch_size, epoch_seed(self.cfg.seed, self.epoch)):
            kind = self.policy.next_kind(self.epoch)
            kinds[kind.value] += 1
            L, probs = self.take_step(idx, kind)
            loss_sum += L * len(idx)
            correct += int(np.sum(predict(probs) == self.data.train.y[idx]))
        val = accuracy_f(self.net, self.data.val, self.cfg.eval_batch_size)
        try:
            ds = diff_speed(self.acc)
        except ValueError:
            ds = None
        entry = EpochLog(self.epoch, self.step, loss_sum / n, correct / n, val, ds, kinds)
        self.history.append(asdict(entry))
        if val > self.best_val:
            self.best_val, self.best_epoch, self.best_step = val, self.epoch, self.step
            self.best = self.checkpoint()
        return entry

    def run(self, epochs: int | None = None) -> Checkpoint:
        target = self.cfg.epochs if epochs is None else epochs
        while self.epoch < target:
            entry = self.run_epoch()
            log.debug("epoch %d loss %.4f train %.3f val %.3f", entry.epoch, entry.train_loss,
                      entry.train_acc, entry.val_acc)
            if self.cfg.stop_at_full_train_acc and entry.train_acc >= 1.0:
                break
        return self.best

    # -- checkpointing ------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        arrays, counts = net_state(self.net)
        part = self.partition
        return Checkpoint(
            net_spec=self.net.spec.to_dict(), config=self.cfg.to_dict(), arrays=arrays,
            velocity={k: v.copy() for k, v in self.opt.velocity.items()}, stats_counts=counts,
            partition={n: part.labels(n) for n in self.net.named_parameters()},
            step=self.step, epoch=self.epoch, best_val=self.best_val, best_epoch=self.best_epoch,
            best_step=self.best_step, accumulator=self.acc.to_dict(), policy=self.policy.state(),
            history=copy.deepcopy(self.history))

    @classmethod
    def resume(cls, ckpt: Checkpoint, data: BimodalDataset, best: Checkpoint | None = None) -> Trainer:
        cfg = TrainConfig.from_dict(ckpt.config)
        trainer = cls(ckpt.build_net(), data, cfg)
        for name, v in ckpt.velocity.items():
            trainer.opt.velocity[name][...] = v
        trainer.acc = SpeedAccumulator(**ckpt.accumulator)
        trainer.policy.load(ckpt.policy)
        trainer.step, trainer.epoch = ckpt.step, ckpt.epoch
        trainer.best_val, trainer.best_epoch, trainer.best_step = ckpt.best_val, ckpt.best_epoch, ckpt.best_step
        trainer.history = copy.deepcopy(ckpt.history)
        trainer.best = best if best is not None else (ckpt if ckpt.epoch == ckpt.best_epoch else None)
        return trainer


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    status: str
    error: str | None
    epochs_completed: int
    best_val: float
    T: int
    diff_speed_at_T: float | None
    wall_time: float
    history: list


def _train(net: MultiModalNet, data: BimodalDataset, cfg: TrainConfig, policy=None,
           speed_log: Callable[[dict], None] | None = None) -> TrainResult:
    t0 = time.perf_counter()
    trainer = Trainer(net, data, cfg, policy)
    trainer.speed_log = speed_log
    status, error = "ok", None
    try:
        trainer.run()
    except NonFiniteError as exc:
        status, error = "failed", str(exc)
    best = trainer.best
    ds = None
    if best is not None:
        try:
            ds = diff_speed(SpeedAccumulator(**best.accumulator))
        except ValueError:
            ds = None
    return TrainResult(best, trainer.checkpoint(), status, error, trainer.epoch, trainer.best_val,
                       trainer.best_step, ds, time.perf_counter() - t0, trainer.history)


def train_vanilla(net, data, cfg: TrainConfig, speed_log=None) -> TrainResult:
    if cfg.algorithm != "vanilla":
        raise ValueError("train_vanilla needs algorithm='vanilla'")
    return _train(net, data, cfg, speed_log=speed_log)


def train_guided(net, data, cfg: TrainConfig, speed_log=None) -> TrainResult:
    if cfg.algorithm != "guided":
        raise ValueError("train_guided needs algorithm='guided'")
    return _train(net, data, cfg, speed_log=speed_log)


def train_random(net, data, cfg: TrainConfig, speed_log=None,
                 choices: Sequence[StepKind] | None = None) -> TrainResult:
    if cfg.algorithm != "random":
        raise ValueError("train_random needs algorithm='random'")
    policy = RandomPolicy(cfg.seed, choices) if choices is not None else None
    return _train(net, data, cfg, policy, speed_log=speed_log)


def train(net, data, cfg: TrainConfig, speed_log=None) -> TrainResult:
    fn = {"vanilla": train_vanilla, "guided": train_guided, "random": train_random}[cfg.algorithm]
    return fn(net, data, cfg, speed_log=speed_log)
