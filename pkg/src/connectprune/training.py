"""Toy data, the regularized objective, Adam and the training loops.

Randomness comes from numpy's PCG64 bit generator with its ziggurat normal
sampler (``numpy.random.default_rng``). Epoch ``e`` of a run seeded ``s``
shuffles with ``default_rng([s, e])``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import Tape, backward, forward
from .connectivity import LOG_EPS, Mode, connectivity_on_tape, total_connectivity
from .network import LayeredNetwork, add_to_tape, predict

__all__ = [
    "RNG_SCHEME",
    "ToyDataset",
    "RegularizerConfig",
    "PRESETS",
    "TrainConfig",
    "EpochRecord",
    "RunMetrics",
    "TrainingError",
    "generate_toy",
    "Objective",
    "total_objective",
    "Adam",
    "learning_rate",
    "evaluate",
    "train",
    "fine_tune",
]

RNG_SCHEME = "numpy PCG64 / ziggurat normals"

TOY_FEATURES = 6
TOY_VARIANCE = 2.0
TOY_NOISE_STD = 0.25


class TrainingError(FloatingPointError):
    """Non-finite objective or gradient during training."""


@dataclass
class ToyDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    seed: int


def generate_toy(n: int = 10_000, seed: int = 0, n_test: int = 2_000) -> ToyDataset:
    """Six Gaussian features with variance 2; label is sign(x1 + x2 + noise).

    Noise is Gaussian with standard deviation 0.25. Only the first two features
    carry label information.
    """
    if n < 1 or n_test < 0:
        raise ValueError("need n >= 1 training samples and n_test >= 0")
    rng = np.random.default_rng(seed)
    total = n + n_test
    x = rng.standard_normal((total, TOY_FEATURES)) * math.sqrt(TOY_VARIANCE)
    noise = rng.standard_normal(total) * TOY_NOISE_STD
    y = (x[:, 0] + x[:, 1] + noise > 0).astype(np.float64).reshape(-1, 1)
    return ToyDataset(x[:n], y[:n], x[n:], y[n:], seed)


@dataclass(frozen=True)
class RegularizerConfig:
    """Coefficients of the L1, log-connectivity and squared-L2 penalties."""

    l1: float = 0.0
    connect: float = 0.0
    l2: float = 0.0

    def __post_init__(self):
        if min(self.l1, self.connect, self.l2) < 0:
            raise ValueError("regularizer coefficients must be >= 0")


PRESETS = {
    "none": RegularizerConfig(0.0, 0.0, 5e-4),
    "l1": RegularizerConfig(1e-3, 0.0, 5e-4),
    "connect": RegularizerConfig(0.0, 1e-1, 5e-4),
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    lr: float = 0.01
    warmup_epochs: int = 0
    warmup_start: float = 0.01
    warmup_end: float = 1.0
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("need epochs >= 1, batch_size >= 1 and lr > 0")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be in [0, epochs)")


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    """Per-epoch learning rate.

    Linear warmup for ``w`` epochs, ``lr * (s + (f - s) * e / w)``, then cosine
    annealing to zero over the remaining ``T - w`` epochs,
    ``lr * (1 + cos(pi * (e - w) / (T - w))) / 2``.
    """
    w, T = cfg.warmup_epochs, cfg.epochs
    if epoch < w:
        return cfg.lr * (cfg.warmup_start + (cfg.warmup_end - cfg.warmup_start) * epoch / w)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - w) / (T - w)))


class Adam:
    """Adam with bias correction, updating arrays in place."""

    def __init__(self, params: dict[str, np.ndarray], betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class Objective:
    """BCE + l1 * sum|W| - connect * log(phi) + l2 * sum W^2, recorded once on a tape.

    Penalties apply to weight matrices only; the connectivity term also sees
    the scaling factors.
    """

    def __init__(self, net: LayeredNetwork, reg: RegularizerConfig):
        self.net = net
        self.reg = reg
        tape = Tape()
        self.x = tape.constant("x", np.zeros((1, net.sizes[0])))
        self.y = tape.constant("y", np.zeros((1, net.sizes[-1])))
        logits = add_to_tape(net, tape, self.x)
        self.bce = tape.bce_logits(logits, self.y)
        total = self.bce
        weights = [tape.leaves[f"W{k}"] for k in range(len(net.weights))]
        if reg.l1:
            for w in weights:
                total = tape.add(total, tape.scale(tape.sum(tape.abs(w)), reg.l1))
        self.phi = None
        if reg.connect:
            self.phi = connectivity_on_tape(tape, net, tape.leaves, Mode.NORMALIZED)
            total = tape.add(total, tape.scale(tape.log(self.phi, floor=LOG_EPS), -reg.connect))
        if reg.l2:
            for w in weights:
                total = tape.add(total, tape.scale(tape.sum(tape.mul(w, w)), reg.l2))
        tape.set_exit(total)
        self.tape = tape
        self._params = net.parameters()

    def evaluate(self, x: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        """Objective value and gradients (shaped like the parameters) at the current weights."""
        tape = self.tape
        tape.bind("x", x)
        tape.bind("y", y)
        for name, value in self._params.items():
            tape.bind(name, value)
        value = forward(tape)
        grads = backward(tape)
        return value, {name: grads[name].reshape(p.shape) for name, p in self._params.items()}

    @property
    def phi_value(self) -> float | None:
        return None if self.phi is None else float(self.phi.value[0, 0])


def total_objective(net: LayeredNetwork, x, y, reg: RegularizerConfig) -> tuple[float, dict[str, np.ndarray]]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(x.shape[0], -1)
    if x.shape[0] == 0:
        raise ValueError("objective needs a nonempty batch")
    return Objective(net, reg).evaluate(x, y)


def evaluate(net: LayeredNetwork, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """(mean BCE, accuracy at threshold 0.5) of the network's sigmoid outputs."""
    p = np.clip(predict(net, x), 1e-15, 1.0 - 1e-15)
    loss = float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())
    acc = float(((p > 0.5) == (y > 0.5)).mean())
    return loss, acc


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    test_loss: float
    test_acc: float
    phi_tot: float
    phi_min: float  # smallest connectivity seen on any step of the epoch
    collapse: bool
    layer_mass: list[float]


@dataclass
class RunMetrics:
    header: dict
    epochs: list[EpochRecord] = field(default_factory=list)
    post_prune_acc: float | None = None
    post_finetune_acc: float | None = None
    collapsed: bool = False

    SCHEMA = "connectprune.metrics/1"

    def to_jsonl(self) -> str:
        lines = [json.dumps({"schema": self.SCHEMA, **self.header}, sort_keys=True)]
        lines += [json.dumps(asdict(r), sort_keys=True) for r in self.epochs]
        lines.append(json.dumps({
            "post_prune_acc": self.post_prune_acc,
            "post_finetune_acc": self.post_finetune_acc,
            "collapsed": self.collapsed,
        }, sort_keys=True))
        return "\n".join(lines) + "\n"


def _run(net: LayeredNetwork, data: ToyDataset, reg: RegularizerConfig, cfg: TrainConfig, phase: str):
    net = net.copy()
    net.enforce_mask()
    objective = Objective(net, reg)
    params = net.parameters()
    masks = net.parameter_masks()
    opt = Adam(params, cfg.betas, cfg.eps)
    metrics = RunMetrics({
        "phase": phase,
        "rng": RNG_SCHEME,
        "seed": cfg.seed,
        "config": {k: v for k, v in asdict(cfg).items()},
        "regularizer": asdict(reg),
        "sizes": list(net.sizes),
    })
    n = data.x_train.shape[0]
    for epoch in range(cfg.epochs):
        lr = learning_rate(epoch, cfg)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total, phi_min = 0.0, math.inf
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            value, grads = objective.evaluate(data.x_train[idx], data.y_train[idx])
            if not math.isfinite(value):
                raise TrainingError(f"{phase}: non-finite objective at epoch {epoch}, batch {b}")
            if objective.phi is not None:
                phi_min = min(phi_min, objective.phi_value)
            for name, m in masks.items():
                grads[name] = grads[name] * m
            opt.step(grads, lr)
            for name, m in masks.items():
                params[name][~m] = 0.0
            for name, p in params.items():
                if not np.isfinite(p).all():
                    raise TrainingError(f"{phase}: parameter {name} overflowed at epoch {epoch}, batch {b}")
            total += value * idx.size
        phi = total_connectivity(net)
        test_loss, test_acc = evaluate(net, data.x_test, data.y_test) if data.x_test.size else (math.nan, math.nan)
        metrics.epochs.append(EpochRecord(
            epoch=epoch,
            lr=lr,
            train_loss=total / n,
            test_loss=test_loss,
            test_acc=test_acc,
            phi_tot=phi,
            phi_min=min(phi_min, phi),
            collapse=phi == 0.0,
            layer_mass=[float(np.abs(w).sum()) for w in net.weights],
        ))
    metrics.collapsed = metrics.epochs[-1].collapse
    return net, metrics


def train(net: LayeredNetwork, data: ToyDataset, reg: RegularizerConfig, cfg: TrainConfig):
    """Minibatch Adam on the regularized objective; returns (trained copy, metrics).

    A mask attached to ``net`` is respected: masked entries get no update and
    stay exactly zero.
    """
    return _run(net, data, reg, cfg, "train")


def fine_tune(net: LayeredNetwork, data: ToyDataset, cfg: TrainConfig,
              reg: RegularizerConfig | None = None, *, keep_regularizers: bool = False):
    """Retrain a pruned network with its mask pinned.

    By default the L1 and connectivity penalties are switched off; the squared
    L2 penalty of ``reg`` is kept.
    """
    if net.mask is None:
        raise ValueError("fine_tune expects a network carrying a prune mask")
    reg = reg or RegularizerConfig()
    if not keep_regularizers:
        reg = replace(reg, l1=0.0, connect=0.0)
    return _run(net, data, reg, cfg, "finetune")
