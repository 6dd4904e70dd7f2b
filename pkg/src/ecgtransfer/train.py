"""
Dataset assembly, Adam, and the two training loops.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .model import ArrhythmiaNet, ArrhythmiaNetConfig, MiNet, attach_mi_head, parameter_digest
from .wfdb_io import ARRHYTHMIA_CLASSES, MI_CLASSES, BeatSet

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class NonFiniteGradientError(TrainingError):
    def __init__(self, name, iteration):
        super().__init__(f"non-finite gradient for {name!r} at iteration {iteration}")
        self.name = name
        self.iteration = iteration


class DivergenceError(TrainingError):
    def __init__(self, iteration, history):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.history = history


class ProtocolError(ValueError):
    """The requested split or balancing cannot be built from the given beats."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    decay_factor: float = 0.75
    decay_interval: int = 10000
    batch_size: int = 128
    max_iterations: int = 30000
    seed: int = 0
    balance: str = "oversample"
    split_policy: str = "intra"
    log_interval: int = 100

    def __post_init__(self):
        for name in ("learning_rate", "epsilon", "decay_factor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.decay_interval < 1 or self.batch_size < 1 or self.max_iterations < 0:
            raise ValueError("decay_interval and batch_size must be >= 1, max_iterations >= 0")
        if self.balance not in ("oversample", "duplicate", "none"):
            raise ValueError(f"unknown balance mode {self.balance!r}")
        if self.split_policy not in ("intra", "inter"):
            raise ValueError(f"unknown split policy {self.split_policy!r}")

    @classmethod
    def from_mapping(cls, values):
        """Build from string or typed values, ignoring unknown keys."""
        kinds = {f.name: f.type for f in fields(cls)}
        casts = {"float": float, "int": int, "str": str}
        kwargs = {}
        for key, value in values.items():
            key = key.replace("-", "_")
            if key in kinds and value is not None:
                kwargs[key] = casts[kinds[key]](value) if isinstance(value, str) else value
        return cls(**kwargs)

    def as_dict(self):
        return asdict(self)


def lr_schedule(iteration, config=None):
    """Step-wise exponential decay: ``lr * decay ** (iteration // interval)``."""
    config = config or TrainConfig()
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    return config.learning_rate * config.decay_factor ** (iteration // config.decay_interval)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, iteration=None):
    """One bias-corrected Adam update, in place on the arrays in ``params``.

    A tensor whose gradient is identically zero keeps its value and moments,
    so a zero gradient never moves a parameter on stale momentum.
    """
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name, state.t if iteration is None else iteration)
    state.t += 1
    c1 = 1 - beta1 ** state.t
    c2 = 1 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if not g.any():
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return params, state


class Adam:
    """Adam over the trainable tensors of a parameter dict."""

    def __init__(self, params, config):
        self.params = {n: t for n, t in params.items() if t.requires_grad}
        self.config = config
        self.state = AdamState()

    def step(self, iteration):
        c = self.config
        lr = lr_schedule(iteration, c)
        adam_step({n: t.data for n, t in self.params.items()},
                  {n: t.grad for n, t in self.params.items()},
                  self.state, lr, c.beta1, c.beta2, c.epsilon, iteration)
        return lr


# --- datasets ----------------------------------------------------------------


def balance_classes(beats, seed, n_classes=None, mode="oversample"):
    """Oversample minority classes up to the majority count.

    In ``oversample`` mode each added copy is scaled by a factor drawn from
    U[0.9, 1.1] and clipped to [0, 1]; ``duplicate`` adds exact copies and
    ``none`` returns the beats untouched.
    """
    if mode == "none":
        return beats
    if mode not in ("oversample", "duplicate"):
        raise ValueError(f"unknown balance mode {mode!r}")
    n_classes = n_classes or int(beats.labels.max()) + 1
    counts = beats.class_counts(n_classes)
    for k, c in enumerate(counts):
        if c == 0:
            raise ProtocolError(f"class {k} has no beats to balance")
    target = counts.max()
    rng = np.random.default_rng(seed)
    extra_samples, extra_labels, extra_ids = [], [], []
    for k in range(n_classes):
        need = target - counts[k]
        if need == 0:
            continue
        pool = np.flatnonzero(beats.labels == k)
        picks = rng.choice(pool, size=need, replace=True)
        copies = beats.samples[picks]
        if mode == "oversample":
            scale = rng.uniform(0.9, 1.1, size=(need, 1)).astype(np.float32)
            copies = np.clip(copies * scale, 0.0, 1.0)
        extra_samples.append(copies)
        extra_labels.append(np.full(need, k))
        extra_ids += [f"{beats.ids[i]}#aug{j}" for j, i in enumerate(picks)]
    if not extra_samples:
        return beats
    return BeatSet(np.concatenate([beats.samples, *extra_samples]),
                   np.concatenate([beats.labels, *extra_labels]),
                   beats.ids + extra_ids)


@dataclass
class DatasetSplit:
    train: BeatSet
    test: BeatSet
    policy: str
    n_classes: int

    @property
    def train_counts(self):
        return self.train.class_counts(self.n_classes)

    @property
    def test_counts(self):
        return self.test.class_counts(self.n_classes)


def _inter_patient_test_mask(beats, rng, test_fraction):
    subjects = np.asarray(beats.subjects)
    unique = np.unique(subjects)
    order = rng.permutation(unique)
    mask = np.zeros(len(beats), dtype=bool)
    for s in order:
        if mask.sum() >= test_fraction * len(beats):
            break
        mask |= subjects == s
    return mask


def make_mitbih_split(beats, seed, per_class=819, max_test_fraction=0.5, policy="intra",
                      balance="oversample", n_classes=len(ARRHYTHMIA_CLASSES), min_class_size=50):
    """Hold out up to ``per_class`` beats of every class, then balance the rest.

    Classes with fewer than ``2 * per_class`` beats contribute at most
    ``max_test_fraction`` of their beats so that training still sees them.
    """
    counts = beats.class_counts(n_classes)
    for k, c in enumerate(counts):
        if c < min_class_size:
            raise ProtocolError(f"class {k} has {c} beats (< {min_class_size}); test protocol impossible")
    if policy not in ("intra", "inter"):
        raise ValueError(f"unknown split policy {policy!r}")
    rng = np.random.default_rng(seed)
    if policy == "inter":
        # every beat of a held-out subject stays out of training
        held = _inter_patient_test_mask(beats, rng, 0.2)
    else:
        held = np.ones(len(beats), dtype=bool)
    test_idx = []
    for k in range(n_classes):
        pool = np.flatnonzero(held & (beats.labels == k))
        n_test = min(per_class, len(pool))
        if policy == "intra":
            n_test = min(n_test, int(counts[k] * max_test_fraction))
        test_idx.append(np.sort(rng.choice(pool, size=n_test, replace=False)))
    test_idx = np.concatenate(test_idx)
    test_mask = held.copy() if policy == "inter" else np.zeros(len(beats), dtype=bool)
    test_mask[test_idx] = True
    train = beats.subset(np.flatnonzero(~test_mask))
    train = balance_classes(train, seed + 1, n_classes, balance)
    return DatasetSplit(train, beats.subset(test_idx), policy, n_classes)


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def make_ptb_split(beats, seed, train_fraction=0.8, n_classes=len(MI_CLASSES), policy="intra"):
    """Stratified beat-level split (``inter`` keeps each subject on one side)."""
    counts = beats.class_counts(n_classes)
    for k, c in enumerate(counts):
        if c < 2:
            raise ProtocolError(f"class {k} has {c} beats; cannot split")
    rng = np.random.default_rng(seed)
    if policy == "inter":
        test_mask = _inter_patient_test_mask(beats, rng, 1 - train_fraction)
        return DatasetSplit(beats.subset(np.flatnonzero(~test_mask)),
                            beats.subset(np.flatnonzero(test_mask)), policy, n_classes)
    train_idx, test_idx = [], []
    for k in range(n_classes):
        pool = rng.permutation(np.flatnonzero(beats.labels == k))
        n_train = _round_half_up(train_fraction * len(pool))
        train_idx.append(np.sort(pool[:n_train]))
        test_idx.append(np.sort(pool[n_train:]))
    return DatasetSplit(beats.subset(np.concatenate(train_idx)),
                        beats.subset(np.concatenate(test_idx)), policy, n_classes)


# --- training loops --------------------------------------------------------


@dataclass
class History:
    iterations: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    log_interval: int = 100
    metadata: dict = field(default_factory=dict)

    def append(self, iteration, lr, loss, accuracy):
        self.iterations.append(iteration)
        self.lr.append(lr)
        self.loss.append(loss)
        self.accuracy.append(accuracy)

    def rows(self):
        """(iteration, lr, loss, interval accuracy) every ``log_interval`` steps.

        The interval accuracy averages batch accuracy since the previous row.
        """
        out = []
        last = 0
        n = len(self.iterations)
        for i in range(n):
            if i % self.log_interval == 0 or i == n - 1:
                acc = float(np.mean(self.accuracy[last:i + 1]))
                out.append((self.iterations[i], self.lr[i], self.loss[i], acc))
                last = i + 1
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "lr", "loss", "interval_accuracy"])
            for it, lr, loss, acc in self.rows():
                writer.writerow([it, repr(lr), repr(loss), repr(acc)])


def _batches(n, batch_size, rng):
    """Endless shuffled minibatch indices, reshuffled every epoch."""
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start:start + batch_size]


def _fit(net, logits_fn, inputs, labels, config, history, callback=None):
    optimizer = Adam(net.params, config)
    rng = np.random.default_rng([config.seed, 1])
    batches = _batches(len(labels), config.batch_size, rng)
    for it in range(config.max_iterations):
        idx = next(batches)
        net.zero_grad()
        with ad.Tape():
            logits = logits_fn(inputs[idx])
            loss = ad.softmax_cross_entropy(logits, labels[idx])
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(it, history)
        loss.backward()
        lr = optimizer.step(it)
        acc = float(np.mean(logits.data.argmax(axis=1) == labels[idx]))
        history.append(it, lr, value, acc)
        if config.log_interval and it % config.log_interval == 0:
            logger.info("iter %d lr %.6g loss %.4f acc %.3f", it, lr, value, acc)
        if callback is not None and callback(it, net, history):
            logger.info("stopped by callback after iteration %d", it)
            break
    return optimizer


def train_arrhythmia(train, config=None, net=None, net_config=None, callback=None):
    """Train the 5-class network on a (balanced) BeatSet; returns (net, history).

    ``callback(iteration, net, history)`` runs after every step; a true
    return value ends training.
    """
    config = config or TrainConfig()
    if len(train) == 0:
        raise ProtocolError("empty training set")
    net = net or ArrhythmiaNet(net_config or ArrhythmiaNetConfig(), seed=config.seed)
    history = History(log_interval=config.log_interval)
    _fit(net, net.logits, train.samples, train.labels, config, history, callback)
    return net, history


def embed_all(net, samples, batch_size=512):
    chunks = [net.embed(samples[i:i + batch_size]) for i in range(0, len(samples), batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros((0, net.config.embedding_size), net.dtype)


def train_mi(backbone, train, config=None, callback=None):
    """Train a fresh MI head on a frozen backbone; returns (MiNet, history).

    The embeddings of the training beats are computed once, since the
    backbone does not change.
    """
    config = config or TrainConfig()
    if len(train) == 0:
        raise ProtocolError("empty training set")
    if isinstance(backbone, MiNet):
        backbone = backbone.backbone
    mi = attach_mi_head(backbone, seed=config.seed)
    before = parameter_digest(backbone.params)
    features = embed_all(backbone, train.samples)
    history = History(log_interval=config.log_interval)
    optimizer = _fit(mi, mi.head_logits, features, train.labels, config, history, callback)
    after = parameter_digest(backbone.params)
    if before != after:
        raise TrainingError("backbone parameters changed during MI training")
    history.metadata.update(backbone_digest=after,
                            updated_parameters=sorted(optimizer.state.m))
    return mi, history
