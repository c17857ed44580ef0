"""Reference strategies: fine-tuning, replay, EWC, LwF and joint training."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..nn_core import (
    SGD,
    MlpNetwork,
    augment,
    cross_entropy,
    distillation_loss,
    minibatches,
)
from .base import ExperienceView, Strategy


@dataclass
class SingleNetStrategy(Strategy):
    """One network with a head over all classes, trained experience by experience."""

    name = "naive"

    def __post_init__(self):
        self.net = MlpNetwork(
            self.net_spec.layer_dims(self.input_dim), self.n_classes, None,
            seed=int(self.rng(0).integers(2**63)),
        )
        self.n_experiences_seen = 0

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.net.forward(x).logits.argmax(axis=1)

    def batch_loss(self, fwd, xb, yb):
        """Gradients w.r.t. the logits for one batch (hook for subclasses)."""
        _, d_logits = cross_entropy(fwd.logits, yb)
        return d_logits

    def after_step(self, optimizer: SGD) -> None:
        pass

    def fit(self, x: np.ndarray, y: np.ndarray, rng: np.random.Generator, extra_batches=None) -> None:
        opt = SGD(self.train.learning_rate, self.train.momentum, self.train.weight_decay)
        step = 0
        for _ in range(self.train.epochs):
            for idx in minibatches(len(x), self.train.batch_size, rng):
                xb, yb = x[idx], y[idx]
                if extra_batches is not None:
                    more = extra_batches(rng)
                    if more is not None:
                        xb = np.vstack([xb, more[0]])
                        yb = np.concatenate([yb, more[1]])
                xb = augment(xb, self.train.augmentation_strength, rng)
                fwd = self.net.forward(xb)
                d_logits = self.batch_loss(fwd, xb, yb)
                opt.step(self.net.params, self.net.backward(fwd, d_logits=d_logits), step)
                self.after_step(opt)
                step += 1

    def train_experience(self, experience: ExperienceView) -> None:
        self.fit(experience.x, experience.y, self.rng(1, experience.index))
        self.n_experiences_seen += 1


@dataclass
class Naive(SingleNetStrategy):
    name = "naive"


# ---------------------------------------------------------------------------
# Experience replay
# ---------------------------------------------------------------------------


class ReplayBuffer:
    """Class-balanced reservoir.

    While there is room every sample is stored. Once full, a sample of a class
    that is not among the largest evicts a random sample of the largest class
    (lowest id on ties); a sample of a largest class replaces a random sample
    of its own class with probability ``stored_c / seen_c``.
    """

    def __init__(self, capacity: int, input_dim: int, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.x = np.zeros((capacity, input_dim))
        self.y = np.full(capacity, -1, dtype=np.int64)
        self.size = 0
        self.seen: dict[int, int] = {}
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return self.size

    def class_counts(self) -> dict[int, int]:
        labels, counts = np.unique(self.y[: self.size], return_counts=True)
        return {int(c): int(n) for c, n in zip(labels, counts)}

    def add(self, x: np.ndarray, label: int) -> None:
        label = int(label)
        self.seen[label] = self.seen.get(label, 0) + 1
        if self.size < self.capacity:
            self.x[self.size], self.y[self.size] = x, label
            self.size += 1
            return
        counts = self.class_counts()
        largest = max(counts.values())
        if counts.get(label, 0) < largest:
            victim_class = min(c for c, n in counts.items() if n == largest)
            slots = np.flatnonzero(self.y == victim_class)
            slot = slots[self.rng.integers(slots.size)]
            self.x[slot], self.y[slot] = x, label
        elif self.rng.random() < counts[label] / self.seen[label]:
            slots = np.flatnonzero(self.y == label)
            slot = slots[self.rng.integers(slots.size)]
            self.x[slot] = x

    def extend(self, x: np.ndarray, y: np.ndarray) -> None:
        for i in self.rng.permutation(len(y)):
            self.add(x[i], y[i])

    def sample(self, n: int, rng: np.random.Generator):
        if self.size == 0:
            return None
        idx = rng.integers(self.size, size=min(n, self.size))
        return self.x[idx].copy(), self.y[idx].copy()


@dataclass
class Replay(SingleNetStrategy):
    capacity: int = 200
    replay_batch_size: int | None = None  # None: same as the current batch

    name = "er"

    def __post_init__(self):
        super().__post_init__()
        self.buffer = ReplayBuffer(self.capacity, self.input_dim, seed=int(self.rng(2).integers(2**63)))

    def train_experience(self, experience: ExperienceView) -> None:
        n = self.replay_batch_size or self.train.batch_size
        draw = (lambda rng: self.buffer.sample(n, rng)) if len(self.buffer) else None
        self.fit(experience.x, experience.y, self.rng(1, experience.index), draw)
        self.buffer.extend(experience.x, experience.y)


# ---------------------------------------------------------------------------
# EWC
# ---------------------------------------------------------------------------


@dataclass
class FisherState:
    importance: dict[str, np.ndarray] = field(default_factory=dict)
    anchors: dict[str, np.ndarray] = field(default_factory=dict)

    def penalty(self, params: dict[str, np.ndarray], lam: float) -> float:
        return float(
            lam * sum((self.importance[k] * (params[k] - self.anchors[k]) ** 2).sum() for k in self.importance)
        )

    def penalty_grad(self, params: dict[str, np.ndarray], lam: float) -> dict[str, np.ndarray]:
        return {k: 2.0 * lam * self.importance[k] * (params[k] - self.anchors[k]) for k in self.importance}


def empirical_fisher(net: MlpNetwork, x: np.ndarray, y: np.ndarray) -> dict[str, np.ndarray]:
    """Mean squared per-sample log-likelihood gradient."""
    total = {k: np.zeros_like(v) for k, v in net.params.items()}
    for i in range(len(y)):
        fwd = net.forward(x[i : i + 1])
        _, d_logits = cross_entropy(fwd.logits, y[i : i + 1])
        for k, g in net.backward(fwd, d_logits=d_logits).items():
            total[k] += g * g
    return {k: v / max(len(y), 1) for k, v in total.items()}


@dataclass
class Ewc(SingleNetStrategy):
    ewc_lambda: float = 1.0

    name = "ewc"

    def __post_init__(self):
        super().__post_init__()
        self.fisher = FisherState()

    def after_step(self, optimizer: SGD) -> None:
        # exact proximal step for the quadratic penalty: stable for any lambda
        if not self.fisher.importance or self.ewc_lambda == 0:
            return
        lr = optimizer.lr
        for k, imp in self.fisher.importance.items():
            c = 2.0 * lr * self.ewc_lambda * imp
            w = self.net.params[k]
            w[...] = (w + c * self.fisher.anchors[k]) / (1.0 + c)

    def train_experience(self, experience: ExperienceView) -> None:
        super().train_experience(experience)
        fisher = empirical_fisher(self.net, experience.x, experience.y)
        for k, f in fisher.items():
            self.fisher.importance[k] = self.fisher.importance.get(k, 0.0) + f
            self.fisher.anchors[k] = self.net.params[k].copy()


# ---------------------------------------------------------------------------
# LwF
# ---------------------------------------------------------------------------


@dataclass
class DistillState:
    teacher: MlpNetwork | None = None
    known_classes: tuple[int, ...] = ()
    alpha: float = 1.0
    temperature: float = 2.0


@dataclass
class Lwf(SingleNetStrategy):
    alpha: float = 1.0
    temperature: float = 2.0

    name = "lwf"

    def __post_init__(self):
        super().__post_init__()
        self.distill = DistillState(alpha=self.alpha, temperature=self.temperature)

    def batch_loss(self, fwd, xb, yb):
        d_logits = super().batch_loss(fwd, xb, yb)
        state = self.distill
        if state.teacher is None:
            return d_logits
        cols = list(state.known_classes)
        teacher = state.teacher.forward(xb).logits[:, cols]
        _, d_kd = distillation_loss(fwd.logits[:, cols], teacher, state.temperature, state.alpha)
        d_logits[:, cols] += d_kd
        return d_logits

    def train_experience(self, experience: ExperienceView) -> None:
        super().train_experience(experience)
        known = set(self.distill.known_classes) | {int(c) for c in np.unique(experience.y)}
        self.distill.teacher = self.net.copy()
        self.distill.known_classes = tuple(sorted(known))


# ---------------------------------------------------------------------------
# Joint
# ---------------------------------------------------------------------------


@dataclass
class Joint(SingleNetStrategy):
    """IID upper bound: trained once on the union of the stream's data."""

    name = "joint"

    def train_joint(self, x: np.ndarray, y: np.ndarray) -> None:
        # same substream as experience 1, so a one-experience stream matches naive
        self.fit(x, y, self.rng(1, 1))

    def train_experience(self, experience: ExperienceView) -> None:
        raise RuntimeError("joint training sees the whole stream at once; use train_joint")
