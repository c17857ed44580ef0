"""Interface shared by every continual-learning strategy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..nn_core import TrainConfig

# spawn-key prefix keeping strategy randomness apart from the stream
# generator's substreams, which share the same integer seed
STRATEGY_DOMAIN = 16


class ExperienceAccessError(RuntimeError):
    """Raised when a strategy reads an experience after it has ended."""


class ExperienceView:
    """Read-only window onto one experience's training data.

    The harness closes the view as soon as ``train_experience`` returns;
    strategies that want to keep data (replay) must copy it.
    """

    def __init__(self, index: int, classes: tuple[int, ...], x: np.ndarray, y: np.ndarray):
        self.index = index
        self.classes = tuple(classes)
        self._x = np.array(x, dtype=np.float64)
        self._y = np.array(y, dtype=np.int64)
        self._x.flags.writeable = False
        self._y.flags.writeable = False
        self._open = True

    def close(self) -> None:
        self._open = False
        self._x = self._y = None

    def _check(self):
        if not self._open:
            raise ExperienceAccessError(f"experience {self.index} is no longer available")

    @property
    def x(self) -> np.ndarray:
        self._check()
        return self._x

    @property
    def y(self) -> np.ndarray:
        self._check()
        return self._y

    def __len__(self) -> int:
        self._check()
        return len(self._y)


@dataclass
class NetSpec:
    hidden: tuple[int, ...] = (64, 64)
    projection_dim: int = 32

    def layer_dims(self, input_dim: int) -> list[int]:
        return [input_dim, *self.hidden]


@dataclass
class Strategy:
    """Base class: subclasses implement ``train_experience`` and ``predict``."""

    n_classes: int
    input_dim: int
    train: TrainConfig = field(default_factory=TrainConfig)
    net_spec: NetSpec = field(default_factory=NetSpec)
    seed: int = 0

    name = "base"
    log: list = field(default_factory=list, init=False, repr=False)

    def train_experience(self, experience: ExperienceView) -> None:
        raise NotImplementedError

    def predict(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def note(self, message: str) -> None:
        self.log.append(message)

    def rng(self, *key: int) -> np.random.Generator:
        """Generator for a named purpose, derived from the strategy seed."""
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(STRATEGY_DOMAIN, *key)))
