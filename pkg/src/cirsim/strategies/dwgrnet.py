"""One frozen branch per experience, fused with open-set weighting.

Every experience trains a new branch whose head covers only that
experience's classes. At test time each branch's logit for a class is scaled
by the inverse entropy of the branch's prediction, the branch's class count
and the sample's feature norm, and the fused logit is the maximum over the
branches that know the class.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from ..nn_core import SGD, MlpNetwork, accuracy, augment, cross_entropy, minibatches, softmax
from .base import ExperienceView, Strategy

logger = logging.getLogger(__name__)


@dataclass
class Branch:
    net: MlpNetwork
    experience_index: int
    classes: tuple[int, ...]

    @property
    def n_classes(self) -> int:
        return len(self.classes)


@dataclass(frozen=True)
class FusionConfig:
    use_entropy: bool = True
    use_class_count: bool = True
    use_feature_norm: bool = True
    entropy_floor: float = 1e-4
    reduce: str = "max"

    def __post_init__(self):
        if self.reduce not in ("max", "mean"):
            raise ValueError(f"fusion_reduce must be max or mean, got {self.reduce!r}")
        if self.entropy_floor <= 0:
            raise ValueError("entropy_floor must be positive")


ABLATION_SETTINGS: tuple[tuple[str, FusionConfig], ...] = (
    ("none", FusionConfig(False, False, False, reduce="mean")),
    ("+entropy", FusionConfig(True, False, False)),
    ("+N_C", FusionConfig(True, True, False)),
    ("+feature_norm", FusionConfig(True, True, True)),
)


def mix_views(x: np.ndarray, mix_coefficient: float, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Blend of two augmented views (Beta(1, 1) weight), mixed into ``x``.

    ``mix_coefficient`` 0 returns ``x`` untouched and draws nothing.
    """
    if mix_coefficient == 0:
        return x
    lam = rng.beta(1.0, 1.0, size=(len(x), 1))
    mixed = lam * augment(x, strength, rng) + (1.0 - lam) * augment(x, strength, rng)
    return (1.0 - mix_coefficient) * x + mix_coefficient * mixed


def train_branch(
    x: np.ndarray,
    y: np.ndarray,
    classes,
    experience_index: int,
    layer_dims: list[int],
    train,
    mix_coefficient: float = 1.0,
    seed: int = 0,
) -> Branch:
    """Cross-entropy training of a fresh branch over ``classes``."""
    classes = tuple(sorted(int(c) for c in classes))
    local = np.searchsorted(classes, y)
    rng = np.random.default_rng(seed)
    net = MlpNetwork(layer_dims, len(classes), None, seed=int(rng.integers(2**63)))
    aug_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    opt = SGD(train.learning_rate, train.momentum, train.weight_decay)
    step = 0
    for _ in range(train.epochs):
        for idx in minibatches(len(x), train.batch_size, rng):
            xb = mix_views(x[idx], mix_coefficient, train.augmentation_strength, aug_rng)
            fwd = net.forward(xb)
            _, d_logits = cross_entropy(fwd.logits, local[idx])
            opt.step(net.params, net.backward(fwd, d_logits=d_logits), step)
            step += 1
    for v in net.params.values():
        v.flags.writeable = False
    return Branch(net, experience_index, classes)


def entropy(logits: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    p = softmax(logits)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)
    return np.maximum(h, floor)


def branch_signals(branch: Branch, x: np.ndarray, entropy_floor: float = 1e-4):
    """Logits over the branch's classes, clamped entropy, feature L2 norm."""
    fwd = branch.net.forward(x)
    return fwd.logits, entropy(fwd.logits, entropy_floor), np.linalg.norm(fwd.features, axis=1)


def fuse_signals(signals, branches: list[Branch], fusion: FusionConfig, n_classes: int) -> np.ndarray:
    """Fused per-class logits from per-branch ``(logits, entropy, norm)``.

    ``max`` takes, per class, the maximum over the branches whose output
    space contains it; classes no branch knows come out as ``-inf``. ``mean``
    averages over *all* branches, a branch contributing 0 for classes outside
    its output space (every branch votes on every class).
    """
    batch = signals[0][0].shape[0]
    if fusion.reduce == "max":
        fused = np.full((batch, n_classes), -np.inf)
    else:
        fused = np.zeros((batch, n_classes))
    covered = np.zeros(n_classes, dtype=bool)
    for branch, (logits, ent, norm) in zip(branches, signals):
        # factors applied left to right: (logit / entropy) * N_C * norm
        weighted = logits
        if fusion.use_entropy:
            weighted = weighted / ent[:, None]
        if fusion.use_class_count:
            weighted = weighted * branch.n_classes
        if fusion.use_feature_norm:
            weighted = weighted * norm[:, None]
        cols = list(branch.classes)
        covered[cols] = True
        if fusion.reduce == "max":
            fused[:, cols] = np.maximum(fused[:, cols], weighted)
        else:
            fused[:, cols] += weighted
    if fusion.reduce == "mean":
        fused /= len(branches)
        fused[:, ~covered] = -np.inf
    return fused


def ensemble_predict(
    branches: list[Branch], fusion: FusionConfig, batch: np.ndarray, n_classes: int
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate branches one at a time and fuse their weighted logits."""
    if not branches:
        raise RuntimeError("no branches trained")
    signals = [branch_signals(b, batch, fusion.entropy_floor) for b in branches]
    fused = fuse_signals(signals, branches, fusion, n_classes)
    uncovered = np.isneginf(fused).all(axis=0)
    if uncovered.any():
        logger.debug("classes %s are covered by no branch", np.flatnonzero(uncovered).tolist())
    return fused, fused.argmax(axis=1)


@dataclass
class DwgrConfig:
    use_entropy: bool = True
    use_class_count: bool = True
    use_feature_norm: bool = True
    entropy_floor: float = 1e-4
    fusion_reduce: str = "max"
    mix_coefficient: float = 1.0

    def fusion(self) -> FusionConfig:
        return FusionConfig(
            self.use_entropy, self.use_class_count, self.use_feature_norm,
            self.entropy_floor, self.fusion_reduce,
        )


@dataclass
class DwgrNet(Strategy):
    config: DwgrConfig = field(default_factory=DwgrConfig)

    name = "dwgrnet"

    def __post_init__(self):
        self.branches: list[Branch] = []

    def train_experience(self, experience: ExperienceView) -> None:
        present = sorted(int(c) for c in np.unique(experience.y))
        branch = train_branch(
            experience.x, experience.y, present, experience.index,
            self.net_spec.layer_dims(self.input_dim), self.train,
            self.config.mix_coefficient,
            seed=int(self.rng(0, experience.index).integers(2**63)),
        )
        self.branches.append(branch)

    def predict_with(self, fusion: FusionConfig, x: np.ndarray) -> np.ndarray:
        return ensemble_predict(self.branches, fusion, x, self.n_classes)[1]

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.predict_with(self.config.fusion(), x)

    def ablation(self, x: np.ndarray, y: np.ndarray, settings=ABLATION_SETTINGS) -> dict[str, float]:
        """Accuracy of the trained branch set under each fusion setting."""
        floor = self.config.entropy_floor
        return {
            name: accuracy(self.predict_with(replace(fusion, entropy_floor=floor), x), y)
            for name, fusion in settings
        }


def ablation_run(strategy: DwgrNet, x: np.ndarray, y: np.ndarray, settings=ABLATION_SETTINGS) -> list[tuple[str, float]]:
    return list(strategy.ablation(x, y, settings).items())
