"""Grown ensemble of frozen feature extractors with a unified head.

Feature extractors (FEs) are trained only on selected experiences, with a
cross-entropy head and a hard-negative triplet head mixed by an adaptive
weight, then stripped of both heads and frozen. A single linear head over
the concatenated FE features is trained on every experience; old classes are
kept alive by re-standardizing current features to an old class's per-FE
statistics ("pseudo-features").
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..nn_core import (
    SGD,
    MlpNetwork,
    SingleClassBatch,
    augment,
    cross_entropy,
    mine_triplets,
    minibatches,
    triplet_loss_from_triplets,
)
from .base import ExperienceView, Strategy

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-6
HEURISTICS = ("zeros", "random", "original")


def should_add_fe(
    experience_classes,
    seen_classes,
    n_fes: int,
    total_classes: int,
    max_fes: int = 10,
    is_first: bool | None = None,
    min_classes: int = 5,
    seen_fraction_stop: float = 0.85,
) -> bool:
    """Whether the current experience gets a new feature extractor.

    ``seen_classes`` are the classes seen *before* this experience. The first
    experience always gets one; otherwise the experience needs at least
    ``min_classes`` classes, fewer than ``seen_fraction_stop`` of all classes
    may have been seen, and the ensemble must be below ``max_fes``.
    """
    if is_first is None:
        is_first = len(seen_classes) == 0
    if is_first:
        return True
    return (
        len(set(experience_classes)) >= min_classes
        and len(set(seen_classes)) / total_classes < seen_fraction_stop
        and n_fes < max_fes
    )


def adaptive_alpha(mean_ce: float, mean_ml: float) -> float:
    """Share of the metric loss in the total epoch loss."""
    total = mean_ce + mean_ml
    return 0.5 if total <= 0 else mean_ml / total


@dataclass
class FeatureExtractorEntry:
    id: int
    net: MlpNetwork
    classes_trained_on: frozenset[int]
    alpha_history: tuple[float, ...] = ()

    @property
    def feature_dim(self) -> int:
        return self.net.feature_dim

    def features(self, x: np.ndarray) -> np.ndarray:
        return self.net.forward(x).features


def _strip_heads(net: MlpNetwork) -> MlpNetwork:
    params = {k: v.copy() for k, v in net.params.items() if not k.startswith(("head.", "proj."))}
    params["head.W"] = np.zeros((net.feature_dim, 0))
    params["head.b"] = np.zeros(0)
    frozen = MlpNetwork(net.layer_dims, 0, None, params=params)
    for v in frozen.params.values():
        v.flags.writeable = False
    return frozen


def train_fe(
    x: np.ndarray,
    y: np.ndarray,
    fe_id: int,
    layer_dims: list[int],
    projection_dim: int,
    train,
    alpha_mode: str = "adaptive",
    margin: float = 0.5,
    seed: int = 0,
    log: list | None = None,
) -> FeatureExtractorEntry:
    """Train a fresh FE with ``(1 - alpha) * CE + alpha * metric`` loss.

    ``alpha_mode`` is ``"adaptive"`` (start at 0.5, re-estimated every epoch
    from the mean losses) or ``"fixed:<value>"``.
    """
    log = log if log is not None else []
    classes = np.unique(y)
    local = np.searchsorted(classes, y)
    rng = np.random.default_rng(seed)
    net = MlpNetwork(layer_dims, len(classes), projection_dim, seed=int(rng.integers(2**63)))

    if alpha_mode == "adaptive":
        alpha, adaptive = 0.5, True
    elif alpha_mode.startswith("fixed:"):
        alpha, adaptive = float(alpha_mode.split(":", 1)[1]), False
    else:
        raise ValueError(f"unknown alpha mode {alpha_mode!r}")
    metric_ok = len(classes) >= 2
    if not metric_ok:
        alpha, adaptive = 0.0, False
        log.append(f"fe {fe_id}: single-class experience, CE-only training")

    opt = SGD(train.learning_rate, train.momentum, train.weight_decay)
    history = []
    step = 0
    for _ in range(train.epochs):
        ce_sum = ml_sum = 0.0
        n_ce = n_ml = 0
        history.append(alpha)
        for idx in minibatches(len(x), train.batch_size, rng):
            xb = augment(x[idx], train.augmentation_strength, rng)
            fwd = net.forward(xb)
            ce, d_logits = cross_entropy(fwd.logits, local[idx])
            ce_sum, n_ce = ce_sum + ce, n_ce + 1
            d_proj = None
            if metric_ok and alpha > 0 or adaptive:
                try:
                    trip = mine_triplets(fwd.projection, local[idx], "hard", rng)
                    ml, d_proj = triplet_loss_from_triplets(fwd.projection, trip, margin)
                    ml, d_proj = ml / len(trip.anchor), d_proj / len(trip.anchor)
                    ml_sum, n_ml = ml_sum + ml, n_ml + 1
                except SingleClassBatch:
                    d_proj = None
            grads = net.backward(
                fwd,
                d_logits=(1.0 - alpha) * d_logits,
                d_projection=None if d_proj is None else alpha * d_proj,
            )
            opt.step(net.params, grads, step)
            step += 1
        if adaptive and n_ml:
            alpha = adaptive_alpha(ce_sum / n_ce, ml_sum / n_ml)
    return FeatureExtractorEntry(fe_id, _strip_heads(net), frozenset(int(c) for c in classes), tuple(history))


class ClassStats:
    """Per-(class, FE) feature mean and standard deviation."""

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self.mu: list[np.ndarray] = []
        self.sigma: list[np.ndarray] = []
        self.known: list[np.ndarray] = []

    def add_extractor(self, feature_dim: int) -> None:
        self.mu.append(np.zeros((self.n_classes, feature_dim)))
        self.sigma.append(np.ones((self.n_classes, feature_dim)))
        self.known.append(np.zeros(self.n_classes, dtype=bool))

    @property
    def n_extractors(self) -> int:
        return len(self.mu)

    def set(self, c: int, e: int, mu: np.ndarray, sigma: np.ndarray) -> None:
        self.mu[e][c] = mu
        self.sigma[e][c] = np.maximum(sigma, SIGMA_FLOOR)
        self.known[e][c] = True


def class_moments(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and floored sample standard deviation (denominator n-1)."""
    mu = features.mean(axis=0)
    if len(features) < 2:
        return mu, np.full_like(mu, SIGMA_FLOOR)
    return mu, np.maximum(features.std(axis=0, ddof=1), SIGMA_FLOOR)


def update_class_stats(stats: ClassStats, fes: list[FeatureExtractorEntry], x: np.ndarray, y: np.ndarray) -> ClassStats:
    """Overwrite the statistics of every class present in ``(x, y)``."""
    for e, fe in enumerate(fes):
        feats = fe.features(x)
        for c in np.unique(y):
            mu, sigma = class_moments(feats[y == c])
            stats.set(int(c), e, mu, sigma)
    return stats


def pseudo_project_batch(
    a: np.ndarray,
    source: np.ndarray,
    target: np.ndarray,
    stats: ClassStats,
    dims: list[int],
    heuristic: str = "original",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Project concatenated features of class ``source`` onto class ``target``.

    Per FE block: ``mu_t + (a - mu_s) / sigma_s * sigma_t``. Unknown target
    statistics use ``sigma = 1`` and a mean from ``heuristic``.
    """
    if heuristic not in HEURISTICS:
        raise ValueError(f"unknown heuristic {heuristic!r}")
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    source = np.atleast_1d(source)
    target = np.atleast_1d(target)
    out = np.empty_like(a)
    start = 0
    for e, d in enumerate(dims):
        block = a[:, start : start + d]
        mu_s = stats.mu[e][source]
        sig_s = np.maximum(stats.sigma[e][source], SIGMA_FLOOR)
        mu_t = stats.mu[e][target].copy()
        sig_t = stats.sigma[e][target].copy()
        unknown = ~stats.known[e][target]
        if unknown.any():
            sig_t[unknown] = 1.0
            if heuristic == "zeros":
                mu_t[unknown] = 0.0
            elif heuristic == "random":
                rng = rng if rng is not None else np.random.default_rng(0)
                mu_t[unknown] = rng.standard_normal((int(unknown.sum()), d))
            else:
                mu_t[unknown] = block[unknown]
        out[:, start : start + d] = mu_t + (block - mu_s) / sig_s * sig_t
        # projecting a class onto itself is the identity; skip the rounding
        same = (source == target) & stats.known[e][target]
        out[same, start : start + d] = block[same]
        start += d
    return out


def pseudo_project(a, i: int, j: int, stats: ClassStats, dims: list[int], heuristic: str = "original", rng=None) -> np.ndarray:
    return pseudo_project_batch(np.asarray(a)[None, :], np.array([i]), np.array([j]), stats, dims, heuristic, rng)[0]


class UnifiedHead:
    """Linear classifier over concatenated FE features, growing in both axes."""

    def __init__(self):
        self.class_ids: list[int] = []
        self.W = np.zeros((0, 0))
        self.b = np.zeros(0)

    @property
    def n_outputs(self) -> int:
        return len(self.class_ids)

    def add_inputs(self, dim: int) -> None:
        self.W = np.vstack([self.W, np.zeros((dim, self.W.shape[1]))])

    def add_classes(self, classes) -> None:
        new = [int(c) for c in sorted(classes) if c not in self.class_ids]
        if new:
            self.class_ids.extend(new)
            self.W = np.hstack([self.W, np.zeros((self.W.shape[0], len(new)))])
            self.b = np.concatenate([self.b, np.zeros(len(new))])

    def column_of(self, labels: np.ndarray) -> np.ndarray:
        lookup = {c: k for k, c in enumerate(self.class_ids)}
        return np.array([lookup[int(c)] for c in labels], dtype=np.int64)

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return feats @ self.W + self.b


def concat_features(fes: list[FeatureExtractorEntry], x: np.ndarray) -> np.ndarray:
    return np.hstack([fe.features(x) for fe in fes])


def train_unified_head(
    head: UnifiedHead,
    fes: list[FeatureExtractorEntry],
    stats: ClassStats,
    x: np.ndarray,
    y: np.ndarray,
    old_classes: list[int],
    epochs: int,
    train,
    heuristic: str = "original",
    rng: np.random.Generator | None = None,
) -> UnifiedHead:
    """CE on original features plus one pseudo-feature per sample.

    Each sample's pseudo-feature targets a class drawn uniformly from
    ``old_classes``; with no old classes only originals are used. The FEs are
    not touched.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    head.add_classes(np.unique(y))
    feats = concat_features(fes, x)
    dims = [fe.feature_dim for fe in fes]
    old = np.asarray(sorted(old_classes), dtype=np.int64)
    opt = SGD(train.learning_rate, train.momentum, train.weight_decay)
    params = {"W": head.W, "b": head.b}
    step = 0
    for _ in range(epochs):
        for idx in minibatches(len(feats), train.batch_size, rng):
            a, labels = feats[idx], y[idx]
            if old.size:
                targets = old[rng.integers(old.size, size=len(idx))]
                proj = pseudo_project_batch(a, labels, targets, stats, dims, heuristic, rng)
                a = np.vstack([a, proj])
                labels = np.concatenate([labels, targets])
            _, d_logits = cross_entropy(head.logits(a), head.column_of(labels))
            opt.step(params, {"W": a.T @ d_logits, "b": d_logits.sum(axis=0)}, step)
            step += 1
    return head


def horde_predict(fes: list[FeatureExtractorEntry], head: UnifiedHead, batch: np.ndarray) -> np.ndarray:
    if head.n_outputs == 0:
        raise RuntimeError("unified head has not been trained")
    cols = head.logits(concat_features(fes, batch)).argmax(axis=1)
    return np.asarray(head.class_ids, dtype=np.int64)[cols]


@dataclass
class HordeConfig:
    min_classes_for_fe: int = 5
    seen_fraction_stop: float = 0.85
    max_fes: int = 10
    estimation_heuristic: str = "original"
    alpha_mode: str = "adaptive"
    head_epochs: int | None = None  # None: same as train.epochs
    head_learning_rate: float | None = None
    margin: float = 0.5


@dataclass
class Horde(Strategy):
    config: HordeConfig = field(default_factory=HordeConfig)

    name = "horde"

    def __post_init__(self):
        if self.config.estimation_heuristic not in HEURISTICS:
            raise ValueError(f"unknown heuristic {self.config.estimation_heuristic!r}")
        self.fes: list[FeatureExtractorEntry] = []
        self.stats = ClassStats(self.n_classes)
        self.head = UnifiedHead()
        self.seen: set[int] = set()
        self.n_seen_experiences = 0

    def train_experience(self, experience: ExperienceView) -> None:
        cfg = self.config
        x, y = experience.x, experience.y
        present = sorted(set(int(c) for c in np.unique(y)))
        if should_add_fe(
            present, self.seen, len(self.fes), self.n_classes, cfg.max_fes,
            is_first=self.n_seen_experiences == 0,
            min_classes=cfg.min_classes_for_fe, seen_fraction_stop=cfg.seen_fraction_stop,
        ):
            fe = train_fe(
                x, y, len(self.fes), self.net_spec.layer_dims(self.input_dim),
                self.net_spec.projection_dim, self.train, cfg.alpha_mode, cfg.margin,
                seed=int(self.rng(0, experience.index).integers(2**63)), log=self.log,
            )
            self.fes.append(fe)
            self.stats.add_extractor(fe.feature_dim)
            self.head.add_inputs(fe.feature_dim)
            self.note(f"experience {experience.index}: added FE {fe.id}")

        update_class_stats(self.stats, self.fes, x, y)
        head_train = self.train
        if cfg.head_learning_rate is not None:
            head_train = type(self.train)(**{**vars(self.train), "learning_rate": cfg.head_learning_rate})
        train_unified_head(
            self.head, self.fes, self.stats, x, y, sorted(self.seen),
            cfg.head_epochs or self.train.epochs, head_train,
            cfg.estimation_heuristic, self.rng(1, experience.index),
        )
        self.seen.update(present)
        self.n_seen_experiences += 1

    def predict(self, x: np.ndarray) -> np.ndarray:
        return horde_predict(self.fes, self.head, x)
