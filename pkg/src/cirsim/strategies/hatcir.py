"""Replica ensembles with momentum-based test-time decisions.

Each experience is mapped to a *fragment*; a fragment holds ``E`` ensemble
members (same data, different seeds and augmentation) and is trained in two
phases: a triplet margin loss on a projection head, then cross-entropy on the
classification head. At test time the score of a class is a weighted average
of the logits from the most recent fragments that saw the class.
"""

from __future__ import annotations

import logging
import math
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


@dataclass(frozen=True)
class ReplicaPlan:
    n_fragments: int
    n_ensembles: int
    groups: tuple[tuple[int, ...], ...]

    def fragment_of(self, experience_index: int) -> int:
        for f, group in enumerate(self.groups):
            if experience_index in group:
                return f
        raise KeyError(f"experience {experience_index} is not planned")


def plan_fragments(n_experiences: int, n_fragments: int, n_ensembles: int = 1) -> ReplicaPlan:
    """Contiguous, balanced grouping of experiences ``1..N`` into fragments."""
    if not 1 <= n_fragments <= n_experiences:
        raise ValueError(f"need 1 <= fragments <= experiences, got {n_fragments} > {n_experiences}")
    base, extra = divmod(n_experiences, n_fragments)
    groups, start = [], 1
    for f in range(n_fragments):
        size = base + (1 if f < extra else 0)
        groups.append(tuple(range(start, start + size)))
        start += size
    return ReplicaPlan(n_fragments, n_ensembles, tuple(groups))


@dataclass(frozen=True)
class MomentumRule:
    window: int = 3
    weights: tuple[float, ...] = (1.0, 2.0, 3.0)

    def __post_init__(self):
        if len(self.weights) != self.window or any(w <= 0 for w in self.weights):
            raise ValueError("momentum weights must be positive and match the window")


@dataclass
class Fragment:
    id: int
    members: list[MlpNetwork]
    classes_seen: set[int] = field(default_factory=set)
    experience_indices: list[int] = field(default_factory=list)
    # last experience index in which the fragment saw each class
    last_seen: dict[int, int] = field(default_factory=dict)

    def mean_logits(self, views: list[np.ndarray], logit_norm: str = "none") -> np.ndarray:
        total = None
        for net in self.members:
            for v in views:
                out = net.forward(v).logits
                total = out if total is None else total + out
        out = total / (len(self.members) * len(views))
        if logit_norm == "standardize":
            cols = sorted(self.classes_seen)
            sub = out[:, cols]
            mu = sub.mean(axis=1, keepdims=True)
            sd = sub.std(axis=1, keepdims=True) if len(cols) > 1 else np.ones_like(mu)
            out = (out - mu) / np.maximum(sd, 1e-12)
        return out


@dataclass
class HatCirConfig:
    fragments: int | None = None  # None: one per experience
    ensembles: int = 2
    momentum_window: int = 3
    momentum_weights: tuple[float, ...] = (1.0, 2.0, 3.0)
    tta_views: int = 4
    tta_strength: float | None = None  # None: reuse the training strength
    phase_split: float = 0.6
    margin: float = 0.5
    mining: str = "random"
    logit_norm: str = "standardize"  # "none" | "standardize" (z-score over the fragment's classes)


def _train_member(
    net: MlpNetwork,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    phase_split: float,
    train,
    margin: float,
    mining: str,
    rng: np.random.Generator,
    log: list,
) -> None:
    phase1 = int(round(epochs * phase_split)) if len(np.unique(y)) > 1 else 0
    if len(np.unique(y)) < 2:
        log.append("single-class experience: contrastive phase skipped")

    opt = SGD(train.learning_rate, train.momentum, train.weight_decay)
    step = 0
    for _ in range(phase1):
        for idx in minibatches(len(x), train.batch_size, rng):
            xb = augment(x[idx], train.augmentation_strength, rng)
            fwd = net.forward(xb)
            try:
                triplets = mine_triplets(fwd.projection, y[idx], mining, rng)
            except SingleClassBatch:
                continue
            _, d_proj = triplet_loss_from_triplets(fwd.projection, triplets, margin)
            grads = net.backward(fwd, d_projection=d_proj / len(triplets.anchor))
            opt.step(net.params, grads, step)
            step += 1

    opt = SGD(train.learning_rate, train.momentum, train.weight_decay)
    for _ in range(epochs - phase1):
        for idx in minibatches(len(x), train.batch_size, rng):
            xb = augment(x[idx], train.augmentation_strength, rng)
            fwd = net.forward(xb)
            _, d_logits = cross_entropy(fwd.logits, y[idx])
            opt.step(net.params, net.backward(fwd, d_logits=d_logits), step)
            step += 1


def train_fragment(
    fragment: Fragment,
    experience: ExperienceView,
    strategy: "HatCir",
) -> Fragment:
    """Two-phase training of every member of ``fragment`` on one experience."""
    cfg = strategy.config
    x, y = experience.x, experience.y
    for m, net in enumerate(fragment.members):
        rng = strategy.rng(1, fragment.id, m, experience.index)
        _train_member(
            net, x, y, strategy.train.epochs, cfg.phase_split, strategy.train,
            cfg.margin, cfg.mining, rng, strategy.log,
        )
    fragment.classes_seen.update(experience.classes)
    fragment.experience_indices.append(experience.index)
    for c in experience.classes:
        fragment.last_seen[c] = experience.index
    return fragment


def momentum_weight_matrix(
    fragments: list[Fragment], rule: MomentumRule, n_classes: int, normalize: bool = True
) -> np.ndarray:
    """``W[f, c]``: weight of fragment ``f`` in the score of class ``c``.

    For each class the ``window`` most recent claiming fragments are kept
    (recency = last experience containing the class, ties by fragment id) and
    the newest receives the last weight. With ``normalize`` columns sum to
    one; unclaimed classes get an all-zero column either way.
    """
    w = np.zeros((len(fragments), n_classes))
    for c in range(n_classes):
        claims = sorted(
            (frag.last_seen[c], pos) for pos, frag in enumerate(fragments) if c in frag.classes_seen
        )
        recent = claims[-rule.window :]
        for (_, pos), weight in zip(recent, rule.weights[-len(recent) :] if recent else ()):
            w[pos, c] = weight
        total = w[:, c].sum()
        if normalize and total > 0:
            w[:, c] /= total
    return w


def tta_batches(batch: np.ndarray, views: int, strength: float, rng: np.random.Generator) -> list[np.ndarray]:
    """The clean batch followed by ``views - 1`` augmented copies."""
    out = [np.asarray(batch, dtype=np.float64)]
    out += [augment(batch, strength, rng) for _ in range(max(views, 1) - 1)]
    return out


def momentum_predict(
    fragments: list[Fragment],
    rule: MomentumRule,
    batch: np.ndarray,
    n_classes: int,
    tta_views: int = 1,
    tta_strength: float = 0.0,
    seed: int = 0,
    logit_norm: str = "none",
) -> tuple[np.ndarray, np.ndarray]:
    """Momentum-weighted class scores and argmax labels.

    Unclaimed classes score ``-inf`` and are never predicted.
    """
    trained = [f for f in fragments if f.experience_indices]
    w = momentum_weight_matrix(trained, rule, n_classes, normalize=False)
    totals = w.sum(axis=0)
    claimed = totals > 0
    if not claimed.all():
        logger.debug("classes %s are claimed by no fragment", np.flatnonzero(~claimed).tolist())
    rng = np.random.default_rng(seed)
    views = tta_batches(batch, tta_views, tta_strength, rng)
    scores = np.zeros((len(batch), n_classes))
    for pos, frag in enumerate(trained):
        if not w[pos].any():
            continue
        scores += frag.mean_logits(views, logit_norm) * w[pos]
    # divide once at the end: sum(w_i * l_i) / sum(w_i)
    scores[:, claimed] /= totals[claimed]
    scores[:, ~claimed] = -math.inf
    return scores, scores.argmax(axis=1)


@dataclass
class HatCir(Strategy):
    config: HatCirConfig = field(default_factory=HatCirConfig)
    n_experiences: int | None = None

    name = "hatcir"

    def __post_init__(self):
        self.rule = MomentumRule(self.config.momentum_window, tuple(self.config.momentum_weights))
        self.fragments: list[Fragment] = []
        self.plan: ReplicaPlan | None = None
        if self.n_experiences is not None:
            n_frag = self.config.fragments or self.n_experiences
            self.plan = plan_fragments(self.n_experiences, n_frag, self.config.ensembles)

    def _new_fragment(self, fid: int) -> Fragment:
        dims = self.net_spec.layer_dims(self.input_dim)
        members = [
            MlpNetwork(dims, self.n_classes, self.net_spec.projection_dim,
                       seed=int(self.rng(0, fid, m).integers(2**63)))
            for m in range(self.config.ensembles)
        ]
        return Fragment(fid, members)

    def fragment_for(self, experience_index: int) -> Fragment:
        fid = self.plan.fragment_of(experience_index) if self.plan else experience_index - 1
        while len(self.fragments) <= fid:
            self.fragments.append(self._new_fragment(len(self.fragments)))
        return self.fragments[fid]

    def train_experience(self, experience: ExperienceView) -> None:
        train_fragment(self.fragment_for(experience.index), experience, self)

    def scores(self, x: np.ndarray) -> np.ndarray:
        strength = self.config.tta_strength
        if strength is None:
            strength = self.train.augmentation_strength
        scores, _ = momentum_predict(
            self.fragments, self.rule, x, self.n_classes,
            self.config.tta_views, strength, seed=self.seed,
            logit_norm=self.config.logit_norm,
        )
        return scores

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.scores(x).argmax(axis=1)
