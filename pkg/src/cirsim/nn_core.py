"""Small numpy MLP with hand-written backward pass, losses and helpers.

Everything runs in float64. A network is a ReLU backbone followed by a
linear classification head and an optional linear projection head; the
backbone output is what the strategies call "features".
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

CHECKPOINT_MAGIC = b"CIRNET01"


class TrainingError(RuntimeError):
    """Raised when training produces non-finite values."""


class SingleClassBatch(ValueError):
    """A metric-learning batch without both positives and negatives."""


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass
class Forward:
    features: np.ndarray
    logits: np.ndarray
    projection: np.ndarray | None
    cache: list = field(repr=False, default_factory=list)


def _relu(x):
    return np.maximum(x, 0.0)


class MlpNetwork:
    """ReLU MLP ``layer_dims[0] -> ... -> layer_dims[-1]`` plus heads.

    Parameters live in ``self.params`` keyed ``W{i}``/``b{i}`` for backbone
    layers and ``head.W``/``head.b``/``proj.W``/``proj.b`` for the heads.
    """

    def __init__(
        self,
        layer_dims: list[int],
        n_outputs: int,
        projection_dim: int | None = None,
        seed: int = 0,
        params: dict[str, np.ndarray] | None = None,
    ):
        if len(layer_dims) < 2:
            raise ValueError("layer_dims needs an input and at least one hidden size")
        self.layer_dims = [int(d) for d in layer_dims]
        self.n_outputs = int(n_outputs)
        self.projection_dim = None if projection_dim is None else int(projection_dim)
        if params is not None:
            self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
            return
        rng = np.random.default_rng(seed)
        self.params = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_dims[:-1], self.layer_dims[1:])):
            self.params[f"W{i}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))
            self.params[f"b{i}"] = np.zeros(fan_out)
        d = self.feature_dim
        self.params["head.W"] = rng.normal(0.0, np.sqrt(1.0 / d), (d, self.n_outputs))
        self.params["head.b"] = np.zeros(self.n_outputs)
        if self.projection_dim:
            self.params["proj.W"] = rng.normal(0.0, np.sqrt(1.0 / d), (d, self.projection_dim))
            self.params["proj.b"] = np.zeros(self.projection_dim)

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def feature_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    def copy(self) -> "MlpNetwork":
        return MlpNetwork(self.layer_dims, self.n_outputs, self.projection_dim, params=self.params)

    def backbone_keys(self) -> list[str]:
        return [k for i in range(self.n_layers) for k in (f"W{i}", f"b{i}")]

    def forward(self, x: np.ndarray) -> Forward:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"expected input of shape (B, {self.input_dim}), got {x.shape}")
        h = x
        cache = []
        for i in range(self.n_layers):
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            cache.append((h, z))
            h = _relu(z)
        logits = h @ self.params["head.W"] + self.params["head.b"]
        proj = None
        if self.projection_dim:
            proj = h @ self.params["proj.W"] + self.params["proj.b"]
        return Forward(h, logits, proj, cache)

    def features(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x).features

    def backward(
        self,
        fwd: Forward,
        d_logits: np.ndarray | None = None,
        d_projection: np.ndarray | None = None,
        d_features: np.ndarray | None = None,
        heads_only: bool = False,
    ) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given its gradients w.r.t. the outputs."""
        grads: dict[str, np.ndarray] = {}
        h = fwd.features
        dh = np.zeros_like(h) if d_features is None else np.array(d_features, dtype=np.float64)
        if d_logits is not None:
            grads["head.W"] = h.T @ d_logits
            grads["head.b"] = d_logits.sum(axis=0)
            dh += d_logits @ self.params["head.W"].T
        if d_projection is not None:
            grads["proj.W"] = h.T @ d_projection
            grads["proj.b"] = d_projection.sum(axis=0)
            dh += d_projection @ self.params["proj.W"].T
        if heads_only:
            return grads
        for i in reversed(range(self.n_layers)):
            h_in, z = fwd.cache[i]
            dz = dh * (z > 0)
            grads[f"W{i}"] = h_in.T @ dz
            grads[f"b{i}"] = dz.sum(axis=0)
            if i:
                dh = dz @ self.params[f"W{i}"].T
        return grads

    def grow_head(self, n_outputs: int) -> None:
        """Append zero-initialized output columns."""
        extra = n_outputs - self.n_outputs
        if extra < 0:
            raise ValueError("heads only grow")
        if extra:
            self.params["head.W"] = np.hstack([self.params["head.W"], np.zeros((self.feature_dim, extra))])
            self.params["head.b"] = np.concatenate([self.params["head.b"], np.zeros(extra)])
            self.n_outputs = n_outputs


def forward(net: MlpNetwork, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    fwd = net.forward(batch)
    return fwd.features, fwd.logits


def params_equal(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    b = logits.shape[0]
    logp = log_softmax(logits)
    loss = -float(logp[np.arange(b), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def distillation_loss(
    student_logits: np.ndarray,
    teacher_logits: np.ndarray,
    temperature: float = 2.0,
    alpha: float = 1.0,
) -> tuple[float, np.ndarray]:
    """``alpha * T**2 * KL(teacher_T || student_T)`` averaged over the batch.

    Both logit arrays must cover the same (teacher-known) classes. Returns the
    gradient w.r.t. the student logits.
    """
    t = temperature
    b = student_logits.shape[0]
    p_t = softmax(teacher_logits, t)
    log_p_t = log_softmax(teacher_logits, t)
    log_p_s = log_softmax(student_logits, t)
    kl = (p_t * (log_p_t - log_p_s)).sum(axis=1)
    loss = alpha * t * t * float(kl.mean())
    grad = alpha * t * (np.exp(log_p_s) - p_t) / b
    return loss, grad


@dataclass(frozen=True)
class Triplets:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray


def mine_triplets(
    embeddings: np.ndarray,
    labels: np.ndarray,
    mining: str = "random",
    rng: np.random.Generator | None = None,
) -> Triplets:
    """One triplet per sample that has an in-batch positive.

    Positives are picked uniformly. Negatives are the closest other-class
    sample for ``mining="hard"`` (distances on the L2-normalized embeddings),
    otherwise uniform.
    """
    labels = np.asarray(labels)
    rng = rng if rng is not None else np.random.default_rng(0)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    other = labels[:, None] != labels[None, :]
    anchors = np.flatnonzero(same.any(axis=1) & other.any(axis=1))
    if anchors.size == 0:
        raise SingleClassBatch("batch needs >= 2 samples of a class and >= 2 classes")
    # uniform choice within a masked row = argmax of masked uniform noise
    noise = rng.random((anchors.size, len(labels)))
    pos = np.where(same[anchors], noise, -1.0).argmax(axis=1)
    if mining in ("hard", "hard-negative"):
        z = _l2_normalize(embeddings)[0]
        dist = ((z[anchors, None, :] - z[None, :, :]) ** 2).sum(-1)
        neg = np.where(other[anchors], dist, np.inf).argmin(axis=1)
    elif mining == "random":
        noise = rng.random((anchors.size, len(labels)))
        neg = np.where(other[anchors], noise, -1.0).argmax(axis=1)
    else:
        raise ValueError(f"unknown mining strategy {mining!r}")
    return Triplets(anchors, pos, neg)


def _l2_normalize(x: np.ndarray, eps: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True) + eps)
    return x / norm, norm


def triplet_loss_from_triplets(
    embeddings: np.ndarray, triplets: Triplets, margin: float = 0.5
) -> tuple[float, np.ndarray]:
    """Summed hinge ``max(0, D(a,p) - D(a,n) + margin)`` and its gradient.

    ``D`` is the squared Euclidean distance between L2-normalized embeddings.
    """
    z, norm = _l2_normalize(embeddings)
    a, p, n = triplets.anchor, triplets.positive, triplets.negative
    d_ap = ((z[a] - z[p]) ** 2).sum(axis=1)
    d_an = ((z[a] - z[n]) ** 2).sum(axis=1)
    hinge = d_ap - d_an + margin
    active = hinge > 0
    loss = float(hinge[active].sum())

    dz = np.zeros_like(z)
    act = active[:, None]
    g_ap = 2.0 * (z[a] - z[p]) * act
    g_an = 2.0 * (z[a] - z[n]) * act
    np.add.at(dz, a, g_ap - g_an)
    np.add.at(dz, p, -g_ap)
    np.add.at(dz, n, g_an)
    # back through x / |x|
    dx = (dz - z * (dz * z).sum(axis=1, keepdims=True)) / norm
    return loss, dx


def triplet_contrastive_loss(
    features: np.ndarray,
    labels: np.ndarray,
    margin: float = 0.5,
    mining: str = "random",
    rng: np.random.Generator | None = None,
) -> tuple[float, np.ndarray]:
    triplets = mine_triplets(features, labels, mining, rng)
    return triplet_loss_from_triplets(features, triplets, margin)


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 20
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 0.0
    augmentation_strength: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class SGD:
    """Momentum SGD: ``v <- mu*v + g + wd*w``; ``w <- w - lr*v``."""

    def __init__(self, learning_rate: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.lr = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], batch_index: int | None = None):
        for key, g in grads.items():
            # a sum is non-finite whenever any element is, and costs one pass
            if not math.isfinite(g.sum()):
                raise TrainingError(f"non-finite gradient for {key} at batch {batch_index}")
            w = params[key]
            if self.weight_decay:
                g = g + self.weight_decay * w
            v = self.velocity.get(key)
            if v is None or v.shape != g.shape:
                v = self.velocity[key] = np.zeros_like(g)
            v *= self.momentum
            v += g
            w -= self.lr * v
            if not math.isfinite(w.sum()):
                raise TrainingError(f"non-finite weights in {key} at batch {batch_index}")


def sgd_step(net: MlpNetwork, grads: dict[str, np.ndarray], optimizer: SGD, batch_index: int | None = None) -> MlpNetwork:
    optimizer.step(net.params, grads, batch_index)
    return net


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


# ---------------------------------------------------------------------------
# Augmentation and evaluation
# ---------------------------------------------------------------------------

MASK_PROB = 0.15
JITTER_SCALE = 1.0


def augment(batch: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian jitter plus coordinate masking, both scaled by ``strength``.

    A masked coordinate is attenuated by the fraction ``min(strength, 1)``,
    so for strength <= 1 the perturbation is exactly linear in strength.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if strength == 0:
        return batch.copy()
    noise = rng.standard_normal(batch.shape)
    mask = rng.random(batch.shape) < MASK_PROB
    return batch * (1.0 - min(strength, 1.0) * mask) + strength * JITTER_SCALE * noise


def accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty test set")
    return float(np.mean(np.asarray(predicted) == labels))


def evaluate(predict: Callable[[np.ndarray], np.ndarray] | MlpNetwork, x: np.ndarray, y: np.ndarray) -> float:
    """Accuracy of a predictor (callable or network argmax) on ``(x, y)``."""
    if isinstance(predict, MlpNetwork):
        net = predict
        predict = lambda batch: net.forward(batch).logits.argmax(axis=1)  # noqa: E731
    elif hasattr(predict, "predict"):
        predict = predict.predict
    return accuracy(predict(x), y)


def train_supervised(
    net: MlpNetwork,
    x: np.ndarray,
    y: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
) -> MlpNetwork:
    """Plain minibatch cross-entropy training (used by tests and baselines)."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    opt = SGD(config.learning_rate, config.momentum, config.weight_decay)
    step = 0
    for _ in range(config.epochs):
        for idx in minibatches(len(x), config.batch_size, rng):
            xb = augment(x[idx], config.augmentation_strength, rng) if config.augmentation_strength else x[idx]
            fwd = net.forward(xb)
            _, d_logits = cross_entropy(fwd.logits, y[idx])
            opt.step(net.params, net.backward(fwd, d_logits=d_logits), step)
            step += 1
    return net


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SyntheticDataset:
    """Gaussian-mixture classification data with a fixed train/test split.

    Each class is a mixture of ``modes`` isotropic Gaussians whose centres
    are drawn around a class centre. ``train_x[c]`` holds the class's
    training pool (indexed by the stream's sample ids).
    """

    n_classes: int
    input_dim: int
    train_x: list[np.ndarray]
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def samples_per_class(self) -> int:
        return len(self.train_x[0])

    def gather(self, samples: dict[int, tuple[int, ...]]) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = [], []
        for c, ids in samples.items():
            if len(ids):
                xs.append(self.train_x[c][np.asarray(ids)])
                ys.append(np.full(len(ids), c, dtype=np.int64))
        if not xs:
            return np.zeros((0, self.input_dim)), np.zeros(0, dtype=np.int64)
        return np.concatenate(xs), np.concatenate(ys)


def make_synthetic_dataset(
    n_classes: int = 20,
    input_dim: int = 32,
    train_per_class: int = 200,
    test_per_class: int = 50,
    class_separation: float = 0.3,
    spread: float = 0.6,
    modes: int = 8,
    mode_spread: float = 1.0,
    seed: int = 0,
) -> SyntheticDataset:
    """Gaussian-mixture classes: ``modes`` clusters per class around a class centre.

    The defaults give classes made of several tight, interleaved clusters, so
    a small network needs the full training budget and forgetting is visible.
    """
    if test_per_class < 1 or train_per_class < 1:
        raise ValueError("every class needs train and test samples")
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((n_classes, input_dim)) * class_separation
    mode_centres = centres[:, None, :] + rng.standard_normal((n_classes, modes, input_dim)) * mode_spread

    def draw(c: int, n: int) -> np.ndarray:
        which = rng.integers(modes, size=n)
        return mode_centres[c, which] + rng.standard_normal((n, input_dim)) * spread

    train_x = [draw(c, train_per_class) for c in range(n_classes)]
    test_x = np.concatenate([draw(c, test_per_class) for c in range(n_classes)])
    test_y = np.repeat(np.arange(n_classes), test_per_class)
    return SyntheticDataset(n_classes, input_dim, train_x, test_x, test_y)


def dataset_from_features(features: np.ndarray, labels: np.ndarray, test_fraction: float = 0.2, seed: int = 0) -> SyntheticDataset:
    """Ingestion hook: build a dataset from pre-extracted feature vectors.

    Every class is split into a train pool and a test part; pools are
    truncated to the smallest class so that sample ids share one range.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if not np.array_equal(classes, np.arange(classes.size)):
        raise ValueError("labels must be 0..C-1")
    rng = np.random.default_rng(seed)
    train_x, test_x, test_y = [], [], []
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = max(1, int(round(len(idx) * test_fraction)))
        if len(idx) - n_test < 1:
            raise ValueError(f"class {c} has too few samples")
        test_x.append(features[idx[:n_test]])
        test_y.append(np.full(n_test, c))
        train_x.append(features[idx[n_test:]])
    pool = min(len(t) for t in train_x)
    return SyntheticDataset(
        len(classes),
        features.shape[1],
        [t[:pool] for t in train_x],
        np.concatenate(test_x),
        np.concatenate(test_y),
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(net: MlpNetwork) -> bytes:
    """Binary layout: magic, u32 counts/dims, then little-endian f64 arrays."""
    dims = net.layer_dims
    header = struct.pack("<8sIII", CHECKPOINT_MAGIC, len(dims), net.n_outputs, net.projection_dim or 0)
    header += struct.pack(f"<{len(dims)}I", *dims)
    keys = net.backbone_keys() + ["head.W", "head.b"] + (["proj.W", "proj.b"] if net.projection_dim else [])
    body = b"".join(net.params[k].astype("<f8").tobytes() for k in keys)
    return header + body


def load_checkpoint(data: bytes) -> MlpNetwork:
    fixed = struct.calcsize("<8sIII")
    if len(data) < fixed:
        raise ValueError("checkpoint truncated in header")
    magic, n_dims, n_out, proj = struct.unpack_from("<8sIII", data)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError("not a network checkpoint")
    dims = list(struct.unpack_from(f"<{n_dims}I", data, fixed))
    offset = fixed + 4 * n_dims
    shapes = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        shapes += [(f"W{i}", (a, b)), (f"b{i}", (b,))]
    shapes += [("head.W", (dims[-1], n_out)), ("head.b", (n_out,))]
    if proj:
        shapes += [("proj.W", (dims[-1], proj)), ("proj.b", (proj,))]
    params = {}
    for key, shape in shapes:
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(data):
            raise ValueError(f"checkpoint truncated in {key}")
        params[key] = np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return MlpNetwork(dims, n_out, proj or None, params=params)
