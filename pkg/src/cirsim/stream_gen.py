"""Class-incremental-with-repetition stream generator.

A stream is fully described by four knobs: its length, the number of samples
per experience, the distribution over experiences of each class's first
appearance, and the per-class probability of re-appearing afterwards.

Random draws are split into independent PCG64 substreams keyed by
``(seed, domain, index...)`` through :class:`numpy.random.SeedSequence`, so
adding classes or experiences never perturbs the draws of existing ones:

* domain 0, key ``c``: first-occurrence draw of class ``c``
* domain 1, key ``c``: ``N`` uniforms, the ``t``-th one decides whether class
  ``c`` repeats in experience ``t``
* domain 2, key ``t``: sample-id selection for experience ``t``
* domain 3, key ``t``: empty-experience fix-up choice at experience ``t``
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

FORMAT_VERSION = 1

_DOMAIN_FIRST = 0
_DOMAIN_REPEAT = 1
_DOMAIN_SAMPLES = 2
_DOMAIN_FIXUP = 3


class ConfigError(ValueError):
    """Raised for invalid stream configurations."""


class StreamFormatError(ValueError):
    """Raised when a serialized stream cannot be parsed."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


# ---------------------------------------------------------------------------
# Distribution specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Geometric:
    p: float

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ConfigError(f"geometric p must lie in (0, 1], got {self.p}")


@dataclass(frozen=True)
class Uniform:
    pass


@dataclass(frozen=True)
class ExplicitPmf:
    pmf: tuple[float, ...]


FirstOccurrenceDist = Union[Geometric, Uniform, ExplicitPmf]


@dataclass(frozen=True)
class Zipf:
    exponent: float

    def __post_init__(self):
        if self.exponent < 0 or not math.isfinite(self.exponent):
            raise ConfigError(f"zipf exponent must be non-negative, got {self.exponent}")


@dataclass(frozen=True)
class Fixed:
    q: float

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise ConfigError(f"fixed repetition probability must lie in [0, 1], got {self.q}")


@dataclass(frozen=True)
class ExplicitProbs:
    probs: tuple[float, ...]


RepetitionSpec = Union[Zipf, Fixed, ExplicitProbs]


def parse_first_occurrence(text: str) -> FirstOccurrenceDist:
    """Parse ``geometric:0.6``, ``uniform`` or ``explicit:0.5,0.5``."""
    kind, _, arg = text.strip().partition(":")
    kind = kind.strip().lower()
    try:
        if kind in ("geometric", "geom"):
            return Geometric(float(arg))
        if kind == "uniform":
            return Uniform()
        if kind == "explicit":
            return ExplicitPmf(tuple(float(v) for v in arg.split(",")))
    except ValueError as exc:
        raise ConfigError(f"bad first-occurrence spec {text!r}: {exc}") from exc
    raise ConfigError(f"unknown first-occurrence distribution {text!r}")


def parse_repetition(text: str) -> RepetitionSpec:
    """Parse ``zipf:0.8``, ``fixed:0.04`` or ``explicit:0.1,0.2,...``."""
    kind, _, arg = text.strip().partition(":")
    kind = kind.strip().lower()
    try:
        if kind == "zipf":
            return Zipf(float(arg))
        if kind == "fixed":
            return Fixed(float(arg))
        if kind == "explicit":
            return ExplicitProbs(tuple(float(v) for v in arg.split(",")))
    except ValueError as exc:
        raise ConfigError(f"bad repetition spec {text!r}: {exc}") from exc
    raise ConfigError(f"unknown repetition spec {text!r}")


def format_first_occurrence(dist: FirstOccurrenceDist) -> str:
    if isinstance(dist, Geometric):
        return f"geometric:{dist.p!r}"
    if isinstance(dist, Uniform):
        return "uniform"
    return "explicit:" + ",".join(repr(float(v)) for v in dist.pmf)


def format_repetition(spec: RepetitionSpec) -> str:
    if isinstance(spec, Zipf):
        return f"zipf:{spec.exponent!r}"
    if isinstance(spec, Fixed):
        return f"fixed:{spec.q!r}"
    return "explicit:" + ",".join(repr(float(v)) for v in spec.probs)


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StreamConfig:
    n_experiences: int
    experience_size: int
    n_classes: int
    samples_per_class: int
    first_occurrence: FirstOccurrenceDist
    repetition: RepetitionSpec
    seed: int = 0

    def __post_init__(self):
        for name in ("n_experiences", "experience_size", "n_classes", "samples_per_class"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def with_seed(self, seed: int) -> "StreamConfig":
        return StreamConfig(
            self.n_experiences,
            self.experience_size,
            self.n_classes,
            self.samples_per_class,
            self.first_occurrence,
            self.repetition,
            seed,
        )

    def to_dict(self) -> dict:
        return {
            "n_experiences": self.n_experiences,
            "experience_size": self.experience_size,
            "n_classes": self.n_classes,
            "samples_per_class": self.samples_per_class,
            "first_occurrence": format_first_occurrence(self.first_occurrence),
            "repetition": format_repetition(self.repetition),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StreamConfig":
        return cls(
            n_experiences=int(data["n_experiences"]),
            experience_size=int(data["experience_size"]),
            n_classes=int(data["n_classes"]),
            samples_per_class=int(data["samples_per_class"]),
            first_occurrence=parse_first_occurrence(data["first_occurrence"]),
            repetition=parse_repetition(data["repetition"]),
            seed=int(data.get("seed", 0)),
        )


@dataclass(frozen=True)
class ClassSchedule:
    """Which class is present in which experience.

    ``presence`` is a C x N boolean matrix; experience indices are 1-based
    everywhere outside of array indexing.
    """

    presence: np.ndarray
    first_occurrence_index: np.ndarray
    repetition_probs: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, ClassSchedule):
            return NotImplemented
        return (
            np.array_equal(self.presence, other.presence)
            and np.array_equal(self.first_occurrence_index, other.first_occurrence_index)
            and np.array_equal(self.repetition_probs, other.repetition_probs)
        )

    def classes_in(self, t: int) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.presence[:, t - 1])]


@dataclass(frozen=True)
class Experience:
    index: int
    classes: tuple[int, ...]
    samples: dict[int, tuple[int, ...]]

    @property
    def size(self) -> int:
        return sum(len(v) for v in self.samples.values())


@dataclass(frozen=True)
class Stream:
    config: StreamConfig
    schedule: ClassSchedule
    experiences: tuple[Experience, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.experiences)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent PCG64 generator for ``(seed, *key)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def first_occurrence_pmf(dist: FirstOccurrenceDist, n_experiences: int) -> np.ndarray:
    """Pmf over experiences ``1..N``, truncated and renormalized."""
    n = n_experiences
    if isinstance(dist, Geometric):
        t = np.arange(n, dtype=np.float64)
        # log-space keeps tiny p stable over long streams
        pmf = np.exp(math.log(dist.p) + t * math.log1p(-dist.p)) if dist.p < 1 else np.eye(1, n)[0]
    elif isinstance(dist, Uniform):
        pmf = np.ones(n)
    elif isinstance(dist, ExplicitPmf):
        pmf = np.asarray(dist.pmf, dtype=np.float64)
        if pmf.shape != (n,):
            raise ConfigError(f"explicit pmf needs {n} entries, got {pmf.size}")
        if np.any(pmf < 0) or not np.all(np.isfinite(pmf)):
            raise ConfigError("explicit pmf has negative or non-finite entries")
    else:
        raise ConfigError(f"unsupported first-occurrence distribution {dist!r}")
    total = pmf.sum()
    if not total > 0:
        raise ConfigError("first-occurrence pmf has zero mass")
    return pmf / total


def sample_first_occurrences(
    config: StreamConfig, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Draw the 1-based first-occurrence experience of every class.

    With ``rng=None`` each class uses its own substream of ``config.seed``;
    passing a generator draws all classes i.i.d. from it in one call.
    """
    pmf = first_occurrence_pmf(config.first_occurrence, config.n_experiences)
    cdf = np.cumsum(pmf)
    cdf[-1] = 1.0
    if rng is None:
        u = np.array(
            [substream(config.seed, _DOMAIN_FIRST, c).random() for c in range(config.n_classes)]
        )
    else:
        u = rng.random(config.n_classes)
    return np.searchsorted(cdf, u, side="right").astype(np.int64) + 1


def zipf_rank_order(first_occurrence: np.ndarray) -> np.ndarray:
    """Class ids sorted by (first occurrence, class id)."""
    ids = np.arange(len(first_occurrence))
    return np.lexsort((ids, first_occurrence))


def realize_repetition_probs(
    spec: RepetitionSpec,
    n_classes: int,
    rng: np.random.Generator | None = None,
    first_occurrence: np.ndarray | None = None,
) -> np.ndarray:
    """Per-class repetition probabilities.

    Zipf probabilities are assigned by rank: rank ``k`` gets ``k**-e``. Ranks
    follow ascending first occurrence (ties by class id); without first
    occurrences the class id itself is the rank. ``rng`` is accepted for
    interface symmetry; no variant currently consumes randomness.
    """
    if n_classes < 1:
        raise ConfigError("need at least one class")
    if isinstance(spec, Fixed):
        return np.full(n_classes, float(spec.q))
    if isinstance(spec, ExplicitProbs):
        probs = np.asarray(spec.probs, dtype=np.float64)
        if probs.shape != (n_classes,):
            raise ConfigError(f"explicit repetition probs need {n_classes} entries, got {probs.size}")
        if np.any((probs < 0) | (probs > 1)) or not np.all(np.isfinite(probs)):
            raise ConfigError("repetition probabilities must lie in [0, 1]")
        return probs.copy()
    if isinstance(spec, Zipf):
        ranked = np.arange(1, n_classes + 1, dtype=np.float64) ** (-spec.exponent)
        if first_occurrence is None:
            return ranked
        probs = np.empty(n_classes)
        probs[zipf_rank_order(np.asarray(first_occurrence))] = ranked
        return probs
    raise ConfigError(f"unsupported repetition spec {spec!r}")


def _repeat_uniforms(seed: int, c: int, n: int) -> np.ndarray:
    return substream(seed, _DOMAIN_REPEAT, c).random(n)


def build_schedule(config: StreamConfig, rng: np.random.Generator | None = None) -> ClassSchedule:
    """Draw the class-presence matrix.

    After its first occurrence a class is present in each later experience
    with its own repetition probability. Empty experiences are repaired by
    adding one already-seen class chosen uniformly, or, before any class has
    appeared, by moving the earliest class's first occurrence forward.
    """
    n, n_cls = config.n_experiences, config.n_classes
    if rng is None:
        first = sample_first_occurrences(config)
    else:
        first = sample_first_occurrences(config, rng)
    probs = realize_repetition_probs(config.repetition, n_cls, first_occurrence=first)

    uniforms = np.empty((n_cls, n))
    for c in range(n_cls):
        uniforms[c] = _repeat_uniforms(config.seed, c, n) if rng is None else rng.random(n)

    cols = np.arange(1, n + 1)

    def draw_row(c: int) -> np.ndarray:
        row = (cols > first[c]) & (uniforms[c] < probs[c])
        row[first[c] - 1] = True
        return row

    presence = np.stack([draw_row(c) for c in range(n_cls)]) if n_cls else np.zeros((0, n), bool)

    for t in range(1, n + 1):
        if presence[:, t - 1].any():
            continue
        seen = np.flatnonzero(first < t)
        if seen.size:
            chooser = substream(config.seed, _DOMAIN_FIXUP, t) if rng is None else rng
            presence[chooser.choice(seen), t - 1] = True
        else:
            c = int(zipf_rank_order(first)[0])
            first[c] = t
            presence[c] = draw_row(c)

    presence.flags.writeable = False
    first.flags.writeable = False
    probs.flags.writeable = False
    return ClassSchedule(presence, first, probs)


def split_counts(total: int, classes: list[int]) -> dict[int, int]:
    """Equal split of ``total`` over ``classes``; remainder to the lowest ids."""
    k = len(classes)
    base, extra = divmod(total, k)
    return {c: base + (1 if i < extra else 0) for i, c in enumerate(sorted(classes))}


def assign_samples(
    schedule: ClassSchedule, config: StreamConfig, rng: np.random.Generator | None = None
) -> Stream:
    """Fill every experience with per-class sample ids from the class pools."""
    if schedule.presence.shape != (config.n_classes, config.n_experiences):
        raise ConfigError("schedule does not match config dimensions")
    pool = config.samples_per_class
    experiences = []
    for t in range(1, config.n_experiences + 1):
        classes = schedule.classes_in(t)
        if not classes:
            raise ConfigError(f"experience {t} has no classes")
        draw = substream(config.seed, _DOMAIN_SAMPLES, t) if rng is None else rng
        samples = {}
        for c, count in split_counts(config.experience_size, classes).items():
            ids = draw.choice(pool, size=count, replace=count > pool)
            samples[c] = tuple(int(i) for i in ids)
        experiences.append(Experience(t, tuple(classes), samples))
    return Stream(config, schedule, tuple(experiences))


def generate_stream(config: StreamConfig) -> Stream:
    """Deterministic stream for ``config`` (all randomness from ``config.seed``)."""
    return assign_samples(build_schedule(config), config)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StreamStats:
    occurrences_per_class: np.ndarray
    classes_per_experience: np.ndarray
    first_occurrence_hist: np.ndarray
    samples_per_experience: np.ndarray


def stream_stats(stream: Stream) -> StreamStats:
    presence = stream.schedule.presence
    n = stream.config.n_experiences
    hist = np.bincount(stream.schedule.first_occurrence_index - 1, minlength=n)
    return StreamStats(
        occurrences_per_class=presence.sum(axis=1),
        classes_per_experience=presence.sum(axis=0),
        first_occurrence_hist=hist,
        samples_per_experience=np.array([e.size for e in stream.experiences]),
    )


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p, float) - np.asarray(q, float)).sum())


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def serialize_stream(stream: Stream) -> bytes:
    sched = stream.schedule
    packed = np.packbits(sched.presence.astype(np.uint8).ravel(order="C"))
    doc = {
        "version": FORMAT_VERSION,
        "config": stream.config.to_dict(),
        "schedule": {
            "shape": list(sched.presence.shape),
            "presence": base64.b64encode(packed.tobytes()).decode("ascii"),
            "first_occurrence": [int(v) for v in sched.first_occurrence_index],
            "repetition_probs": [float(v) for v in sched.repetition_probs],
        },
        "experiences": [
            {
                "index": e.index,
                "samples": {str(c): list(ids) for c, ids in e.samples.items()},
            }
            for e in stream.experiences
        ],
    }
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def _key_offset(text: str, key: str) -> int | None:
    pos = text.find(f'"{key}"')
    return pos if pos >= 0 else None


def deserialize_stream(data: bytes) -> Stream:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise StreamFormatError("stream file is not UTF-8", exc.start) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise StreamFormatError(f"malformed stream document: {exc.msg}", offset) from exc
    if not isinstance(doc, dict):
        raise StreamFormatError("stream document must be an object", 0)
    for key in ("version", "config", "schedule", "experiences"):
        if key not in doc:
            raise StreamFormatError(f"missing field {key!r}", len(data))
    if doc["version"] != FORMAT_VERSION:
        raise StreamFormatError(f"unsupported version {doc['version']!r}", _key_offset(text, "version"))

    try:
        config = StreamConfig.from_dict(doc["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise StreamFormatError(f"bad config: {exc}", _key_offset(text, "config")) from exc

    try:
        sched = doc["schedule"]
        n_cls, n = (int(v) for v in sched["shape"])
        if (n_cls, n) != (config.n_classes, config.n_experiences):
            raise ValueError("schedule shape disagrees with config")
        bits = np.frombuffer(base64.b64decode(sched["presence"], validate=True), dtype=np.uint8)
        flat = np.unpackbits(bits)
        if flat.size < n_cls * n:
            raise ValueError("presence bitmatrix too short")
        presence = flat[: n_cls * n].reshape(n_cls, n).astype(bool)
        first = np.asarray(sched["first_occurrence"], dtype=np.int64)
        probs = np.asarray(sched["repetition_probs"], dtype=np.float64)
        if first.shape != (n_cls,) or probs.shape != (n_cls,):
            raise ValueError("per-class vectors have wrong length")
    except (KeyError, TypeError, ValueError) as exc:
        raise StreamFormatError(f"bad schedule: {exc}", _key_offset(text, "schedule")) from exc
    for arr in (presence, first, probs):
        arr.flags.writeable = False
    schedule = ClassSchedule(presence, first, probs)

    try:
        experiences = []
        for i, raw in enumerate(doc["experiences"], start=1):
            if int(raw["index"]) != i:
                raise ValueError(f"experience indices not contiguous at {i}")
            samples = {int(c): tuple(int(s) for s in ids) for c, ids in raw["samples"].items()}
            samples = dict(sorted(samples.items()))
            experiences.append(Experience(i, tuple(samples), samples))
        if len(experiences) != n:
            raise ValueError(f"expected {n} experiences, found {len(experiences)}")
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise StreamFormatError(f"bad experiences: {exc}", _key_offset(text, "experiences")) from exc
    return Stream(config, schedule, tuple(experiences))


def validate_stream(stream: Stream) -> None:
    """Check the structural invariants; raises :class:`ConfigError` on violation."""
    cfg, sched = stream.config, stream.schedule
    presence = sched.presence
    if presence.shape != (cfg.n_classes, cfg.n_experiences):
        raise ConfigError("presence matrix shape mismatch")
    if len(stream.experiences) != cfg.n_experiences:
        raise ConfigError("wrong number of experiences")
    for c, f in enumerate(sched.first_occurrence_index):
        if not 1 <= f <= cfg.n_experiences:
            raise ConfigError(f"class {c} first occurrence {f} out of range")
        if not presence[c, f - 1] or presence[c, : f - 1].any():
            raise ConfigError(f"class {c} presence inconsistent with first occurrence")
    if not presence.any(axis=0).all():
        raise ConfigError("empty experience")
    for e in stream.experiences:
        if list(e.classes) != sched.classes_in(e.index):
            raise ConfigError(f"experience {e.index} classes disagree with schedule")
        counts = [len(v) for v in e.samples.values()]
        if max(counts) - min(counts) > 1 or sum(counts) != cfg.experience_size:
            raise ConfigError(f"experience {e.index} sample counts unbalanced")
        for ids in e.samples.values():
            if any(not 0 <= s < cfg.samples_per_class for s in ids):
                raise ConfigError(f"experience {e.index} has out-of-pool sample ids")
