"""Experiment orchestration: presets, configs, runs, records, comparison, plots.

A run is the cartesian product strategies x streams x seeds. Every job
rebuilds its dataset and stream from the seed, feeds the strategy one
experience at a time through a closable :class:`ExperienceView`, and writes
one line-delimited JSON record plus a timing sidecar. Records hold no
wall-clock data, so identical configs give byte-identical record files.
"""

from __future__ import annotations

import configparser
import glob as globlib
import json
import logging
import math
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .nn_core import SyntheticDataset, TrainConfig, accuracy, make_synthetic_dataset
from .strategies import ExperienceView, NetSpec, build_strategy
from .stream_gen import (
    ClassSchedule,
    ConfigError,
    Fixed,
    Stream,
    StreamConfig,
    Uniform,
    assign_samples,
    deserialize_stream,
    generate_stream,
    parse_first_occurrence,
    parse_repetition,
    substream,
)

logger = logging.getLogger(__name__)

PRESET_IDS = ("S1", "S2", "S3", "S4", "S5", "S6")
NOREP_PATTERN = re.compile(r"NOREP-(\d+)x(\d+)")
DESK_EXPERIENCES = 20
DESK_EXPERIENCE_SIZE = 200
OUTPUT_DIR_ENV = "CIRSIM_OUTPUT_DIR"
RECORD_SUFFIX = ".rec"
TIMING_SUFFIX = ".timing.json"
# challenge resource caps, kept as metadata only
TIME_LIMIT_MINUTES = 500
MEMORY_LIMIT_MB = 4000
_DOMAIN_GROUPING = 4


# ---------------------------------------------------------------------------
# Streams
# ---------------------------------------------------------------------------


def read_preset(preset_id: str) -> dict[str, str]:
    if preset_id not in PRESET_IDS:
        raise ConfigError(f"unknown preset {preset_id!r}; expected one of {', '.join(PRESET_IDS)}")
    parser = configparser.ConfigParser()
    parser.read_string(resources.files("cirsim.presets").joinpath(f"{preset_id}.cfg").read_text())
    return dict(parser["stream"])


def preset_config(
    preset_id: str,
    seed: int = 0,
    full_scale: bool = False,
    n_classes: int = 20,
    samples_per_class: int = 200,
) -> StreamConfig:
    """Stream config for a challenge preset.

    The distribution parameters always come from the preset file. By default
    the stream is rescaled to the desk size (20 experiences of 200 samples);
    ``full_scale`` keeps the preset's own length and experience size. Class
    count and pool size follow the dataset in use.
    """
    raw = read_preset(preset_id)
    n_exp, size = DESK_EXPERIENCES, DESK_EXPERIENCE_SIZE
    if full_scale:
        n_exp, size = int(raw["n_experiences"]), int(raw["experience_size"])
    return StreamConfig(
        n_experiences=n_exp,
        experience_size=size,
        n_classes=n_classes,
        samples_per_class=samples_per_class,
        first_occurrence=parse_first_occurrence(raw["first_occurrence"]),
        repetition=parse_repetition(raw["repetition"]),
        seed=seed,
    )


def no_repetition_preset(
    n_classes: int = 20, group_size: int = 5, samples_per_class: int = 200, seed: int = 0
) -> Stream:
    """Standard class-incremental stream: disjoint class groups, no repetition.

    Classes are shuffled with the seed and cut into groups of ``group_size``;
    each experience holds one group. If ``n_classes`` is not a multiple of
    the group size the last group is smaller (its classes then draw more
    samples each, with replacement).
    """
    if group_size < 1 or n_classes < 1:
        raise ConfigError("group size and class count must be positive")
    n_exp = math.ceil(n_classes / group_size)
    if n_classes % group_size:
        logger.warning(
            "%d classes do not split into groups of %d; last group has %d classes",
            n_classes, group_size, n_classes % group_size,
        )
    order = substream(seed, _DOMAIN_GROUPING).permutation(n_classes)
    presence = np.zeros((n_classes, n_exp), dtype=bool)
    first = np.zeros(n_classes, dtype=np.int64)
    for t in range(n_exp):
        group = order[t * group_size : (t + 1) * group_size]
        presence[group, t] = True
        first[group] = t + 1
    config = StreamConfig(
        n_experiences=n_exp,
        experience_size=group_size * samples_per_class,
        n_classes=n_classes,
        samples_per_class=samples_per_class,
        first_occurrence=Uniform(),
        repetition=Fixed(0.0),
        seed=seed,
    )
    schedule = ClassSchedule(presence, first, np.zeros(n_classes))
    return assign_samples(schedule, config)


def resolve_stream(
    stream_id: str,
    seed: int,
    n_classes: int = 20,
    samples_per_class: int = 200,
    full_scale: bool = False,
) -> Stream:
    """Stream for a preset id, a ``NOREP-<n>x<g>`` id or a stream file path."""
    if stream_id in PRESET_IDS:
        return generate_stream(preset_config(stream_id, seed, full_scale, n_classes, samples_per_class))
    match = NOREP_PATTERN.fullmatch(stream_id)
    if match:
        # the group size is kept; the experience count follows the class count
        return no_repetition_preset(n_classes, int(match.group(2)), samples_per_class, seed)
    path = Path(stream_id)
    if not path.is_file():
        raise ConfigError(f"stream {stream_id!r} is neither a preset id nor an existing file")
    return deserialize_stream(path.read_bytes())


def stream_label(stream_id: str) -> str:
    if stream_id in PRESET_IDS or NOREP_PATTERN.fullmatch(stream_id):
        return stream_id
    return Path(stream_id).stem


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    n_classes: int = 20
    input_dim: int = 32
    train_per_class: int = 200
    test_per_class: int = 50
    class_separation: float = 0.3
    spread: float = 0.6
    modes: int = 8
    mode_spread: float = 1.0

    def build(self, seed: int) -> SyntheticDataset:
        return make_synthetic_dataset(seed=seed, **asdict(self))


@dataclass
class ExperimentConfig:
    strategies: tuple[str, ...]
    streams: tuple[str, ...]
    seeds: tuple[int, ...]
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    net: NetSpec = field(default_factory=NetSpec)
    strategy_options: dict[str, dict] = field(default_factory=dict)
    output_dir: str = "results"
    full_scale: bool = False
    evaluate_every_experience: bool = True
    workers: int = 1

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if not self.strategies:
            raise ConfigError("strategies must be nonempty")
        if not self.streams:
            raise ConfigError("streams must be nonempty")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for stream_id in self.streams:
            if stream_id in PRESET_IDS or NOREP_PATTERN.fullmatch(stream_id):
                continue
            if re.fullmatch(r"S\d+", stream_id):
                raise ConfigError(f"unknown preset {stream_id!r}; expected one of {', '.join(PRESET_IDS)}")
            if not Path(stream_id).is_file():
                raise ConfigError(f"stream {stream_id!r} is neither a preset id nor an existing file")
        for name in self.strategies:
            # fails fast on unknown names and bad options
            try:
                self.make_strategy(name, n_experiences=1)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"strategy {name!r}: {exc}") from exc

    def options_for(self, name: str) -> dict:
        if name in self.strategy_options:
            return dict(self.strategy_options[name])
        return dict(self.strategy_options.get(re.sub(r"\d+$", "", name), {}))

    def make_strategy(self, name: str, seed: int = 0, n_experiences: int | None = None):
        return build_strategy(
            name, self.dataset.n_classes, self.dataset.input_dim, self.train,
            options=self.options_for(name), seed=seed, n_experiences=n_experiences,
            net_spec=self.net,
        )

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_DIR_ENV) or self.output_dir)

    # -- file format ------------------------------------------------------

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unreadable config: {exc}") from exc
        if not parser.has_section("experiment"):
            raise ConfigError("config needs an [experiment] section")
        exp = parser["experiment"]
        try:
            kwargs = dict(
                strategies=_split(exp.get("strategies", "")),
                streams=_split(exp.get("streams", "")),
                seeds=tuple(int(s) for s in _split(exp.get("seeds", ""))),
                output_dir=exp.get("output_dir", "results"),
                full_scale=exp.getboolean("full_scale", False),
                evaluate_every_experience=exp.getboolean("evaluate_every_experience", True),
                workers=exp.getint("workers", 1),
            )
            if parser.has_section("dataset"):
                kwargs["dataset"] = _build(DatasetSpec, parser["dataset"])
            if parser.has_section("train"):
                kwargs["train"] = _build(TrainConfig, parser["train"])
            if parser.has_section("network"):
                net = parser["network"]
                kwargs["net"] = NetSpec(
                    hidden=tuple(int(v) for v in _split(net.get("hidden", "64,64"))),
                    projection_dim=net.getint("projection_dim", 32),
                )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        kwargs["strategy_options"] = {
            section.split(".", 1)[1]: {k: _literal(v) for k, v in parser[section].items()}
            for section in parser.sections()
            if section.startswith("strategy.")
        }
        config = cls(**kwargs)
        config.validate()
        return config

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_ini(text)

    def to_ini(self) -> str:
        lines = [
            "[experiment]",
            f"strategies = {', '.join(self.strategies)}",
            f"streams = {', '.join(self.streams)}",
            f"seeds = {', '.join(str(s) for s in self.seeds)}",
            f"output_dir = {self.output_dir}",
            f"full_scale = {str(self.full_scale).lower()}",
            f"evaluate_every_experience = {str(self.evaluate_every_experience).lower()}",
            f"workers = {self.workers}",
            "",
            "[dataset]",
            *(f"{k} = {v}" for k, v in asdict(self.dataset).items()),
            "",
            "[train]",
            *(f"{k} = {v}" for k, v in asdict(self.train).items()),
            "",
            "[network]",
            f"hidden = {', '.join(str(h) for h in self.net.hidden)}",
            f"projection_dim = {self.net.projection_dim}",
        ]
        for name, options in sorted(self.strategy_options.items()):
            lines += ["", f"[strategy.{name}]"]
            for k, v in options.items():
                v = ", ".join(str(x) for x in v) if isinstance(v, (tuple, list)) else v
                lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


def _split(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _literal(text: str):
    """Config value: bool, int, float, None, a comma list of those, or text."""
    if "," in text:
        return tuple(_literal(part.strip()) for part in text.split(","))
    low = text.strip().lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low == "none":
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text.strip()


def _build(cls, section):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} for {cls.__name__}")
    return cls(**{k: _literal(v) for k, v in section.items()})


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    """Outcome of one (strategy, stream, seed) job.

    ``trajectory[t]`` is the test accuracy after experience ``t + 1`` (None
    when not evaluated). Failed jobs keep the partial trajectory and carry a
    diagnostic in ``error``.
    """

    strategy: str
    stream: str
    seed: int
    status: str
    trajectory: list
    final_accuracy: float | None
    notes: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.strategy, self.stream, self.seed)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        data = json.loads(line)
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})

    def file_stem(self) -> str:
        return f"{self.strategy}__{self.stream}__s{self.seed}"


def read_records(paths) -> list[MetricsRecord]:
    records = []
    for path in sorted(str(p) for p in paths):
        with open(path) as fh:
            records += [MetricsRecord.from_json(line) for line in fh if line.strip()]
    return records


def glob_records(pattern: str) -> list[MetricsRecord]:
    return read_records(p for p in globlib.glob(pattern) if p.endswith(RECORD_SUFFIX))


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


def _summarize_notes(log: list) -> dict[str, int]:
    counts: dict[str, int] = {}
    for message in log:
        counts[message] = counts.get(message, 0) + 1
    return dict(sorted(counts.items()))


def run_job(config: ExperimentConfig, strategy_name: str, stream_id: str, seed: int) -> MetricsRecord:
    """Train and evaluate one strategy on one stream; writes its own files."""
    out_dir = config.resolved_output_dir()
    dataset = config.dataset.build(seed)
    stream = resolve_stream(
        stream_id, seed, dataset.n_classes, dataset.samples_per_class, config.full_scale
    )
    if stream.config.n_classes != dataset.n_classes or stream.config.samples_per_class > dataset.samples_per_class:
        raise ConfigError(f"stream {stream_id!r} does not fit the dataset (classes or pool size)")
    n_exp = len(stream.experiences)
    record = MetricsRecord(strategy_name, stream_label(stream_id), seed, "ok", [None] * n_exp, None)
    timings: list[float] = []
    strategy = None
    try:
        strategy = config.make_strategy(strategy_name, seed=seed, n_experiences=n_exp)
        if strategy_name == "joint":
            xs, ys = zip(*(dataset.gather(e.samples) for e in stream.experiences))
            start = time.perf_counter()
            strategy.train_joint(np.concatenate(xs), np.concatenate(ys))
            timings.append(time.perf_counter() - start)
            record.trajectory[-1] = accuracy(strategy.predict(dataset.test_x), dataset.test_y)
        else:
            for exp in stream.experiences:
                x, y = dataset.gather(exp.samples)
                view = ExperienceView(exp.index, exp.classes, x, y)
                start = time.perf_counter()
                try:
                    strategy.train_experience(view)
                finally:
                    view.close()
                timings.append(time.perf_counter() - start)
                if config.evaluate_every_experience or exp.index == n_exp:
                    record.trajectory[exp.index - 1] = accuracy(strategy.predict(dataset.test_x), dataset.test_y)
        record.final_accuracy = record.trajectory[-1]
    except Exception as exc:  # a failing strategy must not stop the other jobs
        logger.exception("job %s failed", record.file_stem())
        record.status = "failed"
        record.error = f"{type(exc).__name__} after {len(timings)} experience(s): {exc}"
    if strategy is not None:
        record.notes = _summarize_notes(strategy.log)

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / (record.file_stem() + RECORD_SUFFIX)).write_text(record.to_json() + "\n")
    timing = {
        "wall_clock_per_experience": timings,
        "total_seconds": sum(timings),
        "time_limit_minutes": TIME_LIMIT_MINUTES,
        "memory_limit_mb": MEMORY_LIMIT_MB,
    }
    (out_dir / (record.file_stem() + TIMING_SUFFIX)).write_text(json.dumps(timing, sort_keys=True) + "\n")
    return record


def _run_job_args(args) -> MetricsRecord:
    return run_job(*args)


def jobs(config: ExperimentConfig) -> list[tuple[str, str, int]]:
    return [(s, st, seed) for s in config.strategies for st in config.streams for seed in config.seeds]


def run_experiment(config: ExperimentConfig) -> list[MetricsRecord]:
    """Run every (strategy, stream, seed) job and write the summary table.

    Records come back in job order whatever the worker count, and the
    summary is rebuilt from them, so parallel runs write the same files.
    """
    config.validate()
    work = [(config, *job) for job in jobs(config)]
    if config.workers > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            records = list(pool.map(_run_job_args, work))
    else:
        records = [_run_job_args(args) for args in work]
    out_dir = config.resolved_output_dir()
    (out_dir / "summary.txt").write_text(render_table(compare(records)))
    return records


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonRow:
    strategy: str
    per_stream: dict[str, float]
    average: float


def compare(records: list[MetricsRecord]) -> list[ComparisonRow]:
    """Mean final accuracy per strategy and stream, plus the across-stream mean.

    Failed records are left out; a (strategy, stream) cell with no usable
    record is absent rather than zero. Rows are ranked by the average,
    ties broken by strategy id.
    """
    cells: dict[str, dict[str, list[float]]] = {}
    for r in records:
        if r.status != "ok" or r.final_accuracy is None:
            continue
        cells.setdefault(r.strategy, {}).setdefault(r.stream, []).append(float(r.final_accuracy))
    rows = []
    for strategy, streams in cells.items():
        per_stream = {s: math.fsum(v) / len(v) for s, v in sorted(streams.items())}
        rows.append(ComparisonRow(strategy, per_stream, math.fsum(per_stream.values()) / len(per_stream)))
    return sorted(rows, key=lambda row: (-row.average, row.strategy))


def render_table(rows: list[ComparisonRow]) -> str:
    streams = sorted({s for row in rows for s in row.per_stream})
    header = ["rank", "strategy", *streams, "average"]
    lines = ["\t".join(header)]
    for rank, row in enumerate(rows, 1):
        cells = [f"{row.per_stream[s]:.4f}" if s in row.per_stream else "-" for s in streams]
        lines.append("\t".join([str(rank), row.strategy, *cells, f"{row.average:.4f}"]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "cirsim"
    return plt


def plot_presence(stream: Stream, path: str | Path, title: str | None = None) -> Path:
    """Class-by-experience presence heatmap as an SVG file."""
    plt = _pyplot()
    presence = stream.schedule.presence
    fig, ax = plt.subplots(figsize=(max(4.0, presence.shape[1] * 0.15), max(3.0, presence.shape[0] * 0.06)))
    ax.imshow(presence, aspect="auto", interpolation="nearest", cmap="Greys",
              extent=(0.5, presence.shape[1] + 0.5, presence.shape[0] - 0.5, -0.5))
    ax.set_xlabel("experience")
    ax.set_ylabel("class")
    ax.set_title(title or "class presence")
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_accuracy_curves(records: list[MetricsRecord], path: str | Path) -> Path:
    """Accuracy after each experience: seed mean with a min-max band per series."""
    plt = _pyplot()
    series: dict[tuple[str, str], list[list]] = {}
    for r in records:
        if r.status == "ok":
            series.setdefault((r.strategy, r.stream), []).append(r.trajectory)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for (strategy, stream), trajs in sorted(series.items()):
        n = max(len(t) for t in trajs)
        values = np.full((len(trajs), n), np.nan)
        for i, t in enumerate(trajs):
            for j, v in enumerate(t):
                if v is not None:
                    values[i, j] = v
        steps = np.arange(1, n + 1)
        seen = ~np.isnan(values).all(axis=0)
        mean = np.nanmean(values[:, seen], axis=0)
        (line,) = ax.plot(steps[seen], mean, marker="." if seen.sum() == 1 else None, label=f"{strategy} / {stream}")
        ax.fill_between(steps[seen], np.nanmin(values[:, seen], axis=0), np.nanmax(values[:, seen], axis=0),
                        color=line.get_color(), alpha=0.2, linewidth=0)
    ax.set_xlabel("experience")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0.0, 1.0)
    if series:
        ax.legend(fontsize="small")
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
