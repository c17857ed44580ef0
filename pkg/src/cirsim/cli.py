"""Command-line entry point: ``cirsim generate|run|compare|plot|stats``.

Exit codes: 0 success, 2 configuration or input error, 3 run failure.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import harness
from .stream_gen import (
    ConfigError,
    StreamConfig,
    StreamFormatError,
    deserialize_stream,
    format_first_occurrence,
    format_repetition,
    generate_stream,
    parse_first_occurrence,
    parse_repetition,
    serialize_stream,
    stream_stats,
    validate_stream,
)

EXIT_CONFIG = 2
EXIT_RUN = 3


def _fail(message: str, code: int) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_stream(path: str):
    try:
        return deserialize_stream(Path(path).read_bytes())
    except OSError as exc:
        _fail(f"cannot read {path}: {exc}", EXIT_CONFIG)
    except StreamFormatError as exc:
        _fail(f"{path}: {exc}", EXIT_CONFIG)


def _output_dir(default: str = ".") -> Path:
    return Path(os.environ.get(harness.OUTPUT_DIR_ENV) or default)


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more log output.")
def main(verbose: int) -> None:
    """Class-incremental-with-repetition simulator."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--preset", help="S1..S6 or NOREP-<n>x<group>.")
@click.option("--first-occurrence", help="e.g. geometric:0.6 (instead of --preset)")
@click.option("--repetition", help="e.g. zipf:0.8 or fixed:0.04 (instead of --preset)")
@click.option("--n-experiences", type=int, default=harness.DESK_EXPERIENCES, show_default=True)
@click.option("--experience-size", type=int, default=harness.DESK_EXPERIENCE_SIZE, show_default=True)
@click.option("--n-classes", type=int, default=20, show_default=True)
@click.option("--samples-per-class", type=int, default=200, show_default=True)
@click.option("--full-scale", is_flag=True, help="Keep the preset's 50 x 2000 layout.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Stream file to write.")
def generate(preset, first_occurrence, repetition, n_experiences, experience_size, n_classes,
             samples_per_class, full_scale, seed, out):
    """Generate a stream file from a preset or explicit distributions."""
    try:
        if preset:
            stream = harness.resolve_stream(preset, seed, n_classes, samples_per_class, full_scale)
        elif first_occurrence and repetition:
            config = StreamConfig(
                n_experiences, experience_size, n_classes, samples_per_class,
                parse_first_occurrence(first_occurrence), parse_repetition(repetition), seed,
            )
            stream = generate_stream(config)
        else:
            raise ConfigError("give --preset, or both --first-occurrence and --repetition")
    except ConfigError as exc:
        _fail(str(exc), EXIT_CONFIG)
    Path(out).write_bytes(serialize_stream(stream))
    click.echo(f"wrote {out}: {stream.config.n_experiences} experiences, {stream.config.n_classes} classes")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--workers", type=int, help="Override the worker count.")
def run(config_path, workers):
    """Run every strategy x stream x seed job of an experiment config."""
    try:
        config = harness.ExperimentConfig.load(config_path)
        if workers is not None:
            config.workers = workers
            config.validate()
    except ConfigError as exc:
        _fail(str(exc), EXIT_CONFIG)
    records = harness.run_experiment(config)
    out_dir = config.resolved_output_dir()
    click.echo(harness.render_table(harness.compare(records)), nl=False)
    failed = [r for r in records if r.status != "ok"]
    for r in failed:
        click.echo(f"failed: {r.file_stem()}: {r.error}", err=True)
    click.echo(f"{len(records)} record(s) in {out_dir}")
    if failed:
        sys.exit(EXIT_RUN)


@main.command()
@click.option("--glob", "pattern", required=True, help="Record files, e.g. 'results/*.rec'.")
@click.option("--out", type=click.Path(dir_okay=False), help="Also write the table here.")
def compare(pattern, out):
    """Rank strategies by mean final accuracy."""
    records = harness.glob_records(pattern)
    if not records:
        _fail(f"no record files match {pattern!r}", EXIT_CONFIG)
    table = harness.render_table(harness.compare(records))
    if out:
        Path(out).write_text(table)
    click.echo(table, nl=False)


@main.command()
@click.option("--stream", "stream_path", type=click.Path(dir_okay=False), help="Stream file: presence heatmap.")
@click.option("--glob", "pattern", help="Record files: accuracy curves.")
@click.option("--out", type=click.Path(dir_okay=False), help="SVG file (default: next to the input).")
def plot(stream_path, pattern, out):
    """Write SVG plots of a stream or of run records."""
    if bool(stream_path) == bool(pattern):
        _fail("give exactly one of --stream or --glob", EXIT_CONFIG)
    if stream_path:
        stream = _load_stream(stream_path)
        target = Path(out) if out else _output_dir(str(Path(stream_path).parent)) / (Path(stream_path).stem + ".svg")
        harness.plot_presence(stream, target, title=Path(stream_path).stem)
    else:
        records = harness.glob_records(pattern)
        if not records:
            _fail(f"no record files match {pattern!r}", EXIT_CONFIG)
        target = Path(out) if out else _output_dir() / "accuracy.svg"
        harness.plot_accuracy_curves(records, target)
    click.echo(f"wrote {target}")


@main.command()
@click.option("--stream", "stream_path", required=True, type=click.Path(dir_okay=False))
@click.option("--json", "as_json", is_flag=True, help="Machine-readable output.")
def stats(stream_path, as_json):
    """Summary statistics of a stream file."""
    stream = _load_stream(stream_path)
    try:
        validate_stream(stream)
    except ConfigError as exc:
        _fail(f"{stream_path}: {exc}", EXIT_CONFIG)
    st = stream_stats(stream)
    cfg = stream.config
    sched = stream.schedule
    # empirical repetition frequency: presence rate after the first occurrence
    after = np.arange(cfg.n_experiences)[None, :] >= sched.first_occurrence_index[:, None]
    n_after = after.sum(axis=1)
    rep_freq = np.where(n_after > 0, (sched.presence & after).sum(axis=1) / np.maximum(n_after, 1), np.nan)
    summary = {
        "n_experiences": cfg.n_experiences,
        "experience_size": cfg.experience_size,
        "n_classes": cfg.n_classes,
        "first_occurrence": format_first_occurrence(cfg.first_occurrence),
        "repetition": format_repetition(cfg.repetition),
        "seed": cfg.seed,
        "classes_per_experience": st.classes_per_experience.tolist(),
        "occurrences_per_class": st.occurrences_per_class.tolist(),
        "first_occurrence_histogram": st.first_occurrence_hist.tolist(),
        "repetition_probability": [round(float(p), 6) for p in sched.repetition_probs],
        "repetition_frequency": [None if np.isnan(f) else round(float(f), 6) for f in rep_freq],
    }
    if as_json:
        click.echo(json.dumps(summary, sort_keys=True))
        return
    cpe = st.classes_per_experience
    click.echo(f"experiences      {cfg.n_experiences} x {cfg.experience_size} samples")
    click.echo(f"classes          {cfg.n_classes} ({int((st.occurrences_per_class > 0).sum())} appear)")
    click.echo(f"first occurrence {summary['first_occurrence']}")
    click.echo(f"repetition       {summary['repetition']}")
    click.echo(f"classes/exp      mean {cpe.mean():.2f}  min {cpe.min()}  max {cpe.max()}")
    click.echo(f"occurrences/cls  mean {st.occurrences_per_class.mean():.2f}")
    click.echo("first-occ hist   " + " ".join(str(v) for v in st.first_occurrence_hist))


if __name__ == "__main__":
    main()
