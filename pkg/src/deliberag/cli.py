"""Command-line pipeline: ingest -> run -> metrics -> report.

Exit codes: 0 success, 2 manifest/config error, 3 backend error,
4 discussion failure, 5 transcript/metrics schema error, 6 transcript/metrics mismatch.
"""

from __future__ import annotations

import functools
import logging
import sys
from collections import Counter
from pathlib import Path

import click

from .agents import apply_role_overrides, default_roles
from .backend import make_backend
from .config import RunConfig, load_config, with_mock
from .corpus import (
    ChunkPolicy,
    SplitPreference,
    chunk_corpus,
    load_corpus,
    load_manifest,
    save_corpus,
)
from .discussion import DiscussionConfig, load_transcript, run_discussion, save_transcript
from .errors import (
    BackendError,
    ConfigError,
    CorpusError,
    DeliberagError,
    DimensionMismatch,
    DiscussionError,
    SchemaError,
    TranscriptMetricsMismatch,
)
from .index import VectorIndex, build_index
from .metrics import compute_metrics, load_labels, load_metrics_dict, save_metrics
from .report import compile_report, save_report

EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_DISCUSSION = 4
EXIT_SCHEMA = 5
EXIT_MISMATCH = 6

CORPUS_FILE = "corpus.json"
INDEX_FILE = "index.json"
TRANSCRIPT_FILE = "transcript.json"
METRICS_FILE = "metrics.json"
SERIES_FILE = "metrics.csv"
REPORT_MD = "report.md"
REPORT_JSON = "report.json"


def fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def common_options(func):
    @click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML run configuration.")
    @click.option("--mock", is_flag=True, help="Use the deterministic offline backend.")
    @click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Output directory.")
    @functools.wraps(func)
    def wrapper(config_path, mock, out_dir, **kwargs):
        try:
            cfg = load_config(config_path)
        except ConfigError as exc:
            fail(EXIT_CONFIG, str(exc))
        if config_path is not None and not Path(config_path).is_file():
            fail(EXIT_CONFIG, f"config not found: {config_path}")
        if mock:
            cfg.backend = with_mock(cfg.backend)
        out = Path(out_dir or cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        return func(cfg, out, **kwargs)

    return wrapper


def _backend(cfg: RunConfig):
    try:
        return make_backend(cfg.backend)
    except ConfigError as exc:
        fail(EXIT_CONFIG, str(exc))


def _ingest(cfg: RunConfig, manifest) -> tuple:
    try:
        corpus = chunk_corpus(load_manifest(manifest, cfg.stale_after_days), cfg.chunk_policy)
    except CorpusError as exc:
        fail(EXIT_CONFIG, str(exc))
    try:
        index = build_index(corpus, _backend(cfg))
    except (BackendError, DimensionMismatch) as exc:
        fail(EXIT_BACKEND, str(exc))
    return corpus, index


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def cli(verbose):
    """Document-grounded multi-agent deliberation pipeline."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@cli.command()
@click.option("--manifest", type=click.Path(dir_okay=False), help="Document manifest (JSON).")
@click.option("--target-chars", type=int, help="Chunk size in characters.")
@click.option("--overlap-chars", type=int, help="Overlap between consecutive chunks.")
@click.option("--split", type=click.Choice([s.value for s in SplitPreference]), help="Split preference.")
@common_options
def ingest(cfg: RunConfig, out: Path, manifest, target_chars, overlap_chars, split):
    """Load and chunk the corpus, then embed every chunk into an index."""
    manifest = manifest or cfg.manifest
    if not manifest:
        fail(EXIT_CONFIG, "no manifest given (--manifest or corpus.manifest in the config)")
    if target_chars or overlap_chars is not None or split:
        p = cfg.chunk_policy
        try:
            cfg.chunk_policy = ChunkPolicy(
                target_chars or p.target_chars,
                p.overlap_chars if overlap_chars is None else overlap_chars,
                SplitPreference(split) if split else p.split_preference,
            )
        except ValueError as exc:
            fail(EXIT_CONFIG, str(exc))
    corpus, index = _ingest(cfg, manifest)
    save_corpus(corpus, out / CORPUS_FILE)
    index.save(out / INDEX_FILE)
    per_cat = Counter(c.category.value for c in corpus.chunks)
    click.echo(f"chunks: {len(corpus.chunks)} ({', '.join(f'{k}: {v}' for k, v in sorted(per_cat.items()))})")
    click.echo(f"wrote {out / CORPUS_FILE} and {out / INDEX_FILE}")


@cli.command()
@click.option("--task", help="Discussion task statement.")
@click.option("--rounds", type=int, help="Number of discussion rounds (default 10).")
@click.option("--k", type=int, help="Retrieval depth per query (default 4).")
@click.option("--early-stop/--no-early-stop", default=None, help="Stop once every agent agrees for a window of rounds.")
@click.option("--early-stop-window", type=int)
@click.option("--build", is_flag=True, help="Ingest from the manifest instead of reading corpus/index files.")
@common_options
def run(cfg: RunConfig, out: Path, task, rounds, k, early_stop, early_stop_window, build):
    """Run the structured discussion and write the transcript."""
    params = dict(cfg.discussion)
    for key, value in (("task", task), ("rounds", rounds), ("k", k), ("early_stop", early_stop),
                       ("early_stop_window", early_stop_window)):
        if value is not None:
            params[key] = value
    if not params.get("task"):
        fail(EXIT_CONFIG, "no task given (--task or discussion.task in the config)")
    try:
        dconfig = DiscussionConfig(**params)
        roles = apply_role_overrides(default_roles(), cfg.role_overrides)
    except (ConfigError, TypeError) as exc:
        fail(EXIT_CONFIG, f"invalid discussion config: {exc}")

    if build:
        if not cfg.manifest:
            fail(EXIT_CONFIG, "--build needs corpus.manifest in the config")
        corpus, index = _ingest(cfg, cfg.manifest)
    else:
        try:
            corpus = load_corpus(out / CORPUS_FILE)
            index = VectorIndex.load(out / INDEX_FILE)
        except CorpusError as exc:
            fail(EXIT_CONFIG, f"{exc} (run `deliberag ingest` first or pass --build)")

    backend = _backend(cfg)

    def on_round(entry):
        rnd, turns = entry
        decisions = " ".join(f"{t.role_id}={t.decision.value.value}" for t in turns)
        click.echo(f"round {rnd} [{turns[0].phase.value}] {decisions}")

    path = out / TRANSCRIPT_FILE
    try:
        transcript = run_discussion(dconfig, corpus, backend, index=index, roles=roles, on_round=on_round)
    except DiscussionError as exc:
        if exc.partial is not None and exc.partial.completed_rounds >= 1:
            save_transcript(exc.partial, path)
            click.echo(f"wrote partial transcript ({exc.partial.completed_rounds} rounds) to {path}", err=True)
        fail(EXIT_DISCUSSION, str(exc))
    except CorpusError as exc:
        fail(EXIT_CONFIG, str(exc))
    except DeliberagError as exc:
        fail(EXIT_DISCUSSION, str(exc))
    save_transcript(transcript, path)
    note = " (stopped early)" if transcript.stopped_early else ""
    click.echo(f"wrote {path}: {transcript.completed_rounds} rounds{note}")


@cli.command()
@click.option("--transcript", "transcript_path", type=click.Path(dir_okay=False), help="Transcript JSON.")
@click.option("--labels", type=click.Path(dir_okay=False), help="Relevance labels for precision/recall/F1.")
@common_options
def metrics(cfg: RunConfig, out: Path, transcript_path, labels):
    """Compute the evaluation metrics of a transcript."""
    try:
        transcript = load_transcript(transcript_path or out / TRANSCRIPT_FILE)
        label_data = load_labels(labels or cfg.labels) if (labels or cfg.labels) else None
    except SchemaError as exc:
        fail(EXIT_SCHEMA, str(exc))
    try:
        bundle = compute_metrics(transcript, _backend(cfg), label_data)
    except (BackendError, DimensionMismatch) as exc:
        fail(EXIT_BACKEND, str(exc))
    except DeliberagError as exc:
        fail(EXIT_SCHEMA, str(exc))
    save_metrics(bundle, out / METRICS_FILE, out / SERIES_FILE)
    click.echo(f"overall agreement rate: {bundle.agreement.overall_rate:.3f}")
    click.echo(f"wrote {out / METRICS_FILE} and {out / SERIES_FILE}")


@cli.command()
@click.option("--transcript", "transcript_path", type=click.Path(dir_okay=False), help="Transcript JSON.")
@click.option("--metrics", "metrics_path", type=click.Path(dir_okay=False), help="Metrics JSON.")
@common_options
def report(cfg: RunConfig, out: Path, transcript_path, metrics_path):
    """Compile the compliance report and print the verdict."""
    try:
        transcript = load_transcript(transcript_path or out / TRANSCRIPT_FILE)
        metrics_data = load_metrics_dict(metrics_path or out / METRICS_FILE)
        roles = apply_role_overrides(default_roles(), cfg.role_overrides)
    except SchemaError as exc:
        fail(EXIT_SCHEMA, str(exc))
    except ConfigError as exc:
        fail(EXIT_CONFIG, str(exc))
    try:
        rep = compile_report(transcript, metrics_data, _backend(cfg), roles=roles,
                             relevance_threshold=cfg.relevance_threshold)
    except TranscriptMetricsMismatch as exc:
        fail(EXIT_MISMATCH, str(exc))
    except (BackendError, DimensionMismatch) as exc:
        fail(EXIT_BACKEND, str(exc))
    except (DeliberagError, KeyError, IndexError) as exc:
        fail(EXIT_SCHEMA, f"cannot compile report: {exc}")
    save_report(rep, out / REPORT_MD, out / REPORT_JSON)
    click.echo(f"VERDICT: {rep.verdict.value}")
    click.echo(f"wrote {out / REPORT_MD} and {out / REPORT_JSON}")


def main():
    cli()


if __name__ == "__main__":
    main()
