"""``rave`` command line.

Exit status: 0 clean run, 1 some claims failed, 2 configuration error or abort.
"""

from __future__ import annotations

import csv
import functools
import logging
import sys
from collections import Counter
from pathlib import Path
from typing import Any, Callable, Optional

import click

from rave import extraction
from rave.config import ConfigError, RunConfig, load_config
from rave.evaluation import (
    EvaluationError,
    IngestionError,
    compute_metrics,
    corpus_stats,
    export_errors,
    plot_sweep,
    sweep_k,
    tune_alpha,
    write_stats_csv,
    write_sweep_csv,
)
from rave.gateway import CredentialsError, GatewayMode
from rave.model import Claim, Decision, DecisionError, Strategy, read_records, serialize_record, write_records
from rave.pipeline import (
    Pipeline,
    build_manifest,
    load_claims,
    make_gateway,
    now,
    prepare_all,
    record_fixtures,
    run_pipeline,
    write_manifest,
)

logger = logging.getLogger("rave")

EXIT_OK, EXIT_CLAIM_ERRORS, EXIT_CONFIG = 0, 1, 2


def common_options(fn: Callable) -> Callable:
    options = [
        click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False), help="YAML config file."),
        click.option("--corpus", help="Claims file."),
        click.option("--corpus-format", type=click.Choice(["canonical", "ct22-tsv", "policlaim"])),
        click.option("--mode", type=click.Choice(["LIVE", "RECORD", "REPLAY"], case_sensitive=False)),
        click.option("--cache-dir", help="Record/replay cache directory."),
        click.option("--output-dir", help="Where run outputs are written."),
        click.option("--alpha", type=float, help="Weight of relevance in the combined score."),
        click.option("--k", type=int, help="Number of snippets selected."),
        click.option("--seed", type=int, help="Top-level random seed."),
        click.option("--workers", type=int, help="Worker threads (0 = one per CPU)."),
        click.option("--strategy", "strategies", multiple=True, type=click.Choice([s.value for s in Strategy])),
    ]
    for opt in reversed(options):
        fn = opt(fn)

    @functools.wraps(fn)
    def wrapper(config_file: Optional[str], strategies: tuple[str, ...], **kwargs: Any):
        flags = {k: v for k, v in kwargs.items() if k in RunConfig.__dataclass_fields__ and v is not None}
        extra = {k: v for k, v in kwargs.items() if k not in RunConfig.__dataclass_fields__}
        if strategies:
            flags["strategies"] = list(strategies)
        try:
            config = load_config(flags, file=config_file)
            return fn(config, **extra)
        except (ConfigError, CredentialsError, IngestionError, EvaluationError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)

    return wrapper


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (-vv for debug).")
def main(verbose: int) -> None:
    """Retrieval- and scoring-aware verifiable claim detection."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _claims(config: RunConfig, texts: tuple[str, ...] = ()) -> list[Claim]:
    if texts:
        return [Claim(id=f"cli-{i + 1}", text=t) for i, t in enumerate(texts)]
    return load_claims(config)


def _out(config: RunConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


@main.command("extract")
@common_options
def extract_cmd(config: RunConfig) -> None:
    """Extract entities for every claim (extractions.jsonl)."""
    gw = make_gateway(config)
    gw.check_credentials(("chat",))
    claims = load_claims(config)
    pipe = Pipeline(config, gw)
    counters = Counter()
    results = pipe.map(lambda c: extraction.extract_or_empty(c, gw, Counter()), claims)
    for r in results:
        counters["entities"] += len(r.entities)
        counters["extraction_failures"] += r.failed
    write_records(_out(config) / "extractions.jsonl", results)
    click.echo(f"{len(results)} claims, {counters['entities']} entities, {counters['extraction_failures']} failures")


@main.command("retrieve")
@common_options
def retrieve_cmd(config: RunConfig) -> None:
    """Extract and search; write one context pool per claim (pools.jsonl)."""
    claims = load_claims(config)
    started = now()
    pipe, prepared = prepare_all(config, claims, make_gateway(config))
    counters = Counter()
    for p in prepared:
        counters.update(p.counters)
    out = _out(config)
    write_records(out / "pools.jsonl", [p.pool for p in prepared if p.pool is not None])
    write_manifest(out / "manifest.json", build_manifest(config, pipe, counters, started))
    click.echo(f"{len(prepared)} claims, {counters['snippets']} snippets")
    sys.exit(EXIT_CLAIM_ERRORS if counters["claim_errors"] else EXIT_OK)


@main.command("score")
@common_options
def score_cmd(config: RunConfig) -> None:
    """Dump claim_id, url, relevance, credibility and combined score per snippet (scores.csv)."""
    claims = load_claims(config)
    pipe, prepared = prepare_all(config, claims, make_gateway(config))
    path = _out(config) / "scores.csv"
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("claim_id", "url", "relevance", "credibility", "combined"))
        for p in prepared:
            if p.pool is None:
                continue
            for s in pipe.score(p, config.alpha):
                w.writerow((p.claim.id, s.snippet.url, f"{s.relevance:.6f}", f"{s.credibility:.2f}", f"{s.combined:.6f}"))
    click.echo(f"wrote {path}")


@main.command("detect")
@common_options
@click.option("--claim", "claim_texts", multiple=True, help="Claim text (repeatable); overrides --corpus.")
def detect_cmd(config: RunConfig, claim_texts: tuple[str, ...]) -> None:
    """Run the pipeline and print one decision record per line."""
    result = run_pipeline(config, _claims(config, claim_texts))
    for rows in result.decisions.values():
        for row in rows:
            click.echo(serialize_record(row))
    sys.exit(result.exit_code)


@main.command("evaluate")
@common_options
def evaluate_cmd(config: RunConfig) -> None:
    """Run the configured strategies and report accuracy, precision, recall and F1."""
    result = run_pipeline(config)
    golds = {c.id: c.gold_label for c in result.claims}
    out = _out(config)
    reports = []
    for strategy, rows in result.decisions.items():
        try:
            reports.append(compute_metrics(rows, golds, strategy=strategy.value, config=result.manifest["config"]))
        except EvaluationError as exc:
            click.echo(f"{strategy.value}: {exc}", err=True)
    write_records(out / "reports.jsonl", reports)
    with (out / "results.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("strategy", "accuracy", "precision", "recall", "f1", "unparseable"))
        for r in reports:
            w.writerow((r.strategy, *(("" if x is None else f"{x:.4f}") for x in (r.accuracy, r.precision, r.recall, r.f1)), r.unparseable_count))
    click.echo(f"{'strategy':<12} {'acc':>7} {'prec':>7} {'rec':>7} {'f1':>7}")
    for r in reports:
        cells = ("  n/a" if x is None else f"{x:.4f}" for x in (r.accuracy, r.precision, r.recall, r.f1))
        click.echo(f"{r.strategy:<12} " + " ".join(f"{c:>7}" for c in cells))
    sys.exit(result.exit_code)


@main.command("tune-alpha")
@common_options
def tune_alpha_cmd(config: RunConfig) -> None:
    """Grid-search alpha on a labelled dev corpus with the one-standard-error rule."""
    claims = load_claims(config)
    pipe, prepared = prepare_all(config, claims, make_gateway(config))

    def predict(alpha: float):
        rows = pipe.map(lambda p: pipe.decide(p, Strategy.RAVE, alpha=alpha), prepared)
        return [(r.label if isinstance(r, Decision) else None, p.claim.gold_label) for r, p in zip(rows, prepared)]

    result = tune_alpha(
        predict, config.alpha_grid, n_resamples=config.bootstrap_resamples, seed=config.seed, tie_break=config.tie_break
    )
    path = _out(config) / "alpha_tuning.csv"
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["alpha", "f1", "mean_f1", "std_error"], lineterminator="\n")
        w.writeheader()
        w.writerows(result.rows())
    for row in result.rows():
        click.echo(f"alpha={row['alpha']:.2f} f1={row['f1']:.4f} mean={row['mean_f1']:.4f} se={row['std_error']:.4f}")
    click.echo(f"chosen alpha: {result.chosen_alpha}")


@main.command("sweep-k")
@common_options
@click.option("--chart/--no-chart", default=True, help="Also write k_sweep.svg.")
def sweep_k_cmd(config: RunConfig, chart: bool) -> None:
    """Evaluate RAVE at each K in k_values; write k_sweep.csv (and k_sweep.svg)."""
    claims = load_claims(config)
    pipe, prepared = prepare_all(config, claims, make_gateway(config))
    rows = sweep_k(lambda k: pipe.evaluate_at(prepared, Strategy.RAVE, k=k)[1], config.k_values)
    out = _out(config)
    write_sweep_csv(out / "k_sweep.csv", rows)
    if chart:
        plot_sweep(out / "k_sweep.svg", rows)
    for row in rows:
        if row.report is None:
            click.echo(f"K={row.k}: error: {row.error}")
        else:
            click.echo(f"K={row.k}: recall={row.report.recall} f1={row.report.f1:.4f}")
    sys.exit(EXIT_CLAIM_ERRORS if any(r.report is None for r in rows) else EXIT_OK)


@main.command("stats")
@common_options
def stats_cmd(config: RunConfig) -> None:
    """Fraction of claims without entities, per gold label (entity_sparsity.csv)."""
    claims = load_claims(config)
    gw = make_gateway(config)
    gw.check_credentials(("chat",))
    pipe = Pipeline(config, gw)
    results = pipe.map(lambda c: extraction.extract_or_empty(c, gw), claims)
    rows = corpus_stats(claims, results)
    write_stats_csv(_out(config) / "entity_sparsity.csv", rows)
    for r in rows:
        click.echo(f"{r.label:<15} {r.zero_entity}/{r.claims} without entities ({100 * r.fraction:.1f}%)")


@main.command("export-errors")
@common_options
@click.option("--decisions", "decisions_file", required=True, type=click.Path(exists=True, dir_okay=False))
def export_errors_cmd(config: RunConfig, decisions_file: str) -> None:
    """Write false positives and false negatives with their evidence (errors.jsonl)."""
    claims = {c.id: c for c in load_claims(config)}
    decisions = [r for r in read_records(decisions_file) if isinstance(r, (Decision, DecisionError))]
    path = _out(config) / "errors.jsonl"
    records = export_errors(path, decisions, claims)
    click.echo(f"{len(records)} misclassified claims written to {path}")


@main.command("record-fixtures")
@common_options
@click.option("--with-sweeps/--no-sweeps", default=True, help="Also record RAVE at every k_values and alpha_grid point.")
def record_fixtures_cmd(config: RunConfig, with_sweeps: bool) -> None:
    """Call the live services for a corpus and store every response in the cache."""
    config.mode = GatewayMode.RECORD.value
    claims = load_claims(config)
    gw = make_gateway(config)
    summary = record_fixtures(
        config,
        claims,
        gw,
        k_values=config.k_values if with_sweeps else (),
        alpha_values=config.alpha_grid if with_sweeps else (),
    )
    click.echo(f"cache now holds {summary['entries']} responses (digest {summary['cache_digest'][:12]})")
    sys.exit(summary["exit_status"])


if __name__ == "__main__":
    main()
