"""Corpus ingestion, metrics, alpha tuning, the K sweep and error export."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, ClassVar, Iterable, Mapping, Optional, Sequence

import numpy as np
from pydantic import Field, model_validator

from rave.model import (
    Claim,
    Decision,
    DecisionError,
    ExtractionResult,
    Record,
    VerifiabilityLabel,
    read_records,
    serialize_record,
    write_records,
)

logger = logging.getLogger(__name__)

ASSETS_DIR = Path(__file__).with_name("assets")
CORPUS_FORMATS = ("canonical", "ct22-tsv", "policlaim")
DEFAULT_ALPHA_GRID = (0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
DEFAULT_K_VALUES = (1, 3, 5, 8, 10)
SWEEP_COLUMNS = ("k", "accuracy", "precision", "recall", "f1")

V = VerifiabilityLabel.VERIFIABLE


class IngestionError(ValueError):
    pass


class EvaluationError(ValueError):
    pass


# -- records -------------------------------------------------------------------


class ConfusionCounts(Record):
    record_type: ClassVar[str] = "confusion_counts"

    tp: int = Field(default=0, ge=0)
    fp: int = Field(default=0, ge=0)
    tn: int = Field(default=0, ge=0)
    fn: int = Field(default=0, ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


class EvalReport(Record):
    """Metrics for one strategy on one dataset.

    ``precision`` (and ``recall``) is None when its denominator is zero; F1 is
    then reported as 0.0.
    """

    record_type: ClassVar[str] = "eval_report"

    strategy: str
    dataset: str = ""
    counts: ConfusionCounts
    accuracy: float = Field(ge=0.0, le=1.0)
    precision: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    recall: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    f1: float = Field(ge=0.0, le=1.0)
    unparseable_count: int = Field(default=0, ge=0)
    config: dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _recomputable(self) -> "EvalReport":
        if (self.accuracy, self.precision, self.recall, self.f1) != metrics_from_counts(self.counts):
            raise ValueError("metrics do not match confusion counts")
        return self


class MisclassifiedRecord(Record):
    record_type: ClassVar[str] = "misclassified"

    error_type: str
    claim: Claim
    decision: Decision

    @model_validator(mode="after")
    def _type_matches(self) -> "MisclassifiedRecord":
        if self.error_type not in ("FP", "FN"):
            raise ValueError("error_type must be FP or FN")
        return self


class ErrorExportHeader(Record):
    record_type: ClassVar[str] = "error_export_header"

    count: int = Field(ge=0)
    false_positives: int = Field(ge=0)
    false_negatives: int = Field(ge=0)
    fields: tuple[str, ...] = ("error_type", "claim", "decision")


# -- metrics -------------------------------------------------------------------


def metrics_from_counts(c: ConfusionCounts) -> tuple[float, Optional[float], Optional[float], float]:
    """``(accuracy, precision, recall, f1)``; undefined ratios are None and F1 falls to 0.0."""
    if c.total == 0:
        raise EvaluationError("no scored claims")
    accuracy = (c.tp + c.tn) / c.total
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else None
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else None
    if precision is None or recall is None or precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return accuracy, precision, recall, f1


def f1_from_pr(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def confusion(pairs: Iterable[tuple[VerifiabilityLabel, VerifiabilityLabel]]) -> ConfusionCounts:
    tp = fp = tn = fn = 0
    for pred, gold in pairs:
        if pred is V:
            tp, fp = (tp + 1, fp) if gold is V else (tp, fp + 1)
        else:
            fn, tn = (fn + 1, tn) if gold is V else (fn, tn + 1)
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def compute_metrics(
    decisions: Sequence[Decision | DecisionError],
    golds: Mapping[str, VerifiabilityLabel],
    *,
    strategy: Optional[str] = None,
    dataset: str = "",
    config: Optional[Mapping[str, Any]] = None,
) -> EvalReport:
    """Confusion counts and metrics with VERIFIABLE as the positive class.

    DecisionError entries are excluded from the counts and reported as
    ``unparseable_count``.
    """
    if not decisions:
        raise EvaluationError("no decisions to evaluate")
    pairs = []
    unparseable = 0
    for d in decisions:
        if d.claim_id not in golds or golds[d.claim_id] is None:
            raise EvaluationError(f"no gold label for claim {d.claim_id}")
        if isinstance(d, DecisionError):
            unparseable += 1
            continue
        pairs.append((d.label, golds[d.claim_id]))
    counts = confusion(pairs)
    if counts.total == 0:
        raise EvaluationError("every decision was unparseable")
    acc, p, r, f1 = metrics_from_counts(counts)
    return EvalReport(
        strategy=strategy or decisions[0].strategy.value,
        dataset=dataset,
        counts=counts,
        accuracy=acc,
        precision=p,
        recall=r,
        f1=f1,
        unparseable_count=unparseable,
        config=dict(config or {}),
    )


# -- ingestion -----------------------------------------------------------------


def load_label_map(fmt: str, path: Optional[str | Path] = None) -> dict[str, VerifiabilityLabel]:
    data = json.loads(Path(path or ASSETS_DIR / "label_maps.json").read_text(encoding="utf-8"))
    if fmt not in data:
        raise IngestionError(f"no label map for format {fmt!r}")
    return {k.strip().lower(): VerifiabilityLabel(v) for k, v in data[fmt].items()}


_COLUMNS = {
    "ct22-tsv": {
        "id": ("tweet_id", "id", "sentence_id"),
        "text": ("tweet_text", "text", "sentence"),
        "label": ("class_label", "label"),
    },
    "policlaim": {
        "id": ("id", "sentence_id", "idx"),
        "text": ("sentence", "sentences", "text", "claim"),
        "label": ("label", "golden", "gold", "verifiable"),
    },
}


def _pick(header: Sequence[str], names: Sequence[str], what: str, required: bool = True) -> Optional[str]:
    lowered = {h.strip().lower(): h for h in header}
    for n in names:
        if n in lowered:
            return lowered[n]
    if required:
        raise IngestionError(f"no {what} column; expected one of {list(names)}, got {list(header)}")
    return None


def ingest_corpus(path: str | Path, fmt: str, *, label_map_path: Optional[str | Path] = None) -> list[Claim]:
    """Load claims from ``canonical`` JSONL, CT22 TSV or PoliClaim CSV."""
    if fmt not in CORPUS_FORMATS:
        raise IngestionError(f"unknown corpus format {fmt!r}; expected one of {CORPUS_FORMATS}")
    path = Path(path)
    if not path.read_text(encoding="utf-8").strip():
        logger.warning("%s is empty", path)
        return []
    if fmt == "canonical":
        claims = []
        for rec in read_records(path):
            if not isinstance(rec, Claim):
                raise IngestionError(f"{path}: expected claim records, found {rec.record_type}")
            claims.append(rec)
    else:
        claims = _ingest_table(path, fmt, load_label_map(fmt, label_map_path))
    dupes = sorted(cid for cid, n in Counter(c.id for c in claims).items() if n > 1)
    if dupes:
        raise IngestionError(f"{path}: duplicate claim ids {dupes[:10]}")
    return claims


def _ingest_table(path: Path, fmt: str, label_map: Mapping[str, VerifiabilityLabel]) -> list[Claim]:
    delimiter = "\t" if fmt == "ct22-tsv" else ","
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames or []
        cols = _COLUMNS[fmt]
        id_col = _pick(header, cols["id"], "id", required=fmt == "ct22-tsv")
        text_col = _pick(header, cols["text"], "text")
        label_col = _pick(header, cols["label"], "label", required=False)
        tag = "ct22" if fmt == "ct22-tsv" else "policlaim"
        claims, bad = [], []
        for lineno, row in enumerate(reader, 2):
            gold = None
            if label_col is not None:
                token = (row.get(label_col) or "").strip().lower()
                if token not in label_map:
                    bad.append(f"line {lineno}: {token!r}")
                    continue
                gold = label_map[token]
            cid = (row.get(id_col) or "").strip() if id_col else f"{tag}-{lineno - 1}"
            claims.append(Claim(id=cid, text=row[text_col], gold_label=gold, source_dataset=tag))
    if bad:
        raise IngestionError(f"{path}: unknown label tokens: " + "; ".join(bad[:20]))
    return claims


# -- alpha tuning --------------------------------------------------------------


@dataclass(frozen=True)
class AlphaTuneResult:
    grid: tuple[float, ...]
    f1: tuple[float, ...]
    mean_f1: tuple[float, ...]
    std_error: tuple[float, ...]
    chosen_alpha: float
    tie_break: str

    def rows(self) -> list[dict[str, float]]:
        return [
            {"alpha": a, "f1": f, "mean_f1": m, "std_error": s}
            for a, f, m, s in zip(self.grid, self.f1, self.mean_f1, self.std_error)
        ]


def bootstrap_f1(
    preds: Sequence[Optional[VerifiabilityLabel]],
    golds: Sequence[VerifiabilityLabel],
    n_resamples: int = 1000,
    seed: int = 0,
    indices: Optional[np.ndarray] = None,
) -> np.ndarray:
    """F1 on ``n_resamples`` bootstrap resamples of the claims.

    A ``None`` prediction (unparseable) is left out of every resample it lands in.
    """
    n = len(golds)
    if indices is None:
        indices = np.random.default_rng(seed).integers(0, n, size=(n_resamples, n))
    valid = np.array([p is not None for p in preds])
    pred_pos = np.array([p is V for p in preds])
    gold_pos = np.array([g is V for g in golds])
    v, pp, gp = valid[indices], pred_pos[indices], gold_pos[indices]
    tp = np.sum(v & pp & gp, axis=1)
    fp = np.sum(v & pp & ~gp, axis=1)
    fn = np.sum(v & ~pp & gp, axis=1)
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


def one_standard_error_choice(
    grid: Sequence[float], means: Sequence[float], ses: Sequence[float], tie_break: str = "smaller", preferred: float = 0.6
) -> float:
    """Pick from the grid points whose mean is within one SE of the best.

    ``tie_break`` chooses the smallest or largest such alpha. When every
    candidate has exactly the same mean, ``preferred`` wins if it is one of them.
    """
    if not grid:
        raise EvaluationError("alpha grid is empty")
    if tie_break not in ("smaller", "larger"):
        raise ValueError("tie_break must be 'smaller' or 'larger'")
    best = max(range(len(grid)), key=lambda i: means[i])
    threshold = means[best] - ses[best]
    candidates = [i for i in range(len(grid)) if means[i] >= threshold]
    if len({means[i] for i in candidates}) == 1 and len(candidates) > 1:
        for i in candidates:
            if grid[i] == preferred:
                return grid[i]
    pick = min if tie_break == "smaller" else max
    return grid[pick(candidates, key=lambda i: grid[i])]


def tune_alpha(
    predict: Callable[[float], Sequence[tuple[Optional[VerifiabilityLabel], VerifiabilityLabel]]],
    grid: Sequence[float] = DEFAULT_ALPHA_GRID,
    *,
    n_resamples: int = 1000,
    seed: int = 0,
    tie_break: str = "smaller",
) -> AlphaTuneResult:
    """Grid search over alpha with bootstrap standard errors and the one-SE rule.

    ``predict(alpha)`` returns ``(prediction, gold)`` for every dev claim,
    in a fixed claim order; the same resample indices are reused for every
    alpha so the comparison is paired.
    """
    grid = tuple(grid)
    if not grid:
        raise EvaluationError("alpha grid is empty")
    indices = None
    f1s, means, ses = [], [], []
    for alpha in grid:
        pairs = list(predict(alpha))
        if not pairs:
            raise EvaluationError("dev corpus is empty")
        preds = [p for p, _ in pairs]
        golds = [g for _, g in pairs]
        if indices is None:
            indices = np.random.default_rng(seed).integers(0, len(pairs), size=(n_resamples, len(pairs)))
        elif indices.shape[1] != len(pairs):
            raise EvaluationError("predict() returned a different number of claims for different alphas")
        counts = confusion((p, g) for p, g in pairs if p is not None)
        f1s.append(metrics_from_counts(counts)[3] if counts.total else 0.0)
        boot = bootstrap_f1(preds, golds, indices=indices)
        means.append(float(boot.mean()))
        ses.append(float(boot.std(ddof=1)) if len(boot) > 1 else 0.0)
    chosen = one_standard_error_choice(grid, means, ses, tie_break)
    return AlphaTuneResult(grid, tuple(f1s), tuple(means), tuple(ses), chosen, tie_break)


# -- K sweep -------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    k: int
    report: Optional[EvalReport]
    error: str = ""


def sweep_k(run: Callable[[int], EvalReport], k_values: Sequence[int] = DEFAULT_K_VALUES) -> list[SweepRow]:
    """Evaluate at each K; a failing K is logged and recorded, the rest still run."""
    if not k_values:
        raise EvaluationError("no K values given")
    rows = []
    for k in k_values:
        try:
            rows.append(SweepRow(k, run(k)))
        except Exception as exc:
            logger.error("K=%d failed: %s", k, exc)
            rows.append(SweepRow(k, None, str(exc)))
    return rows


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else f"{x:.6f}"


def write_sweep_csv(path: str | Path, rows: Sequence[SweepRow]) -> None:
    """CSV with header ``k,accuracy,precision,recall,f1``; undefined values are blank."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for row in rows:
            if row.report is None:
                continue
            r = row.report
            w.writerow([row.k, _fmt(r.accuracy), _fmt(r.precision), _fmt(r.recall), _fmt(r.f1)])


def plot_sweep(path: str | Path, rows: Sequence[SweepRow], title: str = "Sensitivity to K") -> None:
    """Line chart of the four metrics against K, saved as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [r for r in rows if r.report is not None]
    ks = [r.k for r in ok]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name in SWEEP_COLUMNS[1:]:
        ys = [getattr(r.report, name) for r in ok]
        ax.plot(ks, [np.nan if y is None else y for y in ys], marker="o", label=name)
    ax.set_xlabel("K (selected snippets)")
    ax.set_ylabel("score")
    ax.set_xticks(ks)
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize="small")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# -- corpus statistics ---------------------------------------------------------


@dataclass(frozen=True)
class SparsityRow:
    label: str
    claims: int
    zero_entity: int

    @property
    def fraction(self) -> float:
        return self.zero_entity / self.claims if self.claims else 0.0


def corpus_stats(claims: Sequence[Claim], extractions: Sequence[ExtractionResult]) -> list[SparsityRow]:
    """Per gold label, how many claims yielded zero entities."""
    by_id = {e.claim_id: e for e in extractions}
    rows = []
    for label in VerifiabilityLabel:
        group = [c for c in claims if c.gold_label is label]
        missing = [c.id for c in group if c.id not in by_id]
        if missing:
            raise EvaluationError(f"no extraction result for claims {missing[:10]}")
        zero = sum(1 for c in group if not by_id[c.id].entities)
        rows.append(SparsityRow(label.value, len(group), zero))
    return rows


def write_stats_csv(path: str | Path, rows: Sequence[SparsityRow]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("label", "claims", "zero_entity", "fraction"))
        for r in rows:
            w.writerow((r.label, r.claims, r.zero_entity, f"{r.fraction:.6f}"))


# -- misclassification export --------------------------------------------------


def misclassified(decisions: Sequence[Decision | DecisionError], claims: Mapping[str, Claim]) -> list[MisclassifiedRecord]:
    out = []
    for d in decisions:
        if isinstance(d, DecisionError):
            continue
        gold = claims[d.claim_id].gold_label
        if gold is None or d.label is gold:
            continue
        out.append(MisclassifiedRecord(error_type="FP" if d.label is V else "FN", claim=claims[d.claim_id], decision=d))
    return out


def export_errors(path: str | Path, decisions: Sequence[Decision | DecisionError], claims: Mapping[str, Claim]) -> list[MisclassifiedRecord]:
    """Write one record per false positive / false negative after a header line."""
    records = misclassified(decisions, claims)
    header = ErrorExportHeader(
        count=len(records),
        false_positives=sum(r.error_type == "FP" for r in records),
        false_negatives=sum(r.error_type == "FN" for r in records),
    )
    write_records(path, [header, *records])
    return records


def report_line(report: EvalReport) -> str:
    return serialize_record(report)
