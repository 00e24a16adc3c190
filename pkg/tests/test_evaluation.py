import csv
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rave.decision import input_from_decision, prompt_hash, render_decision_prompt
from rave.evaluation import (
    ConfusionCounts,
    EvaluationError,
    IngestionError,
    SweepRow,
    bootstrap_f1,
    compute_metrics,
    corpus_stats,
    export_errors,
    ingest_corpus,
    metrics_from_counts,
    one_standard_error_choice,
    plot_sweep,
    sweep_k,
    tune_alpha,
    write_sweep_csv,
)
from rave.model import Claim, Decision, DecisionError, Entity, EntityKind, ExtractionResult, Strategy, read_records, write_records
from rave.model import VerifiabilityLabel as L

V = "VERIFIABLE"
N = "NON-VERIFIABLE"


def decisions_from_counts(tp, fp, tn, fn, strategy=Strategy.RAVE):
    """Synthetic decisions and golds realising a confusion matrix."""
    decisions, golds, i = [], {}, 0
    for n, pred, gold in ((tp, V, V), (fp, V, N), (tn, N, N), (fn, N, V)):
        for _ in range(n):
            cid = f"d{i}"
            i += 1
            decisions.append(Decision(claim_id=cid, strategy=strategy, label=pred, raw_model_output="", prompt_hash="h"))
            golds[cid] = L(gold)
    return decisions, golds


# -- metrics ------------------------------------------------------------------------


def test_all_correct():
    d, g = decisions_from_counts(5, 0, 7, 0)
    r = compute_metrics(d, g)
    assert (r.accuracy, r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0, 1.0)


def test_undefined_precision_and_recall():
    d, g = decisions_from_counts(0, 0, 4, 3)  # nothing predicted positive
    r = compute_metrics(d, g)
    assert r.precision is None and r.recall == 0.0 and r.f1 == 0.0
    d, g = decisions_from_counts(0, 2, 4, 0)  # no positives in gold
    r = compute_metrics(d, g)
    assert r.precision == 0.0 and r.recall is None and r.f1 == 0.0


def test_unparseable_excluded_and_reported():
    d, g = decisions_from_counts(3, 1, 2, 1)
    d.append(DecisionError(claim_id="bad", strategy=Strategy.RAVE, error="no verdict"))
    g["bad"] = L.VERIFIABLE
    r = compute_metrics(d, g)
    assert r.counts.total == 7 and r.unparseable_count == 1


def test_metric_errors():
    with pytest.raises(EvaluationError):
        compute_metrics([], {})
    d, g = decisions_from_counts(1, 0, 0, 0)
    with pytest.raises(EvaluationError):
        compute_metrics(d, {})
    with pytest.raises(EvaluationError):
        compute_metrics([DecisionError(claim_id="a", strategy=Strategy.RAVE, error="x")], {"a": L.VERIFIABLE})


@pytest.mark.parametrize(
    "tp, fp, fn, f1",
    [
        (120, 16, 29, 0.8421),  # precision 0.8824, recall 0.8054
        (259, 0, 262, 0.6641),  # precision 1.0000, recall 0.4971
    ],
)
def test_published_f1_examples(tp, fp, fn, f1):
    d, g = decisions_from_counts(tp, fp, 50, fn)
    assert compute_metrics(d, g).f1 == pytest.approx(f1, abs=5e-4)


@given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500), st.integers(0, 500))
def test_f1_identity(tp, fp, tn, fn):
    c = ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)
    if c.total == 0:
        return
    acc, p, r, f1 = metrics_from_counts(c)
    if p is not None and r is not None and p + r > 0:
        assert f1 == pytest.approx(2 * p * r / (p + r), abs=1e-12)
    if tp + fp + fn and p is not None and r is not None:
        assert f1 == pytest.approx(2 * tp / (2 * tp + fp + fn), abs=1e-12)


# -- ingestion ----------------------------------------------------------------------


def test_canonical_round_trip(tmp_path):
    claims = [Claim(id="a", text="x", gold_label=V), Claim(id="b", text="y")]
    write_records(tmp_path / "c.jsonl", claims)
    assert ingest_corpus(tmp_path / "c.jsonl", "canonical") == claims


def test_ct22_tsv(tmp_path):
    path = tmp_path / "ct22.tsv"
    path.write_text("topic\ttweet_id\ttweet_url\ttweet_text\tclass_label\nCOVID\t101\tu\tPfizer isn't Lamborghini.\t1\nCOVID\t102\tu\tStay safe\t0\n")
    claims = ingest_corpus(path, "ct22-tsv")
    assert [(c.id, c.gold_label.value, c.source_dataset) for c in claims] == [("101", V, "ct22"), ("102", N, "ct22")]


def test_policlaim_csv_without_ids(tmp_path):
    path = tmp_path / "poli.csv"
    path.write_text('sentence,label\n"We cut taxes, twice.",1\nTogether we rise.,0\n')
    claims = ingest_corpus(path, "policlaim")
    assert [c.id for c in claims] == ["policlaim-1", "policlaim-2"]
    assert claims[0].text == "We cut taxes, twice."


def test_unknown_labels_are_listed(tmp_path):
    path = tmp_path / "poli.csv"
    path.write_text("sentence,label\na,1\nb,maybe\nc,2\n")
    with pytest.raises(IngestionError, match="line 3.*maybe.*line 4"):
        ingest_corpus(path, "policlaim")


def test_empty_and_duplicate(tmp_path, caplog):
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    assert ingest_corpus(empty, "canonical") == []
    assert "empty" in caplog.text
    write_records(tmp_path / "d.jsonl", [Claim(id="a", text="x"), Claim(id="a", text="y")])
    with pytest.raises(IngestionError, match="duplicate"):
        ingest_corpus(tmp_path / "d.jsonl", "canonical")
    with pytest.raises(IngestionError):
        ingest_corpus(empty, "jsonl")


# -- alpha tuning ---------------------------------------------------------------------


def planted_dev_set(n_per_class=1000, peak=0.6, errors_per_step=150):
    """predict(alpha) with F1 = 1 at ``peak`` and a strict decrease away from it."""
    golds = [V] * n_per_class + [N] * n_per_class

    def predict(alpha):
        m = round(abs(alpha - peak) * 10) * errors_per_step
        preds = [N if i < m else V for i in range(n_per_class)] + [V if i < m else N for i in range(n_per_class)]
        return [(L(p), L(g)) for p, g in zip(preds, golds)]

    return predict


def test_tuner_recovers_planted_peak():
    result = tune_alpha(planted_dev_set(), seed=7)
    assert result.chosen_alpha == 0.6
    f1 = dict(zip(result.grid, result.f1))
    assert f1[0.6] == 1.0
    assert f1[0.5] < 1.0 and f1[0.3] < f1[0.4] < f1[0.5]
    assert result.std_error[result.grid.index(0.6)] == 0.0


def test_tuner_seeded_and_paired():
    a = tune_alpha(planted_dev_set(200, errors_per_step=20), n_resamples=300, seed=3)
    b = tune_alpha(planted_dev_set(200, errors_per_step=20), n_resamples=300, seed=3)
    assert a.std_error == b.std_error and a.mean_f1 == b.mean_f1


def test_single_point_grid():
    assert tune_alpha(planted_dev_set(50), grid=[0.8], n_resamples=50).chosen_alpha == 0.8


def test_one_se_rule_and_tie_break():
    grid = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8]
    means = [0.70, 0.78, 0.80, 0.81, 0.80, 0.60]
    ses = [0.02] * 6
    assert one_standard_error_choice(grid, means, ses, "smaller") == 0.5
    assert one_standard_error_choice(grid, means, ses, "larger") == 0.7
    flat = [0.8] * 6
    assert one_standard_error_choice(grid, flat, [0.0] * 6, "smaller") == 0.6
    assert one_standard_error_choice(grid, flat, [0.0] * 6, "larger") == 0.6


def test_bootstrap_se_nonnegative_and_shrinks_with_size():
    def se(n):
        golds = [L.VERIFIABLE if i % 2 else L.NON_VERIFIABLE for i in range(n)]
        preds = [g if i % 5 else (L.VERIFIABLE if g is L.NON_VERIFIABLE else L.NON_VERIFIABLE) for i, g in enumerate(golds)]
        boot = bootstrap_f1(preds, golds, n_resamples=1000, seed=1)
        return float(np.std(boot, ddof=1))

    small, large = se(100), se(1600)
    assert small >= 0 and large >= 0
    assert large < small


# -- K sweep ---------------------------------------------------------------------------


def _report(k):
    d, g = decisions_from_counts(k, 1, 5, 10 - k)
    return compute_metrics(d, g, config={"k": k})


def test_sweep_csv_and_chart(tmp_path):
    rows = sweep_k(_report, [1, 3, 5])
    write_sweep_csv(tmp_path / "k.csv", rows)
    lines = (tmp_path / "k.csv").read_text().splitlines()
    assert lines[0] == "k,accuracy,precision,recall,f1"
    assert [line.split(",")[0] for line in lines[1:]] == ["1", "3", "5"]
    plot_sweep(tmp_path / "k.svg", rows)
    root = ET.parse(tmp_path / "k.svg").getroot()
    assert root.tag.endswith("svg")


def test_sweep_single_k_and_failures():
    assert len(sweep_k(_report, [3])) == 1

    def flaky(k):
        if k == 5:
            raise RuntimeError("boom")
        return _report(k)

    rows = sweep_k(flaky, [1, 5, 8])
    assert [r.report is None for r in rows] == [False, True, False]
    assert "boom" in rows[1].error


def test_sweep_csv_leaves_undefined_blank(tmp_path):
    d, g = decisions_from_counts(0, 0, 4, 3)
    write_sweep_csv(tmp_path / "k.csv", [SweepRow(1, compute_metrics(d, g))])
    with (tmp_path / "k.csv").open() as fh:
        row = list(csv.DictReader(fh))[0]
    assert row["precision"] == "" and row["f1"] == "0.000000"


# -- corpus stats -----------------------------------------------------------------------


def test_sparsity_counts():
    claims = [Claim(id=str(i), text="t", gold_label=g) for i, g in enumerate([V, V, N, N])]
    ent = (Entity(surface="t", kind=EntityKind.ORG),)
    extractions = [
        ExtractionResult(claim_id="0", entities=ent),
        ExtractionResult(claim_id="1"),
        ExtractionResult(claim_id="2"),
        ExtractionResult(claim_id="3"),
    ]
    rows = {r.label: r.fraction for r in corpus_stats(claims, extractions)}
    assert rows == {V: 0.5, N: 1.0}
    full = [ExtractionResult(claim_id=str(i), entities=ent) for i in range(4)]
    assert {r.label: r.fraction for r in corpus_stats(claims, full)} == {V: 0.0, N: 0.0}


# -- error export ------------------------------------------------------------------------


def test_export_counts_and_header(tmp_path):
    claims = {c: Claim(id=c, text=f"claim {c}", gold_label=g) for c, g in [("a", N), ("b", V), ("c", V), ("d", V)]}
    decisions = [
        Decision(claim_id="a", strategy=Strategy.TEXT_ONLY, label=V, raw_model_output="", prompt_hash="h"),
        Decision(claim_id="b", strategy=Strategy.TEXT_ONLY, label=N, raw_model_output="", prompt_hash="h"),
        Decision(claim_id="c", strategy=Strategy.TEXT_ONLY, label=N, raw_model_output="", prompt_hash="h"),
        Decision(claim_id="d", strategy=Strategy.TEXT_ONLY, label=V, raw_model_output="", prompt_hash="h"),
    ]
    records = export_errors(tmp_path / "e.jsonl", decisions, claims)
    assert sorted(r.error_type for r in records) == ["FN", "FN", "FP"]
    rows = list(read_records(tmp_path / "e.jsonl"))
    assert rows[0].count == 3 and rows[0].false_positives == 1

    export_errors(tmp_path / "none.jsonl", decisions[3:], claims)
    rows = list(read_records(tmp_path / "none.jsonl"))
    assert len(rows) == 1 and rows[0].count == 0


def test_exported_records_reconstruct_the_prompt(replay_config, tmp_path):
    from rave.pipeline import run_pipeline

    replay_config.strategies = ["RAVE", "RAVE_STATS"]
    result = run_pipeline(replay_config)
    claims = {c.id: c for c in result.claims}
    for strategy, rows in result.decisions.items():
        records = export_errors(tmp_path / f"{strategy.value}.jsonl", rows, claims)
        assert records, strategy
        for rec in read_records(tmp_path / f"{strategy.value}.jsonl"):
            if rec.record_type != "misclassified":
                continue
            prompt = render_decision_prompt(input_from_decision(rec.decision, rec.claim))
            assert prompt_hash(prompt) == rec.decision.prompt_hash
