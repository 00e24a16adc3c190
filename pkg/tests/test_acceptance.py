"""Exit criteria for the build, one group of tests per criterion.

Run ``pytest tests/test_acceptance.py`` and read the "acceptance criteria"
section at the end of the output: one PASS/FAIL/SKIP line per criterion.
"""

import csv
import os
import random
import time
import xml.etree.ElementTree as ET
from fractions import Fraction

import numpy as np
import pytest
from click.testing import CliRunner

from rave.cli import main
from rave.config import RunConfig
from rave.evaluation import ConfusionCounts, compute_metrics, metrics_from_counts, tune_alpha
from rave.model import Decision, DecisionError, Strategy, VerifiabilityLabel
from rave.pipeline import decisions_path, make_gateway, run_pipeline
from rave.scoring import combined_score, default_table, select_top_k
from rave.model import ScoredSnippet
from simworld import WORLD, SimulatedServices, mock_client, sim_env

from conftest import FIXTURE_CACHE, FIXTURE_CORPUS, make_snippet

V = VerifiabilityLabel.VERIFIABLE
N = VerifiabilityLabel.NON_VERIFIABLE

# -- 1. credibility table ----------------------------------------------------------

# Expected scores worked out by hand from the source-type tiers, applying the
# rule priority (named sources, then gov/edu, academic, news, .org, .com, rest).
DOMAIN_VECTOR = [
    ("en.wikipedia.org", 1.00),
    ("wikipedia.org", 1.00),
    ("reuters.com", 1.00),
    ("news.bbc.co.uk", 1.00),  # named source beats the "news" keyword
    ("nature.com", 1.00),
    ("cdc.gov", 0.95),
    ("harvard.edu", 0.95),
    ("data.gov.uk", 0.95),
    ("mit.edu", 0.95),
    ("ox.ac.uk", 0.85),
    ("stateuniversity.org", 0.85),  # academic keyword beats .org
    ("researchinstitute.com", 0.85),
    ("nytimes.com", 0.75),
    ("washingtonpost.com", 0.75),
    ("journalnow.net", 0.75),
    ("nbcnews.com", 0.75),
    ("newsroom.org", 0.75),  # news keyword beats .org
    ("redcross.org", 0.65),
    ("factcheck.org", 0.65),
    ("notwikipedia.org", 0.65),  # not a subdomain of wikipedia.org
    ("amazon.com", 0.50),
    ("forbes.com", 0.50),
    ("example.io", 0.40),
    ("truthcircle.xyz", 0.40),
    ("shop-anything.xyz", 0.40),
]


@pytest.mark.acceptance(1, "credibility table fidelity")
def test_credibility_vector():
    assert len(DOMAIN_VECTOR) == 25
    start = time.perf_counter()
    table = default_table()
    scores = [table.score(d) for d, _ in DOMAIN_VECTOR]
    elapsed = time.perf_counter() - start
    assert scores == [s for _, s in DOMAIN_VECTOR]
    assert {s for _, s in DOMAIN_VECTOR} == {1.00, 0.95, 0.85, 0.75, 0.65, 0.50, 0.40}
    assert elapsed < 1.0


# -- 2. scoring algebra ----------------------------------------------------------------


def _random_pool(rng, n):
    ranks = rng.permutation(n) + 1
    creds = rng.choice([0.40, 0.50, 0.65, 0.75, 0.85, 0.95, 1.00], size=n)
    rels = rng.uniform(-1, 1, size=n)
    snippets = [make_snippet(f"https://s{i}.org/p", rank=int(ranks[i])) for i in range(n)]
    return snippets, rels, creds


def _build(snippets, rels, creds, alpha):
    return [ScoredSnippet.build(s, float(r), float(c), alpha) for s, r, c in zip(snippets, rels, creds)]


def _urls(items):
    return [s.snippet.url for s in items]


@pytest.mark.acceptance(2, "scoring algebra")
def test_scoring_algebra():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)

    r, c, a = rng.uniform(-1, 1, 10_000), rng.uniform(0, 1, 10_000), rng.uniform(0, 1, 10_000)
    expected = a * r + (1 - a) * c
    for i in range(10_000):
        got = combined_score(float(r[i]), float(c[i]), float(a[i]))
        assert got == expected[i]
        exact = Fraction(a[i]) * Fraction(r[i]) + (1 - Fraction(a[i])) * Fraction(c[i])
        assert abs(Fraction(got) - exact) <= Fraction(1, 2**50)

    for _ in range(1000):
        n = int(rng.integers(1, 16))
        k = int(rng.integers(1, 12))
        snippets, rels, creds = _random_pool(rng, n)
        ranks = [s.rank_in_search for s in snippets]

        by_rel = sorted(range(n), key=lambda i: (-rels[i], -creds[i], ranks[i], i))
        by_cred = sorted(range(n), key=lambda i: (-creds[i], ranks[i], i))
        assert _urls(select_top_k(_build(snippets, rels, creds, 1.0), n)) == [snippets[i].url for i in by_rel]
        assert _urls(select_top_k(_build(snippets, rels, creds, 0.0), n)) == [snippets[i].url for i in by_cred]

        alpha = float(rng.uniform(0.01, 1.0))
        scored = _build(snippets, rels, creds, alpha)
        top = select_top_k(scored, k)
        assert len(top) == min(k, n)

        # raising a selected snippet's relevance keeps it selected
        chosen = top[0].snippet.url
        j = next(i for i, s in enumerate(scored) if s.snippet.url == chosen)
        boosted = rels.copy()
        boosted[j] = min(1.0, boosted[j] + 0.5)
        assert chosen in _urls(select_top_k(_build(snippets, boosted, creds, alpha), k))

        # input order does not change the selection when engine ranks are distinct
        perm = rng.permutation(n)
        shuffled = [scored[i] for i in perm]
        assert _urls(select_top_k(shuffled, k)) == _urls(top)

    assert time.perf_counter() - start < 10.0


# -- 3. metric oracle --------------------------------------------------------------------

# Confusion counts recovered by exhaustive search over (tp, fp, fn) with the
# positive count fixed per test set, keeping the unique triple whose precision,
# recall and F1 all round to the published values. TN follows from the test set
# sizes implied by the accuracy column (CT22 251 claims, PoliClaim 816).
CT22_N, POLI_N = 251, 816
TABLE2 = {
    # name: (tp, fp, fn, n), published (acc, prec, rec, f1)
    "CT22 Text-only": ((120, 16, 29, CT22_N), (0.8207, 0.8824, 0.8054, 0.8421)),
    "CT22 Rand-K": ((125, 25, 24, CT22_N), (0.8048, 0.8333, 0.8389, 0.8361)),
    "CT22 Search-K": ((129, 23, 20, CT22_N), (0.8287, 0.8487, 0.8658, 0.8571)),
    "CT22 RAVE-Stats": ((125, 24, 24, CT22_N), (0.8088, 0.8389, 0.8389, 0.8389)),
    "CT22 RAVE-Meta": ((124, 23, 25, CT22_N), (0.8088, 0.8435, 0.8322, 0.8378)),
    "CT22 RAVE": ((126, 19, 23, CT22_N), (0.8327, 0.869, 0.8456, 0.8571)),
    "PoliClaim Text-only": ((259, 0, 262, POLI_N), (0.6789, 1.0, 0.4971, 0.6641)),
    "PoliClaim Rand-K": ((276, 0, 245, POLI_N), (0.6998, 1.0, 0.5298, 0.6926)),
    "PoliClaim Search-K": ((275, 0, 246, POLI_N), (0.6985, 1.0, 0.5278, 0.6910)),
    "PoliClaim RAVE-Stats": ((231, 0, 290, POLI_N), (0.6446, 1.0, 0.4434, 0.6144)),
    "PoliClaim RAVE-Meta": ((277, 0, 244, POLI_N), (0.7010, 1.0, 0.5317, 0.6942)),
    "PoliClaim RAVE": ((278, 1, 243, POLI_N), (0.7010, 0.9964, 0.5336, 0.6950)),
}
TABLE3 = {
    "ablation Relevance only": ((125, 24, 24, CT22_N), (0.809, 0.839, 0.839, 0.839)),
    "ablation Credibility only": ((128, 23, 21, CT22_N), (0.825, 0.848, 0.859, 0.853)),
    "ablation RAVE": ((126, 19, 23, CT22_N), (0.833, 0.869, 0.846, 0.857)),
}
# The closest count triple for this row, (126, 22, 23), reproduces precision,
# recall and accuracy but gives F1 0.84848, 0.00052 away from the published 0.849.
# No triple with 149 positives matches all three published values.
TEXT_SNIPPETS = ((126, 22, 23, CT22_N), (0.821, 0.851, 0.846, 0.849))


def _decisions(tp, fp, fn, n):
    tn = n - tp - fp - fn
    decisions, golds = [], {}
    for count, pred, gold in ((tp, V, V), (fp, V, N), (tn, N, N), (fn, N, V)):
        for _ in range(count):
            cid = f"x{len(decisions)}"
            decisions.append(Decision(claim_id=cid, strategy=Strategy.RAVE, label=pred, raw_model_output="", prompt_hash="h"))
            golds[cid] = gold
    return decisions, golds


def _check_row(counts, published):
    report = compute_metrics(*_decisions(*counts))
    got = (report.accuracy, report.precision, report.recall, report.f1)
    for name, g, p in zip(("accuracy", "precision", "recall", "f1"), got, published):
        assert abs(g - p) <= 5e-4, f"{name}: {g:.5f} vs published {p}"


@pytest.mark.acceptance(3, "metric oracle")
@pytest.mark.parametrize("row", sorted({**TABLE2, **TABLE3}))
def test_published_rows(row):
    _check_row(*{**TABLE2, **TABLE3}[row])


@pytest.mark.acceptance(3, "metric oracle")
@pytest.mark.xfail(strict=True, reason="ablation Text+Snippets F1 0.849 is not reachable from any integer confusion matrix "
                   "with 149 positives that also gives P 0.851 and R 0.846; best is 0.84848")
def test_published_text_snippets_row():
    _check_row(*TEXT_SNIPPETS)


@pytest.mark.acceptance(3, "metric oracle")
def test_f1_identity_on_random_counts():
    rng = random.Random(5)
    for _ in range(20_000):
        tp, fp, tn, fn = (rng.randint(0, 10_000) for _ in range(4))
        if tp + fp + fn == 0:
            continue
        _, _, _, f1 = metrics_from_counts(ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn))
        assert abs(f1 - 2 * tp / (2 * tp + fp + fn)) <= 1e-12


# -- 4. hermetic replay --------------------------------------------------------------------


@pytest.mark.acceptance(4, "hermetic end-to-end replay")
def test_replay_is_hermetic_and_byte_identical(tmp_path, no_network):
    start = time.perf_counter()
    outs = []
    for run in ("first", "second"):
        cfg = RunConfig(mode="REPLAY", cache_dir=str(FIXTURE_CACHE), corpus=str(FIXTURE_CORPUS),
                        output_dir=str(tmp_path / run)).validate()
        result = run_pipeline(cfg)
        assert len(result.claims) == 50
        assert result.manifest["network_calls"] == 0
        assert set(result.decisions) == set(Strategy)
        outs.append(tmp_path / run)
    for s in Strategy:
        first, second = (decisions_path(o, s).read_bytes() for o in outs)
        assert first == second and first.count(b"\n") == 50
    assert time.perf_counter() - start < 60.0


# -- 5. tuner recovery ------------------------------------------------------------------------


def _planted(n_per_class=1000, errors_per_step=150):
    def predict(alpha):
        m = round(abs(alpha - 0.6) * 10) * errors_per_step
        pos = [(N if i < m else V, V) for i in range(n_per_class)]
        neg = [(V if i < m else N, N) for i in range(n_per_class)]
        return pos + neg

    return predict


@pytest.mark.acceptance(5, "tuner recovery")
def test_tuner_recovers_planted_peak():
    grid = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8]
    first = tune_alpha(_planted(), grid, n_resamples=1000, seed=13)
    second = tune_alpha(_planted(), grid, n_resamples=1000, seed=13)
    assert first.chosen_alpha == 0.6
    f1 = dict(zip(first.grid, first.f1))
    assert f1[0.6] == max(f1.values())
    assert f1[0.3] < f1[0.4] < f1[0.5] < f1[0.6] > f1[0.7] > f1[0.8]
    assert max(first.std_error) < 0.02
    assert first.std_error == second.std_error and first.mean_f1 == second.mean_f1


# -- 6. K sweep ---------------------------------------------------------------------------------


@pytest.mark.acceptance(6, "K-sweep machinery")
def test_sweep_k_on_fixtures(tmp_path, no_network):
    out = tmp_path / "sweep"
    args = ["sweep-k", "--mode", "REPLAY", "--cache-dir", str(FIXTURE_CACHE), "--corpus", str(FIXTURE_CORPUS),
            "--output-dir", str(out)]
    result = CliRunner().invoke(main, args)
    assert result.exit_code == 0, result.output
    with (out / "k_sweep.csv").open() as fh:
        reader = csv.DictReader(fh)
        assert reader.fieldnames == ["k", "accuracy", "precision", "recall", "f1"]
        rows = list(reader)
    assert [int(r["k"]) for r in rows] == [1, 3, 5, 8, 10]
    for r in rows:
        for col in ("accuracy", "recall", "f1"):
            assert 0.0 <= float(r[col]) <= 1.0
    recall = [float(r["recall"]) for r in rows]
    assert all(a <= b for a, b in zip(recall, recall[1:])), recall
    root = ET.parse(out / "k_sweep.svg").getroot()
    assert root.tag.endswith("svg")


# -- 7. degenerate inputs ---------------------------------------------------------------------------

BY_ID = {w.id: w for w in WORLD}


def _live(ids, services):
    cfg = RunConfig(mode="LIVE", cache_dir="", search_engine_id="sim", workers=1, retries=0).validate()
    gw = make_gateway(cfg, client=mock_client(services), env=sim_env(), sleep=lambda s: None)
    return run_pipeline(cfg, [BY_ID[i].claim() for i in ids], gw, write=False)


@pytest.mark.acceptance(7, "degenerate-input suite")
def test_zero_entity_claim():
    result = _live(["c028"], SimulatedServices())
    c = result.manifest["counters"]
    assert (c["zero_entity_claims"], c["empty_pools"], c["snippets"], c["claim_errors"]) == (1, 1, 0, 0)
    assert result.pools[0].snippets == ()
    for rows in result.decisions.values():
        assert isinstance(rows[0], Decision) and rows[0].evidence_used == ()
    assert result.exit_code == 0


@pytest.mark.acceptance(7, "degenerate-input suite")
def test_empty_search_results():
    result = _live(["c027"], SimulatedServices())
    c = result.manifest["counters"]
    assert (c["zero_entity_claims"], c["empty_pools"], c["search_failures"]) == (0, 1, 0)
    [count] = result.pools[0].per_entity_counts
    assert count.count == 0 and not count.failed
    assert all(isinstance(rows[0], Decision) for rows in result.decisions.values())


@pytest.mark.acceptance(7, "degenerate-input suite")
def test_all_duplicate_urls():
    result = _live(["c019"], SimulatedServices())
    pool = result.pools[0]
    alias = next(c for c in pool.per_entity_counts if c.entity.surface == "Johns Hopkins")
    assert alias.count > 0
    assert not any(s.origin_entity == alias.entity for s in pool.snippets)
    assert result.manifest["counters"]["duplicate_urls_removed"] == alias.count
    assert len({s.url for s in pool.snippets}) == len(pool.snippets)


@pytest.mark.acceptance(7, "degenerate-input suite")
def test_unparseable_model_output():
    services = SimulatedServices(unparseable_claims=(BY_ID["c050"].text,))
    result = _live(["c050", "c046"], services)
    c = result.manifest["counters"]
    assert c["unparseable"] == len(Strategy)
    assert c["decisions"] == len(Strategy)
    assert result.exit_code == 1
    for rows in result.decisions.values():
        assert isinstance(rows[0], DecisionError) and rows[0].raw_model_output
        assert isinstance(rows[1], Decision)
    # one extraction call per claim, and each unparseable decision was retried once
    assert services.calls["chat"] == 2 + 2 * len(Strategy) + len(Strategy)


# -- 8. live mode -------------------------------------------------------------------------------------

LIVE_VARS = ("RAVE_LLM_API_KEY", "RAVE_EMBED_API_KEY", "RAVE_SEARCH_API_KEY", "RAVE_SEARCH_ENGINE_ID", "RAVE_LIVE_CORPUS")


@pytest.mark.acceptance(8, "live-mode table shape (documented, not asserted by CI)")
@pytest.mark.skipif(not all(os.environ.get(v) for v in LIVE_VARS), reason="live mode needs API keys and RAVE_LIVE_CORPUS")
def test_live_evaluate_shape(tmp_path):
    fmt = os.environ.get("RAVE_LIVE_CORPUS_FORMAT", "canonical")
    args = ["evaluate", "--mode", "LIVE", "--corpus", os.environ["RAVE_LIVE_CORPUS"], "--corpus-format", fmt,
            "--output-dir", str(tmp_path)]
    result = CliRunner().invoke(main, args)
    assert result.exit_code in (0, 1), result.output
    with (tmp_path / "results.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["strategy"] for r in rows] == [s.value for s in Strategy]
    assert all(r[m] for r in rows for m in ("accuracy", "precision", "recall", "f1"))
