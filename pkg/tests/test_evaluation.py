import csv
import io
import json
import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose

from ncopt.encoder import VARIANTS
from ncopt.evaluation import (EvalReport, TestSet, embedding_stats, embedding_summary, evaluate,
                              evaluate_model, fixed_solver, heuristic_solver, make_test_sets,
                              optimality_gap, pca2d, sets_from_pairs)
from ncopt.instances import TspInstance, read_dataset
from ncopt.model import Model, default_config
from ncopt.oracles import HEURISTIC
from ncopt.search import SearchConfig

from conftest import GOLDEN


def test_gap_arithmetic():
    assert optimality_gap(10.0, 10.0) == 0.0
    assert_allclose(optimality_gap(10.5, 10.0), 5.0)
    assert_allclose(optimality_gap(np.array([1.0, 3.0]), np.array([1.0, 2.0])), [0.0, 50.0])
    with pytest.raises(ValueError):
        optimality_gap(1.0, 0.0)


@pytest.fixture(scope="module")
def golden_sets():
    pairs = [p for n in (10, 15, 20) for p in read_dataset(GOLDEN / f"exact_tsp{n}.txt")]
    return sets_from_pairs(pairs)


def test_reference_tours_score_zero(golden_sets):
    rep = evaluate(fixed_solver({n: ts.tours for n, ts in golden_sets.items()}), golden_sets, "reference")
    for r in rep.records:
        assert r.mean_gap == 0.0 and r.ci_half_width == 0.0 and r.quality == "exact"


def test_furthest_insertion_golden_gaps(golden_sets):
    frozen = json.loads((GOLDEN / "furthest_insertion_gaps.json").read_text())["sizes"]
    rep = evaluate(heuristic_solver("furthest"), golden_sets, "furthest")
    for r in rep.records:
        assert_allclose(r.mean_gap, frozen[str(r.n)]["mean_gap"], rtol=1e-9)
        assert r.mean_gap > 0


def test_golden_references_are_optimal(golden_sets):
    from ncopt.oracles import brute_force, held_karp
    ts = golden_sets[10]
    for inst, tour in list(zip(ts.instances, ts.tours))[:3]:
        assert_allclose(held_karp(inst).length, brute_force(inst).length, atol=1e-9)
        assert_allclose(np.sum(np.linalg.norm(inst.coords[tour] - inst.coords[np.roll(tour, -1)], axis=1)),
                        held_karp(inst).length, atol=1e-9)


def test_report_fields_and_formats(golden_sets):
    sets = {10: golden_sets[10], 15: golden_sets[15]}
    rep = evaluate(heuristic_solver("nearest"), sets, "nearest", meta={"seed": 3})
    assert [r.n for r in rep.records] == [10, 15]
    for r in rep.records:
        assert r.ci_half_width >= 0 and r.ci_low <= r.mean_gap <= r.ci_high
        assert r.mean_gap >= 0
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert len(rows) == 2 and float(rows[0]["mean_gap"]) == rep.records[0].mean_gap
    back = EvalReport.from_json(rep.to_json())
    assert back.to_dict() == rep.to_dict()
    pct = evaluate(heuristic_solver("nearest"), sets, "nearest", interval="percentile")
    assert pct.records[0].ci_high - pct.records[0].ci_low > rep.records[0].ci_high - rep.records[0].ci_low


def test_reports_deterministic(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    sets = make_test_sets([6, 8], 4, seed=1)
    m = Model.init(default_config("ar", 16, layers=1), np.random.default_rng(0))
    a = evaluate_model(m, sets, SearchConfig("sample", 4, seed=2), "ck").to_json()
    b = evaluate_model(m, sets, SearchConfig("sample", 4, seed=2), "ck").to_json()
    assert a == b
    assert json.loads(a)["meta"]["timestamp"] == "2023-11-14T22:13:20Z"


def test_heuristic_reference_allows_negative_gap():
    r = np.random.default_rng(0)
    insts = [TspInstance(r.random((25, 2))) for _ in range(3)]
    bad = np.stack([r.permutation(25) for _ in insts])
    ts = {25: TestSet(25, insts, bad, HEURISTIC)}
    rep = evaluate(heuristic_solver("furthest", refine=True), ts, "furthest+2opt")
    assert rep.records[0].mean_gap < 0 and rep.records[0].negative_gaps == 3


def test_missing_references_rejected():
    inst = TspInstance(np.random.default_rng(0).random((6, 2)))
    with pytest.raises(ValueError):
        sets_from_pairs([(inst, None)])
    with pytest.raises(ValueError):
        TestSet(6, [], np.zeros((0, 6)), "exact")


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("decoder", ["ar", "nar"])
def test_configuration_matrix_smoke(variant, decoder):
    cfg = default_config(decoder, 16, layers=2, variant=variant)
    m = Model.init(cfg, np.random.default_rng(0))
    sets = make_test_sets([6], 2, seed=0)
    for search in (SearchConfig("greedy"), SearchConfig("beam", 4), SearchConfig("sample", 4)):
        rep = evaluate_model(m, sets, search)
        assert rep.records[0].count == 2 and np.isfinite(rep.records[0].mean_gap)


# ---------------------------------------------------------------- embeddings

def test_zero_parameters_give_zero_norms():
    m = Model.init(default_config("ar", 16, layers=2), np.random.default_rng(0))
    for p in m.params.values():
        p.data[:] = 0.0
    stats = embedding_stats(m, {8: np.random.default_rng(1).random((3, 8, 2))})[8]
    assert stats["node_norm"] == [0.0] * 5 and stats["graph_norm"] == [0.0] * 5


def test_percentiles_sorted_and_single_graph():
    m = Model.init(default_config("ar", 16, layers=2), np.random.default_rng(0))
    stats = embedding_stats(m, {6: np.random.default_rng(1).random((4, 6, 2)),
                                9: np.random.default_rng(2).random((1, 9, 2))})
    for key in ("node_norm", "node_pairwise_distance", "graph_norm", "graph_pairwise_distance"):
        v = stats[6][key]
        assert len(v) == 5 and all(a <= b for a, b in zip(v, v[1:]))
    assert stats[9]["graph_pairwise_distance"] is None
    assert embedding_summary(np.zeros((0, 3, 2)), np.zeros((0, 2)))["node_norm"] is None


def test_pca_exact_plane():
    r = np.random.default_rng(0)
    basis = np.linalg.qr(r.normal(size=(10, 2)))[0].T
    pts = r.normal(size=(40, 2)) @ (basis * np.array([[3.0], [1.0]])) + 5.0
    res = pca2d(pts)
    recon = res.projection @ res.components + res.mean
    assert np.abs(recon - pts).max() < 1e-10
    assert_allclose(res.projection.mean(0), 0.0, atol=1e-12)
    assert np.all((res.explained_ratio >= 0) & (res.explained_ratio <= 1))
    assert res.explained_ratio[0] >= res.explained_ratio[1]
    assert_allclose(res.explained_ratio.sum(), 1.0)


def test_pca_rank_deficient_and_errors():
    pts = np.outer(np.arange(5.0), np.ones(4))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        res = pca2d(pts)
    assert res.projection.shape == (5, 1) and any("rank" in str(x.message) for x in w)
    with pytest.raises(ValueError):
        pca2d(np.zeros((2, 3)))
