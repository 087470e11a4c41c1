import numpy as np
import pytest
from numpy.testing import assert_allclose

from ncopt import autodiff as ad
from ncopt.autodiff import Tensor, grad_check
from ncopt.decoder import (CLIP, FALLBACK_LOGP, ArContext, Heatmap, NarContext, ar_precompute,
                           ar_step, ar_step_logits, decode_rollout, graph_embedding, heatmaps,
                           nar_edge_logits, sample_from, tour_log_likelihood)
from ncopt.instances import check_tour, make_batch
from ncopt.model import Model, default_config


def ar_model(d=16, seed=0):
    return Model.init(default_config("ar", d, layers=2), np.random.default_rng(seed))


def nar_model(d=16, seed=0, graph="fraction:0.2"):
    cfg = default_config("nar", d, layers=2)
    cfg.graph = graph
    return Model.init(cfg, np.random.default_rng(seed))


def test_ar_step_distribution():
    m = ar_model()
    r = np.random.default_rng(1)
    h, hg = m.embeddings(r.random((1, 9, 2)))
    visited = np.zeros(9, dtype=bool)
    visited[[0, 4, 5]] = True
    p = ar_step(h[0], hg[0], [0, 5, 4], visited, m.params)
    assert_allclose(p.sum(), 1.0)
    assert np.all(p[visited] == 0.0) and np.all(p[~visited] > 0)


def test_ar_empty_tour_uses_placeholders():
    m = ar_model()
    h, hg = m.embeddings(np.random.default_rng(1).random((1, 6, 2)))
    p0 = ar_step(h[0], hg[0], [], np.zeros(6, bool), m.params)
    m.params["dec.ph_first"].data += 1.0
    p1 = ar_step(h[0], hg[0], [], np.zeros(6, bool), m.params)
    assert_allclose(p0.sum(), 1.0)
    assert not np.allclose(p0, p1)
    with pytest.raises(ValueError):
        ar_step(h[0], hg[0], [0], np.ones(6, bool), m.params)


def test_uniform_when_logits_equal():
    m = ar_model()
    m.params["dec.W_Q.W"].data[:] = 0.0
    h, hg = m.embeddings(np.random.default_rng(2).random((1, 7, 2)))
    visited = np.zeros(7, dtype=bool)
    visited[[0, 3]] = True
    p = ar_step(h[0], hg[0], [0, 3], visited, m.params)
    assert_allclose(p[~visited], 1 / 5)


def test_logits_clipped():
    m = ar_model()
    for p in m.params.values():
        p.data *= 30.0
    r = np.random.default_rng(3)
    b = m.batch(r.random((4, 8, 2)))
    ctx = m.context(b)
    visited = np.zeros((4, 1, 8), dtype=bool)
    z = ar_step_logits(ctx.fixed, m.params, np.zeros((4, 1), int), np.zeros((4, 1), int), visited)
    assert np.abs(z.data).max() <= CLIP


def test_ar_logit_gradients(f64):
    r = np.random.default_rng(4)
    m = ar_model(16, 4)
    h = ad.Tensor(r.normal(size=(2, 5, 16)), True, "h")
    hg = ad.Tensor(r.normal(size=(2, 16)), True, "hg")
    visited = np.zeros((2, 2, 5), dtype=bool)
    visited[:, 0, [0, 2]] = True
    visited[:, 1, 1] = True
    first, last = np.array([[0, 1], [0, 1]]), np.array([[2, 1], [2, 1]])
    w = r.normal(size=(2, 2, 5))
    params = {**m.params, "h": h, "hg": hg}

    def frag(p):
        fixed = ar_precompute(p["h"], p["hg"], p)
        z = ar_step_logits(fixed, p, first, last, visited)
        return ad.sum_(ad.mul(ad.masked_fill(z, visited, 0.0), w))
    sub = {k: params[k] for k in ("h", "hg", "dec.W_C.W", "dec.mha.Wk.W", "dec.mha.Wo.W", "dec.W_K.W")}
    assert grad_check(lambda p: frag({**params, **p}), sub, max_entries=10, rng=r) < 1e-6


def test_nar_logit_gradients(f64):
    r = np.random.default_rng(5)
    m = nar_model(8, 5)
    batch = make_batch(r.random((2, 6, 2)), "knn:2")
    h = ad.Tensor(r.normal(size=(12, 8)), True, "h")
    hg = ad.Tensor(r.normal(size=(2, 8)), True, "hg")
    w = r.normal(size=(24, 2))
    params = {"h": h, "hg": hg, "dec.W1.W": m.params["dec.W1.W"], "dec.W2.W": m.params["dec.W2.W"],
              "dec.W1.b": m.params["dec.W1.b"]}
    frag = lambda p: ad.sum_(ad.mul(nar_edge_logits(p["h"], p["hg"], batch, {**m.params, **p}), w))
    assert grad_check(frag, params, max_entries=10, rng=r) < 1e-6


@pytest.mark.parametrize("method", ["mean", "sum", "max"])
def test_graph_embedding(method):
    h = np.random.default_rng(0).normal(size=(2, 4, 3))
    ref = {"mean": h.mean(1), "sum": h.sum(1), "max": h.max(1)}[method]
    assert_allclose(graph_embedding(Tensor(h), method).data, ref, rtol=1e-6)


def test_heatmap_json_round_trip():
    m = nar_model()
    b = m.batch(np.random.default_rng(0).random((2, 10, 2)))
    state, _, hg = m.embed(b)
    maps = heatmaps(m.nar_logits(state, hg, b), b)
    assert len(maps) == 2 and maps[0].edges.shape == (20, 2)
    back = Heatmap.from_json(maps[1].to_json())
    assert np.array_equal(back.edges, maps[1].edges)
    assert_allclose(back.probs, maps[1].probs)
    assert np.all((back.dense() >= 0) & (back.dense() <= 1))


def test_nar_fallback_to_nearest():
    coords = np.array([[[0.0, 0.0], [0.1, 0.0], [0.5, 0.5], [1.0, 1.0], [0.9, 1.0]]])
    adj = np.zeros((1, 5, 5), dtype=bool)
    adj[0, 0, 1] = adj[0, 1, 0] = True
    ctx = NarContext(np.full((1, 5, 5), 0.5), coords, adj)
    visited = np.zeros((1, 1, 5), dtype=bool)
    visited[0, 0, [0, 1]] = True
    lp = ctx.step_log_probs(np.array([[0]]), np.array([[1]]), visited)
    assert lp[0, 0, 2] == FALLBACK_LOGP
    assert np.isinf(lp[0, 0, [0, 1, 3, 4]]).all()
    r = decode_rollout(ctx)
    assert r.fallback[0, 0] == 3


def test_rollouts_valid_and_consistent():
    r = np.random.default_rng(6)
    for m in (ar_model(), nar_model()):
        b = m.batch(r.random((5, 12, 2)))
        ctx = m.context(b)
        for policy in ("greedy", "sample"):
            ro = decode_rollout(ctx, policy=policy, rng=r)
            for t in ro.tours[:, 0]:
                check_tour(t, 12)
            assert np.all(ro.tours[:, 0, 0] == 0)
            assert_allclose(tour_log_likelihood(ctx, ro.tours), ro.log_likelihood, atol=1e-9)
            assert np.all(ro.step_probs <= 1.0 + 1e-12)


def test_sample_from_respects_mask_and_temperature():
    r = np.random.default_rng(0)
    lp = np.log(np.array([[0.0, 0.2, 0.8, 0.0]]) + 1e-300)
    lp[0, [0, 3]] = -np.inf
    draws = np.array([sample_from(lp, r)[0] for _ in range(4000)])
    assert set(draws) <= {1, 2}
    assert abs((draws == 2).mean() - 0.8) < 0.03
    assert sample_from(lp, r, temperature=0)[0] == 2


def test_ar_context_probability_rows():
    m = ar_model()
    ctx = m.context(m.batch(np.random.default_rng(7).random((3, 6, 2))))
    assert isinstance(ctx, ArContext)
    visited = np.zeros((3, 2, 6), dtype=bool)
    visited[:, :, 0] = True
    lp = ctx.step_log_probs(np.zeros((3, 2), int), np.zeros((3, 2), int), visited)
    assert_allclose(np.exp(lp).sum(-1), 1.0)
    assert np.all(np.exp(lp[..., 0]) == 0.0)
