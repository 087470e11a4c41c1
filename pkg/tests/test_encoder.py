import numpy as np
import pytest
from numpy.testing import assert_allclose

from ncopt import autodiff as ad
from ncopt.autodiff import grad_check
from ncopt.encoder import (AGGREGATIONS, NORMALIZATIONS, VARIANTS, EmbeddingState, EncoderConfig,
                           encode, gnn_layer, init_embeddings, init_encoder_params, mlp_layer,
                           rgnn_step, transformer_layer)
from ncopt.instances import GraphBatch, make_batch
from ncopt.model import Model, default_config


def small(variant="gnn", d=8, **kw):
    return EncoderConfig(variant=variant, layers=2, hidden=d, heads=2, **kw)


def state_of(batch, params):
    return init_embeddings(batch, params)


def layer_fragment(kind, batch, cfg, buffers, w_h, w_e):
    def frag(p):
        st = state_of(batch, p)
        if kind == "gnn":
            st = gnn_layer(st, batch, p, "enc.L0", cfg.aggregation, cfg.normalization, buffers, True)
        elif kind == "mlp":
            st = mlp_layer(st, p, "enc.L0", cfg.normalization, buffers, True)
        elif kind == "transformer":
            st = transformer_layer(st, batch, p, "enc.L0", cfg.heads, cfg.normalization, buffers, True)
        else:
            st = rgnn_step(st, batch, p, "enc", cfg.aggregation)
        return ad.add(ad.sum_(ad.mul(ad.tanh(st.h), w_h)), ad.sum_(ad.mul(ad.tanh(st.e), w_e)))
    return frag


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("seed", range(3))
def test_layer_gradients(f64, variant, seed):
    r = np.random.default_rng(seed)
    cfg = small(variant, normalization="layernorm" if variant == "transformer" else "batchnorm-batch-stats",
                aggregation=AGGREGATIONS[seed % 3])
    params, buffers = init_encoder_params(cfg, r)
    batch = make_batch(r.random((2, 5, 2)), "full" if variant == "transformer" else "knn:3")
    w_h = r.normal(size=(10, 8))
    w_e = r.normal(size=(batch.src.size, 8))
    err = grad_check(layer_fragment(variant, batch, cfg, buffers, w_h, w_e), params, max_entries=6, rng=r)
    assert err < 1e-6


@pytest.mark.parametrize("norm", NORMALIZATIONS)
def test_gnn_normalizations_run(norm):
    cfg = small(normalization=norm)
    params, buffers = init_encoder_params(cfg, np.random.default_rng(0))
    batch = make_batch(np.random.default_rng(1).random((3, 6, 2)), "knn:2")
    st = encode(batch, cfg, params, buffers, training=True)
    assert st.h.shape == (18, 8) and st.e.shape == (36, 8)
    if norm == "batchnorm-learned":
        assert not np.allclose(buffers["enc.L0.norm_h"]["mean"], 0)


@pytest.mark.parametrize("variant", VARIANTS)
def test_permutation_equivariance(f64, variant):
    r = np.random.default_rng(3)
    cfg = small(variant, aggregation="sum")
    params, buffers = init_encoder_params(cfg, r)
    coords = r.random((1, 7, 2))
    perm = r.permutation(7)
    h1 = encode(make_batch(coords, "full"), cfg, params, buffers).h.data
    h2 = encode(make_batch(coords[:, perm], "full"), cfg, params, buffers).h.data
    assert np.abs(h1[perm] - h2).max() < 1e-5


def duplicated_batch(coords, dup: bool):
    n = coords.shape[1]
    nb = np.array([[(i + 1) % n, (i + 2) % n] for i in range(n)])
    if dup:
        nb = np.concatenate([nb, nb[:, :1]], axis=1)
    return GraphBatch(coords, nb[None], "knn:2")


def test_max_invariant_to_duplicate_neighbours_sum_is_not(f64):
    r = np.random.default_rng(4)
    coords = r.random((1, 6, 2))
    out = {}
    for agg in ("max", "sum"):
        cfg = EncoderConfig("gnn", layers=1, hidden=8, aggregation=agg, normalization="none")
        params, _ = init_encoder_params(cfg, np.random.default_rng(5))
        h = [encode(duplicated_batch(coords, d), cfg, params).h.data for d in (False, True)]
        out[agg] = np.abs(h[0] - h[1]).max()
    assert out["max"] < 1e-12
    assert out["sum"] > 1e-3


def test_rgnn_shares_weights_across_steps():
    cfg = EncoderConfig("rgnn", layers=2, hidden=8)
    params, buffers = init_encoder_params(cfg, np.random.default_rng(0))
    assert not any(".L" in k for k in params)
    batch = make_batch(np.random.default_rng(1).random((1, 6, 2)), "knn:2")
    a = encode(batch, cfg, params, buffers, steps=5).h.data
    b = encode(batch, cfg, params, buffers, steps=2).h.data
    assert a.shape == b.shape and not np.allclose(a, b)


def test_config_validation():
    for bad in (dict(variant="cnn"), dict(aggregation="min"), dict(normalization="group"), dict(layers=0)):
        with pytest.raises(ValueError):
            EncoderConfig(**bad)
    with pytest.raises(ValueError):
        EncoderConfig("transformer", hidden=10, heads=8)


def test_parameter_parity():
    ar = Model.init(default_config("ar", 128), np.random.default_rng(0)).num_parameters()
    nar = Model.init(default_config("nar", 128), np.random.default_rng(0)).num_parameters()
    for count in (ar, nar):
        assert abs(count - 350_000) <= 35_000, count


def test_encode_is_deterministic():
    cfg = small()
    params, buffers = init_encoder_params(cfg, np.random.default_rng(0))
    batch = make_batch(np.random.default_rng(1).random((2, 5, 2)), "knn:2")
    a = encode(batch, cfg, params, buffers).h.data
    b = encode(batch, cfg, params, buffers).h.data
    assert np.array_equal(a, b)
    assert isinstance(encode(batch, cfg, params, buffers), EmbeddingState)
