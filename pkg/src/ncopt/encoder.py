"""Graph embedding: input projections and the four encoder families.

Node embeddings are kept flat as (B*n, d) and edge embeddings as (E, d),
following the row layout of :class:`~ncopt.instances.GraphBatch`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .instances import GraphBatch

VARIANTS = ("gnn", "mlp", "transformer", "rgnn")
AGGREGATIONS = ("sum", "mean", "max")
NORMALIZATIONS = ("none", "batchnorm-learned", "batchnorm-batch-stats", "layernorm")


@dataclass
class EncoderConfig:
    variant: str = "gnn"
    layers: int = 3
    hidden: int = 128
    aggregation: str = "max"
    normalization: str = "batchnorm-batch-stats"
    heads: int = 8
    ff_mult: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown encoder variant {self.variant!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.layers < 1:
            raise ValueError("encoder needs at least one layer")
        if self.variant == "transformer" and self.hidden % self.heads:
            raise ValueError("hidden size must be divisible by the number of heads")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EmbeddingState:
    h: Tensor
    e: Tensor


# ----------------------------------------------------------------------------
# parameter helpers
# ----------------------------------------------------------------------------

def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(ad.default_dtype())


def add_linear(params: dict, name: str, fan_in: int, fan_out: int, rng, bias: bool = True) -> None:
    params[f"{name}.W"] = Tensor(_uniform(rng, (fan_in, fan_out), fan_in), True, f"{name}.W")
    if bias:
        params[f"{name}.b"] = Tensor(_uniform(rng, (fan_out,), fan_in), True, f"{name}.b")


def linear(x: Tensor, params: dict, name: str) -> Tensor:
    y = ad.matmul(x, params[f"{name}.W"])
    b = params.get(f"{name}.b")
    return y if b is None else ad.add(y, b)


def add_norm(params: dict, buffers: dict, name: str, kind: str, d: int) -> None:
    if kind == "none":
        return
    dt = ad.default_dtype()
    params[f"{name}.gamma"] = Tensor(np.ones(d, dt), True, f"{name}.gamma")
    params[f"{name}.beta"] = Tensor(np.zeros(d, dt), True, f"{name}.beta")
    if kind == "batchnorm-learned":
        buffers[name] = {"mean": np.zeros(d, dt), "var": np.ones(d, dt)}


def norm(x: Tensor, params: dict, buffers: dict | None, name: str, kind: str, training: bool) -> Tensor:
    if kind == "none":
        return x
    g, b = params[f"{name}.gamma"], params[f"{name}.beta"]
    if kind == "layernorm":
        return ad.layernorm(x, g, b)
    if kind == "batchnorm-batch-stats":
        return ad.batchnorm(x, g, b, mode="batch-stats")
    running = None if buffers is None else buffers.get(name)
    if running is None:
        raise KeyError(f"missing running statistics for {name}")
    return ad.batchnorm(x, g, b, mode="learned", running=running, training=training)


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator,
                        prefix: str = "enc") -> tuple[dict, dict]:
    """Create (params, buffers) for ``config``; names are prefixed by ``prefix``."""
    d, kind = config.hidden, config.normalization
    params: dict[str, Tensor] = {}
    buffers: dict[str, dict] = {}
    add_linear(params, f"{prefix}.in_node", 2, d, rng)
    add_linear(params, f"{prefix}.in_edge", 1, d, rng)
    if config.variant == "rgnn":
        p = f"{prefix}.R"
        add_linear(params, f"{p}.V", d, d, rng)
        add_linear(params, f"{p}.B", d, d, rng, bias=False)
        add_linear(params, f"{p}.C", d, d, rng, bias=False)
        for stream in ("node", "edge"):
            for gate in ("r", "z", "n"):
                add_linear(params, f"{p}.{stream}.x{gate}", d, d, rng)
                add_linear(params, f"{p}.{stream}.h{gate}", d, d, rng, bias=False)
                add_norm(params, buffers, f"{p}.{stream}.ln_{gate}", "layernorm", d)
        return params, buffers
    for l in range(config.layers):
        p = f"{prefix}.L{l}"
        if config.variant == "gnn":
            add_linear(params, f"{p}.U", d, d, rng)
            add_linear(params, f"{p}.V", d, d, rng)
            add_linear(params, f"{p}.A", d, d, rng)
            # B and C biases would duplicate the bias of A
            add_linear(params, f"{p}.B", d, d, rng, bias=False)
            add_linear(params, f"{p}.C", d, d, rng, bias=False)
            add_norm(params, buffers, f"{p}.norm_h", kind, d)
            add_norm(params, buffers, f"{p}.norm_e", kind, d)
        elif config.variant == "mlp":
            add_linear(params, f"{p}.U", d, d, rng)
            add_norm(params, buffers, f"{p}.norm_h", kind, d)
        else:
            for w in ("Wq", "Wk", "Wv", "Wo"):
                add_linear(params, f"{p}.{w}", d, d, rng, bias=False)
            add_linear(params, f"{p}.ff1", d, config.ff_mult * d, rng)
            add_linear(params, f"{p}.ff2", config.ff_mult * d, d, rng)
            add_norm(params, buffers, f"{p}.norm1", kind, d)
            add_norm(params, buffers, f"{p}.norm2", kind, d)
    return params, buffers


# ----------------------------------------------------------------------------
# layers
# ----------------------------------------------------------------------------

def init_embeddings(batch: GraphBatch, params: dict, prefix: str = "enc") -> EmbeddingState:
    dt = params[f"{prefix}.in_node.W"].dtype
    x = Tensor(batch.coords.reshape(-1, 2).astype(dt))
    dist = Tensor(batch.dist.reshape(-1, 1).astype(dt))
    return EmbeddingState(linear(x, params, f"{prefix}.in_node"), linear(dist, params, f"{prefix}.in_edge"))


def gated_messages(state: EmbeddingState, batch: GraphBatch, params: dict, name: str,
                   aggregation: str) -> Tensor:
    """``Aggr_j sigmoid(e_ij) * V h_j`` for every node i."""
    vh = linear(state.h, params, name)
    msg = ad.mul(ad.sigmoid(state.e), ad.gather_rows(vh, batch.dst))
    return ad.segment_aggregate(msg, batch.segments, aggregation)


def gnn_layer(state: EmbeddingState, batch: GraphBatch, params: dict, layer: str,
              aggregation: str, normalization: str, buffers: dict | None = None,
              training: bool = False) -> EmbeddingState:
    """Anisotropic edge-gated layer with residual node and edge streams."""
    h, e = state.h, state.e
    agg = gated_messages(state, batch, params, f"{layer}.V", aggregation)
    pre_h = ad.add(linear(h, params, f"{layer}.U"), agg)
    h_next = ad.add(h, ad.relu(norm(pre_h, params, buffers, f"{layer}.norm_h", normalization, training)))
    bh = linear(h, params, f"{layer}.B")
    ch = linear(h, params, f"{layer}.C")
    pre_e = ad.add(ad.add(linear(e, params, f"{layer}.A"), ad.gather_rows(bh, batch.src)),
                   ad.gather_rows(ch, batch.dst))
    e_next = ad.add(e, ad.relu(norm(pre_e, params, buffers, f"{layer}.norm_e", normalization, training)))
    return EmbeddingState(h_next, e_next)


def mlp_layer(state: EmbeddingState, params: dict, layer: str, normalization: str,
              buffers: dict | None = None, training: bool = False) -> EmbeddingState:
    pre = linear(state.h, params, f"{layer}.U")
    h_next = ad.add(state.h, ad.relu(norm(pre, params, buffers, f"{layer}.norm_h", normalization, training)))
    return EmbeddingState(h_next, state.e)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, n, d) -> (B, heads, n, d / heads)."""
    b, n, d = x.shape
    return ad.transpose(ad.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, m, n, k = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, m * k))


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over the last two axes."""
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(q.shape[-1]))
    return ad.matmul(ad.softmax(scores, axis=-1), v)


def transformer_layer(state: EmbeddingState, batch: GraphBatch, params: dict, layer: str,
                      heads: int, normalization: str, buffers: dict | None = None,
                      training: bool = False) -> EmbeddingState:
    """Multi-head self-attention over all nodes, then a feed-forward block (post-norm)."""
    b, n = batch.batch_size, batch.n
    d = state.h.shape[-1]
    x = ad.reshape(state.h, (b, n, d))
    q = split_heads(linear(x, params, f"{layer}.Wq"), heads)
    k = split_heads(linear(x, params, f"{layer}.Wk"), heads)
    v = split_heads(linear(x, params, f"{layer}.Wv"), heads)
    mha = linear(merge_heads(attention(q, k, v)), params, f"{layer}.Wo")
    h1 = norm(ad.reshape(ad.add(x, mha), (b * n, d)), params, buffers, f"{layer}.norm1", normalization, training)
    ff = linear(ad.relu(linear(h1, params, f"{layer}.ff1")), params, f"{layer}.ff2")
    h2 = norm(ad.add(h1, ff), params, buffers, f"{layer}.norm2", normalization, training)
    return EmbeddingState(h2, state.e)


def gru_cell(x: Tensor, h: Tensor, params: dict, name: str) -> Tensor:
    """GRU cell with LayerNorm on each gate pre-activation."""
    def gate(g):
        pre = ad.add(linear(x, params, f"{name}.x{g}"), linear(h, params, f"{name}.h{g}"))
        return ad.layernorm(pre, params[f"{name}.ln_{g}.gamma"], params[f"{name}.ln_{g}.beta"])

    r = ad.sigmoid(gate("r"))
    z = ad.sigmoid(gate("z"))
    cand_pre = ad.add(linear(x, params, f"{name}.xn"), ad.mul(r, linear(h, params, f"{name}.hn")))
    cand = ad.tanh(ad.layernorm(cand_pre, params[f"{name}.ln_n.gamma"], params[f"{name}.ln_n.beta"]))
    return ad.add(ad.mul(ad.sub(1.0, z), cand), ad.mul(z, h))


def rgnn_step(state: EmbeddingState, batch: GraphBatch, params: dict, prefix: str,
              aggregation: str) -> EmbeddingState:
    """One weight-shared recurrent message passing step (no residuals)."""
    p = f"{prefix}.R"
    agg = gated_messages(state, batch, params, f"{p}.V", aggregation)
    bh = linear(state.h, params, f"{p}.B")
    ch = linear(state.h, params, f"{p}.C")
    edge_in = ad.add(ad.gather_rows(bh, batch.src), ad.gather_rows(ch, batch.dst))
    return EmbeddingState(gru_cell(agg, state.h, params, f"{p}.node"),
                          gru_cell(edge_in, state.e, params, f"{p}.edge"))


def encode(batch: GraphBatch, config: EncoderConfig, params: dict, buffers: dict | None = None,
           training: bool = False, steps: int | None = None, prefix: str = "enc") -> EmbeddingState:
    """Input projections followed by ``config.layers`` layers of the configured variant.

    ``steps`` overrides the number of recurrent steps for the ``rgnn`` variant.
    """
    state = init_embeddings(batch, params, prefix)
    if config.variant == "rgnn":
        for _ in range(config.layers if steps is None else steps):
            state = rgnn_step(state, batch, params, prefix, config.aggregation)
        return state
    for l in range(config.layers):
        layer = f"{prefix}.L{l}"
        if config.variant == "gnn":
            state = gnn_layer(state, batch, params, layer, config.aggregation,
                              config.normalization, buffers, training)
        elif config.variant == "mlp":
            state = mlp_layer(state, params, layer, config.normalization, buffers, training)
        else:
            state = transformer_layer(state, batch, params, layer, config.heads,
                                      config.normalization, buffers, training)
    return state
