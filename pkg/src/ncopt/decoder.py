"""Solution decoding: non-autoregressive edge heatmaps and the autoregressive attention head.

Both heads are exposed to the search strategies through a *decoder context*:
an object with ``n``, ``coords`` and ``step_log_probs(first, last, visited)``
returning float64 log-probabilities of shape (B, R, n) for R partial tours per
instance, with ``-inf`` on disallowed nodes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import add_linear, attention, linear, merge_heads, split_heads
from .instances import GraphBatch, batch_tour_lengths

CLIP = 10.0
HEADS = 8
# log-probability charged for a NAR step leaving the sparse graph
FALLBACK_LOGP = float(np.log(1e-12))
_TINY = 1e-30


def init_ar_head(params: dict, d: int, rng: np.random.Generator, prefix: str = "dec") -> None:
    add_linear(params, f"{prefix}.W_C", 3 * d, d, rng, bias=False)
    for w in ("Wk", "Wv", "Wo"):
        add_linear(params, f"{prefix}.mha.{w}", d, d, rng, bias=False)
    add_linear(params, f"{prefix}.W_Q", d, d, rng, bias=False)
    add_linear(params, f"{prefix}.W_K", d, d, rng, bias=False)
    for slot in ("first", "last"):
        bound = 1.0 / np.sqrt(d)
        params[f"{prefix}.ph_{slot}"] = Tensor(rng.uniform(-bound, bound, d).astype(ad.default_dtype()),
                                               True, f"{prefix}.ph_{slot}")


def init_nar_head(params: dict, d: int, rng: np.random.Generator, prefix: str = "dec") -> None:
    add_linear(params, f"{prefix}.W1", 3 * d, d, rng)
    add_linear(params, f"{prefix}.W2", d, 2, rng)


def graph_embedding(h: Tensor, method: str = "mean") -> Tensor:
    """Pool node embeddings (B, n, d) into one vector per graph (B, d)."""
    if method == "mean":
        return ad.mean(h, axis=1)
    if method == "sum":
        return ad.sum_(h, axis=1)
    if method == "max":
        b, n, d = h.shape
        seg = ad.Segments(np.repeat(np.arange(b), n), b)
        return ad.segment_aggregate(ad.reshape(h, (b * n, d)), seg, "max")
    raise ValueError(f"unknown graph embedding {method!r}")


# ----------------------------------------------------------------------------
# non-autoregressive head
# ----------------------------------------------------------------------------

def nar_edge_logits(h: Tensor, h_graph: Tensor, batch: GraphBatch, params: dict,
                    prefix: str = "dec") -> Tensor:
    """Two-class logits (E, 2) for every sparse edge from ``[h_G, h_i, h_j]``."""
    edge_graph = batch.src // batch.n
    feats = ad.concat([ad.gather_rows(h_graph, edge_graph), ad.gather_rows(h, batch.src),
                       ad.gather_rows(h, batch.dst)], axis=-1)
    return linear(ad.relu(linear(feats, params, f"{prefix}.W1")), params, f"{prefix}.W2")


@dataclass
class Heatmap:
    """Edge probabilities of one instance; absent edges have probability 0."""
    n: int
    edges: np.ndarray
    probs: np.ndarray

    def dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        out[self.edges[:, 0], self.edges[:, 1]] = self.probs
        return out

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "edges": [
            {"i": int(i), "j": int(j), "p": float(p)} for (i, j), p in zip(self.edges, self.probs)]})

    @classmethod
    def from_json(cls, text: str) -> "Heatmap":
        obj = json.loads(text)
        edges = np.array([[e["i"], e["j"]] for e in obj["edges"]], dtype=np.int64).reshape(-1, 2)
        return cls(obj["n"], edges, np.array([e["p"] for e in obj["edges"]], dtype=np.float64))


def heatmaps(logits: Tensor, batch: GraphBatch) -> list[Heatmap]:
    p = ad.softmax(Tensor(logits.data.astype(np.float64)), axis=-1).data[:, 1]
    b, n = batch.batch_size, batch.n
    k = batch.neighbors.shape[2]
    out = []
    for g in range(b):
        sl = slice(g * n * k, (g + 1) * n * k)
        edges = np.stack([batch.src[sl] - g * n, batch.dst[sl] - g * n], axis=1)
        out.append(Heatmap(n, edges, p[sl]))
    return out


class NarContext:
    """Greedy/beam/sampling over a heatmap restricted to sparse edges.

    When the current node has no unvisited sparse neighbour the only allowed
    move is to the nearest unvisited node, scored ``FALLBACK_LOGP``.
    """

    def __init__(self, probs: np.ndarray, coords: np.ndarray, adjacency: np.ndarray):
        self.coords = np.asarray(coords, dtype=np.float64)
        self.n = self.coords.shape[1]
        self.adjacency = adjacency
        self.probs = np.where(adjacency, probs, 0.0)
        with np.errstate(divide="ignore"):
            self.log_p = np.where(adjacency, np.log(np.maximum(probs, _TINY)), -np.inf)
        diff = self.coords[:, :, None, :] - self.coords[:, None, :, :]
        self.dist = np.sqrt((diff ** 2).sum(-1))

    @classmethod
    def from_logits(cls, logits: Tensor, batch: GraphBatch) -> "NarContext":
        b, n = batch.batch_size, batch.n
        p = ad.softmax(Tensor(logits.data.astype(np.float64)), axis=-1).data[:, 1]
        probs = np.zeros((b, n, n))
        adj = np.zeros((b, n, n), dtype=bool)
        g = batch.src // n
        probs[g, batch.src % n, batch.dst % n] = p
        adj[g, batch.src % n, batch.dst % n] = True
        return cls(probs, batch.coords, adj)

    def step_log_probs(self, first, last, visited) -> np.ndarray:
        bidx = np.arange(self.coords.shape[0])[:, None]
        lp = np.where(visited, -np.inf, self.log_p[bidx, last])
        stuck = ~np.isfinite(lp).any(axis=-1)
        if stuck.any():
            d = np.where(visited, np.inf, self.dist[bidx, last])
            nearest = np.argmin(d, axis=-1)
            bb, rr = np.nonzero(stuck)
            lp[bb, rr, nearest[bb, rr]] = FALLBACK_LOGP
        return lp

    def fallback_steps(self, tours: np.ndarray) -> np.ndarray:
        """Count moves (excluding the closing edge) that leave the sparse graph."""
        bidx = np.arange(tours.shape[0]).reshape((-1,) + (1,) * (tours.ndim - 1))
        on = self.adjacency[bidx, tours[..., :-1], tours[..., 1:]]
        return (~on).sum(-1)


# ----------------------------------------------------------------------------
# autoregressive head
# ----------------------------------------------------------------------------

@dataclass
class ArFixed:
    """Per-instance decoder quantities computed once per rollout."""
    h: Tensor          # (B, n, d)
    h_graph: Tensor    # (B, d)
    glimpse_k: Tensor  # (B, M, n, d/M)
    glimpse_v: Tensor
    logit_k: Tensor    # (B, n, d)


def ar_precompute(h: Tensor, h_graph: Tensor, params: dict, heads: int = HEADS,
                  prefix: str = "dec") -> ArFixed:
    return ArFixed(h, h_graph,
                   split_heads(linear(h, params, f"{prefix}.mha.Wk"), heads),
                   split_heads(linear(h, params, f"{prefix}.mha.Wv"), heads),
                   linear(h, params, f"{prefix}.W_K"))


def _rows(vec: Tensor, b: int, r: int) -> Tensor:
    """Broadcast a (d,) or (B, d) tensor to (B, R, d)."""
    d = vec.shape[-1]
    zeros = Tensor(np.zeros((b, r, d), dtype=vec.dtype))
    return ad.add(zeros, vec if vec.ndim == 1 else ad.reshape(vec, (b, 1, d)))


def ar_step_logits(fixed: ArFixed, params: dict, first, last, visited: np.ndarray,
                   heads: int = HEADS, clip: float = CLIP, prefix: str = "dec") -> Tensor:
    """Clipped, masked compatibility logits (B, R, n) for R partial tours per instance.

    ``first``/``last`` are (B, R) node indices, or ``None`` for an empty partial
    tour, in which case the learned placeholders stand in.
    """
    b, n, d = fixed.h.shape
    r = visited.shape[1]
    if last is None:
        h_last = _rows(params[f"{prefix}.ph_last"], b, r)
        h_first = _rows(params[f"{prefix}.ph_first"], b, r)
    else:
        flat = ad.reshape(fixed.h, (b * n, d))
        base = (np.arange(b) * n)[:, None]
        h_last = ad.reshape(ad.gather_rows(flat, (base + last).reshape(-1)), (b, r, d))
        h_first = ad.reshape(ad.gather_rows(flat, (base + first).reshape(-1)), (b, r, d))
    ctx = linear(ad.concat([_rows(fixed.h_graph, b, r), h_last, h_first], axis=-1),
                 params, f"{prefix}.W_C")
    glimpse = merge_heads(attention(split_heads(ctx, heads), fixed.glimpse_k, fixed.glimpse_v))
    h_ctx = linear(glimpse, params, f"{prefix}.mha.Wo")
    q = linear(h_ctx, params, f"{prefix}.W_Q")
    compat = ad.scale(ad.matmul(q, ad.transpose(fixed.logit_k, (0, 2, 1))), 1.0 / np.sqrt(d))
    logits = ad.scale(ad.tanh(compat), clip)
    return ad.masked_fill(logits, visited, -np.inf)


class ArContext:
    def __init__(self, fixed: ArFixed, params: dict, coords: np.ndarray, heads: int = HEADS,
                 clip: float = CLIP, prefix: str = "dec"):
        self.fixed, self.params = fixed, params
        self.coords = np.asarray(coords, dtype=np.float64)
        self.n = self.coords.shape[1]
        self.heads, self.clip, self.prefix = heads, clip, prefix

    def logits(self, first, last, visited) -> np.ndarray:
        with ad.no_grad():
            return ar_step_logits(self.fixed, self.params, first, last, visited,
                                  self.heads, self.clip, self.prefix).data

    def step_log_probs(self, first, last, visited) -> np.ndarray:
        with ad.no_grad():
            z = ar_step_logits(self.fixed, self.params, first, last, visited,
                               self.heads, self.clip, self.prefix)
            return ad.log_softmax(Tensor(z.data.astype(np.float64)), axis=-1).data

    def fallback_steps(self, tours: np.ndarray) -> np.ndarray:
        return np.zeros(tours.shape[:-1], dtype=np.int64)


def ar_step(h, h_graph, partial_tour, visited_mask, params: dict, heads: int = HEADS,
            clip: float = CLIP, prefix: str = "dec") -> np.ndarray:
    """Next-node distribution (n,) for a single instance and partial tour."""
    h = h if isinstance(h, Tensor) else Tensor(h)
    h_graph = h_graph if isinstance(h_graph, Tensor) else Tensor(h_graph)
    visited = np.asarray(visited_mask, dtype=bool)
    if visited.all():
        raise ValueError("all nodes visited")
    with ad.no_grad():
        fixed = ar_precompute(ad.reshape(h, (1,) + h.shape), ad.reshape(h_graph, (1, -1)) if h_graph.ndim == 1
                              else h_graph, params, heads, prefix)
        if len(partial_tour) == 0:
            first = last = None
        else:
            first = np.array([[partial_tour[0]]])
            last = np.array([[partial_tour[-1]]])
        z = ar_step_logits(fixed, params, first, last, visited[None, None], heads, clip, prefix)
        return ad.softmax(Tensor(z.data.astype(np.float64)), axis=-1).data[0, 0]


# ----------------------------------------------------------------------------
# rollouts
# ----------------------------------------------------------------------------

@dataclass
class Rollout:
    tours: np.ndarray       # (B, R, n)
    step_logp: np.ndarray   # (B, R, n-1)
    lengths: np.ndarray     # (B, R)
    fallback: np.ndarray    # (B, R)

    @property
    def log_likelihood(self) -> np.ndarray:
        return self.step_logp.sum(-1)

    @property
    def step_probs(self) -> np.ndarray:
        return np.exp(self.step_logp)


def rollout(context, starts: np.ndarray, choose) -> Rollout:
    """Run n-1 selection steps from ``starts`` (B, R); ``choose`` maps log-probs to nodes."""
    starts = np.asarray(starts, dtype=np.int64)
    b, r = starts.shape
    n = context.n
    tours = np.zeros((b, r, n), dtype=np.int64)
    logp = np.zeros((b, r, max(n - 1, 0)))
    visited = np.zeros((b, r, n), dtype=bool)
    tours[..., 0] = starts
    np.put_along_axis(visited, starts[..., None], True, axis=-1)
    last = starts
    for t in range(1, n):
        lp = context.step_log_probs(starts, last, visited)
        nxt = choose(lp)
        logp[..., t - 1] = np.take_along_axis(lp, nxt[..., None], axis=-1)[..., 0]
        tours[..., t] = nxt
        np.put_along_axis(visited, nxt[..., None], True, axis=-1)
        last = nxt
    return Rollout(tours, logp, batch_tour_lengths(context.coords, tours), context.fallback_steps(tours))


def tour_log_likelihood(context, tours: np.ndarray) -> np.ndarray:
    """Score complete tours (B, R, n) step by step under ``context``."""
    b, r, n = tours.shape
    visited = np.zeros((b, r, n), dtype=bool)
    np.put_along_axis(visited, tours[..., :1], True, axis=-1)
    total = np.zeros((b, r))
    for t in range(1, n):
        lp = context.step_log_probs(tours[..., 0], tours[..., t - 1], visited)
        total += np.take_along_axis(lp, tours[..., t:t + 1], axis=-1)[..., 0]
        np.put_along_axis(visited, tours[..., t:t + 1], True, axis=-1)
    return total


def decode_rollout(context, starts=None, policy: str = "greedy",
                   rng: np.random.Generator | None = None) -> Rollout:
    """One rollout per instance from ``starts`` (default node 0)."""
    b = context.coords.shape[0]
    starts = np.zeros((b, 1), dtype=np.int64) if starts is None else np.asarray(starts).reshape(b, 1)
    if policy == "greedy":
        return rollout(context, starts, lambda lp: np.argmax(lp, axis=-1))
    if policy == "sample":
        rng = rng if rng is not None else np.random.default_rng(0)
        return rollout(context, starts, lambda lp: sample_from(lp, rng))
    raise ValueError(f"unknown policy {policy!r}")


def sample_from(log_probs: np.ndarray, rng: np.random.Generator, temperature: float = 1.0) -> np.ndarray:
    """Draw one index per leading position from (possibly unnormalised) log-probabilities."""
    if temperature == 0:
        return np.argmax(log_probs, axis=-1)
    z = log_probs / temperature
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(cdf.shape[:-1] + (1,)) * cdf[..., -1:]
    idx = (cdf <= u).sum(axis=-1)
    # guard against u landing exactly on the total mass
    idx = np.minimum(idx, log_probs.shape[-1] - 1)
    valid = np.isfinite(np.take_along_axis(log_probs, idx[..., None], axis=-1)[..., 0])
    if not valid.all():
        idx = np.where(valid, idx, np.argmax(log_probs, axis=-1))
    return idx
