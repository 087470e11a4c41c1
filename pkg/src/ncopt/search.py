"""Greedy, beam and sampling search over any decoder context."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import Rollout, rollout, sample_from
from .instances import batch_tour_lengths

STRATEGIES = ("greedy", "beam", "sample")
SELECTIONS = ("highest-probability", "shortest-tour")


@dataclass
class SearchConfig:
    strategy: str = "greedy"
    width: int = 1
    selection: str = "shortest-tour"
    seed: int = 0
    temperature: float = 1.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown search strategy {self.strategy!r}")
        if self.selection not in SELECTIONS:
            raise ValueError(f"unknown selection rule {self.selection!r}")
        if self.width < 1:
            raise ValueError("search width must be >= 1")
        if self.strategy == "greedy" and self.width != 1:
            raise ValueError("greedy search has width 1")

    def label(self) -> str:
        return "greedy" if self.strategy == "greedy" else f"{self.strategy}{self.width}"


@dataclass
class SearchResult:
    tours: np.ndarray      # (B, n)
    lengths: np.ndarray    # (B,)
    log_likelihood: np.ndarray
    fallback: np.ndarray   # (B,) steps that left the sparse graph


def _starts(context, starts) -> np.ndarray:
    b = context.coords.shape[0]
    return np.zeros(b, dtype=np.int64) if starts is None else np.asarray(starts, dtype=np.int64).reshape(b)


def _from_rollout(r: Rollout, pick: np.ndarray) -> SearchResult:
    rows = np.arange(r.tours.shape[0])
    return SearchResult(r.tours[rows, pick], r.lengths[rows, pick],
                        r.log_likelihood[rows, pick], r.fallback[rows, pick])


def greedy(context, starts=None) -> SearchResult:
    """Most probable next node at every step; ties go to the lowest index."""
    r = rollout(context, _starts(context, starts)[:, None], lambda lp: np.argmax(lp, axis=-1))
    return _from_rollout(r, np.zeros(r.tours.shape[0], dtype=np.int64))


def sample(context, width: int, rng: np.random.Generator, starts=None,
           temperature: float = 1.0) -> SearchResult:
    """``width`` independent rollouts per instance; keeps the shortest."""
    s = np.repeat(_starts(context, starts)[:, None], width, axis=1)
    r = rollout(context, s, lambda lp: sample_from(lp, rng, temperature))
    return _from_rollout(r, np.argmin(r.lengths, axis=1))


def beam(context, width: int, selection: str = "shortest-tour", starts=None,
         return_beam: bool = False):
    """Breadth-first beam search keeping the ``width`` most probable partial tours.

    Candidates are ranked by cumulative log-probability, then by the step
    log-probability, then lexicographically by partial tour.  The final answer
    is either the top-ranked tour or the shortest tour in the final beam.
    With ``return_beam`` the full final beam is returned too; when fewer
    than ``width`` tours exist, trailing entries scored ``-inf`` are padding.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    if selection not in SELECTIONS:
        raise ValueError(f"unknown selection rule {selection!r}")
    st = _starts(context, starts)
    b, n = st.shape[0], context.n
    tours = st[:, None, None].copy()                    # (B, W, t)
    score = np.zeros((b, 1))
    visited = np.zeros((b, 1, n), dtype=bool)
    visited[np.arange(b), 0, st] = True
    first = st[:, None]
    for t in range(1, n):
        w = tours.shape[1]
        lp = context.step_log_probs(np.broadcast_to(first, (b, w)), tours[..., -1], visited)
        cand = (score[..., None] + lp).reshape(b, w * n)
        step = lp.reshape(b, w * n)
        # lexicographic rank of each parent tour within its instance
        order = np.lexsort(tuple(tours[..., c] for c in range(tours.shape[2] - 1, -1, -1)), axis=-1)
        lex = np.empty_like(order)
        np.put_along_axis(lex, order, np.arange(w)[None].repeat(b, 0), axis=-1)
        parent_lex = np.repeat(lex, n, axis=1)
        node = np.tile(np.arange(n), (b, w))
        keys = (node, parent_lex, -step, -cand)
        ranked = np.lexsort(keys, axis=-1)
        valid_count = int(np.isfinite(cand).sum(axis=1).max())
        keep = ranked[:, :max(1, min(width, valid_count))]
        parent, nxt = keep // n, keep % n
        score = np.take_along_axis(cand, keep, axis=1)
        tours = np.concatenate([np.take_along_axis(tours, parent[..., None], axis=1), nxt[..., None]], axis=2)
        visited = np.take_along_axis(visited, parent[..., None], axis=1).copy()
        np.put_along_axis(visited, nxt[..., None], True, axis=-1)
    alive = np.isfinite(score)
    lengths = np.where(alive, batch_tour_lengths(context.coords, tours), np.inf)
    if selection == "highest-probability":
        pick = np.zeros(b, dtype=np.int64)
    else:
        pick = np.argmin(lengths, axis=1)
    rows = np.arange(b)
    res = SearchResult(tours[rows, pick], lengths[rows, pick], score[rows, pick],
                       context.fallback_steps(tours)[rows, pick])
    if return_beam:
        return res, tours, score
    return res


def run_search(context, config: SearchConfig, starts=None) -> SearchResult:
    if config.strategy == "greedy":
        return greedy(context, starts)
    if config.strategy == "beam":
        return beam(context, config.width, config.selection, starts)
    return sample(context, config.width, np.random.default_rng(config.seed), starts, config.temperature)
