"""Exact and heuristic TSP solvers used as references and baselines."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .instances import TspInstance, check_tour, tour_length

EXACT = "exact"
HEURISTIC = "heuristic-refined"
BRUTE_FORCE_MAX = 10
HELD_KARP_MAX = 20


@dataclass(frozen=True)
class ReferenceSolution:
    tour: np.ndarray
    length: float
    quality: str


def brute_force(instance: TspInstance) -> ReferenceSolution:
    """Enumerate every tour with node 0 fixed first."""
    n = instance.n
    if n > BRUTE_FORCE_MAX:
        raise ValueError(f"brute force limited to n <= {BRUTE_FORCE_MAX}")
    d = instance.distances()
    perms = np.array(list(itertools.permutations(range(1, n))), dtype=np.int64)
    tours = np.concatenate([np.zeros((len(perms), 1), dtype=np.int64), perms], axis=1)
    lengths = d[tours, np.roll(tours, -1, axis=1)].sum(axis=1)
    best = int(np.argmin(lengths))
    return ReferenceSolution(tours[best], tour_length(instance, tours[best]), EXACT)


def held_karp_batch(dist: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bitmask DP over subsets of nodes 1..n-1, vectorised across a batch.

    ``dist`` has shape (B, n, n).  Returns (lengths (B,), tours (B, n)).  The
    state ``cost[S, j]`` is the shortest path from node 0 through subset S
    ending at node j+1; ties resolve to the lowest predecessor index.
    """
    dist = np.asarray(dist, dtype=np.float64)
    b, n, _ = dist.shape
    if n > HELD_KARP_MAX:
        raise ValueError(f"Held-Karp limited to n <= {HELD_KARP_MAX}")
    m = n - 1
    inner = dist[:, 1:, 1:]
    full = (1 << m) - 1
    cost = np.full((b, 1 << m, m), np.inf)
    parent = np.zeros((b, 1 << m, m), dtype=np.int8)
    bits = 1 << np.arange(m)
    cost[:, bits, np.arange(m)] = dist[:, 0, 1:]
    masks = np.arange(1 << m)
    popcount = np.zeros(1 << m, dtype=np.int64)
    for j in range(m):
        popcount += (masks >> j) & 1
    for size in range(2, m + 1):
        layer = masks[popcount == size]
        for j in range(m):
            sel = layer[(layer >> j) & 1 == 1]
            prev = sel ^ (1 << j)
            cand = cost[:, prev, :] + inner[:, None, :, j]
            k = np.argmin(cand, axis=2)
            cost[:, sel, j] = np.take_along_axis(cand, k[..., None], axis=2)[..., 0]
            parent[:, sel, j] = k
    closing = cost[:, full, :] + dist[:, 1:, 0]
    last = np.argmin(closing, axis=1)
    lengths = closing[np.arange(b), last]
    tours = np.zeros((b, n), dtype=np.int64)
    for row in range(b):
        mask, j = full, int(last[row])
        for pos in range(n - 1, 0, -1):
            tours[row, pos] = j + 1
            nxt = int(parent[row, mask, j])
            mask ^= 1 << j
            j = nxt
    return lengths, tours


def held_karp(instance: TspInstance) -> ReferenceSolution:
    if instance.n > HELD_KARP_MAX:
        raise ValueError(f"Held-Karp limited to n <= {HELD_KARP_MAX}")
    _, tours = held_karp_batch(instance.distances()[None])
    return ReferenceSolution(tours[0], tour_length(instance, tours[0]), EXACT)


def held_karp_many(instances, chunk: int | None = None) -> list[ReferenceSolution]:
    """Held-Karp over many same-size instances, batched to bound memory."""
    if not instances:
        return []
    n = instances[0].n
    if chunk is None:
        chunk = max(1, int(2e6 // ((1 << (n - 1)) * (n - 1))))
    out = []
    for start in range(0, len(instances), chunk):
        part = instances[start:start + chunk]
        _, tours = held_karp_batch(np.stack([i.distances() for i in part]))
        out.extend(ReferenceSolution(t, tour_length(i, t), EXACT) for i, t in zip(part, tours))
    return out


def insertion(instance: TspInstance, rule: str = "furthest", rng: np.random.Generator | None = None) -> np.ndarray:
    """Insertion construction.

    ``furthest`` / ``nearest`` pick the node whose distance to its nearest tour
    node is largest / smallest and start from the mutually furthest / nearest
    pair; ``random`` picks nodes in a random order.  Each node is inserted at
    the position of least added length, ties to the earliest position.
    """
    if rule not in ("furthest", "nearest", "random"):
        raise ValueError(f"unknown insertion rule {rule!r}")
    d = instance.distances()
    n = instance.n
    if rule == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        order = rng.permutation(n)
        tour = [int(order[0]), int(order[1])]
    else:
        masked = d + np.where(np.eye(n, dtype=bool), -np.inf if rule == "furthest" else np.inf, 0)
        flat = np.argmax(masked) if rule == "furthest" else np.argmin(masked)
        tour = sorted(divmod(int(flat), n))
        order = None
    in_tour = np.zeros(n, dtype=bool)
    in_tour[tour] = True
    near = d[:, tour].min(axis=1)
    step = 2
    while len(tour) < n:
        if rule == "random":
            k = int(order[step])
        else:
            free = np.flatnonzero(~in_tour)
            vals = near[free]
            k = int(free[np.argmax(vals) if rule == "furthest" else np.argmin(vals)])
        t = np.array(tour)
        nxt = np.roll(t, -1)
        added = d[t, k] + d[k, nxt] - d[t, nxt]
        pos = int(np.argmin(added))
        tour.insert(pos + 1, k)
        in_tour[k] = True
        near = np.minimum(near, d[:, k])
        step += 1
    return np.array(tour, dtype=np.int64)


def two_opt(instance: TspInstance, tour, max_passes: int | None = None,
            trace: list | None = None, tol: float = 1e-12) -> np.ndarray:
    """First-improvement 2-opt over positions (i ascending, then j).

    One pass scans every i; a move found at (i, j) is applied immediately and
    scanning continues at the same i.  Stops at a local optimum or after
    ``max_passes``.  Lengths after each pass are appended to ``trace``.
    """
    d = instance.distances()
    t = check_tour(tour, instance.n).copy()
    n = len(t)
    passes = 0
    if trace is not None:
        trace.append(tour_length(instance, t))
    while max_passes is None or passes < max_passes:
        improved = False
        for i in range(n - 2):
            while True:
                j = np.arange(i + 2, n if i > 0 else n - 1)
                if j.size == 0:
                    break
                a, b = t[i], t[i + 1]
                c, e = t[j], t[(j + 1) % n]
                delta = d[a, c] + d[b, e] - d[a, b] - d[c, e]
                hits = np.flatnonzero(delta < -tol)
                if hits.size == 0:
                    break
                jj = int(j[hits[0]])
                t[i + 1:jj + 1] = t[i + 1:jj + 1][::-1]
                improved = True
        passes += 1
        if trace is not None:
            trace.append(tour_length(instance, t))
        if not improved:
            break
    return t


def reference_tour(instance: TspInstance) -> ReferenceSolution:
    """Exact Held-Karp up to n=20, otherwise 2-opt refined furthest insertion."""
    if instance.n <= HELD_KARP_MAX:
        return held_karp(instance)
    t = two_opt(instance, insertion(instance, "furthest"))
    return ReferenceSolution(t, tour_length(instance, t), HEURISTIC)


def reference_tours(instances) -> list[ReferenceSolution]:
    by_size: dict[int, list[int]] = {}
    for k, inst in enumerate(instances):
        by_size.setdefault(inst.n, []).append(k)
    out: list[ReferenceSolution | None] = [None] * len(instances)
    for n, idx in by_size.items():
        group = [instances[k] for k in idx]
        sols = held_karp_many(group) if n <= HELD_KARP_MAX else [reference_tour(i) for i in group]
        for k, s in zip(idx, sols):
            out[k] = s
    return out
