"""TSP instances, tours, k-NN sparsification and the dataset text format."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Segments

MIN_NODES = 4


@dataclass(frozen=True)
class TspInstance:
    coords: np.ndarray
    id: str | None = None

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 2:
            raise ValueError("coords must have shape (n, 2)")
        if c.shape[0] < MIN_NODES:
            raise ValueError(f"a TSP instance needs at least {MIN_NODES} nodes, got {c.shape[0]}")
        if np.any(c < 0) or np.any(c > 1):
            raise ValueError("coordinates must lie in the unit square")
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def distances(self) -> np.ndarray:
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        return np.sqrt((diff ** 2).sum(-1))


def sample_instance(n: int, rng: np.random.Generator, id: str | None = None) -> TspInstance:
    if n < MIN_NODES:
        raise ValueError(f"n must be >= {MIN_NODES}")
    return TspInstance(rng.random((n, 2)), id=id)


def sample_instances(n: int, count: int, rng: np.random.Generator) -> list[TspInstance]:
    return [sample_instance(n, rng) for _ in range(count)]


def check_tour(tour, n: int) -> np.ndarray:
    t = np.asarray(tour, dtype=np.int64)
    if t.shape != (n,) or not np.array_equal(np.sort(t), np.arange(n)):
        raise ValueError("tour is not a permutation of the nodes")
    return t


def tour_length(instance: TspInstance | np.ndarray, tour) -> float:
    coords = instance.coords if isinstance(instance, TspInstance) else np.asarray(instance)
    t = check_tour(tour, coords.shape[0])
    pts = coords[t]
    return float(np.sqrt(((pts - np.roll(pts, -1, axis=0)) ** 2).sum(-1)).sum())


def batch_tour_lengths(coords: np.ndarray, tours: np.ndarray) -> np.ndarray:
    """Lengths for coords (B, n, 2) and tours (B, n) or (B, R, n), unvalidated."""
    single = tours.ndim == 2
    if single:
        tours = tours[:, None]
    pts = coords[np.arange(coords.shape[0])[:, None, None], tours]
    lengths = np.sqrt(((pts - np.roll(pts, -1, axis=2)) ** 2).sum(-1)).sum(-1)
    return lengths[:, 0] if single else lengths


def canonical_tour(tour) -> np.ndarray:
    """Rotate to start at node 0 and orient so the second node has the lower index."""
    t = np.asarray(tour, dtype=np.int64)
    t = np.roll(t, -int(np.flatnonzero(t == 0)[0]))
    if len(t) > 2 and t[-1] < t[1]:
        t = np.concatenate([t[:1], t[1:][::-1]])
    return t


# ----------------------------------------------------------------------------
# sparsification
# ----------------------------------------------------------------------------

def parse_graph_mode(mode: str) -> tuple[str, float]:
    """``"full"``, ``"knn:<k>"`` or ``"fraction:<f>"``."""
    if mode == "full":
        return "full", 0.0
    kind, _, arg = mode.partition(":")
    if kind == "knn":
        k = int(arg)
        if k < 1:
            raise ValueError("fixed-degree k must be >= 1")
        return kind, k
    if kind == "fraction":
        f = float(arg)
        if not 0 < f <= 1:
            raise ValueError("fixed-fraction f must lie in (0, 1]")
        return kind, f
    raise ValueError(f"unknown graph mode {mode!r}")


def neighbor_count(n: int, mode: str) -> int:
    kind, arg = parse_graph_mode(mode)
    if kind == "full":
        return n - 1
    if kind == "knn":
        return min(int(arg), n - 1)
    # tolerate float noise such as 0.2 * 10 = 2.0000000000000004
    return min(max(1, math.ceil(arg * n - 1e-9)), n - 1)


@dataclass(frozen=True)
class SparseGraph:
    """Directed k-NN graph: row i lists the out-neighbours of node i in ascending index order."""
    neighbors: np.ndarray
    mode: str

    @property
    def n(self) -> int:
        return self.neighbors.shape[0]

    @property
    def degree(self) -> int:
        return self.neighbors.shape[1]

    def edges(self) -> np.ndarray:
        src = np.repeat(np.arange(self.n), self.degree)
        return np.stack([src, self.neighbors.reshape(-1)], axis=1)

    def has_edge(self, i: int, j: int) -> bool:
        return bool(np.any(self.neighbors[i] == j))

    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.n, self.n), dtype=bool)
        adj[np.repeat(np.arange(self.n), self.degree), self.neighbors.reshape(-1)] = True
        return adj


def knn_indices(dist: np.ndarray, k: int) -> np.ndarray:
    """Nearest ``k`` others per row of ``dist`` (B?, n, n); ties go to the lower index."""
    n = dist.shape[-1]
    d = dist.copy()
    idx = np.arange(n)
    d[..., idx, idx] = np.inf
    order = np.argsort(d, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def sparsify(instance: TspInstance, mode: str = "full") -> SparseGraph:
    k = neighbor_count(instance.n, mode)
    return SparseGraph(knn_indices(instance.distances(), k), mode)


@dataclass
class GraphBatch:
    """B instances of equal size flattened for message passing.

    Node ``i`` of instance ``b`` is row ``b * n + i``; edges are ordered by
    source row, then ascending neighbour index.
    """
    coords: np.ndarray
    neighbors: np.ndarray
    mode: str
    src: np.ndarray = field(init=False)
    dst: np.ndarray = field(init=False)
    dist: np.ndarray = field(init=False)
    segments: Segments = field(init=False)

    def __post_init__(self):
        b, n, k = self.neighbors.shape
        offset = (np.arange(b) * n)[:, None, None]
        self.src = (np.broadcast_to(np.arange(n)[None, :, None], (b, n, k)) + offset).reshape(-1)
        self.dst = (self.neighbors + offset).reshape(-1)
        flat = self.coords.reshape(-1, 2)
        self.dist = np.sqrt(((flat[self.src] - flat[self.dst]) ** 2).sum(-1))
        self.segments = Segments(self.src, b * n)

    @property
    def batch_size(self) -> int:
        return self.coords.shape[0]

    @property
    def n(self) -> int:
        return self.coords.shape[1]

    def graph(self, b: int) -> SparseGraph:
        return SparseGraph(self.neighbors[b], self.mode)

    def distance_matrix(self) -> np.ndarray:
        diff = self.coords[:, :, None, :] - self.coords[:, None, :, :]
        return np.sqrt((diff ** 2).sum(-1))


def make_batch(instances: Sequence[TspInstance] | np.ndarray, mode: str = "full") -> GraphBatch:
    coords = np.stack([i.coords for i in instances]) if not isinstance(instances, np.ndarray) \
        else np.asarray(instances, dtype=np.float64)
    n = coords.shape[1]
    diff = coords[:, :, None, :] - coords[:, None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    return GraphBatch(coords, knn_indices(dist, neighbor_count(n, mode)), mode)


def graph_batch_from(coords: np.ndarray, graphs: Sequence[SparseGraph]) -> GraphBatch:
    return GraphBatch(np.asarray(coords, dtype=np.float64), np.stack([g.neighbors for g in graphs]),
                      graphs[0].mode)


# ----------------------------------------------------------------------------
# dataset files
# ----------------------------------------------------------------------------

class DatasetFormatError(ValueError):
    pass


def quantize(coords: np.ndarray) -> np.ndarray:
    """Round coordinates to exactly what the dataset format stores."""
    c = np.asarray(coords, dtype=np.float64)
    return np.array([float(f"{v:.10g}") for v in c.reshape(-1)]).reshape(c.shape)


def format_line(instance: TspInstance, tour=None) -> str:
    parts = [f"{v:.10g}" for v in instance.coords.reshape(-1)]
    if tour is not None:
        t = check_tour(tour, instance.n) + 1
        parts.append("output")
        parts.extend(str(int(i)) for i in t)
        parts.append(str(int(t[0])))
    return " ".join(parts)


def parse_line(line: str, lineno: int = 0) -> tuple[TspInstance, np.ndarray | None]:
    tokens = line.split()
    where = f"line {lineno}"
    if "output" in tokens:
        cut = tokens.index("output")
        coord_tok, tour_tok = tokens[:cut], tokens[cut + 1:]
    else:
        coord_tok, tour_tok = tokens, None
    if len(coord_tok) % 2:
        raise DatasetFormatError(f"{where}: odd number of coordinate values")
    try:
        coords = np.array([float(v) for v in coord_tok]).reshape(-1, 2)
    except ValueError as exc:
        raise DatasetFormatError(f"{where}: malformed coordinate") from exc
    try:
        inst = TspInstance(coords, id=f"{lineno}")
    except ValueError as exc:
        raise DatasetFormatError(f"{where}: {exc}") from exc
    if tour_tok is None:
        return inst, None
    try:
        idx = [int(v) for v in tour_tok]
    except ValueError as exc:
        raise DatasetFormatError(f"{where}: malformed tour index") from exc
    if len(idx) != inst.n + 1:
        raise DatasetFormatError(f"{where}: tour has {len(idx)} entries, expected {inst.n + 1}")
    if idx[0] != idx[-1]:
        raise DatasetFormatError(f"{where}: tour not closed")
    if min(idx) < 1 or max(idx) > inst.n:
        raise DatasetFormatError(f"{where}: tour index out of range")
    try:
        tour = check_tour(np.array(idx[:-1]) - 1, inst.n)
    except ValueError as exc:
        raise DatasetFormatError(f"{where}: {exc}") from exc
    return inst, tour


def write_dataset(path, instances: Sequence[TspInstance], tours: Sequence | None = None) -> None:
    if tours is not None and len(tours) != len(instances):
        raise ValueError("need one tour per instance")
    with open(path, "w", encoding="utf-8") as fh:
        for k, inst in enumerate(instances):
            fh.write(format_line(inst, None if tours is None else tours[k]) + "\n")


def read_dataset(path) -> list[tuple[TspInstance, np.ndarray | None]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                out.append(parse_line(line, lineno))
    return out


def group_by_size(pairs: Iterable[tuple[TspInstance, np.ndarray | None]]) -> dict[int, list]:
    groups: dict[int, list] = {}
    for inst, tour in pairs:
        groups.setdefault(inst.n, []).append((inst, tour))
    return dict(sorted(groups.items()))


def ensure_parent(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p
