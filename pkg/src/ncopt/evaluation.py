"""Optimality-gap protocol across sizes, plus embedding-space diagnostics."""

from __future__ import annotations

import csv
import io
import json
import os
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .instances import TspInstance, batch_tour_lengths, check_tour
from .oracles import EXACT, HEURISTIC, insertion, reference_tours, two_opt

DEFAULT_SIZES = (5, 10, 15, 20, 30, 40, 50)
Z99 = 2.5758293035489004     # two-sided 99% normal quantile
PERCENTILES = (0, 5, 50, 95, 100)

# A solver maps coords (B, n, 2) to (tours (B, n), fallback counts (B,)).
Solver = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


def optimality_gap(pred, reference):
    """100 * (pred / reference - 1); works elementwise on arrays."""
    ref = np.asarray(reference, dtype=np.float64)
    if np.any(ref <= 0):
        raise ValueError("reference length must be positive")
    gap = 100.0 * (np.asarray(pred, dtype=np.float64) / ref - 1.0)
    return float(gap) if gap.ndim == 0 else gap


@dataclass
class TestSet:
    n: int
    instances: list[TspInstance]
    tours: np.ndarray          # (count, n) reference tours
    quality: str

    __test__ = False           # keep pytest from collecting this class

    def __post_init__(self):
        if not self.instances:
            raise ValueError(f"test set for n={self.n} is empty")
        if self.tours is None or len(self.tours) != len(self.instances):
            raise ValueError(f"test set for n={self.n} has no reference tours")
        self.tours = np.stack([check_tour(t, self.n) for t in self.tours])

    @property
    def coords(self) -> np.ndarray:
        return np.stack([i.coords for i in self.instances])

    @property
    def lengths(self) -> np.ndarray:
        return batch_tour_lengths(self.coords, self.tours)


def make_test_sets(sizes: Sequence[int], count: int, seed: int = 0) -> dict[int, TestSet]:
    """Fresh uniform instances with exact (n <= 20) or heuristic references."""
    out = {}
    for n in sizes:
        rng = np.random.default_rng([seed, n])
        insts = [TspInstance(rng.random((n, 2))) for _ in range(count)]
        refs = reference_tours(insts)
        out[n] = TestSet(n, insts, np.stack([r.tour for r in refs]), refs[0].quality)
    return out


def sets_from_pairs(pairs, quality: dict[int, str] | None = None) -> dict[int, TestSet]:
    """Build test sets from (instance, tour) pairs as returned by ``read_dataset``."""
    by_n: dict[int, list] = {}
    for inst, tour in pairs:
        if tour is None:
            raise ValueError(f"instance of size {inst.n} has no reference tour")
        by_n.setdefault(inst.n, []).append((inst, tour))
    quality = quality or {}
    return {n: TestSet(n, [p[0] for p in ps], np.stack([p[1] for p in ps]),
                       quality.get(n, EXACT if n <= 20 else HEURISTIC))
            for n, ps in sorted(by_n.items())}


# ----------------------------------------------------------------------------
# solvers
# ----------------------------------------------------------------------------

def model_solver(model, search, chunk: int = 256) -> Solver:
    from .search import run_search

    def solve(coords):
        tours, fb = [], []
        for s in range(0, len(coords), chunk):
            res = run_search(model.context(model.batch(coords[s:s + chunk])), search)
            tours.append(res.tours)
            fb.append(res.fallback)
        return np.concatenate(tours), np.concatenate(fb)
    return solve


def heuristic_solver(rule: str = "furthest", refine: bool = False, seed: int = 0) -> Solver:
    def solve(coords):
        rng = np.random.default_rng(seed)
        tours = []
        for c in coords:
            inst = TspInstance(c)
            t = insertion(inst, rule, rng)
            tours.append(two_opt(inst, t) if refine else t)
        return np.stack(tours), np.zeros(len(coords), dtype=np.int64)
    return solve


def fixed_solver(tours_by_size: dict[int, np.ndarray]) -> Solver:
    """Return precomputed tours; used to score reference tours themselves."""
    def solve(coords):
        return tours_by_size[coords.shape[1]], np.zeros(len(coords), dtype=np.int64)
    return solve


# ----------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------

@dataclass
class SizeRecord:
    n: int
    count: int
    mean_gap: float
    ci_half_width: float
    ci_low: float
    ci_high: float
    mean_length: float
    mean_reference_length: float
    quality: str
    search: str
    fallback_steps: int
    negative_gaps: int


@dataclass
class EvalReport:
    records: list[SizeRecord]
    meta: dict = field(default_factory=dict)

    CSV_FIELDS = tuple(SizeRecord.__dataclass_fields__)

    def record(self, n: int) -> SizeRecord:
        for r in self.records:
            if r.n == n:
                return r
        raise KeyError(n)

    def to_dict(self) -> dict:
        return {"meta": self.meta, "records": [asdict(r) for r in self.records]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls([SizeRecord(**r) for r in d["records"]], d.get("meta", {}))

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.records:
            w.writerow(asdict(r))
        return buf.getvalue()


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch is not None else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def confidence_interval(gaps: np.ndarray, mode: str = "mean") -> tuple[float, float]:
    """(low, high): a 99% normal interval of the mean, or the 0.5-99.5 percentile band."""
    gaps = np.asarray(gaps, dtype=np.float64)
    if mode == "mean":
        half = Z99 * gaps.std(ddof=1) / np.sqrt(len(gaps)) if len(gaps) > 1 else 0.0
        m = gaps.mean()
        return float(m - half), float(m + half)
    if mode == "percentile":
        lo, hi = np.percentile(gaps, [0.5, 99.5])
        return float(lo), float(hi)
    raise ValueError(f"unknown interval mode {mode!r}")


def evaluate(solver: Solver, test_sets: dict[int, TestSet], search: str = "greedy",
             interval: str = "mean", meta: dict | None = None) -> EvalReport:
    """Per-size gap statistics of ``solver`` against each test set's references."""
    records = []
    for n in sorted(test_sets):
        ts = test_sets[n]
        coords = ts.coords
        tours, fallback = solver(coords)
        for t in tours:
            check_tour(t, n)
        pred = batch_tour_lengths(coords, np.asarray(tours))
        ref = ts.lengths
        gaps = optimality_gap(pred, ref)
        if ts.quality == EXACT:
            if gaps.min() < -1e-9:
                raise AssertionError(f"tour shorter than an exact reference at n={n}")
            gaps = np.maximum(gaps, 0.0)
        lo, hi = confidence_interval(gaps, interval)
        records.append(SizeRecord(
            n=n, count=len(gaps), mean_gap=float(gaps.mean()), ci_half_width=(hi - lo) / 2,
            ci_low=lo, ci_high=hi, mean_length=float(pred.mean()), mean_reference_length=float(ref.mean()),
            quality=ts.quality, search=search, fallback_steps=int(np.sum(fallback)),
            negative_gaps=int((gaps < 0).sum())))
    m = {"timestamp": _timestamp(), "interval": interval, **(meta or {})}
    return EvalReport(records, m)


def evaluate_model(model, test_sets: dict[int, TestSet], search, checkpoint_id: str | None = None,
                   interval: str = "mean") -> EvalReport:
    return evaluate(model_solver(model, search), test_sets, search.label(), interval,
                    {"checkpoint": checkpoint_id, "seed": search.seed, "search": asdict(search)})


# ----------------------------------------------------------------------------
# embedding diagnostics
# ----------------------------------------------------------------------------

def _percentiles(values: np.ndarray) -> list[float] | None:
    if values.size == 0:
        return None
    return [float(v) for v in np.percentile(values, PERCENTILES)]


def _pairwise(x: np.ndarray) -> np.ndarray:
    """Upper-triangle Euclidean distances between rows of x (m, d)."""
    sq = (x ** 2).sum(-1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0)
    iu = np.triu_indices(len(x), k=1)
    return np.sqrt(d2[iu])


def embedding_summary(h: np.ndarray, hg: np.ndarray) -> dict:
    """Percentile summaries for node embeddings h (B, n, d) and graph embeddings hg (B, d)."""
    h = np.asarray(h, dtype=np.float64)
    hg = np.asarray(hg, dtype=np.float64)
    intra = np.concatenate([_pairwise(x) for x in h]) if len(h) else np.empty(0)
    return {"percentiles": list(PERCENTILES),
            "node_norm": _percentiles(np.linalg.norm(h, axis=-1).ravel()),
            "node_pairwise_distance": _percentiles(intra),
            "graph_norm": _percentiles(np.linalg.norm(hg, axis=-1)),
            "graph_pairwise_distance": _percentiles(_pairwise(hg))}


def embedding_stats(model, instances_by_size: dict[int, Sequence[TspInstance]]) -> dict[int, dict]:
    """Per size: percentiles of node norms, intra-graph node distances, graph norms
    and inter-graph distances (``None`` when the set is empty)."""
    out = {}
    for n in sorted(instances_by_size):
        coords = np.stack([i.coords if isinstance(i, TspInstance) else i for i in instances_by_size[n]])
        h, hg = model.embeddings(coords)
        out[n] = embedding_summary(h, hg)
    return out


@dataclass
class PcaResult:
    projection: np.ndarray        # (m, k), k = 2 unless rank-deficient
    components: np.ndarray        # (k, d)
    explained_ratio: np.ndarray   # (k,)
    mean: np.ndarray


def pca2d(x: np.ndarray) -> PcaResult:
    """Project mean-centred rows onto the top principal directions of the covariance."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) < 3:
        raise ValueError("PCA needs at least 3 embeddings")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (len(x) - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = evals.sum()
    rank = int((evals > 1e-12 * max(total, 1e-300)).sum())
    k = 2
    if rank < 2:
        warnings.warn("embeddings have rank < 2; returning a 1D projection", RuntimeWarning)
        k = 1
    comps = evecs[:, :k].T
    ratio = evals[:k] / total if total > 0 else np.zeros(k)
    return PcaResult(xc @ comps.T, comps, ratio, mu)
