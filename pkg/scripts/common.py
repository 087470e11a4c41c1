"""Shared helpers for the experiment scripts: cached datasets, training runs, ladders."""

from __future__ import annotations

import copy
import json
import time
from pathlib import Path

import numpy as np

from ncopt.evaluation import TestSet, evaluate_model
from ncopt.instances import TspInstance, quantize, read_dataset, write_dataset
from ncopt.model import Model
from ncopt.oracles import EXACT, HEURISTIC, held_karp_many, insertion, two_opt
from ncopt.search import SearchConfig
from ncopt.training import TrainConfig, train

ROOT = Path(__file__).resolve().parent.parent
CACHE = ROOT / "runs" / "cache"
EXACT_LABEL_MAX = 14     # above this, training labels come from furthest insertion + 2-opt


def log(msg: str) -> None:
    print(f"[{time.strftime('%H:%M:%S')}] {msg}", flush=True)


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        out[k] = deep_merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _label(insts: list[TspInstance], exact_max: int) -> tuple[np.ndarray, str]:
    n = insts[0].n
    if n <= exact_max:
        return np.stack([s.tour for s in held_karp_many(insts)]), EXACT
    rng = np.random.default_rng(n)
    return np.stack([two_opt(i, insertion(i, "furthest", rng)) for i in insts]), HEURISTIC


def labelled(sizes, count: int, seed: int, exact_max: int = EXACT_LABEL_MAX) -> dict[int, tuple[list, np.ndarray, str]]:
    """``count`` instances per size with reference tours, cached under runs/cache."""
    CACHE.mkdir(parents=True, exist_ok=True)
    out = {}
    for n in sizes:
        path = CACHE / f"tsp{n}_c{count}_s{seed}_x{exact_max}.txt"
        quality = EXACT if n <= exact_max else HEURISTIC
        if path.exists():
            pairs = read_dataset(path)
            insts, tours = [p[0] for p in pairs], np.stack([p[1] for p in pairs])
        else:
            log(f"labelling {count} instances of size {n} ({quality})")
            rng = np.random.default_rng([seed, n])
            insts = [TspInstance(quantize(rng.random((n, 2)))) for _ in range(count)]
            tours, quality = _label(insts, exact_max)
            write_dataset(path, insts, tours)
        out[n] = (insts, tours, quality)
    return out


def training_pairs(sizes, count_per_size: int, seed: int) -> list:
    return [(i, t) for insts, tours, _ in labelled(sizes, count_per_size, seed).values()
            for i, t in zip(insts, tours)]


def test_sets(sizes, count: int, seed: int) -> dict[int, TestSet]:
    """Held-out sets with exact references up to n=20 (held out from every training seed)."""
    return {n: TestSet(n, insts, tours, q)
            for n, (insts, tours, q) in labelled(sizes, count, 10_000 + seed, exact_max=20).items()}


def train_run(cfg: dict, data_spec: dict | None, out: Path) -> Model:
    """Train one configuration; reuses ``out/final.ckpt`` if present."""
    ckpt = out / "final.ckpt"
    if ckpt.exists():
        return Model.load(ckpt)[0]
    out.mkdir(parents=True, exist_ok=True)
    cfg = dict(cfg)
    init = Model.load(ROOT / cfg.pop("init"))[0] if cfg.get("init") else None
    config = TrainConfig.from_dict(cfg)
    data = None
    if config.paradigm == "sl":
        data = training_pairs(data_spec["sizes"], data_spec["count"], data_spec.get("seed", 1))
    t0 = time.time()
    res = train(config, data, init_model=init, log_path=out / "train_log.jsonl")
    (out / "train_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    (out / "baseline_log.json").write_text(json.dumps(res.baseline_history, indent=2))
    res.model.save(ckpt, {"train_seconds": time.time() - t0})
    log(f"trained {out.relative_to(ROOT)} in {time.time() - t0:.0f}s")
    return res.model


def ladder(model: Model, sets: dict[int, TestSet], searches: list[dict]) -> dict[str, list[dict]]:
    """Per search label: list of per-size record dicts."""
    out = {}
    for s in searches:
        search = SearchConfig(**s)
        rep = evaluate_model(model, sets, search)
        out[search.label()] = [vars(r) for r in rep.records]
    return out


def gaps(records: list[dict]) -> dict[int, float]:
    return {r["n"]: r["mean_gap"] for r in records}
