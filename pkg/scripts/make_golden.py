"""Build the frozen golden fixtures under tests/golden/.

Exact (Held-Karp) test sets for TSP10/15/20 plus the furthest-insertion gaps
measured on them.  Run once; the test suite only reads the results.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from ncopt.evaluation import evaluate, heuristic_solver, sets_from_pairs
from ncopt.instances import TspInstance, quantize, read_dataset, write_dataset
from ncopt.oracles import held_karp_many

SIZES = (10, 15, 20)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "tests" / "golden"))
    ap.add_argument("--count", type=int, default=100)
    ap.add_argument("--seed", type=int, default=2024)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for n in SIZES:
        rng = np.random.default_rng([args.seed, n])
        insts = [TspInstance(quantize(rng.random((n, 2))), id=f"tsp{n}-{k}") for k in range(args.count)]
        refs = held_karp_many(insts)
        write_dataset(out / f"exact_tsp{n}.txt", insts, [r.tour for r in refs])
        print(f"TSP{n}: mean optimal length {np.mean([r.length for r in refs]):.6f}")
    pairs = [p for n in SIZES for p in read_dataset(out / f"exact_tsp{n}.txt")]
    report = evaluate(heuristic_solver("furthest"), sets_from_pairs(pairs), "furthest")
    gaps = {str(r.n): {"mean_gap": r.mean_gap, "mean_length": r.mean_length,
                       "mean_reference_length": r.mean_reference_length, "count": r.count}
            for r in report.records}
    (out / "furthest_insertion_gaps.json").write_text(json.dumps(
        {"seed": args.seed, "count": args.count, "sizes": gaps}, indent=2, sort_keys=True) + "\n")
    print(json.dumps(gaps, indent=2))


if __name__ == "__main__":
    main()
