"""Qualitative generalization check, three seeds on TSP10.

* An SL model trained on TSP10 degrades monotonically (greedy gap non-decreasing)
  along the ladder {10, 15, 20, 30} in at least 2 of 3 seeds.
* The SL model's beam-128 gap beats its own greedy gap on TSP10 in at least 2 of 3 seeds.
* The RL model's greedy gap beats the SL greedy gap on TSP10 in at least 2 of 3 seeds.

    python scripts/generalization_check.py [--seeds 0 1 2] [--rl-epochs 40] [--rl-lr 3e-4]

Exits non-zero if any check fails.  Results go to runs/generalization/.
"""

from __future__ import annotations

import argparse
import json
import sys

from common import ROOT, gaps, ladder, log, test_sets, train_run

LADDER = (10, 15, 20, 30)
MODEL = {"decoder": "ar", "graph": "fraction:0.2",
         "encoder": {"variant": "gnn", "layers": 3, "hidden": 64, "aggregation": "max",
                     "normalization": "batchnorm-batch-stats"}}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--sl-count", type=int, default=20_000)
    ap.add_argument("--sl-epochs", type=int, default=5)
    ap.add_argument("--rl-epochs", type=int, default=40)
    ap.add_argument("--rl-lr", type=float, default=3e-4)
    ap.add_argument("--rl-samples", type=int, default=10_000, help="RL samples per epoch")
    ap.add_argument("--eval-count", type=int, default=100)
    args = ap.parse_args(argv)
    out = ROOT / "runs" / "generalization"
    sets = test_sets(LADDER, args.eval_count, seed=0)
    sl_cfg = {"paradigm": "sl", "model": MODEL, "epochs": args.sl_epochs, "batch_size": 128, "lr": 1e-4}
    rl_cfg = {"paradigm": "rl", "model": MODEL, "epochs": args.rl_epochs, "batch_size": 128, "lr": args.rl_lr,
              "n_min": 10, "n_max": 10, "samples_per_epoch": args.rl_samples, "baseline": "rollout",
              "baseline_eval_size": 1000}
    searches = [{"strategy": "greedy"}, {"strategy": "beam", "width": 128}]
    rows = []
    for seed in args.seeds:
        sl = train_run({**sl_cfg, "seed": seed}, {"sizes": [10], "count": args.sl_count, "seed": 1 + seed},
                       out / "sl" / f"seed{seed}")
        rl = train_run({**rl_cfg, "seed": seed}, None, out / "rl" / f"seed{seed}")
        sl_res = {k: gaps(v) for k, v in ladder(sl, sets, searches).items()}
        rl_res = {k: gaps(v) for k, v in ladder(rl, {10: sets[10]}, searches[:1]).items()}
        g = [sl_res["greedy"][n] for n in LADDER]
        row = {"seed": seed, "sl": sl_res, "rl": rl_res,
               "monotone": all(a <= b for a, b in zip(g, g[1:])),
               "beam_beats_greedy": sl_res["beam128"][10] < sl_res["greedy"][10],
               "rl_beats_sl_greedy": rl_res["greedy"][10] < sl_res["greedy"][10]}
        rows.append(row)
        log(f"seed {seed}: SL greedy ladder {[round(x, 2) for x in g]}, "
            f"SL beam128@10 {sl_res['beam128'][10]:.3f}, RL greedy@10 {rl_res['greedy'][10]:.3f}")
    need = 2 * len(rows) / 3
    checks = {k: sum(r[k] for r in rows) for k in ("monotone", "beam_beats_greedy", "rl_beats_sl_greedy")}
    ok = {k: v >= need for k, v in checks.items()}
    (out / "generalization.json").write_text(json.dumps({"rows": rows, "counts": checks, "pass": ok}, indent=2))
    for k, v in checks.items():
        print(f"{'PASS' if ok[k] else 'FAIL'} {k}: {v}/{len(rows)} seeds")
    return 0 if all(ok.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
