"""Run one study from configs/studies/*.json: train every variant per seed, evaluate
it on a size ladder under each search, and write summary.json plus one SVG per search.

    python scripts/run_study.py configs/studies/aggregation_norm.json [--seeds 0 1] [--quick]
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from common import ROOT, deep_merge, gaps, ladder, log, test_sets, train_run
from ncopt.svg import gap_plot


def _mean_records(per_seed: list[list[dict]]) -> list[dict]:
    """Average gap records over seeds; the band spans the per-seed CI extremes."""
    out = []
    for group in zip(*per_seed):
        out.append({"n": group[0]["n"], "mean_gap": float(np.mean([r["mean_gap"] for r in group])),
                    "ci_low": min(r["ci_low"] for r in group), "ci_high": max(r["ci_high"] for r in group)})
    return out


def quick(study: dict) -> dict:
    """Shrink budgets for a smoke run."""
    s = json.loads(json.dumps(study))
    s["base"].update(epochs=1, samples_per_epoch=min(s["base"].get("samples_per_epoch", 1280), 1280),
                     baseline_eval_size=64)
    s["data"]["count"] = min(s["data"].get("count", 0), 512)
    s["eval"]["count"] = min(s["eval"]["count"], 16)
    s["eval"]["search"] = [x if x.get("strategy") != "beam" else {**x, "width": 4} for x in s["eval"]["search"]]
    for v in s["variants"]:
        if "data" in v:
            v["data"]["count"] = min(v["data"].get("count", 0), 512)
        v.get("override", {}).pop("epochs", None)
    return s


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("study", type=Path)
    ap.add_argument("--seeds", type=int, nargs="+")
    ap.add_argument("--out", type=Path)
    ap.add_argument("--quick", action="store_true", help="tiny budgets, for checking the pipeline")
    args = ap.parse_args(argv)
    study = json.loads(args.study.read_text())
    if args.quick:
        study = quick(study)
    seeds = args.seeds if args.seeds is not None else study.get("seeds", [0])
    out = args.out or ROOT / "runs" / (study["name"] + ("-quick" if args.quick else ""))
    ev = study["eval"]
    sets = test_sets(ev["sizes"], ev["count"], ev.get("seed", 0))
    summary = {"study": study["name"], "description": study.get("description", ""), "seeds": seeds,
               "variants": {}}
    for v in study["variants"]:
        per_seed = []
        for seed in seeds:
            cfg = deep_merge(study["base"], v.get("override", {}))
            cfg["seed"] = seed
            data = deep_merge(study.get("data", {}), v.get("data", {}))
            run_dir = out / v["label"] / f"seed{seed}"
            model = train_run(cfg, data, run_dir)
            searches = v.get("search", ev["search"])
            res = ladder(model, sets, searches)
            for steps in v.get("eval_steps", []):
                # recurrent encoders share weights across steps, so unrolling longer needs no new params
                unrolled = model.copy()
                unrolled.config.encoder.layers = steps
                res.update({f"{k}@{steps}": r for k, r in ladder(unrolled, sets, searches).items()})
            (run_dir / "ladder.json").write_text(json.dumps(res, indent=2))
            per_seed.append(res)
            log(f"{v['label']} seed {seed}: " + "; ".join(
                f"{k} " + " ".join(f"{n}:{g:.2f}" for n, g in gaps(recs).items()) for k, recs in res.items()))
        summary["variants"][v["label"]] = {
            "parameters": model.num_parameters(),
            "per_seed": {str(s): {k: gaps(r) for k, r in res.items()} for s, res in zip(seeds, per_seed)},
            "mean": {k: _mean_records([p[k] for p in per_seed]) for k in per_seed[0]}}
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    labels = sorted({k for v in summary["variants"].values() for k in v["mean"]})
    for search in labels:
        series = [(name, v["mean"][search]) for name, v in summary["variants"].items() if search in v["mean"]]
        (out / f"gap_{search}.svg").write_text(gap_plot(series, f"{study['name']} ({search})"))
    log(f"wrote {out / 'summary.json'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
