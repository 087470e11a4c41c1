"""Command-line entry point: ``python -m ncopt.cli <subcommand> ...``.

Every subcommand writes into ``--out`` together with ``manifest.json``; on any
failure the partial outputs are removed and the exit status is nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import subprocess
import sys
from pathlib import Path

from . import __version__

log = logging.getLogger("ncopt")

EXIT_VALIDATION = 2
EXIT_FAILURE = 1
SOLVERS = ("reference", "held-karp", "brute-force", "furthest", "nearest", "random", "furthest+2opt")


class ValidationError(Exception):
    pass


def _git_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("NCOPT_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ValidationError(f"NCOPT_SEED must be an integer, got {env!r}") from None


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{what} not found: {path}")
    return p


def _load_model(path):
    from .checkpoint import CheckpointError
    from .model import Model
    try:
        return Model.load(_need_file(path, "checkpoint"))
    except (CheckpointError, KeyError, ValueError) as exc:
        raise ValidationError(f"cannot load checkpoint {path}: {exc}") from None


def _read_pairs(path):
    from .instances import DatasetFormatError, read_dataset
    try:
        return read_dataset(_need_file(path, "dataset"))
    except DatasetFormatError as exc:
        raise ValidationError(str(exc)) from None


def _search_config(args):
    from .search import SearchConfig
    width = 1 if args.search == "greedy" else args.beam_width
    try:
        return SearchConfig(args.search, width, args.selection, args.seed_value, args.temperature)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


# ----------------------------------------------------------------------------
# subcommands; each returns the list of files written under out
# ----------------------------------------------------------------------------

def cmd_generate(args, out: Path) -> tuple[list[str], dict]:
    import numpy as np
    from .instances import write_dataset
    from .oracles import HELD_KARP_MAX, HEURISTIC, reference_tours

    if args.count < 1:
        raise ValidationError("--count must be >= 1")
    if any(n < 4 for n in args.sizes):
        raise ValidationError("sizes must be >= 4")
    if args.labeled and not args.heuristic_labels and max(args.sizes) > HELD_KARP_MAX:
        raise ValidationError(f"exact labels are limited to n <= {HELD_KARP_MAX}; pass --heuristic-labels")
    from .instances import TspInstance, quantize
    files, quality = [], {}
    for n in args.sizes:
        rng = np.random.default_rng([args.seed_value, n])
        # label the stored (rounded) coordinates, not the raw draws
        insts = [TspInstance(quantize(rng.random((n, 2))), id=f"tsp{n}-{k}") for k in range(args.count)]
        tours = None
        if args.labeled:
            refs = reference_tours(insts)
            tours = [r.tour for r in refs]
            quality[str(n)] = refs[0].quality
        name = f"tsp{n}.txt"
        write_dataset(out / name, insts, tours)
        files.append(name)
        log.info("wrote %d TSP%d instances to %s", args.count, n, name)
    extra = {"labels": quality if args.labeled else None, "heuristic_quality_tag": HEURISTIC}
    return files, extra


def _solve_one(inst, solver: str, rng):
    from .oracles import brute_force, insertion, two_opt
    if solver == "brute-force":
        return brute_force(inst).tour
    if solver == "furthest+2opt":
        return two_opt(inst, insertion(inst, "furthest"))
    return insertion(inst, solver, rng)


def cmd_solve(args, out: Path):
    import numpy as np
    from .instances import write_dataset
    from .oracles import BRUTE_FORCE_MAX, EXACT, HELD_KARP_MAX, HEURISTIC, held_karp_many, reference_tours

    pairs = _read_pairs(args.input)
    insts = [p[0] for p in pairs]
    nmax = max(i.n for i in insts) if insts else 0
    if args.solver == "held-karp" and nmax > HELD_KARP_MAX:
        raise ValidationError(f"held-karp supports n <= {HELD_KARP_MAX}")
    if args.solver == "brute-force" and nmax > BRUTE_FORCE_MAX:
        raise ValidationError(f"brute-force supports n <= {BRUTE_FORCE_MAX}")
    if args.solver in ("reference", "held-karp"):
        refs = reference_tours(insts) if args.solver == "reference" else held_karp_many(insts)
        tours = [r.tour for r in refs]
        quality = sorted({r.quality for r in refs})
    else:
        rng = np.random.default_rng(args.seed_value)
        tours = [_solve_one(i, args.solver, rng) for i in insts]
        quality = [EXACT if args.solver == "brute-force" else HEURISTIC]
    write_dataset(out / "tours.txt", insts, tours)
    return ["tours.txt"], {"quality": quality}


def cmd_train(args, out: Path):
    from .training import TrainConfig, train

    cfg_path = _need_file(args.config, "config")
    try:
        raw = json.loads(cfg_path.read_text())
        if args.epochs is not None:
            raw["epochs"] = args.epochs
        if args.seed is not None or "seed" not in raw:
            raw["seed"] = args.seed_value
        if raw.get("train_path") and not Path(raw["train_path"]).is_absolute():
            raw["train_path"] = str((cfg_path.parent / raw["train_path"]).resolve())
        config = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid training config: {exc}") from None
    data = None
    if config.paradigm == "sl":
        if not config.train_path:
            raise ValidationError("supervised training needs train_path in the config")
        data = _read_pairs(config.train_path)
        if any(t is None for _, t in data):
            raise ValidationError("supervised training needs labels for every instance")
    init = None
    if args.init:
        init, _ = _load_model(args.init)
    result = train(config, data, init_model=init, log_path=out / "train_log.jsonl",
                   checkpoint_dir=out / "checkpoints")
    result.model.save(out / "final.ckpt", {"train_config": config.to_dict(), "manifest": "manifest.json"})
    (out / "baseline_log.json").write_text(json.dumps(result.baseline_history, indent=2))
    files = ["final.ckpt", "train_log.jsonl", "baseline_log.json"]
    files += [str(Path(p).relative_to(out)) for p in result.checkpoints]
    return files, {"train_config": config.to_dict()}


def cmd_eval(args, out: Path):
    from .evaluation import evaluate, evaluate_model, heuristic_solver, sets_from_pairs

    if (args.checkpoint is None) == (args.solver is None):
        raise ValidationError("pass exactly one of --checkpoint or --solver")
    search = _search_config(args)
    pairs = []
    for p in args.testset:
        pairs += _read_pairs(p)
    try:
        sets = sets_from_pairs(pairs)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    if args.sizes:
        missing = set(args.sizes) - set(sets)
        if missing:
            raise ValidationError(f"no test instances for sizes {sorted(missing)}")
        sets = {n: sets[n] for n in args.sizes}
    if args.checkpoint is not None:
        model, _ = _load_model(args.checkpoint)
        report = evaluate_model(model, sets, search, Path(args.checkpoint).name, args.interval)
    else:
        rule, _, refine = args.solver.partition("+")
        if rule not in ("furthest", "nearest", "random"):
            raise ValidationError(f"unknown heuristic solver {args.solver!r}")
        report = evaluate(heuristic_solver(rule, bool(refine), args.seed_value), sets, args.solver,
                          args.interval, {"checkpoint": None, "seed": args.seed_value})
    report.meta["manifest"] = "manifest.json"
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    for r in report.records:
        log.info("n=%d gap=%.3f%% +- %.3f", r.n, r.mean_gap, r.ci_half_width)
    return ["report.json", "report.csv"], {}


def cmd_plot(args, out: Path):
    from .svg import gap_plot

    labels = args.labels or []
    if labels and len(labels) != len(args.reports):
        raise ValidationError("--labels must match --reports in number")
    series = []
    for k, path in enumerate(args.reports):
        try:
            d = json.loads(_need_file(path, "report").read_text())
            recs = d["records"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise ValidationError(f"{path}: not an evaluation report ({exc})") from None
        label = labels[k] if labels else (recs[0].get("search", Path(path).stem) if recs else Path(path).stem)
        series.append((label, recs))
    (out / "gap.svg").write_text(gap_plot(series, title=args.title))
    return ["gap.svg"], {}


def cmd_viz(args, out: Path):
    import numpy as np
    from .decoder import NarContext
    from .search import run_search
    from .svg import tour_plot

    pairs = _read_pairs(args.instance)
    if not 0 <= args.index < len(pairs):
        raise ValidationError(f"--index {args.index} out of range for {len(pairs)} instances")
    inst, ref = pairs[args.index]
    pred, probs = None, None
    if args.checkpoint:
        model, _ = _load_model(args.checkpoint)
        ctx = model.context(model.batch([inst]))
        if isinstance(ctx, NarContext):
            probs = ctx.probs[0]
        pred = run_search(ctx, _search_config(args)).tours[0]
    if args.show_reference_as_prediction and ref is not None:
        pred = ref
    svg = tour_plot(inst.coords, ref, pred, probs, title=args.title or f"instance {args.index} (n={inst.n})")
    (out / "viz.svg").write_text(svg)
    extra = {}
    if pred is not None:
        extra["predicted_tour"] = [int(x) for x in np.asarray(pred)]
    return ["viz.svg"], extra


def cmd_embed_stats(args, out: Path):
    import numpy as np
    from .evaluation import embedding_stats, pca2d

    model, _ = _load_model(args.checkpoint)
    by_size = {n: np.random.default_rng([args.seed_value, n]).random((args.count, n, 2)) for n in args.sizes}
    stats = embedding_stats(model, by_size)
    graphs = []
    labels = []
    for n, coords in by_size.items():
        graphs.append(model.embeddings(coords)[1])
        labels += [n] * len(coords)
    res = {"stats": {str(k): v for k, v in stats.items()}}
    allg = np.concatenate(graphs)
    if len(allg) >= 3:
        p = pca2d(allg)
        res["pca"] = {"explained_ratio": p.explained_ratio.tolist(), "sizes": labels,
                      "projection": p.projection.tolist()}
    res["manifest"] = "manifest.json"
    (out / "embedding_stats.json").write_text(json.dumps(res, indent=2))
    return ["embedding_stats.json"], {}


def cmd_active_search(args, out: Path):
    import numpy as np
    from .instances import write_dataset
    from .training import active_search

    model, _ = _load_model(args.checkpoint)
    if model.config.decoder != "ar":
        raise ValidationError("active search needs an AR checkpoint")
    pairs = _read_pairs(args.input)
    res = active_search(model, [p[0] for p in pairs], epochs=args.epochs, lr=args.lr,
                        batch_size=args.batch_size, seed=args.seed_value)
    write_dataset(out / "tours.txt", [p[0] for p in pairs], res.tours)
    (out / "history.json").write_text(json.dumps({"best_mean_per_epoch": res.history.mean(axis=1).tolist()}))
    log.info("active search mean length %.4f -> %.4f", res.history[0].mean(), res.history[-1].mean())
    return ["tours.txt", "history.json"], {"final_mean_length": float(np.mean(res.lengths))}


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------

def _add_search_flags(p):
    p.add_argument("--search", choices=("greedy", "beam", "sample"), default="greedy")
    p.add_argument("--beam-width", type=int, default=128, help="beam width or number of samples")
    p.add_argument("--selection", choices=("shortest-tour", "highest-probability"), default="shortest-tour")
    p.add_argument("--temperature", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ncopt", description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=None, help="default: $NCOPT_SEED, else 0")
    ap.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample uniform instances, optionally labelled")
    p.add_argument("--sizes", type=int, nargs="+", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--labeled", action="store_true")
    p.add_argument("--heuristic-labels", action="store_true", help="allow 2-opt labels above n=20")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("solve", help="solve a dataset with an oracle or heuristic")
    p.add_argument("--solver", choices=SOLVERS, default="reference")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train", help="train a policy from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--epochs", type=int, default=None, help="override the config")
    p.add_argument("--init", default=None, help="checkpoint to start from")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="optimality gaps of a checkpoint or heuristic")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--solver", default=None, help="heuristic instead of a model, e.g. furthest or furthest+2opt")
    p.add_argument("--testset", nargs="+", required=True)
    p.add_argument("--sizes", type=int, nargs="*", default=None)
    p.add_argument("--interval", choices=("mean", "percentile"), default="mean")
    _add_search_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="gap-vs-size SVG from evaluation reports")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--labels", nargs="*", default=None)
    p.add_argument("--title", default="Optimality gap vs size")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("viz", help="SVG of an instance with tours and heatmap")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--instance", required=True, help="dataset file")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--title", default=None)
    p.add_argument("--show-reference-as-prediction", action="store_true")
    _add_search_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("embed-stats", help="embedding norm/distance percentiles and PCA")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sizes", type=int, nargs="+", required=True)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed_stats)

    p = sub.add_parser("active-search", help="optimise a policy on the given instances")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_active_search)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_VALIDATION
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    out = Path(args.out)
    existed = out.exists()
    if existed and not out.is_dir():
        print(f"error: --out {out} is not a directory", file=sys.stderr)
        return EXIT_VALIDATION
    before = set(out.iterdir()) if existed else set()
    try:
        args.seed_value = _seed(args)
        out.mkdir(parents=True, exist_ok=True)
        files, extra = args.func(args, out)
        flags = {k: v for k, v in vars(args).items() if k not in ("func", "seed_value")}
        manifest = {"subcommand": args.command, "flags": flags, "seed": args.seed_value,
                    "version": _git_version(), "outputs": files, **extra}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
        return 0
    except BaseException as exc:
        _cleanup(out, existed, before)
        if isinstance(exc, ValidationError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
        if isinstance(exc, (KeyboardInterrupt, SystemExit)):
            raise
        log.exception("%s failed", args.command)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def _cleanup(out: Path, existed: bool, before: set) -> None:
    if not out.exists():
        return
    if not existed:
        shutil.rmtree(out, ignore_errors=True)
        return
    for p in set(out.iterdir()) - before:
        if p.is_dir():
            shutil.rmtree(p, ignore_errors=True)
        else:
            p.unlink(missing_ok=True)


if __name__ == "__main__":
    sys.exit(main())
