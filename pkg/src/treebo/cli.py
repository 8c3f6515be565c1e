"""Command-line interface: validate, sample, run, benchmark, meta-train, report.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
TREEBO_OUT_ROOT sets the default parent for output directories.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from treebo import bench
from treebo import driver as drv
from treebo import spacedsl as sd
from treebo.encoder import DESK_CONFIG, EncoderConfig

logger = logging.getLogger(__name__)

BUILTIN_SPACES = ("simulation", "simulation_bench", "svm", "xgboost", "cash", "nas")


class UsageError(ValueError):
    pass


def _load_space(ref: str) -> tuple:
    """A space from a file path or a builtin name; returns (space, path-or-None)."""
    p = Path(ref)
    if p.exists():
        return sd.load_space(p), str(p)
    if ref in BUILTIN_SPACES:
        path = sd.builtin_space_path(ref)
        return sd.parse_space(path.read_text(encoding="utf-8")), str(path)
    raise UsageError(
        f"space {ref!r} is neither a readable file nor a builtin "
        f"(builtins: {', '.join(BUILTIN_SPACES)})"
    )


def _resolve_objective(spec: str):
    """objective spec -> (callable, known optimum or None)."""
    if spec == "builtin:jenatton":
        return bench.jenatton_eval, bench.JENATTON_OPTIMUM
    if spec.startswith("cmd:"):
        return drv.CommandObjective(spec[4:]), None
    raise UsageError(
        f"unknown objective {spec!r}; expected 'builtin:jenatton' or 'cmd:<command>'"
    )


def _encoder_from_args(args) -> EncoderConfig:
    cfg = EncoderConfig() if args.encoder == "paper" else DESK_CONFIG
    overrides = {}
    if args.no_structure_emb:
        overrides["use_structure_embeddings"] = False
    if args.pooling:
        overrides["pooling"] = {"avg": "average", "token": "token_mixer"}[args.pooling]
    if overrides:
        cfg = EncoderConfig(**{**cfg.to_dict(), **overrides})
    return cfg


def _out_dir(arg: str | None, default_name: str) -> str:
    if arg:
        return arg
    root = os.environ.get("TREEBO_OUT_ROOT", "runs")
    return str(Path(root) / default_name)


# ---------------------------------------------------------------------------
# subcommands

def cmd_validate(args) -> int:
    space, _ = _load_space(args.space)
    print(f"valid: {len(space.subspaces)} subspaces, {space.n_names} hyperparameters")
    print(f"{'id':>4}  {'dim':>4}  decisions")
    for sub in space.subspaces:
        decisions = ", ".join(f"{k}={v}" for k, v in sub.decisions.items()) or "-"
        print(f"{sub.id:>4}  {sub.dimension:>4}  {decisions}")
    return 0


def cmd_sample(args) -> int:
    space, _ = _load_space(args.space)
    rng = np.random.default_rng(args.seed)
    for i in range(args.count):
        sid = args.subspace or (1 + int(rng.integers(len(space.subspaces))))
        config = sd.sample_with_rng(space, sid, rng)
        print(sd.serialize_config(config))
    return 0


def cmd_run(args) -> int:
    space, space_path = _load_space(args.space)
    objective, optimum = _resolve_objective(args.objective)
    run = drv.RunConfig(
        space=space,
        objective=objective,
        objective_spec=args.objective,
        iterations=args.iters,
        batch_size=args.batch,
        init_per_subspace=args.init_per_subspace,
        seed=args.seed,
        encoder=_encoder_from_args(args),
        fit_epochs=args.fit_epochs,
        fresh_fit=args.fresh_fit,
        acq_budget=args.budget,
        warm_start=args.warm_start,
        out_dir=_out_dir(args.out, f"run-seed{args.seed}"),
        space_path=space_path,
    )
    if args.resume:
        _, obs = drv.resume_run(run.out_dir, objective, optimum=optimum)
    else:
        _, obs = drv.run_bo(run, optimum=optimum)
    print(json.dumps(drv.make_summary(run, obs, optimum), sort_keys=True, indent=1))
    return 0


def _bench_worker(job):
    method, seed, args_d = job
    space, space_path = _load_space(args_d["space"])
    objective, optimum = _resolve_objective(args_d["objective"])
    encoder = EncoderConfig.from_dict(args_d["encoder"])
    out = str(Path(args_d["out"]) / method / f"seed{seed}")
    iters = args_d["iters"]
    common = dict(
        space=space, objective=objective, objective_spec=args_d["objective"],
        batch_size=args_d["batch"], seed=seed, out_dir=out, space_path=space_path,
        fit_epochs=args_d["fit_epochs"], acq_budget=args_d["budget"],
    )
    if method == "attnbo":
        run = drv.RunConfig(iterations=iters, encoder=encoder, **common)
        drv.run_bo(run, optimum=optimum)
    elif method == "random":
        run = drv.RunConfig(iterations=iters, **common)
        bench.run_baseline(bench.BaselineSpec("random_search"), run, optimum=optimum)
    elif method == "indepgp":
        run = drv.RunConfig(iterations=iters, **common)
        bench.run_baseline(
            bench.BaselineSpec("independent_gp", fit_epochs=args_d["fit_epochs"],
                               acq_budget=args_d["budget"]),
            run, optimum=optimum)
    else:
        raise UsageError(f"unknown method {method!r}")
    return out


def cmd_benchmark(args) -> int:
    if args.suite != "jenatton":
        raise UsageError(f"unknown suite {args.suite!r}")
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in ("attnbo", "random", "indepgp"):
            raise UsageError(f"unknown method {m!r} (attnbo, random, indepgp)")
    out = _out_dir(args.out, "benchmark")
    args_d = {
        "space": "simulation_bench", "objective": "builtin:jenatton",
        "encoder": _encoder_from_args(args).to_dict(), "iters": args.iters,
        "batch": args.batch, "fit_epochs": args.fit_epochs, "budget": args.budget,
        "out": out,
    }
    jobs = [(m, seed, args_d) for m in methods for seed in range(args.repeats)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            dirs = list(pool.map(_bench_worker, jobs))
    else:
        dirs = [_bench_worker(job) for job in jobs]

    rows = []
    for d in dirs:
        method, seed, records = bench.read_run_dir(d)
        rows.extend(bench.records_to_rows(method, seed, records, bench.JENATTON_OPTIMUM))
    bench.write_report_csv(rows, Path(out) / "curves.csv")
    bench.write_aggregate_csv(bench.aggregate_rows(rows), Path(out) / "aggregate.csv")
    print(f"wrote {len(dirs)} run directories under {out}")
    print(f"aggregate: {Path(out) / 'aggregate.csv'}")
    return 0


def cmd_meta_train(args) -> int:
    if args.tasks_dir:
        if not args.space:
            raise UsageError("--tasks-dir requires --space (the union space)")
        space, _ = _load_space(args.space)
        tasks = load_task_files(space, args.tasks_dir)
    else:
        tasks, _ = bench.make_meta_tasks(args.synthetic, seed=args.seed,
                                         n_obs=args.obs_per_task)
    encoder = EncoderConfig() if args.encoder == "paper" else DESK_CONFIG
    drv.meta_train(tasks, encoder, epochs=args.epochs, seed=args.seed,
                   out_path=args.out)
    print(f"wrote meta-trained weights to {args.out}")
    return 0


def load_task_files(space: sd.SearchSpace, directory) -> drv.MetaTaskSet:
    """Offline tasks from <task_id>.jsonl files of {config, y} records."""
    tasks = []
    paths = sorted(Path(directory).glob("*.jsonl"))
    if not paths:
        raise UsageError(f"no .jsonl task files under {directory}")
    for path in paths:
        try:
            task_id = int(path.stem)
        except ValueError:
            raise UsageError(f"task file name {path.name!r} is not an integer id")
        obs = drv.ObservationSet()
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                    config = sd.build_config(space, d["config"]["subspace_id"],
                                             d["config"]["values"])
                    obs.append(drv.ObsRecord(
                        config, float(d["y"]), d.get("iter", 0),
                        d.get("source", "offline"), d.get("seed", 0)))
                except (json.JSONDecodeError, KeyError, TypeError, sd.SpaceError) as exc:
                    raise UsageError(f"{path} line {lineno}: {exc}") from exc
        tasks.append((task_id, obs))
    return drv.MetaTaskSet(space=space, tasks=tasks)


def cmd_report(args) -> int:
    run_dirs = []
    for root in args.inputs:
        rootp = Path(root)
        if (rootp / "manifest.json").exists():
            run_dirs.append(rootp)
        else:
            run_dirs.extend(sorted(p.parent for p in rootp.glob("**/manifest.json")))
    if not run_dirs:
        raise UsageError(f"no run directories under {', '.join(args.inputs)}")
    rows = []
    for d in run_dirs:
        method, seed, records = bench.read_run_dir(d)
        rows.extend(bench.records_to_rows(method, seed, records, args.optimum))
    if args.emit == "csv":
        out = args.out or "report.csv"
        bench.write_report_csv(rows, out)
        agg_out = str(Path(out).with_name(Path(out).stem + "_aggregate.csv"))
        bench.write_aggregate_csv(bench.aggregate_rows(rows), agg_out)
        print(f"wrote {out} and {agg_out}")
    else:
        finals = {}
        for row in rows:
            key = (row["method"], row["seed"])
            finals[key] = row
        by_method = {}
        for (method, _), row in finals.items():
            by_method.setdefault(method, []).append(float(row["log10_regret"]))
        for method, vals in sorted(by_method.items()):
            print(f"{method}: median final log10-regret {np.median(vals):+.3f} "
                  f"over {len(vals)} runs")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="treebo",
        description="Bayesian optimization for conditional search spaces "
                    "with a unified attention-based surrogate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="parse a space file and list its subspaces")
    p.add_argument("space", help="space file or builtin name")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("sample", help="draw random configurations")
    p.add_argument("space")
    p.add_argument("--subspace", type=int, default=None, help="fixed subspace id")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("run", help="run the optimization loop")
    p.add_argument("--space", required=True)
    p.add_argument("--objective", required=True,
                   help="builtin:jenatton or cmd:<command reading config JSON on stdin>")
    p.add_argument("--iters", type=int, default=80)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--resume", action="store_true", help="continue a run directory")
    p.add_argument("--warm-start", default=None, help="weights container to start from")
    p.add_argument("--fresh-fit", action="store_true",
                   help="re-initialize surrogate weights before every fit")
    p.add_argument("--no-structure-emb", action="store_true",
                   help="value-only embedding variant")
    p.add_argument("--pooling", choices=("avg", "token"), default=None,
                   help="sequence pooling: average (default) or mixer token")
    p.add_argument("--encoder", choices=("paper", "desk"), default="paper",
                   help="encoder architecture preset")
    p.add_argument("--fit-epochs", type=int, default=100)
    p.add_argument("--budget", type=int, default=512,
                   help="acquisition candidates per subspace")
    p.add_argument("--init-per-subspace", type=int, default=2)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("benchmark", help="repeated runs of several methods")
    p.add_argument("--suite", default="jenatton")
    p.add_argument("--methods", default="attnbo,random,indepgp")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--iters", type=int, default=80)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--out", default=None)
    p.add_argument("--encoder", choices=("paper", "desk"), default="desk",
                   help="encoder preset (desk keeps the suite fast)")
    p.add_argument("--no-structure-emb", action="store_true")
    p.add_argument("--pooling", choices=("avg", "token"), default=None)
    p.add_argument("--fit-epochs", type=int, default=100)
    p.add_argument("--budget", type=int, default=512)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("meta-train", help="pre-train weights on offline tasks")
    p.add_argument("--synthetic", type=int, default=8,
                   help="number of generated tasks (ignored with --tasks-dir)")
    p.add_argument("--tasks-dir", default=None,
                   help="directory of <task_id>.jsonl offline observation files")
    p.add_argument("--space", default=None,
                   help="union space for --tasks-dir ingestion")
    p.add_argument("--obs-per-task", type=int, default=50)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--encoder", choices=("paper", "desk"), default="desk")
    p.add_argument("--out", required=True, help="weights container path")
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("report", help="aggregate run directories into plot data")
    p.add_argument("--in", dest="inputs", nargs="+", required=True,
                   help="run directories (or roots to scan)")
    p.add_argument("--emit", choices=("csv", "summary"), default="summary")
    p.add_argument("--out", default=None)
    p.add_argument("--optimum", type=float, default=bench.JENATTON_OPTIMUM)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (UsageError, sd.SpaceError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        logger.exception("runtime failure")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
