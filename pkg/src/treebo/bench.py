"""Built-in objectives, baselines, and benchmark reporting.

The simulation objective is a three-decision binary tree with quadratic
leaves (constants 0.1/0.2/0.3/0.4) plus a shared linear variable added
directly; its global minimum is 0.1. Baselines share the driver's record
and log formats so reports are directly comparable.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from treebo import acquire
from treebo import driver as drv
from treebo import gp
from treebo import spacedsl as sd
from treebo.encoder import DESK_CONFIG, EncoderConfig

logger = logging.getLogger(__name__)

JENATTON_OPTIMUM = 0.1
REGRET_FLOOR = 1e-12

# (leaf variable, leaf constant) per (x1, x2-or-x3) decision pair
_LEAVES = {
    (0, 0): ("x4", 0.1),
    (0, 1): ("x5", 0.2),
    (1, 0): ("x6", 0.3),
    (1, 1): ("x7", 0.4),
}


def jenatton_eval(config: sd.Configuration) -> float:
    """The tree-structured simulation objective (minimum 0.1)."""
    raw = dict(config.raw)
    try:
        x1 = raw.pop("x1")
        if x1 == 0:
            second = raw.pop("x2")
            r = raw.pop("r8")
        else:
            second = raw.pop("x3")
            r = raw.pop("r9")
        leaf_name, const = _LEAVES[(x1, second)]
        v = raw.pop(leaf_name)
    except KeyError as exc:
        raise sd.SpaceError(
            f"configuration is not from the simulation space (missing {exc})"
        ) from None
    if raw:
        raise sd.SpaceError(
            f"configuration carries fields outside its activation path: {sorted(raw)}"
        )
    return float(v) ** 2 + const + float(r)


def log10_regret(best_y: float, optimum: float) -> float:
    """log10 distance between the best value so far and the known optimum."""
    return float(np.log10(max(best_y - optimum, REGRET_FLOOR)))


# ---------------------------------------------------------------------------
# baselines

@dataclass
class BaselineSpec:
    kind: str                      # "random_search" | "independent_gp"
    fit_epochs: int = 100
    acq_budget: int = acquire.DEFAULT_BUDGET

    def __post_init__(self):
        if self.kind not in ("random_search", "independent_gp"):
            raise ValueError(f"unknown baseline kind {self.kind!r}")


def run_baseline(spec: BaselineSpec, run: drv.RunConfig, optimum: float | None = None):
    """Run a baseline under the driver's record/log formats."""
    persister = drv.RunPersister(run.out_dir) if run.out_dir else None
    if persister:
        persister.write_manifest(run, method=spec.kind)
    obs = drv.initialize(run)
    if persister:
        persister.append_records(obs.records, run.deterministic_log)
    if spec.kind == "random_search":
        _random_search_loop(run, obs, persister)
    else:
        _independent_gp_loop(spec, run, obs, persister)
    if persister:
        persister.write_summary(drv.make_summary(run, obs, optimum))
    return obs


def _record_batch(run, obs, persister, configs, seeds, iteration, source):
    before = len(obs)
    for config, seed in zip(configs, seeds):
        try:
            y, wall = drv._evaluate(run, config)
            obs.append(drv.ObsRecord(config, y, iteration, source, seed, "ok",
                                     wall, drv._timestamp()))
        except drv.ObjectiveError as exc:
            logger.warning("%s evaluation failed: %s", source, exc)
            obs.append(drv.ObsRecord(config, None, iteration, source, seed, "failed"))
    if persister:
        persister.append_records(obs.records[before:], run.deterministic_log)


def _random_search_loop(run, obs, persister):
    active = run.active_subspaces()
    for t in range(1, run.iterations + 1):
        configs, seeds = [], []
        for b in range(run.batch_size):
            rng = drv.derive_rng(run.seed, drv._ACQ, t, b)
            sub = active[int(rng.integers(len(active)))]
            configs.append(sd.sample_with_rng(run.space, sub.id, rng))
            seeds.append(drv.derive_seed(run.seed, drv._ACQ, t, b))
        _record_batch(run, obs, persister, configs, seeds, t, "random")


class _SubGP:
    """Point-estimate Matérn GP on one subspace's normalized value vectors."""

    def __init__(self, subspace_id: int):
        self.subspace_id = subspace_id
        self.kernel = gp.KernelParams()
        self.state: gp.FitState | None = None

    def refit(self, records, epochs):
        configs = [r.config for r in records if r.status == "ok"]
        y = np.array([r.y for r in records if r.status == "ok"], dtype=float)
        if len(configs) < 2:
            self.state = None
            return
        self.state = gp.fit((configs, y), gp.FixedVectorMap(), self.kernel, epochs=epochs)
        self.kernel = self.state.kernel  # warm-continue across iterations

    def propose_with_incumbent(self, space, budget, rng, best_y_raw):
        if self.state is None:
            # not enough data for a posterior: explore at random
            config = sd.sample_with_rng(space, self.subspace_id, rng)
            return acquire.AcquisitionResult(self.subspace_id, config, np.inf)
        best_std = float(self.state.standardize(best_y_raw))
        predictor = lambda configs: gp.predict_batch(self.state, configs)
        return acquire.optimize_subspace(predictor, space, self.subspace_id,
                                         best_std, budget=budget, rng=rng)


def _independent_gp_loop(spec, run, obs, persister):
    active = run.active_subspaces()
    sub_gps = {sub.id: _SubGP(sub.id) for sub in active}
    for t in range(1, run.iterations + 1):
        groups = obs.by_subspace()
        results = []
        for sub in active:
            records = groups.get(sub.id, [])
            model = sub_gps[sub.id]
            model.refit(records, spec.fit_epochs)
            rng = drv.derive_rng(run.seed, drv._ACQ, t, sub.id)
            ys = [r.y for r in records if r.status == "ok"]
            incumbent = min(ys) if ys else 0.0
            results.append(model.propose_with_incumbent(
                run.space, spec.acq_budget, rng, incumbent))
        picked = sorted(results, key=lambda r: (-r.ei_value, r.subspace_id))[:run.batch_size]
        seeds = [drv.derive_seed(run.seed, drv._ACQ, t, r.subspace_id) for r in picked]
        _record_batch(run, obs, persister, [r.config for r in picked], seeds, t, "indepgp")


# ---------------------------------------------------------------------------
# synthetic meta-tasks (offline warm-start substitute)

_JENATTON_BRANCH = """\
      x1:
        type:  choice
        range: {0, 1}
        submodule:
          0:
            r8:
              type:  float
              range: [0...1]
            x2:
              type:  choice
              range: {0, 1}
              submodule:
                0:
                  x4:
                    type:  float
                    range: [-1...1]
                1:
                  x5:
                    type:  float
                    range: [-1...1]
          1:
            r9:
              type:  float
              range: [0...1]
            x3:
              type:  choice
              range: {0, 1}
              submodule:
                0:
                  x6:
                    type:  float
                    range: [-1...1]
                1:
                  x7:
                    type:  float
                    range: [-1...1]
"""


def union_space_text(n_tasks: int) -> str:
    """A union space whose root decision is the task id; every branch holds
    the simulation structure (shared names share identity codes)."""
    ids = ", ".join(str(i) for i in range(n_tasks))
    parts = [f"task_id:\n  type:  choice\n  range: {{{ids}}}\n  submodule:\n"]
    for i in range(n_tasks):
        parts.append(f"    {i}:\n{_JENATTON_BRANCH}")
    return "".join(parts)


@dataclass
class TaskVariant:
    """A shifted/scaled simulation variant; optimum value stays 0.1."""

    task_id: int
    centers: dict
    r_weight: float
    scale: float

    def value(self, raw: dict) -> float:
        x1 = raw["x1"]
        if x1 == 0:
            second, r = raw["x2"], raw["r8"]
        else:
            second, r = raw["x3"], raw["r9"]
        leaf_name, const = _LEAVES[(x1, second)]
        v = raw[leaf_name] - self.centers[leaf_name]
        base = v * v + const + self.r_weight * r
        return self.scale * (base - JENATTON_OPTIMUM) + JENATTON_OPTIMUM

    def __call__(self, config: sd.Configuration) -> float:
        if config.raw.get("task_id") != self.task_id:
            raise sd.SpaceError(
                f"configuration belongs to task {config.raw.get('task_id')}, "
                f"objective is task {self.task_id}"
            )
        return self.value(config.raw)


def task_subspace_ids(space: sd.SearchSpace, task_id: int):
    return tuple(s.id for s in space.subspaces if s.decisions.get("task_id") == task_id)


def make_meta_tasks(n_tasks: int, seed: int, n_obs: int = 50):
    """Synthetic offline tasks: (MetaTaskSet, {task_id: objective}).

    Each task is a shifted/scaled simulation variant living in one branch of
    the union space, observed at n_obs random points.
    """
    if n_tasks < 2:
        raise ValueError("need at least 2 tasks")
    space = sd.parse_space(union_space_text(n_tasks))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 71]))
    variants = {}
    tasks = []
    for task_id in range(n_tasks):
        centers = {name: float(rng.uniform(-0.5, 0.5)) for name in ("x4", "x5", "x6", "x7")}
        variant = TaskVariant(
            task_id=task_id,
            centers=centers,
            r_weight=float(rng.uniform(0.7, 1.3)),
            scale=float(rng.uniform(0.7, 1.5)),
        )
        variants[task_id] = variant
        sids = task_subspace_ids(space, task_id)
        obs = drv.ObservationSet()
        for k in range(n_obs):
            child = drv.derive_seed(seed, drv._META, task_id, k)
            config = sd.sample(space, sids[k % len(sids)], child)
            obs.append(drv.ObsRecord(config, variant(config), 0, "meta", child))
        tasks.append((task_id, obs))
    return drv.MetaTaskSet(space=space, tasks=tasks), variants


# ---------------------------------------------------------------------------
# reporting

REPORT_COLUMNS = ("method", "seed", "iter", "evals", "best_y", "log10_regret", "wall_ms")


def records_to_rows(method: str, seed: int, records, optimum: float):
    """Per-evaluation benchmark curve rows (the Fig.-style series)."""
    rows = []
    best = np.nan
    for evals, r in enumerate(records, start=1):
        if r.status == "ok" and (np.isnan(best) or r.y < best):
            best = r.y
        regret = log10_regret(best, optimum) if not np.isnan(best) else ""
        rows.append({
            "method": method,
            "seed": seed,
            "iter": r.iteration,
            "evals": evals,
            "best_y": best if not np.isnan(best) else "",
            "log10_regret": regret,
            "wall_ms": r.wall_ms if r.wall_ms is not None else "",
        })
    return rows


def write_report_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def read_run_dir(directory, space: sd.SearchSpace | None = None):
    """(method, seed, records) parsed back from a run directory."""
    persister = drv.RunPersister(directory)
    manifest = persister.read_manifest()
    if space is None:
        space = sd.parse_space(manifest["run"]["space_text"])
    records = persister.load_records(space)
    # recover wall-clock data from the timing sidecar (the deterministic log
    # intentionally nulls it)
    if persister.timings_path.exists():
        with open(persister.timings_path, "r", encoding="utf-8") as fh:
            for record, line in zip(records, fh):
                parts = line.rstrip("\n").split(",")
                if len(parts) >= 2 and parts[1]:
                    record.wall_ms = float(parts[1])
    return manifest["method"], manifest["run"]["seed"], records


def aggregate_rows(rows):
    """Median and IQR of log10-regret per (method, evals)."""
    groups = {}
    for row in rows:
        if row["log10_regret"] == "":
            continue
        key = (row["method"], int(row["evals"]))
        groups.setdefault(key, []).append(float(row["log10_regret"]))
    out = []
    for (method, evals), values in sorted(groups.items()):
        q1, med, q3 = np.percentile(values, [25, 50, 75])
        out.append({
            "method": method, "evals": evals, "n": len(values),
            "median_log10_regret": med, "q1": q1, "q3": q3,
        })
    return out


def write_aggregate_csv(aggregates, path):
    cols = ("method", "evals", "n", "median_log10_regret", "q1", "q3")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        writer.writerows(aggregates)
