"""Optimization driver: initialization, fit/acquire/evaluate loop, ask/tell,
meta-training over offline tasks, and run persistence.

Every random draw is keyed off the run seed together with its role and
iteration, so a run is a pure function of its RunConfig: killed runs resume
byte-identically and the observation log is reproducible end to end.
"""

from __future__ import annotations

import hashlib
import json
import logging
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from treebo import acquire
from treebo import encoder as enc
from treebo import gp
from treebo import spacedsl as sd
from treebo.optim import AdamState, adam_step, lr_at_epoch

logger = logging.getLogger(__name__)

# seed-stream roles
_INIT, _ACQ, _PARAMS, _RETRY, _META = 0, 1, 2, 3, 4


def derive_seed(*parts) -> int:
    """A stable child seed from (run seed, role, indices...)."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def derive_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(parts)))


class ObjectiveError(RuntimeError):
    """An objective evaluation failed."""


class CommandObjective:
    """Spawn a command per evaluation: config JSON on stdin, one decimal out."""

    def __init__(self, argv):
        if isinstance(argv, str):
            import shlex

            argv = shlex.split(argv)
        self.argv = list(argv)

    def __call__(self, config: sd.Configuration) -> float:
        proc = subprocess.run(
            self.argv, input=sd.serialize_config(config),
            capture_output=True, text=True,
        )
        if proc.returncode != 0:
            raise ObjectiveError(
                f"objective command exited {proc.returncode}: {proc.stderr.strip()[:500]}"
            )
        try:
            value = float(proc.stdout.strip().splitlines()[-1])
        except (ValueError, IndexError):
            raise ObjectiveError(
                f"objective command produced no decimal on stdout: {proc.stdout[:200]!r}"
            ) from None
        if not np.isfinite(value):
            raise ObjectiveError(f"objective returned non-finite value {value!r}")
        return value


# ---------------------------------------------------------------------------
# observations

@dataclass
class ObsRecord:
    config: sd.Configuration
    y: float | None
    iteration: int
    source: str
    seed: int
    status: str = "ok"
    wall_ms: float | None = None
    ts: str | None = None

    def to_json_dict(self, deterministic=True):
        return {
            "config": json.loads(sd.serialize_config(self.config)),
            "iter": self.iteration,
            "seed": self.seed,
            "source": self.source,
            "status": self.status,
            "subspace_id": self.config.subspace_id,
            "ts": None if deterministic else self.ts,
            "wall_ms": None if deterministic else self.wall_ms,
            "y": self.y,
        }


class ObservationSet:
    """Evaluation records grouped by subspace; the surrogate's dataset."""

    def __init__(self, records=()):
        self.records = list(records)

    def __len__(self):
        return len(self.records)

    def append(self, record: ObsRecord):
        self.records.append(record)

    def successes(self):
        ok = [r for r in self.records if r.status == "ok"]
        configs = [r.config for r in ok]
        y = np.array([r.y for r in ok], dtype=float)
        return configs, y

    def by_subspace(self):
        groups = {}
        for r in self.records:
            groups.setdefault(r.config.subspace_id, []).append(r)
        return groups

    def best(self):
        """(record, y) of the incumbent (minimum successful objective)."""
        ok = [r for r in self.records if r.status == "ok"]
        if not ok:
            return None, None
        best = min(ok, key=lambda r: r.y)
        return best, best.y

    def best_curve(self):
        """Running minimum after each record (NaN until a success lands)."""
        best = np.nan
        out = []
        for r in self.records:
            if r.status == "ok" and (np.isnan(best) or r.y < best):
                best = r.y
            out.append(best)
        return np.array(out)


# ---------------------------------------------------------------------------
# run configuration

@dataclass
class RunConfig:
    space: sd.SearchSpace
    objective: object                     # callable Configuration -> float
    objective_spec: str = "callable"      # manifest tag (builtin:..., cmd:...)
    iterations: int = 80
    batch_size: int = 1
    init_per_subspace: int = 2
    seed: int = 0
    encoder: enc.EncoderConfig = field(default_factory=enc.EncoderConfig)
    fit_epochs: int = 100
    base_lr: float = 1e-3
    fresh_fit: bool = False
    acq_budget: int = acquire.DEFAULT_BUDGET
    global_fallback_threshold: int = acquire.GLOBAL_FALLBACK_SUBSPACES
    warm_start: str | None = None
    out_dir: str | None = None
    subspace_filter: tuple | None = None  # restrict the loop to these subspace ids
    space_path: str | None = None
    deterministic_log: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 1 <= self.batch_size <= len(self.active_subspaces()):
            raise ValueError(
                f"batch_size must be in 1..{len(self.active_subspaces())} (subspace count)"
            )

    def active_subspaces(self):
        subs = self.space.subspaces
        if self.subspace_filter is not None:
            wanted = set(self.subspace_filter)
            subs = [s for s in subs if s.id in wanted]
            if not subs:
                raise ValueError("subspace_filter matches no subspace")
        return subs

    def space_hash(self) -> str:
        return hashlib.sha256(self.space.source_text.encode("utf-8")).hexdigest()

    def manifest_dict(self) -> dict:
        return {
            "objective_spec": self.objective_spec,
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "init_per_subspace": self.init_per_subspace,
            "seed": self.seed,
            "encoder": self.encoder.to_dict(),
            "fit_epochs": self.fit_epochs,
            "base_lr": self.base_lr,
            "fresh_fit": self.fresh_fit,
            "acq_budget": self.acq_budget,
            "global_fallback_threshold": self.global_fallback_threshold,
            "warm_start": self.warm_start,
            "subspace_filter": list(self.subspace_filter) if self.subspace_filter else None,
            "space_path": self.space_path,
            "space_sha256": self.space_hash(),
            "space_text": self.space.source_text,
            "deterministic_log": self.deterministic_log,
        }


# ---------------------------------------------------------------------------
# driver state

class BOState:
    """Mutable loop state: current warm parameters and the latest fit."""

    def __init__(self, run: RunConfig):
        self.run = run
        seed = derive_seed(run.seed, _PARAMS)
        self.initial_params = enc.EncoderParams.for_space(run.space, run.encoder, seed=seed)
        if run.warm_start:
            loaded, payload = enc.load_params(run.warm_start)
            self._validate_warm(loaded, run)
            self.initial_params = loaded
            self.initial_kernel = (
                gp.KernelParams.from_dict(payload["kernel_params"])
                if "kernel_params" in payload
                else gp.KernelParams()
            )
        else:
            self.initial_kernel = gp.KernelParams()
        self.params = self.initial_params
        self.kernel = self.initial_kernel
        self.fit_state: gp.FitState | None = None
        self.iteration = 0
        self.fitted_n_obs = -1
        self.pending: list | None = None

    @staticmethod
    def _validate_warm(loaded: enc.EncoderParams, run: RunConfig):
        if loaded.cfg != run.encoder:
            raise ValueError(
                "warm-start weights were trained with a different encoder "
                f"configuration: {loaded.cfg} vs {run.encoder}"
            )
        if loaded.n_names != run.space.n_names or loaded.max_index != run.space.max_index:
            raise ValueError(
                "warm-start weights do not match this search space "
                f"(names {loaded.n_names} vs {run.space.n_names}, "
                f"max index {loaded.max_index} vs {run.space.max_index})"
            )


def _evaluate(run: RunConfig, config: sd.Configuration):
    start = time.perf_counter()
    value = float(run.objective(config))
    wall_ms = (time.perf_counter() - start) * 1000.0
    if not np.isfinite(value):
        raise ObjectiveError(f"objective returned non-finite value {value!r}")
    return value, wall_ms


def _timestamp():
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


def initialize(run: RunConfig) -> ObservationSet:
    """Evaluate init_per_subspace random points in every active subspace."""
    obs = ObservationSet()
    for sub in run.active_subspaces():
        for k in range(run.init_per_subspace):
            seed = derive_seed(run.seed, _INIT, sub.id, k)
            config = sd.sample(run.space, sub.id, seed)
            try:
                y, wall = _evaluate(run, config)
                obs.append(ObsRecord(config, y, 0, "init", seed, "ok", wall, _timestamp()))
            except ObjectiveError as exc:
                logger.warning("init evaluation failed in subspace %d: %s", sub.id, exc)
                obs.append(ObsRecord(config, None, 0, "init", seed, "failed"))
                retry_seed = derive_seed(run.seed, _RETRY, sub.id, k)
                retry_cfg = sd.sample(run.space, sub.id, retry_seed)
                y, wall = _evaluate(run, retry_cfg)  # second failure aborts
                obs.append(ObsRecord(retry_cfg, y, 0, "init", retry_seed, "ok", wall, _timestamp()))
    return obs


def _refit(state: BOState, obs: ObservationSet):
    run = state.run
    configs, y = obs.successes()
    if len(configs) < 2:
        raise ValueError("need at least 2 successful observations to fit")
    params = state.initial_params if run.fresh_fit else state.params
    kernel = state.initial_kernel if run.fresh_fit else state.kernel
    fmap = gp.AttentionFeatureMap(params)
    state.fit_state = gp.fit((configs, y), fmap, kernel,
                             epochs=run.fit_epochs, base_lr=run.base_lr)
    state.params = state.fit_state.feature_map.params
    state.kernel = state.fit_state.kernel
    state.fitted_n_obs = len(obs)


def _acquire_batch(state: BOState, obs: ObservationSet):
    run = state.run
    t = state.iteration + 1
    _, best_y = obs.best()
    best_std = float(state.fit_state.standardize(best_y))
    active = run.active_subspaces()
    if len(active) > run.global_fallback_threshold:
        rng = derive_rng(run.seed, _ACQ, t, 0)
        results = acquire.optimize_global_random(
            state.fit_state, run.space, best_std,
            budget=max(run.acq_budget, run.batch_size), B=run.batch_size, rng=rng)
        return results, derive_seed(run.seed, _ACQ, t, 0)
    results = []
    for sub in active:
        rng = derive_rng(run.seed, _ACQ, t, sub.id)
        results.append(
            acquire.optimize_subspace(
                state.fit_state, run.space, sub.id, best_std,
                budget=run.acq_budget, rng=rng)
        )
    return acquire.select_batch(results, run.batch_size), derive_seed(run.seed, _ACQ, t, 0)


def ask(state: BOState, obs: ObservationSet):
    """The next TopB batch (no evaluation). Idempotent until tell()."""
    if state.pending is not None and state.fitted_n_obs == len(obs):
        return [r.config for r in state.pending]
    if state.fit_state is None or state.fitted_n_obs != len(obs):
        _refit(state, obs)
    state.pending, state.pending_seed = _acquire_batch(state, obs)
    return [r.config for r in state.pending]


def tell(state: BOState, obs: ObservationSet, configs, ys, source="tell", seed=None):
    """Ingest externally evaluated results; the next ask() refits lazily."""
    t = state.iteration + 1
    for config, y in zip(configs, ys):
        # validate against the space (raises for foreign configurations)
        sd.build_config(state.run.space, config.subspace_id, config.raw)
        status = "ok" if y is not None and np.isfinite(y) else "failed"
        obs.append(ObsRecord(config, float(y) if status == "ok" else None,
                             t, source, seed if seed is not None else 0, status))
    state.iteration = t
    state.pending = None
    return state


def step(state: BOState, obs: ObservationSet):
    """One Algorithm-1 iteration: fit, acquire, evaluate B configs, ingest."""
    run = state.run
    batch = ask(state, obs)
    seed = state.pending_seed
    ys = []
    wall = []
    for config in batch:
        try:
            y, w = _evaluate(run, config)
            ys.append(y)
            wall.append(w)
        except ObjectiveError as exc:
            logger.warning("objective failed at iteration %d: %s", state.iteration + 1, exc)
            ys.append(None)
            wall.append(None)
    tell(state, obs, batch, ys, source="bo", seed=seed)
    for record, w in zip(obs.records[-len(batch):], wall):
        record.wall_ms = w
        record.ts = _timestamp()
    return obs


# ---------------------------------------------------------------------------
# persistence

class RunPersister:
    """Run-directory layout: manifest.json, observations.jsonl, checkpoint.json,
    timings.csv, summary.json."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.dir / "manifest.json"
        self.log_path = self.dir / "observations.jsonl"
        self.checkpoint_path = self.dir / "checkpoint.json"
        self.timings_path = self.dir / "timings.csv"
        self.summary_path = self.dir / "summary.json"

    def write_manifest(self, run: RunConfig, method="attnbo"):
        payload = {"method": method, "run": run.manifest_dict()}
        self._atomic_write(self.manifest_path, json.dumps(payload, sort_keys=True, indent=1))

    def read_manifest(self) -> dict:
        with open(self.manifest_path, "r", encoding="utf-8") as fh:
            return json.load(fh)

    def append_records(self, records, deterministic=True):
        with open(self.log_path, "a", encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps(r.to_json_dict(deterministic), sort_keys=True,
                                    separators=(",", ":")) + "\n")
        with open(self.timings_path, "a", encoding="utf-8") as fh:
            for r in records:
                fh.write(f"{r.iteration},{r.wall_ms if r.wall_ms is not None else ''},"
                         f"{r.ts or ''}\n")

    def load_records(self, space: sd.SearchSpace) -> list:
        if not self.log_path.exists():
            return []
        records = []
        with open(self.log_path, "r", encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        for lineno, line in enumerate(lines, start=1):
            try:
                d = json.loads(line)
                config = sd.build_config(space, d["config"]["subspace_id"],
                                         d["config"]["values"])
                records.append(ObsRecord(
                    config=config, y=d["y"], iteration=d["iter"], source=d["source"],
                    seed=d["seed"], status=d["status"], wall_ms=d["wall_ms"], ts=d["ts"],
                ))
            except (json.JSONDecodeError, KeyError, sd.SpaceError) as exc:
                if lineno == len(lines):
                    logger.warning(
                        "dropping torn final record at %s line %d", self.log_path, lineno)
                    self.truncate_log(len(records))
                    break
                raise ValueError(
                    f"corrupt observation log {self.log_path} at line {lineno}: {exc}"
                ) from exc
        return records

    def truncate_log(self, n_records: int):
        if not self.log_path.exists():
            return
        with open(self.log_path, "r", encoding="utf-8") as fh:
            lines = [ln for ln in fh.read().split("\n") if ln != ""]
        with open(self.log_path, "w", encoding="utf-8") as fh:
            for ln in lines[:n_records]:
                fh.write(ln + "\n")

    def write_checkpoint(self, state: BOState, n_obs: int):
        payload = enc.params_to_payload(state.params, extra={
            "kernel_params": state.kernel.to_dict(),
            "iteration": state.iteration,
            "n_obs": n_obs,
        })
        self._atomic_write(self.checkpoint_path, json.dumps(payload))

    def read_checkpoint(self):
        if not self.checkpoint_path.exists():
            return None
        with open(self.checkpoint_path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        params = enc.params_from_payload(payload)
        kernel = gp.KernelParams.from_dict(payload["kernel_params"])
        return params, kernel, payload["iteration"], payload["n_obs"]

    def write_summary(self, summary: dict):
        self._atomic_write(self.summary_path, json.dumps(summary, sort_keys=True, indent=1))

    def _atomic_write(self, path: Path, text: str):
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text)
        tmp.replace(path)


def run_bo(run: RunConfig, stop_after: int | None = None, optimum: float | None = None):
    """Execute a full run (or resume one) under run.out_dir.

    ``stop_after`` halts after that many completed iterations without
    finalizing, leaving on-disk state exactly as an interrupted process
    would. Returns (state, observations).
    """
    persister = RunPersister(run.out_dir) if run.out_dir else None
    state = BOState(run)
    obs = ObservationSet()
    start_iter = 0

    if persister and persister.manifest_path.exists():
        state, obs, start_iter = _restore(run, persister)
    elif persister:
        persister.write_manifest(run)

    if start_iter == 0 and len(obs) == 0:
        obs = initialize(run)
        if persister:
            persister.append_records(obs.records, run.deterministic_log)
            persister.write_checkpoint(state, len(obs))

    for t in range(start_iter, run.iterations):
        if stop_after is not None and t >= stop_after:
            return state, obs
        before = len(obs)
        step(state, obs)
        if persister:
            persister.append_records(obs.records[before:], run.deterministic_log)
            persister.write_checkpoint(state, len(obs))

    if persister:
        persister.write_summary(make_summary(run, obs, optimum))
    return state, obs


def make_summary(run: RunConfig, obs: ObservationSet, optimum: float | None = None) -> dict:
    best_record, best_y = obs.best()
    summary = {
        "n_observations": len(obs),
        "n_failed": sum(1 for r in obs.records if r.status == "failed"),
        "iterations": run.iterations,
        "evaluations": len(obs),
        "best_y": best_y,
        "best_config": json.loads(sd.serialize_config(best_record.config))
        if best_record else None,
        "seed": run.seed,
    }
    if optimum is not None and best_y is not None:
        from treebo.bench import log10_regret

        summary["optimum"] = optimum
        summary["log10_regret"] = log10_regret(best_y, optimum)
    return summary


def _restore(run: RunConfig, persister: RunPersister):
    manifest = persister.read_manifest()
    recorded = manifest["run"]
    if recorded["space_sha256"] != run.space_hash():
        raise ValueError(
            "space hash mismatch: the run directory was created with a different "
            f"space document ({recorded['space_sha256'][:12]}... vs {run.space_hash()[:12]}...)"
        )
    for key in ("iterations", "batch_size", "seed", "init_per_subspace"):
        if recorded[key] != getattr(run, _MANIFEST_TO_ATTR.get(key, key)):
            raise ValueError(f"manifest field {key!r} does not match the resume configuration")
    state = BOState(run)
    checkpoint = persister.read_checkpoint()
    records = persister.load_records(run.space)
    if checkpoint is None:
        persister.truncate_log(0)
        return state, ObservationSet(), 0
    params, kernel, iteration, n_obs = checkpoint
    if len(records) > n_obs:
        logger.warning("dropping %d records past the last checkpoint", len(records) - n_obs)
        persister.truncate_log(n_obs)
        records = records[:n_obs]
    elif len(records) < n_obs:
        raise ValueError(
            f"observation log has {len(records)} records but the checkpoint "
            f"expects {n_obs}; the log is corrupt"
        )
    state.params = params
    state.kernel = kernel
    state.iteration = iteration
    state.fitted_n_obs = -1
    return state, ObservationSet(records), iteration


_MANIFEST_TO_ATTR = {"iterations": "iterations", "batch_size": "batch_size",
                     "seed": "seed", "init_per_subspace": "init_per_subspace"}


def resume_run(directory, objective, optimum: float | None = None):
    """Rebuild a RunConfig from a run directory's manifest and continue it."""
    persister = RunPersister(directory)
    manifest = persister.read_manifest()
    r = manifest["run"]
    space = sd.parse_space(r["space_text"])
    if r["space_path"]:
        path = Path(r["space_path"])
        if path.exists():
            on_disk = hashlib.sha256(path.read_bytes()).hexdigest()
            if on_disk != r["space_sha256"]:
                raise ValueError(
                    f"space file {path} changed since the run started "
                    f"(sha256 {on_disk[:12]}... vs {r['space_sha256'][:12]}...)"
                )
    run = RunConfig(
        space=space,
        objective=objective,
        objective_spec=r["objective_spec"],
        iterations=r["iterations"],
        batch_size=r["batch_size"],
        init_per_subspace=r["init_per_subspace"],
        seed=r["seed"],
        encoder=enc.EncoderConfig.from_dict(r["encoder"]),
        fit_epochs=r["fit_epochs"],
        base_lr=r["base_lr"],
        fresh_fit=r["fresh_fit"],
        acq_budget=r["acq_budget"],
        global_fallback_threshold=r["global_fallback_threshold"],
        warm_start=r["warm_start"],
        out_dir=str(directory),
        subspace_filter=tuple(r["subspace_filter"]) if r["subspace_filter"] else None,
        space_path=r["space_path"],
        deterministic_log=r["deterministic_log"],
    )
    return run_bo(run, optimum=optimum)


# ---------------------------------------------------------------------------
# meta-training over offline tasks

@dataclass
class MetaTaskSet:
    """Offline tasks over one union space (the space id is the root decision)."""

    space: sd.SearchSpace
    tasks: list  # list of (space_id, ObservationSet)


def meta_train(tasks: MetaTaskSet, encoder_cfg: enc.EncoderConfig, epochs: int = 100,
               seed: int = 0, base_lr: float = 1e-3, task_batch: int = 4,
               out_path=None):
    """Minimize the summed per-task NLL with a shared encoder and kernel.

    Each task keeps its own GP (its own standardization and kernel matrix);
    epochs iterate over shuffled task minibatches. Returns (params, kernel,
    loss trajectory); writes a weights container when out_path is given.
    """
    usable = []
    for space_id, obs in tasks.tasks:
        configs, y = obs.successes()
        if len(configs) < 2:
            logger.warning("skipping task %s with %d observations", space_id, len(configs))
            continue
        y_mean, y_std = gp._standardization(y)
        usable.append((configs, (y - y_mean) / y_std))
    if len(usable) < 1:
        raise ValueError("meta-training needs at least one task with >= 2 observations")

    params = enc.EncoderParams.for_space(tasks.space, encoder_cfg,
                                         seed=derive_seed(seed, _PARAMS))
    kernel_arr = gp.KernelParams().as_array()
    fmap = gp.AttentionFeatureMap(params)
    prepared = [fmap.prepare(configs) for configs, _ in usable]

    adam_feat = AdamState(params.n_params)
    adam_kern = AdamState(3)
    losses = []
    order_rng = derive_rng(seed, _META)
    batch = min(task_batch, len(usable))
    for epoch in range(epochs):
        order = order_rng.permutation(len(usable))
        lr = lr_at_epoch(epoch, base_lr)
        epoch_loss = 0.0
        for start in range(0, len(usable), batch):
            chunk = order[start:start + batch]
            feat_grads = np.zeros(params.n_params)
            kern_grads = np.zeros(3)
            for ti in chunk:
                node, z, k_leaves, vjp = gp._nll_graph(
                    fmap, gp.KernelParams.from_array(kernel_arr),
                    prepared[ti], usable[ti][1])
                epoch_loss += float(node.data)
                node.backward()
                feat_grads += vjp(z.grad)
                kern_grads += np.array([float(lf.grad) for lf in k_leaves])
            adam_step(params.flat, feat_grads, adam_feat, lr)
            adam_step(kernel_arr, kern_grads, adam_kern, lr)
        losses.append(epoch_loss)

    kernel = gp.KernelParams.from_array(kernel_arr)
    if out_path is not None:
        enc.save_params(params, out_path, extra={
            "kernel_params": kernel.to_dict(),
            "meta": {"epochs": epochs, "n_tasks": len(usable), "seed": seed},
        })
    return params, kernel, losses
