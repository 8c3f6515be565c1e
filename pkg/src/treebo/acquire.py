"""Expected improvement and its per-subspace maximization with top-B batching.

Candidates are scored under the surrogate posterior in standardized units
against the global incumbent. Each subspace is optimized by random candidates
plus hill climbing (Gaussian moves on continuous slots, single-slot
resampling of discrete ones); the driver then keeps the B best subspaces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from treebo import gp
from treebo import spacedsl as sd

DEFAULT_BUDGET = 512
HILL_CLIMB_STARTS = 5
HILL_CLIMB_ROUNDS = 50
HILL_CLIMB_STEP = 0.05
GLOBAL_FALLBACK_SUBSPACES = 32


@dataclass
class AcquisitionResult:
    subspace_id: int
    config: sd.Configuration
    ei_value: float


def expected_improvement(mean, variance, best_y_std):
    """Minimization EI of posterior (mean, variance) against incumbent best.

    Vectorized; degenerate posteriors (sigma < 1e-12) fall back to
    max(best - mean, 0).
    """
    scalar = np.ndim(mean) == 0
    mean = np.atleast_1d(np.asarray(mean, float))
    sigma = np.sqrt(np.maximum(np.atleast_1d(np.asarray(variance, float)), 0.0))
    improve = best_y_std - mean
    out = np.maximum(improve, 0.0)
    ok = sigma >= 1e-12
    if np.any(ok):
        z = improve[ok] / sigma[ok]
        phi = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
        out[ok] = improve[ok] * ndtr(z) + sigma[ok] * phi
    return float(out[0]) if scalar else out


def ei_of_prediction(pred: gp.PosteriorPrediction, best_y_std: float) -> float:
    return float(expected_improvement(pred.mean, pred.variance, best_y_std))


def _predictor(state):
    """Accept a FitState or any callable configs -> (means, variances)."""
    if isinstance(state, gp.FitState):
        return lambda configs: gp.predict_batch(state, configs)
    return state


def _mutate(sub, values, rng):
    """One hill-climb proposal: jiggle floats, resample one discrete slot."""
    proposal = dict(values)
    discrete = []
    for slot in sub.slots:
        if slot.is_decision:
            continue
        if slot.spec.kind == "float":
            u = sd.normalize_value(slot.spec, values[slot.key])
            u = min(max(u + HILL_CLIMB_STEP * rng.standard_normal(), 0.0), 1.0)
            proposal[slot.key] = sd.denormalize_value(slot.spec, u)
        else:
            discrete.append(slot)
    if discrete:
        slot = discrete[int(rng.integers(len(discrete)))]
        proposal[slot.key] = sd.sample_raw(slot.spec, rng)
    return proposal


def optimize_subspace(state, space, subspace_id: int, best_y_std: float,
                      budget: int = DEFAULT_BUDGET, seed: int | None = None,
                      rng=None) -> AcquisitionResult:
    """Best-EI configuration of one subspace: random candidates, then
    hill climbing from the top few."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    predict = _predictor(state)
    sub = space.subspace(subspace_id)
    if rng is None:
        rng = np.random.default_rng(seed)

    candidates = [sd.sample_with_rng(space, subspace_id, rng) for _ in range(budget)]
    means, variances = predict(candidates)
    ei = expected_improvement(means, variances, best_y_std)
    order = np.argsort(-ei)[:min(HILL_CLIMB_STARTS, budget)]

    climbers = [
        {"values": dict(candidates[i].raw), "config": candidates[i], "ei": float(ei[i])}
        for i in order
    ]
    for _ in range(HILL_CLIMB_ROUNDS):
        proposals = [
            sd.build_config(space, subspace_id, _mutate(sub, c["values"], rng))
            for c in climbers
        ]
        p_means, p_vars = predict(proposals)
        p_ei = expected_improvement(p_means, p_vars, best_y_std)
        for climber, prop, val in zip(climbers, proposals, p_ei):
            if val > climber["ei"]:
                climber.update(values=dict(prop.raw), config=prop, ei=float(val))

    best = max(climbers, key=lambda c: c["ei"])
    return AcquisitionResult(subspace_id=subspace_id, config=best["config"],
                             ei_value=best["ei"])


def select_batch(results, B: int):
    """The B best per-subspace results, descending EI, ties to lower id."""
    if not 1 <= B <= len(results):
        raise ValueError(f"B={B} out of range 1..{len(results)}")
    ids = [r.subspace_id for r in results]
    if len(set(ids)) != len(ids):
        raise ValueError("expected one result per subspace")
    ranked = sorted(results, key=lambda r: (-r.ei_value, r.subspace_id))
    return ranked[:B]


def optimize_global_random(state, space, best_y_std: float, budget: int,
                           B: int, seed: int | None = None, rng=None):
    """Random-search acquisition over the whole space (many-subspace fallback).

    The budget is split evenly across subspaces; the best candidate of each
    subspace enters the ranking so the returned batch spans B distinct
    subspaces.
    """
    if budget < B:
        raise ValueError("budget must be >= B")
    predict = _predictor(state)
    if rng is None:
        rng = np.random.default_rng(seed)
    n = len(space.subspaces)
    per = budget // n
    extra = budget % n
    candidates = []
    for sub in space.subspaces:
        count = per + (1 if sub.id <= extra else 0)
        candidates.extend(
            sd.sample_with_rng(space, sub.id, rng) for _ in range(count)
        )
    if not candidates:
        raise ValueError("budget too small for this subspace count")
    means, variances = predict(candidates)
    ei = expected_improvement(means, variances, best_y_std)
    picked, seen = [], set()
    for i in np.argsort(-ei):
        cand = candidates[i]
        if cand.subspace_id in seen:
            continue
        seen.add(cand.subspace_id)
        picked.append(AcquisitionResult(cand.subspace_id, cand, float(ei[i])))
        if len(picked) == B:
            break
    return picked
