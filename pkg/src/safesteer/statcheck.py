"""Chernoff sample-size planning and the Bernoulli estimators that turn
episode outcomes and weight-sample indicators into certified probability
estimates."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import bayes, sim, uncertainty


@dataclass(frozen=True)
class PrecisionSpec:
    """Absolute error bound theta and confidence parameter gamma."""

    theta: float
    gamma: float

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ValueError("theta must be in (0, 1)")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")


def chernoff_sample_size(spec: PrecisionSpec) -> int:
    """Smallest n with n > ln(2/gamma) / (2 theta^2), which guarantees
    P(|estimate - truth| > theta) <= gamma for Bernoulli means."""
    bound = math.log(2.0 / spec.gamma) / (2.0 * spec.theta ** 2)
    return int(math.floor(bound)) + 1


@dataclass(frozen=True)
class SafetyEstimate:
    eta_hat: float
    n: int
    spec: PrecisionSpec
    safe_count: int
    handover_count: int
    collision_count: int
    out_of_bounds_count: int
    error_count: int
    autonomy_rate: float


def _outcome_counts(outcomes: list[str], spec: PrecisionSpec) -> SafetyEstimate:
    n = len(outcomes)
    safe = sum(1 for o in outcomes if o in ("completed", "handover"))
    handover = outcomes.count("handover")
    return SafetyEstimate(
        eta_hat=safe / n,
        n=n,
        spec=spec,
        safe_count=safe,
        handover_count=handover,
        collision_count=outcomes.count("collided"),
        out_of_bounds_count=outcomes.count("out_of_bounds"),
        error_count=outcomes.count("error"),
        autonomy_rate=1.0 - handover / n,
    )


def estimate_bernoulli(trial, spec: PrecisionSpec, master_seed) -> tuple[float, int]:
    """Plan n with the Chernoff bound and average n independent indicator
    trials; trial(rng) -> bool."""
    n = chernoff_sample_size(spec)
    hits = 0
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([*_seed_key(master_seed), i]))
        hits += bool(trial(rng))
    return hits / n, n


def _seed_key(seed) -> list[int]:
    return list(seed) if isinstance(seed, (list, tuple)) else [seed]


def _run_indexed_episode(args):
    scenario, controller, monitor, master_seed, idx = args
    path = sim.run_episode(scenario, controller, monitor, seed=[*_seed_key(master_seed), idx])
    return idx, path.outcome


def estimate_probabilistic_safety(scenario: sim.ScenarioConfig, controller,
                                  monitor: sim.MonitorPolicy | None,
                                  spec: PrecisionSpec, master_seed,
                                  jobs: int = 1) -> SafetyEstimate:
    """Run the Chernoff-planned number of episodes with per-index seeds and
    count safe runs. Episode failures count as unsafe (reported separately).
    Results merge by index, so the estimate is independent of jobs."""
    n = chernoff_sample_size(spec)
    tasks = [(scenario, controller, monitor, master_seed, i) for i in range(n)]
    if jobs > 1:
        chunk = max(1, n // (jobs * 8))
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_indexed_episode, tasks, chunksize=chunk))
    else:
        results = [_run_indexed_episode(t) for t in tasks]
    results.sort(key=lambda pair: pair[0])
    return _outcome_counts([outcome for _, outcome in results], spec)


def estimate_decision_confidence_offline(posterior: bayes.Posterior,
                                         features_or_image: np.ndarray,
                                         spec: PrecisionSpec, seed,
                                         eps: float = 0.1,
                                         bins: uncertainty.Binning = uncertainty.DEFAULT_BINNING,
                                         decision: uncertainty.Decision | None = None,
                                         ) -> tuple[float, int]:
    """Audit of the fixed-sample real-time confidence: draw the
    Chernoff-planned number of weight samples for one observation and
    evaluate the epsilon-ball indicator."""
    n = chernoff_sample_size(spec)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    pred = uncertainty.predictive(posterior, features_or_image, n, rng)
    if decision is None:
        decision = uncertainty.decide(pred, bins)
    return uncertainty.decision_confidence(pred, decision, eps, bins), n


def autonomy_rate(paths: list[sim.EpisodePath]) -> float:
    """Fraction of episodes that never handed control back."""
    if not paths:
        raise ValueError("empty path list")
    return sum(1 for p in paths if p.outcome != "handover") / len(paths)
