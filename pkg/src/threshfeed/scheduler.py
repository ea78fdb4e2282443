"""Max-SINR scheduling on each beam and Monte Carlo sum-rate estimation.

Every beam goes to the requesting user with the largest SINR on it; a beam
nobody requests carries zero rate. Rates are ``log(1 + SINR)`` in nats
unless ``log_base="bits"``.

Trials are simulated in fixed-size blocks that may run on a thread pool.
Each trial's SINR matrix depends only on ``(model, trial, seed)`` and the
reductions run once over the concatenated per-trial array, so estimates are
bit-identical for any number of workers. Policies evaluated in the same call
see the same SINR matrices (common random numbers).
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import fading
from .exceptions import DomainError, ShapeError
from .policy import beam1_feedback_region_probability

__all__ = [
    "BeamAssignment",
    "RateEstimate",
    "PairedDifference",
    "FeedbackLoad",
    "beam_rates",
    "instantaneous_rate",
    "simulate_rates",
    "ergodic_rate",
    "paired_difference",
    "conditional_rate_given_others",
    "feedback_load",
    "rate_estimate",
]

BLOCK_TRIALS = 8192
_UNITS = {"nats": 1.0, "bits": 1.0 / math.log(2.0)}


def _scale(log_base):
    try:
        return _UNITS[log_base]
    except KeyError:
        raise DomainError(f"log_base must be 'nats' or 'bits', got {log_base!r}") from None


@dataclass(frozen=True)
class BeamAssignment:
    """Per-beam winner (``None`` if nobody requested), winning SINR and contender set."""

    winners: tuple
    winning_sinr: tuple
    contenders: tuple


@dataclass(frozen=True)
class RateEstimate:
    mean: float
    std_error: float
    ci95: tuple
    trials: int
    seed: int
    per_beam_means: tuple
    unit: str = "nats"


@dataclass(frozen=True)
class PairedDifference:
    """Common-random-numbers estimate of ``R(a) - R(b)``."""

    mean: float
    std_error: float
    ci95: tuple
    trials: int
    seed: int
    unit: str = "nats"
    exact_zero: bool = False


@dataclass(frozen=True)
class FeedbackLoad:
    lambda_per_beam: float
    analytic: bool
    std_error: float
    per_user: tuple


def beam_rates(batch, masks):
    """Per-trial, per-beam rates in nats for ``(T, M, n)`` SINRs and request masks."""
    best = np.where(masks, batch, 0.0).max(axis=-1)
    return np.log1p(best)


def instantaneous_rate(policy, gamma, log_base="nats"):
    """Per-beam rates and the beam assignment for one SINR matrix.

    Returns ``(per_beam_rates, assignment)``; the total rate is
    ``per_beam_rates.sum()``.
    """
    values = gamma.values if isinstance(gamma, fading.SinrMatrix) else np.asarray(gamma, float)
    if values.ndim != 2:
        raise ShapeError("expected a beams x users SINR matrix")
    if values.shape[1] != policy.n_users:
        raise ShapeError(f"policy has {policy.n_users} rules, matrix has {values.shape[1]} users")
    masks = policy.request_masks(values[None])[0]
    rates = beam_rates(values[None], masks[None])[0] * _scale(log_base)
    winners, sinrs, contenders = [], [], []
    for m in range(values.shape[0]):
        users = np.flatnonzero(masks[m])
        contenders.append(frozenset(int(u) for u in users))
        if users.size == 0:
            winners.append(None)
            sinrs.append(0.0)
        else:
            w = int(users[np.argmax(values[m, users])])
            winners.append(w)
            sinrs.append(float(values[m, w]))
    return rates, BeamAssignment(tuple(winners), tuple(sinrs), tuple(contenders))


def _blocks(trials):
    return [(s, min(BLOCK_TRIALS, trials - s)) for s in range(0, trials, BLOCK_TRIALS)]


def simulate_rates(policies, model, trials, seed, jobs=1):
    """Per-trial per-beam rates (nats), one ``(trials, M)`` array per policy.

    All policies are evaluated on the same SINR matrices.
    """
    for p in policies:
        if p.n_users != model.n_users:
            raise ShapeError(f"policy {p.label!r} has {p.n_users} rules for {model.n_users} users")

    def work(block):
        start, count = block
        batch = fading.sample_sinr_batch(model, start, count, seed)
        return [beam_rates(batch, p.request_masks(batch)) for p in policies]

    blocks = _blocks(trials)
    if jobs > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(work, blocks))
    else:
        parts = [work(b) for b in blocks]
    return [np.concatenate([part[k] for part in parts]) for k in range(len(policies))]


def rate_estimate(rates, seed, log_base="nats"):
    """Summarize ``(T, M)`` per-trial per-beam rates given in nats."""
    scale = _scale(log_base)
    T = rates.shape[0]
    per_beam = rates.mean(axis=0) * scale
    totals = rates.sum(axis=1) * scale
    mean = float(per_beam.sum())
    se = float(totals.std(ddof=1) / math.sqrt(T)) if T > 1 else math.inf
    return RateEstimate(
        mean=mean, std_error=se, ci95=(mean - 1.96 * se, mean + 1.96 * se),
        trials=T, seed=seed, per_beam_means=tuple(float(v) for v in per_beam), unit=log_base,
    )


def difference_estimate(rates_a, rates_b, seed, log_base="nats"):
    scale = _scale(log_base)
    d = (rates_a.sum(axis=1) - rates_b.sum(axis=1)) * scale
    T = d.size
    mean = float(d.mean())
    se = float(d.std(ddof=1) / math.sqrt(T)) if T > 1 else math.inf
    return PairedDifference(
        mean=mean, std_error=se, ci95=(mean - 1.96 * se, mean + 1.96 * se), trials=T,
        seed=seed, unit=log_base, exact_zero=bool(np.all(d == 0)),
    )


def _check_trials(trials):
    if trials < 100:
        raise DomainError("need at least 100 trials")


def ergodic_rate(policy, model, trials, seed, log_base="nats", jobs=1):
    """Monte Carlo ergodic sum rate of ``policy`` under ``model``."""
    _check_trials(trials)
    (rates,) = simulate_rates([policy], model, trials, seed, jobs)
    return rate_estimate(rates, seed, log_base)


def paired_difference(policy_a, policy_b, model, trials, seed, log_base="nats", jobs=1):
    """``R(policy_a) - R(policy_b)`` estimated on common SINR matrices."""
    _check_trials(trials)
    ra, rb = simulate_rates([policy_a, policy_b], model, trials, seed, jobs)
    return difference_estimate(ra, rb, seed, log_base)


def _conditional_batch(model, fixed_others, trials, seed):
    M, n = model.m_beams, model.n_users
    user0 = fading.sample_user_vectors(model, 0, trials, seed)
    batch = np.empty((trials, M, n))
    batch[:, :, 0] = user0
    if n > 1:
        others = fixed_others.values if isinstance(fixed_others, fading.SinrMatrix) else fixed_others
        others = np.asarray(others, dtype=np.float64)
        if others.shape != (M, n - 1):
            raise ShapeError(f"fixed columns must have shape {(M, n - 1)}, got {others.shape}")
        batch[:, :, 1:] = others[None]
    return batch


def conditional_rate_given_others(policy, model, fixed_others, trials, seed, log_base="nats",
                                  compare_with=None):
    """Rate conditioned on the SINR columns of users 1..n-1.

    Only user 0's column is resampled. With ``compare_with`` the return value
    is ``(estimate, PairedDifference(policy - compare_with))`` on the same draws.
    """
    _check_trials(trials)
    if policy.n_users != model.n_users:
        raise ShapeError("policy size does not match the model")
    batch = _conditional_batch(model, fixed_others, trials, seed)
    rates = beam_rates(batch, policy.request_masks(batch))
    est = rate_estimate(rates, seed, log_base)
    if compare_with is None:
        return est
    other = beam_rates(batch, compare_with.request_masks(batch))
    return est, difference_estimate(rates, other, seed, log_base)


def feedback_load(policy, model, samples=10**5, seed=0):
    """Expected number of users requesting beam 0 (the per-beam load)."""
    if policy.n_users != model.n_users:
        raise ShapeError("policy size does not match the model")
    probs = [beam1_feedback_region_probability(r, model, samples, seed, user=i)
             for i, r in enumerate(policy.rules)]
    return FeedbackLoad(
        lambda_per_beam=float(math.fsum(p.value for p in probs)),
        analytic=all(p.method == "closed-form" for p in probs),
        std_error=math.sqrt(math.fsum(p.std_error ** 2 for p in probs)),
        per_user=tuple(p.value for p in probs),
    )
