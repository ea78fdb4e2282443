"""Load-matched threshold rules and the rate comparisons that justify them.

Given any beam-symmetric policy ``F``, each user's rule is replaced by a
threshold rule requesting beam 0 with the same probability (same feedback
load). Switching users one at a time gives hybrids ``F^0 = F, F^1, ..., F^n = T``
whose sum rates should never decrease. This module builds the matched
rules, classifies single-user switches into loss / gain / neutral outcomes
two independent ways, and checks the rate inequalities by paired Monte Carlo.

Two families are supported: ``"gtfp"`` (threshold on the beam-0 SINR, any
number of beams per user) and ``"mtfp"`` (threshold on the maximum SINR,
argmax beam only, for max-SINR policies).
"""

import dataclasses
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import fading, rng
from .exceptions import ContractError, DomainError, PolicyKindError, SymmetryError
from .policy import (
    GeneralThreshold,
    MaxSinrBoxUnion,
    MaxSinrThreshold,
    PolicySpec,
    beam1_feedback_region_probability,
    check_beam_symmetry,
    random_probes,
)
from .scheduler import (
    beam_rates,
    conditional_rate_given_others,
    difference_estimate,
    rate_estimate,
    simulate_rates,
)

__all__ = [
    "EventClass",
    "MatchedPolicyPair",
    "RegionPartition",
    "match_gtfp",
    "match_mtfp",
    "match_policy",
    "one_user_switch",
    "classify_event_by_rate",
    "classify_event_by_lemma",
    "classify_events_by_rate",
    "classify_events_by_lemma",
    "mass_balance",
    "event_statistics",
    "verify_theorem1",
    "verify_monotone_chain",
]

SE_SLACK = 3.0
LOAD_TOLERANCE_PER_USER = 1e-3


class EventClass(str, enum.Enum):
    LOSS = "loss"
    GAIN = "gain"
    NEUTRAL = "neutral"


_CODES = {-1: EventClass.LOSS, 0: EventClass.NEUTRAL, 1: EventClass.GAIN}


@dataclass(frozen=True)
class MatchedPolicyPair:
    """A policy and its load-matched threshold policy."""

    original: PolicySpec
    matched: PolicySpec
    kind: str
    thresholds: tuple
    probabilities: tuple
    probability_errors: tuple
    load_original: float
    load_matched: float

    @property
    def tolerance(self):
        return abs(self.load_original - self.load_matched)

    def partition(self, user=0):
        return RegionPartition(self.original.rules[user], self.thresholds[user], self.kind)


@dataclass(frozen=True)
class RegionPartition:
    """Split of one user's SINR space around the matched threshold.

    ``S_L``: the original rule requests beam 0 but the statistic is below the
    threshold. ``S_R``: requested and at or above it. ``S_bar_R``: not
    requested although the threshold rule would request beam 0. The
    statistic is the beam-0 SINR for ``gtfp`` and the maximum SINR for
    ``mtfp`` (whose threshold rule also needs beam 0 to be the argmax).
    """

    rule: object
    tau: float
    kind: str

    def _stat(self, V):
        V = np.asarray(V, dtype=np.float64)
        return V[..., 0] if self.kind == "gtfp" else V.max(axis=-1)

    def s_left(self, V):
        return self.rule.beam1_mask(V) & (self._stat(V) < self.tau)

    def s_right(self, V):
        return self.rule.beam1_mask(V) & (self._stat(V) >= self.tau)

    def s_bar_right(self, V):
        V = np.asarray(V, dtype=np.float64)
        out = ~self.rule.beam1_mask(V) & (self._stat(V) >= self.tau)
        if self.kind == "mtfp":
            out &= np.argmax(V, axis=-1) == 0
        return out


def _check_symmetric(policy, model, probes, seed):
    if probes <= 0:
        return
    P = random_probes(model, probes, seed)
    seen = {}
    for rule in policy.rules:
        key = id(rule)
        if key in seen:
            continue
        report = check_beam_symmetry(rule, P)
        seen[key] = report
        if not report.symmetric:
            raise SymmetryError("policy is not beam symmetric", report)


def _empirical_threshold(stat, k):
    """Threshold with exactly ``k`` entries of ``stat`` at or above it."""
    N = stat.size
    if k <= 0:
        return math.inf
    if k >= N:
        return 0.0
    desc = -np.sort(-stat)
    lo, hi = float(desc[k]), float(desc[k - 1])
    tau = 0.5 * (lo + hi)
    return max(tau, 0.0) if tau > lo else hi


def _match_user(rule, model, user, samples, seed, kind):
    """Return ``(tau, p_hat, err)`` for one user.

    ``err`` is the standard error of P(threshold rule) - P(original rule)
    left over after matching.
    """
    M = model.m_beams
    if kind == "gtfp" and isinstance(rule, GeneralThreshold):
        p = beam1_feedback_region_probability(rule, model, samples, seed, user).value
        return fading.upper_quantile(model, p, "beam1", user), p, 0.0
    if kind == "mtfp" and isinstance(rule, (MaxSinrThreshold, MaxSinrBoxUnion)):
        est = beam1_feedback_region_probability(rule, model, samples, seed, user)
        tau = fading.upper_quantile(model, min(1.0, M * est.value), "max", user)
        if est.method != "table":
            return tau, est.value, 0.0
        table = fading.max_sinr_table(model, user)
        inside = rule.request_mask(np.stack([table] + [np.zeros_like(table)] * (M - 1), axis=-1))[:, 0]
        sym = float(np.mean(inside ^ (table >= tau)))
        return tau, est.value, math.sqrt(sym / table.size) / M
    # Monte Carlo rules: the threshold is the empirical quantile of the very
    # sample that estimated p_hat, so both loads agree on that sample.
    V = fading.sample_user_vectors(model, user, samples, seed, purpose=rng.AUXILIARY)
    fb = rule.beam1_mask(V)
    if kind == "gtfp":
        stat = V[:, 0]
    else:
        stat = np.where(np.argmax(V, axis=-1) == 0, V.max(axis=-1), -1.0)
    k = int(fb.sum())
    tau = _empirical_threshold(stat, k)
    sym = float(np.mean(fb ^ (stat >= tau)))
    return tau, k / samples, math.sqrt(sym / samples)


def _match(policy, model, samples, seed, kind, probes):
    if policy.n_users != model.n_users:
        raise ContractError(f"policy has {policy.n_users} rules for {model.n_users} users")
    _check_symmetric(policy, model, probes, seed)
    # with one beam the max-SINR and beam-0 statistics coincide
    calc_kind = "gtfp" if model.m_beams == 1 else kind
    rule_cls = GeneralThreshold if kind == "gtfp" else MaxSinrThreshold
    taus, probs, errs, rules = [], [], [], []
    for i, rule in enumerate(policy.rules):
        tau, p, err = _match_user(rule, model, i, samples, seed, calc_kind)
        taus.append(tau)
        probs.append(p)
        errs.append(err)
        rules.append(rule_cls(tau))
    matched = PolicySpec(tuple(rules), f"{policy.label}:{kind}")
    pair = MatchedPolicyPair(
        original=policy, matched=matched, kind=kind, thresholds=tuple(taus),
        probabilities=tuple(probs), probability_errors=tuple(errs),
        load_original=math.fsum(probs), load_matched=0.0,
    )
    load = math.fsum(_matched_load(pair, model, i) for i in range(policy.n_users))
    return dataclasses.replace(pair, load_matched=load)


def match_gtfp(policy, model, samples=10**6, seed=0, probes=500):
    """Per user, the beam-0 threshold with the same beam-0 feedback probability.

    ``samples`` draws estimate the probability for rules without a closed
    form. Raises :class:`SymmetryError` if any rule fails the beam-symmetry
    check on ``probes`` random SINR vectors (``probes=0`` skips it).
    """
    return _match(policy, model, samples, seed, "gtfp", probes)


def match_mtfp(policy, model, samples=10**6, seed=0, probes=500):
    """Per user, the max-SINR threshold ``tau`` with P(argmax = 0, max >= tau) matched.

    The policy must be of max-SINR kind. With one beam this coincides with
    :func:`match_gtfp`.
    """
    if not policy.is_max_sinr:
        raise PolicyKindError("MTFP matching needs a max-SINR policy")
    return _match(policy, model, samples, seed, "mtfp", probes)


def match_policy(policy, model, kind="auto", **kwargs):
    kind = _resolve_kind(policy, kind)
    return (match_gtfp if kind == "gtfp" else match_mtfp)(policy, model, **kwargs)


def _resolve_kind(policy, kind):
    if kind == "auto":
        return "mtfp" if policy.is_max_sinr else "gtfp"
    if kind not in ("gtfp", "mtfp"):
        raise DomainError(f"kind must be 'gtfp', 'mtfp' or 'auto', got {kind!r}")
    if kind == "mtfp" and not policy.is_max_sinr:
        raise PolicyKindError("MTFP verification needs a max-SINR policy")
    return kind


def one_user_switch(policy, pair, k):
    """Hybrid policy with users ``0 .. k-1`` switched to their matched threshold rules.

    ``k = 0`` returns ``policy`` itself and ``k = n`` the full threshold policy.
    """
    n = policy.n_users
    if pair.matched.n_users != n:
        raise ContractError("matched pair and policy disagree on the number of users")
    if not 0 <= k <= n:
        raise IndexError(f"k must lie in 0..{n}, got {k}")
    if k == 0:
        return policy
    rules = pair.matched.rules[:k] + policy.rules[k:]
    return PolicySpec(rules, f"{policy.label}^{k}")


# ---------------------------------------------------------------- events

def _beam0_rate(batch, masks):
    return beam_rates(batch[:, :1, :], masks[:, :1, :])[:, 0]


def _others_best(batch, masks):
    """Best beam-0 SINR among requesting users other than user 0 (0 if none)."""
    if batch.shape[-1] == 1:
        return np.zeros(batch.shape[0])
    return np.where(masks[:, 0, 1:], batch[:, 0, 1:], 0.0).max(axis=-1)


def _as_batch(gamma):
    values = gamma.values if isinstance(gamma, fading.SinrMatrix) else np.asarray(gamma, float)
    return values[None] if values.ndim == 2 else values


def _same_except_first(F, F1):
    if F.n_users != F1.n_users:
        raise ContractError("policies have different numbers of users")
    if any(a != b for a, b in zip(F.rules[1:], F1.rules[1:])):
        raise ContractError("policies must differ only in user 0's rule")


def classify_events_by_rate(F, F1, batch):
    """Event codes (-1 loss, 0 neutral, +1 gain) from beam-0 rates of ``F1`` vs ``F``."""
    _same_except_first(F, F1)
    batch = _as_batch(batch)
    r = _beam0_rate(batch, F.request_masks(batch))
    r1 = _beam0_rate(batch, F1.request_masks(batch))
    return np.sign(r1 - r).astype(np.int8)


def classify_events_by_lemma(pair, batch):
    """Event codes from set membership alone.

    Loss: user 0 is in ``S_L`` and beats every other beam-0 requester.
    Gain: user 0 is in ``S_bar_R`` and beats every other beam-0 requester.
    """
    batch = _as_batch(batch)
    part = pair.partition(0)
    v0 = batch[:, :, 0]
    own = v0[:, 0] if pair.kind == "gtfp" else v0.max(axis=-1)
    others = _others_best(batch, pair.original.request_masks(batch))
    beats = others < own
    codes = np.zeros(batch.shape[0], dtype=np.int8)
    codes[part.s_left(v0) & beats] = -1
    codes[part.s_bar_right(v0) & beats] = 1
    return codes


def classify_event_by_rate(F, F1, gamma):
    """Loss / gain / neutral for one SINR matrix by comparing beam-0 rates."""
    return _CODES[int(classify_events_by_rate(F, F1, gamma)[0])]


def classify_event_by_lemma(pair, gamma):
    """Loss / gain / neutral for one SINR matrix from the set characterizations."""
    return _CODES[int(classify_events_by_lemma(pair, gamma)[0])]


def mass_balance(pair, model, samples, seed):
    """Per user, P(S_bar_R) - P(S_L) with a standard error.

    Both masses are estimated on fresh draws; the standard error also carries
    the uncertainty of the matched probability itself.
    """
    out = []
    for i in range(model.n_users):
        part = pair.partition(i)
        V = fading.sample_user_vectors(model, i, samples, seed, purpose=rng.CHANNEL)
        left = part.s_left(V)
        bar_right = part.s_bar_right(V)
        d = bar_right.astype(float) - left.astype(float)
        se = math.sqrt(d.var(ddof=1) / samples + pair.probability_errors[i] ** 2)
        diff = float(d.mean())
        out.append({
            "user": i,
            "mass_s_left": float(left.mean()),
            "mass_s_bar_right": float(bar_right.mean()),
            "difference": diff,
            "std_error": se,
            "ok": abs(diff) <= SE_SLACK * se or diff == 0.0,
        })
    return out


def event_statistics(pair, model, trials, seed):
    """Compare both classifiers for the user-0 switch on ``trials`` SINR matrices."""
    F = pair.original
    F1 = one_user_switch(F, pair, 1)
    counts = {c: 0 for c in EventClass}
    agree = 0
    disagreements = []
    for start in range(0, trials, 8192):
        count = min(8192, trials - start)
        batch = fading.sample_sinr_batch(model, start, count, seed)
        by_rate = classify_events_by_rate(F, F1, batch)
        by_lemma = classify_events_by_lemma(pair, batch)
        same = by_rate == by_lemma
        agree += int(same.sum())
        for code, cls in _CODES.items():
            counts[cls] += int((by_rate == code).sum())
        for t in np.flatnonzero(~same)[: max(0, 5 - len(disagreements))]:
            disagreements.append({"trial": start + int(t), "by_rate": _CODES[int(by_rate[t])].value,
                                  "by_lemma": _CODES[int(by_lemma[t])].value})
    return {
        "trials": trials,
        "agreement": agree / trials,
        "frequencies": {c.value: counts[c] / trials for c in EventClass},
        "disagreements": disagreements,
    }


# ---------------------------------------------------------------- verification

@dataclass
class Theorem1Report:
    label: str
    kind: str
    threshold: float
    matched_probability: float
    difference: object
    load_original: float
    load_switched: float
    load_tolerance: float
    event_frequencies: dict
    bound_checks: dict
    conditional_checks: list = field(default_factory=list)

    @property
    def load_ok(self):
        return abs(self.load_original - self.load_switched) <= self.load_tolerance

    @property
    def rate_ok(self):
        d = self.difference
        return d.exact_zero or d.mean >= -SE_SLACK * d.std_error

    @property
    def passed(self):
        return self.rate_ok and self.load_ok

    def to_dict(self):
        d = self.difference
        return {
            "label": self.label,
            "kind": self.kind,
            "threshold_user0": self.threshold,
            "matched_probability_user0": self.matched_probability,
            "rate_difference": d.mean,
            "std_error": d.std_error,
            "trials": d.trials,
            "seed": d.seed,
            "unit": d.unit,
            "load_original": self.load_original,
            "load_switched": self.load_switched,
            "load_tolerance": self.load_tolerance,
            "event_frequencies": self.event_frequencies,
            "bound_checks": self.bound_checks,
            "conditional_checks": self.conditional_checks,
            "rate_ok": self.rate_ok,
            "load_ok": self.load_ok,
            "passed": self.passed,
        }


def verify_theorem1(policy, model, trials, seed, kind="auto", samples=10**6, spot_checks=5,
                    spot_trials=2000, log_base="nats", pair=None):
    """Check that switching user 0 to its matched threshold rule does not lower the sum rate.

    The rate difference ``R(F^1) - R(F)`` is estimated on common SINR
    matrices and passes when it is at least ``-3`` standard errors and the
    loads agree within ``1e-3 * n``. The report also tabulates loss / gain /
    neutral frequencies, checks the per-realization rate bounds on those
    events, and runs ``spot_checks`` conditional comparisons with the other
    users' SINRs held fixed.
    """
    kind = _resolve_kind(policy, kind)
    if pair is None:
        pair = match_policy(policy, model, kind, samples=samples, seed=seed)
    F1 = one_user_switch(policy, pair, 1)
    tau = pair.thresholds[0]
    log_tau = math.log1p(tau)
    rates_f, rates_f1 = [], []
    counts = {c: 0 for c in EventClass}
    loss_bound_violations = 0
    gain_identity_violations = 0
    for start in range(0, trials, 8192):
        count = min(8192, trials - start)
        batch = fading.sample_sinr_batch(model, start, count, seed)
        masks_f = policy.request_masks(batch)
        masks_f1 = F1.request_masks(batch)
        rf = beam_rates(batch, masks_f)
        rf1 = beam_rates(batch, masks_f1)
        rates_f.append(rf)
        rates_f1.append(rf1)
        codes = np.sign(rf1[:, 0] - rf[:, 0]).astype(np.int8)
        for code, cls in _CODES.items():
            counts[cls] += int((codes == code).sum())
        loss = codes == -1
        gain = codes == 1
        loss_bound_violations += int(np.sum(rf[loss, 0] > log_tau))
        others = _others_best(batch, masks_f)
        gain_identity_violations += int(np.sum(rf[gain, 0] != np.log1p(others[gain])))
    diff = difference_estimate(np.concatenate(rates_f1), np.concatenate(rates_f), seed, log_base)

    switched_load = (pair.load_original - pair.probabilities[0]
                     + _matched_load(pair, model, 0))
    conditional = []
    n = model.n_users
    for j in range(spot_checks):
        cond_seed = seed + 7919 * (j + 1)
        others = fading.sample_sinr_matrix(model, trials + j, seed).values[:, 1:]
        _, cd = conditional_rate_given_others(F1, model, others if n > 1 else None, spot_trials,
                                              cond_seed, log_base, compare_with=policy)
        conditional.append({"draw": j, "difference": cd.mean, "std_error": cd.std_error,
                            "ok": cd.exact_zero or cd.mean >= -SE_SLACK * cd.std_error})
    return Theorem1Report(
        label=policy.label, kind=kind, threshold=tau, matched_probability=pair.probabilities[0],
        difference=diff, load_original=pair.load_original, load_switched=switched_load,
        load_tolerance=LOAD_TOLERANCE_PER_USER * n,
        event_frequencies={c.value: counts[c] / trials for c in EventClass},
        bound_checks={"loss_bound_violations": loss_bound_violations,
                      "gain_identity_violations": gain_identity_violations},
        conditional_checks=conditional,
    )


def _matched_load(pair, model, user):
    tau = pair.thresholds[user]
    if math.isinf(tau):
        return 0.0
    if pair.kind == "gtfp":
        return fading.marginal_sf(model, tau, user=user)
    return fading.max_sinr_sf(model, tau, user=user) / model.m_beams


@dataclass
class ChainReport:
    label: str
    kind: str
    rates: list
    differences: list
    loads: list
    load_tolerance: float

    @property
    def steps_ok(self):
        return [d.exact_zero or d.mean >= -SE_SLACK * d.std_error for d in self.differences]

    @property
    def load_ok(self):
        return max(abs(x - self.loads[0]) for x in self.loads) <= self.load_tolerance

    @property
    def passed(self):
        return all(self.steps_ok) and self.load_ok

    def to_dict(self):
        return {
            "label": self.label,
            "kind": self.kind,
            "rates": self.rates,
            "steps": [
                {"k": k + 1, "difference": d.mean, "std_error": d.std_error, "ok": ok}
                for k, (d, ok) in enumerate(zip(self.differences, self.steps_ok))
            ],
            "loads": self.loads,
            "load_tolerance": self.load_tolerance,
            "load_ok": self.load_ok,
            "passed": self.passed,
        }


def verify_monotone_chain(policy, model, trials, seed, kind="auto", samples=10**6,
                          log_base="nats", jobs=1, pair=None):
    """Evaluate ``F^0 .. F^n`` on common SINR matrices and check each step is nondecreasing."""
    kind = _resolve_kind(policy, kind)
    if pair is None:
        pair = match_policy(policy, model, kind, samples=samples, seed=seed)
    n = policy.n_users
    chain = [one_user_switch(policy, pair, k) for k in range(n + 1)]
    rates = simulate_rates(chain, model, trials, seed, jobs)
    diffs = [difference_estimate(rates[k + 1], rates[k], seed, log_base) for k in range(n)]
    matched = [_matched_load(pair, model, i) for i in range(n)]
    loads = [math.fsum(matched[:k] + list(pair.probabilities[k:])) for k in range(n + 1)]
    return ChainReport(
        label=policy.label, kind=kind,
        rates=[rate_estimate(r, seed, log_base).mean for r in rates],
        differences=diffs, loads=loads, load_tolerance=LOAD_TOLERANCE_PER_USER * n,
    )
