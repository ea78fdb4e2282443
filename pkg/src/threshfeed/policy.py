"""Decentralized, beam-symmetric feedback rules.

A rule maps one user's SINR vector to the set of beams that user requests
(possibly empty, the no-feedback symbol). Rules only ever see their own
user's vector, so decentralization holds by construction.

Beams are indexed from 0 here; beam 0 plays the role of "beam 1" in the
textbook statements (the beam whose feedback region defines the load).

All rule classes expose a vectorized ``request_mask(V)`` taking ``(..., M)``
SINR vectors and returning a boolean ``(..., M)`` mask; the scalar
:func:`evaluate_rule` is built on it.
"""

import itertools
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Optional

import numpy as np

from . import fading, rng
from .exceptions import ConfigurationError, DomainError, ShapeError

__all__ = [
    "FeedbackDecision",
    "FeedbackRule",
    "GeneralThreshold",
    "MaxSinrThreshold",
    "BoxUnion",
    "MaxSinrBoxUnion",
    "Predicate",
    "PolicySpec",
    "ProbabilityEstimate",
    "SymmetryReport",
    "evaluate_rule",
    "beam1_feedback_region_probability",
    "check_beam_symmetry",
    "random_probes",
    "random_box_union_rule",
    "random_box_union_policy",
    "random_max_sinr_box_union_policy",
    "rule_from_dict",
]


@dataclass(frozen=True)
class FeedbackDecision:
    """Beams requested by one user and the SINR values reported for them."""

    requested: frozenset = frozenset()
    reported: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))

    @property
    def is_empty(self):
        return not self.requested


def _as_vectors(V):
    V = np.asarray(V, dtype=np.float64)
    if V.ndim == 0:
        raise ShapeError("SINR input must have a beam axis")
    return V


def _argmax_onehot(V):
    idx = np.argmax(V, axis=-1)
    return np.arange(V.shape[-1]) == idx[..., None]


def _to_float(x):
    if isinstance(x, str) and x.strip().lower() in ("inf", "+inf", "infinity"):
        return math.inf
    return float(x)


class FeedbackRule:
    """Base class of per-user feedback rules."""

    #: True for rules that only ever request the argmax beam.
    max_sinr = False

    def request_mask(self, V):
        raise NotImplementedError

    def beam1_mask(self, V):
        return self.request_mask(V)[..., 0]

    def to_dict(self):
        raise ConfigurationError(f"{type(self).__name__} cannot be serialized")


@dataclass(frozen=True)
class GeneralThreshold(FeedbackRule):
    """Request every beam whose SINR is at least ``tau``."""

    tau: float

    def __post_init__(self):
        tau = _to_float(self.tau)
        if math.isnan(tau) or tau < 0:
            raise ConfigurationError(f"threshold must be >= 0, got {self.tau!r}")
        object.__setattr__(self, "tau", tau)

    def request_mask(self, V):
        return _as_vectors(V) >= self.tau

    def beam1_mask(self, V):
        return _as_vectors(V)[..., 0] >= self.tau

    def to_dict(self):
        return {"kind": "gtfp", "threshold": self.tau}


@dataclass(frozen=True)
class MaxSinrThreshold(FeedbackRule):
    """Request only the argmax beam, and only when its SINR is at least ``tau``."""

    tau: float
    max_sinr = True

    def __post_init__(self):
        tau = _to_float(self.tau)
        if math.isnan(tau) or tau < 0:
            raise ConfigurationError(f"threshold must be >= 0, got {self.tau!r}")
        object.__setattr__(self, "tau", tau)

    def request_mask(self, V):
        V = _as_vectors(V)
        return _argmax_onehot(V) & (V.max(axis=-1, keepdims=True) >= self.tau)

    def to_dict(self):
        return {"kind": "mtfp", "threshold": self.tau}


def _interval(pair):
    lo, hi = (_to_float(v) for v in pair)
    if math.isnan(lo) or math.isnan(hi) or lo < 0 or hi < lo:
        raise ConfigurationError(f"interval must satisfy 0 <= lo <= hi, got {pair!r}")
    return (lo, hi)


@dataclass(frozen=True)
class BoxUnion(FeedbackRule):
    """Finite union of half-open boxes, applied to every beam in turn.

    Beam ``k`` is requested when the feature vector
    ``(v_k, largest other entry, second largest other, ...)`` falls in one of
    the boxes. Each box is a sequence of ``[lo, hi)`` intervals over those
    coordinates; missing trailing coordinates are unconstrained. Sorting the
    other beams makes the rule symmetric under any beam permutation.
    """

    boxes: tuple

    def __post_init__(self):
        boxes = tuple(tuple(_interval(iv) for iv in box) for box in self.boxes)
        if any(len(box) == 0 for box in boxes):
            raise ConfigurationError("a box needs at least one interval")
        object.__setattr__(self, "boxes", boxes)

    def _member(self, feats):
        dims = feats.shape[-1]
        hit = np.zeros(feats.shape[:-1], dtype=bool)
        for box in self.boxes:
            if len(box) > dims:
                raise ShapeError(f"box has {len(box)} coordinates but vectors have {dims} beams")
            inside = np.ones(feats.shape[:-1], dtype=bool)
            for j, (lo, hi) in enumerate(box):
                inside &= (feats[..., j] >= lo) & (feats[..., j] < hi)
            hit |= inside
        return hit

    def _features(self, V, k):
        others = -np.sort(-np.delete(V, k, axis=-1), axis=-1)
        return np.concatenate([V[..., k : k + 1], others], axis=-1)

    def request_mask(self, V):
        V = _as_vectors(V)
        return np.stack([self._member(self._features(V, k)) for k in range(V.shape[-1])], axis=-1)

    def beam1_mask(self, V):
        V = _as_vectors(V)
        return self._member(self._features(V, 0))

    def to_dict(self):
        return {"kind": "box_union", "boxes": [[list(iv) for iv in box] for box in self.boxes]}


@dataclass(frozen=True)
class MaxSinrBoxUnion(FeedbackRule):
    """Request the argmax beam when the maximum SINR lies in a union of ``[lo, hi)``."""

    intervals: tuple
    max_sinr = True

    def __post_init__(self):
        object.__setattr__(self, "intervals", tuple(_interval(iv) for iv in self.intervals))

    def merged(self):
        """Disjoint, sorted version of ``intervals``."""
        out = []
        for lo, hi in sorted(iv for iv in self.intervals if iv[1] > iv[0]):
            if out and lo <= out[-1][1]:
                out[-1] = (out[-1][0], max(out[-1][1], hi))
            else:
                out.append((lo, hi))
        return out

    def request_mask(self, V):
        V = _as_vectors(V)
        vmax = V.max(axis=-1)
        hit = np.zeros(vmax.shape, dtype=bool)
        for lo, hi in self.intervals:
            hit |= (vmax >= lo) & (vmax < hi)
        return _argmax_onehot(V) & hit[..., None]

    def to_dict(self):
        return {"kind": "max_sinr_box_union", "intervals": [list(iv) for iv in self.intervals]}


@dataclass(frozen=True, eq=False)
class Predicate(FeedbackRule):
    """Opaque rule: ``func(v)`` returns the beam indices requested for vector ``v``.

    Nothing about symmetry is assumed; use :func:`check_beam_symmetry`.
    Set ``max_sinr=True`` only if ``func`` requests nothing but the argmax beam.
    """

    func: Callable
    max_sinr: bool = False
    label: str = "predicate"

    @classmethod
    def from_template(cls, accept_beam1, max_sinr=False, label="template"):
        """Symmetrized rule: beam ``k`` is requested iff ``accept_beam1`` holds
        for the vector with beams 0 and ``k`` swapped.

        With more than two beams this is only permutation symmetric when
        ``accept_beam1`` treats beams ``1 .. M-1`` interchangeably.
        """

        def func(v):
            out = []
            for k in range(len(v)):
                w = np.array(v, dtype=np.float64)
                w[[0, k]] = w[[k, 0]]
                if accept_beam1(w):
                    out.append(k)
            return out

        return cls(func, max_sinr=max_sinr, label=label)

    def request_mask(self, V):
        V = _as_vectors(V)
        flat = V.reshape(-1, V.shape[-1])
        mask = np.zeros(flat.shape, dtype=bool)
        for r, v in enumerate(flat):
            for k in self.func(v.copy()):
                if not 0 <= k < flat.shape[1]:
                    raise ShapeError(f"predicate returned beam {k} outside 0..{flat.shape[1] - 1}")
                mask[r, k] = True
        return mask.reshape(V.shape)


def evaluate_rule(rule, v):
    """Feedback packet produced by ``rule`` on one SINR vector."""
    if not isinstance(v, fading.SinrVector):
        v = fading.SinrVector(v)
    if isinstance(rule, BoxUnion) and any(len(b) > len(v) for b in rule.boxes):
        raise ShapeError("rule expects more beams than the vector has")
    mask = rule.request_mask(v.values)
    if mask.shape != v.values.shape:
        raise ShapeError("rule returned a mask of the wrong shape")
    beams = frozenset(int(k) for k in np.flatnonzero(mask))
    reported = MappingProxyType({k: float(v.values[k]) for k in sorted(beams)})
    return FeedbackDecision(beams, reported)


def rule_from_dict(d, model=None, user=0):
    """Build a rule from its config form.

    Threshold kinds accept ``threshold`` or ``probability``; a probability is
    the per-beam feedback probability and needs ``model`` to be resolved.
    """
    d = dict(d)
    kind = d.pop("kind", None)
    if kind == "never":
        return GeneralThreshold(math.inf)
    if kind == "always":
        return GeneralThreshold(0.0)
    if kind in ("gtfp", "mtfp"):
        if ("threshold" in d) == ("probability" in d):
            raise ConfigurationError(f"{kind} rule needs exactly one of threshold / probability")
        if "threshold" in d:
            tau = d["threshold"]
        else:
            if model is None:
                raise ConfigurationError("a probability-valued threshold needs a channel model")
            p = float(d["probability"])
            if kind == "gtfp":
                tau = fading.upper_quantile(model, p, "beam1", user=user)
            else:
                if p * model.m_beams > 1 + 1e-12:
                    raise ConfigurationError(f"mtfp per-beam probability must be <= 1/M, got {p}")
                tau = fading.upper_quantile(model, min(1.0, p * model.m_beams), "max", user=user)
        return GeneralThreshold(tau) if kind == "gtfp" else MaxSinrThreshold(tau)
    if kind == "box_union":
        return BoxUnion(d["boxes"])
    if kind == "max_sinr_box_union":
        return MaxSinrBoxUnion(d["intervals"])
    raise ConfigurationError(f"unknown rule kind {kind!r}")


@dataclass(frozen=True)
class PolicySpec:
    """System-wide policy: ``rules[i]`` is the feedback rule of user ``i``."""

    rules: tuple
    label: str = ""

    def __post_init__(self):
        rules = tuple(self.rules)
        if not rules:
            raise ConfigurationError("a policy needs at least one rule")
        for r in rules:
            if not isinstance(r, FeedbackRule):
                raise ConfigurationError(f"not a feedback rule: {r!r}")
        object.__setattr__(self, "rules", rules)

    @classmethod
    def homogeneous(cls, rule, n_users, label=""):
        return cls((rule,) * n_users, label)

    @property
    def n_users(self):
        return len(self.rules)

    @property
    def is_homogeneous(self):
        return all(r == self.rules[0] for r in self.rules[1:])

    @property
    def is_max_sinr(self):
        return all(r.max_sinr for r in self.rules)

    def replace(self, user, rule, label=None):
        rules = list(self.rules)
        rules[user] = rule
        return PolicySpec(tuple(rules), self.label if label is None else label)

    def request_masks(self, batch):
        """Boolean ``(T, M, n)`` request masks for a ``(T, M, n)`` SINR batch."""
        batch = np.asarray(batch)
        if batch.shape[-1] != self.n_users:
            raise ShapeError(f"policy has {self.n_users} rules but SINR input has {batch.shape[-1]} users")
        out = np.empty(batch.shape, dtype=bool)
        for i, rule in enumerate(self.rules):
            out[..., i] = rule.request_mask(batch[..., i])
        return out

    def to_dict(self):
        if self.is_homogeneous:
            return {"label": self.label, "rule": self.rules[0].to_dict()}
        return {"label": self.label, "rules": [r.to_dict() for r in self.rules]}

    @classmethod
    def from_dict(cls, d, model=None):
        label = d.get("label", "")
        if "rules" in d:
            return cls(tuple(rule_from_dict(r, model, i) for i, r in enumerate(d["rules"])), label)
        if "rule" in d and model is not None:
            return cls(tuple(rule_from_dict(d["rule"], model, i) for i in range(model.n_users)), label)
        raise ConfigurationError("policy block needs 'rules', or 'rule' together with a model")


# ---------------------------------------------------------------- probabilities

@dataclass(frozen=True)
class ProbabilityEstimate:
    value: float
    std_error: float
    method: str  # "closed-form", "table" or "monte-carlo"


def _table_se(p):
    return math.sqrt(max(p * (1.0 - p), 0.0) / fading.QUANTILE_TABLE_SIZE)


def beam1_feedback_region_probability(rule, model, sample_count=10**5, seed=0, user=0):
    """P(rule requests beam 0) for ``user`` under ``model``.

    Threshold rules and max-SINR interval rules go through the fading
    distribution functions; other rules are estimated from ``sample_count``
    seeded draws of the user's SINR vector.
    """
    if sample_count < 1000:
        raise DomainError("sample_count must be at least 1000")
    M = model.m_beams
    if isinstance(rule, GeneralThreshold):
        if math.isinf(rule.tau):
            return ProbabilityEstimate(0.0, 0.0, "closed-form")
        return ProbabilityEstimate(fading.marginal_sf(model, rule.tau, user), 0.0, "closed-form")
    if isinstance(rule, (MaxSinrThreshold, MaxSinrBoxUnion)):
        if isinstance(rule, MaxSinrThreshold):
            pieces = [(rule.tau, math.inf)]
        else:
            pieces = rule.merged()
        p = 0.0
        for lo, hi in pieces:
            upper = 0.0 if math.isinf(hi) else fading.max_sinr_sf(model, hi, user)
            lower = 0.0 if math.isinf(lo) else fading.max_sinr_sf(model, lo, user)
            p += lower - upper
        p = min(max(p / M, 0.0), 1.0)
        if M > 1 and model.is_beamforming:
            return ProbabilityEstimate(p, _table_se(p * M) / M, "table")
        return ProbabilityEstimate(p, 0.0, "closed-form")
    V = fading.sample_user_vectors(model, user, sample_count, seed, purpose=rng.AUXILIARY)
    hits = rule.beam1_mask(V)
    p = float(hits.mean())
    return ProbabilityEstimate(p, math.sqrt(p * (1.0 - p) / sample_count), "monte-carlo")


# ---------------------------------------------------------------- symmetry

@dataclass(frozen=True)
class SymmetryReport:
    symmetric: bool
    violation: Optional[dict] = None
    tie_deviations: tuple = ()
    probes_checked: int = 0
    permutations_checked: int = 0


def random_probes(model, count, seed, user=0):
    """SINR vectors drawn from ``model`` on a stream reserved for probing."""
    return fading.sample_user_vectors(model, user, count, seed, purpose=rng.PROBES)


def check_beam_symmetry(rule, probe_vectors):
    """Check that permuting the beams of a probe permutes the requested set alike.

    Mismatches on probes with exactly tied entries are listed as tie
    deviations (a measure-zero set under continuous fading) rather than
    violations.
    """
    P = np.array([p.values if isinstance(p, fading.SinrVector) else p for p in probe_vectors],
                 dtype=np.float64)
    if P.ndim != 2 or P.shape[0] == 0:
        raise DomainError("need a nonempty list of SINR vectors")
    M = P.shape[1]
    base = rule.request_mask(P)
    has_tie = np.array([np.unique(row).size < M for row in P])
    perms = list(itertools.permutations(range(M)))
    ties = []
    for perm in perms:
        perm = list(perm)
        got = rule.request_mask(P[:, perm])
        expected = base[:, perm]
        bad = np.flatnonzero(np.any(got != expected, axis=1))
        for r in bad:
            entry = {
                "probe": P[r].tolist(),
                "permutation": perm,
                "expected": np.flatnonzero(expected[r]).tolist(),
                "got": np.flatnonzero(got[r]).tolist(),
            }
            if has_tie[r]:
                ties.append(entry)
            else:
                return SymmetryReport(False, entry, tuple(ties), P.shape[0], len(perms))
    return SymmetryReport(True, None, tuple(ties), P.shape[0], len(perms))


# ---------------------------------------------------------------- random rules

def random_box_union_rule(m_beams, generator):
    """A random 1-3 box union; intervals are scaled for SINRs of order one."""
    boxes = []
    for _ in range(generator.integers(1, 4)):
        lo = float(generator.uniform(0.0, 1.5))
        hi = math.inf if generator.random() < 0.35 else lo + float(generator.exponential(0.8))
        box = [(lo, hi)]
        for _ in range(m_beams - 1):
            u = generator.random()
            c = float(generator.uniform(0.0, 1.0))
            if u < 0.4:
                box.append((0.0, math.inf))
            elif u < 0.7:
                box.append((0.0, c))
            else:
                box.append((c, math.inf))
        boxes.append(box)
    return BoxUnion(boxes)


def random_box_union_policy(n_users, m_beams, seed, label=None):
    """Heterogeneous policy with an independent random box union per user."""
    g = np.random.default_rng(seed)
    rules = tuple(random_box_union_rule(m_beams, g) for _ in range(n_users))
    return PolicySpec(rules, label or f"box_union_{seed}")


def random_max_sinr_box_union_policy(n_users, seed, label=None):
    """Heterogeneous max-SINR policy with 1-2 random intervals on the max SINR per user."""
    g = np.random.default_rng(seed)
    rules = []
    for _ in range(n_users):
        ivs = []
        for _ in range(g.integers(1, 3)):
            lo = float(g.uniform(0.0, 2.0))
            hi = math.inf if g.random() < 0.35 else lo + float(g.exponential(0.8))
            ivs.append((lo, hi))
        rules.append(MaxSinrBoxUnion(ivs))
    return PolicySpec(tuple(rules), label or f"max_sinr_box_union_{seed}")
