"""Threshold selection under a feedback budget.

Thresholds are parameterized by per-user feedback probabilities ``p_i``
(the probability that user ``i`` requests beam 0), which turns the budget
into the linear constraint ``sum(p) <= budget`` over a box. For ``"gtfp"``
policies ``p_i`` lies in ``[0, 1]``; for ``"mtfp"`` policies each user can
request beam 0 at most a ``1/M`` fraction of the time, so ``p_i <= 1/M``.

All methods query one :class:`RateOracle`, which draws its SINR matrices
once; every candidate is scored on the same realizations, so comparisons
between candidates are common-random-numbers comparisons and reruns with the
same seed give the same trace.
"""

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import fading
from .exceptions import ConfigurationError, DomainError
from .policy import GeneralThreshold, MaxSinrThreshold, PolicySpec
from .scheduler import BLOCK_TRIALS, beam_rates, difference_estimate, rate_estimate

__all__ = [
    "ThresholdVector",
    "OptimizationResult",
    "RateOracle",
    "golden_section",
    "homogeneous_search",
    "coordinate_ascent",
    "simplex_grid",
    "grid_step_modulus",
]

INVPHI = (math.sqrt(5.0) - 1.0) / 2.0
FEASIBILITY_SLACK = 1e-9


@dataclass(frozen=True)
class ThresholdVector:
    taus: tuple
    probs: tuple

    def policy(self, kind="gtfp", label=""):
        cls = GeneralThreshold if kind == "gtfp" else MaxSinrThreshold
        return PolicySpec(tuple(cls(t) for t in self.taus), label)


@dataclass
class OptimizationResult:
    best: ThresholdVector
    rate: object
    method: str
    iterations: int
    oracle_calls: int
    trace: list = field(default_factory=list)
    surface: list = None

    def trace_rows(self):
        rows = []
        for it, probs, taus, est in self.trace:
            row = {"iteration": it}
            row.update({f"p{i}": p for i, p in enumerate(probs)})
            row.update({f"tau{i}": t for i, t in enumerate(taus)})
            row.update({"rate": est.mean, "std_error": est.std_error})
            rows.append(row)
        return rows

    def surface_rows(self):
        rows = []
        for probs, est in self.surface or []:
            row = {f"p{i}": p for i, p in enumerate(probs)}
            row.update({"rate": est.mean, "std_error": est.std_error})
            rows.append(row)
        return rows


class RateOracle:
    """Sum rate of the threshold policy at feedback probabilities ``p``.

    Parameters
    ----------
    model : ChannelModel
    kind : {"gtfp", "mtfp"}
    trials, seed : int
        The SINR sample shared by every evaluation.
    jobs : int
        Worker threads for sampling and evaluation; results do not depend on it.
    """

    def __init__(self, model, kind="gtfp", trials=10**5, seed=0, log_base="nats", jobs=1):
        if kind not in ("gtfp", "mtfp"):
            raise DomainError(f"kind must be 'gtfp' or 'mtfp', got {kind!r}")
        if trials < 100:
            raise DomainError("need at least 100 trials")
        self.model = model
        self.kind = kind
        self.trials = trials
        self.seed = seed
        self.log_base = log_base
        self.jobs = jobs
        self.p_max = 1.0 if kind == "gtfp" else 1.0 / model.m_beams
        self.calls = 0
        self._cache = {}
        self._tau_cache = {}
        self._blocks = [(s, min(BLOCK_TRIALS, trials - s)) for s in range(0, trials, BLOCK_TRIALS)]
        self._batches = self._map(lambda b: fading.sample_sinr_batch(model, b[0], b[1], seed), self._blocks)

    @property
    def n_users(self):
        return self.model.n_users

    def _map(self, fn, items):
        if self.jobs > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]

    def _key(self, probs):
        probs = tuple(float(p) for p in probs)
        if len(probs) != self.n_users:
            raise DomainError(f"expected {self.n_users} probabilities, got {len(probs)}")
        if any(not (-FEASIBILITY_SLACK <= p <= self.p_max + FEASIBILITY_SLACK) for p in probs):
            raise DomainError(f"probabilities must lie in [0, {self.p_max}]")
        return tuple(min(max(p, 0.0), self.p_max) for p in probs)

    def thresholds(self, probs):
        probs = self._key(probs)
        M = self.model.m_beams
        taus = []
        for i, p in enumerate(probs):
            key = (self.model.user_law(i), p)
            if key not in self._tau_cache:
                if self.kind == "gtfp":
                    tau = fading.upper_quantile(self.model, p, "beam1", user=i)
                else:
                    tau = fading.upper_quantile(self.model, min(1.0, M * p), "max", user=i)
                self._tau_cache[key] = tau
            taus.append(self._tau_cache[key])
        return tuple(taus)

    def threshold_vector(self, probs):
        return ThresholdVector(self.thresholds(probs), self._key(probs))

    def rates(self, probs):
        """Per-trial per-beam rates (nats) of the policy at ``probs``."""
        policy = self.threshold_vector(probs).policy(self.kind)
        return np.concatenate(self._map(lambda b: beam_rates(b, policy.request_masks(b)), self._batches))

    def __call__(self, probs):
        key = self._key(probs)
        if key not in self._cache:
            self.calls += 1
            self._cache[key] = rate_estimate(self.rates(key), self.seed, self.log_base)
        return self._cache[key]

    def difference(self, probs_a, probs_b):
        """Paired estimate of ``R(probs_a) - R(probs_b)``."""
        return difference_estimate(self.rates(probs_a), self.rates(probs_b), self.seed, self.log_base)


def golden_section(f, a, b, tol=1e-3):
    """Maximize ``f`` on ``[a, b]`` by golden-section search.

    Both endpoints are always evaluated; returns ``(x, f(x))`` for the best
    point seen.
    """
    seen = {}

    def val(x):
        if x not in seen:
            seen[x] = f(x)
        return seen[x]

    val(a)
    val(b)
    lo, hi = a, b
    c = hi - INVPHI * (hi - lo)
    d = lo + INVPHI * (hi - lo)
    while hi - lo > tol:
        if val(c) >= val(d):
            hi, d = d, c
            c = hi - INVPHI * (hi - lo)
        else:
            lo, c = c, d
            d = lo + INVPHI * (hi - lo)
    x = max(seen, key=lambda k: (seen[k], -k))
    return x, seen[x]


def _oracle(model, kind, trials, seed, oracle, log_base="nats", jobs=1):
    if oracle is not None:
        if oracle.model != model or oracle.kind != kind:
            raise ConfigurationError("oracle was built for a different model or policy kind")
        return oracle
    return RateOracle(model, kind, trials, seed, log_base, jobs)


def _check_budget(budget):
    if not budget > 0:
        raise DomainError(f"feedback budget must be positive, got {budget}")


def homogeneous_search(model, budget, kind="gtfp", trials=10**5, seed=0, tol=1e-3, oracle=None,
                       log_base="nats", jobs=1):
    """Best common feedback probability ``p`` for all users.

    Searches ``p`` over ``[0, min(p_max, budget/n)]`` by golden section; the
    upper end (where the budget may or may not bind) is always evaluated.
    """
    _check_budget(budget)
    orc = _oracle(model, kind, trials, seed, oracle, log_base, jobs)
    n = model.n_users
    hi = min(orc.p_max, budget / n)
    trace = []
    best = [-math.inf]

    def f(p):
        est = orc((p,) * n)
        if est.mean > best[0]:
            best[0] = est.mean
            trace.append((len(trace), (p,) * n, orc.thresholds((p,) * n), est))
        return est.mean

    p, _ = golden_section(f, 0.0, hi, tol)
    probs = (p,) * n
    return OptimizationResult(orc.threshold_vector(probs), orc(probs), "homogeneous", len(trace),
                              orc.calls, trace)


def _feasible(probs, budget, p_max):
    return (all(-FEASIBILITY_SLACK <= p <= p_max + FEASIBILITY_SLACK for p in probs)
            and sum(probs) <= budget + FEASIBILITY_SLACK)


def _ascend(orc, start, budget, max_cycles, tol, exchange):
    n, p_max = orc.n_users, orc.p_max
    p = list(start)
    cur = orc(p)
    cycles = 0
    for cycles in range(1, max_cycles + 1):
        before = cur
        for i in range(n):
            ub = max(0.0, min(p_max, budget - (sum(p) - p[i])))

            def f(x, i=i):
                q = list(p)
                q[i] = x
                return orc(q).mean

            x, fx = golden_section(f, 0.0, ub, tol)
            if fx > cur.mean:
                p[i] = x
                cur = orc(p)
        if exchange and n > 1 and sum(p) >= budget - 1e-6:
            # moves along the budget face, which single-coordinate steps cannot make
            for i, j in itertools.combinations(range(n), 2):
                lo_t = -min(p[i], p_max - p[j])
                hi_t = min(p[j], p_max - p[i])
                if hi_t - lo_t <= tol:
                    continue

                def g(t, i=i, j=j):
                    q = list(p)
                    q[i] += t
                    q[j] -= t
                    return orc(q).mean

                t, gt = golden_section(g, lo_t, hi_t, tol)
                if gt > cur.mean:
                    p[i] += t
                    p[j] -= t
                    cur = orc(p)
        if cur.mean - before.mean < cur.std_error:
            break
    return tuple(p), cur, cycles


def coordinate_ascent(model, budget, kind="gtfp", trials=10**5, seed=0, init=None, starts=4,
                      max_cycles=20, tol=1e-3, exchange=True, oracle=None, log_base="nats", jobs=1):
    """Cyclic coordinate ascent on the feedback probabilities, with restarts.

    Each cycle maximizes every ``p_i`` in turn over
    ``[0, min(p_max, budget - sum_{j != i} p_j)]``. When the budget binds,
    pairwise transfers ``p_i + t, p_j - t`` are also searched. A start stops
    once a full cycle gains less than one standard error, or after
    ``max_cycles``. Starts are ``init`` (or the homogeneous point) followed by
    ``starts`` random feasible points drawn from ``seed``.
    """
    if budget < 0:
        raise DomainError(f"feedback budget must be nonnegative, got {budget}")
    orc = _oracle(model, kind, trials, seed, oracle, log_base, jobs)
    n, p_max = orc.n_users, orc.p_max
    if init is not None:
        init_probs = tuple(init.probs if isinstance(init, ThresholdVector) else init)
        if len(init_probs) != n or not _feasible(init_probs, budget, p_max):
            raise DomainError("initial point is infeasible")
        first = init_probs
    else:
        first = (min(p_max, budget / n),) * n
    g = np.random.default_rng(seed)
    cap = min(budget, n * p_max)
    start_points = [first]
    for _ in range(starts):
        w = g.dirichlet(np.ones(n + 1))[:n] * cap
        start_points.append(tuple(float(min(x, p_max)) for x in w))

    trace = []
    best_p, best_est, total_cycles = None, None, 0
    for sp in start_points:
        p, est, cycles = _ascend(orc, sp, budget, max_cycles, tol, exchange)
        total_cycles += cycles
        if best_est is None or est.mean > best_est.mean:
            best_p, best_est = p, est
            trace.append((total_cycles, p, orc.thresholds(p), est))
    return OptimizationResult(orc.threshold_vector(best_p), best_est, "coordinate", total_cycles,
                              orc.calls, trace)


def simplex_grid(model, budget, kind="gtfp", resolution=0.02, trials=10**5, seed=0,
                 symmetric=False, oracle=None, log_base="nats", jobs=1):
    """Exhaustive search over ``{p : sum(p) <= budget, 0 <= p_i <= p_max}`` on a grid.

    Only for ``n <= 3`` users. With ``symmetric=True`` only points with all
    ``p_i`` equal are visited. The full rate surface is kept on the result.
    """
    n = model.n_users
    if n > 3:
        raise DomainError("simplex_grid is limited to n <= 3 users")
    if not 0 < resolution <= 0.1:
        raise DomainError("resolution must lie in (0, 0.1]")
    if budget < 0:
        raise DomainError(f"feedback budget must be nonnegative, got {budget}")
    orc = _oracle(model, kind, trials, seed, oracle, log_base, jobs)
    steps = int(math.floor(orc.p_max / resolution + 1e-9))
    levels = [round(k * resolution, 12) for k in range(steps + 1)]
    if symmetric:
        points = [(x,) * n for x in levels if n * x <= budget + FEASIBILITY_SLACK]
    else:
        points = [pt for pt in itertools.product(levels, repeat=n)
                  if sum(pt) <= budget + FEASIBILITY_SLACK]
    surface = [(pt, orc(pt)) for pt in points]
    trace = []
    best_pt, best_est = None, None
    for pt, est in surface:
        if best_est is None or est.mean > best_est.mean:
            best_pt, best_est = pt, est
            trace.append((len(trace), pt, orc.thresholds(pt), est))
    return OptimizationResult(orc.threshold_vector(best_pt), best_est,
                              "symmetric-grid" if symmetric else "grid", len(points), orc.calls,
                              trace, surface)


def grid_step_modulus(result):
    """Largest rate change between the grid optimum and any neighbouring grid point."""
    if not result.surface:
        raise DomainError("result carries no grid surface")
    pts = {pt: est.mean for pt, est in result.surface}
    levels = sorted({x for pt in pts for x in pt})
    step = min(b - a for a, b in zip(levels, levels[1:])) if len(levels) > 1 else 0.0
    best = result.best.probs
    mod = 0.0
    for pt, val in pts.items():
        if pt != best and max(abs(a - b) for a, b in zip(pt, best)) <= step * (1 + 1e-6):
            mod = max(mod, abs(val - pts[best]))
    return mod
