"""Per-beam SINR sampling for opportunistic beamforming.

A base station transmits ``M`` orthonormal random beams. User ``i`` sees an
i.i.d. channel power ``x_k`` on every beam and measures

    gamma_{i,m} = rho_i * x_m / (1 + rho_i * sum_{k != m} x_k)

so a user's SINR vector is exchangeable across beams and at most one entry can
exceed one. The ``synthetic`` kind skips the interference structure and draws
i.i.d. entries from any nonnegative continuous scipy distribution.

SINR matrices are stored beam-major, ``values[m, i]``; batches add a leading
trial axis, ``(trials, M, n)``.
"""

import enum
import functools
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize, special, stats

from . import rng
from .exceptions import ConfigurationError, DomainError, ShapeError

__all__ = [
    "FadingKind",
    "ChannelModel",
    "SinrMatrix",
    "SinrVector",
    "sample_sinr_matrix",
    "sample_sinr_batch",
    "sample_user_vectors",
    "marginal_cdf",
    "marginal_sf",
    "max_sinr_sf",
    "max_sinr_tail_exact",
    "max_sinr_table",
    "Statistic",
    "upper_quantile",
    "set_cache_dir",
]

QUANTILE_TABLE_SIZE = 10**6
QUANTILE_TABLE_SEED = 0x51A7E5EED


class FadingKind(str, enum.Enum):
    RAYLEIGH = "rayleigh"
    RICIAN = "rician"
    NAKAGAMI = "nakagami"
    SYNTHETIC = "synthetic"


class Statistic(str, enum.Enum):
    BEAM1 = "beam1"
    MAX = "max"


@dataclass(frozen=True)
class ChannelModel:
    """Statistical description of the n-user, M-beam SINR matrix.

    Parameters
    ----------
    kind : FadingKind or str
        Per-beam channel power law, or ``synthetic`` for i.i.d. SINR entries.
    snr : float
        Linear SNR ``rho`` shared by all users.
    m_beams, n_users : int
        Number of beams ``M`` and users ``n``.
    k_factor : float
        Rician K-factor (ratio of line-of-sight to scattered power).
    nakagami_m : float
        Nakagami shape, at least 0.5.
    snr_multipliers : tuple of float, optional
        Per-user multipliers on ``snr``; users are identical when omitted.
    marginal, marginal_params : str, tuple
        scipy.stats distribution name and shape arguments for ``synthetic``.
        Entry ``(m, i)`` is ``rho_i`` times a draw from it.
    """

    kind: FadingKind = FadingKind.RAYLEIGH
    snr: float = 1.0
    m_beams: int = 1
    n_users: int = 1
    k_factor: float = 0.0
    nakagami_m: float = 1.0
    snr_multipliers: tuple = None
    marginal: str = "expon"
    marginal_params: tuple = field(default=())

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", FadingKind(self.kind))
        except ValueError:
            raise ConfigurationError(f"unknown fading kind {self.kind!r}") from None
        if not (isinstance(self.snr, (int, float)) and math.isfinite(self.snr) and self.snr > 0):
            raise ConfigurationError(f"snr must be a positive finite number, got {self.snr!r}")
        if int(self.m_beams) != self.m_beams or self.m_beams < 1:
            raise ConfigurationError(f"m_beams must be a positive integer, got {self.m_beams!r}")
        if int(self.n_users) != self.n_users or self.n_users < 1:
            raise ConfigurationError(f"n_users must be a positive integer, got {self.n_users!r}")
        object.__setattr__(self, "m_beams", int(self.m_beams))
        object.__setattr__(self, "n_users", int(self.n_users))
        if not self.k_factor >= 0:
            raise ConfigurationError("k_factor must be >= 0")
        if not self.nakagami_m >= 0.5:
            raise ConfigurationError("nakagami_m must be >= 0.5")
        if self.snr_multipliers is not None:
            mult = tuple(float(v) for v in self.snr_multipliers)
            if len(mult) != self.n_users:
                raise ConfigurationError(
                    f"snr_multipliers has {len(mult)} entries for {self.n_users} users"
                )
            if not all(math.isfinite(v) and v > 0 for v in mult):
                raise ConfigurationError("snr_multipliers must be positive and finite")
            object.__setattr__(self, "snr_multipliers", mult)
        object.__setattr__(self, "marginal_params", tuple(float(v) for v in self.marginal_params))
        if self.kind is FadingKind.SYNTHETIC:
            try:
                dist = getattr(stats, self.marginal)(*self.marginal_params)
                lower = dist.support()[0]
            except (AttributeError, TypeError) as exc:
                raise ConfigurationError(f"bad synthetic marginal {self.marginal!r}: {exc}") from None
            if not lower >= 0:
                raise ConfigurationError("synthetic marginal must be supported on [0, inf)")

    def user_snr(self, user):
        if not 0 <= user < self.n_users:
            raise ConfigurationError(f"user index {user} out of range for {self.n_users} users")
        if self.snr_multipliers is None:
            return float(self.snr)
        return float(self.snr) * self.snr_multipliers[user]

    def user_law(self, user):
        """Hashable key of the SINR-vector law seen by ``user``."""
        return _Law(
            self.kind, self.user_snr(user), self.m_beams, float(self.k_factor),
            float(self.nakagami_m), self.marginal, self.marginal_params,
        )

    @property
    def is_beamforming(self):
        return self.kind is not FadingKind.SYNTHETIC

    def to_dict(self):
        d = {
            "kind": self.kind.value,
            "snr": float(self.snr),
            "m_beams": self.m_beams,
            "n_users": self.n_users,
        }
        if self.kind is FadingKind.RICIAN:
            d["k_factor"] = float(self.k_factor)
        if self.kind is FadingKind.NAKAGAMI:
            d["nakagami_m"] = float(self.nakagami_m)
        if self.kind is FadingKind.SYNTHETIC:
            d["marginal"] = self.marginal
            d["marginal_params"] = list(self.marginal_params)
        if self.snr_multipliers is not None:
            d["snr_multipliers"] = list(self.snr_multipliers)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigurationError(f"unknown model fields: {sorted(unknown)}")
        return cls(**d)

    def model_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class _Law:
    kind: FadingKind
    snr: float
    m_beams: int
    k_factor: float
    nakagami_m: float
    marginal: str
    marginal_params: tuple

    def digest(self):
        blob = repr((self.kind.value, self.snr, self.m_beams, self.k_factor,
                     self.nakagami_m, self.marginal, self.marginal_params))
        return hashlib.sha256(blob.encode()).hexdigest()[:20]


@dataclass(frozen=True, eq=False)
class SinrMatrix:
    """One M-by-n SINR realization; column ``i`` is user ``i``'s SINR vector."""

    values: np.ndarray
    model_tag: str = ""
    trial_index: int = 0
    seed: int = 0

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DomainError("SINR matrix must be two-dimensional (beams x users)")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise DomainError("SINR entries must be finite and nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def m_beams(self):
        return self.values.shape[0]

    @property
    def n_users(self):
        return self.values.shape[1]

    def user(self, i):
        return SinrVector(self.values[:, i])


class SinrVector:
    """One user's per-beam SINR values with max / argmax accessors.

    Exact ties for the maximum resolve to the lowest beam index.
    """

    __slots__ = ("values",)

    def __init__(self, values):
        v = np.array(values, dtype=np.float64)
        if v.ndim > 1:
            raise ShapeError(f"expected a 1-D SINR vector, got shape {v.shape}")
        v = v.reshape(-1)
        if v.size == 0 or not np.all(np.isfinite(v)) or np.any(v < 0):
            raise DomainError("SINR vector must be nonempty, finite and nonnegative")
        v.setflags(write=False)
        self.values = v

    def __len__(self):
        return self.values.size

    def __repr__(self):
        return f"SinrVector({self.values.tolist()})"

    @property
    def max_value(self):
        return float(self.values.max())

    @property
    def argmax(self):
        return int(np.argmax(self.values))


# ---------------------------------------------------------------- sampling

def _draws_per_beam(kind):
    return 2 if kind is FadingKind.RICIAN else 1


def _sinr_from_uniforms(law, u):
    """Map uniforms of shape ``(count, M*d)`` to SINR vectors ``(count, M)``."""
    M = law.m_beams
    if law.kind is FadingKind.SYNTHETIC:
        dist = getattr(stats, law.marginal)(*law.marginal_params)
        return law.snr * dist.ppf(u)
    if law.kind is FadingKind.RAYLEIGH:
        x = -np.log(u)
    elif law.kind is FadingKind.NAKAGAMI:
        m = law.nakagami_m
        x = special.gammaincinv(m, u) / m
    else:
        K = law.k_factor
        u1, u2 = u[:, 0::2], u[:, 1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        s = math.sqrt(0.5 / (K + 1.0))
        re = math.sqrt(K / (K + 1.0)) + s * r * np.cos(2.0 * np.pi * u2)
        im = s * r * np.sin(2.0 * np.pi * u2)
        x = re * re + im * im
    if M == 1:
        return law.snr * x
    total = x.sum(axis=1, keepdims=True)
    interference = np.maximum(total - x, 0.0)
    return law.snr * x / (1.0 + law.snr * interference)


def _law_vectors(law, seed, purpose, stream, start, count):
    width = law.m_beams * _draws_per_beam(law.kind)
    u = rng.uniform_block(seed, purpose, stream, start, count, width)
    return _sinr_from_uniforms(law, u)


def sample_user_vectors(model, user, count, seed, start=0, purpose=rng.CHANNEL):
    """SINR vectors of ``user`` for rows ``start .. start+count-1``, shape ``(count, M)``.

    With the default purpose the rows are exactly that user's columns in
    :func:`sample_sinr_batch` for the same trial indices.
    """
    return _law_vectors(model.user_law(user), seed, purpose, user, start, count)


def sample_sinr_batch(model, start, count, seed):
    """SINR matrices for trials ``start .. start+count-1``, shape ``(count, M, n)``.

    Every trial and user has its own counter range, so the output for a trial
    is the same whatever block it is generated in.
    """
    if start < 0 or count < 0:
        raise DomainError("trial range must be nonnegative")
    out = np.empty((count, model.m_beams, model.n_users))
    for i in range(model.n_users):
        out[:, :, i] = sample_user_vectors(model, i, count, seed, start=start)
    return out


def sample_sinr_matrix(model, trial_index, seed):
    """The SINR matrix of a single trial."""
    if trial_index < 0:
        raise DomainError("trial_index must be >= 0")
    values = sample_sinr_batch(model, trial_index, 1, seed)[0]
    return SinrMatrix(values, model_tag=model.model_hash(), trial_index=trial_index, seed=seed)


# ---------------------------------------------------------------- beam-1 marginal

def _power_dists(law):
    """Frozen distributions of one beam's power X and of the interference sum Y."""
    M = law.m_beams
    if law.kind is FadingKind.RAYLEIGH:
        return stats.expon(), (stats.gamma(M - 1) if M > 1 else None)
    if law.kind is FadingKind.NAKAGAMI:
        m = law.nakagami_m
        y = stats.gamma(m * (M - 1), scale=1.0 / m) if M > 1 else None
        return stats.gamma(m, scale=1.0 / m), y
    K = law.k_factor
    scale = 0.5 / (K + 1.0)
    # the noncentral law differs from the central one by O(K); scipy's ncx2
    # pdf returns nan for subnormal noncentrality
    if K < 1e-12:
        x = stats.chi2(2, scale=scale)
        y = stats.chi2(2 * (M - 1), scale=scale) if M > 1 else None
    else:
        x = stats.ncx2(2, 2 * K, scale=scale)
        y = stats.ncx2(2 * (M - 1), 2 * K * (M - 1), scale=scale) if M > 1 else None
    return x, y


def _law_sf(law, x):
    """P(gamma_{i,1} > x) for scalar ``x >= 0``."""
    if x == 0:
        return 1.0
    if math.isinf(x):
        return 0.0
    rho, M = law.snr, law.m_beams
    if law.kind is FadingKind.SYNTHETIC:
        return float(getattr(stats, law.marginal)(*law.marginal_params).sf(x / rho))
    if law.kind is FadingKind.RAYLEIGH:
        return math.exp(-x / rho - (M - 1) * math.log1p(x))
    xd, yd = _power_dists(law)
    if M == 1:
        return float(xd.sf(x / rho))
    # P(rho X > x (1 + rho Y)) = E_Y[ sf_X(x/rho + x Y) ]
    val, _ = integrate.quad(
        lambda y: xd.sf(x / rho + x * y) * yd.pdf(y), 0.0, np.inf,
        epsabs=1e-13, epsrel=1e-11, limit=400,
    )
    return min(max(val, 0.0), 1.0)


def _law_log_sf(law, x):
    if law.kind is FadingKind.RAYLEIGH and not math.isinf(x):
        return -x / law.snr - (law.m_beams - 1) * math.log1p(x)
    s = _law_sf(law, x)
    return math.log(s) if s > 0 else -math.inf


def _check_x(x):
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.isnan(x)) or np.any(x < 0):
        raise DomainError("SINR level must be >= 0")
    return x


def marginal_sf(model, x, user=0):
    """P(gamma_{user,1} >= x); scalar or array ``x``."""
    x = _check_x(x)
    law = model.user_law(user)
    out = np.vectorize(lambda t: _law_sf(law, float(t)), otypes=[float])(x)
    return float(out) if out.ndim == 0 else out


def marginal_cdf(model, x, user=0):
    """P(gamma_{user,1} <= x).

    Closed form for Rayleigh beamforming,
    ``1 - exp(-x/rho) / (1+x)**(M-1)``; one-dimensional quadrature over the
    interference power for Rician and Nakagami; the scipy CDF for synthetic.
    """
    x = _check_x(x)
    out = 1.0 - np.asarray(marginal_sf(model, x, user))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- max over beams

_cache_dir = os.environ.get("THRESHFEED_CACHE_DIR")


def set_cache_dir(path):
    """Persist max-SINR quantile tables under ``path`` (``None`` disables)."""
    global _cache_dir
    _cache_dir = None if path is None else os.fspath(path)


@functools.lru_cache(maxsize=32)
def _max_sinr_table(law):
    path = None
    if _cache_dir:
        path = os.path.join(_cache_dir, f"maxsinr-{law.digest()}-{QUANTILE_TABLE_SIZE}.npy")
        try:
            table = np.load(path)
            if table.shape == (QUANTILE_TABLE_SIZE,):
                table.setflags(write=False)
                return table
        except (OSError, ValueError):
            pass
    parts = []
    for start in range(0, QUANTILE_TABLE_SIZE, 1 << 17):
        count = min(1 << 17, QUANTILE_TABLE_SIZE - start)
        parts.append(_law_vectors(law, QUANTILE_TABLE_SEED, rng.QUANTILE_TABLE, 0, start, count).max(axis=1))
    table = np.sort(np.concatenate(parts))
    if path is not None:
        try:
            os.makedirs(_cache_dir, exist_ok=True)
            tmp = f"{path}.{os.getpid()}.tmp"
            with open(tmp, "wb") as fh:
                np.save(fh, table)
            os.replace(tmp, path)
        except OSError:
            pass
    table.setflags(write=False)
    return table


def max_sinr_table(model, user=0):
    """Sorted empirical sample of the maximum SINR used by :func:`max_sinr_sf`."""
    return _max_sinr_table(model.user_law(user))


def _uses_table(law):
    return law.kind is not FadingKind.SYNTHETIC and law.m_beams > 1


def max_sinr_sf(model, x, user=0):
    """P(max_k gamma_{user,k} >= x).

    Beamforming kinds with ``M >= 2`` read a seeded empirical table of 10**6
    draws (no closed form exists below one). Synthetic models use
    ``1 - F(x)**M``; one beam reduces to the beam-1 marginal.
    """
    x = _check_x(x)
    law = model.user_law(user)
    if law.m_beams == 1:
        return marginal_sf(model, x, user)
    if _uses_table(law):
        table = _max_sinr_table(law)
        below = np.searchsorted(table, x, side="left")
        out = (table.size - below) / table.size
    else:
        out = np.vectorize(lambda t: 1.0 - (1.0 - _law_sf(law, float(t))) ** law.m_beams,
                           otypes=[float])(x)
    out = np.asarray(out, dtype=np.float64)
    return float(out) if out.ndim == 0 else out


def max_sinr_tail_exact(model, x, user=0):
    """``M * P(gamma_{user,1} >= x)``, equal to P(max >= x) whenever ``x >= 1``.

    Two beams cannot both exceed one, so the events are disjoint there.
    """
    x = _check_x(x)
    if np.any(x < 1):
        raise DomainError("the disjoint-tail identity needs x >= 1")
    out = model.m_beams * np.asarray(marginal_sf(model, x, user))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- quantiles

def _solve_log_sf(log_sf, q):
    target = math.log(q)
    hi = 1.0
    while log_sf(hi) > target:
        hi *= 2.0
        if hi > 1e300:
            return math.inf
    return optimize.brentq(lambda t: log_sf(t) - target, 0.0, hi, xtol=1e-14, rtol=1e-15, maxiter=500)


def upper_quantile(model, q, statistic=Statistic.BEAM1, user=0):
    """Threshold ``tau`` with P(statistic >= tau) = q.

    ``statistic`` is ``"beam1"`` (the beam-1 SINR) or ``"max"`` (the largest
    SINR over beams). ``q = 1`` gives 0 and ``q = 0`` gives ``inf``, the
    never-feed-back threshold.
    """
    statistic = Statistic(statistic)
    q = float(q)
    if not 0.0 <= q <= 1.0:
        raise DomainError(f"probability must lie in [0, 1], got {q}")
    if q == 1.0:
        return 0.0
    if q == 0.0:
        return math.inf
    law = model.user_law(user)
    if statistic is Statistic.BEAM1 or law.m_beams == 1:
        if law.kind is FadingKind.RAYLEIGH and law.m_beams == 1:
            return -law.snr * math.log(q)
        return _solve_log_sf(lambda t: _law_log_sf(law, t), q)
    if _uses_table(law):
        table = _max_sinr_table(law)
        N = table.size
        k = N - int(round(q * N))
        if k >= N:
            return float(np.nextafter(table[-1], np.inf))
        if k <= 0:
            return float(table[0]) / 2.0
        return 0.5 * (float(table[k - 1]) + float(table[k]))
    M = law.m_beams

    def log_sf_max(t):
        s = _law_sf(law, t)
        val = -math.expm1(M * math.log1p(-s)) if s < 1 else 1.0
        return math.log(val) if val > 0 else -math.inf

    return _solve_log_sf(log_sf_max, q)
