"""Server reliability over the dispatch day and backup-reserve sizing.

Hardware survival follows a Weibull law conditioned on the age a cluster has
already accumulated; software survival decays exponentially with utilization
above a baseline.  The combined per-server survival probability feeds an
exact binomial inversion that yields the minimal backup count meeting a
chance constraint, and the failure sampler used by the Monte Carlo runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .clustering import ServerCluster
from .scenario import LifetimeCurve, ServerParams


@dataclass(frozen=True)
class ReliabilityParams:
    beta: float                 # Weibull shape
    psi: float                  # characteristic lifetime in days at u_base
    p_s_base: float
    lambda_s: float
    u_base: float
    lifetime_curve: LifetimeCurve

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.psi <= 0:
            raise ValueError("psi must be positive")
        if not 0 < self.p_s_base <= 1:
            raise ValueError("p_s_base must lie in (0, 1]")


def cluster_reliability_params(cluster: ServerCluster,
                               server_params: ServerParams) -> ReliabilityParams:
    """Bind cluster shape/age data to the DC's server failure parameters."""
    curve = cluster.lifetime_curve
    return ReliabilityParams(
        beta=cluster.beta,
        psi=curve(server_params.u_base),
        p_s_base=server_params.p_s_base,
        lambda_s=server_params.lambda_s,
        u_base=server_params.u_base,
        lifetime_curve=curve,
    )


def hardware_survival(t_on, params: ReliabilityParams):
    """P(no hardware failure through t_on days of operation from new)."""
    if t_on < 0:
        raise ValueError("t_on must be >= 0")
    return math.exp(-((t_on / params.psi) ** params.beta))


def equivalent_day_lifetime(u, params: ReliabilityParams):
    """Lifetime consumed by one dispatched day at utilization u, in days.

    One day scaled by lifetime_curve(u) / lifetime_curve(u_base).
    """
    if not 0 <= u < 1:
        raise ValueError("u must lie in [0, 1)")
    return params.lifetime_curve(u) / params.lifetime_curve(params.u_base)


def conditional_day_survival(t_d, u, params: ReliabilityParams):
    """P(surviving the dispatched day | already survived t_d operating days)."""
    if t_d < 0:
        raise ValueError("t_d must be >= 0")
    t_eq = equivalent_day_lifetime(u, params)
    a = (t_d / params.psi) ** params.beta
    b = ((t_d + t_eq) / params.psi) ** params.beta
    return math.exp(a - b)


def software_reliability(u, params: ReliabilityParams):
    """Software survival over the day at utilization u, capped at 1."""
    if not 0 <= u <= 1:
        raise ValueError("u must lie in [0, 1]")
    return min(1.0, math.exp(params.lambda_s * (u - params.u_base)) * params.p_s_base)


def server_reliability(cluster: ServerCluster, u, server_params: ServerParams):
    """Combined day survival: independent hardware and software channels."""
    params = cluster_reliability_params(cluster, server_params)
    p_h = conditional_day_survival(cluster.centroid_past_operating_days, u, params)
    p_s = software_reliability(u, params)
    return p_h * p_s


def hourly_survival(p_day):
    """Split a daily survival probability into 24 equal independent hours."""
    if not 0 < p_day <= 1:
        raise ValueError("p_day must lie in (0, 1]")
    return p_day ** (1.0 / 24.0)


# ---------------------------------------------------------------------------
# Exact binomial machinery (incremental term updates, log-space start)


def _log_pmf0(n, q):
    # log P(X = 0) = n * log(1 - q)
    return n * math.log1p(-q)


def binomial_cdf(b, n, q):
    """P(Binomial(n, q) <= b) by exact summation with incremental terms."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if not 0 <= q < 1:
        raise ValueError("q must lie in [0, 1)")
    if b < 0:
        return 0.0
    b = min(int(b), n)
    if q == 0.0 or n == 0:
        return 1.0
    log_term = _log_pmf0(n, q)
    log_ratio_const = math.log(q) - math.log1p(-q)
    total = math.exp(log_term)
    for k in range(b):
        log_term += math.log(n - k) - math.log(k + 1) + log_ratio_const
        total += math.exp(log_term)
    return min(total, 1.0)


def min_backups(n_active, p_server, p_thr):
    """Smallest N^B with P(failures <= N^B) >= p_thr among n_active servers."""
    if n_active < 0:
        raise ValueError("n_active must be >= 0")
    if not 0 < p_server <= 1:
        raise ValueError("p_server must lie in (0, 1]")
    if not 0 < p_thr < 1:
        raise ValueError("p_thr must lie in (0, 1)")
    n = int(n_active)
    if n == 0:
        return 0
    q = 1.0 - p_server
    if q <= 0:
        return 0
    log_term = _log_pmf0(n, q)
    log_ratio_const = math.log(q) - math.log1p(-q)
    total = math.exp(log_term)
    b = 0
    while total < p_thr and b < n:
        log_term += math.log(n - b) - math.log(b + 1) + log_ratio_const
        total += math.exp(log_term)
        b += 1
    return b


@dataclass(frozen=True)
class BackupTable:
    """Minimal backup counts indexed by the number of active servers."""

    counts: np.ndarray        # counts[n] = minimal N^B for n active servers
    p_server: float
    p_thr: float
    cluster_id: str = ""

    def __post_init__(self):
        if len(self.counts) < 1 or self.counts[0] != 0:
            raise ValueError("table must start at N^A = 0 with 0 backups")
        if np.any(np.diff(self.counts) < 0):
            raise ValueError("table must be non-decreasing in N^A")

    @property
    def n_max(self):
        return len(self.counts) - 1

    def __getitem__(self, n_active):
        return int(self.counts[n_active])


def backup_table_counts(p_server, p_thr, n_max):
    """min_backups(n, p_server, p_thr) for n = 0..n_max via an O(n·b) sweep.

    Walks n upward maintaining the pmf vector of Binomial(n, q) on 0..b and
    the CDF at the current b, so each step costs O(b) instead of a fresh
    O(n) summation.
    """
    if n_max < 0:
        raise ValueError("n_max must be >= 0")
    q = 1.0 - p_server
    counts = np.zeros(n_max + 1, dtype=int)
    if q <= 0 or n_max == 0:
        return counts
    p = 1.0 - q
    pmf = np.array([1.0])   # Binomial(0, q) pmf on 0..b, b = 0
    b = 0
    for n in range(1, n_max + 1):
        # pmf(k; n) = p * pmf(k; n-1) + q * pmf(k-1; n-1)
        new = np.empty(len(pmf))
        new[0] = p * pmf[0]
        if len(pmf) > 1:
            new[1:] = p * pmf[1:] + q * pmf[:-1]
        pmf = new
        cdf = pmf.sum()
        while cdf < p_thr and b < n:
            # extend to k = b+1 using the in-row recurrence
            tail = pmf[-1] * (q / p) * (n - b) / (b + 1)
            pmf = np.append(pmf, tail)
            cdf += tail
            b += 1
        counts[n] = b
    return counts


def build_backup_table(cluster: ServerCluster, u, p_thr, n_max,
                       server_params: ServerParams) -> BackupTable:
    """Backup requirements for every possible active count of a cluster."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    p_server = server_reliability(cluster, u, server_params)
    counts = backup_table_counts(p_server, p_thr, n_max)
    return BackupTable(counts=counts, p_server=p_server, p_thr=p_thr,
                       cluster_id=cluster.id)


def binomial_inverse_cdf(uniform, n, q):
    """Quantile of Binomial(n, q) at `uniform`; monotone in n for fixed u.

    The scan accumulates exact pmf terms from k = 0, so paired runs that
    share the uniform draw get the standard quantile coupling.
    """
    if n <= 0 or q <= 0:
        return 0
    if q >= 1:
        return n
    log_term = _log_pmf0(n, q)
    log_ratio_const = math.log(q) - math.log1p(-q)
    total = math.exp(log_term)
    k = 0
    while total < uniform and k < n:
        log_term += math.log(n - k) - math.log(k + 1) + log_ratio_const
        total += math.exp(log_term)
        k += 1
    return k


def cluster_hourly_failure_probs(cluster: ServerCluster, u,
                                 server_params: ServerParams):
    """(q_hw_hour, q_sw_hour): per-hour failure probabilities of one server."""
    params = cluster_reliability_params(cluster, server_params)
    p_hw_day = conditional_day_survival(
        cluster.centroid_past_operating_days, u, params)
    p_sw_day = software_reliability(u, params)
    return 1.0 - hourly_survival(p_hw_day), 1.0 - hourly_survival(p_sw_day)


def sample_failures(cluster: ServerCluster, n_active, u, rng,
                    server_params: ServerParams):
    """Draw one hour's (hardware, software) failure counts for a cluster.

    Hardware failures are Binomial over the active servers; software
    failures are Binomial over the hardware survivors.  `rng` may be a seed
    or a numpy Generator.  Draws go through the inverse CDF so that runs
    sharing a uniform stream are coupled monotonically in the active count.
    """
    if n_active < 0:
        raise ValueError("n_active must be >= 0")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    q_hw, q_sw = cluster_hourly_failure_probs(cluster, u, server_params)
    u1, u2 = rng.random(), rng.random()
    n_hw = binomial_inverse_cdf(u1, int(n_active), q_hw)
    n_sw = binomial_inverse_cdf(u2, int(n_active) - n_hw, q_sw)
    return n_hw, n_sw
