"""Trajectory-level safety certification with an exact Beta posterior.

After running ``N`` independent episodes of a deployed policy from the
deployment distribution and counting the ``k`` episodes whose minimum failure
margin is non-positive, the probability that a fresh episode stays safe is
distributed as ``Beta(N - k, k + 1)``. This module runs the episodes and
provides the Beta special functions used for reporting.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError, ConvergenceError

_CF_TOL = 1e-10
_CF_MAX_ITER = 10000
_TINY = 1e-300


def trajectory_margin(sys, trajectory):
    """Minimum failure margin over every visited state, initial state included."""
    traj = np.asarray(trajectory, dtype=float)
    if traj.size == 0:
        raise ContractError("trajectory_margin needs a non-empty trajectory")
    return float(np.min(sys.margin(traj.reshape(-1, sys.n))))


# -- Beta special functions ---------------------------------------------------

@dataclass(frozen=True)
class BetaDist:
    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ContractError(f"Beta shapes must be positive, got ({self.a}, {self.b})")

    @property
    def mean(self):
        return self.a / (self.a + self.b)

    @property
    def var(self):
        s = self.a + self.b
        return self.a * self.b / (s * s * (s + 1.0))

    def pdf(self, p):
        return beta_pdf(self, p)

    def cdf(self, p):
        return beta_cdf(self, p)

    def ppf(self, q):
        return beta_quantile(self, q)

    def interval(self, level):
        return central_interval(self, level)


def _log_beta(a, b):
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


def beta_pdf(d, p):
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"p must lie in [0, 1], got {p}")
    if p == 0.0 or p == 1.0:
        expo = d.a - 1.0 if p == 0.0 else d.b - 1.0
        if expo < 0:
            return float("inf")
        if expo > 0:
            return 0.0
        return math.exp(-_log_beta(d.a, d.b))
    return math.exp((d.a - 1.0) * math.log(p) + (d.b - 1.0) * math.log1p(-p) - _log_beta(d.a, d.b))


def _betacf(a, b, x):
    """Continued fraction of the incomplete beta function (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = _TINY if abs(d) < _TINY else d
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_TOL:
            return h
    raise ConvergenceError(f"incomplete beta continued fraction did not converge for "
                           f"a={a}, b={b}, x={x}")


def beta_cdf(d, p):
    """Regularized incomplete beta function ``I_p(a, b)``."""
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"p must lie in [0, 1], got {p}")
    if p == 0.0 or p == 1.0:
        return p
    a, b = d.a, d.b
    front = math.exp(a * math.log(p) + b * math.log1p(-p) - _log_beta(a, b))
    # the fraction converges fast only on the near side of the mode
    if p < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, p) / a
    return 1.0 - front * _betacf(b, a, 1.0 - p) / b


def beta_quantile(d, q, tol=1e-8):
    """Inverse cdf by bisection on [0, 1] to ``tol`` in ``p``."""
    q = float(q)
    if not 0.0 < q < 1.0:
        raise ContractError(f"q must lie in (0, 1), got {q}")
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if beta_cdf(d, mid) < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def central_interval(d, level):
    """Equal-tailed credible interval holding ``level`` of the mass."""
    level = float(level)
    if not 0.0 < level < 1.0:
        raise ContractError(f"level must lie in (0, 1), got {level}")
    tail = 0.5 * (1.0 - level)
    return beta_quantile(d, tail), beta_quantile(d, 1.0 - tail)


def pdf_curve(d, points=201):
    """``(p, pdf)`` samples on an even grid over the open unit interval, for plotting."""
    p = np.linspace(0.0, 1.0, points + 2)[1:-1]
    return p, np.array([beta_pdf(d, v) for v in p])


# -- certification ------------------------------------------------------------

@dataclass
class CertificationResult:
    n_cert: int
    k: int
    margins: np.ndarray
    levels: tuple = (0.9, 0.95, 0.99)
    intervals: dict = field(default_factory=dict)

    @property
    def beta_a(self):
        return self.n_cert - self.k

    @property
    def beta_b(self):
        return self.k + 1

    @property
    def degenerate(self):
        return self.k == self.n_cert

    @property
    def distribution(self):
        if self.degenerate:
            raise ContractError("every certification episode failed; the posterior is degenerate")
        return BetaDist(self.beta_a, self.beta_b)

    @property
    def mean(self):
        return self.beta_a / (self.beta_a + self.beta_b)

    def to_dict(self, curve_points=0):
        out = {"n_cert": self.n_cert, "k": self.k, "beta_a": self.beta_a, "beta_b": self.beta_b,
               "mean": self.mean, "degenerate": self.degenerate,
               "intervals": {str(lv): list(iv) for lv, iv in self.intervals.items()},
               "margins": [float(m) for m in self.margins]}
        if curve_points and not self.degenerate:
            p, dens = pdf_curve(self.distribution, curve_points)
            out["pdf"] = {"p": p.tolist(), "density": dens.tolist()}
        return out


def result_from_margins(margins, levels=(0.9, 0.95, 0.99)):
    margins = np.asarray(margins, dtype=float).ravel()
    if margins.size < 1:
        raise ContractError("certification needs at least one episode")
    k = int(np.sum(margins <= 0))
    res = CertificationResult(int(margins.size), k, margins, tuple(levels))
    if not res.degenerate:
        res.intervals = {lv: central_interval(res.distribution, lv) for lv in levels}
    return res


def episode_seeds(seed, n):
    """Independent per-episode seeds derived from one master seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def certify(sys, policy, n_cert, seed=None, levels=(0.9, 0.95, 0.99), horizon=None):
    """Run ``n_cert`` i.i.d. episodes of ``policy`` and return the Beta posterior.

    ``policy`` follows the filter protocol (``reset`` / ``act``). An episode
    counts as a failure when its minimum margin is non-positive.
    """
    from .filter import run_episode

    if n_cert < 1:
        raise ContractError("n_cert must be >= 1")
    margins = np.empty(n_cert)
    for i, s in enumerate(episode_seeds(seed, n_cert)):
        traj, _, _ = run_episode(sys, policy, horizon=horizon, seed=s)
        margins[i] = trajectory_margin(sys, traj)
    return result_from_margins(margins, levels)


def coverage_selfcheck(true_p, n_cert, repetitions, level, seed=None):
    """Fraction of simulated certifications whose central interval holds ``true_p``.

    Each repetition draws ``n_cert`` Bernoulli(``true_p``) safety outcomes.
    An all-failure draw has no proper posterior and counts as a miss.
    """
    if not 0.0 < true_p < 1.0:
        raise ContractError("true_p must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(repetitions):
        k = int(n_cert - rng.binomial(n_cert, true_p))
        if k == n_cert:
            continue
        lo, hi = central_interval(BetaDist(n_cert - k, k + 1), level)
        hits += lo <= true_p <= hi
    return hits / repetitions
