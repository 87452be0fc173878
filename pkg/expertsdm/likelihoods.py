"""Observation models for survey counts, presences and expert categories.

Every family exposes derivs(y, eta, exposure, param) returning the
per-row log-likelihood and its first two derivatives with respect to the
linear predictor eta. Counts use a log link with exposure; presences and
expert categories use the logit link.
"""

import logging
import numpy as np
from scipy import stats
from scipy.special import betainc, expit, gammaln, xlogy

from expertsdm.exceptions import InputError
from expertsdm.raster import CATEGORIES

PROB_FLOOR = 1e-12
DEFAULT_CUTOFFS = (0.1, 0.5, 0.9)
DEFAULT_S_BAR = 2.0
_LOG_2PI = np.log(2 * np.pi)


class ExpertObsParams():

    def __init__(self, mu_bar, s_bar=DEFAULT_S_BAR):
        mu_bar = np.asarray(mu_bar, dtype=float)
        if np.any(mu_bar <= 0) or np.any(mu_bar >= 1):
            raise InputError("Expert mean probability must lie strictly inside (0, 1)")
        if not s_bar > 0:
            raise InputError(f"Expert sample size must be positive, got {s_bar}")
        self.mu_bar = mu_bar
        self.s_bar = float(s_bar)

    def shapes(self):
        return (self.mu_bar * self.s_bar, (1.0 - self.mu_bar) * self.s_bar)


class CategoryCutoffs():

    def __init__(self, values=DEFAULT_CUTOFFS):
        values = tuple(float(v) for v in values)
        if len(values) != 3:
            raise InputError(f"Need three category cutoffs, got {len(values)}")
        if not (0 < values[0] < values[1] < values[2] < 1):
            raise InputError(f"Category cutoffs must be strictly increasing inside (0, 1), got {values}")
        self.values = values

    def __repr__(self):
        return f"CategoryCutoffs{self.values}"

    def edges(self):
        return (0.0,) + self.values + (1.0,)

    def binary_cutoff(self):
        return self.values[1]


def _check_positive(what, v):
    if np.any(np.asarray(v) <= 0):
        raise InputError(f"Negative binomial {what} must be positive")

def negbin_loglik(y, mean, r):
    """log NegBin(y | mean, r), variance mean + mean**2 / r."""
    _check_positive("mean", mean)
    _check_positive("overdispersion", r)
    y = np.asarray(y, dtype=float)
    m = np.asarray(mean, dtype=float)
    out = (gammaln(y + r) - gammaln(r) - gammaln(y + 1.0) +
           r * (np.log(r) - np.log(r + m)) + xlogy(y, m) - xlogy(y, r + m))
    return out if out.ndim else float(out)

def clamp_probability(pi, what="probability"):
    pi = np.asarray(pi, dtype=float)
    clamped = np.clip(pi, PROB_FLOOR, 1.0 - PROB_FLOOR)
    n = int(np.count_nonzero(clamped != pi))
    if n:
        logging.warning(f"{n} {what} values clamped to [{PROB_FLOOR}, {1 - PROB_FLOOR}]")
    return clamped

def bernoulli_loglik(present, pi):
    pi = clamp_probability(pi)
    present = np.asarray(present, dtype=float)
    out = present * np.log(pi) + (1.0 - present) * np.log1p(-pi)
    return out if out.ndim else float(out)

def _beta_interval(a, b, lo, hi):
    """Pr(lo <= X < hi) for X ~ Beta(a, b), differencing whichever tail is small."""
    if lo <= 0.0:
        return betainc(a, b, hi)
    if hi >= 1.0:
        return betainc(b, a, 1.0 - lo)
    cdf_hi = betainc(a, b, hi)
    lower = cdf_hi - betainc(a, b, lo)
    upper = betainc(b, a, 1.0 - lo) - betainc(b, a, 1.0 - hi)
    return np.where(cdf_hi > 0.5, upper, lower)

def expert_category_prob(params, z, cutoffs=None, binary=False):
    """Probability of category z under Beta(mu*s, (1-mu)*s) subjective beliefs.

    Category z covers subjective probabilities between consecutive cutoffs
    (z=1 below the first, z=4 above the last). In binary mode categories
    {1,2} and {3,4} collapse at the middle cutoff.
    """
    cutoffs = cutoffs or CategoryCutoffs()
    a, b = params.shapes()
    z = np.asarray(z)
    if binary:
        c = cutoffs.binary_cutoff()
        low = _beta_interval(a, b, 0.0, c)
        high = _beta_interval(a, b, c, 1.0)
        out = np.where(z >= 3, high, low)
    else:
        edges = cutoffs.edges()
        out = np.zeros(np.broadcast(a, z).shape)
        for k in CATEGORIES:
            p = _beta_interval(a, b, edges[k - 1], edges[k])
            out = np.where(z == k, p, out)
    out = np.asarray(out, dtype=float)
    return out if out.ndim else float(out)


class BinomialApprox():
    """Per-category binomial stand-in Bin(psi_z | N_z, mu) for the beta-CDF likelihood."""

    def __init__(self, trials, successes, errors=None):
        trials = np.array(trials, dtype=np.int64).reshape(len(CATEGORIES))
        successes = np.array(successes, dtype=np.int64).reshape(len(CATEGORIES))
        if np.any(trials < 1) or np.any(successes < 0) or np.any(successes > trials):
            raise InputError(f"Binomial approximation needs 0 <= psi <= N, got N={trials.tolist()}, "
                             f"psi={successes.tolist()}")
        self.trials = trials
        self.successes = successes
        self.errors = (np.full(len(CATEGORIES), np.nan) if errors is None
                       else np.array(errors, dtype=float))

    def __repr__(self):
        return f"BinomialApprox(N={self.trials.tolist()}, psi={self.successes.tolist()})"

    @classmethod
    def binary(cls):
        return cls([1, 1, 1, 1], [0, 0, 1, 1])

    @property
    def n_trials(self):
        if np.all(self.trials == self.trials[0]):
            return int(self.trials[0])
        return None

    def is_monotone(self):
        return bool(np.all(np.diff(self.successes) >= 0))

    def successes_by_category(self):
        return {z: int(psi) for (z, psi) in zip(CATEGORIES, self.successes)}

    def lookup(self, z):
        ix = np.asarray(z, dtype=np.int64) - 1
        return (self.successes[ix], self.trials[ix])

    def to_text(self):
        lines = []
        if self.n_trials is not None:
            lines.append(f"N {self.n_trials}")
        for (z, n, psi) in zip(CATEGORIES, self.trials, self.successes):
            lines.append(f"z{z} N={n} psi={psi}")
        return "\n".join(lines) + "\n"

    def to_data(self):
        return {"N": self.n_trials,
                "trials": {str(z): int(n) for (z, n) in zip(CATEGORIES, self.trials)},
                "psi": {str(z): int(p) for (z, p) in zip(CATEGORIES, self.successes)},
                "errors": {str(z): float(e) for (z, e) in zip(CATEGORIES, self.errors)}}

    @classmethod
    def from_data(cls, data):
        keys = [str(z) for z in CATEGORIES]
        return cls([data["trials"][k] for k in keys],
                   [data["psi"][k] for k in keys],
                   [data.get("errors", {}).get(k, np.nan) for k in keys])


def fit_binomial_approx(s_bar=DEFAULT_S_BAR, cutoffs=None, grid_n=10, grid_psi=None,
                        mesh_points=1000, target=None):
    """Grid-search least-squares fit of Bin(psi | N, mu) to each category curve.

    The squared error between the target curve and the binomial pmf is
    integrated over an equispaced interior mesh of mu. grid_psi caps psi
    (default N). Ties go to the smaller N, then the smaller psi. `target`,
    when given, replaces the exact curve: target(mu, z) -> probabilities.
    """
    cutoffs = cutoffs or CategoryCutoffs()
    grid_n = int(grid_n)
    if grid_n < 1 or (grid_psi is not None and grid_psi < 0):
        raise InputError("Binomial approximation grid is empty")
    if mesh_points < 100:
        raise InputError(f"Need at least 100 mesh points, got {mesh_points}")
    mu = np.arange(1, mesh_points + 1) / (mesh_points + 1.0)
    dmu = 1.0 / (mesh_points + 1.0)
    params = ExpertObsParams(mu, s_bar)

    trials, successes, errors = [], [], []
    for z in CATEGORIES:
        curve = (target(mu, z) if target is not None
                 else expert_category_prob(params, z, cutoffs))
        best = None
        for n in range(1, grid_n + 1):
            top = n if grid_psi is None else min(n, int(grid_psi))
            for psi in range(0, top + 1):
                err = float(np.sum((curve - stats.binom.pmf(psi, n, mu)) ** 2) * dmu)
                if best is None or err < best[0]:
                    best = (err, n, psi)
        errors.append(best[0])
        trials.append(best[1])
        successes.append(best[2])
        logging.debug(f"binomial approximation z={z}: N={best[1]}, psi={best[2]}, error={best[0]:.3g}")
    return BinomialApprox(trials, successes, errors)

def binomial_approx_loglik(mu_bar, approx, z):
    psi, n = approx.lookup(z)
    out = stats.binom.logpmf(psi, n, mu_bar)
    out = np.asarray(out, dtype=float)
    return out if out.ndim else float(out)


def _log1pexp(eta):
    return np.logaddexp(0.0, eta)

class CountFamily():
    """Negative binomial counts with mean exposure * exp(eta) and overdispersion r."""

    name = "count"
    discrete = True

    def derivs(self, y, eta, exposure, r):
        m = exposure * np.exp(eta)
        ll = (gammaln(y + r) - gammaln(r) - gammaln(y + 1.0) +
              r * (np.log(r) - np.log(r + m)) + xlogy(y, m) - xlogy(y, r + m))
        d1 = r * (y - m) / (r + m)
        d2 = -(y + r) * r * m / (r + m) ** 2
        return (ll, d1, d2)


class PresenceFamily():
    """Logit Bernoulli presence/absence."""

    name = "presence"
    discrete = True

    def derivs(self, y, eta, exposure=None, param=None):
        s = expit(eta)
        ll = y * eta - _log1pexp(eta)
        return (ll, y - s, -s * (1.0 - s))


class GaussianFamily():
    """Gaussian pseudo-likelihood y ~ N(eta, 1/tau)."""

    name = "gaussian"
    discrete = False

    def derivs(self, y, eta, exposure, tau):
        resid = y - eta
        ll = 0.5 * np.log(tau) - 0.5 * _LOG_2PI - 0.5 * tau * resid * resid
        return (ll, tau * resid, np.full(np.shape(eta), -tau))


class BinomialApproxFamily():
    """Expert categories scored as Bin(psi_z | N_z, expit(eta))."""

    name = "approx"
    discrete = True

    def __init__(self, approx):
        self.approx = approx

    def derivs(self, z, eta, exposure=None, param=None):
        psi, n = self.approx.lookup(z)
        s = expit(eta)
        ll = (gammaln(n + 1.0) - gammaln(psi + 1.0) - gammaln(n - psi + 1.0) +
              psi * eta - n * _log1pexp(eta))
        return (ll, psi - n * s, -n * s * (1.0 - s))


class BetaCategoryFamily():
    """Expert categories scored exactly through the beta CDF.

    Derivatives in eta use fourth-order central differences of the
    one-dimensional log probability.
    """

    name = "exact"
    discrete = True
    step = 1e-3

    def __init__(self, s_bar=DEFAULT_S_BAR, cutoffs=None, binary=False):
        self.s_bar = float(s_bar)
        self.cutoffs = cutoffs or CategoryCutoffs()
        self.binary = binary

    def logprob(self, z, eta):
        mu = np.clip(expit(eta), PROB_FLOOR, 1.0 - PROB_FLOOR)
        a = mu * self.s_bar
        b = (1.0 - mu) * self.s_bar
        z = np.asarray(z)
        if self.binary:
            c = self.cutoffs.binary_cutoff()
            p = np.where(z >= 3, _beta_interval(a, b, c, 1.0), _beta_interval(a, b, 0.0, c))
        else:
            edges = self.cutoffs.edges()
            p = np.zeros(np.broadcast(a, z).shape)
            for k in CATEGORIES:
                p = np.where(z == k, _beta_interval(a, b, edges[k - 1], edges[k]), p)
        return np.log(np.maximum(p, 1e-300))

    def derivs(self, z, eta, exposure=None, param=None):
        h = self.step
        f0 = self.logprob(z, eta)
        fp1 = self.logprob(z, eta + h)
        fm1 = self.logprob(z, eta - h)
        fp2 = self.logprob(z, eta + 2 * h)
        fm2 = self.logprob(z, eta - 2 * h)
        d1 = (-fp2 + 8.0 * fp1 - 8.0 * fm1 + fm2) / (12.0 * h)
        d2 = (-fp2 + 16.0 * fp1 - 30.0 * f0 + 16.0 * fm1 - fm2) / (12.0 * h * h)
        return (f0, d1, d2)


def expert_family(categories, form, s_bar=DEFAULT_S_BAR, cutoffs=None, approx=None):
    """Family for an expert layer given the configured category and likelihood form."""
    binary = categories == "binary"
    if categories not in ("binary", "four"):
        raise InputError(f"Unknown expert categories '{categories}', expected binary or four")
    if form == "exact":
        return BetaCategoryFamily(s_bar, cutoffs, binary=binary)
    if form == "approx":
        if binary:
            return BinomialApproxFamily(BinomialApprox.binary())
        return BinomialApproxFamily(approx or fit_binomial_approx(s_bar, cutoffs))
    raise InputError(f"Unknown expert likelihood form '{form}', expected exact or approx")

def survey_family(name):
    families = {"count": CountFamily, "presence": PresenceFamily, "gaussian": GaussianFamily}
    try:
        return families[name]()
    except KeyError:
        raise InputError(f"Unknown survey likelihood '{name}', expected count or presence") from None
