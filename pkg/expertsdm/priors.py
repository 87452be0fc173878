"""Prior densities for hyperparameters and fixed effects.

Gamma priors use the shape-rate form, so Gamma(2, 8) on a precision gives a
Student-t marginal with 4 degrees of freedom and scale 2.
"""

import logging
import numpy as np
from scipy.special import gammaln

from expertsdm.exceptions import InputError

_LOG_2PI = np.log(2 * np.pi)


class PcSigmaPrior():
    """Exponential prior on a standard deviation with Pr(sigma > upper) = tail."""

    def __init__(self, upper, tail):
        _check_tail("PC sigma", upper, tail)
        self.upper = float(upper)
        self.tail = float(tail)
        self.rate = -np.log(tail) / upper

    def __repr__(self):
        return f"PcSigmaPrior(upper={self.upper}, tail={self.tail})"

    def in_support(self, value):
        return value >= 0

    def logpdf(self, value):
        return np.log(self.rate) - self.rate * value


class PcRangePrior():
    """Inverse-range exponential prior with Pr(range < lower) = tail."""

    def __init__(self, lower, tail):
        _check_tail("PC range", lower, tail)
        self.lower = float(lower)
        self.tail = float(tail)
        self.rate = -self.lower * np.log(tail)

    def __repr__(self):
        return f"PcRangePrior(lower={self.lower}, tail={self.tail})"

    def in_support(self, value):
        return value > 0

    def logpdf(self, value):
        return np.log(self.rate) - 2.0 * np.log(value) - self.rate / value


class PcPrior():
    """Joint PC prior on the barrier field's (sigma, range) pair."""

    def __init__(self, sigma_upper=1.0, sigma_tail=0.01, range_lower=500.0, range_tail=0.01):
        self.sigma = PcSigmaPrior(sigma_upper, sigma_tail)
        self.range = PcRangePrior(range_lower, range_tail)

    def __repr__(self):
        return f"PcPrior({self.sigma}, {self.range})"


class GammaPrior():

    def __init__(self, shape, rate):
        if not (shape > 0 and rate > 0):
            raise InputError(f"Gamma prior needs positive shape and rate, got ({shape}, {rate})")
        self.shape = float(shape)
        self.rate = float(rate)

    def __repr__(self):
        return f"GammaPrior(shape={self.shape:.4g}, rate={self.rate:.4g})"

    def in_support(self, value):
        return value > 0

    def logpdf(self, value):
        a, b = self.shape, self.rate
        return a * np.log(b) - gammaln(a) + (a - 1.0) * np.log(value) - b * value


class NormalPrior():

    def __init__(self, mean=0.0, sd=1.0):
        if not sd > 0:
            raise InputError(f"Normal prior needs a positive sd, got {sd}")
        self.mean = float(mean)
        self.sd = float(sd)

    def __repr__(self):
        return f"NormalPrior(mean={self.mean}, sd={self.sd})"

    @property
    def precision(self):
        return 1.0 / self.sd ** 2

    def in_support(self, value):
        return np.isfinite(value)

    def logpdf(self, value):
        z = (value - self.mean) / self.sd
        return -0.5 * _LOG_2PI - np.log(self.sd) - 0.5 * z * z


def _check_tail(what, threshold, tail):
    if not threshold > 0:
        raise InputError(f"{what} prior threshold must be positive, got {threshold}")
    if not 0 < tail < 1:
        raise InputError(f"{what} prior tail probability must lie in (0, 1), got {tail}")

def hyperprior_logpdf(name, value, prior):
    """Prior log density of one hyperparameter; -inf outside the support."""
    if not prior.in_support(value):
        logging.warning(f"Hyperparameter {name}={value} outside the support of {prior}")
        return -np.inf
    return float(prior.logpdf(value))
