import numpy as np
import pytest
from scipy import integrate, stats

from expertsdm.exceptions import InputError
from expertsdm.priors import (PcSigmaPrior, PcRangePrior, PcPrior, GammaPrior, NormalPrior,
                              hyperprior_logpdf)


def test_pc_sigma_at_origin():
    prior = PcSigmaPrior(1.0, 0.01)
    assert prior.rate == pytest.approx(4.6052, abs=1e-4)
    assert hyperprior_logpdf("sigma_phi", 0.0, prior) == pytest.approx(np.log(4.605170186))

def test_pc_sigma_normalized_with_tail():
    prior = PcSigmaPrior(1.0, 0.01)
    pdf = lambda s: np.exp(prior.logpdf(s))
    assert integrate.quad(pdf, 0, np.inf, epsabs=1e-12)[0] == pytest.approx(1.0, abs=1e-8)
    assert integrate.quad(pdf, 1.0, np.inf, epsabs=1e-12)[0] == pytest.approx(0.01, abs=1e-8)

def test_pc_range_tail():
    prior = PcRangePrior(500.0, 0.01)
    pdf = lambda r: np.exp(prior.logpdf(r))
    assert integrate.quad(pdf, 0, 500.0, epsabs=1e-12)[0] == pytest.approx(0.01, abs=1e-8)

def test_pc_prior_pair():
    prior = PcPrior()
    assert prior.sigma.upper == 1.0
    assert prior.range.lower == 500.0

def test_gamma_density():
    prior = GammaPrior(2, 8)
    assert np.exp(prior.logpdf(0.25)) == pytest.approx(64 * 0.25 * np.exp(-2))
    assert np.exp(prior.logpdf(0.25)) == pytest.approx(2.1654, abs=1e-4)

def test_gamma_mixture_is_student_t():
    prior = GammaPrior(2, 8)
    t = stats.t(df=4, scale=2)
    for x in (0.0, 1.0, 3.0):
        mixture = lambda tau: stats.norm.pdf(x, scale=1 / np.sqrt(tau)) * np.exp(prior.logpdf(tau))
        value = integrate.quad(mixture, 0, np.inf, epsabs=1e-12, epsrel=1e-10)[0]
        assert value == pytest.approx(t.pdf(x), abs=1e-6)

def test_normal_prior():
    prior = NormalPrior(1.0, 2.0)
    assert prior.precision == 0.25
    assert prior.logpdf(1.0) == pytest.approx(stats.norm.logpdf(1.0, 1.0, 2.0))

def test_out_of_support_is_minus_infinity():
    assert hyperprior_logpdf("tau_u", -1.0, GammaPrior(2, 8)) == -np.inf
    assert hyperprior_logpdf("range_r", 0.0, PcRangePrior(1, 0.1)) == -np.inf

def test_bad_prior_settings():
    with pytest.raises(InputError):
        PcSigmaPrior(1.0, 1.5)
    with pytest.raises(InputError):
        PcRangePrior(0.0, 0.01)
    with pytest.raises(InputError):
        GammaPrior(0, 1)
    with pytest.raises(InputError):
        NormalPrior(0, 0)
