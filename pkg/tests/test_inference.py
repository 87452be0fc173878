import numpy as np
import pytest
from scipy import integrate, optimize, sparse, stats
from scipy.special import expit

from expertsdm.exceptions import ConvergenceError, InputError
from expertsdm.likelihoods import GaussianFamily, PresenceFamily
from expertsdm.raster import Raster
from expertsdm.model import ModelSpec, Hyper, survey_block
from expertsdm.inference import (FitResult, laplace_fit, optimize_hyperparameters, posterior_summary,
                                 posterior_predict, predictive_density, loo_cpo, save_fit_state,
                                 load_fit_state, load_hyper)


def _regression(likelihood="gaussian", n=25, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    if likelihood == "gaussian":
        y = 0.5 + 1.2 * x + rng.normal(0, 0.5, n)
    elif likelihood == "presence":
        y = (rng.uniform(size=n) < expit(0.3 + x)).astype(float)
    else:
        y = rng.poisson(np.exp(1.0 + 0.4 * x)).astype(float)
    spec = ModelSpec(likelihood, spatial_field=False, covariate_names=["x"])
    block = survey_block(spec, x, sparse.csr_matrix((n, 0)), response=y)
    return (spec, block, x, y)

def _conjugate(x, y, tau, prior_var=100.0):
    D = np.column_stack([np.ones_like(x), x])
    P = np.eye(2) / prior_var + tau * D.T @ D
    mode = np.linalg.solve(P, tau * D.T @ y)
    cov = prior_var * D @ D.T + np.eye(x.size) / tau
    evidence = stats.multivariate_normal(np.zeros(x.size), cov).logpdf(y)
    return (D, P, mode, evidence)


def test_laplace_is_exact_for_gaussian():
    spec, block, x, y = _regression()
    hyper = Hyper(noise_tau=4.0)
    approx = laplace_fit(spec, [block], hyper)
    _, P, mode, evidence = _conjugate(x, y, 4.0)
    assert approx.mode.vector == pytest.approx(mode, rel=1e-6)
    assert approx.precision.toarray() == pytest.approx(P)
    assert approx.log_evidence == pytest.approx(evidence, rel=1e-6)
    assert approx.log_marginal - approx.log_evidence == pytest.approx(stats.gamma(1.0, scale=100.0).logpdf(4.0))
    assert approx.marginal_sd([0, 1]) == pytest.approx(np.sqrt(np.diag(np.linalg.inv(P))), rel=1e-6)

def test_laplace_converges_for_presence():
    spec, block, _, _ = _regression("presence", n=60)
    approx = laplace_fit(spec, [block], Hyper())
    assert approx.grad_norm <= 1e-6
    assert approx.iterations >= 1
    assert np.all(np.linalg.eigvalsh(approx.precision.toarray()) > 0)

def test_laplace_reports_non_convergence():
    spec, block, _, _ = _regression("presence", n=60)
    with pytest.raises(ConvergenceError) as info:
        laplace_fit(spec, [block], Hyper(), max_iter=0)
    assert info.value.iterations == 0
    assert info.value.grad_norm > 0

def test_laplace_warm_start():
    spec, block, _, _ = _regression("count", n=40)
    hyper = Hyper(overdispersion=5.0)
    cold = laplace_fit(spec, [block], hyper)
    warm = laplace_fit(spec, [block], hyper, init=cold.mode)
    assert warm.iterations <= 1
    assert warm.log_marginal == pytest.approx(cold.log_marginal, abs=1e-6)

def test_predictive_density_gaussian():
    value = predictive_density(GaussianFamily(), 0.7, 1.0, 4.0, 0.2, 0.3)
    assert value == pytest.approx(stats.norm.pdf(0.7, 0.2, np.sqrt(0.3 + 0.25)), rel=1e-8)

def test_predictive_density_presence():
    mean, var = 0.3, 1.2
    expected, _ = integrate.quad(lambda e: expit(e) * stats.norm.pdf(e, mean, np.sqrt(var)), -30, 30,
                                 epsabs=1e-13)
    value = predictive_density(PresenceFamily(), 1.0, 1.0, None, mean, var)
    assert value == pytest.approx(expected, rel=1e-7)
    # zero variance reduces to the plug-in likelihood
    assert predictive_density(PresenceFamily(), 0.0, 1.0, None, mean, 0.0) == pytest.approx(1 - expit(mean))

def _closed_form_cpo(x, y, tau):
    D, P, _, _ = _conjugate(x, y, tau)
    out = []
    for i in range(y.size):
        d = D[i]
        Pi = P - tau * np.outer(d, d)
        keep = np.arange(y.size) != i
        mi = np.linalg.solve(Pi, tau * D[keep].T @ y[keep])
        var = d @ np.linalg.solve(Pi, d) + 1 / tau
        out.append(stats.norm.pdf(y[i], d @ mi, np.sqrt(var)))
    return np.array(out)

@pytest.mark.parametrize("threads", [1, 3])
def test_loo_cpo_gaussian(threads):
    spec, block, x, y = _regression(n=12)
    hyper = Hyper(noise_tau=4.0)
    fit = FitResult(hyper, laplace_fit(spec, [block], hyper))
    calls = []
    cpo = loo_cpo(spec, [block], fit, threads=threads, update_cb=lambda d, t: calls.append((d, t)))
    assert cpo == pytest.approx(_closed_form_cpo(x, y, 4.0), rel=1e-5)
    assert calls[-1] == (12, 12)
    assert [d for (d, _) in calls] == list(range(1, 13))

def test_loo_cpo_skips_missing_rows():
    spec, block, _, y = _regression("presence", n=10)
    y = y.copy()
    y[[2, 5]] = np.nan
    block = survey_block(spec, np.zeros(10), sparse.csr_matrix((10, 0)), response=y)
    fit = FitResult(Hyper(), laplace_fit(spec, [block], Hyper()))
    cpo = loo_cpo(spec, [block], fit)
    assert cpo.shape == (8,)
    assert np.all((cpo > 0) & (cpo < 1))

def test_loo_cpo_needs_one_survey_block():
    spec, block, _, _ = _regression(n=5)
    hyper = Hyper(noise_tau=1.0)
    fit = FitResult(hyper, laplace_fit(spec, [block], hyper))
    with pytest.raises(InputError):
        loo_cpo(spec, [block, block], fit)

def test_optimize_hyperparameters_finds_maximum():
    spec, block, _, _ = _regression(n=30, seed=3)
    fit = optimize_hyperparameters(spec, [block], init=Hyper(noise_tau=1.0))
    tau = fit.hyper_map.noise_tau

    def objective(t):
        return laplace_fit(spec, [block], Hyper(noise_tau=t)).log_marginal + np.log(t)

    best = objective(tau)
    for t in np.exp(np.linspace(np.log(tau) - 1, np.log(tau) + 1, 21)):
        assert objective(t) <= best + 1e-3
    assert fit.diagnostics["sweeps"] >= 1
    assert fit.diagnostics["log_marginal"] == pytest.approx(fit.approx.log_marginal)
    assert fit.approx.grad_norm <= 1e-6

def test_optimize_hyperparameters_stops_at_optimum():
    spec, block, _, _ = _regression(n=30, seed=3)

    def negative(log_t):
        t = np.exp(log_t)
        return -(laplace_fit(spec, [block], Hyper(noise_tau=t)).log_marginal + log_t)

    best = optimize.minimize_scalar(negative, bracket=(-2.0, 3.0), tol=1e-10)
    fit = optimize_hyperparameters(spec, [block], init=Hyper(noise_tau=np.exp(best.x)))
    assert fit.diagnostics["sweeps"] == 1
    assert fit.hyper_map.noise_tau == pytest.approx(np.exp(best.x), rel=1e-6)
    assert fit.diagnostics["log_marginal"] + best.x == pytest.approx(-best.fun, abs=1e-6)

def test_optimize_hyperparameters_same_basin_from_both_sides():
    spec, block, _, _ = _regression(n=30, seed=3)
    low = optimize_hyperparameters(spec, [block], init=Hyper(noise_tau=0.05))
    high = optimize_hyperparameters(spec, [block], init=Hyper(noise_tau=50.0))
    assert low.hyper_map.noise_tau == pytest.approx(high.hyper_map.noise_tau, rel=0.05)
    assert low.diagnostics["log_marginal"] == pytest.approx(high.diagnostics["log_marginal"], abs=1e-2)
    assert low.diagnostics["sweeps"] > 1 and high.diagnostics["sweeps"] > 1

def test_posterior_summary():
    spec, block, x, y = _regression()
    fit = FitResult(Hyper(noise_tau=4.0), laplace_fit(spec, [block], Hyper(noise_tau=4.0)))
    summary = posterior_summary(fit, spec)
    assert sorted(summary) == ["alpha", "beta[x]"]
    _, P, mode, _ = _conjugate(x, y, 4.0)
    assert summary["beta[x]"]["mean"] == pytest.approx(mode[1], rel=1e-6)
    assert summary["alpha"]["sd"] == pytest.approx(np.sqrt(np.linalg.inv(P)[0, 0]), rel=1e-6)

def test_posterior_predict_regression():
    spec, block, x, y = _regression()
    fit = FitResult(Hyper(noise_tau=4.0), laplace_fit(spec, [block], Hyper(noise_tau=4.0)))
    values = np.linspace(-2, 2, 20).reshape(4, 5)
    values[3, 4] = np.nan
    covariate = Raster(5, 4, 1.0, (0, 0), values)
    pred = posterior_predict(fit, covariate, spec, [covariate])
    _, P, mode, _ = _conjugate(x, y, 4.0)
    D = np.column_stack([np.ones(20), values.ravel()])
    mean = pred.mean.flat()
    sd = pred.sd.flat()
    ok = ~np.isnan(values.ravel())
    assert mean[ok] == pytest.approx((D @ mode)[ok], rel=1e-6)
    expected_sd = np.sqrt(np.einsum("ij,jk,ik->i", D[ok], np.linalg.inv(P), D[ok]))
    assert sd[ok] == pytest.approx(expected_sd, rel=1e-5)
    assert np.isnan(mean[19]) and np.isnan(sd[19])
    assert [stem for (stem, _) in pred.surfaces()] == ["pred_mean", "pred_sd"]

def test_posterior_predict_count_scale():
    spec, block, x, _ = _regression("count", n=40)
    hyper = Hyper(overdispersion=5.0)
    fit = FitResult(hyper, laplace_fit(spec, [block], hyper))
    covariate = Raster(3, 2, 1.0, (0, 0), np.linspace(-1, 1, 6).reshape(2, 3))
    pred = posterior_predict(fit, covariate, spec, [covariate], count_scale=True)
    m = pred.mean.flat()
    s = pred.sd.flat()
    assert pred.count_mean.flat() == pytest.approx(np.exp(m + 0.5 * s * s))
    assert "pred_count_mean" in [stem for (stem, _) in pred.surfaces()]

def test_posterior_predict_rejects_foreign_geometry():
    spec, block, _, _ = _regression()
    fit = FitResult(Hyper(noise_tau=4.0), laplace_fit(spec, [block], Hyper(noise_tau=4.0)))
    covariate = Raster(5, 4, 1.0, (0, 0), np.zeros((4, 5)))
    with pytest.raises(InputError):
        posterior_predict(fit, Raster(5, 4, 2.0, (0, 0)), spec, [covariate])

def test_fit_state_round_trip(tmp_path):
    spec, block, _, _ = _regression("count", n=30)
    hyper = Hyper(overdispersion=3.0)
    fit = FitResult(hyper, laplace_fit(spec, [block], hyper))
    path = str(tmp_path / "fit_state.npz")
    save_fit_state(path, fit)
    back = load_fit_state(path, spec)
    assert back.hyper_map.to_data() == hyper.to_data()
    assert np.array_equal(back.approx.mode.vector, fit.approx.mode.vector)
    assert (back.approx.precision != fit.approx.precision).nnz == 0
    assert back.approx.log_marginal == fit.approx.log_marginal
    assert load_hyper(path, spec).overdispersion == 3.0

def test_fit_state_is_reproducible(tmp_path):
    spec, block, _, _ = _regression("count", n=30)
    hyper = Hyper(overdispersion=3.0)
    fit = FitResult(hyper, laplace_fit(spec, [block], hyper))
    save_fit_state(str(tmp_path / "a.npz"), fit)
    save_fit_state(str(tmp_path / "b.npz"), fit)
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()

def test_fit_state_errors(tmp_path):
    spec, block, _, _ = _regression("count", n=30)
    hyper = Hyper(overdispersion=3.0)
    path = str(tmp_path / "fit_state.npz")
    save_fit_state(path, FitResult(hyper, laplace_fit(spec, [block], hyper)))
    other = ModelSpec("count", spatial_field=False, covariate_names=["x", "y"])
    with pytest.raises(InputError):
        load_fit_state(path, other)
    garbage = tmp_path / "garbage.npz"
    garbage.write_text("not an archive")
    with pytest.raises(InputError):
        load_fit_state(str(garbage), spec)
    with pytest.raises(InputError):
        load_hyper(str(tmp_path / "missing.npz"), spec)

def test_loo_cpo_presence_matches_dense_refits():
    spec, block, x, y = _regression("presence", n=10, seed=4)
    fit = FitResult(Hyper(), laplace_fit(spec, [block], Hyper()))
    cpo = loo_cpo(spec, [block], fit)

    D = np.column_stack([np.ones_like(x), x])
    expected = []
    for i in range(y.size):
        keep = np.arange(y.size) != i
        Dk, yk = D[keep], y[keep]
        b = np.zeros(2)
        for _ in range(50):
            s = expit(Dk @ b)
            g = Dk.T @ (yk - s) - b / 100.0
            H = Dk.T @ (Dk * (s * (1 - s))[:, None]) + np.eye(2) / 100.0
            b = b + np.linalg.solve(H, g)
        s = expit(Dk @ b)
        H = Dk.T @ (Dk * (s * (1 - s))[:, None]) + np.eye(2) / 100.0
        mean = D[i] @ b
        sd = np.sqrt(D[i] @ np.linalg.solve(H, D[i]))
        p = (lambda e: expit(e)) if y[i] == 1 else (lambda e: 1 - expit(e))
        value, _ = integrate.quad(lambda e: p(e) * stats.norm.pdf(e, mean, sd), mean - 12 * sd, mean + 12 * sd,
                                  epsabs=1e-13)
        expected.append(value)
    assert cpo == pytest.approx(expected, rel=1e-6)
