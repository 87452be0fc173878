"""Laplace approximation, hyperparameter search, prediction and LOO-CPO.

Hyperparameters are estimated by maximizing the Laplace log marginal on
the log scale and then held fixed (plug-in) for prediction and
leave-one-out refits.
"""

import time
import logging
import numpy as np
from scipy import sparse
from humanfriendly import format_timespan

from expertsdm import gmrf
from expertsdm.exceptions import ConvergenceError, InputError, NumericalError
from expertsdm.geometry import projection_matrix
from expertsdm.model import (LatentState, Hyper, latent_prior, joint_terms, hyper_log_prior,
                             survey_block, link_block, expert_block)
from expertsdm.swarm import Swarm
from expertsdm.util import save_npz

_LOG_2PI = np.log(2 * np.pi)

NEWTON_TOL = 1e-6
NEWTON_MAX_ITER = 100
HYPER_TOL = 1e-4
HYPER_MAX_SWEEPS = 30
QUADRATURE_TOL = 1e-8
QUADRATURE_NODES = 21
QUADRATURE_MAX_NODES = 21 * 2 ** 4
ARMIJO = 1e-4


class GaussianApprox():
    """Gaussian approximation N(mode, precision^-1) of the latent conditional."""

    def __init__(self, mode, precision, log_evidence, log_marginal, factor,
                 iterations=0, grad_norm=0.0):
        self.mode = mode
        self.precision = sparse.csc_matrix(precision)
        self.log_evidence = float(log_evidence)
        self.log_marginal = float(log_marginal)
        self.factor = factor
        self.iterations = iterations
        self.grad_norm = float(grad_norm)

    def __repr__(self):
        return (f"GaussianApprox(dim={self.mode.vector.size}, log_marginal={self.log_marginal:.6g}, "
                f"iterations={self.iterations})")

    @property
    def jitter(self):
        return self.factor.jitter

    def marginal_sd(self, indices):
        indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
        E = np.zeros((self.mode.vector.size, indices.size))
        E[indices, np.arange(indices.size)] = 1.0
        cov = self.factor.solve(E)
        return np.sqrt(np.maximum(cov[indices, np.arange(indices.size)], 0.0))


class FitResult():

    def __init__(self, hyper_map, approx, diagnostics=None):
        self.hyper_map = hyper_map
        self.approx = approx
        self.diagnostics = dict(diagnostics or {})

    def __repr__(self):
        return f"FitResult({self.hyper_map}, {self.approx})"


class PredictiveRaster():
    """Posterior predictive surfaces on the prediction raster's grid."""

    def __init__(self, mean, sd, experts=None, count_mean=None):
        self.mean = mean
        self.sd = sd
        self.experts = dict(experts or {})
        self.count_mean = count_mean

    def surfaces(self):
        """(file stem, raster) pairs in a fixed order."""
        out = [("pred_mean", self.mean), ("pred_sd", self.sd)]
        if self.count_mean is not None:
            out.append(("pred_count_mean", self.count_mean))
        for name in sorted(self.experts):
            for key in ("mean", "sd", "bias"):
                out.append((f"expert_{name}_{key}", self.experts[name][key]))
        return out


def _damped_factor(P, jitter, jitter_max):
    """Factor P, adding a growing ridge when it is not positive definite."""
    try:
        return gmrf.factorize(P, jitter, jitter_max)
    except NumericalError:
        pass
    scale = float(np.max(np.abs(P.diagonal()))) or 1.0
    eye = sparse.identity(P.shape[0], format="csc")
    damping = 1e-3
    while damping <= 1e6:
        try:
            logging.debug(f"Newton damping {damping:.3g}")
            return gmrf.factorize(P + damping * scale * eye, jitter, jitter_max)
        except NumericalError:
            damping *= 10
    raise gmrf.NotPositiveDefinite("Negative Hessian is not positive definite even after damping")

def laplace_fit(spec, blocks, hyper, init=None, prior=None, tol=NEWTON_TOL,
                max_iter=NEWTON_MAX_ITER, jitter=gmrf.JITTER, jitter_max=gmrf.JITTER_MAX):
    """Newton mode of the latent conditional and its Laplace log marginal.

    Steps are backtracked until the Armijo condition holds, so the joint
    log density never decreases. log_evidence approximates
    log p(data | hyper); log_marginal adds the hyperprior.
    """
    layout = spec.layout()
    prior = prior or latent_prior(spec, hyper, jitter, jitter_max)
    x = np.zeros(layout.dim) if init is None else np.array(_vec(init), dtype=float)
    f, g, H = joint_terms(x, hyper, blocks, spec, prior)

    iterations = 0
    while True:
        grad_norm = float(np.max(np.abs(g))) if g.size else 0.0
        if grad_norm <= tol:
            break
        if iterations >= max_iter:
            raise ConvergenceError(f"Newton iterations did not converge, gradient norm {grad_norm:.3g}",
                                   grad_norm, iterations)
        iterations += 1
        step = _damped_factor(-H, jitter, jitter_max).solve(g)
        slope = float(g @ step)
        t = 1.0
        while True:
            trial = x + t * step
            try:
                f_new, g_new, H_new = joint_terms(trial, hyper, blocks, spec, prior)
            except NumericalError as ex:
                logging.debug(f"Newton trial rejected: {ex}")
                f_new = -np.inf
            if f_new >= f + ARMIJO * t * slope:
                break
            t *= 0.5
            if t < 1e-12:
                raise ConvergenceError(f"Line search failed, gradient norm {grad_norm:.3g}",
                                       grad_norm, iterations)
        logging.debug(f"Newton {iterations}: f={f_new:.10g} step={t:.3g} |g|={grad_norm:.3g}")
        x, f, g, H = trial, f_new, g_new, H_new

    precision = sparse.csc_matrix(-H)
    factor = gmrf.factorize(precision, jitter, jitter_max)
    log_evidence = f + 0.5 * layout.dim * _LOG_2PI - 0.5 * factor.logdet()
    log_marginal = log_evidence + hyper_log_prior(spec, hyper)
    return GaussianApprox(LatentState(layout, x), precision, log_evidence, log_marginal,
                          factor, iterations, grad_norm)

def _vec(state):
    return state.vector if isinstance(state, LatentState) else state


class _Objective():
    """Laplace log marginal over log-hyperparameters with log-Jacobian."""

    def __init__(self, spec, blocks, template, settings):
        self.spec = spec
        self.blocks = blocks
        self.template = template
        self.settings = settings
        self.best = None
        self.evaluations = 0

    def hyper(self, theta):
        return self.template.with_values(np.exp(theta), self.spec.barrier_fraction)

    def __call__(self, theta, raise_errors=False):
        self.evaluations += 1
        warm = self.best[2].mode if self.best is not None else None
        try:
            hyper = self.hyper(theta)
            approx = laplace_fit(self.spec, self.blocks, hyper, init=warm, **self.settings)
            value = approx.log_marginal + float(np.sum(theta))
        except (NumericalError, InputError) as ex:
            if raise_errors:
                raise
            logging.warning(f"Hyperparameter proposal {np.exp(theta).tolist()} rejected: {ex}")
            return -np.inf
        if not np.isfinite(value):
            logging.warning(f"Hyperparameter proposal {np.exp(theta).tolist()} gave a non-finite marginal")
            return -np.inf
        logging.debug(f"log marginal {value:.10g} at {np.exp(theta).tolist()}")
        if self.best is None or value > self.best[0]:
            self.best = (value, np.array(theta), approx, hyper)
        return value

def optimize_hyperparameters(spec, blocks, init=None, tol=HYPER_TOL, max_sweeps=HYPER_MAX_SWEEPS,
                             step=0.5, min_step=1e-3, **settings):
    """Coordinate-wise quadratic search on the log-hyperparameters.

    Each coordinate is evaluated at +-h, the parabola through the three values
    proposes a move, and the best point is kept; h halves when a coordinate
    does not move. Stops when a sweep improves by less than tol nats.
    """
    started = time.time()
    template = init or Hyper.default(spec)
    objective = _Objective(spec, blocks, template, settings)
    theta = np.log(template.values())
    f0 = objective(theta, raise_errors=True)
    if not np.isfinite(f0):
        raise NumericalError(f"Initial hyperparameters {template} give a non-finite log marginal")
    steps = np.full(theta.size, float(step))
    names = template.names()

    sweeps = 0
    while theta.size and sweeps < max_sweeps:
        sweeps += 1
        sweep_start = f0
        for k in range(theta.size):
            h = steps[k]
            plus = theta.copy()
            plus[k] += h
            minus = theta.copy()
            minus[k] -= h
            f_plus = objective(plus)
            f_minus = objective(minus)
            candidates = [(f0, theta), (f_plus, plus), (f_minus, minus)]
            if np.isfinite(f_plus) and np.isfinite(f_minus):
                curvature = f_plus + f_minus - 2.0 * f0
                if curvature < 0:
                    delta = 0.5 * h * (f_minus - f_plus) / curvature
                    delta = float(np.clip(delta, -4.0 * h, 4.0 * h))
                    vertex = theta.copy()
                    vertex[k] += delta
                    candidates.append((objective(vertex), vertex))
            best_f, best_theta = max(candidates, key=lambda c: c[0])
            if best_f > f0 + 0.01 * tol:
                moved = abs(best_theta[k] - theta[k])
                theta, f0 = best_theta, best_f
                steps[k] = max(min(max(moved, h / 2), 2.0), min_step)
            else:
                steps[k] = max(h / 2, min_step)
            logging.debug(f"sweep {sweeps} {names[k]}: {np.exp(theta[k]):.6g} f={f0:.10g}")
        improvement = f0 - sweep_start
        logging.debug(f"sweep {sweeps}: log marginal {f0:.10g}, improvement {improvement:.3g}")
        if improvement < tol:
            break

    if objective.best is None:
        raise NumericalError("Every hyperparameter proposal was non-finite")
    _, theta_best, approx, hyper = objective.best
    if not np.allclose(theta_best, theta):
        hyper = objective.hyper(theta)
        approx = laplace_fit(spec, blocks, hyper, init=approx.mode, **settings)
    elapsed = time.time() - started
    logging.info(f"Hyperparameters optimized in {sweeps} sweeps, {objective.evaluations} "
                 f"evaluations, {format_timespan(elapsed)}")
    diagnostics = {"sweeps": sweeps,
                   "evaluations": objective.evaluations,
                   "newton_iterations": approx.iterations,
                   "grad_norm": approx.grad_norm,
                   "jitter": approx.jitter,
                   "log_marginal": approx.log_marginal,
                   "log_evidence": approx.log_evidence}
    return FitResult(hyper, approx, diagnostics)

def posterior_summary(fit, spec):
    """Mean and sd of alpha, beta and each expert's alpha_bar, c_bar."""
    layout = spec.layout()
    names = ["alpha"] + [f"beta[{n}]" for n in spec.covariate_names]
    indices = [layout.alpha] + list(range(layout.beta.start, layout.beta.stop))
    for (j, name) in enumerate(spec.expert_names):
        names += [f"alpha_bar[{name}]", f"c_bar[{name}]"]
        indices += [layout.alpha_bar(j), layout.c_bar(j)]
    mode = fit.approx.mode.vector
    sds = fit.approx.marginal_sd(indices)
    return {name: {"mean": float(mode[ix]), "sd": float(sd)}
            for (name, ix, sd) in zip(names, indices, sds)}

def prediction_covariates(spec, covariates, prediction_raster):
    """Standardized covariate matrix at the prediction raster's cells."""
    columns = []
    for (name, raster) in zip(spec.covariate_names, covariates):
        if not raster.same_geometry(prediction_raster):
            raise InputError(f"Covariate {name} does not share the prediction raster geometry")
        columns.append(raster.flat())
    X = np.column_stack(columns) if columns else np.zeros((prediction_raster.ncols * prediction_raster.nrows, 0))
    return spec.standardization.apply(X)

def posterior_predict(fit, prediction_raster, spec, covariates=(), count_scale=False):
    """Predictive mean and sd of the linear predictor at every raster cell.

    Cells outside the barrier mesh or with missing covariates are missing.
    Expert surfaces use the delta method on the expert predictor.
    """
    started = time.time()
    cells = prediction_raster.cell_centers()
    n = cells.shape[0]
    X = prediction_covariates(spec, covariates, prediction_raster)
    x = fit.approx.mode.vector
    factor = fit.approx.factor

    valid = ~np.isnan(X).any(axis=1)
    A_b = None
    if spec.spatial_field:
        A_b = projection_matrix(spec.barrier_mesh, cells)
        valid &= A_b.getnnz(axis=1) > 0
    rows = np.flatnonzero(valid)

    block = survey_block(spec, X, A_b if A_b is not None else sparse.csr_matrix((n, 0)),
                         kind="survey_prediction")
    mean = np.full(n, np.nan)
    sd = np.full(n, np.nan)
    B = block.design[rows]
    mean[rows] = B @ x
    sd[rows] = np.sqrt(np.maximum(factor.quad_diag(B), 0.0))

    def as_raster(v):
        return prediction_raster.with_values(v.reshape(prediction_raster.nrows, prediction_raster.ncols))

    count_mean = None
    if count_scale and spec.survey_likelihood == "count":
        count_mean = as_raster(np.exp(mean + 0.5 * sd * sd))

    experts = {}
    if spec.n_experts:
        A_e = projection_matrix(spec.expert_mesh, cells)
        e_rows = np.flatnonzero(valid & (A_e.getnnz(axis=1) > 0))
        link = link_block(spec, X, A_b if A_b is not None else sparse.csr_matrix((n, 0)))
        for (j, name) in enumerate(spec.expert_names):
            eb = expert_block(spec, j, A_e, link, kind="expert_prediction")
            m = np.full(n, np.nan)
            s = np.full(n, np.nan)
            bias = np.full(n, np.nan)
            m[e_rows] = eb.predictor(x, e_rows)
            s[e_rows] = np.sqrt(np.maximum(factor.quad_diag(eb.jacobian(x, e_rows)), 0.0))
            bias[e_rows] = A_e[e_rows] @ fit.approx.mode.varphi(j)
            experts[name] = {"mean": as_raster(m), "sd": as_raster(s), "bias": as_raster(bias)}

    logging.info(f"Predicted {rows.size} of {n} cells in {format_timespan(time.time() - started)}")
    return PredictiveRaster(as_raster(mean), as_raster(sd), experts, count_mean)


def predictive_density(family, y, exposure, param, mean, var, tol=QUADRATURE_TOL):
    """Integral of p(y | eta) N(eta; mean, var) by Gauss-Hermite, doubling nodes to tol."""
    nodes = QUADRATURE_NODES
    previous = None
    while True:
        t, w = np.polynomial.hermite.hermgauss(nodes)
        eta = mean + np.sqrt(2.0 * max(var, 0.0)) * t
        ll, _, _ = family.derivs(np.full(nodes, y), eta, np.full(nodes, exposure), param)
        value = float(np.sum(w * np.exp(ll)) / np.sqrt(np.pi))
        if previous is not None and abs(value - previous) <= tol * abs(value):
            return value
        if nodes >= QUADRATURE_MAX_NODES:
            logging.warning(f"Predictive quadrature stopped at {nodes} nodes, "
                            f"relative change {abs(value - previous) / abs(value):.3g}")
            return value
        previous = value
        nodes *= 2

def loo_predictive(spec, blocks, hyper, prior, block_index, row, init, quadrature_tol=QUADRATURE_TOL,
                   **settings):
    """CPO of one survey row: refit without it, then integrate its predictive."""
    block = blocks[block_index]
    weights = block.weights.copy()
    weights[row] = 0.0
    reduced = list(blocks)
    reduced[block_index] = block.with_weights(weights)
    approx = laplace_fit(spec, reduced, hyper, init=init, prior=prior, **settings)
    b = block.design[row]
    mean = float((b @ approx.mode.vector)[0])
    var = float(approx.factor.quad_diag(b)[0])
    param = getattr(hyper, block.param) if block.param else None
    return predictive_density(block.family, block.response[row], block.exposure[row], param, mean, var,
                              tol=quadrature_tol)

def loo_cpo(spec, blocks, fit, threads=1, update_cb=None, quadrature_tol=QUADRATURE_TOL, **settings):
    """Leave-one-out CPO for every survey row; failed refits give NaN."""
    started = time.time()
    survey = [(ix, b) for (ix, b) in enumerate(blocks) if b.kind == "survey"]
    if len(survey) != 1:
        raise InputError(f"Expected one survey block, got {len(survey)}")
    block_index, block = survey[0]
    rows = np.flatnonzero(~np.isnan(block.response))
    cpo = np.full(block.n_rows, np.nan)
    if rows.size == 0:
        return cpo[rows]

    hyper = fit.hyper_map
    prior = latent_prior(spec, hyper, settings.get("jitter", gmrf.JITTER),
                         settings.get("jitter_max", gmrf.JITTER_MAX))
    init = fit.approx.mode.vector

    def refit(row):
        return loo_predictive(spec, blocks, hyper, prior, block_index, row, init,
                              quadrature_tol=quadrature_tol, **settings)

    def collect(row, value, ex):
        if isinstance(ex, NumericalError):
            logging.warning(f"LOO refit for survey row {row} failed: {ex}")
        elif ex is not None:
            raise ex
        else:
            cpo[row] = value

    Swarm(threads, name="loo").run_keyed(refit, [int(r) for r in rows], collect,
                                         update_cb=update_cb, key_arg="row")
    logging.info(f"LOO refits for {rows.size} observations in {format_timespan(time.time() - started)}")
    return cpo[rows]


def save_fit_state(path, fit):
    a = fit.approx
    P = sparse.coo_matrix(a.precision)
    order = np.lexsort((P.col, P.row))
    save_npz(path,
             hyper_names=np.array(fit.hyper_map.names()),
             hyper_values=fit.hyper_map.values(),
             mode=a.mode.vector,
             precision_row=P.row[order], precision_col=P.col[order], precision_data=P.data[order],
             log_evidence=np.float64(a.log_evidence), log_marginal=np.float64(a.log_marginal),
             iterations=np.int64(a.iterations), grad_norm=np.float64(a.grad_norm))

def _load_npz(path):
    try:
        with np.load(path) as data:
            return {k: data[k] for k in data.files}
    except (OSError, ValueError) as ex:
        raise InputError(f"Unable to read fit state {path}: {ex}") from ex

def load_hyper(path, spec):
    """Hyperparameters stored in a fit state file."""
    data = _load_npz(path)
    names = [str(n) for n in data["hyper_names"]]
    return Hyper.from_data(spec, dict(zip(names, data["hyper_values"].tolist())))

def load_fit_state(path, spec, jitter=gmrf.JITTER, jitter_max=gmrf.JITTER_MAX):
    data = _load_npz(path)
    layout = spec.layout()
    if data["mode"].size != layout.dim:
        raise InputError(f"{path}: stored latent dimension {data['mode'].size} does not match "
                         f"the model's {layout.dim}")
    names = [str(n) for n in data["hyper_names"]]
    hyper = Hyper.from_data(spec, dict(zip(names, data["hyper_values"].tolist())))
    precision = sparse.csc_matrix((data["precision_data"], (data["precision_row"], data["precision_col"])),
                                  shape=(layout.dim, layout.dim))
    factor = gmrf.factorize(precision, jitter, jitter_max)
    approx = GaussianApprox(LatentState(layout, data["mode"]), precision,
                            float(data["log_evidence"]), float(data["log_marginal"]), factor,
                            int(data["iterations"]), float(data["grad_norm"]))
    return FitResult(hyper, approx, {"loaded_from": str(path)})
