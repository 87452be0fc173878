"""Joint latent Gaussian model: layout, design blocks and log density.

The latent vector is laid out as

    [alpha, beta (p), phi (n_b), then per expert: alpha_bar_j, c_bar_j, varphi_bar_j (n_e)]

where phi lives on the barrier mesh (absent when the spatial field is off)
and each varphi_bar_j on the expert mesh. A design block maps the latent
vector to one linear predictor per row. Expert blocks add the shared term
beta^T x + phi, evaluated by a link block at the expert rows, scaled by the
expert's c_bar_j.
"""

import logging
import numpy as np
from scipy import sparse

from expertsdm import gmrf, likelihoods
from expertsdm.exceptions import InputError, NonFiniteError
from expertsdm.geometry import adjacency
from expertsdm.priors import (PcPrior, GammaPrior, NormalPrior, hyperprior_logpdf)

_LOG_2PI = np.log(2 * np.pi)

SURVEY_LIKELIHOODS = ("count", "presence", "gaussian")
EXPERT_CATEGORIES = ("binary", "four")
EXPERT_FORMS = ("exact", "approx")
BLOCK_KINDS = ("survey", "expert", "survey_prediction", "expert_prediction", "link")


class ModelPriors():

    def __init__(self, fixed_effect_variance=100.0, alpha_bar_sd=2.0, c_bar_sd=0.5,
                 pc_sigma=(1.0, 0.01), pc_range=(500.0, 0.01), bym_gamma=(2.0, 8.0),
                 overdispersion_gamma=(np.sqrt(10.0), 1.0 / np.sqrt(10.0)),
                 noise_gamma=(1.0, 0.01)):
        self.fixed_effect = NormalPrior(0.0, np.sqrt(fixed_effect_variance))
        self.alpha_bar = NormalPrior(0.0, alpha_bar_sd)
        self.c_bar = NormalPrior(0.0, c_bar_sd)
        self.pc = PcPrior(pc_sigma[0], pc_sigma[1], pc_range[0], pc_range[1])
        self.bym = GammaPrior(*bym_gamma)
        self.overdispersion = GammaPrior(*overdispersion_gamma)
        self.noise = GammaPrior(*noise_gamma)

    @classmethod
    def from_data(cls, data):
        data = dict(data or {})
        known = ("fixed_effect_variance", "alpha_bar_sd", "c_bar_sd", "pc_sigma", "pc_range",
                 "bym_gamma", "overdispersion_gamma", "noise_gamma")
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise InputError(f"Unknown prior settings: {', '.join(unknown)}")
        return cls(**data)

    def to_data(self):
        return {"fixed_effect_variance": self.fixed_effect.sd ** 2,
                "alpha_bar_sd": self.alpha_bar.sd,
                "c_bar_sd": self.c_bar.sd,
                "pc_sigma": [self.pc.sigma.upper, self.pc.sigma.tail],
                "pc_range": [self.pc.range.lower, self.pc.range.tail],
                "bym_gamma": [self.bym.shape, self.bym.rate],
                "overdispersion_gamma": [self.overdispersion.shape, self.overdispersion.rate],
                "noise_gamma": [self.noise.shape, self.noise.rate]}


class LatentLayout():

    def __init__(self, n_covariates, n_barrier, n_expert, n_experts):
        self.n_covariates = int(n_covariates)
        self.n_barrier = int(n_barrier)
        self.n_expert = int(n_expert)
        self.n_experts = int(n_experts)
        self.alpha = 0
        self.beta = slice(1, 1 + self.n_covariates)
        self.phi = slice(self.beta.stop, self.beta.stop + self.n_barrier)
        self._expert_start = self.phi.stop
        self.dim = self._expert_start + self.n_experts * (2 + self.n_expert)

    def __repr__(self):
        return (f"LatentLayout(covariates={self.n_covariates}, barrier={self.n_barrier}, "
                f"expert_mesh={self.n_expert}, experts={self.n_experts}, dim={self.dim})")

    def _check_expert(self, j):
        if not 0 <= j < self.n_experts:
            raise InputError(f"Expert {j} does not exist, model has {self.n_experts}")

    def alpha_bar(self, j):
        self._check_expert(j)
        return self._expert_start + j * (2 + self.n_expert)

    def c_bar(self, j):
        return self.alpha_bar(j) + 1

    def varphi(self, j):
        start = self.alpha_bar(j) + 2
        return slice(start, start + self.n_expert)

    def names(self):
        out = ["alpha"] + [f"beta[{k}]" for k in range(self.n_covariates)]
        out += [f"phi[{k}]" for k in range(self.n_barrier)]
        for j in range(self.n_experts):
            out += [f"alpha_bar[{j}]", f"c_bar[{j}]"]
            out += [f"varphi_bar[{j}][{k}]" for k in range(self.n_expert)]
        return out


class LatentState():

    def __init__(self, layout, vector=None):
        self.layout = layout
        if vector is None:
            vector = np.zeros(layout.dim)
        vector = np.array(vector, dtype=float).ravel()
        if vector.size != layout.dim:
            raise InputError(f"Latent vector of length {vector.size} does not match layout dimension {layout.dim}")
        self.vector = vector

    def __repr__(self):
        return f"LatentState({self.layout})"

    @property
    def alpha(self):
        return self.vector[self.layout.alpha]

    @property
    def beta(self):
        return self.vector[self.layout.beta]

    @property
    def phi(self):
        return self.vector[self.layout.phi]

    def alpha_bar(self, j):
        return self.vector[self.layout.alpha_bar(j)]

    def c_bar(self, j):
        return self.vector[self.layout.c_bar(j)]

    def varphi(self, j):
        return self.vector[self.layout.varphi(j)]

    def copy(self):
        return LatentState(self.layout, self.vector.copy())


def covariate_matrix(values, n, p, what="Covariate"):
    """values as an (n, p) float matrix; n=None accepts any row count."""
    X = np.asarray(values, dtype=float)
    if X.ndim == 1:
        if p == 0 and X.size == 0:
            X = np.zeros((n or 0, 0))
        elif p == 1:
            X = X[:, None]
        elif X.size == p:
            X = X[None, :]
    if X.ndim != 2 or X.shape[1] != p or (n is not None and X.shape[0] != n):
        raise InputError(f"{what} covariates have shape {X.shape}, expected ({n}, {p})")
    return X


class Standardization():
    """Centering and scaling applied to covariates before fitting."""

    def __init__(self, means, sds):
        self.means = np.asarray(means, dtype=float)
        self.sds = np.asarray(sds, dtype=float)
        if np.any(~(self.sds > 0)):
            raise InputError("Covariate has zero variance over the mesh and cannot be standardized")

    @classmethod
    def fit(cls, values):
        values = np.atleast_2d(np.asarray(values, dtype=float))
        if values.shape[1] == 0:
            return cls(np.zeros(0), np.zeros(0))
        means = np.nanmean(values, axis=0)
        sds = np.nanstd(values, axis=0)
        return cls(means, sds)

    @classmethod
    def identity(cls, n):
        return cls(np.zeros(n), np.ones(n))

    def apply(self, values):
        values = covariate_matrix(values, None, self.means.size)
        return (values - self.means) / self.sds

    def to_data(self):
        return {"means": self.means.tolist(), "sds": self.sds.tolist()}

    @classmethod
    def from_data(cls, data):
        return cls(data["means"], data["sds"])


class ModelSpec():
    """Declarative description of one model of the family.

    The barrier mesh carries phi and fixes its dimension; the expert mesh
    carries the per-expert bias fields. With no experts the model is
    survey-only.
    """

    def __init__(self, survey_likelihood="presence", expert_categories="four",
                 expert_form="exact", covariate_names=(), expert_names=(),
                 priors=None, s_bar=likelihoods.DEFAULT_S_BAR,
                 cutoffs=likelihoods.DEFAULT_CUTOFFS, spatial_field=True,
                 barrier_fraction=0.2, barrier_mesh=None, expert_mesh=None,
                 binomial_approx=None, standardization=None):
        if survey_likelihood not in SURVEY_LIKELIHOODS:
            raise InputError(f"Unknown survey likelihood '{survey_likelihood}'")
        if expert_categories not in EXPERT_CATEGORIES:
            raise InputError(f"Unknown expert categories '{expert_categories}'")
        if expert_form not in EXPERT_FORMS:
            raise InputError(f"Unknown expert likelihood form '{expert_form}'")
        if spatial_field and barrier_mesh is None:
            raise InputError("A spatial field needs a barrier mesh")
        if expert_names and expert_mesh is None:
            raise InputError("Experts need an expert mesh")
        if not 0 < barrier_fraction < 1:
            raise InputError(f"Barrier fraction must lie in (0, 1), got {barrier_fraction}")
        self.survey_likelihood = survey_likelihood
        self.expert_categories = expert_categories
        self.expert_form = expert_form
        self.covariate_names = list(covariate_names)
        self.expert_names = list(expert_names)
        self.priors = priors or ModelPriors()
        self.s_bar = float(s_bar)
        self.cutoffs = likelihoods.CategoryCutoffs(cutoffs)
        self.spatial_field = bool(spatial_field)
        self.barrier_fraction = float(barrier_fraction)
        self.barrier_mesh = barrier_mesh
        self.expert_mesh = expert_mesh
        self.survey_family = likelihoods.survey_family(survey_likelihood)
        self.expert_family = None
        if self.expert_names:
            self.expert_family = likelihoods.expert_family(expert_categories, expert_form,
                                                           self.s_bar, self.cutoffs,
                                                           approx=binomial_approx)
        self.standardization = standardization or Standardization.identity(len(self.covariate_names))
        self._graph = None

    def __repr__(self):
        return (f"ModelSpec(survey={self.survey_likelihood}, experts={self.n_experts}, "
                f"expert_likelihood={self.expert_label()}, spatial_field={self.spatial_field})")

    @property
    def n_experts(self):
        return len(self.expert_names)

    def expert_label(self):
        if not self.expert_names:
            return "--"
        return f"{self.expert_categories}/{self.expert_form}"

    def layout(self):
        n_barrier = self.barrier_mesh.n_vertices() if self.spatial_field else 0
        n_expert = self.expert_mesh.n_vertices() if self.expert_names else 0
        return LatentLayout(len(self.covariate_names), n_barrier, n_expert, self.n_experts)

    def expert_graph(self):
        if self._graph is None:
            self._graph = adjacency(self.expert_mesh)
        return self._graph

    def binomial_approx(self):
        family = self.expert_family
        return getattr(family, "approx", None)


class Hyper():
    """Hyperparameters of one model: barrier field, per-expert BYM, r, noise."""

    def __init__(self, barrier=None, bym=(), overdispersion=None, noise_tau=None):
        self.barrier = barrier
        self.bym = list(bym)
        if overdispersion is not None and not overdispersion > 0:
            raise InputError(f"Overdispersion must be positive, got {overdispersion}")
        if noise_tau is not None and not noise_tau > 0:
            raise InputError(f"Noise precision must be positive, got {noise_tau}")
        self.overdispersion = overdispersion
        self.noise_tau = noise_tau

    def __repr__(self):
        return (f"Hyper(barrier={self.barrier}, bym={self.bym}, "
                f"overdispersion={self.overdispersion}, noise_tau={self.noise_tau})")

    @classmethod
    def default(cls, spec):
        barrier = None
        if spec.spatial_field:
            extent = np.ptp(spec.barrier_mesh.vertices, axis=0).max()
            barrier = gmrf.BarrierHyper(1.0, 0.2 * extent, spec.barrier_fraction)
        bym = [gmrf.BymHyper(1.0, 1.0) for _ in spec.expert_names]
        r = (spec.priors.overdispersion.shape / spec.priors.overdispersion.rate
             if spec.survey_likelihood == "count" else None)
        tau = 1.0 if spec.survey_likelihood == "gaussian" else None
        return cls(barrier, bym, r, tau)

    def names(self):
        out = []
        if self.barrier is not None:
            out += ["sigma_phi", "range_r"]
        for j in range(len(self.bym)):
            out += [f"tau_u[{j}]", f"tau_v[{j}]"]
        if self.overdispersion is not None:
            out.append("overdispersion")
        if self.noise_tau is not None:
            out.append("noise_tau")
        return out

    def values(self):
        out = []
        if self.barrier is not None:
            out += [self.barrier.sigma_phi, self.barrier.range_r]
        for b in self.bym:
            out += [b.tau_u, b.tau_v]
        if self.overdispersion is not None:
            out.append(self.overdispersion)
        if self.noise_tau is not None:
            out.append(self.noise_tau)
        return np.array(out, dtype=float)

    def with_values(self, values, barrier_fraction):
        """Same structure with new positive values, in names() order."""
        values = list(np.asarray(values, dtype=float))
        barrier = None
        if self.barrier is not None:
            barrier = gmrf.BarrierHyper(values.pop(0), values.pop(0), barrier_fraction)
        bym = [gmrf.BymHyper(values.pop(0), values.pop(0)) for _ in self.bym]
        r = values.pop(0) if self.overdispersion is not None else None
        tau = values.pop(0) if self.noise_tau is not None else None
        return Hyper(barrier, bym, r, tau)

    def to_data(self):
        return {name: float(v) for (name, v) in zip(self.names(), self.values())}

    @classmethod
    def from_data(cls, spec, data):
        template = cls.default(spec)
        missing = [n for n in template.names() if n not in data]
        if missing:
            raise InputError(f"Hyperparameters missing: {', '.join(missing)}")
        return template.with_values([data[n] for n in template.names()], spec.barrier_fraction)


def hyper_log_prior(spec, hyper):
    """Sum of hyperprior log densities on the natural scale."""
    priors = spec.priors
    total = 0.0
    if hyper.barrier is not None:
        total += hyperprior_logpdf("sigma_phi", hyper.barrier.sigma_phi, priors.pc.sigma)
        total += hyperprior_logpdf("range_r", hyper.barrier.range_r, priors.pc.range)
    for (j, b) in enumerate(hyper.bym):
        total += hyperprior_logpdf(f"tau_u[{j}]", b.tau_u, priors.bym)
        total += hyperprior_logpdf(f"tau_v[{j}]", b.tau_v, priors.bym)
    if hyper.overdispersion is not None:
        total += hyperprior_logpdf("overdispersion", hyper.overdispersion, priors.overdispersion)
    if hyper.noise_tau is not None:
        total += hyperprior_logpdf("noise_tau", hyper.noise_tau, priors.noise)
    return total


class LatentPrior():
    """Block-diagonal Gaussian prior of the latent vector at fixed hyperparameters."""

    def __init__(self, Q, logdet):
        self.Q = sparse.csc_matrix(Q)
        self.logdet = float(logdet)

    def logpdf(self, x):
        return -0.5 * x.size * _LOG_2PI + 0.5 * self.logdet - 0.5 * float(x @ (self.Q @ x))

def latent_prior(spec, hyper, jitter=gmrf.JITTER, jitter_max=gmrf.JITTER_MAX):
    layout = spec.layout()
    priors = spec.priors
    blocks = []
    logdet = 0.0

    fixed = np.full(1 + layout.n_covariates, priors.fixed_effect.precision)
    blocks.append(sparse.diags(fixed))
    logdet += float(np.sum(np.log(fixed)))

    if spec.spatial_field:
        Qb = gmrf.barrier_precision(spec.barrier_mesh, hyper.barrier, jitter, jitter_max)
        blocks.append(Qb)
        logdet += gmrf.factorize(Qb, jitter, jitter_max).logdet()

    if layout.n_experts:
        graph = spec.expert_graph()
        for j in range(layout.n_experts):
            pair = np.array([priors.alpha_bar.precision, priors.c_bar.precision])
            blocks.append(sparse.diags(pair))
            logdet += float(np.sum(np.log(pair)))
            Qj = gmrf.bym_precision(graph, hyper.bym[j])
            blocks.append(Qj)
            logdet += gmrf.factorize(Qj, jitter, jitter_max).logdet()

    return LatentPrior(sparse.block_diag(blocks, format="csc"), logdet)


class DesignBlock():
    """Group of responses sharing one observation family and projection.

    `design` maps the latent vector to the direct part of each row's linear
    predictor. Expert blocks also carry `link`, a link block whose rows give
    the shared survey term at the same locations; that term enters scaled by
    the expert's c_bar. Rows with zero weight or a missing response are left
    out of the likelihood.
    """

    def __init__(self, kind, design, name=None, response=None, exposure=None, weights=None,
                 family=None, param=None, link=None, expert=None, layout=None):
        if kind not in BLOCK_KINDS:
            raise InputError(f"Unknown design block kind '{kind}'")
        design = sparse.csr_matrix(design)
        n = design.shape[0]
        if layout is not None and design.shape[1] != layout.dim:
            raise InputError(f"Design block {name or kind} has {design.shape[1]} columns, "
                             f"layout needs {layout.dim}")
        if link is not None and link.design.shape != design.shape:
            raise InputError(f"Link rows of block {name or kind} do not match its design rows")
        self.kind = kind
        self.name = name or kind
        self.design = design
        self.family = family
        self.param = param
        self.link = link
        self.expert = expert
        self.layout = layout

        if response is None:
            response = np.full(n, np.nan)
        response = np.array(response, dtype=float).ravel()
        if response.size != n:
            raise InputError(f"Block {self.name} has {n} rows but {response.size} responses")
        if exposure is None:
            exposure = np.ones(n)
        exposure = np.array(exposure, dtype=float).ravel()
        if exposure.size != n:
            raise InputError(f"Block {self.name} has {n} rows but {exposure.size} exposures")
        if weights is None:
            weights = np.ones(n)
        weights = np.array(weights, dtype=float).ravel()
        if weights.size != n:
            raise InputError(f"Block {self.name} has {n} rows but {weights.size} weights")
        present = ~np.isnan(response)
        if np.any(present & ~(exposure > 0)):
            raise InputError(f"Block {self.name} has non-positive exposure on observed rows")
        self.response = response
        self.exposure = exposure
        self.weights = weights
        self.active = np.flatnonzero(present & (weights > 0))
        self._sub = None

    def __repr__(self):
        return f"DesignBlock({self.name}, rows={self.n_rows}, active={self.active.size})"

    @property
    def n_rows(self):
        return self.design.shape[0]

    def with_weights(self, weights):
        return DesignBlock(self.kind, self.design, self.name, self.response, self.exposure,
                           weights, self.family, self.param, self.link, self.expert, self.layout)

    def predictor(self, x, rows=None):
        """Linear predictor of every row (or of the selected rows)."""
        D = self.design if rows is None else self.design[rows]
        eta = D @ x
        if self.link is not None:
            L = self.link.design if rows is None else self.link.design[rows]
            eta = eta + x[self.layout.c_bar(self.expert)] * (L @ x)
        return eta

    def jacobian(self, x, rows=None):
        """d eta / d x as a sparse matrix."""
        D = self.design if rows is None else self.design[rows]
        if self.link is None:
            return D
        L = self.link.design if rows is None else self.link.design[rows]
        ic = self.layout.c_bar(self.expert)
        s = L @ x
        column = sparse.csr_matrix((s, (np.arange(s.size), np.full(s.size, ic))), shape=D.shape)
        return sparse.csr_matrix(D + x[ic] * L + column)

    def active_parts(self):
        if self._sub is None:
            a = self.active
            link = self.link.design[a] if self.link is not None else None
            self._sub = (self.design[a], link, self.response[a], self.exposure[a], self.weights[a])
        return self._sub


def _param_value(block, hyper):
    if block.param is None:
        return None
    value = getattr(hyper, block.param)
    if value is None:
        raise InputError(f"Block {block.name} needs hyperparameter {block.param}")
    return value

def _block_terms(block, x, hyper, need_hessian=True):
    """(loglik, gradient, hessian) contribution of one block."""
    D, L, y, v, w = block.active_parts()
    dim = x.size
    if y.size == 0:
        return (0.0, np.zeros(dim), sparse.csr_matrix((dim, dim)) if need_hessian else None)

    eta = D @ x
    if L is not None:
        ic = block.layout.c_bar(block.expert)
        s = L @ x
        eta = eta + x[ic] * s
    ll, d1, d2 = block.family.derivs(y, eta, v, _param_value(block, hyper))
    ll = np.asarray(ll, dtype=float)
    for arr in (ll, d1, d2):
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            row = int(block.active[bad[0]])
            raise NonFiniteError(f"Non-finite log-likelihood term in block {block.name} row {row}",
                                 block.name, row)

    if L is None:
        J = D
    else:
        column = sparse.csr_matrix((s, (np.arange(s.size), np.full(s.size, ic))), shape=D.shape)
        J = sparse.csr_matrix(D + x[ic] * L + column)
    grad = J.T @ (w * d1)
    H = None
    if need_hessian:
        H = J.T @ sparse.diags(w * d2) @ J
        if L is not None:
            vcross = L.T @ (w * d1)
            e = sparse.csr_matrix((vcross, (np.arange(dim), np.full(dim, ic))), shape=(dim, dim))
            H = H + e + e.T
    return (float(np.sum(w * ll)), grad, H)

def block_log_likelihood(block, state, hyper):
    return _block_terms(block, _vector(state), hyper, need_hessian=False)[0]

def _vector(state):
    return state.vector if isinstance(state, LatentState) else np.asarray(state, dtype=float)

def _check_blocks(blocks, dim):
    for b in blocks:
        if b.design.shape[1] != dim:
            raise InputError(f"Block {b.name} has {b.design.shape[1]} columns, latent dimension is {dim}")

def joint_log_density(state, hyper, blocks, spec, prior=None):
    """Log prior of the latent vector plus every block's log-likelihood."""
    x = _vector(state)
    _check_blocks(blocks, x.size)
    prior = prior or latent_prior(spec, hyper)
    total = prior.logpdf(x)
    for b in blocks:
        total += _block_terms(b, x, hyper, need_hessian=False)[0]
    if not np.isfinite(total):
        raise NonFiniteError("Joint log density is not finite", None, None)
    return float(total)

def joint_gradient_hessian(state, hyper, blocks, spec, prior=None):
    """Exact gradient and sparse Hessian of joint_log_density in the latent vector."""
    value, grad, H = joint_terms(_vector(state), hyper, blocks, spec, prior)
    return (grad, H)

def joint_terms(x, hyper, blocks, spec, prior=None):
    """(value, gradient, Hessian) in one pass."""
    x = np.asarray(x, dtype=float)
    _check_blocks(blocks, x.size)
    prior = prior or latent_prior(spec, hyper)
    Qx = prior.Q @ x
    value = -0.5 * x.size * _LOG_2PI + 0.5 * prior.logdet - 0.5 * float(x @ Qx)
    grad = -Qx
    H = -prior.Q
    for b in blocks:
        ll, g, h = _block_terms(b, x, hyper)
        value += ll
        grad = grad + g
        H = H + h
    if not np.isfinite(value):
        raise NonFiniteError("Joint log density is not finite", None, None)
    return (float(value), np.asarray(grad).ravel(), sparse.csc_matrix(H))


def linear_predictor_survey(state, covariates, proj):
    """alpha + X beta + A phi at the survey points."""
    X = covariate_matrix(covariates, proj.shape[0], state.beta.size, "Survey")
    eta = state.alpha + X @ state.beta
    if state.phi.size:
        if proj.shape[1] != state.phi.size:
            raise InputError("Survey projection does not match the barrier field")
        eta = eta + proj @ state.phi
    return eta

def linear_predictor_expert(state, j, covariates, proj_survey_field, proj_bym):
    """alpha_bar_j + c_bar_j (X beta + A phi) + A_e varphi_bar_j; alpha is left out."""
    X = covariate_matrix(covariates, proj_bym.shape[0], state.beta.size, "Expert")
    shared = X @ state.beta
    if state.phi.size:
        if proj_survey_field.shape != (proj_bym.shape[0], state.phi.size):
            raise InputError("Expert barrier projection does not match the barrier field")
        shared = shared + proj_survey_field @ state.phi
    if proj_bym.shape[1] != state.varphi(j).size:
        raise InputError("Expert projection does not match the expert mesh")
    return state.alpha_bar(j) + state.c_bar(j) * shared + proj_bym @ state.varphi(j)


def _zero_missing(X):
    X = np.array(X, dtype=float)
    missing = np.isnan(X).any(axis=1)
    X[np.isnan(X)] = 0.0
    return X, missing

def _design(layout, n, parts):
    """Assemble an n x dim design from (column slice or index, sparse/dense block) pairs."""
    cols = []
    for (where, block) in parts:
        if isinstance(where, slice):
            start = where.start
        else:
            start = where
        block = sparse.coo_matrix(block)
        cols.append(sparse.coo_matrix((block.data, (block.row, block.col + start)),
                                      shape=(n, layout.dim)))
    if not cols:
        return sparse.csr_matrix((n, layout.dim))
    return sparse.csr_matrix(sum(cols[1:], cols[0]))

def survey_block(spec, covariates, proj, response=None, exposure=None, weights=None,
                 kind="survey", name=None):
    """Rows alpha + X beta + A phi with the survey observation family."""
    layout = spec.layout()
    X, missing = _zero_missing(covariate_matrix(covariates, proj.shape[0], layout.n_covariates, "Survey"))
    n = X.shape[0]
    parts = [(layout.alpha, np.ones((n, 1))), (layout.beta, X)]
    if layout.n_barrier:
        parts.append((layout.phi, proj))
    if response is not None and kind == "survey":
        response = np.asarray(response, dtype=float)
        bad = missing & ~np.isnan(response)
        if np.any(bad):
            raise InputError(f"Survey rows {np.flatnonzero(bad)[:5].tolist()} have missing covariates")
    param = {"count": "overdispersion", "gaussian": "noise_tau"}.get(spec.survey_likelihood)
    return DesignBlock(kind, _design(layout, n, parts), name=name or kind, response=response,
                       exposure=exposure, weights=weights, family=spec.survey_family,
                       param=param, layout=layout)

def link_block(spec, covariates, proj_barrier, name="link"):
    """Shared term X beta + A phi at expert locations, alpha excluded."""
    layout = spec.layout()
    X, missing = _zero_missing(covariate_matrix(covariates, proj_barrier.shape[0], layout.n_covariates, "Link"))
    n = X.shape[0]
    parts = [(layout.beta, X)]
    if layout.n_barrier:
        parts.append((layout.phi, proj_barrier))
    block = DesignBlock("link", _design(layout, n, parts), name=name, layout=layout)
    block.missing = missing
    return block

def expert_block(spec, j, proj_bym, link, response=None, kind="expert", name=None):
    """Rows alpha_bar_j + c_bar_j * link + A_e varphi_bar_j for expert j."""
    layout = spec.layout()
    n = proj_bym.shape[0]
    parts = [(layout.alpha_bar(j), np.ones((n, 1))), (layout.varphi(j), proj_bym)]
    if response is not None:
        response = np.array(response, dtype=float)
        # rows whose shared term cannot be evaluated carry no information
        response[getattr(link, "missing", np.zeros(n, dtype=bool))] = np.nan
    return DesignBlock(kind, _design(layout, n, parts), name=name or f"{kind}[{j}]",
                       response=response, family=spec.expert_family, link=link,
                       expert=j, layout=layout)

def likelihood_blocks(blocks):
    return [b for b in blocks if b.kind in ("survey", "expert")]

def log_likelihood_summary(x, hyper, blocks):
    """Per-block log-likelihood at latent vector x."""
    out = {}
    for b in likelihood_blocks(blocks):
        out[b.name] = _block_terms(b, x, hyper, need_hessian=False)[0]
    logging.debug(f"block log-likelihoods: {out}")
    return out
