import numpy as np
import pytest
from scipy import sparse, stats

from expertsdm import gmrf, likelihoods
from expertsdm.exceptions import InputError, NonFiniteError
from expertsdm.raster import Raster
from expertsdm.geometry import build_uniform_mesh, projection_matrix
from expertsdm.model import (ModelSpec, ModelPriors, LatentLayout, LatentState, Hyper, Standardization,
                             latent_prior, survey_block, link_block, expert_block, joint_log_density,
                             joint_gradient_hessian, block_log_likelihood, linear_predictor_survey,
                             linear_predictor_expert, likelihood_blocks, log_likelihood_summary,
                             hyper_log_prior)


@pytest.fixture(scope="module")
def mesh():
    return build_uniform_mesh(Raster(4, 4, 1.0, (0, 0)), 1.0)

@pytest.fixture(scope="module")
def spec(mesh):
    return ModelSpec("count", "four", "exact", covariate_names=["depth"], expert_names=["a", "b"],
                     barrier_mesh=mesh, expert_mesh=mesh)

@pytest.fixture(scope="module")
def problem(spec, mesh):
    rng = np.random.default_rng(11)
    n = mesh.n_vertices()
    points = rng.uniform(0.2, 3.8, size=(15, 2))
    survey = survey_block(spec, rng.normal(size=15), projection_matrix(mesh, points),
                          response=rng.poisson(2.0, 15), exposure=rng.uniform(0.5, 2.0, 15))
    A_eb = projection_matrix(mesh, mesh.vertices)
    link = link_block(spec, rng.normal(size=n), A_eb)
    experts = []
    for j in range(2):
        z = rng.integers(1, 5, n).astype(float)
        z[:3] = np.nan
        experts.append(expert_block(spec, j, sparse.identity(n, format="csr"), link, response=z))
    hyper = Hyper(gmrf.BarrierHyper(1.0, 1.5, 0.2), [gmrf.BymHyper(2.0, 3.0), gmrf.BymHyper(1.0, 1.0)],
                  overdispersion=2.5)
    return (hyper, [survey, link] + experts)


def test_layout():
    layout = LatentLayout(2, 5, 3, 2)
    assert layout.dim == 1 + 2 + 5 + 2 * (2 + 3)
    assert layout.alpha_bar(0) == 8
    assert layout.c_bar(1) == 14
    assert layout.varphi(1) == slice(15, 18)
    assert len(layout.names()) == layout.dim
    with pytest.raises(InputError):
        layout.alpha_bar(2)

def test_latent_state_views():
    layout = LatentLayout(1, 2, 2, 1)
    state = LatentState(layout, np.arange(layout.dim))
    assert state.alpha == 0
    assert state.beta.tolist() == [1]
    assert state.phi.tolist() == [2, 3]
    assert (state.alpha_bar(0), state.c_bar(0)) == (4, 5)
    assert state.varphi(0).tolist() == [6, 7]
    with pytest.raises(InputError):
        LatentState(layout, np.zeros(3))

def test_survey_predictor_intercept_only():
    spec = ModelSpec("presence", spatial_field=False, covariate_names=["x"])
    state = LatentState(spec.layout())
    state.vector[0] = 0.7
    proj = sparse.csr_matrix((3, 0))
    assert linear_predictor_survey(state, [1.0, 2.0, 3.0], proj) == pytest.approx([0.7] * 3)

def test_survey_predictor_covariate():
    spec = ModelSpec("presence", spatial_field=False, covariate_names=["x"])
    state = LatentState(spec.layout(), [0.0, 1.5])
    assert linear_predictor_survey(state, [2.0], sparse.csr_matrix((1, 0))) == pytest.approx([3.0])

def test_expert_predictor(spec, mesh):
    rng = np.random.default_rng(5)
    n = mesh.n_vertices()
    state = LatentState(spec.layout(), rng.normal(size=spec.layout().dim))
    X = rng.normal(size=n)
    A = projection_matrix(mesh, mesh.vertices)
    I = sparse.identity(n, format="csr")
    eta = linear_predictor_expert(state, 1, X, A, I)
    shared = X * state.beta[0] + A @ state.phi
    assert eta == pytest.approx(state.alpha_bar(1) + state.c_bar(1) * shared + state.varphi(1))

    state.vector[spec.layout().c_bar(0)] = 0.0
    state.vector[spec.layout().varphi(0)] = 0.0
    assert linear_predictor_expert(state, 0, X, A, I) == pytest.approx(np.full(n, state.alpha_bar(0)))

def test_block_predictor_matches_direct(spec, problem, mesh):
    _, blocks = problem
    rng = np.random.default_rng(6)
    state = LatentState(spec.layout(), rng.normal(size=spec.layout().dim))
    expert = blocks[3]
    link = blocks[1]
    direct = (state.alpha_bar(1) + state.c_bar(1) * (link.design @ state.vector) + state.varphi(1))
    assert expert.predictor(state.vector) == pytest.approx(direct)

def test_joint_density_without_data_is_prior():
    mesh = build_uniform_mesh(Raster(3, 3, 1.0, (0, 0)), 1.0)
    spec = ModelSpec("presence", spatial_field=False, covariate_names=["x", "y"],
                     expert_names=["only"], expert_mesh=mesh)
    hyper = Hyper(None, [gmrf.BymHyper(2.0, 0.5)])
    prior = latent_prior(spec, hyper)
    x = np.random.default_rng(2).normal(size=spec.layout().dim)
    Q = prior.Q.toarray()
    expected = stats.multivariate_normal(np.zeros(x.size), np.linalg.inv(Q)).logpdf(x)
    assert joint_log_density(x, hyper, [], spec) == pytest.approx(expected, rel=1e-6)

def test_joint_density_is_block_additive(spec, problem):
    hyper, blocks = problem
    prior = latent_prior(spec, hyper)
    x = np.random.default_rng(3).normal(0, 0.3, spec.layout().dim)
    total = joint_log_density(x, hyper, blocks, spec, prior)
    parts = prior.logpdf(x) + sum(block_log_likelihood(b, x, hyper) for b in blocks)
    assert total == pytest.approx(parts)
    summary = log_likelihood_summary(x, hyper, blocks)
    assert sorted(summary) == ["expert[0]", "expert[1]", "survey"]
    assert total == pytest.approx(prior.logpdf(x) + sum(summary.values()))

@pytest.fixture(scope="module")
def four_approx():
    return likelihoods.fit_binomial_approx()

_CONFIGS = [(survey, categories, form) for survey in ("count", "presence")
            for categories in ("binary", "four") for form in ("exact", "approx")]

def _configured_problem(mesh, approx, survey, categories, form, seed):
    spec = ModelSpec(survey, categories, form, covariate_names=["depth"], expert_names=["a", "b"],
                     barrier_mesh=mesh, expert_mesh=mesh, binomial_approx=approx)
    rng = np.random.default_rng(seed)
    n = mesh.n_vertices()
    points = rng.uniform(0.2, 3.8, size=(15, 2))
    response = rng.poisson(2.0, 15) if survey == "count" else rng.integers(0, 2, 15)
    blocks = [survey_block(spec, rng.normal(size=15), projection_matrix(mesh, points),
                           response=response, exposure=rng.uniform(0.5, 2.0, 15))]
    link = link_block(spec, rng.normal(size=n), projection_matrix(mesh, mesh.vertices))
    blocks.append(link)
    for j in range(2):
        z = rng.integers(1, 5, n).astype(float)
        z[:3] = np.nan
        blocks.append(expert_block(spec, j, sparse.identity(n, format="csr"), link, response=z))
    hyper = Hyper(gmrf.BarrierHyper(1.0, 1.5, 0.2), [gmrf.BymHyper(2.0, 3.0), gmrf.BymHyper(1.0, 1.0)],
                  overdispersion=2.5 if survey == "count" else None)
    x = rng.normal(0, 0.3, spec.layout().dim)
    return (spec, hyper, blocks, x)

@pytest.mark.parametrize("seed", [4, 19])
@pytest.mark.parametrize("survey,categories,form", _CONFIGS)
def test_gradient_matches_finite_differences(mesh, four_approx, survey, categories, form, seed):
    spec, hyper, blocks, x = _configured_problem(mesh, four_approx, survey, categories, form, seed)
    prior = latent_prior(spec, hyper)
    grad, _ = joint_gradient_hessian(x, hyper, blocks, spec, prior)
    h = 1e-5
    fd = np.empty(x.size)
    for k in range(x.size):
        e = np.zeros(x.size)
        e[k] = h
        fd[k] = (joint_log_density(x + e, hyper, blocks, spec, prior) -
                 joint_log_density(x - e, hyper, blocks, spec, prior)) / (2 * h)
    assert grad == pytest.approx(fd, rel=1e-5, abs=1e-6)

@pytest.mark.parametrize("seed", [7, 23])
@pytest.mark.parametrize("survey,categories,form", _CONFIGS)
def test_hessian_matches_finite_differences(mesh, four_approx, survey, categories, form, seed):
    spec, hyper, blocks, x = _configured_problem(mesh, four_approx, survey, categories, form, seed)
    prior = latent_prior(spec, hyper)
    _, H = joint_gradient_hessian(x, hyper, blocks, spec, prior)
    assert abs(H - H.T).max() < 1e-10
    rng = np.random.default_rng(seed)
    h = 1e-5
    for _ in range(3):
        v = rng.normal(size=x.size)
        gp, _ = joint_gradient_hessian(x + h * v, hyper, blocks, spec, prior)
        gm, _ = joint_gradient_hessian(x - h * v, hyper, blocks, spec, prior)
        assert H @ v == pytest.approx((gp - gm) / (2 * h), rel=1e-5, abs=1e-5)

def test_zero_weights_drop_rows(spec, problem):
    hyper, blocks = problem
    x = np.random.default_rng(8).normal(0, 0.3, spec.layout().dim)
    survey = blocks[0]
    w = np.ones(survey.n_rows)
    w[:5] = 0
    dropped = block_log_likelihood(survey.with_weights(w), x, hyper)
    ll = survey.family.derivs(survey.response[5:], survey.predictor(x)[5:],
                              survey.exposure[5:], hyper.overdispersion)[0]
    assert dropped == pytest.approx(np.sum(ll))

def test_missing_expert_rows_are_inactive(spec, problem):
    _, blocks = problem
    assert blocks[2].active.size == blocks[2].n_rows - 3
    assert [b.name for b in likelihood_blocks(blocks)] == ["survey", "expert[0]", "expert[1]"]

def test_link_missing_covariates_silence_expert_rows(spec, mesh):
    n = mesh.n_vertices()
    X = np.ones(n)
    X[4] = np.nan
    link = link_block(spec, X, projection_matrix(mesh, mesh.vertices))
    block = expert_block(spec, 0, sparse.identity(n, format="csr"), link, response=np.full(n, 2.0))
    assert 4 not in block.active
    assert block.active.size == n - 1

def test_survey_rejects_missing_covariates(spec, mesh):
    proj = projection_matrix(mesh, [(1.0, 1.0), (2.0, 2.0)])
    with pytest.raises(InputError):
        survey_block(spec, [np.nan, 1.0], proj, response=[1, 2])
    block = survey_block(spec, [np.nan, 1.0], proj, response=[np.nan, 2])
    assert block.active.tolist() == [1]

def test_non_finite_term_names_block_and_row():
    spec = ModelSpec("gaussian", spatial_field=False)
    block = survey_block(spec, np.zeros((3, 0)), sparse.csr_matrix((3, 0)), response=[0.0, np.inf, 1.0])
    hyper = Hyper.default(spec)
    with pytest.raises(NonFiniteError) as info:
        joint_log_density(np.zeros(1), hyper, [block], spec)
    assert info.value.block == "survey"
    assert info.value.row == 1

def test_block_rejects_bad_shapes(spec, mesh):
    proj = projection_matrix(mesh, [(1.0, 1.0)])
    with pytest.raises(InputError):
        survey_block(spec, [1.0], proj, response=[1, 2])
    with pytest.raises(InputError):
        survey_block(spec, [[1.0, 2.0]], proj)
    with pytest.raises(InputError):
        survey_block(spec, [1.0], proj, response=[1], exposure=[0.0])
    with pytest.raises(InputError):
        joint_log_density(np.zeros(3), Hyper.default(spec), [survey_block(spec, [1.0], proj)], spec)

def test_hyper_names_and_values(spec):
    hyper = Hyper.default(spec)
    assert hyper.names() == ["sigma_phi", "range_r", "tau_u[0]", "tau_v[0]", "tau_u[1]", "tau_v[1]",
                             "overdispersion"]
    assert hyper.overdispersion == pytest.approx(10.0)
    moved = hyper.with_values(np.arange(1, 8), spec.barrier_fraction)
    assert moved.values().tolist() == list(range(1, 8))
    assert Hyper.from_data(spec, moved.to_data()).values().tolist() == list(range(1, 8))
    with pytest.raises(InputError):
        Hyper.from_data(spec, {"sigma_phi": 1.0})
    with pytest.raises(InputError):
        Hyper(overdispersion=0.0)

def test_hyper_log_prior_is_finite(spec):
    assert np.isfinite(hyper_log_prior(spec, Hyper.default(spec)))

def test_standardization():
    values = np.array([[1.0, 10.0], [3.0, 30.0], [np.nan, 20.0]])
    std = Standardization.fit(values)
    assert std.means.tolist() == [2.0, 20.0]
    out = std.apply(values)
    assert out[0].tolist() == pytest.approx([-1.0, -np.sqrt(1.5)])
    assert np.isnan(out[2, 0])
    assert Standardization.from_data(std.to_data()).sds.tolist() == std.sds.tolist()
    with pytest.raises(InputError):
        Standardization.fit([[1.0], [1.0]])

def test_model_spec_rejects():
    with pytest.raises(InputError):
        ModelSpec("zip", spatial_field=False)
    with pytest.raises(InputError):
        ModelSpec("presence")
    with pytest.raises(InputError):
        ModelSpec("presence", spatial_field=False, expert_names=["a"])
    with pytest.raises(InputError):
        ModelSpec("presence", spatial_field=False, barrier_fraction=1.5)
    with pytest.raises(InputError):
        ModelPriors.from_data({"pc_sgima": [1, 0.01]})

def test_model_spec_labels(spec):
    assert spec.expert_label() == "four/exact"
    assert ModelSpec("count", spatial_field=False).expert_label() == "--"
    assert spec.binomial_approx() is None
