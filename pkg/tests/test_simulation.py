import numpy as np
import pytest
from scipy import stats

from expertsdm.exceptions import InputError
from expertsdm.geometry import points_in_polygons, projection_matrix
from expertsdm.likelihoods import CategoryCutoffs
from expertsdm.pipeline import ModelDocument
from expertsdm.raster import read_raster
from expertsdm.survey import read_survey
from expertsdm.simulation import (TruthScenario, ExpertProfile, COVARIATE_NAMES, simulate,
                                  simulate_covariates, simulate_scenario, sample_expert_categories,
                                  survey_points, model_documents)

SMALL_MESH = {"max_edge_inner": 200.0, "max_edge_outer": 600.0, "cutoff": 30.0,
              "offset_inner": 150.0, "offset_outer": 400.0, "expert_edge": 200.0}


def _small(**kw):
    settings = dict(ncols=12, nrows=10, cell_size=100.0, range_r=300.0, n_points=20, mesh=SMALL_MESH)
    settings.update(kw)
    return TruthScenario(**settings)


def test_covariates_are_standardized_and_seeded():
    geometry = _small().geometry
    first = simulate_covariates(geometry, 5)
    assert len(first) == len(COVARIATE_NAMES)
    for r in first:
        assert r.flat().mean() == pytest.approx(0.0, abs=1e-12)
        assert r.flat().std() == pytest.approx(1.0)
    again = simulate_covariates(geometry, 5)
    assert all(np.array_equal(a.values, b.values) for (a, b) in zip(first, again))
    other = simulate_covariates(geometry, 6)
    assert not np.array_equal(first[0].values, other[0].values)

def test_expert_categories_follow_beta_bins():
    rng = np.random.default_rng(0)
    z = sample_expert_categories(np.full(100000, 0.5), 2.0, CategoryCutoffs(), rng)
    freq = np.array([np.mean(z == k) for k in (1, 2, 3, 4)])
    assert freq == pytest.approx([0.1, 0.4, 0.4, 0.1], abs=0.01)

def test_survey_points_avoid_islands():
    truth = _small(n_points=200)
    points = survey_points(truth, np.random.default_rng(1))
    assert points.shape == (200, 2)
    assert not np.any(points_in_polygons(points, truth.islands))
    x0, y0, x1, y1 = truth.geometry.extent()
    assert np.all((points[:, 0] >= x0) & (points[:, 0] <= x1))

def test_count_survey_poisson_limit():
    truth = _small(survey_likelihood="count", overdispersion=None)
    _, _, _, survey, _ = simulate(truth)
    assert survey.likelihood == "count"
    assert np.all(survey.response >= 0)
    assert np.array_equal(survey.response, np.round(survey.response))
    assert np.all(survey.volume == truth.volume)

def test_expert_regions():
    truth = _small()
    _, _, _, _, experts = simulate(truth)
    assert [e.name for e in truth.experts] == ["skilled", "unskilled", "biased"]
    x0, _, x1, _ = truth.geometry.extent()
    cells = truth.geometry.cell_centers()
    for raster in experts:
        values = raster.flat()
        observed = values[~np.isnan(values)]
        assert observed.size > 0
        assert set(np.unique(observed)) <= {1.0, 2.0, 3.0, 4.0}
        assert np.all(np.isnan(values[points_in_polygons(cells, truth.islands)]))
    unskilled = experts[1].flat()
    assert np.all(np.isnan(unskilled[cells[:, 0] > x0 + 2 * (x1 - x0) / 3]))

def test_expert_skill_sign():
    extent = _small().geometry.extent()
    experts = [ExpertProfile("follows", 0.0, 3.0, 1e4, 1e4, extent),
               ExpertProfile("opposes", 0.0, -3.0, 1e4, 1e4, extent)]
    truth = _small(beta=(2.0, -1.5, 1.0), experts=experts)
    covariates, mesh, phi, _, rasters = simulate(truth)
    cells = truth.geometry.cell_centers()
    X = np.column_stack([r.sample(cells) for r in covariates])
    shared = X @ truth.beta + projection_matrix(mesh, cells) @ phi
    for (raster, sign) in zip(rasters, (1, -1)):
        z = raster.flat()
        ok = ~np.isnan(z)
        rho = stats.spearmanr(z[ok], shared[ok]).correlation
        assert sign * rho > 0.2

def test_scenario_is_reproducible(tmp_path):
    truth = _small(seed=42)
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    first = simulate_scenario(truth, str(tmp_path / "a"))
    second = simulate_scenario(truth, str(tmp_path / "b"))
    assert sorted(first) == sorted(second)
    for key in first:
        with open(first[key], "rb") as fa, open(second[key], "rb") as fb:
            assert fa.read() == fb.read(), key

def test_scenario_seed_changes_data(tmp_path):
    a = simulate(_small(seed=1))[3]
    b = simulate(_small(seed=2))[3]
    assert not np.array_equal(a.points, b.points)

def test_scenario_files(tmp_path):
    truth = _small(seed=3)
    paths = simulate_scenario(truth, str(tmp_path))
    expected = set(COVARIATE_NAMES) | {"survey", "barriers", "truth", "model", "model_survey_only",
                                       "expert_skilled", "expert_unskilled", "expert_biased"}
    assert set(paths) == expected
    survey = read_survey(paths["survey"], "presence")
    assert len(survey) == 20
    assert read_raster(paths["expert_skilled"]).is_categorical()
    doc = ModelDocument(paths["model"])
    assert doc.survey_path == paths["survey"]
    assert [n for (n, _) in doc.experts] == ["skilled", "unskilled", "biased"]
    assert doc.mesh == SMALL_MESH
    assert ModelDocument(paths["model_survey_only"]).experts == []

def test_model_documents_without_experts():
    documents = model_documents(_small(experts=[]))
    assert documents["model"]["experts"] == []
    assert "experts" not in documents["model_survey_only"]

def test_scenario_settings_round_trip():
    truth = _small(seed=9)
    back = TruthScenario.from_data(truth.to_data())
    assert back.to_data() == truth.to_data()
    assert truth.with_seed(10).seed == 10
    assert truth.with_seed(10).to_data()["mesh"] == SMALL_MESH

def test_scenario_rejects():
    with pytest.raises(InputError, match="Unknown scenario settings"):
        TruthScenario.from_data({"seeds": 3})
    with pytest.raises(InputError):
        TruthScenario(beta=(1.0, 2.0))
    with pytest.raises(InputError):
        TruthScenario(survey_likelihood="gaussian")
    with pytest.raises(InputError):
        TruthScenario(n_points=0)
    with pytest.raises(InputError):
        ExpertProfile("flat", 0.0, 1.0, 1.0, 1.0, (0, 0, 0, 10))
    with pytest.raises(InputError, match="missing"):
        ExpertProfile.from_data({"name": "x"})
