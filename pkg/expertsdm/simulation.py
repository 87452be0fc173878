"""Synthetic scenarios: covariates, latent truth, surveys and expert maps.

All randomness flows from one seed through numpy SeedSequence children, so
a scenario is reproduced bit for bit from its seed.
"""

import os
import logging
import numpy as np
from scipy import ndimage
from scipy.special import expit

from expertsdm import gmrf
from expertsdm.exceptions import InputError
from expertsdm.geometry import (build_mesh, build_uniform_mesh, points_in_polygons,
                                projection_matrix, adjacency, write_polygons)
from expertsdm.likelihoods import CategoryCutoffs, DEFAULT_S_BAR, PROB_FLOOR
from expertsdm.raster import Raster, write_raster
from expertsdm.survey import SurveyTable, write_survey
from expertsdm.util import write_json

COVARIATE_NAMES = ("depth", "deep_distance", "salinity")
# smoothing widths in cells, one per covariate
COVARIATE_SMOOTHING = (1.0, 1.5, 2.0)


class ExpertProfile():

    def __init__(self, name, alpha_bar, c_bar, tau_u, tau_v, region):
        self.name = str(name)
        self.alpha_bar = float(alpha_bar)
        self.c_bar = float(c_bar)
        self.bym = gmrf.BymHyper(tau_u, tau_v)
        region = tuple(float(v) for v in region)
        if len(region) != 4 or not (region[0] < region[2] and region[1] < region[3]):
            raise InputError(f"Assessment region of expert {name} must be (x0, y0, x1, y1), got {region}")
        self.region = region

    def to_data(self):
        return {"name": self.name, "alpha_bar": self.alpha_bar, "c_bar": self.c_bar,
                "tau_u": self.bym.tau_u, "tau_v": self.bym.tau_v, "region": list(self.region)}

    @classmethod
    def from_data(cls, data):
        try:
            return cls(data["name"], data["alpha_bar"], data["c_bar"], data["tau_u"],
                       data["tau_v"], data["region"])
        except KeyError as ex:
            raise InputError(f"Expert profile is missing {ex}") from ex


class TruthScenario():
    """Everything needed to generate one synthetic dataset."""

    def __init__(self, seed=0, ncols=40, nrows=30, cell_size=150.0, origin=(0.0, 0.0),
                 alpha=-0.5, beta=(0.8, -0.5, 0.3), sigma_phi=1.0, range_r=2000.0,
                 barrier_fraction=0.2, experts=None, n_points=80, volume=28.35,
                 survey_likelihood="presence", overdispersion=2.0, s_bar=DEFAULT_S_BAR,
                 cutoffs=(0.1, 0.5, 0.9), islands=None, mesh=None):
        self.seed = int(seed)
        self.geometry = Raster(ncols, nrows, cell_size, origin)
        self.alpha = float(alpha)
        self.beta = np.array(beta, dtype=float)
        if self.beta.size != len(COVARIATE_NAMES):
            raise InputError(f"Scenario needs {len(COVARIATE_NAMES)} covariate weights, got {self.beta.size}")
        self.barrier = gmrf.BarrierHyper(sigma_phi, range_r, barrier_fraction)
        self.experts = [e if isinstance(e, ExpertProfile) else ExpertProfile.from_data(e)
                        for e in (experts if experts is not None else default_experts(self.geometry))]
        self.n_points = int(n_points)
        if self.n_points < 1:
            raise InputError("Scenario needs at least one survey point")
        if not volume > 0:
            raise InputError(f"Survey volume must be positive, got {volume}")
        self.volume = float(volume)
        if survey_likelihood not in ("count", "presence"):
            raise InputError(f"Scenario survey likelihood must be count or presence, got {survey_likelihood}")
        self.survey_likelihood = survey_likelihood
        # None stands for the Poisson limit
        if overdispersion is not None and not overdispersion > 0:
            raise InputError(f"Overdispersion must be positive, got {overdispersion}")
        self.overdispersion = overdispersion
        self.s_bar = float(s_bar)
        self.cutoffs = CategoryCutoffs(cutoffs)
        self.islands = [np.asarray(p, dtype=float) for p in
                        (islands if islands is not None else default_islands(self.geometry))]
        self.mesh = dict(default_mesh_settings())
        self.mesh.update(mesh or {})

    def __repr__(self):
        return (f"TruthScenario(seed={self.seed}, {self.geometry}, experts={len(self.experts)}, "
                f"points={self.n_points}, survey={self.survey_likelihood})")

    def with_seed(self, seed):
        data = self.to_data()
        data["seed"] = seed
        return TruthScenario.from_data(data)

    def to_data(self):
        g = self.geometry
        return {"seed": self.seed, "ncols": g.ncols, "nrows": g.nrows,
                "cell_size": g.cell_size, "origin": list(g.origin),
                "alpha": self.alpha, "beta": self.beta.tolist(),
                "sigma_phi": self.barrier.sigma_phi, "range_r": self.barrier.range_r,
                "barrier_fraction": self.barrier.barrier_fraction,
                "experts": [e.to_data() for e in self.experts],
                "n_points": self.n_points, "volume": self.volume,
                "survey_likelihood": self.survey_likelihood,
                "overdispersion": self.overdispersion, "s_bar": self.s_bar,
                "cutoffs": list(self.cutoffs.values),
                "islands": [p.tolist() for p in self.islands],
                "mesh": dict(self.mesh)}

    @classmethod
    def from_data(cls, data):
        data = dict(data or {})
        known = set(cls().to_data())
        unknown = sorted(set(data) - known)
        if unknown:
            raise InputError(f"Unknown scenario settings: {', '.join(unknown)}")
        return cls(**data)


def default_experts(geometry):
    x0, y0, x1, y1 = geometry.extent()
    w = x1 - x0
    return [ExpertProfile("skilled", 0.0, 0.8, 25.0, 25.0, (x0, y0, x1, y1)),
            ExpertProfile("unskilled", 0.0, 0.0, 25.0, 25.0, (x0, y0, x0 + 2 * w / 3, y1)),
            ExpertProfile("biased", 0.3, 0.8, 1.0, 25.0, (x0 + w / 3, y0, x1, y1))]

def default_islands(geometry):
    x0, y0, x1, y1 = geometry.extent()
    w = x1 - x0
    h = y1 - y0
    cx, cy = x0 + 0.5 * w, y0 + 0.5 * h
    return [np.array([[cx - 0.08 * w, cy - 0.15 * h], [cx + 0.08 * w, cy - 0.12 * h],
                      [cx + 0.1 * w, cy + 0.15 * h], [cx - 0.06 * w, cy + 0.18 * h]])]

def default_mesh_settings():
    return {"max_edge_inner": 500.0, "max_edge_outer": 2000.0, "cutoff": 100.0,
            "offset_inner": 500.0, "offset_outer": 1500.0, "expert_edge": 500.0}

def _seeds(seed, n):
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return seed.spawn(n)

def simulate_covariates(geometry, seed):
    """Smooth standardized covariate rasters, one per smoothing width."""
    rasters = []
    for (sigma, child) in zip(COVARIATE_SMOOTHING, _seeds(seed, len(COVARIATE_SMOOTHING))):
        rng = np.random.default_rng(child)
        noise = rng.standard_normal((geometry.nrows, geometry.ncols))
        smooth = ndimage.gaussian_filter(noise, sigma=sigma, mode="reflect")
        smooth = (smooth - smooth.mean()) / smooth.std()
        rasters.append(geometry.with_values(smooth))
    return rasters

def _covariate_values(covariates, points):
    return np.column_stack([r.sample(points) for r in covariates])

def truth_mesh(truth):
    m = truth.mesh
    return build_mesh(truth.geometry, truth.islands, m["max_edge_inner"], m["max_edge_outer"],
                      m["cutoff"], m["offset_inner"], m["offset_outer"])

def simulate_field(truth, mesh, seed):
    """One draw of the barrier field at the mesh vertices."""
    Q = gmrf.barrier_precision(mesh, truth.barrier)
    return gmrf.gmrf_sample(Q, 1, seed)[0]

def survey_points(truth, rng):
    """Uniform points over the water part of the raster extent."""
    x0, y0, x1, y1 = truth.geometry.extent()
    out = np.zeros((0, 2))
    while out.shape[0] < truth.n_points:
        need = truth.n_points - out.shape[0]
        cand = np.column_stack([rng.uniform(x0, x1, 2 * need + 8), rng.uniform(y0, y1, 2 * need + 8)])
        if truth.islands:
            cand = cand[~points_in_polygons(cand, truth.islands)]
        out = np.vstack([out, cand[:need]])
    return out

def simulate_survey(truth, mesh, covariates, phi, seed):
    """Draw survey responses at random water points from the true linear predictor."""
    rng = np.random.default_rng(seed)
    points = survey_points(truth, rng)
    X = _covariate_values(covariates, points)
    A = projection_matrix(mesh, points)
    eta = truth.alpha + X @ truth.beta + A @ phi
    volume = np.full(points.shape[0], truth.volume)
    if truth.survey_likelihood == "count":
        m = volume * np.exp(eta)
        if truth.overdispersion is None:
            y = rng.poisson(m)
        else:
            r = truth.overdispersion
            y = rng.negative_binomial(r, r / (r + m))
    else:
        y = (rng.uniform(size=eta.size) < expit(eta)).astype(float)
    logging.debug(f"simulated survey: {points.shape[0]} points, mean response {np.mean(y):.4g}")
    return SurveyTable(points, volume, y, truth.survey_likelihood)

def sample_expert_categories(mu_bar, s_bar, cutoffs, rng):
    """Draw subjective probabilities from Beta(mu*s, (1-mu)*s) and bin them into 1..4."""
    mu = np.clip(np.asarray(mu_bar, dtype=float), PROB_FLOOR, 1.0 - PROB_FLOOR)
    pi_bar = rng.beta(mu * s_bar, (1.0 - mu) * s_bar)
    return 1.0 + np.searchsorted(np.asarray(cutoffs.values), pi_bar, side="right")

def simulate_experts(truth, expert_mesh, mesh, covariates, phi, seed):
    """Categorical assessment rasters, one per expert profile.

    Cells outside the expert's region, on land or off either mesh are missing.
    """
    geometry = truth.geometry
    cells = geometry.cell_centers()
    X = _covariate_values(covariates, cells)
    A_b = projection_matrix(mesh, cells)
    A_e = projection_matrix(expert_mesh, cells)
    shared = X @ truth.beta + A_b @ phi
    covered = (A_b.getnnz(axis=1) > 0) & (A_e.getnnz(axis=1) > 0)
    if truth.islands:
        covered &= ~points_in_polygons(cells, truth.islands)
    graph = adjacency(expert_mesh)

    rasters = []
    for (profile, child) in zip(truth.experts, _seeds(seed, len(truth.experts))):
        field_seed, draw_seed = child.spawn(2)
        Q = gmrf.bym_precision(graph, profile.bym)
        bias = gmrf.gmrf_sample(Q, 1, field_seed)[0]
        mu = expit(profile.alpha_bar + profile.c_bar * shared + A_e @ bias)
        z = sample_expert_categories(mu, truth.s_bar, truth.cutoffs, np.random.default_rng(draw_seed))
        rx0, ry0, rx1, ry1 = profile.region
        inside = ((cells[:, 0] >= rx0) & (cells[:, 0] <= rx1) &
                  (cells[:, 1] >= ry0) & (cells[:, 1] <= ry1) & covered)
        z[~inside] = np.nan
        rasters.append(geometry.with_values(z.reshape(geometry.nrows, geometry.ncols)))
        logging.debug(f"simulated expert {profile.name}: {int(inside.sum())} assessed cells")
    return rasters

def simulate(truth):
    """Generate a scenario in memory: (covariates, mesh, phi, survey, experts)."""
    cov_seed, field_seed, survey_seed, expert_seed = _seeds(truth.seed, 4)
    covariates = simulate_covariates(truth.geometry, cov_seed)
    mesh = truth_mesh(truth)
    phi = simulate_field(truth, mesh, field_seed)
    survey = simulate_survey(truth, mesh, covariates, phi, survey_seed)
    expert_mesh = build_uniform_mesh(truth.geometry, truth.mesh["expert_edge"])
    experts = simulate_experts(truth, expert_mesh, mesh, covariates, phi, expert_seed)
    return (covariates, mesh, phi, survey, experts)

def model_documents(truth):
    """Model documents fitting the written scenario, with and without the experts.

    Paths are relative to the scenario directory.
    """
    base = {"survey": {"path": "survey.csv", "likelihood": truth.survey_likelihood},
            "covariates": {name: f"{name}.asc" for name in COVARIATE_NAMES},
            "barriers": "barriers.txt",
            "barrier_fraction": truth.barrier.barrier_fraction,
            "s_bar": truth.s_bar,
            "cutoffs": list(truth.cutoffs.values),
            "mesh": dict(truth.mesh)}
    with_experts = dict(base)
    with_experts["experts"] = [{"name": e.name, "path": f"expert_{e.name}.asc"} for e in truth.experts]
    with_experts["expert_likelihood"] = {"categories": "four", "form": "exact"}
    return {"model": with_experts, "model_survey_only": base}

def simulate_scenario(truth, out_dir):
    """Write a full synthetic dataset to out_dir and return the written paths."""
    covariates, mesh, phi, survey, experts = simulate(truth)
    paths = {}
    for (name, raster) in zip(COVARIATE_NAMES, covariates):
        paths[name] = os.path.join(out_dir, f"{name}.asc")
        write_raster(paths[name], raster)
    paths["survey"] = os.path.join(out_dir, "survey.csv")
    write_survey(paths["survey"], survey)
    for (profile, raster) in zip(truth.experts, experts):
        key = f"expert_{profile.name}"
        paths[key] = os.path.join(out_dir, f"{key}.asc")
        write_raster(paths[key], raster)
    paths["barriers"] = os.path.join(out_dir, "barriers.txt")
    write_polygons(paths["barriers"], truth.islands)
    paths["truth"] = os.path.join(out_dir, "truth.json")
    record = truth.to_data()
    record["covariate_names"] = list(COVARIATE_NAMES)
    record["phi_summary"] = {"mean": float(np.mean(phi)), "sd": float(np.std(phi))}
    write_json(paths["truth"], record)
    for (name, document) in model_documents(truth).items():
        paths[name] = os.path.join(out_dir, f"{name}.json")
        write_json(paths[name], document)
    logging.info(f"Scenario seed {truth.seed} written to {out_dir}")
    return paths
