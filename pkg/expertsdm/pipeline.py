"""Engine behind the command-line surface.

Reads model documents, builds (or reuses cached) meshes, assembles the
design blocks and runs fitting, prediction, evaluation and comparison,
writing every result into an output directory.
"""

import os
import time
import logging
import numpy as np
from scipy import sparse
from humanfriendly import format_timespan

from expertsdm import inference, gmrf
from expertsdm.evaluation import ScoreReport, comparison_table
from expertsdm.exceptions import InputError, NumericalError
from expertsdm.geometry import (build_mesh, build_uniform_mesh, projection_matrix,
                                reverse_projection, project_to_mesh, read_mesh, write_mesh,
                                read_polygons)
from expertsdm.likelihoods import BinomialApprox, CategoryCutoffs, fit_binomial_approx
from expertsdm.model import (ModelSpec, ModelPriors, Standardization, Hyper, survey_block,
                             link_block, expert_block, log_likelihood_summary)
from expertsdm.raster import read_raster, write_raster, aggregate_raster
from expertsdm.simulation import TruthScenario, simulate_scenario
from expertsdm.survey import read_survey
from expertsdm.util import (mkdirs, read_json, write_json, write_text, data_digest, file_digest)

SURVEY_LABELS = {"presence": "p/a", "count": "abu", "gaussian": "gauss"}
EXPERT_LABELS = {"binary": "binary", "four": "4-cat"}

_DOCUMENT_KEYS = ("survey", "covariates", "barriers", "experts", "expert_likelihood", "s_bar",
                  "cutoffs", "spatial_field", "mesh", "priors", "barrier_fraction",
                  "prediction_raster", "initial_hyper", "aggregate")
_MESH_KEYS = ("max_edge_inner", "max_edge_outer", "cutoff", "offset_inner", "offset_outer",
              "expert_edge")


class ModelDocument():
    """A parsed model JSON document; relative paths resolve against its directory."""

    def __init__(self, path):
        data = read_json(path)
        if not isinstance(data, dict):
            raise InputError(f"{path}: model document must be a JSON object")
        unknown = sorted(set(data) - set(_DOCUMENT_KEYS))
        if unknown:
            raise InputError(f"{path}: unknown model settings {', '.join(unknown)}")
        base = os.path.dirname(os.path.abspath(path))
        self.path = path

        def resolve(p):
            if not isinstance(p, str):
                raise InputError(f"{path}: expected a file path, got {p!r}")
            return os.path.normpath(os.path.join(base, os.path.expanduser(p)))

        survey = data.get("survey")
        if not isinstance(survey, dict) or "path" not in survey:
            raise InputError(f"{path}: 'survey' needs a 'path'")
        self.survey_path = resolve(survey["path"])
        self.survey_likelihood = survey.get("likelihood", "presence")

        covariates = data.get("covariates", {})
        if not isinstance(covariates, dict):
            raise InputError(f"{path}: 'covariates' must map names to raster paths")
        self.covariates = [(name, resolve(p)) for (name, p) in covariates.items()]
        self.barriers = resolve(data["barriers"]) if data.get("barriers") else None

        self.experts = []
        for (ix, e) in enumerate(data.get("experts", [])):
            if not isinstance(e, dict) or not e.get("path"):
                raise InputError(f"{path}: expert {ix+1} needs a raster 'path'")
            self.experts.append((str(e.get("name", ix + 1)), resolve(e["path"])))
        names = [n for (n, _) in self.experts]
        if len(set(names)) != len(names):
            raise InputError(f"{path}: expert names must be unique")

        el = data.get("expert_likelihood", {})
        self.expert_categories = el.get("categories", "four")
        self.expert_form = el.get("form", "exact")
        self.s_bar = float(data.get("s_bar", 2.0))
        self.cutoffs = tuple(data.get("cutoffs", (0.1, 0.5, 0.9)))
        self.spatial_field = bool(data.get("spatial_field", True))
        self.barrier_fraction = float(data.get("barrier_fraction", 0.2))
        mesh = data.get("mesh", {})
        unknown = sorted(set(mesh) - set(_MESH_KEYS))
        if unknown:
            raise InputError(f"{path}: unknown mesh settings {', '.join(unknown)}")
        self.mesh = mesh
        self.priors = ModelPriors.from_data(data.get("priors"))
        self.prediction_raster = (resolve(data["prediction_raster"])
                                  if data.get("prediction_raster") else None)
        self.initial_hyper = data.get("initial_hyper")
        aggregate = data.get("aggregate", 1)
        if isinstance(aggregate, bool) or not isinstance(aggregate, int) or aggregate < 1:
            raise InputError(f"{path}: 'aggregate' must be a positive integer, got {aggregate!r}")
        self.aggregate = aggregate

    def __repr__(self):
        return f"ModelDocument({self.path})"


class Problem():
    """Model document plus the data it points at, assembled into design blocks."""

    def __init__(self, doc, spec, blocks, survey, domain, covariates):
        self.doc = doc
        self.spec = spec
        self.blocks = blocks
        self.survey = survey
        self.domain = domain
        self.covariates = covariates

    def survey_digest(self):
        return data_digest(self.survey.digest_data())

    def label(self):
        return model_label(self.spec)


def model_label(spec):
    survey = SURVEY_LABELS[spec.survey_likelihood]
    if not spec.expert_names:
        return (survey, "--")
    expert = EXPERT_LABELS[spec.expert_categories]
    if spec.expert_form == "approx":
        expert += " approx"
    return (survey, expert)


class Engine():

    def __init__(self, threads=1, newton_tol=inference.NEWTON_TOL,
                 newton_max_iter=inference.NEWTON_MAX_ITER, hyper_tol=inference.HYPER_TOL,
                 hyper_max_sweeps=inference.HYPER_MAX_SWEEPS, jitter=gmrf.JITTER,
                 jitter_max=gmrf.JITTER_MAX, quadrature_tol=inference.QUADRATURE_TOL):
        self.threads = max(1, int(threads))
        self.newton = {"tol": newton_tol, "max_iter": newton_max_iter,
                       "jitter": jitter, "jitter_max": jitter_max}
        self.hyper_tol = hyper_tol
        self.hyper_max_sweeps = hyper_max_sweeps
        self.quadrature_tol = quadrature_tol

    def __repr__(self):
        return f"Engine(threads={self.threads})"

    def _cached_mesh(self, out_dir, kind, key, builder):
        digest = data_digest(kind, key)[:16]
        path = os.path.join(out_dir, f"mesh-{digest}-{kind}.txt")
        if os.path.exists(path):
            logging.debug(f"reusing cached {kind} mesh {path}")
            return read_mesh(path)
        started = time.time()
        mesh = builder()
        write_mesh(path, mesh)
        logging.info(f"Built {kind} mesh {mesh} in {format_timespan(time.time() - started)}")
        return mesh

    def _mesh_settings(self, doc, domain):
        side = min(domain.width(), domain.height())
        m = {"max_edge_inner": side / 10.0, "max_edge_outer": side / 2.5,
             "cutoff": side / 75.0, "offset_inner": side / 10.0, "offset_outer": side / 3.0,
             "expert_edge": side / 10.0}
        m.update(doc.mesh)
        return m

    def load(self, config, out_dir):
        """Read the model document and its data, and assemble the design blocks."""
        started = time.time()
        mkdirs(out_dir)
        doc = ModelDocument(config)
        survey = read_survey(doc.survey_path, doc.survey_likelihood)
        covariates = [read_raster(p) for (_, p) in doc.covariates]
        barriers = read_polygons(doc.barriers) if doc.barriers else []
        expert_rasters = [read_raster(p).check_categorical() for (_, p) in doc.experts]
        if doc.aggregate > 1:
            covariates = [aggregate_raster(r, doc.aggregate) for r in covariates]
            expert_rasters = [aggregate_raster(r, doc.aggregate, categorical=True) for r in expert_rasters]
            logging.info(f"Rasters aggregated by a factor of {doc.aggregate}")

        if doc.prediction_raster:
            domain = read_raster(doc.prediction_raster)
        elif covariates:
            domain = covariates[0]
        else:
            raise InputError(f"{config}: need covariates or a prediction_raster to define the domain")
        for ((name, _), raster) in zip(doc.covariates, covariates):
            if not raster.same_geometry(covariates[0]):
                raise InputError(f"Covariate {name} does not share the geometry of {doc.covariates[0][0]}")

        settings = self._mesh_settings(doc, domain)
        mesh_key = ["constrained", settings, domain.header(), [p.tolist() for p in barriers],
                    survey.points.tolist()]
        barrier_mesh = self._cached_mesh(
            out_dir, "barrier", mesh_key,
            lambda: build_mesh(domain, barriers, settings["max_edge_inner"], settings["max_edge_outer"],
                               settings["cutoff"], settings["offset_inner"], settings["offset_outer"],
                               forced_points=survey.points))
        expert_mesh = None
        if doc.experts:
            expert_mesh = self._cached_mesh(
                out_dir, "expert", [settings["expert_edge"], domain.header()],
                lambda: build_uniform_mesh(domain, settings["expert_edge"]))

        # standardize over the barrier-mesh vertices
        if covariates:
            At = reverse_projection(projection_matrix(barrier_mesh, covariates[0].cell_centers()))
            vertex_values = np.column_stack([project_to_mesh(At, r.flat()) for r in covariates])
            standardization = Standardization.fit(vertex_values)
        else:
            standardization = Standardization.identity(0)

        approx = None
        if doc.experts and doc.expert_form == "approx" and doc.expert_categories == "four":
            approx = _cached_binomial_approx(out_dir, doc.s_bar, doc.cutoffs)
        spec = ModelSpec(doc.survey_likelihood, doc.expert_categories, doc.expert_form,
                         [n for (n, _) in doc.covariates], [n for (n, _) in doc.experts],
                         doc.priors, doc.s_bar, doc.cutoffs, doc.spatial_field,
                         doc.barrier_fraction, barrier_mesh, expert_mesh, approx, standardization)

        n = len(survey)
        X = standardization.apply(_sample_columns(covariates, survey.points, n))
        A = (projection_matrix(barrier_mesh, survey.points) if spec.spatial_field
             else sparse.csr_matrix((n, 0)))
        blocks = [survey_block(spec, X, A, survey.response, survey.volume)]

        if doc.experts:
            vertices = expert_mesh.vertices
            m = vertices.shape[0]
            if covariates:
                At_e = reverse_projection(projection_matrix(expert_mesh, covariates[0].cell_centers()))
                X_e = np.column_stack([project_to_mesh(At_e, r.flat()) for r in covariates])
            else:
                X_e = np.zeros((m, 0))
            A_eb = (projection_matrix(barrier_mesh, vertices) if spec.spatial_field
                    else sparse.csr_matrix((m, 0)))
            link = link_block(spec, standardization.apply(X_e), A_eb)
            blocks.append(link)
            identity = sparse.identity(m, format="csr")
            for (j, ((name, _), raster)) in enumerate(zip(doc.experts, expert_rasters)):
                At_j = reverse_projection(projection_matrix(expert_mesh, raster.cell_centers()))
                z = project_to_mesh(At_j, raster.flat(), categorical=True)
                blocks.append(expert_block(spec, j, identity, link, z, name=f"expert[{name}]"))
                logging.debug(f"expert {name}: {int(np.count_nonzero(~np.isnan(z)))} assessed vertices")

        logging.info(f"Assembled {spec} with latent dimension {spec.layout().dim} "
                     f"in {format_timespan(time.time() - started)}")
        return Problem(doc, spec, blocks, survey, domain, covariates)

    def _initial_hyper(self, problem, init):
        if init:
            return inference.load_hyper(init, problem.spec)
        if problem.doc.initial_hyper:
            return Hyper.from_data(problem.spec, problem.doc.initial_hyper)
        return Hyper.default(problem.spec)

    def fit(self, config, out_dir, init=None):
        problem = self.load(config, out_dir)
        spec = problem.spec
        hyper = self._initial_hyper(problem, init)
        try:
            fit = inference.optimize_hyperparameters(spec, problem.blocks, hyper, tol=self.hyper_tol,
                                                     max_sweeps=self.hyper_max_sweeps, **self.newton)
        except NumericalError as ex:
            failure = {"status": "failed",
                       "error": type(ex).__name__,
                       "message": str(ex),
                       "initial_hyper": hyper.to_data()}
            for key in ("grad_norm", "iterations", "minor", "block", "row"):
                if getattr(ex, key, None) is not None:
                    failure[key] = getattr(ex, key)
            write_json(os.path.join(out_dir, "fit.json"), failure)
            raise
        inference.save_fit_state(os.path.join(out_dir, "fit_state.npz"), fit)
        report = {"status": "ok",
                  "model": {"survey_likelihood": spec.survey_likelihood,
                            "expert_likelihood": spec.expert_label(),
                            "label": list(problem.label()),
                            "covariates": spec.covariate_names,
                            "experts": spec.expert_names,
                            "spatial_field": spec.spatial_field,
                            "latent_dimension": spec.layout().dim},
                  "hyper": fit.hyper_map.to_data(),
                  "fixed_effects": inference.posterior_summary(fit, spec),
                  "standardization": spec.standardization.to_data(),
                  "priors": spec.priors.to_data(),
                  "log_likelihood": log_likelihood_summary(fit.approx.mode.vector, fit.hyper_map,
                                                           problem.blocks),
                  "diagnostics": fit.diagnostics,
                  "model_digest": file_digest(problem.doc.path),
                  "survey_digest": problem.survey_digest()}
        approx = spec.binomial_approx()
        if approx is not None:
            report["binomial_approx"] = approx.to_data()
            report["binomial_approx_text"] = approx.to_text()
        write_json(os.path.join(out_dir, "fit.json"), report)
        return fit

    def _load_fit(self, problem, out_dir):
        path = os.path.join(out_dir, "fit_state.npz")
        if not os.path.exists(path):
            raise InputError(f"No fit found at {path}, run fit first")
        return inference.load_fit_state(path, problem.spec, self.newton["jitter"], self.newton["jitter_max"])

    def predict(self, config, out_dir, count_scale=False):
        problem = self.load(config, out_dir)
        fit = self._load_fit(problem, out_dir)
        domain = problem.domain
        cells = domain.cell_centers()
        covariates = [domain.with_values(r.sample(cells).reshape(domain.nrows, domain.ncols))
                      for r in problem.covariates]
        pred = inference.posterior_predict(fit, domain, problem.spec, covariates, count_scale=count_scale)
        paths = []
        for (stem, raster) in pred.surfaces():
            path = os.path.join(out_dir, f"{stem}.asc")
            write_raster(path, raster)
            paths.append(path)
        return pred, paths

    def evaluate(self, config, out_dir, update_cb=None):
        problem = self.load(config, out_dir)
        fit = self._load_fit(problem, out_dir)
        spec = problem.spec
        cpo = inference.loo_cpo(spec, problem.blocks, fit, threads=self.threads, update_cb=update_cb,
                                quadrature_tol=self.quadrature_tol, **self.newton)
        survey = problem.survey
        rows = np.flatnonzero(~np.isnan(survey.response))
        report = ScoreReport(cpo, survey.response[rows], presence=spec.survey_likelihood == "presence",
                             rows=rows, label=problem.label())
        data = report.to_data()
        data["label"] = list(problem.label())
        data["survey_digest"] = problem.survey_digest()
        write_json(os.path.join(out_dir, "scores.json"), data)
        write_text(os.path.join(out_dir, "scores.txt"), report.to_text())
        return report

    def compare(self, dirs, out_dir):
        if len(dirs) < 2:
            raise InputError("compare needs at least two evaluated output directories")
        rows = []
        digests = set()
        for d in dirs:
            data = read_json(os.path.join(d, "scores.json"))
            digests.add(data.get("survey_digest"))
            rows.append((data["label"][0], data["label"][1],
                         data["lpd"], data["acc"], data["bacc"], data["crps"]))
        if len(digests) != 1:
            raise InputError("Fits were evaluated on different survey datasets and are not comparable")
        mkdirs(out_dir)
        text = comparison_table(rows)
        write_text(os.path.join(out_dir, "comparison.txt"), text)
        write_json(os.path.join(out_dir, "comparison.json"),
                   {"models": [{"dir": d, "survey": r[0], "expert": r[1], "lpd": r[2],
                                "acc": r[3], "bacc": r[4], "crps": r[5]}
                               for (d, r) in zip(dirs, rows)]})
        return text

    def simulate(self, config, out_dir, seed=None):
        truth = TruthScenario.from_data(read_json(config)) if config else TruthScenario()
        if seed is not None:
            truth = truth.with_seed(seed)
        mkdirs(out_dir)
        return simulate_scenario(truth, out_dir)


def _sample_columns(rasters, points, n):
    if not rasters:
        return np.zeros((n, 0))
    return np.column_stack([r.sample(points) for r in rasters])

def _cached_binomial_approx(out_dir, s_bar, cutoffs):
    path = os.path.join(out_dir, f"binomial-{data_digest(s_bar, list(cutoffs))[:16]}.json")
    if os.path.exists(path):
        return BinomialApprox.from_data(read_json(path))
    approx = fit_binomial_approx(s_bar, CategoryCutoffs(cutoffs))
    write_json(path, approx.to_data())
    return approx
