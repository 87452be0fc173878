import sys
import cmd
import configparser
import os
import os.path
import shlex
import logging
import progressbar

from expertsdm.pipeline import Engine
from expertsdm.cmdline import option, flag, arg, path_option, argless, chain
from expertsdm.exceptions import InputError

EXIT_OK = 0
EXIT_FAILURE = 1

def exit_code(ex):
    if isinstance(ex, OSError):
        return InputError.exit_code
    return getattr(ex, "exit_code", EXIT_FAILURE)

_common = chain(path_option("config", "c"),
                path_option("out", "o", default="."),
                option("threads", "t", cast="int"),
                flag("verbose", "v"))

class CLI(cmd.Cmd):

    prompt = "expertsdm> "

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        self._init_cfg()
        self.exit_code = EXIT_OK

    def cfg(self, section, key, default=None):
        try:
            return self._cfg[section][key]
        except KeyError:
            if default is not None:
                return default
            raise InputError(f"Configuration entry {key} missing in section {section}")

    def cfg_int(self, section, key):
        v = self.cfg(section, key)
        try:
            return int(v)
        except ValueError:
            raise InputError(f"Configuration entry {key} is not an integer")

    def cfg_float(self, section, key):
        v = self.cfg(section, key)
        try:
            return float(v)
        except ValueError:
            raise InputError(f"Configuration entry {key} is not a number")

    def _init_cfg(self):
        self._cfg = configparser.ConfigParser()
        self._cfg["expertsdm"] = {
            "threads": 1,
            "newton_tol": 1e-6,
            "newton_max_iter": 100,
            "hyper_tol": 1e-4,
            "hyper_max_sweeps": 30,
            "jitter": 1e-10,
            "jitter_max": 1e-6,
            "quadrature_tol": 1e-8
        }
        self._cfg["logging"] = {}

        fns = [os.path.expanduser(fn) for fn in ("~/.expertsdm", "~/.config/expertsdm")]
        self._cfg.read(fns)

    def _engine(self, threads=None):
        return Engine(threads = threads or self.cfg_int("expertsdm", "threads"),
                      newton_tol = self.cfg_float("expertsdm", "newton_tol"),
                      newton_max_iter = self.cfg_int("expertsdm", "newton_max_iter"),
                      hyper_tol = self.cfg_float("expertsdm", "hyper_tol"),
                      hyper_max_sweeps = self.cfg_int("expertsdm", "hyper_max_sweeps"),
                      jitter = self.cfg_float("expertsdm", "jitter"),
                      jitter_max = self.cfg_float("expertsdm", "jitter_max"),
                      quadrature_tol = self.cfg_float("expertsdm", "quadrature_tol"))

    def _set_verbose(self, verbose):
        if verbose:
            logging.getLogger().setLevel(logging.DEBUG)

    def _need_config(self, config):
        if config is None:
            raise InputError("Missing --config model document")
        return config

    @chain(_common, option("seed", "s", cast="int"))
    def do_simulate(self, config, out, threads, verbose, seed):
        """
        simulate [--config scenario.json] [--seed n] [--out dir]

        Generates a synthetic scenario: covariate rasters, survey.csv,
        one expert_<name>.asc per simulated expert, barriers.txt,
        truth.json and the model documents model.json (with the
        experts) and model_survey_only.json. Without --config the
        default scenario is used; --seed overrides the scenario seed.
        """

        self._set_verbose(verbose)
        written = self._engine(threads).simulate(config, out, seed=seed)
        for path in written.values():
            print(path)

    @chain(_common, path_option("init"))
    def do_fit(self, config, out, threads, verbose, init):
        """
        fit --config model.json [--out dir] [--init fit_state.npz]

        Builds (or reuses) the meshes, assembles the model and optimizes
        the hyperparameters. Writes fit.json and fit_state.npz into the
        output directory. --init names a fit_state.npz whose
        hyperparameters start the search.
        """

        self._set_verbose(verbose)
        fit = self._engine(threads).fit(self._need_config(config), out, init=init)
        print(f"log marginal: {fit.approx.log_marginal!r}")
        for (name, value) in fit.hyper_map.to_data().items():
            print(f"{name}: {value!r}")

    @chain(_common, flag("count-scale"))
    def do_predict(self, config, out, threads, verbose, count_scale):
        """
        predict --config model.json [--out dir] [--count-scale]

        Predicts over the prediction raster from a previous fit in the
        output directory: pred_mean.asc, pred_sd.asc and per-expert
        mean, sd and bias surfaces. --count-scale adds
        pred_count_mean.asc for count models.
        """

        self._set_verbose(verbose)
        _, paths = self._engine(threads).predict(self._need_config(config), out,
                                                 count_scale=count_scale)
        for path in paths:
            print(path)

    @_common
    def do_evaluate(self, config, out, threads, verbose):
        """
        evaluate --config model.json [--out dir] [--threads n]

        Leave-one-out predictive scores (lpd, ACC, bACC, CRPS) of the
        fit in the output directory. Refits run on --threads workers.
        Writes scores.json and scores.txt.
        """

        self._set_verbose(verbose)
        engine = self._engine(threads)
        with progressbar.ProgressBar(redirect_stdout=True, redirect_stderr=True) as bar:
            def update_cb(done, total):
                bar.max_value = total
                bar.update(done)

            report = engine.evaluate(self._need_config(config), out, update_cb=update_cb)
        print(report.to_text(), end="")

    @chain(_common, arg("dirs", arity="+"))
    def do_compare(self, config, out, threads, verbose, dirs):
        """
        compare [--out dir] dir1 dir2...

        Tabulates the scores of evaluated output directories, one row per
        model labeled by its survey and expert likelihoods. Writes
        comparison.txt and comparison.json.
        """

        self._set_verbose(verbose)
        dirs = [os.path.expanduser(d) for d in dirs]
        print(self._engine(threads).compare(dirs, out), end="")

    @argless()
    def do_EOF(self):
        print("\nBye!")
        return True

    @argless()
    def do_exit(self):
        """
        exit

        Exits the program.
        """

        print("Bye!")
        return True

    def emptyline(self):
        return False

    def _tell_error(self, msg):
        _, ex, _ = sys.exc_info()
        print(f"{msg}: {type(ex).__name__} - {ex}", file=sys.stderr)
        logging.debug("Stack trace", exc_info=True)

    def onecmd(self, line):
        self.exit_code = EXIT_OK
        try:
            return super().onecmd(line)
        except Exception as ex:
            self.exit_code = exit_code(ex)
            self._tell_error("Operation failed")
            return False

    def default(self, line):
        raise InputError(f"Unknown command: {line.split()[0]}")

    def preloop(self):
        # DEFAULTS contaminates everything, so we have to explicitly
        # state the fields that we want passed to
        # logging.basicConfig().
        section = self._cfg["logging"]
        logcfg = { k: section[k]
                   for k in ("filename", "filemode", "format", "datefmt",
                             "style", "level", "encoding", "errors")
                   if k in section }
        logging.basicConfig(force=1, **logcfg)

    def run_args(self, argv):
        """Runs a single command given as an argument vector and returns its exit code."""
        self.preloop()
        self.onecmd(" ".join(shlex.quote(a) for a in argv))
        return self.exit_code
