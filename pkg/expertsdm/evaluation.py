"""Leave-one-out scores: lpd, ACC, bACC and the Bernoulli CRPS."""

import logging
import numpy as np

from expertsdm.exceptions import InputError
from expertsdm.format import Table

COLUMNS = ("lpd", "ACC", "bACC", "CRPS")


def _as_array(v, what):
    v = np.asarray(v, dtype=float).ravel()
    if v.size == 0:
        raise InputError(f"{what} needs at least one observation")
    return v

def lpd(cpo):
    """Mean log CPO."""
    cpo = _as_array(cpo, "lpd")
    if np.any(~(cpo > 0)):
        raise InputError("lpd needs strictly positive CPO values")
    return float(np.mean(np.log(cpo)))

def _check_probabilities(cpo):
    if np.any(cpo > 1) or np.any(~(cpo > 0)):
        raise InputError("Classification scores need CPO values in (0, 1]; count-model CPO is not a probability")

def acc(cpo):
    """Fraction of observations whose CPO is at least 0.5."""
    cpo = _as_array(cpo, "acc")
    _check_probabilities(cpo)
    return float(np.mean(cpo >= 0.5))

def bacc(cpo, y):
    """Mean of the per-class accuracies."""
    cpo = _as_array(cpo, "bacc")
    y = np.asarray(y, dtype=float).ravel()
    if y.size != cpo.size:
        raise InputError(f"bacc got {cpo.size} CPO values but {y.size} responses")
    _check_probabilities(cpo)
    positive = y == 1
    negative = y == 0
    if not (np.any(positive) and np.any(negative)):
        raise InputError("bacc needs both presences and absences among the observations")
    tpr = np.mean(cpo[positive] >= 0.5)
    tnr = np.mean(cpo[negative] >= 0.5)
    return float(0.5 * (tpr + tnr))

def crps_bernoulli(pi_hat, y):
    """CRPS of a Bernoulli(pi_hat) forecast: pi_hat**2 for y=0, (1-pi_hat)**2 for y=1."""
    pi_hat = np.asarray(pi_hat, dtype=float)
    y = np.asarray(y, dtype=float)
    out = np.where(y == 1, (1.0 - pi_hat) ** 2, pi_hat ** 2)
    return out if out.ndim else float(out)


class ScoreReport():
    """Scores of one model; ACC, bACC and CRPS are None for count models."""

    def __init__(self, cpo, y, presence=True, rows=None, label=None):
        cpo = np.asarray(cpo, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        self.rows = np.arange(cpo.size) if rows is None else np.asarray(rows)
        self.cpo = cpo
        self.y = y
        self.presence = presence
        self.label = label

        ok = ~np.isnan(cpo)
        self.n_missing = int(np.count_nonzero(~ok))
        if self.n_missing:
            logging.warning(f"{self.n_missing} observations without CPO left out of the scores")
        self.n = int(np.count_nonzero(ok))
        if self.n < 1:
            raise InputError("No observation has a CPO value to score")
        c = cpo[ok]
        self.lpd = lpd(c)
        self.acc = self.bacc = self.crps = None
        if presence:
            self.acc = acc(c)
            try:
                self.bacc = bacc(c, y[ok])
            except InputError as ex:
                logging.warning(f"bACC not reported: {ex}")
            # the CPO of a presence model is the predictive probability of the observed class
            self.crps = float(np.mean((1.0 - c) ** 2))

    def __repr__(self):
        return f"ScoreReport(n={self.n}, lpd={self.lpd}, acc={self.acc}, bacc={self.bacc}, crps={self.crps})"

    def scores(self):
        return (self.lpd, self.acc, self.bacc, self.crps)

    def to_data(self):
        observations = []
        for (row, c, y) in zip(self.rows, self.cpo, self.y):
            item = {"row": int(row), "y": float(y), "cpo": None if np.isnan(c) else float(c)}
            if self.presence and not np.isnan(c):
                item["crps"] = float((1.0 - c) ** 2)
            observations.append(item)
        return {"label": self.label,
                "n": self.n,
                "n_missing": self.n_missing,
                "lpd": self.lpd,
                "acc": self.acc,
                "bacc": self.bacc,
                "crps": self.crps,
                "observations": observations}

    def to_text(self):
        table = Table("score", "score", "score", "score", header=COLUMNS)
        table.append(*self.scores())
        return table.render()


def comparison_table(rows):
    """rows: (survey label, expert label, lpd, acc, bacc, crps) per model."""
    table = Table("text", "text", "score", "score", "score", "score",
                  header=("survey", "expert") + COLUMNS)
    for row in rows:
        table.append(*row)
    return table.render()
