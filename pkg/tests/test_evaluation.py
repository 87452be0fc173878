import itertools
import json
import logging
import numpy as np
import pytest

from expertsdm.exceptions import InputError
from expertsdm.evaluation import lpd, acc, bacc, crps_bernoulli, ScoreReport, comparison_table


def _crps_enumerated(pi_hat, y):
    # E|Y - y| - E|Y - Y'| / 2 for Y, Y' ~ Bernoulli(pi_hat)
    p = {0: 1 - pi_hat, 1: pi_hat}
    first = sum(p[a] * abs(a - y) for a in (0, 1))
    second = sum(p[a] * p[b] * abs(a - b) for (a, b) in itertools.product((0, 1), repeat=2))
    return first - 0.5 * second


def test_lpd():
    assert lpd([1.0, 1.0, 1.0]) == 0.0
    assert lpd([np.exp(-1), np.exp(-3)]) == pytest.approx(-2.0)
    rng = np.random.default_rng(0)
    cpo = rng.uniform(0.01, 1, 200)
    assert lpd(cpo) == pytest.approx(sum(np.log(c) for c in cpo) / 200, abs=1e-12)
    assert lpd(cpo[::-1]) == pytest.approx(lpd(cpo), abs=1e-12)

def test_lpd_rejects():
    with pytest.raises(InputError):
        lpd([0.5, 0.0])
    with pytest.raises(InputError):
        lpd([-0.1])
    with pytest.raises(InputError):
        lpd([])

def test_acc():
    assert acc([0.9] * 5) == 1.0
    assert acc([0.6, 0.4]) == 0.5
    assert acc([0.5]) == 1.0

def test_acc_rejects_count_cpo():
    with pytest.raises(InputError):
        acc([0.2, 1.5])

def test_bacc():
    assert bacc([0.9, 0.8, 0.7, 0.6], [1, 1, 0, 0]) == 1.0
    assert bacc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 0.5

def test_bacc_skewed_partition():
    cpo = np.array([0.9, 0.3, 0.8, 0.6, 0.1, 0.7, 0.2])
    y = np.array([1, 1, 1, 0, 0, 0, 0])
    tpr = 2 / 3
    tnr = 2 / 4
    assert bacc(cpo, y) == pytest.approx((tpr + tnr) / 2)
    assert min(tpr, tnr) <= acc(cpo) <= max(tpr, tnr)

def test_bacc_single_class():
    with pytest.raises(InputError, match="both presences and absences"):
        bacc([0.9, 0.8], [1, 1])
    with pytest.raises(InputError):
        bacc([0.9, 0.8], [1, 0, 1])

def test_crps_known_values():
    assert crps_bernoulli(0.5, 1) == 0.25
    assert crps_bernoulli(1.0, 1) == 0.0
    assert crps_bernoulli(0.3, 0) == pytest.approx(0.09)

def test_crps_matches_enumeration():
    rng = np.random.default_rng(1)
    pi_hat = rng.uniform(size=1000)
    y = rng.integers(0, 2, 1000)
    crps = crps_bernoulli(pi_hat, y)
    enumerated = np.array([_crps_enumerated(p, v) for (p, v) in zip(pi_hat, y)])
    assert np.max(np.abs(crps - enumerated)) <= 1e-12
    cpo = np.where(y == 1, pi_hat, 1 - pi_hat)
    assert np.array_equal(crps, (1 - cpo) ** 2)

def test_crps_label_symmetry():
    for p in np.linspace(0, 1, 11):
        assert crps_bernoulli(p, 1) == pytest.approx(crps_bernoulli(1 - p, 0))

def test_crps_is_proper():
    grid = np.linspace(0, 1, 101)
    for p in np.linspace(0.05, 0.95, 19):
        expected = p * crps_bernoulli(grid, 1) + (1 - p) * crps_bernoulli(grid, 0)
        assert abs(grid[np.argmin(expected)] - p) <= 0.005 + 1e-12

def test_score_report_presence():
    cpo = [0.9, 0.7, 0.4, 0.8]
    y = [1, 0, 1, 0]
    report = ScoreReport(cpo, y, presence=True, label=("p/a", "--"))
    assert report.n == 4
    assert report.acc == 0.75
    assert report.bacc == 0.75
    assert report.crps == pytest.approx(np.mean((1 - np.array(cpo)) ** 2))
    data = report.to_data()
    assert [o["row"] for o in data["observations"]] == [0, 1, 2, 3]
    assert data["observations"][2]["crps"] == pytest.approx(0.36)

def test_score_report_count_leaves_classification_blank():
    report = ScoreReport([0.2, 0.05, 0.1], [3, 0, 7], presence=False)
    assert report.scores()[1:] == (None, None, None)
    header, row = report.to_text().splitlines()
    assert header.split() == ["lpd", "ACC", "bACC", "CRPS"]
    assert row.split() == [repr(report.lpd)]

def test_score_report_single_class_omits_bacc(caplog):
    with caplog.at_level(logging.WARNING):
        report = ScoreReport([0.9, 0.6], [1, 1])
    assert report.bacc is None
    assert report.acc == 1.0
    assert "bACC" in caplog.text

def test_score_report_missing_cpo():
    report = ScoreReport([0.9, np.nan, 0.3], [1, 0, 0], rows=[4, 7, 9])
    assert report.n == 2
    assert report.n_missing == 1
    observations = report.to_data()["observations"]
    assert observations[1] == {"row": 7, "y": 0.0, "cpo": None}
    with pytest.raises(InputError):
        ScoreReport([np.nan], [1])

def test_text_and_json_reports_agree():
    report = ScoreReport([0.9, 0.7, 0.4, 0.8, 0.55], [1, 0, 1, 0, 1])
    data = json.loads(json.dumps(report.to_data()))
    values = [float(v) for v in report.to_text().splitlines()[1].split()]
    assert values == [data["lpd"], data["acc"], data["bacc"], data["crps"]]

def test_comparison_table():
    text = comparison_table([("p/a", "--", -0.5, 0.7, 0.65, 0.2),
                             ("abu", "4-cat", -1.25, None, None, None)])
    lines = text.splitlines()
    assert len(lines) == 3
    assert lines[0].split() == ["survey", "expert", "lpd", "ACC", "bACC", "CRPS"]
    assert lines[1].split() == ["p/a", "--", "-0.5", "0.7", "0.65", "0.2"]
    assert lines[2].split() == ["abu", "4-cat", "-1.25"]
    assert len(set(len(line) for line in lines[:2])) == 1
