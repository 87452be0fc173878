"""Survey tables: point locations, sampling volumes and responses.

CSV layout is `x,y,volume,count` for count surveys and `x,y,volume,present`
for presence/absence surveys. An empty response cell is missing.
"""

import csv
import logging
import numpy as np

from expertsdm.exceptions import InputError
from expertsdm.util import float_text

RESPONSE_COLUMNS = {"count": "count", "presence": "present", "gaussian": "value"}


class SurveyTable():

    def __init__(self, points, volume, response, likelihood="presence"):
        points = np.array(points, dtype=float).reshape(-1, 2)
        volume = np.array(volume, dtype=float).ravel()
        response = np.array(response, dtype=float).ravel()
        if not (points.shape[0] == volume.size == response.size):
            raise InputError("Survey points, volumes and responses differ in length")
        if likelihood not in RESPONSE_COLUMNS:
            raise InputError(f"Unknown survey likelihood '{likelihood}'")
        if np.any(~(volume > 0)):
            raise InputError("Survey volumes must be positive")
        observed = response[~np.isnan(response)]
        if likelihood == "count" and np.any((observed < 0) | (observed != np.round(observed))):
            raise InputError("Survey counts must be non-negative integers")
        if likelihood == "presence" and np.any(~np.isin(observed, (0, 1))):
            raise InputError("Survey presences must be 0 or 1")
        self.points = points
        self.volume = volume
        self.response = response
        self.likelihood = likelihood

    def __repr__(self):
        return f"SurveyTable({self.likelihood}, n={len(self)})"

    def __len__(self):
        return self.points.shape[0]

    def digest_data(self):
        return [self.likelihood, self.points.tolist(), self.volume.tolist(),
                [None if np.isnan(v) else v for v in self.response]]


def write_survey(path, table):
    column = RESPONSE_COLUMNS[table.likelihood]
    logging.debug(f"writing survey {path}")
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["x", "y", "volume", column])
            for ((x, y), v, r) in zip(table.points, table.volume, table.response):
                if np.isnan(r):
                    value = ""
                elif table.likelihood == "gaussian":
                    value = float_text(r)
                else:
                    value = str(int(r))
                writer.writerow([float_text(x), float_text(y), float_text(v), value])
    except OSError as ex:
        raise InputError(f"Unable to write survey {path}: {ex.strerror}") from ex

def read_survey(path, likelihood):
    column = RESPONSE_COLUMNS.get(likelihood)
    if column is None:
        raise InputError(f"Unknown survey likelihood '{likelihood}'")
    points, volume, response = [], [], []
    try:
        with open(path, encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            missing = {"x", "y", column} - set(reader.fieldnames or ())
            if missing:
                raise InputError(f"{path}: survey is missing columns {', '.join(sorted(missing))}")
            for (ix, row) in enumerate(reader, start=2):
                try:
                    points.append((float(row["x"]), float(row["y"])))
                    volume.append(float(row["volume"]) if row.get("volume") else 1.0)
                    text = row[column].strip()
                    response.append(float(text) if text else np.nan)
                except ValueError as ex:
                    raise InputError(f"{path}:{ix}: {ex}") from ex
    except OSError as ex:
        raise InputError(f"Unable to read survey {path}: {ex.strerror}") from ex
    return SurveyTable(points, volume, response, likelihood)
