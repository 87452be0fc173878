import io
import pathlib
import zipfile
import hashlib
import json
import logging
import numpy as np

from expertsdm.exceptions import InputError

def mkdirs(path):
    try:
        return pathlib.Path(path).mkdir(parents=True, exist_ok=True)
    except OSError as ex:
        raise InputError(f"Unable to create directory {path}: {ex}") from ex

def read_json(path):
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as ex:
        raise InputError(f"Unable to read {path}: {ex.strerror}") from ex
    try:
        return json.loads(text)
    except json.JSONDecodeError as ex:
        raise InputError(f"{path}:{ex.lineno}:{ex.colno}: {ex.msg}") from ex

def write_json(path, data):
    logging.debug(f"writing {path}")
    text = json.dumps(data, indent=2, sort_keys=True, allow_nan=True) + "\n"
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    except OSError as ex:
        raise InputError(f"Unable to write {path}: {ex.strerror}") from ex

def write_text(path, text):
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    except OSError as ex:
        raise InputError(f"Unable to write {path}: {ex.strerror}") from ex

def file_digest(path):
    h = hashlib.sha256()
    try:
        with open(path, "rb") as f:
            for block in iter(lambda: f.read(1 << 16), b""):
                h.update(block)
    except OSError as ex:
        raise InputError(f"Unable to read {path}: {ex.strerror}") from ex
    return h.hexdigest()

def data_digest(*parts):
    h = hashlib.sha256()
    for part in parts:
        h.update(json.dumps(part, sort_keys=True).encode("utf-8"))
        h.update(b"\0")
    return h.hexdigest()

def float_text(v):
    # shortest text that reads back to the same double
    return repr(float(v))

def save_npz(path, **arrays):
    """np.savez with fixed member timestamps so equal arrays give equal bytes."""
    try:
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            for name in sorted(arrays):
                info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.asanyarray(arrays[name]), allow_pickle=False)
                zf.writestr(info, buf.getvalue())
    except OSError as ex:
        raise InputError(f"Unable to write {path}: {ex.strerror}") from ex
