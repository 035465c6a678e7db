"""Parameter checkpoints.

A checkpoint is a numpy ``.npz`` archive. Every parameter is stored under its
dotted module path (``schnet.interactions.0.in2f.weight``) as a float64
array. Three extra entries describe the file:

``__format__``   the string ``molbuild-params``
``__version__``  integer format version (currently 1)
``__meta__``     JSON text with free-form run information (config, step, seed)

Loading checks the format tag, the version and that names and shapes match
the receiving module exactly.
"""
from __future__ import annotations

import json

import numpy as np

from molbuild.errors import ConfigError

FORMAT = "molbuild-params"
VERSION = 1


def save_checkpoint(module, path, meta: dict | None = None) -> None:
    arrays = module.state_dict()
    for reserved in ("__format__", "__version__", "__meta__"):
        if reserved in arrays:
            raise ValueError(f"parameter name {reserved!r} is reserved")
    arrays["__format__"] = np.array(FORMAT)
    arrays["__version__"] = np.array(VERSION)
    arrays["__meta__"] = np.array(json.dumps(meta or {}, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        if "__format__" not in data or str(data["__format__"]) != FORMAT:
            raise ConfigError(f"{path} is not a parameter checkpoint")
        version = int(data["__version__"])
        if version != VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(str(data["__meta__"]))
        params = {k: data[k].astype(np.float64) for k in data.files if not k.startswith("__")}
    return params, meta


def load_checkpoint(module, path) -> dict:
    """Load parameters into ``module`` and return the stored metadata."""
    params, meta = read_checkpoint(path)
    module.load_state_dict(params)
    return meta
