"""Raw little-endian array directories with a JSON manifest.

Every persisted artifact (classifier and detector checkpoints, adversarial
sets, word exports) is a directory holding one ``<name>.bin`` file per array
and a ``manifest.json`` describing shapes, dtypes and provenance.
"""
import json
from pathlib import Path

import numpy as np
import torch

MANIFEST = "manifest.json"

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int32": "<i4",
    "int64": "<i8",
    "int8": "<i1",
    "uint8": "u1",
    "bool": "u1",
}


def write_arrays(directory, arrays, manifest):
    """Write ``arrays`` (name -> ndarray) and ``manifest`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        kind = arr.dtype.name
        if kind not in _DTYPES:
            raise TypeError(f"unsupported dtype {kind} for array {name!r}")
        fname = name.replace("/", "__") + ".bin"
        arr.astype(_DTYPES[kind], copy=False).tofile(directory / fname)
        index[name] = {"file": fname, "dtype": kind, "shape": list(arr.shape)}
    manifest = dict(manifest)
    manifest["arrays"] = index
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def read_manifest(directory):
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no manifest in {directory}")
    return json.loads(path.read_text())


def read_arrays(directory):
    directory = Path(directory)
    manifest = read_manifest(directory)
    out = {}
    for name, meta in manifest["arrays"].items():
        raw = np.fromfile(directory / meta["file"], dtype=_DTYPES[meta["dtype"]])
        arr = raw.reshape(meta["shape"])
        out[name] = arr.astype(bool) if meta["dtype"] == "bool" else arr.astype(meta["dtype"], copy=False)
    return out, manifest


def save_module(module, directory, manifest):
    """Persist every parameter and buffer of ``module`` as float32."""
    arrays = {k: v.detach().cpu().to(torch.float32).numpy() for k, v in module.state_dict().items()}
    return write_arrays(directory, arrays, manifest)


def load_module_state(module, directory):
    arrays, manifest = read_arrays(directory)
    reference = module.state_dict()
    missing = set(reference) - set(arrays)
    if missing:
        raise KeyError(f"checkpoint {directory} lacks {sorted(missing)}")
    state = {k: torch.from_numpy(np.array(arrays[k])).to(reference[k].dtype) for k in reference}
    module.load_state_dict(state)
    return manifest
