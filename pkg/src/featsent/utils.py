import contextlib
import hashlib
import json
import logging
import os
import random

import numpy as np
import torch

logger = logging.getLogger("featsent")


def derive_seed(label, seed):
    """Map (component label, global seed) to an independent 31-bit seed."""
    digest = hashlib.sha256(f"{label}:{int(seed)}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


@contextlib.contextmanager
def seeded(seed):
    """Run a block under a fixed torch seed without disturbing the global stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def set_deterministic(flag=True):
    torch.use_deterministic_algorithms(flag, warn_only=True)
    if flag:
        torch.set_num_threads(1)
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (set, frozenset, tuple)):
        return sorted(o) if isinstance(o, (set, frozenset)) else list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def hash_obj(obj, n=16):
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:n]


def hash_arrays(*arrays, n=16):
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a))
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:n]


def hash_module(module, n=16):
    return hash_arrays(*[t.detach().cpu().numpy() for t in module.state_dict().values()], n=n)


def as_tensor(x, dtype=torch.float32):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def batches(n, batch_size):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))
