"""Self-describing checkpoint archives (.npz with a JSON meta record)."""

import json
import os

import numpy as np

from edgepatch.errors import DependencyMissing, ModelError

_META_KEY = "__meta__"
_FORMAT_VERSION = 1


def save_checkpoint(path, kind, params, meta):
    """Write parameter arrays plus metadata. `params` maps name -> array."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    doc = dict(meta)
    doc["kind"] = kind
    doc["format_version"] = _FORMAT_VERSION
    doc["param_names"] = sorted(params)
    payload = {f"param/{k}": np.asarray(v) for k, v in params.items()}
    payload[_META_KEY] = np.frombuffer(
        json.dumps(doc, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **payload)


def load_checkpoint(path, expected_kind=None):
    """Read back (meta, params). Raises DependencyMissing when absent."""
    if not os.path.exists(path):
        raise DependencyMissing(f"dependency checkpoint not found: {path}")
    with np.load(path) as z:
        if _META_KEY not in z:
            raise ModelError(f"not a checkpoint archive: {path}")
        meta = json.loads(bytes(z[_META_KEY].tobytes()).decode())
        params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    if expected_kind is not None and meta.get("kind") != expected_kind:
        raise ModelError(
            f"checkpoint kind mismatch: wanted {expected_kind}, found {meta.get('kind')}")
    return meta, params


def write_training_curve(path, rows, header=("epoch", "loss")):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")
