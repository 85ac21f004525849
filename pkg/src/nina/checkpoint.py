"""Self-describing JSON checkpoints with little-endian f64 payloads.

Arrays are stored as base64 of their raw ``<f8`` bytes so a reload is
bit-exact. Flow checkpoints also carry every split permutation and PLU
permutation/sign vector.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .decoder import FlowConfig, NinaDecoder
from .diffusion import DdpmConfig, DdpmDecoder
from .flows import SplitMask

FORMAT = "nina-checkpoint/1"


class CheckpointError(OSError):
    """The file exists but is not a usable checkpoint."""


def encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "f64le": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_array(doc: dict) -> np.ndarray:
    raw = base64.b64decode(doc["f64le"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(doc["shape"])


def save_checkpoint(path: str | Path, model, run_config: dict | None = None) -> None:
    if isinstance(model, NinaDecoder):
        kind = "nina"
        layers = model.stack.layers
        structure = {
            "splits": [{"permutation": list(l.coupling.mask.permutation),
                        "half_size": l.coupling.mask.half_size,
                        "axis": l.coupling.split_axis} for l in layers],
            "plu": [None if l.plu is None else {"permutation": l.plu.perm.tolist(),
                                                "sign": l.plu.sign.tolist()} for l in layers],
        }
    elif isinstance(model, DdpmDecoder):
        kind, structure = "ddpm", {}
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    doc = {
        "format": FORMAT,
        "code_version": __version__,
        "kind": kind,
        "seed": model.config.seed,
        "model_config": asdict(model.config),
        "run_config": run_config or {},
        "structure": structure,
        "params": {name: encode_array(p.data) for name, p in model.named_parameters()},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path):
    """Return ``(model, document)``."""
    try:
        doc = json.loads(Path(path).read_text())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: not a JSON checkpoint ({err})") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unrecognised checkpoint format")
    if doc["kind"] == "nina":
        model = NinaDecoder.build(FlowConfig(**doc["model_config"]))
        for layer, split, plu in zip(model.stack.layers, doc["structure"]["splits"],
                                     doc["structure"]["plu"]):
            layer.coupling.mask = SplitMask(tuple(split["permutation"]), split["half_size"])
            if plu is not None:
                layer.plu.perm = np.asarray(plu["permutation"], dtype=np.intp)
                layer.plu.sign = np.asarray(plu["sign"], dtype=np.float64)
    elif doc["kind"] == "ddpm":
        model = DdpmDecoder(DdpmConfig(**doc["model_config"]))
    else:
        raise CheckpointError(f"unknown checkpoint kind {doc['kind']!r}")
    params = dict(model.named_parameters())
    if set(params) != set(doc["params"]):
        raise CheckpointError("checkpoint parameters do not match the model layout")
    for name, p in params.items():
        arr = decode_array(doc["params"][name])
        if arr.shape != p.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != {p.shape}")
        p.data[...] = arr
    return model, doc
