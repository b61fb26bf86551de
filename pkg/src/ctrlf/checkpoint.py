"""Checkpoint directories: named tensors in a raw little-endian blob.

    tensors.txt   one ``name<TAB>dtype<TAB>shape<TAB>offset`` line per tensor
    tensors.bin   concatenated little-endian tensor bytes
    state.txt     key=value training state (epoch, step, RNG states as JSON)
    config.txt    key=value config snapshot
"""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path

import numpy as np

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def save_tensors(path, tensors: "OrderedDict[str, np.ndarray]") -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    offset = 0
    lines = []
    with open(path / "tensors.bin", "wb") as blob:
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            kind = arr.dtype.name
            if kind not in _DTYPES:
                raise TypeError(f"{name}: unsupported dtype {kind}")
            raw = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
            blob.write(raw)
            shape = ",".join(str(d) for d in arr.shape)
            lines.append(f"{name}\t{kind}\t{shape}\t{offset}\n")
            offset += len(raw)
    with open(path / "tensors.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)


def load_tensors(path) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    blob = (path / "tensors.bin").read_bytes()
    out = OrderedDict()
    for line in (path / "tensors.txt").read_text(encoding="utf-8").splitlines():
        name, kind, shape, offset = line.split("\t")
        dims = tuple(int(d) for d in shape.split(",")) if shape else ()
        dt = np.dtype(_DTYPES[kind])
        count = int(np.prod(dims)) if dims else 1
        start = int(offset)
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=start).reshape(dims)
        out[name] = arr.astype(dt.newbyteorder("="))
    return out


def save_state(path, state: dict) -> None:
    with open(Path(path) / "state.txt", "w", encoding="utf-8", newline="\n") as fh:
        for key, value in state.items():
            fh.write(f"{key}={json.dumps(value, sort_keys=True)}\n")


def load_state(path) -> dict:
    out = {}
    for line in (Path(path) / "state.txt").read_text(encoding="utf-8").splitlines():
        key, value = line.split("=", 1)
        out[key] = json.loads(value)
    return out


def save_checkpoint(path, model, optimizer=None, state: dict | None = None, config_text: str = "") -> Path:
    path = Path(path)
    tensors = OrderedDict(("model." + k, v) for k, v in model.state_dict().items())
    state = dict(state or {})
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
        state["optimizer_step"] = optimizer.t
    rngs = {name: m.rng.bit_generator.state for name, m in model.named_modules() if hasattr(m, "rng")}
    state["dropout_rng"] = rngs
    save_tensors(path, tensors)
    save_state(path, state)
    (path / "config.txt").write_text(config_text, encoding="utf-8", newline="\n")
    return path


def load_checkpoint(path, model, optimizer=None) -> dict:
    """Restore ``model`` (and ``optimizer``) in place; return the saved state dict."""
    path = Path(path)
    tensors = load_tensors(path)
    state = load_state(path)
    model.load_state_dict(OrderedDict((k[6:], v) for k, v in tensors.items() if k.startswith("model.")))
    mods = dict(model.named_modules())
    for name, rng_state in state.get("dropout_rng", {}).items():
        mods[name].rng.bit_generator.state = rng_state
    if optimizer is not None:
        optimizer.load_state_tensors(tensors, state.get("optimizer_step", 0))
    return state


def read_config_text(path) -> str:
    return (Path(path) / "config.txt").read_text(encoding="utf-8")
