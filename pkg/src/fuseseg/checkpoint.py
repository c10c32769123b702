"""Checkpoint archive: named little-endian arrays plus a plain-text manifest.

A checkpoint is a single zip archive containing ``manifest.txt`` and one raw
binary blob per array. The manifest starts with ``key=value`` metadata lines
(model configuration, decoder kind, counters) followed by one
``name shape dtype`` line per stored array.
"""

from __future__ import annotations

import io
import zipfile
from pathlib import Path

import numpy as np
import torch

MAGIC = "fuseseg-checkpoint-v1"


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(meta or {})
    lines = [f"format={MAGIC}"]
    lines += [f"{k}={v}" for k, v in sorted(meta.items())]
    lines.append("---")
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            shape = ",".join(str(d) for d in arr.shape) or "scalar"
            lines.append(f"{name} {shape} {le.dtype.str}")
            zf.writestr(f"arrays/{name}.bin", le.tobytes(order="C"))
        zf.writestr("manifest.txt", "\n".join(lines) + "\n")


def load_arrays(path):
    path = Path(path)
    with zipfile.ZipFile(path, "r") as zf:
        manifest = zf.read("manifest.txt").decode()
        meta = {}
        arrays = {}
        entries = []
        in_header = True
        for line in manifest.splitlines():
            if not line.strip():
                continue
            if line == "---":
                in_header = False
                continue
            if in_header:
                k, v = line.split("=", 1)
                meta[k] = v
            else:
                name, shape, dtype = line.rsplit(" ", 2)
                entries.append((name, shape, dtype))
        if meta.get("format") != MAGIC:
            raise ValueError(f"not a checkpoint archive: {path}")
        for name, shape, dtype in entries:
            buf = zf.read(f"arrays/{name}.bin")
            arr = np.frombuffer(buf, dtype=np.dtype(dtype))
            if shape != "scalar":
                arr = arr.reshape([int(d) for d in shape.split(",")])
            else:
                arr = arr.reshape(())
            arrays[name] = arr.copy()
    return arrays, meta


def state_to_arrays(state_dict: dict) -> dict:
    return {k: v.detach().cpu().numpy() for k, v in state_dict.items()}


def arrays_to_state(arrays: dict) -> dict:
    return {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in arrays.items()}


def save_model(path, model, extra_meta: dict | None = None) -> None:
    meta = model.config.to_meta()
    meta["decoder"] = model.config.decoder
    meta.update(extra_meta or {})
    save_arrays(path, state_to_arrays(model.state_dict()), meta)


def load_model(path, model_cls=None, config_cls=None):
    """Rebuild a model from an archive; decoder kind must match the stored one."""
    from .model import ModelConfig, SegmentationModel

    model_cls = model_cls or SegmentationModel
    config_cls = config_cls or ModelConfig
    arrays, meta = load_arrays(path)
    config = config_cls.from_meta(meta)
    model = model_cls(config)
    model.load_state_dict(arrays_to_state(arrays))
    model.eval()
    return model, meta
