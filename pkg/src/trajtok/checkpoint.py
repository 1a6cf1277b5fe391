"""Self-describing binary checkpoints.

Layout: 8-byte magic, uint32 version, uint32 header length, a JSON header
(config, step, extra metadata, tensor index), then the tensor payload as
concatenated row-major little-endian float64 buffers. Serialization is
deterministic, so saving what was just loaded reproduces the file byte for
byte.
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

MAGIC = b"TRAJTOK\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, config: dict, tensors: dict, step: int = 0, extra: dict = None) -> None:
    arrays = {}
    for name, t in tensors.items():
        a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        if a.dtype != np.float64:
            raise CheckpointError(f"tensor {name!r} must be float64, got {a.dtype}")
        # ascontiguousarray would silently promote 0-d arrays to 1-d
        arrays[name] = a if a.flags.c_contiguous else np.ascontiguousarray(a)

    index = []
    offset = 0
    for name in sorted(arrays):
        a = arrays[name]
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.nbytes
    header = {
        "config": config,
        "step": int(step),
        "extra": extra or {},
        "tensors": index,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for name in sorted(arrays):
            fh.write(arrays[name].astype("<f8", copy=False).tobytes())


def load_checkpoint(path) -> tuple:
    """Returns (config, tensors, step, extra); tensors are float64 ndarrays."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + 8
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    payload = raw[start + hlen :]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        lo, hi = entry["offset"], entry["offset"] + 8 * n
        if hi > len(payload):
            raise CheckpointError(f"tensor {entry['name']!r} extends past end of file")
        buf = np.frombuffer(payload[lo:hi], dtype="<f8")
        tensors[entry["name"]] = buf.reshape(shape).astype(np.float64)
    return header["config"], tensors, header["step"], header["extra"]


def save_model(path, model, step: int = 0, extra: dict = None, moments: dict = None) -> None:
    """Persist a model (and optionally optimizer moments) to one container."""
    tensors = {f"model.{n}": p for n, p in model.named_parameters()}
    if moments:
        for name, t in moments.items():
            tensors[f"opt.{name}"] = t
    save_checkpoint(path, model.cfg.to_dict(), tensors, step=step, extra=extra)


def load_model(path):
    """Rebuild the model from a container; returns (model, step, extra, moments)."""
    from .model import ModelConfig, TinyVLM

    config, tensors, step, extra = load_checkpoint(path)
    model = TinyVLM(ModelConfig.from_dict(config))
    params = dict(model.named_parameters())
    saved = {k[len("model.") :] for k in tensors if k.startswith("model.")}
    if saved != set(params):
        missing = sorted(set(params) - saved)[:3]
        surplus = sorted(saved - set(params))[:3]
        raise CheckpointError(f"parameter names do not match (missing {missing}, surplus {surplus})")
    with torch.no_grad():
        for name, p in params.items():
            p.copy_(torch.from_numpy(tensors[f"model.{name}"]))
    moments = {k[len("opt.") :]: v for k, v in tensors.items() if k.startswith("opt.")}
    return model, step, extra, moments
