"""Binary tensor container shared by host checkpoints, IRM checkpoints and traces.

Layout::

    b"IRMLAB1\\n"
    uint64 little-endian header length
    UTF-8 JSON header {"meta": ..., "tensors": [{name, dtype, shape, offset}, ...]}
    zero padding, then each payload little-endian and 64-byte aligned

Offsets are absolute file positions. Checkpoints store float32; traces may
store float64 (``dtype`` names the payload type).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .host import Block, HostModel, InjectionPlan, ModelConfig
from .irm import IrmConfig, IrmNet
from .numerics import Tensor

MAGIC = b"IRMLAB1\n"
ALIGN = 64
_DTYPES = {"f4": "<f4", "f8": "<f8", "i8": "<i8"}


class CheckpointError(ValueError):
    pass


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path, meta: dict, tensors: dict[str, np.ndarray], dtype: str = "f4") -> None:
    """Write named arrays; ``dtype`` applies to float arrays, integer arrays keep i8."""
    entries, payloads = [], []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = "i8" if np.issubdtype(arr.dtype, np.integer) else dtype
        payloads.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": 0})
    # offsets depend on header length, which depends on the offsets' digits;
    # iterate until the layout is stable
    header_len = 0
    while True:
        pos = _align(len(MAGIC) + 8 + header_len)
        for e, blob in zip(entries, payloads):
            e["offset"] = pos
            pos = _align(pos + len(blob))
        header = canonical_json({"meta": meta, "tensors": entries})
        if len(header) == header_len:
            break
        header_len = len(header)
    out = bytearray(MAGIC + struct.pack("<Q", header_len) + header)
    for e, blob in zip(entries, payloads):
        out.extend(b"\0" * (e["offset"] - len(out)))
        out.extend(blob)
    out.extend(b"\0" * (_align(len(out)) - len(out)))
    Path(path).write_bytes(bytes(out))


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic bytes")
    (header_len,) = struct.unpack_from("<Q", raw, len(MAGIC))
    start = len(MAGIC) + 8
    header = json.loads(raw[start:start + header_len].decode("utf-8"))
    tensors = {}
    for e in header["tensors"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(np.float64) if e["dtype"] != "i8" else arr.astype(np.int64)
    return header["meta"], tensors


# ---------------------------------------------------------------- host


def save_host(model: HostModel, path) -> None:
    meta = {"kind": "host", "config": model.config.to_dict(), "eos_id": model.eos_id}
    write_container(path, meta, {n: p.data for n, p in model.named_parameters()})


def load_host(path) -> HostModel:
    meta, t = read_container(path)
    if meta.get("kind") != "host":
        raise CheckpointError(f"{path} is not a host checkpoint")
    cfg = ModelConfig.from_dict(meta["config"])
    blocks = [
        Block(**{name: Tensor(t[f"blocks.{i}.{name}"]) for name in Block.NAMES})
        for i in range(cfg.n_layers)
    ]
    return HostModel(cfg, Tensor(t["token_embedding"]), blocks, Tensor(t["final_norm_gain"]),
                     Tensor(t["lm_head"]), meta.get("eos_id"))


def round_trip_f32(model: HostModel | IrmNet) -> None:
    """Round every parameter to float32 precision in place (checkpoint storage)."""
    for _, p in model.named_parameters():
        p.data = p.data.astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------- irm


def save_irm(net: IrmNet, path) -> None:
    if net.host_hash is None:
        raise CheckpointError("IRM has no recorded host hash; train it against a host first")
    meta = {"kind": "irm", "config": net.config.to_dict(), "host_hash": net.host_hash}
    write_container(path, meta, {n: p.data for n, p in net.named_parameters()})


def load_irm(path, host: HostModel | None = None) -> IrmNet:
    """Load an IRM; with ``host`` given, refuse a host whose weight hash differs."""
    meta, t = read_container(path)
    if meta.get("kind") != "irm":
        raise CheckpointError(f"{path} is not an IRM checkpoint")
    cfg = IrmConfig.from_dict(meta["config"])
    if host is not None:
        actual = host.weight_hash()
        if actual != meta["host_hash"]:
            raise CheckpointError(
                f"IRM was trained against host {meta['host_hash'][:12]}, got {actual[:12]}")
        cfg.plan.validate(host.config.n_layers)
    net = IrmNet(cfg, [Tensor(t[f"layers.{i}.weight"]) for i in range(5)],
                 [Tensor(t[f"layers.{i}.bias"]) for i in range(5)], meta["host_hash"])
    return net


# ---------------------------------------------------------------- traces


def save_trace(path, tokens, trace, meta: dict | None = None) -> None:
    info = {"kind": "trace", "prompt_len": trace.prompt_len,
            "plan": list(trace.plan.block_indices) if trace.plan else None, **(meta or {})}
    tensors = {"tokens": np.asarray(tokens, dtype=np.int64),
               "post_attention": trace.post_attention(),
               "final_residual": np.stack([s.final_residual for s in trace.steps])}
    if trace.plan is not None:
        tensors["injections"] = trace.injections()
    write_container(path, info, tensors, dtype="f8")


def load_trace(path) -> tuple[dict, dict[str, np.ndarray]]:
    meta, t = read_container(path)
    if meta.get("kind") != "trace":
        raise CheckpointError(f"{path} is not a trace file")
    if meta.get("plan") is not None:
        meta["plan"] = InjectionPlan(tuple(meta["plan"]))
    return meta, t
