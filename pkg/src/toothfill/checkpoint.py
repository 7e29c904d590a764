"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"TFCK"
    4       4     u32 format version (1)
    8       4     u32 header length H in bytes
    12      H     UTF-8 JSON header (sorted keys)
    12+H    ...   raw tensor data, little-endian, C order, back to back

The header holds the network config (``unet``), guidance settings, free-form
``meta`` and a ``tensors`` list of ``{name, dtype, shape, offset, nbytes}``
entries whose offsets are relative to the start of the data block. The
schedule betas are stored as the float64 tensor ``schedule.betas``; network
parameters and buffers are stored under ``model.<state-dict key>``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .denoiser import DenoiserUNet, UNetConfig
from .diffusion import GuidanceConfig, NoiseSchedule
from .errors import DataIOError

MAGIC = b"TFCK"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


@dataclass
class Checkpoint:
    network: DenoiserUNet
    schedule: NoiseSchedule
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    meta: dict = field(default_factory=dict)


def _tensors(ckpt: Checkpoint):
    yield "schedule.betas", np.asarray(ckpt.schedule.betas, dtype="<f8")
    for name, t in ckpt.network.state_dict().items():
        arr = t.detach().cpu().numpy()
        yield f"model.{name}", arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(path, network, schedule, guidance: GuidanceConfig | None = None, meta=None):
    ckpt = Checkpoint(network, schedule, guidance or GuidanceConfig(), dict(meta or {}))
    entries, blobs, offset = [], [], 0
    for name, arr in _tensors(ckpt):
        data = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "unet": network.config.to_dict(),
        "guidance": asdict(ckpt.guidance),
        "meta": ckpt.meta,
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
            fh.write(hbytes)
            for b in blobs:
                fh.write(b)
    except OSError as exc:
        raise DataIOError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _PREFIX.size:
        raise DataIOError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise DataIOError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise DataIOError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataIOError(f"{path}: corrupt header: {exc}") from exc
    base = _PREFIX.size + hlen
    arrays = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(raw):
            raise DataIOError(f"{path}: tensor {e['name']} runs past end of file")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=start).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    network = DenoiserUNet(UNetConfig.from_dict(header["unet"]))
    state = {k[len("model."):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("model.")}
    network.load_state_dict(state)
    schedule = NoiseSchedule(arrays["schedule.betas"])
    return Checkpoint(network, schedule, GuidanceConfig(**header["guidance"]), header["meta"])
