"""Binary tensor container and model checkpoints.

Layout (little-endian)::

    b"SDPC" | u32 version | u32 n | n bytes UTF-8 "key=value" lines
    then for each tensor listed in the ``tensors`` key:
    u32 rank | u32 dims[rank] | f32 payload (C order)
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch

from .core import ConvDictionary, LayerConfig, NetworkConfig
from .data import WhiteningOperator
from .errors import DataError

MAGIC = b"SDPC"
VERSION = 1


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    s = str(value)
    if "\n" in s:
        raise ValueError(f"config values cannot contain newlines: {value!r}")
    return s


def write_container(path, config: Mapping[str, object], tensors: Mapping[str, np.ndarray]) -> None:
    """Write tensors (stored as float32) with a flat key=value config block."""
    for name in tensors:
        if "," in name or not name:
            raise ValueError(f"invalid tensor name {name!r}")
    meta = {str(k): _fmt(v) for k, v in config.items()}
    meta["tensors"] = ",".join(tensors)
    text = "".join(f"{k}={meta[k]}\n" for k in sorted(meta)).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text]
    for name, arr in tensors.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(a.tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def read_container(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Inverse of :func:`write_container`; raises ``DataError`` on malformed files."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if buf[:4] != MAGIC:
        raise DataError(f"{path}: not an SDPC container")
    try:
        version, n = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        pos = 12 + n
        text = buf[12:pos].decode("utf-8")
        config = dict(line.split("=", 1) for line in text.splitlines() if line)
        names = [t for t in config.get("tensors", "").split(",") if t]
        tensors = {}
        for name in names:
            (rank,) = struct.unpack_from("<I", buf, pos)
            dims = struct.unpack_from(f"<{rank}I", buf, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(buf):
                raise DataError(f"{path}: truncated tensor {name!r} at byte offset {pos}")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos += 4 * count
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise DataError(f"{path}: malformed container ({exc})") from exc
    if pos != len(buf):
        raise DataError(f"{path}: {len(buf) - pos} trailing bytes")
    return config, tensors


@dataclass
class Checkpoint:
    """Network, training metadata and preprocessing statistics."""

    net: NetworkConfig
    epoch: int = 0
    seed: int = 0
    losses: dict[str, float] = field(default_factory=dict)
    whitening: WhiteningOperator | None = None
    meta: dict[str, str] = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    net = ckpt.net
    config: dict[str, object] = {
        "n_layers": net.n_layers,
        "k_fb": float(net.k_fb),
        "t_stab": float(net.t_stab),
        "max_iters": int(net.max_iters),
        "epoch": int(ckpt.epoch),
        "seed": int(ckpt.seed),
    }
    tensors: dict[str, np.ndarray] = {}
    for i, layer in enumerate(net.layers, start=1):
        config[f"layer{i}.lam"] = float(layer.lam)
        config[f"layer{i}.stride"] = "x".join(map(str, layer.dictionary.stride))
        tensors[f"dictionary{i}"] = layer.dictionary.atoms.detach().cpu().numpy()
    for k, v in ckpt.losses.items():
        config[f"loss.{k}"] = float(v)
    for k, v in ckpt.meta.items():
        config[f"meta.{k}"] = v
    w = ckpt.whitening
    if w is not None:
        config["whitening.epsilon"] = float(w.epsilon)
        config["whitening.patch_size"] = "" if w.patch_size is None else int(w.patch_size)
        config["whitening.channels"] = "" if w.channels is None else int(w.channels)
        tensors["whitening.mean"] = w.mean
        tensors["whitening.matrix"] = w.matrix
    write_container(path, config, tensors)


def load_checkpoint(path, dtype=torch.float32) -> Checkpoint:
    config, tensors = read_container(path)
    try:
        n = int(config["n_layers"])
        layers = []
        for i in range(1, n + 1):
            stride = tuple(int(s) for s in config[f"layer{i}.stride"].split("x"))
            atoms = torch.as_tensor(tensors[f"dictionary{i}"]).to(dtype)
            layers.append(LayerConfig(ConvDictionary(atoms, stride), float(config[f"layer{i}.lam"])))
        net = NetworkConfig(
            layers,
            k_fb=float(config["k_fb"]),
            t_stab=float(config["t_stab"]),
            max_iters=int(config["max_iters"]),
        )
        whitening = None
        if "whitening.mean" in tensors:
            ps, ch = config["whitening.patch_size"], config["whitening.channels"]
            whitening = WhiteningOperator(
                tensors["whitening.mean"].astype(np.float64),
                tensors["whitening.matrix"].astype(np.float64),
                float(config["whitening.epsilon"]),
                int(ps) if ps else None,
                int(ch) if ch else None,
            )
        losses = {k[5:]: float(v) for k, v in config.items() if k.startswith("loss.")}
        meta = {k[5:]: v for k, v in config.items() if k.startswith("meta.")}
        return Checkpoint(net, int(config["epoch"]), int(config["seed"]), losses, whitening, meta)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: incomplete checkpoint ({exc})") from exc
