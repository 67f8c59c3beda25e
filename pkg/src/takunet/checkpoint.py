"""
"TKCK" checkpoint container::

    magic  b"TKCK"                      4 bytes
    version                             u32
    header length, header UTF-8 text    u32 + bytes
    tensor count                        u32
    records: name length u16, UTF-8 name, TKTN tensor

The header is the canonical ``key=value`` text of the architecture config
followed by an ``epoch=`` line. Optimizer buffers travel as ordinary tensors
named ``opt.v.<param>`` and ``opt.m.<param>``. All integers little-endian.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import BinaryIO, Dict, Optional, Union

import numpy as np

from .config import ArchConfig, arch_from_kv, parse_kv_text, to_kv_text
from .model import TakuNet
from .tensor import Precision, read_tensor, write_tensor

CHECKPOINT_MAGIC = b"TKCK"
CHECKPOINT_VERSION = 1
OPT_PREFIXES = ("opt.v.", "opt.m.")

PathLike = Union[str, os.PathLike]


@dataclass
class Checkpoint:
    arch: ArchConfig
    tensors: "OrderedDict[str, np.ndarray]"
    epoch: int = 0
    extra: Dict[str, str] = field(default_factory=dict)

    def model_state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v) for k, v in self.tensors.items() if not k.startswith("opt."))

    def optimizer_state(self) -> Dict[str, Dict[str, np.ndarray]]:
        out: Dict[str, Dict[str, np.ndarray]] = {"v": {}, "m": {}}
        for k, v in self.tensors.items():
            for prefix in OPT_PREFIXES:
                if k.startswith(prefix):
                    out[prefix[4]][k[len(prefix):]] = v
        return out


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise EOFError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def write_checkpoint(f: BinaryIO, ckpt: Checkpoint) -> None:
    header = to_kv_text(ckpt.arch) + f"epoch={int(ckpt.epoch)}\n"
    header += "".join(f"{k}={v}\n" for k, v in sorted(ckpt.extra.items()))
    raw = header.encode("utf-8")
    f.write(CHECKPOINT_MAGIC)
    f.write(struct.pack("<II", CHECKPOINT_VERSION, len(raw)))
    f.write(raw)
    f.write(struct.pack("<I", len(ckpt.tensors)))
    for name, value in ckpt.tensors.items():
        bname = name.encode("utf-8")
        if len(bname) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        f.write(struct.pack("<H", len(bname)))
        f.write(bname)
        write_tensor(f, value)


def read_checkpoint(f: BinaryIO) -> Checkpoint:
    magic = _read_exact(f, 4)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    version, hlen = struct.unpack("<II", _read_exact(f, 8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    values = parse_kv_text(_read_exact(f, hlen).decode("utf-8"))
    epoch = int(values.pop("epoch", "0"))
    arch_keys = {k: v for k, v in values.items() if k in ArchConfig.__dataclass_fields__}
    extra = {k: v for k, v in values.items() if k not in arch_keys}
    arch = arch_from_kv(arch_keys)
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(f, 2))
        name = _read_exact(f, nlen).decode("utf-8")
        if name in tensors:
            raise ValueError(f"duplicate tensor {name!r} in checkpoint")
        tensors[name] = read_tensor(f)
    return Checkpoint(arch, tensors, epoch, extra)


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(model: TakuNet, epoch: int = 0, optimizer=None, extra: Optional[Dict[str, str]] = None) -> bytes:
    tensors = model.state_dict()
    if optimizer is not None:
        for name in tensors.copy():
            if name in optimizer.v:
                tensors[f"opt.v.{name}"] = optimizer.v[name]
                tensors[f"opt.m.{name}"] = optimizer.m[name]
    arch = model.cfg.replace(precision=model.precision)
    buf = io.BytesIO()
    write_checkpoint(buf, Checkpoint(arch, tensors, epoch, dict(extra or {})))
    return buf.getvalue()


def save_checkpoint(model: TakuNet, path: PathLike, epoch: int = 0, optimizer=None,
                    extra: Optional[Dict[str, str]] = None) -> None:
    atomic_write_bytes(path, checkpoint_bytes(model, epoch, optimizer, extra))


def load_checkpoint_file(path: PathLike) -> Checkpoint:
    with open(path, "rb") as f:
        return read_checkpoint(f)


def model_from_checkpoint(ckpt: Checkpoint, precision=None) -> TakuNet:
    """Rebuild the model; unknown tensor names are an error.

    Loading at a wider precision than stored is lossless.
    """
    stored = Precision.of(ckpt.arch.precision)
    model = TakuNet(ckpt.arch.replace(precision=Precision.F32))
    known = set(model.state_dict())
    state = ckpt.model_state()
    unknown = sorted(set(state) - known)
    if unknown:
        raise KeyError(f"unknown tensor names in checkpoint: {unknown}")
    model.set_precision(stored)
    model.load_state_dict(state)
    if precision is not None:
        model.set_precision(precision)
    return model


def load_checkpoint(path: PathLike, precision=None) -> TakuNet:
    return model_from_checkpoint(load_checkpoint_file(path), precision)
