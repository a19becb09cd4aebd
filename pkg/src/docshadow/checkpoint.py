"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"LPIOA1"  u64 config fingerprint
    repeated until EOF:
        u32 name length, name (utf-8), 4 x u32 shape, float32 payload

Tensors with fewer than four dims are stored with leading ones.  Adam state
rides along as extra records named ``adam.m/<param>``, ``adam.v/<param>`` and
``adam.t``.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .models import ModelConfig, ModelParams, config_fingerprint, init_params
from .tensor import AdamState, Tensor

MAGIC = b"LPIOA1"
_M, _V, _T = "adam.m/", "adam.v/", "adam.t"


def _pack(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim > 4:
        raise CheckpointError(f"tensor {name} has more than 4 dims")
    shape = (1,) * (4 - arr.ndim) + arr.shape
    raw = name.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw + struct.pack("<4I", *shape) + arr.tobytes(order="C")


def write_records(path, fingerprint: int, records) -> None:
    chunks = [MAGIC, struct.pack("<Q", fingerprint)]
    chunks += [_pack(name, arr) for name, arr in records]
    Path(path).write_bytes(b"".join(chunks))


def read_records(path):
    """Return ``(fingerprint, OrderedDict[name, 4-D float32 array])``."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(buf) < len(MAGIC) + 8:
        raise CheckpointError("file too short for header", len(buf))
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic string", 0)
    (fingerprint,) = struct.unpack_from("<Q", buf, len(MAGIC))
    pos = len(MAGIC) + 8
    records = OrderedDict()
    while pos < len(buf):
        start = pos
        if pos + 4 > len(buf):
            raise CheckpointError("truncated record name length", pos)
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + n + 16 > len(buf):
            raise CheckpointError("truncated record header", start)
        try:
            name = buf[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("record name is not utf-8", pos) from exc
        pos += n
        shape = struct.unpack_from("<4I", buf, pos)
        pos += 16
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise CheckpointError(f"truncated payload for {name!r}", pos)
        if name in records:
            raise CheckpointError(f"duplicate record {name!r}", start)
        records[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    return fingerprint, records


def save_checkpoint(path, params: ModelParams, adam: AdamState | None = None) -> None:
    records = [(name, t.data) for name, t in params.items()]
    if adam is not None:
        records += [(_M + n, adam.m[n]) for n in params if n in adam.m]
        records += [(_V + n, adam.v[n]) for n in params if n in adam.v]
        records.append((_T, np.array([adam.t], dtype=np.float32)))
    write_records(path, params.fingerprint, records)


def load_checkpoint(path, config: ModelConfig):
    """Load parameters (and Adam state, if stored) for ``config``.

    Raises :class:`CheckpointError` on fingerprint mismatch, missing or
    unexpected tensors, or element-count mismatches.
    """
    fingerprint, records = read_records(path)
    expected = config_fingerprint(config)
    if fingerprint != expected:
        raise CheckpointError(f"config fingerprint mismatch: file {fingerprint:#018x}, expected {expected:#018x}")
    template = init_params(config, seed=0)
    tensors = OrderedDict()
    for name, t in template.items():
        if name not in records:
            raise CheckpointError(f"checkpoint lacks parameter {name!r}")
        arr = records.pop(name)
        if arr.size != t.size:
            raise CheckpointError(f"parameter {name!r} has {arr.size} elements, expected {t.size}")
        tensors[name] = Tensor(arr.reshape(t.shape).copy(), requires_grad=True, name=name)
    adam = None
    if _T in records:
        adam = AdamState(t=int(records.pop(_T).reshape(-1)[0]))
        for prefix, store in ((_M, adam.m), (_V, adam.v)):
            for key in [k for k in records if k.startswith(prefix)]:
                pname = key[len(prefix):]
                if pname not in tensors:
                    raise CheckpointError(f"optimizer state for unknown parameter {pname!r}")
                store[pname] = records.pop(key).reshape(tensors[pname].shape).copy()
    if records:
        raise CheckpointError(f"unexpected records: {sorted(records)[:5]}")
    return ModelParams(tensors, fingerprint), adam


def checkpoint_element_count(path) -> int:
    """Total float count of parameter records (optimizer records excluded)."""
    _, records = read_records(path)
    return int(sum(a.size for n, a in records.items() if not n.startswith(("adam.",))))
