"""Binary checkpoint files.

Layout (little-endian)::

    b"DSTK"  u16 version (=1)
    u32 spec_len, spec text (canonical JSON, UTF-8)
    u32 epoch, f32 val_accuracy, 32-byte SHA-256 of the spec text
    u8 has_optimizer [u64 step, f64 beta1, f64 beta2, f64 epsilon]
    u32 tensor_count
    tensor_count x (u16 name_len, name, u8 rank, rank x u32 dim, f32 payload)

Model tensors come first in spec order, then the Adam moments named
``adam.m/<param>`` and ``adam.v/<param>``.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .models import ModelSpec, ModelWeights
from .optim import AdamState
from .tensor import Tensor

MAGIC = b"DSTK"
VERSION = 1
_OPT_HEADER = struct.Struct("<Qddd")


def _tensor_record(name: str, array: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    header = struct.pack("<H", len(raw)) + raw + struct.pack("<B", array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype="<f4").tobytes()


def encode_checkpoint(spec: ModelSpec, weights: ModelWeights, optimizer_state=None) -> bytes:
    spec_blob = spec.to_text().encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(spec_blob)), spec_blob]
    parts.append(struct.pack("<If", weights.epoch, weights.val_accuracy))
    parts.append(spec.digest())
    tensors = [(name, t.data) for name, t in weights.tensors.items()]
    if optimizer_state is None:
        parts.append(b"\x00")
    else:
        s = optimizer_state
        parts.append(b"\x01" + _OPT_HEADER.pack(s.t, s.beta1, s.beta2, s.epsilon))
        for name in s.m:
            tensors.append((f"adam.m/{name}", s.m[name]))
            tensors.append((f"adam.v/{name}", s.v[name]))
    parts.append(struct.pack("<I", len(tensors)))
    parts.extend(_tensor_record(name, array) for name, array in tensors)
    return b"".join(parts)


def save_checkpoint(spec: ModelSpec, weights: ModelWeights, optimizer_state, path) -> Path:
    """Write a checkpoint atomically (temp file + rename)."""
    path = Path(path)
    blob = encode_checkpoint(spec, weights, optimizer_state)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write checkpoint {path}: {exc.strerror}") from exc
    return path


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("corrupt checkpoint: truncated file")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        st = struct.Struct("<" + fmt)
        return st.unpack(self.take(st.size))


def decode_checkpoint(blob: bytes, expected_spec: ModelSpec | None = None):
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    r = _Reader(blob)
    r.take(4)
    (version,) = r.unpack("H")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    (spec_len,) = r.unpack("I")
    spec_blob = r.take(spec_len)
    epoch, val_accuracy = r.unpack("If")
    digest = r.take(32)
    try:
        spec = ModelSpec.from_text(spec_blob.decode("utf-8"))
    except (UnicodeDecodeError, ValueError, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint: unreadable spec ({exc})") from None
    if spec.digest() != digest:
        raise CheckpointError("corrupt checkpoint: spec hash does not match stored spec")
    if expected_spec is not None and expected_spec.digest() != digest:
        raise CheckpointError(
            f"checkpoint was written for spec {spec.name!r} with a different hash "
            f"than the expected {expected_spec.name!r}"
        )
    (has_opt,) = r.unpack("B")
    opt_header = _OPT_HEADER.unpack(r.take(_OPT_HEADER.size)) if has_opt else None
    (count,) = r.unpack("I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("B")
        dims = r.unpack(f"{rank}I") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        payload = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
        tensors[name] = payload.astype(np.float32)
    if r.pos != len(blob):
        raise CheckpointError("corrupt checkpoint: trailing bytes")

    state = None
    if opt_header is not None:
        t, b1, b2, eps = opt_header
        state = AdamState(t=t, beta1=b1, beta2=b2, epsilon=eps)
    model_tensors = {}
    for name, array in tensors.items():
        if name.startswith("adam.m/") and state is not None:
            state.m[name[7:]] = array
        elif name.startswith("adam.v/") and state is not None:
            state.v[name[7:]] = array
        else:
            trainable = not name.endswith(("running_mean", "running_var"))
            model_tensors[name] = Tensor(array, requires_grad=trainable, name=name)
    weights = ModelWeights(model_tensors, digest, epoch, float(val_accuracy))
    metadata = {"epoch": epoch, "val_accuracy": float(val_accuracy), "spec_hash": digest.hex()}
    return spec, weights, state, metadata


def load_checkpoint(path, expected_spec: ModelSpec | None = None):
    """Inverse of :func:`save_checkpoint`: ``(spec, weights, optimizer_state, metadata)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    return decode_checkpoint(blob, expected_spec)

