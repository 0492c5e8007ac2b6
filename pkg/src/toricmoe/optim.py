"""Parameters, AdamW with cosine decay, and the named-tensor checkpoint container."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from toricmoe.autodiff import Tensor, parameter

CKPT_MAGIC = b"TQCK"
CKPT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient is NaN/inf; carries where it happened."""


class ModelParams:
    """Ordered, uniquely named collection of learnable tensors."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = parameter(data, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def count(self) -> int:
        return int(sum(p.data.size for p in self))

    def zero_grad(self) -> None:
        for p in self:
            p.grad = None

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self._params.items())

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, p in self._params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every entry lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    """Cosine decay from ``lr_max`` at step 0 to ``lr_min`` at ``total``."""
    if lr_max <= 0 or lr_min <= 0:
        raise ValueError("learning-rate bounds must be positive")
    if lr_min > lr_max:
        raise ValueError(f"lr_min ({lr_min}) exceeds lr_max ({lr_max})")
    if total <= 0:
        return lr_max
    frac = min(max(step / total, 0.0), 1.0)
    if frac == 1.0:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


def global_norm(params: ModelParams) -> float:
    return math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))


def clip_grad_norm(params: ModelParams, max_norm: float) -> float:
    norm = global_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


class AdamW:
    """Adam with decoupled weight decay (applied to matrices, not to vectors)."""

    def __init__(self, params: ModelParams, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = OrderedDict((name, np.zeros_like(p.data)) for name, p in params.items())
        self.v = OrderedDict((name, np.zeros_like(p.data)) for name, p in params.items())

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            if self.weight_decay and p.ndim >= 2:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v.copy() for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v.copy() for k, v in self.v.items()})
        return out

    def load_state(self, tensors: Mapping[str, np.ndarray], t: int) -> None:
        for k in self.m:
            self.m[k] = np.asarray(tensors[f"adam.m.{k}"], dtype=np.float64).copy()
            self.v[k] = np.asarray(tensors[f"adam.v.{k}"], dtype=np.float64).copy()
        self.t = int(t)


# checkpoint container ----------------------------------------------------------
#
# layout: magic(4) version(u16) meta_len(u32) meta_json  n_tensors(u32)
#         { name_len(u16) name  ndim(u8) shape(u32 * ndim)  float64-le payload } *
#         sha256 of everything before it (32 bytes)

def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray], meta: dict) -> str:
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION)]
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    parts += [struct.pack("<I", len(meta_blob)), meta_blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.array(arr, dtype="<f8", order="C")  # keeps 0-d arrays 0-d
        raw = name.encode()
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    digest = hashlib.sha256(body).digest()
    try:
        Path(path).write_bytes(body + digest)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
    return digest.hex()


def load_tensors(path: str | Path) -> tuple["OrderedDict[str, np.ndarray]", dict, str]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    body, digest = blob[:-32], blob[-32:]
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    if hashlib.sha256(body).digest() != digest:
        raise ValueError(f"{path}: content hash mismatch (file corrupted)")
    off = 4
    (version,) = struct.unpack_from("<H", body, off)
    off += 2
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", body, off)
    off += 4
    meta = json.loads(body[off:off + meta_len])
    off += meta_len
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(body, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    return tensors, meta, digest.hex()
