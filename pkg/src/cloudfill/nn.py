"""Parameter containers, the Adam optimizer, and flat binary checkpoints."""

from __future__ import annotations

import struct
from typing import Dict, Iterable, Optional

import numpy as np

from . import autodiff as ad

CHECKPOINT_MAGIC = b"PCCF"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = ad.Tensor(glorot(rng, in_dim, out_dim, (in_dim, out_dim), dtype), requires_grad=True)
        self.bias = ad.Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return x @ self.weight + self.bias

    def params(self, prefix: str) -> Dict[str, ad.Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}

    def zero_(self) -> None:
        self.weight.data[:] = 0.0
        self.bias.data[:] = 0.0


class Conv2d:
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, padding: int,
                 rng: np.random.Generator, dtype=np.float32):
        fan_in = in_ch * kernel * kernel
        fan_out = out_ch * kernel * kernel
        self.weight = ad.Tensor(glorot(rng, fan_in, fan_out, (out_ch, in_ch, kernel, kernel), dtype),
                                requires_grad=True)
        self.bias = ad.Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def params(self, prefix: str) -> Dict[str, ad.Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}

    def zero_(self) -> None:
        self.weight.data[:] = 0.0
        self.bias.data[:] = 0.0


class MLP:
    """Stack of Linear layers with ReLU between them (none after the last)."""

    def __init__(self, dims: Iterable[int], rng: np.random.Generator, dtype=np.float32):
        dims = list(dims)
        self.layers = [Linear(dims[i], dims[i + 1], rng, dtype) for i in range(len(dims) - 1)]

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x

    def params(self, prefix: str) -> Dict[str, ad.Tensor]:
        out: Dict[str, ad.Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"{prefix}.{i}"))
        return out


class Adam:
    def __init__(self, params: Dict[str, ad.Tensor], lr: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mh = m / b1t
            vh = v / b2t
            p.data -= (self.lr * mh / (np.sqrt(vh) + self.eps)).astype(p.data.dtype)

    def state_arrays(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([float(self.t)], dtype=np.float32)}
        for k in self.params:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, prefix: str, arrays: Dict[str, np.ndarray]) -> None:
        self.t = int(round(float(arrays[f"{prefix}.t"][0])))
        for k in self.params:
            self.m[k] = arrays[f"{prefix}.m.{k}"].reshape(self.m[k].shape).astype(self.m[k].dtype)
            self.v[k] = arrays[f"{prefix}.v.{k}"].reshape(self.v[k].shape).astype(self.v[k].dtype)


def save_checkpoint(path, arrays: Dict[str, np.ndarray]) -> None:
    """Write named arrays as: magic, version, then per entry
    (name length, name bytes, rank, dims, float32 little-endian data).

    Entries are written in sorted name order so identical states produce
    identical bytes.
    """
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    arrays: Dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        while True:
            head = f.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(dims)
            arrays[name] = data.copy()
    return arrays


def params_to_arrays(params: Dict[str, ad.Tensor]) -> Dict[str, np.ndarray]:
    return {k: p.data for k, p in params.items()}


def load_params(params: Dict[str, ad.Tensor], arrays: Dict[str, np.ndarray],
                strict: bool = True) -> None:
    for k, p in params.items():
        if k not in arrays:
            if strict:
                raise CheckpointError(f"checkpoint missing parameter {k}")
            continue
        arr = arrays[k]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CheckpointError(f"parameter {k}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
        p.data[:] = arr.astype(p.data.dtype)
