"""Dense tensor helpers on top of torch autograd.

torch supplies storage, eager evaluation and the reverse-mode tape. This
module adds what the learned modules need on top of it: shape and
finiteness guards, clamp-to-edge bilinear sampling that is differentiable
in both the feature values and the sample coordinates, a central
finite-difference gradient checker, and the parameter checkpoint format.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import MalformedHeader, NonFiniteValue, ShapeMismatch

Tensor = torch.Tensor

RUNTIME_DTYPE = torch.float32
TEST_DTYPE = torch.float64


@dataclass
class Parameter:
    tensor: Tensor
    name: str
    trainable: bool = True


def parameters_of(module: torch.nn.Module) -> list[Parameter]:
    return [Parameter(p, n, p.requires_grad) for n, p in module.named_parameters()]


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteValue(f"non-finite values in {what}")
    return x


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul: {tuple(a.shape)} @ {tuple(b.shape)}")
    return check_finite(a @ b, "matmul")


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d: input {tuple(x.shape)} vs weight {tuple(w.shape)}")
    return check_finite(F.conv2d(x, w, bias, stride=stride, padding=pad), "conv2d")


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def tanh(x: Tensor) -> Tensor:
    return torch.tanh(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return torch.softmax(x, dim=axis)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return check_finite(a + b, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return check_finite(a * b, "mul")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    ref = xs[0]
    for x in xs[1:]:
        if x.ndim != ref.ndim or any(
            s != r for i, (s, r) in enumerate(zip(x.shape, ref.shape)) if i != axis % ref.ndim
        ):
            raise ShapeMismatch("concat: operands differ outside the concatenation axis")
    return torch.cat(list(xs), dim=axis)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    return x.narrow(axis, start, stop - start)


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    return x.sum() if axis is None else x.sum(dim=axis)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    return x.mean() if axis is None else x.mean(dim=axis)


def variance(x: Tensor, axis: int = -1, keepdim: bool = False) -> Tensor:
    """Population variance (mean squared deviation)."""
    d = x - x.mean(dim=axis, keepdim=True)
    return (d * d).mean(dim=axis, keepdim=keepdim)


def bilinear_sample(feature: Tensor, points: Tensor) -> Tensor:
    """Sample a channel-last feature map at sub-pixel ``(u, v)`` points.

    ``feature`` is (H, W, C) or batched (B, H, W, C); ``points`` is
    (..., 2) or (B, ..., 2) respectively. Coordinates are clamped to the
    image (clamp-to-edge), so samples outside the border repeat the edge.
    """
    if not torch.isfinite(points).all():
        raise NonFiniteValue("non-finite sample coordinates")
    batched = feature.ndim == 4
    if not batched:
        if feature.ndim != 3:
            raise ShapeMismatch(f"bilinear_sample: feature must be HxWxC, got {tuple(feature.shape)}")
        feature, points = feature[None], points[None]
    if points.shape[-1] != 2 or points.shape[0] != feature.shape[0]:
        raise ShapeMismatch("bilinear_sample: points must be (B, ..., 2)")
    B, H, W, C = feature.shape
    out_shape = points.shape[:-1]
    pts = points.reshape(B, -1, 2)
    x = pts[..., 0].clamp(0, W - 1)
    y = pts[..., 1].clamp(0, H - 1)
    x0 = x.detach().floor().clamp(max=max(W - 2, 0))
    y0 = y.detach().floor().clamp(max=max(H - 2, 0))
    wx = (x - x0)[..., None]
    wy = (y - y0)[..., None]
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)
    flat = feature.reshape(B, H * W, C)

    def gather(yy, xx):
        idx = (yy * W + xx)[..., None].expand(-1, -1, C)
        return torch.gather(flat, 1, idx)

    out = (
        gather(y0, x0) * (1 - wx) * (1 - wy)
        + gather(y0, x1) * wx * (1 - wy)
        + gather(y1, x0) * (1 - wx) * wy
        + gather(y1, x1) * wx * wy
    )
    out = out.reshape(*out_shape, C)
    return out if batched else out[0]


def backward(loss: Tensor):
    """Reverse-mode accumulation from a scalar loss into leaf ``.grad`` buffers."""
    if loss.numel() != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    check_finite(loss.detach(), "loss")
    loss.backward()


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    seed: int = 0,
    wrt: Sequence[int] | None = None,
) -> float:
    """Largest analytic-vs-central-difference gradient discrepancy.

    ``fn`` maps the inputs to a tensor, which is contracted with a fixed
    random tensor to obtain a scalar. The error of each input is
    ``max|g_analytic - g_numeric| / max|g_numeric|``; the maximum over the
    checked inputs is returned. Inputs should be float64.
    """
    wrt = range(len(inputs)) if wrt is None else wrt
    leaves = [x.detach().clone().requires_grad_(i in wrt) for i, x in enumerate(inputs)]
    gen = torch.Generator().manual_seed(seed)
    out = fn(*leaves)
    proj = torch.randn(out.shape, generator=gen, dtype=out.dtype)

    def scalar(*xs):
        return (fn(*xs) * proj).sum()

    loss = scalar(*leaves)
    grads = torch.autograd.grad(loss, [leaves[i] for i in wrt], allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for g, i in zip(grads, wrt):
            x = leaves[i]
            g = torch.zeros_like(x) if g is None else g
            num = torch.zeros_like(x)
            flat = x.view(-1)
            nflat = num.view(-1)
            for k in range(flat.numel()):
                old = flat[k].item()
                flat[k] = old + eps
                plus = scalar(*leaves).item()
                flat[k] = old - eps
                minus = scalar(*leaves).item()
                flat[k] = old
                nflat[k] = (plus - minus) / (2 * eps)
            scale = max(num.abs().max().item(), 1e-12)
            worst = max(worst, (g - num).abs().max().item() / scale)
    return worst


# ---------------------------------------------------------------------------
# checkpoint container

MAGIC = b"RFMVSCKP"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def save_checkpoint(path, entries: Mapping[str, object], keep_dtype: bool = False):
    """Write named arrays to ``path``.

    Values are stored as 32-bit floats unless ``keep_dtype`` is set, in which
    case float64 and int64 arrays keep their width (used for exact resume).
    """
    body = bytearray()
    body += MAGIC
    body += struct.pack("<II", VERSION, len(entries))
    for name, value in entries.items():
        arr = _as_array(value)
        if not keep_dtype or arr.dtype not in _CODES:
            arr = arr.astype(np.float32)
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack("<BB", code, arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    body += hashlib.sha256(body).digest()
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 + 32 or data[: len(MAGIC)] != MAGIC:
        raise MalformedHeader("missing checkpoint magic", offset=0)
    payload, digest = data[:-32], data[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise MalformedHeader("checksum mismatch", offset=len(payload))
    off = len(MAGIC)
    version, count = struct.unpack_from("<II", payload, off)
    if version != VERSION:
        raise MalformedHeader(f"unsupported checkpoint version {version}", offset=off)
    off += 8
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", payload, off)
            off += 2
            name = payload[off : off + n].decode("utf-8")
            off += n
            code, ndim = struct.unpack_from("<BB", payload, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", payload, off)
            off += 4 * ndim
            dt = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + size > len(payload):
                raise MalformedHeader("truncated entry", offset=off)
            out[name] = np.frombuffer(payload, dtype=dt, count=size // dt.itemsize, offset=off).reshape(shape).copy()
            off += size
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise MalformedHeader(f"corrupt entry table ({exc})", offset=off) from None
    if off != len(payload):
        raise MalformedHeader("trailing bytes after entries", offset=off)
    return out
