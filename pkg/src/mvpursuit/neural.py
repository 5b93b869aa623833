"""Small float64 network substrate: dense/conv/attention layers with hand-written backward passes."""

from __future__ import annotations

import io
import json
import math
import struct
from pathlib import Path

import numpy as np

_MASK_LOGIT = -1e30


class NetParams:
    """Ordered named tensors backed by one flat float64 buffer.

    Whole-network updates (SGD, soft target updates) touch ``flat`` in a
    single vectorised operation; named access returns views into it.
    """

    __slots__ = ("specs", "flat", "_views")

    def __init__(self, specs, flat=None):
        self.specs = tuple((str(n), tuple(int(d) for d in s)) for n, s in specs)
        size = sum(int(np.prod(s)) for _, s in self.specs)
        if flat is None:
            flat = np.zeros(size, dtype=np.float64)
        elif flat.shape != (size,):
            raise ValueError(f"flat buffer has shape {flat.shape}, expected ({size},)")
        self.flat = flat
        self._views = {}
        pos = 0
        for name, shape in self.specs:
            n = int(np.prod(shape))
            self._views[name] = flat[pos:pos + n].reshape(shape)
            pos += n

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def __setitem__(self, name: str, value) -> None:
        self._views[name][...] = value

    def __contains__(self, name):
        return name in self._views

    def __len__(self):
        return len(self.specs)

    def keys(self):
        return [n for n, _ in self.specs]

    def items(self):
        return [(n, self._views[n]) for n, _ in self.specs]

    def copy(self) -> "NetParams":
        return NetParams(self.specs, self.flat.copy())

    def zeros_like(self) -> "NetParams":
        return NetParams(self.specs)

    def same_layout(self, other: "NetParams") -> bool:
        return self.specs == other.specs

    def __repr__(self):
        return f"NetParams({', '.join(f'{n}{list(s)}' for n, s in self.specs)})"


def uniform_init(specs, fan_in: dict, rng: np.random.Generator) -> NetParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every tensor."""
    p = NetParams(specs)
    for name, view in p.items():
        bound = 1.0 / math.sqrt(fan_in[name])
        view[...] = rng.uniform(-bound, bound, size=view.shape)
    return p


def sgd_step(params: NetParams, grads: NetParams, lr: float) -> NetParams:
    """p <- p - lr * g, in place."""
    if not params.same_layout(grads):
        raise ValueError("gradient layout does not match parameters")
    params.flat -= lr * grads.flat
    return params


def clip_grad_norm(grads: NetParams, max_norm: float | None) -> NetParams:
    """Rescale grads in place so their global L2 norm is at most max_norm (None disables)."""
    if max_norm is not None:
        norm = float(np.linalg.norm(grads.flat))
        if norm > max_norm:
            grads.flat *= max_norm / norm
    return grads


def relu(x):
    return np.maximum(x, 0.0)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, grad_y: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (grad_y - np.sum(grad_y * y, axis=axis, keepdims=True))


class MLP:
    """Dense stack with ReLU between layers and a linear output layer."""

    def __init__(self, sizes, prefix: str = "dense"):
        if len(sizes) < 2:
            raise ValueError("MLP needs input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.prefix = prefix
        self._names = [(f"{prefix}{i}.weight", f"{prefix}{i}.bias") for i in range(len(self.sizes) - 1)]

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def param_specs(self):
        specs = []
        for i, (wn, bn) in enumerate(self._names):
            specs.append((wn, (self.sizes[i], self.sizes[i + 1])))
            specs.append((bn, (self.sizes[i + 1],)))
        return specs

    def init(self, rng: np.random.Generator) -> NetParams:
        fan = {}
        for i, (wn, bn) in enumerate(self._names):
            fan[wn] = fan[bn] = self.sizes[i]
        return uniform_init(self.param_specs(), fan, rng)

    def forward(self, params: NetParams, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"input width {x.shape[-1]} does not match layer width {self.sizes[0]}")
        acts = [x]
        h = x
        last = self.n_layers - 1
        for i, (wn, bn) in enumerate(self._names):
            z = h @ params[wn] + params[bn]
            h = np.maximum(z, 0.0) if i < last else z
            acts.append(h)
        return h, acts

    def __call__(self, params, x):
        return self.forward(params, x)[0]

    def backward(self, params: NetParams, cache, grad_out, out: NetParams | None = None,
                 input_grad: bool = False):
        if cache is None:
            raise ValueError("backward needs the cache returned by forward")
        grads = out if out is not None else params.zeros_like()
        acts = cache
        d = np.asarray(grad_out, dtype=np.float64)
        batched = d.ndim == 2
        for i in range(self.n_layers - 1, -1, -1):
            wn, bn = self._names[i]
            h_prev = acts[i]
            if batched:
                grads[wn] = h_prev.T @ d
                grads[bn] = d.sum(axis=0)
            else:
                grads[wn] = np.outer(h_prev, d)
                grads[bn] = d
            if i > 0 or input_grad:
                d = d @ params[wn].T
                if i > 0:
                    d = d * (acts[i] > 0.0)
        if input_grad:
            return grads, d
        return grads


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    s0, s1, s2 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, shape=(c, k, k, oh, ow), strides=(s0, s1, s2, s1 * stride, s2 * stride), writeable=False)
    return view.reshape(c * k * k, oh * ow), oh, ow


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1):
    """x: (C, H, W); weight: (O, C, k, k). Returns (O, oh, ow) and a cache for backward."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    o, c, k, _ = weight.shape
    if x.ndim != 3 or x.shape[0] != c:
        raise ValueError(f"conv input shape {x.shape} incompatible with kernel {weight.shape}")
    if x.shape[1] < k or x.shape[2] < k:
        raise ValueError("conv input smaller than kernel")
    cols, oh, ow = _im2col(x, k, stride)
    out = weight.reshape(o, -1) @ cols + bias[:, None]
    return out.reshape(o, oh, ow), cols


def conv2d_backward(cols: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    o = weight.shape[0]
    g = grad_out.reshape(o, -1)
    dw = (g @ cols.T).reshape(weight.shape)
    db = g.sum(axis=1)
    return dw, db


def conv_output_size(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


def attention_forward(q: np.ndarray, k: np.ndarray, mask: np.ndarray | None = None):
    """Row-softmax of q k^T / sqrt(d_k); masked key columns get exactly zero weight."""
    d_k = q.shape[-1]
    logits = q @ k.T / math.sqrt(d_k)
    if mask is not None:
        logits = np.where(mask[None, :], logits, _MASK_LOGIT)
    return softmax(logits, axis=-1)


def attention_backward(q, k, weights, grad_w):
    """Gradients of the attention weights w.r.t. q and k."""
    d_k = q.shape[-1]
    g_logits = softmax_backward(weights, grad_w) / math.sqrt(d_k)
    return g_logits @ k, g_logits.T @ q


# --- checkpoint container -------------------------------------------------

CHECKPOINT_MAGIC = b"MVPTENS1"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named float64 tensors (little-endian) plus a JSON metadata block."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<Q", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_tensors(path):
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(len(CHECKPOINT_MAGIC))) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (mlen,) = struct.unpack("<Q", take(8))
    try:
        meta = json.loads(bytes(take(mlen)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata ({exc})") from None
    (count,) = struct.unpack("<Q", take(8))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(bytes(take(8 * n)), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after tensors")
    return tensors, meta


def params_to_tensors(prefix: str, params: NetParams) -> dict:
    return {f"{prefix}/{name}": view for name, view in params.items()}


def params_from_tensors(prefix: str, tensors: dict, template: NetParams) -> NetParams:
    out = template.zeros_like()
    for name, view in out.items():
        key = f"{prefix}/{name}"
        if key not in tensors:
            raise CheckpointError(f"missing tensor {key}")
        if tensors[key].shape != view.shape:
            raise CheckpointError(f"tensor {key} has shape {tensors[key].shape}, expected {view.shape}")
        view[...] = tensors[key]
    return out
