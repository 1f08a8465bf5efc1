"""Small numpy layer library with hand-written backward passes.

Every layer caches what it needs during ``forward`` and consumes that cache in
``backward``. Parameter gradients are *accumulated*; call ``zero_grad`` between
steps. Models are feed-forward chains, so there is no autodiff tape.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-5
NORM_EPS = 1e-12

CKPT_MAGIC = b"ERAC"
CKPT_VERSION = 1


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray

    @classmethod
    def of(cls, value: np.ndarray) -> "Param":
        return cls(value, np.zeros_like(value))


class ParamStore:
    """Ordered name -> :class:`Param` map with unique names."""

    def __init__(self, items: Iterable[tuple[str, Param]] = ()):
        self._params: dict[str, Param] = {}
        for name, p in items:
            self.add(name, p)

    def add(self, name: str, p: Param) -> None:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        if p.grad.shape != p.value.shape:
            raise ShapeError(f"{name}: gradient shape {p.grad.shape} != value shape {p.value.shape}")
        self._params[name] = p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def values(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self._params.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {k: p.grad for k, p in self._params.items()}

    def n_params(self) -> int:
        return sum(p.value.size for p in self._params.values())


class Layer:
    """Base layer. Subclasses fill ``params`` (trainable) and ``buffers`` (state)."""

    kind = "layer"

    def __init__(self):
        self.params: dict[str, Param] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _pop(self):
        if self._cache is None:
            raise RuntimeError(f"{self.kind}: no cached activations (backward called before forward)")
        return self._cache

    def spec(self) -> dict:
        return {"kind": self.kind}

    def astype(self, dtype) -> None:
        for p in self.params.values():
            p.value = p.value.astype(dtype)
            p.grad = p.grad.astype(dtype)
        for k, b in self.buffers.items():
            self.buffers[k] = b.astype(dtype)


def _he(rng: np.random.Generator, fan_in: int, shape, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


class Conv3x3(Layer):
    """3x3 cross-correlation, stride 1, zero padding 1."""

    kind = "conv3x3"

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.params["w"] = Param.of(_he(rng, in_ch * 9, (out_ch, in_ch, 3, 3), dtype))
        self.params["b"] = Param.of(np.zeros(out_ch, dtype=dtype))

    def spec(self):
        return {"kind": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch}

    def forward(self, x, train=True):
        w = self.params["w"].value
        if x.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv3x3 expects [B,{w.shape[1]},H,W] input, got {list(x.shape)}")
        B, C, H, W = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))  # B,C,H,W,3,3
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * 9)
        out = cols @ w.reshape(self.out_ch, C * 9).T + self.params["b"].value
        self._cache = (cols, x.shape)
        return out.reshape(B, H, W, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, dy):
        cols, (B, C, H, W) = self._pop()
        w = self.params["w"]
        dflat = dy.transpose(0, 2, 3, 1).reshape(B * H * W, self.out_ch)
        w.grad += (dflat.T @ cols).reshape(w.value.shape)
        self.params["b"].grad += dflat.sum(axis=0)
        dcols = (dflat @ w.value.reshape(self.out_ch, C * 9)).reshape(B, H, W, C, 3, 3)
        dxp = np.zeros((B, C, H + 2, W + 2), dtype=dy.dtype)
        for i in range(3):
            for j in range(3):
                dxp[:, :, i:i + H, j:j + W] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, 1:-1, 1:-1]


class BatchNorm2d(Layer):
    kind = "batchnorm"

    def __init__(self, channels: int, dtype=np.float64, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.params["gamma"] = Param.of(np.ones(channels, dtype=dtype))
        self.params["beta"] = Param.of(np.zeros(channels, dtype=dtype))
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def spec(self):
        return {"kind": self.kind, "channels": self.channels, "eps": self.eps, "momentum": self.momentum}

    def forward(self, x, train=True):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm expects [B,{self.channels},H,W], got {list(x.shape)}")
        gamma = self.params["gamma"].value[None, :, None, None]
        beta = self.params["beta"].value[None, :, None, None]
        if train:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            if m < 2:
                raise ShapeError("batch too small for BN")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            mom = self.momentum
            self.buffers["running_mean"] = (1 - mom) * self.buffers["running_mean"] + mom * mean
            self.buffers["running_var"] = (1 - mom) * self.buffers["running_var"] + mom * var * m / (m - 1)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        self._cache = (xhat, inv, train)
        return gamma * xhat + beta

    def backward(self, dy):
        xhat, inv, train = self._pop()
        gamma = self.params["gamma"].value
        self.params["gamma"].grad += (dy * xhat).sum(axis=(0, 2, 3))
        self.params["beta"].grad += dy.sum(axis=(0, 2, 3))
        dxhat = dy * gamma[None, :, None, None]
        if not train:
            return dxhat * inv[None, :, None, None]
        mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return (dxhat - mean_d - xhat * mean_dx) * inv[None, :, None, None]


class ELU(Layer):
    kind = "elu"

    def forward(self, x, train=True):
        neg = np.expm1(np.minimum(x, 0.0))
        y = np.where(x > 0, x, neg)
        self._cache = (x, neg)
        return y

    def backward(self, dy):
        x, neg = self._pop()
        return dy * np.where(x > 0, 1.0, neg + 1.0)


class AvgPool2x2(Layer):
    """2x2 mean pooling, stride 2; odd trailing rows/columns are dropped."""

    kind = "avgpool2x2"

    def forward(self, x, train=True):
        B, C, H, W = x.shape
        if H < 2 or W < 2:
            raise ShapeError(f"avgpool2x2 needs H, W >= 2, got {H}x{W}")
        h, w = H // 2, W // 2
        xc = x[:, :, :2 * h, :2 * w]
        self._cache = x.shape
        return xc.reshape(B, C, h, 2, w, 2).mean(axis=(3, 5))

    def backward(self, dy):
        shape = self._pop()
        B, C, h, w = dy.shape
        dx = np.zeros(shape, dtype=dy.dtype)
        up = np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) * 0.25
        dx[:, :, :2 * h, :2 * w] = up
        return dx


class GlobalAvgPool(Layer):
    kind = "global_avgpool"

    def forward(self, x, train=True):
        self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        B, C, H, W = self._pop()
        return np.broadcast_to(dy[:, :, None, None] / (H * W), (B, C, H, W)).copy()


class Linear(Layer):
    """Affine map on the last axis; leading axes are batch axes."""

    kind = "linear"

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64, bias: bool = True):
        super().__init__()
        self.d_in, self.d_out, self.bias = d_in, d_out, bias
        self.params["w"] = Param.of(_xavier(rng, d_in, d_out, (d_in, d_out), dtype))
        if bias:
            self.params["b"] = Param.of(np.zeros(d_out, dtype=dtype))

    def spec(self):
        return {"kind": self.kind, "d_in": self.d_in, "d_out": self.d_out, "bias": self.bias}

    def forward(self, x, train=True):
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"linear expects last dim {self.d_in}, got {list(x.shape)}")
        self._cache = x
        y = x @ self.params["w"].value
        if self.bias:
            y = y + self.params["b"].value
        return y

    def backward(self, dy):
        x = self._pop()
        w = self.params["w"]
        x2 = x.reshape(-1, self.d_in)
        d2 = dy.reshape(-1, self.d_out)
        w.grad += x2.T @ d2
        if self.bias:
            self.params["b"].grad += d2.sum(axis=0)
        return dy @ w.value.T


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, dy: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, train=True):
        y = softmax(x)
        self._cache = y
        return y

    def backward(self, dy):
        return softmax_backward(self._pop(), dy)


class LayerNorm(Layer):
    kind = "layernorm"

    def __init__(self, dim: int, dtype=np.float64, eps: float = LN_EPS):
        super().__init__()
        self.dim, self.eps = dim, eps
        self.params["gamma"] = Param.of(np.ones(dim, dtype=dtype))
        self.params["beta"] = Param.of(np.zeros(dim, dtype=dtype))

    def spec(self):
        return {"kind": self.kind, "dim": self.dim, "eps": self.eps}

    def forward(self, x, train=True):
        mean = x.mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + self.eps)
        xhat = (x - mean) * inv
        self._cache = (xhat, inv)
        return xhat * self.params["gamma"].value + self.params["beta"].value

    def backward(self, dy):
        xhat, inv = self._pop()
        lead = tuple(range(dy.ndim - 1))
        self.params["gamma"].grad += (dy * xhat).sum(axis=lead)
        self.params["beta"].grad += dy.sum(axis=lead)
        dxhat = dy * self.params["gamma"].value
        return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


class L2Normalize(Layer):
    kind = "l2norm"

    def __init__(self, eps: float = NORM_EPS):
        super().__init__()
        self.eps = eps

    def forward(self, x, train=True):
        norm = np.linalg.norm(x, axis=-1, keepdims=True)
        if np.any(norm < self.eps):
            raise ValueError("degenerate zero vector cannot be normalized")
        y = x / norm
        self._cache = (y, norm)
        return y

    def backward(self, dy):
        y, norm = self._pop()
        return (dy - y * (dy * y).sum(axis=-1, keepdims=True)) / norm


class MHABlock(Layer):
    """Multi-head self-attention over tokens ``[B, T, D]`` wrapped as ``LN(x + heads(x))``.

    Each head owns ``D x d_k`` slices of ``wq``, ``wk``, ``wv``. The concatenated head
    outputs feed the residual directly when ``heads * d_k == D``; otherwise an output
    projection ``wo`` of shape ``[heads * d_k, D]`` is required.
    """

    kind = "mha_block"

    def __init__(self, d_model: int, heads: int, d_k: int, rng: np.random.Generator, dtype=np.float64,
                 out_proj: bool | None = None):
        super().__init__()
        width = heads * d_k
        if out_proj is None:
            out_proj = width != d_model
        if width != d_model and not out_proj:
            raise ConfigError(f"heads*d_k = {heads}*{d_k} = {width} must equal token width {d_model} "
                              "without an output projection")
        self.d_model, self.heads, self.d_k, self.out_proj = d_model, heads, d_k, out_proj
        for name in ("wq", "wk", "wv"):
            self.params[name] = Param.of(_xavier(rng, d_model, d_k, (d_model, width), dtype))
        if out_proj:
            self.params["wo"] = Param.of(_xavier(rng, width, d_model, (width, d_model), dtype))
        self.norm = LayerNorm(d_model, dtype)
        self.params["ln_gamma"] = self.norm.params["gamma"]
        self.params["ln_beta"] = self.norm.params["beta"]
        self.last_attention = None

    def spec(self):
        return {"kind": self.kind, "d_model": self.d_model, "heads": self.heads, "d_k": self.d_k,
                "out_proj": self.out_proj}

    def _split(self, m):
        B, T, _ = m.shape
        return m.reshape(B, T, self.heads, self.d_k).transpose(0, 2, 1, 3)

    def _merge(self, m):
        B, H, T, dk = m.shape
        return m.transpose(0, 2, 1, 3).reshape(B, T, H * dk)

    def forward(self, x, train=True):
        if x.ndim != 3 or x.shape[-1] != self.d_model:
            raise ShapeError(f"mha_block expects [B,T,{self.d_model}], got {list(x.shape)}")
        q = self._split(x @ self.params["wq"].value)
        k = self._split(x @ self.params["wk"].value)
        v = self._split(x @ self.params["wv"].value)
        attn = softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(self.d_k))
        heads = self._merge(attn @ v)
        mixed = heads @ self.params["wo"].value if self.out_proj else heads
        self._cache = (x, q, k, v, attn, heads)
        self.last_attention = attn
        return self.norm.forward(x + mixed, train)

    def backward(self, dy):
        x, q, k, v, attn, heads = self._pop()
        dres = self.norm.backward(dy)
        dmixed = dres
        if self.out_proj:
            wo = self.params["wo"]
            wo.grad += heads.reshape(-1, heads.shape[-1]).T @ dres.reshape(-1, self.d_model)
            dmixed = dres @ wo.value.T
        dheads = self._split(dmixed)
        dattn = dheads @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dheads
        dscores = softmax_backward(attn, dattn) / np.sqrt(self.d_k)
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        dx = dres.copy()
        xf = x.reshape(-1, self.d_model)
        for name, dm in (("wq", dq), ("wk", dk), ("wv", dv)):
            dflat = self._merge(dm)
            self.params[name].grad += xf.T @ dflat.reshape(-1, dflat.shape[-1])
            dx += dflat @ self.params[name].value.T
        return dx


class Sequential(Layer):
    """Chain of layers; forward in order, backward in reverse."""

    kind = "sequential"

    def __init__(self, layers: list[Layer]):
        super().__init__()
        self.layers = layers
        self._ran = False

    def spec(self):
        return {"kind": self.kind, "layers": [l.spec() for l in self.layers]}

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train)
        self._ran = True
        return x

    def backward(self, dy):
        if not self._ran:
            raise RuntimeError("no cached activations (backward called before forward)")
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def named_params(self, prefix: str = "") -> list[tuple[str, Param]]:
        return [(f"{prefix}{i}.{k}", p) for i, l in enumerate(self.layers) for k, p in _layer_params(l)]

    def named_buffers(self, prefix: str = ""):
        out = []
        for i, l in enumerate(self.layers):
            for k in l.buffers:
                out.append((f"{prefix}{i}.{k}", l, k))
        return out

    def astype(self, dtype):
        for l in self.layers:
            l.astype(dtype)


def _layer_params(layer: Layer):
    if isinstance(layer, Sequential):
        return [(k, p) for k, p in layer.named_params()]
    return list(layer.params.items())


# -- checkpoint I/O ---------------------------------------------------------


def save_checkpoint(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write ``ERAC`` file: magic, u32 version, u32 header length, JSON header, then
    per array a u32-length-prefixed UTF-8 name and its row-major float32 LE values.
    Shapes travel in ``header["shapes"]``."""
    header = dict(header)
    header["shapes"] = {k: list(v.shape) for k, v in arrays.items()}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for name, arr in arrays.items():
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an ERAC checkpoint")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    header = json.loads(blob[off:off + hlen])
    off += hlen
    arrays = {}
    while off < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode()
        off += nlen
        shape = header["shapes"][name]
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        off += 4 * count
    return header, arrays
