"""Hand-derived differentiable layers.

All layers work on batched arrays shaped ``(N, C, H, W)``. A layer caches
whatever its backward pass needs during ``forward``; ``backward`` must be
called with the gradient of the most recent forward output and fills
``layer.grads`` (same keys and shapes as ``layer.params``).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import conv

MAGIC = b"PGNN"
FORMAT_VERSION = 1


class NNError(ValueError):
    pass


# ---------------------------------------------------------------------------
# elementwise functions (also used directly by the spatial model)


def softplus_fwd(x, beta: float = 1.0) -> np.ndarray:
    """``log(1 + exp(beta * x)) / beta``, overflow-safe."""
    if not 0.5 <= beta <= 2.0:
        raise NNError(f"SoftPlus beta must lie in [0.5, 2], got {beta}")
    z = beta * np.asarray(x, dtype=np.float64)
    # log1p(exp(z)) == max(z, 0) + log1p(exp(-|z|)); exact for both tails
    return (np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))) / beta


def softplus_bwd(x, grad, beta: float = 1.0) -> np.ndarray:
    """Gradient of :func:`softplus_fwd`: ``grad * logistic(beta * x)``."""
    z = beta * np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return grad * sig


def softplus_inv(y, beta: float = 1.0) -> np.ndarray:
    """Inverse of :func:`softplus_fwd` for ``y > 0``."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise NNError("inverse SoftPlus needs strictly positive values")
    z = beta * y
    # log(expm1(z)) == z + log(-expm1(-z)); the second form is stable for large z
    return np.where(z > 20, z + np.log(-np.expm1(-z)), np.log(np.expm1(np.minimum(z, 20)))) / beta


def relu_eps_fwd(x, eps: float = 0.01) -> np.ndarray:
    if not 0.0 < eps <= 0.01:
        raise NNError(f"ReLU floor must lie in (0, 0.01], got {eps}")
    return np.maximum(np.asarray(x, dtype=np.float64), eps)


def relu_eps_bwd(x, grad, eps: float = 0.01) -> np.ndarray:
    # subgradient 1 at x == eps
    return np.where(np.asarray(x) >= eps, grad, 0.0)


# ---------------------------------------------------------------------------
# layers


class Layer:
    kind = "Layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise NNError(f"{self.kind}.backward called before forward")
        return self._cache

    def __repr__(self):
        return f"{self.kind}()"


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    ho, wo = win.shape[2:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def conv_layer_fwd(x, weight, bias, pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Multi-channel correlation plus per-output-channel bias.

    Returns the output and the im2col matrix needed by :func:`conv_layer_bwd`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise NNError(f"expected (N, C, H, W) input, got shape {x.shape}")
    o, c, kh, kw = weight.shape
    if x.shape[1] != c:
        raise NNError(f"input has {x.shape[1]} channels, weights expect {c}")
    if bias.shape != (o,):
        raise NNError(f"bias shape {bias.shape} != ({o},)")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    n, _, hp, wp = xp.shape
    if kh > hp or kw > wp:
        raise NNError(f"kernel {(kh, kw)} larger than padded input {(hp, wp)}")
    ho, wo = hp - kh + 1, wp - kw + 1
    cols = _im2col(xp, kh, kw)
    out = cols @ weight.reshape(o, -1).T + bias
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2), cols


def conv_layer_bwd(grad, cols, x_shape, weight, pad: int = 0):
    """Gradients w.r.t. input, weight and bias of :func:`conv_layer_fwd`."""
    o, c, kh, kw = weight.shape
    n, _, ho, wo = grad.shape
    gm = grad.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (gm.T @ cols).reshape(weight.shape)
    db = gm.sum(axis=0)
    dcols = (gm @ weight.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
    hp, wp = x_shape[2] + 2 * pad, x_shape[3] + 2 * pad
    dxp = np.zeros((n, c, hp, wp))
    dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + ho, j : j + wo] += dcols[:, :, i, j]
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dxp, dw, db


class ConvLayer(Layer):
    kind = "ConvLayer"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, pad: int = 0, rng=None):
        super().__init__()
        rng = np.random.default_rng(rng)
        fan_in = in_channels * kernel_size * kernel_size
        self.pad = pad
        self.params["weight"] = rng.normal(
            0.0, np.sqrt(2.0 / fan_in), (out_channels, in_channels, kernel_size, kernel_size)
        )
        self.params["bias"] = np.zeros(out_channels)

    def forward(self, x):
        out, cols = conv_layer_fwd(x, self.params["weight"], self.params["bias"], self.pad)
        self._cache = (cols, x.shape)
        return out

    def backward(self, grad):
        cols, shape = self._cached()
        dx, dw, db = conv_layer_bwd(grad, cols, shape, self.params["weight"], self.pad)
        self.grads["weight"] = dw
        self.grads["bias"] = db
        return dx

    def __repr__(self):
        o, c, k, _ = self.params["weight"].shape
        return f"ConvLayer({c}->{o}, {k}x{k}, pad={self.pad})"


class MaxPool(Layer):
    kind = "MaxPool"

    def forward(self, x):
        out, idx = conv.maxpool2(x)
        self._cache = idx
        return out

    def backward(self, grad):
        return conv.maxpool2_backward(grad, self._cached())


class ReLUeps(Layer):
    kind = "ReLUeps"

    def __init__(self, eps: float = 0.01):
        super().__init__()
        relu_eps_fwd(0.0, eps)
        self.eps = eps

    def forward(self, x):
        self._cache = x
        return relu_eps_fwd(x, self.eps)

    def backward(self, grad):
        return relu_eps_bwd(self._cached(), grad, self.eps)


class SoftPlusBeta(Layer):
    kind = "SoftPlusBeta"

    def __init__(self, beta: float = 1.0):
        super().__init__()
        softplus_fwd(0.0, beta)
        self.beta = beta

    def forward(self, x):
        self._cache = x
        return softplus_fwd(x, self.beta)

    def backward(self, grad):
        return softplus_bwd(self._cached(), grad, self.beta)


class LogStage(Layer):
    kind = "LogStage"

    def forward(self, x):
        if np.any(x <= 0):
            raise NNError("LogStage input must be strictly positive")
        self._cache = x
        return np.log(x)

    def backward(self, grad):
        return grad / self._cached()


class ExpStage(Layer):
    kind = "ExpStage"

    def forward(self, x):
        out = np.exp(x)
        self._cache = out
        return out

    def backward(self, grad):
        return grad * self._cached()


class SumStage(Layer):
    """Sum consecutive groups of ``group`` channels into one channel each."""

    kind = "SumStage"

    def __init__(self, group: int):
        super().__init__()
        self.group = group

    def forward(self, x):
        n, c, h, w = x.shape
        if c % self.group:
            raise NNError(f"{c} channels not divisible into groups of {self.group}")
        self._cache = True
        return x.reshape(n, c // self.group, self.group, h, w).sum(axis=2)

    def backward(self, grad):
        self._cached()
        return np.repeat(grad, self.group, axis=1)


class Upsample(Layer):
    kind = "Upsample"

    def __init__(self, factor: int):
        super().__init__()
        if factor < 1:
            raise NNError("upsample factor must be >= 1")
        self.factor = factor

    def forward(self, x):
        self._cache = True
        return conv.upsample(x, self.factor)

    def backward(self, grad):
        self._cached()
        return conv.upsample_backward(grad, self.factor)


# ---------------------------------------------------------------------------
# local contrast normalization

LCN_SIZE = 9
LCN_SIGMA = 2.0
LCN_FLOOR = 1e-4


def _lcn_operators(h: int, w: int):
    r = np.arange(LCN_SIZE) - LCN_SIZE // 2
    g = np.exp(-(r**2) / (2 * LCN_SIGMA**2))

    def band(n):
        m = np.zeros((n, n))
        for off, val in zip(r, g):
            m += val * np.eye(n, k=int(off))
        return m

    gh, gw = band(h), band(w)
    norm = np.outer(gh.sum(axis=1), gw.sum(axis=1))
    return gh, gw, norm


def _local_mean(z, gh, gw, norm):
    return np.einsum("ih,...hw,jw->...ij", gh, z, gw) / norm


def _local_mean_T(u, gh, gw, norm):
    return np.einsum("ih,...ij,jw->...hw", gh, u / norm, gw)


def lcn_fwd(x) -> np.ndarray:
    """Local contrast normalization over the last two axes.

    Subtracts a Gaussian-weighted (9x9, sigma 2) local mean, then divides by
    ``max(local std, image-mean local std)``. Weights are renormalized where
    the window leaves the image. Works on 2D, 3D or 4D input; the image-mean
    is taken per plane.
    """
    return _lcn(np.asarray(x, dtype=np.float64))[0]


def _lcn(x):
    h, w = x.shape[-2:]
    if h < LCN_SIZE or w < LCN_SIZE:
        raise NNError(f"LCN needs at least {LCN_SIZE}x{LCN_SIZE} input, got {(h, w)}")
    ops = _lcn_operators(h, w)
    centred = x - _local_mean(x, *ops)
    var = _local_mean(centred**2, *ops)
    std = np.sqrt(np.maximum(var, 0.0))
    mean_std = std.mean(axis=(-2, -1), keepdims=True)
    div = np.maximum(np.maximum(std, mean_std), LCN_FLOOR)
    return centred / div, (ops, centred, std, mean_std, div)


def lcn_bwd(x, grad) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out, (ops, centred, std, mean_std, div) = _lcn(x)
    d_centred = grad / div
    d_div = -(grad * centred / div**2)
    local_wins = (std >= mean_std) & (std > LCN_FLOOR)
    mean_wins = (~local_wins) & (mean_std > LCN_FLOOR)
    d_std = np.where(local_wins, d_div, 0.0)
    hw = x.shape[-1] * x.shape[-2]
    d_std = d_std + np.where(mean_wins, d_div, 0.0).sum(axis=(-2, -1), keepdims=True) / hw
    safe = np.where(std > 0, std, 1.0)
    d_var = np.where(std > 0, d_std / (2 * safe), 0.0)
    d_centred = d_centred + 2 * centred * _local_mean_T(d_var, *ops)
    return d_centred - _local_mean_T(d_centred, *ops)


class LCN(Layer):
    kind = "LCN"

    def forward(self, x):
        self._cache = x
        return lcn_fwd(x)

    def backward(self, grad):
        return lcn_bwd(self._cached(), grad)


# ---------------------------------------------------------------------------
# containers, loss, gradient checking


class Sequential(Layer):
    kind = "Sequential"

    def __init__(self, layers: Iterable[Layer]):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                self.params[f"{i}.{k}"] = v

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        self.grads = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.grads.items():
                self.grads[f"{i}.{k}"] = v
        return grad

    def __repr__(self):
        return "Sequential(" + ", ".join(map(repr, self.layers)) + ")"


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean squared error over every element, and its gradient."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise NNError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def grad_check(
    net,
    x: np.ndarray,
    seed: int = 0,
    h: float = 1e-5,
    max_entries: int | None = 64,
    check_input: bool = True,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``net`` needs ``forward``, ``backward``, ``params`` and ``grads``. The loss
    is ``sum(r * net(x))`` for a fixed random ``r``. Each parameter tensor
    (and the input) is compared over up to ``max_entries`` randomly chosen
    elements; the error of a tensor is its max absolute deviation divided by
    the largest gradient magnitude in that tensor.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    out = net.forward(x)
    if not np.all(np.isfinite(out)):
        raise NNError("non-finite forward output in grad_check")
    r = rng.standard_normal(out.shape)
    dx = net.backward(r)
    analytic = {k: np.array(v) for k, v in net.grads.items()}

    def loss() -> float:
        val = float(np.sum(r * net.forward(x)))
        if not np.isfinite(val):
            raise NNError("non-finite loss in grad_check")
        return val

    targets: list[tuple[str, np.ndarray, np.ndarray]] = [
        (name, arr, analytic[name]) for name, arr in net.params.items()
    ]
    if check_input:
        targets.append(("<input>", x, dx))

    worst = 0.0
    for _, arr, ana in targets:
        flat = arr.reshape(-1)
        ana = ana.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        num = np.empty(len(idx))
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss()
            flat[i] = orig - h
            fm = loss()
            flat[i] = orig
            num[n] = (fp - fm) / (2 * h)
        worst = max(worst, _rel_err(ana[idx], num))
    return worst


# ---------------------------------------------------------------------------
# serialization


def save_params(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float64 arrays plus a JSON metadata block.

    Layout (little-endian): ``PGNN``, u32 version, u32 tensor count,
    u32 metadata length, metadata JSON; then per tensor u16 name length,
    UTF-8 name, u8 rank, u32 per dim, raw float64 data.
    """
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, len(tensors), len(meta_bytes)))
        fh.write(meta_bytes)
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise NNError(f"{path}: bad magic")
    version, count, meta_len = struct.unpack_from("<III", data, 4)
    if version != FORMAT_VERSION:
        raise NNError(f"{path}: unsupported version {version}")
    pos = 16
    meta = json.loads(data[pos : pos + meta_len].decode())
    pos += meta_len
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            tensors[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise NNError(f"{path}: truncated or corrupt ({exc})") from exc
    return tensors, meta

