"""Spatial model: one round of convolutional message passing between joints.

Every output joint ``a`` receives a message from every input channel ``v``
(the detector's joints plus any virtual channels such as the torso map)::

    m[a, v] = K[a, v] * R[v] + B[a, v]        (true convolution, same size)
    out[a]  = exp(sum_v log m[a, v])

In the trainable network ``K = SoftPlus(w)``, ``B = SoftPlus(b)`` and
``R = max(e, eps)``; the stored weights live in pre-SoftPlus space. A kernel
``K[a, v]`` is the displacement distribution of ``a`` given ``v`` at the
kernel centre, so a delta at centre + (dy, dx) shifts ``v``'s map by
(dy, dx).

:func:`mrf_oracle` evaluates the normalized product directly (no log/exp,
no reparameterization, direct convolution) and is the reference for
``bypass`` mode.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import conv, nn
from .conv import ConvKernel
from .detector import HeatMapSet


class SpatialError(ValueError):
    pass


@dataclass(frozen=True)
class JointSet:
    names: tuple[str, ...]
    virtual: tuple[bool, ...] = ()

    def __post_init__(self):
        names = tuple(self.names)
        virtual = tuple(self.virtual) or (False,) * len(names)
        if not names:
            raise SpatialError("joint set must not be empty")
        if len(set(names)) != len(names):
            raise SpatialError("joint names must be unique")
        if len(virtual) != len(names):
            raise SpatialError("one virtual flag per joint")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "virtual", virtual)

    def __len__(self):
        return len(self.names)

    @property
    def outputs(self) -> tuple[str, ...]:
        return tuple(n for n, v in zip(self.names, self.virtual) if not v)


@dataclass
class SpatialModelParams:
    """Pairwise priors ``weights[a, v]`` and biases ``biases[a, v]``.

    ``a`` indexes output (non-virtual) joints, ``v`` every input channel.
    """

    weights: np.ndarray
    biases: np.ndarray
    beta: float = 1.0
    eps: float = 0.01
    joints: JointSet | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 4:
            raise SpatialError("weights must be (outputs, inputs, k, k)")
        n_out, n_in, kh, kw = self.weights.shape
        if kh != kw or kh % 2 == 0:
            raise SpatialError(f"kernel must be square and odd, got {(kh, kw)}")
        if self.biases.shape != (n_out, n_in):
            raise SpatialError(f"biases shape {self.biases.shape} != {(n_out, n_in)}")
        if not 0.5 <= self.beta <= 2.0:
            raise SpatialError(f"beta {self.beta} outside [0.5, 2]")
        if not 0.0 < self.eps <= 0.01:
            raise SpatialError(f"eps {self.eps} outside (0, 0.01]")
        if self.joints is not None and (len(self.joints) != n_in or len(self.joints.outputs) != n_out):
            raise SpatialError("joint set does not match the weight layout")

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[-1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    def kernel(self, a: int, v: int) -> ConvKernel:
        return ConvKernel(self.weights[a, v])

    def copy(self) -> "SpatialModelParams":
        return SpatialModelParams(self.weights.copy(), self.biases.copy(), self.beta, self.eps, self.joints)


@dataclass
class SpatialOracleResult:
    marginals: HeatMapSet
    partition_values: np.ndarray = field(default_factory=lambda: np.zeros(0))


# ---------------------------------------------------------------------------
# exact reference


def _message_direct(r: np.ndarray, k: np.ndarray) -> np.ndarray:
    c = k.shape[0] // 2
    # true convolution == correlation with the flipped kernel
    return conv.conv2d_direct(r, k[::-1, ::-1], conv.Padding("explicit", c))


def mrf_oracle(unaries, params: SpatialModelParams, normalize: bool = True) -> SpatialOracleResult:
    """Normalized product of messages with probability-domain priors.

    ``params.weights`` and ``params.biases`` are used as given (no SoftPlus).
    """
    p = np.asarray(unaries.maps if isinstance(unaries, HeatMapSet) else unaries, dtype=np.float64)
    if p.ndim != 3 or p.shape[0] != params.n_in:
        raise SpatialError(f"unaries shape {p.shape} does not match {params.n_in} inputs")
    if np.any(p < 0):
        raise SpatialError("unaries must be nonnegative")
    if np.any(params.weights < 0) or np.any(params.biases < 0):
        raise SpatialError("prior kernels and biases must be nonnegative")
    out = np.ones((params.n_out,) + p.shape[1:])
    for a in range(params.n_out):
        for v in range(params.n_in):
            out[a] *= _message_direct(p[v], params.weights[a, v]) + params.biases[a, v]
    z = out.sum(axis=(1, 2))
    if normalize:
        if np.any(z <= 0):
            raise SpatialError("marginal has zero mass")
        out = out / z[:, None, None]
    scale = unaries.scale_factor_to_image if isinstance(unaries, HeatMapSet) else 1.0
    return SpatialOracleResult(HeatMapSet(out, scale), z)


# ---------------------------------------------------------------------------
# trainable network


def _next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def _check(stage: str, x: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise SpatialError(f"non-finite values at stage '{stage}'")
    return x


class SpatialModel:
    """Batched forward/backward for the log-space message-passing network.

    ``forward`` maps ``(N, n_in, H, W)`` unary energies to ``(N, n_out, H, W)``.
    ``method`` is ``direct``, ``fft`` or ``auto`` (FFT for kernels of at
    least ``fft_threshold`` taps per side). ``bypass`` drops SoftPlus and the
    ReLU floor, turning the network into the unnormalized oracle product.
    """

    fft_threshold = 33

    def __init__(self, params: SpatialModelParams, method: str = "auto", bypass: bool = False):
        if method not in ("auto", "direct", "fft"):
            raise SpatialError(f"unknown method {method!r}")
        self.p = params
        self.method = method
        self.bypass = bypass
        self.params = {"weight": params.weights, "bias": params.biases}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def _use_fft(self) -> bool:
        if self.method == "auto":
            return self.p.kernel_size >= self.fft_threshold
        return self.method == "fft"

    def _effective(self):
        w, b = self.params["weight"], self.params["bias"]
        if self.bypass:
            return w, b
        return nn.softplus_fwd(w, self.p.beta), nn.softplus_fwd(b, self.p.beta)

    # messages[n, a, v] = conv(r[n, v], k[a, v]) with same-size output
    def _messages_direct(self, r, kern):
        c = kern.shape[-1] // 2
        rp = np.pad(r, ((0, 0), (0, 0), (c, c), (c, c)))
        win = sliding_window_view(rp, kern.shape[-2:], axis=(2, 3))
        kf = kern[..., ::-1, ::-1]
        return np.einsum("avij,nvyxij->navyx", kf, win, optimize=True)

    def _fft_geom(self, h, w):
        k = self.p.kernel_size
        return _next_pow2(2 * h + k - 1), _next_pow2(2 * w + k - 1)

    def _messages_fft(self, r, kern):
        n, _, h, w = r.shape
        c = kern.shape[-1] // 2
        fs = self._fft_geom(h, w)
        fr = np.fft.rfft2(r, s=fs)
        fk = np.fft.rfft2(kern, s=fs)
        full = np.fft.irfft2(fr[:, None] * fk[None], s=fs)
        return full[..., c : c + h, c : c + w]

    def forward(self, unary) -> np.ndarray:
        e = np.asarray(unary, dtype=np.float64)
        if e.ndim == 3:
            e = e[None]
        if e.ndim != 4 or e.shape[1] != self.p.n_in:
            raise SpatialError(f"unary shape {e.shape} does not match {self.p.n_in} inputs")
        r = e if self.bypass else nn.relu_eps_fwd(e, self.p.eps)
        kern, bias = self._effective()
        fft = self._use_fft()
        with np.errstate(over="ignore", invalid="ignore"):
            msg = self._messages_fft(r, kern) if fft else self._messages_direct(r, kern)
            msg = _check("message", msg + bias[None, :, :, None, None])
            if np.any(msg <= 0):
                raise SpatialError("non-positive input to stage 'log'")
            logsum = _check("log-sum", np.log(msg).sum(axis=2))
            out = _check("exp", np.exp(logsum))
        self._cache = (e, r, kern, msg, out, fft)
        return out

    def backward(self, grad) -> np.ndarray:
        if self._cache is None:
            raise SpatialError("backward before forward")
        e, r, kern, msg, out, fft = self._cache
        g_msg = (grad * out)[:, :, None] / msg
        g_bias = g_msg.sum(axis=(0, 3, 4))
        c = kern.shape[-1] // 2
        n, _, h, w = r.shape
        if fft:
            fs = self._fft_geom(h, w)
            fg = np.fft.rfft2(g_msg, s=fs)
            kf = kern[..., ::-1, ::-1]
            g_r = np.fft.irfft2((fg * np.fft.rfft2(kf, s=fs)[None]).sum(axis=1), s=fs)[..., c : c + h, c : c + w]
            rp = np.pad(r, ((0, 0), (0, 0), (c, c), (c, c)))
            fg_flip = np.fft.rfft2(g_msg[..., ::-1, ::-1], s=fs)
            fr = np.fft.rfft2(rp, s=fs)
            corr = np.fft.irfft2((fg_flip * fr[:, None]).sum(axis=0), s=fs)
            g_kf = corr[..., h - 1 : h - 1 + 2 * c + 1, w - 1 : w - 1 + 2 * c + 1]
        else:
            rp = np.pad(r, ((0, 0), (0, 0), (c, c), (c, c)))
            win = sliding_window_view(rp, kern.shape[-2:], axis=(2, 3))
            g_kf = np.einsum("navyx,nvyxij->avij", g_msg, win, optimize=True)
            gp = np.pad(g_msg, ((0, 0), (0, 0), (0, 0), (c, c), (c, c)))
            g_r = np.zeros_like(r)
            for a in range(kern.shape[0]):
                gwin = sliding_window_view(gp[:, a], kern.shape[-2:], axis=(2, 3))
                g_r += np.einsum("nvyxij,vij->nvyx", gwin, kern[a], optimize=True)
        g_kern = g_kf[..., ::-1, ::-1]
        if self.bypass:
            self.grads = {"weight": g_kern, "bias": g_bias}
            return g_r
        beta = self.p.beta
        self.grads = {
            "weight": nn.softplus_bwd(self.params["weight"], g_kern, beta),
            "bias": nn.softplus_bwd(self.params["bias"], g_bias, beta),
        }
        return nn.relu_eps_bwd(e, g_r, self.p.eps)


def spatial_forward(unary_energies, params: SpatialModelParams, method: str = "auto", bypass: bool = False) -> HeatMapSet:
    """Single-image convenience wrapper around :class:`SpatialModel`."""
    hm = unary_energies if isinstance(unary_energies, HeatMapSet) else None
    maps = hm.maps if hm is not None else unary_energies
    out = SpatialModel(params, method, bypass).forward(maps)[0]
    if hm is None:
        return HeatMapSet(out)
    return HeatMapSet(out, hm.scale_factor_to_image, hm.offset)


# ---------------------------------------------------------------------------
# initialization


def _to_cells(points: np.ndarray, scale: float) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) + 0.5) / scale - 0.5


def displacement_histogram(points, pair: tuple[int, int], kernel_size: int, scale: float = 1.0, visible=None) -> np.ndarray:
    """Counts of ``loc[a] - loc[v]`` in heat-map cells, binned around the centre.

    ``points`` is ``(N, joints, 2)`` in image ``(u, v)`` pixels.
    """
    if kernel_size % 2 == 0:
        raise SpatialError("kernel size must be odd")
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 3 or len(pts) == 0:
        raise SpatialError("need at least one annotated example")
    a, v = pair
    vis = np.ones(pts.shape[:2], bool) if visible is None else np.asarray(visible, bool)
    keep = vis[:, a] & vis[:, v]
    if not np.any(keep):
        raise SpatialError(f"no example has both joints {pair} visible")
    cells = _to_cells(pts[keep], scale)
    d = np.rint(cells[:, a] - cells[:, v]).astype(int)  # (dx, dy)
    c = kernel_size // 2
    if np.any(np.abs(d) > c):
        warnings.warn(f"displacements for pair {pair} exceed kernel radius {c}; clamping", stacklevel=2)
        d = np.clip(d, -c, c)
    hist = np.zeros((kernel_size, kernel_size))
    np.add.at(hist, (c + d[:, 1], c + d[:, 0]), 1.0)
    return hist


def init_from_histogram(points, pair, kernel_size: int, scale: float = 1.0, visible=None, beta: float = 1.0) -> ConvKernel:
    """Histogram prior with a uniform floor, stored in pre-SoftPlus space."""
    hist = displacement_histogram(points, pair, kernel_size, scale, visible)
    prob = hist / hist.sum() + 1.0 / kernel_size**2
    prob /= prob.sum()
    return ConvKernel(nn.softplus_inv(prob, beta))


def init_params(
    points,
    joints: JointSet,
    kernel_size: int,
    scale: float = 1.0,
    visible=None,
    unary_mean: float = 1.0,
    beta: float = 1.0,
    eps: float = 0.01,
) -> SpatialModelParams:
    """Histogram-initialized priors for every (output, input) pair."""
    outputs = [i for i, virt in enumerate(joints.virtual) if not virt]
    n_in = len(joints)
    w = np.empty((len(outputs), n_in, kernel_size, kernel_size))
    for ai, a in enumerate(outputs):
        for v in range(n_in):
            w[ai, v] = init_from_histogram(points, (a, v), kernel_size, scale, visible, beta).weights
    b0 = nn.softplus_inv(max(0.01 * unary_mean, 1e-12), beta)
    b = np.full((len(outputs), n_in), float(b0))
    return SpatialModelParams(w, b, beta, eps, joints)


def calibrate_gains(params: SpatialModelParams, unaries, cells, visible=None, bias_fraction: float = 0.01) -> SpatialModelParams:
    """Rescale each prior so its typical message at the true location is 1.

    ``unaries`` is ``(N, n_in, H, W)``; ``cells`` gives the integer
    ``(col, row)`` ground-truth cell of every output joint, ``(N, n_out, 2)``.
    The gain of pair ``(a, v)`` is the inverse geometric mean, over examples
    where ``a`` is visible, of the message ``v -> a`` at ``a``'s cell. Biases
    are reset to ``bias_fraction`` of the mean rescaled message. A product of
    ``n_in`` unit-scale messages stays near 1 at the truth instead of
    vanishing, which keeps the log-space gradients usable.
    """
    beta = params.beta
    prob = nn.softplus_fwd(params.weights, beta)
    net = SpatialModel(SpatialModelParams(prob, np.zeros_like(params.biases), 1.0, params.eps), bypass=True)
    r = nn.relu_eps_fwd(np.asarray(unaries, dtype=np.float64), params.eps)
    msg = net._messages_direct(r, prob)  # (N, a, v, H, W)
    cells = np.asarray(cells, dtype=int)
    n = np.arange(len(cells))
    vis = np.ones(cells.shape[:2], bool) if visible is None else np.asarray(visible, bool)
    weights = prob.copy()
    biases = np.empty_like(params.biases)
    for a in range(params.n_out):
        keep = vis[:, a]
        at_truth = msg[n[keep], a, :, cells[keep, a, 1], cells[keep, a, 0]]  # (n_keep, v)
        gain = 1.0 / np.exp(np.mean(np.log(at_truth), axis=0))
        weights[a] *= gain[:, None, None]
        biases[a] = bias_fraction * gain * msg[:, a].mean(axis=(0, 2, 3))
    return SpatialModelParams(nn.softplus_inv(weights, beta), nn.softplus_inv(biases, beta), beta, params.eps, params.joints)
