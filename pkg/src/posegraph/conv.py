"""Single-channel 2D convolution engines, pooling and resampling.

Convention: every convolution in this package is a *correlation*; the kernel
is not flipped. ``out[y, x] = sum_ij k[i, j] * padded[y + i, x + j]``. Code
that needs true convolution (the spatial priors) flips the kernel itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConvError",
    "Padding",
    "ConvKernel",
    "conv2d_direct",
    "conv2d_fft",
    "conv2d",
    "maxpool2",
    "maxpool2_backward",
    "upsample",
    "upsample_backward",
    "antialias_downsample",
    "gaussian_kernel",
]

FFT_THRESHOLD = 15


class ConvError(ValueError):
    pass


@dataclass(frozen=True)
class Padding:
    """Zero padding applied on every side of the input.

    ``valid`` adds nothing, ``same`` adds ``(k - 1) // 2`` (odd kernels keep
    the input size), ``full`` adds ``k - 1``. ``explicit`` uses ``pad``.
    """

    mode: str = "valid"
    pad: int = 0

    def __post_init__(self):
        if self.mode not in ("valid", "same", "full", "explicit"):
            raise ConvError(f"unknown padding mode {self.mode!r}")
        if self.pad < 0:
            raise ConvError("pad must be >= 0")

    def amounts(self, kh: int, kw: int) -> tuple[int, int]:
        if self.mode == "valid":
            return 0, 0
        if self.mode == "same":
            return (kh - 1) // 2, (kw - 1) // 2
        if self.mode == "full":
            return kh - 1, kw - 1
        return self.pad, self.pad


@dataclass(frozen=True)
class ConvKernel:
    """Odd-sized single-channel kernel; ``center`` is its middle tap."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] % 2 == 0 or w.shape[1] % 2 == 0:
            raise ConvError(f"kernel must be 2D with odd dims, got {w.shape}")
        object.__setattr__(self, "weights", w)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape

    @property
    def center(self) -> tuple[int, int]:
        return self.weights.shape[0] // 2, self.weights.shape[1] // 2


VALID = Padding("valid")
SAME = Padding("same")
FULL = Padding("full")


def _as_padding(padding) -> Padding:
    if isinstance(padding, Padding):
        return padding
    if isinstance(padding, int):
        return Padding("explicit", padding)
    return Padding(padding)


def _prepare(x, kernel, padding):
    x = np.asarray(x, dtype=np.float64)
    if isinstance(kernel, ConvKernel):
        kernel = kernel.weights
    k = np.asarray(kernel, dtype=np.float64)
    if x.ndim != 2 or k.ndim != 2:
        raise ConvError("conv2d expects 2D input and kernel")
    kh, kw = k.shape
    ph, pw = _as_padding(padding).amounts(kh, kw)
    hp, wp = x.shape[0] + 2 * ph, x.shape[1] + 2 * pw
    if kh > hp or kw > wp:
        raise ConvError(f"kernel {k.shape} larger than padded input {(hp, wp)}")
    return x, k, ph, pw


def conv2d_direct(x, kernel, padding=VALID) -> np.ndarray:
    """Reference correlation: one shifted multiply-add per kernel tap."""
    x, k, ph, pw = _prepare(x, kernel, padding)
    xp = np.pad(x, ((ph, ph), (pw, pw)))
    kh, kw = k.shape
    ho, wo = xp.shape[0] - kh + 1, xp.shape[1] - kw + 1
    out = np.zeros((ho, wo))
    for i in range(kh):
        for j in range(kw):
            if k[i, j] != 0.0:
                out += k[i, j] * xp[i : i + ho, j : j + wo]
    return out


def _next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def conv2d_fft(x, kernel, padding=VALID) -> np.ndarray:
    """Correlation through zero-padded power-of-two real FFTs.

    Same output geometry as :func:`conv2d_direct`.
    """
    x, k, ph, pw = _prepare(x, kernel, padding)
    xp = np.pad(x, ((ph, ph), (pw, pw)))
    kh, kw = k.shape
    hp, wp = xp.shape
    fh, fw = _next_pow2(hp + kh - 1), _next_pow2(wp + kw - 1)
    # correlation == linear convolution with the flipped kernel
    spec = np.fft.rfft2(xp, s=(fh, fw)) * np.fft.rfft2(k[::-1, ::-1], s=(fh, fw))
    full = np.fft.irfft2(spec, s=(fh, fw))
    return full[kh - 1 : hp, kw - 1 : wp].copy()


def conv2d(x, kernel, padding=VALID, method: str = "auto") -> np.ndarray:
    """Dispatch to the FFT engine for large kernels, direct otherwise."""
    if method == "auto":
        k = np.asarray(kernel.weights if isinstance(kernel, ConvKernel) else kernel)
        method = "fft" if max(k.shape) >= FFT_THRESHOLD else "direct"
    if method == "fft":
        return conv2d_fft(x, kernel, padding)
    if method == "direct":
        return conv2d_direct(x, kernel, padding)
    raise ConvError(f"unknown method {method!r}")


def maxpool2(x) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping 2x2 max pooling over the last two axes.

    Returns the pooled array and, per output cell, the row-major index (0..3)
    of the winning element inside its block; ties go to the lowest index.
    """
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ConvError(f"maxpool2 needs even dims, got {(h, w)}")
    blocks = x.reshape(*x.shape[:-2], h // 2, 2, w // 2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*x.shape[:-2], h // 2, w // 2, 4)
    idx = np.argmax(blocks, axis=-1)
    pooled = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return pooled, idx


def maxpool2_backward(grad, idx) -> np.ndarray:
    """Route ``grad`` back to the winning element of each block."""
    grad = np.asarray(grad, dtype=np.float64)
    ho, wo = grad.shape[-2:]
    blocks = np.zeros(grad.shape + (4,))
    np.put_along_axis(blocks, idx[..., None], grad[..., None], axis=-1)
    blocks = blocks.reshape(*grad.shape, 2, 2)
    return np.moveaxis(blocks, -3, -2).reshape(*grad.shape[:-2], 2 * ho, 2 * wo)


def _bilinear_matrix(n: int, factor: int) -> np.ndarray:
    m = n * factor
    out = np.zeros((m, n))
    if n == 1:
        out[:, 0] = 1.0
        return out
    pos = np.arange(m) * (n - 1) / (m - 1)
    lo = np.minimum(np.floor(pos).astype(int), n - 2)
    frac = pos - lo
    out[np.arange(m), lo] = 1.0 - frac
    out[np.arange(m), lo + 1] += frac
    return out


def upsample(x, factor: int, method: str = "nearest") -> np.ndarray:
    """Enlarge the last two axes by an integer factor.

    ``bilinear`` uses corner-aligned sampling, so border values are kept.
    """
    if factor < 1:
        raise ConvError("upsample factor must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if factor == 1:
        return x.copy()
    if method == "nearest":
        return np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)
    if method == "bilinear":
        mh = _bilinear_matrix(x.shape[-2], factor)
        mw = _bilinear_matrix(x.shape[-1], factor)
        return np.einsum("ih,...hw,jw->...ij", mh, x, mw)
    raise ConvError(f"unknown upsample method {method!r}")


def upsample_backward(grad, factor: int) -> np.ndarray:
    """Adjoint of nearest-neighbour :func:`upsample`: sum each block."""
    grad = np.asarray(grad, dtype=np.float64)
    if factor == 1:
        return grad.copy()
    h, w = grad.shape[-2:]
    g = grad.reshape(*grad.shape[:-2], h // factor, factor, w // factor, factor)
    return g.sum(axis=(-3, -1))


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized 2D Gaussian of odd ``size``."""
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _decimation_matrix(n: int, factor: int) -> np.ndarray:
    # Each output sample sits at the centre of its factor-wide input block;
    # weights are renormalized where the support leaves the image.
    sigma = 0.5 * factor
    radius = 2 * factor
    centres = np.arange(n // factor) * factor + (factor - 1) / 2
    pos = np.arange(n)
    d = pos[None, :] - centres[:, None]
    w = np.where(np.abs(d) <= radius, np.exp(-(d**2) / (2 * sigma**2)), 0.0)
    return w / w.sum(axis=1, keepdims=True)


def antialias_downsample(x, factor: int) -> np.ndarray:
    """Gaussian blur (sigma = factor/2, radius 2*factor) then decimate."""
    x = np.asarray(x, dtype=np.float64)
    if factor < 1:
        raise ConvError("downsample factor must be >= 1")
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ConvError(f"dims {(h, w)} not divisible by {factor}")
    dh = _decimation_matrix(h, factor)
    dw = _decimation_matrix(w, factor)
    return np.einsum("ih,...hw,jw->...ij", dh, x, dw)
