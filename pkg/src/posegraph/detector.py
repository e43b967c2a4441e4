"""Convolutional part detector.

The network is defined as a sliding-window classifier: a ``window x window``
crop goes through valid convolutions and 2x2 max pooling until exactly a
``fc_kernel x fc_kernel`` feature block remains, which two fully-connected
stages turn into one score per joint.

:func:`dense_forward` evaluates the same network on the whole image at once
(the fully-connected stages become ``fc_kernel x fc_kernel`` and ``1 x 1``
convolutions). With ``pad_input`` the LCN'd bank images are zero padded so
that one output cell exists per ``pool_factor`` input pixels, centred on the
cell. Lower-resolution banks run their own convolution stages; their feature
maps are nearest-upsampled, centre-cropped and added to bank 0 before the
fully-connected stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import conv, nn
from .tensor import argmax2d


class DetectorError(ValueError):
    pass


@dataclass(frozen=True)
class ConvStage:
    kernel: int
    features: int
    pool: bool = True


@dataclass(frozen=True)
class DetectorConfig:
    num_joints: int = 7
    num_banks: int = 3
    window: int = 32
    in_channels: int = 1
    stages: tuple[ConvStage, ...] = (ConvStage(5, 16), ConvStage(5, 32))
    fc_features: int = 128
    act_eps: float = 0.01
    pad_input: bool = True

    def __post_init__(self):
        stages = tuple(s if isinstance(s, ConvStage) else ConvStage(*s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        if self.num_banks < 1 or self.num_joints < 1:
            raise DetectorError("need at least one bank and one joint")
        if self.window % self.pool_factor:
            raise DetectorError(f"window {self.window} not divisible by pooling factor {self.pool_factor}")
        if not self.pad_input and self.num_banks > 1:
            raise DetectorError("unpadded evaluation is only defined for a single bank")
        self.fc_kernel  # validates the stage arithmetic

    @property
    def pool_factor(self) -> int:
        return 2 ** sum(s.pool for s in self.stages)

    @property
    def fc_kernel(self) -> int:
        """Side of the feature block left from one window."""
        size = self.window
        for s in self.stages:
            size -= s.kernel - 1
            if size < 1:
                raise DetectorError("window too small for the convolution stages")
            if s.pool:
                if size % 2:
                    raise DetectorError(f"odd feature size {size} before pooling")
                size //= 2
        return size

    @property
    def receptive_field(self) -> int:
        """Input pixels feeding a single pre-FC feature cell."""
        return self.window - self.pool_factor * (self.fc_kernel - 1)

    @property
    def input_pad(self) -> int:
        return self.window // 2 - self.pool_factor // 2 if self.pad_input else 0

    def heatmap_shape(self, h: int, w: int) -> tuple[int, int]:
        pf = self.pool_factor
        if self.pad_input:
            return h // pf, w // pf
        return (h - self.window) // pf + 1, (w - self.window) // pf + 1

    def check_image(self, h: int, w: int) -> None:
        unit = self.pool_factor * 2 ** (self.num_banks - 1)
        if self.pad_input:
            if h % unit or w % unit:
                raise DetectorError(f"image {(h, w)} must be divisible by {unit}")
        elif h < self.window or w < self.window or (h - self.window) % self.pool_factor or (w - self.window) % self.pool_factor:
            raise DetectorError(f"image {(h, w)} incompatible with window {self.window}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(asdict(s).values()) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        d["stages"] = tuple(ConvStage(*s) for s in d["stages"])
        return cls(**d)


def full_scale_config(num_joints: int = 7) -> DetectorConfig:
    """64x64 window, three 5x5 stages and a 9x9/512 first FC stage."""
    return DetectorConfig(
        num_joints=num_joints,
        window=64,
        in_channels=3,
        stages=(ConvStage(5, 128), ConvStage(5, 128), ConvStage(5, 128, pool=False)),
        fc_features=512,
    )


@dataclass
class HeatMapSet:
    """Per-joint maps plus the image-pixels-per-cell ratio."""

    maps: np.ndarray
    scale_factor_to_image: float = 1.0
    offset: float = 0.0
    names: tuple[str, ...] = field(default=())

    @property
    def resolution(self) -> tuple[int, int]:
        return self.maps.shape[-2:]

    def to_image(self, row: float, col: float) -> tuple[float, float]:
        """Cell (row, col) -> image (u, v) at the cell centre."""
        s = self.scale_factor_to_image
        return (col + 0.5) * s - 0.5 + self.offset, (row + 0.5) * s - 0.5 + self.offset


def build_pyramid(image, num_banks: int) -> list[np.ndarray]:
    """LCN'd image at full resolution, then anti-aliased halvings, each LCN'd."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    h, w = img.shape[-2:]
    f = 2 ** (num_banks - 1)
    if h % f or w % f:
        raise DetectorError(f"image {(h, w)} not divisible by {f}")
    banks = [nn.lcn_fwd(img)]
    for b in range(1, num_banks):
        banks.append(nn.lcn_fwd(conv.antialias_downsample(img, 2**b)))
    return banks


def init_params(config: DetectorConfig, seed=0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}

    def he(shape):
        fan_in = int(np.prod(shape[1:]))
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)

    for b in range(config.num_banks):
        c = config.in_channels
        for s, st in enumerate(config.stages):
            params[f"bank{b}.conv{s}.weight"] = he((st.features, c, st.kernel, st.kernel))
            params[f"bank{b}.conv{s}.bias"] = np.zeros(st.features)
            c = st.features
    f, k = config.stages[-1].features, config.fc_kernel
    params["fc1.weight"] = he((config.fc_features, f, k, k))
    params["fc1.bias"] = np.zeros(config.fc_features)
    params["fc2.weight"] = he((config.num_joints, config.fc_features, 1, 1)) * 0.1
    params["fc2.bias"] = np.zeros(config.num_joints)
    return params


class PartDetector:
    """Batched dense detector with a hand-written backward pass.

    ``forward`` takes a list of per-bank arrays shaped ``(N, C, Hb, Wb)`` and
    returns ``(N, J, h, w)`` heat-maps.
    """

    def __init__(self, config: DetectorConfig, params: dict[str, np.ndarray] | None = None, seed=0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def _bank_offset(self, b: int) -> int:
        return (2**b - 1) * (self.config.fc_kernel - 1) // 2

    def forward(self, banks) -> np.ndarray:
        cfg = self.config
        if isinstance(banks, np.ndarray):
            banks = [banks]
        if len(banks) != cfg.num_banks:
            raise DetectorError(f"expected {cfg.num_banks} banks, got {len(banks)}")
        p, eps = self.params, cfg.act_eps
        pad = cfg.input_pad
        caches = []
        merged = None
        for b, x in enumerate(banks):
            x = np.asarray(x, dtype=np.float64)
            if x.ndim == 3:
                x = x[None]
            if x.shape[1] != cfg.in_channels:
                raise DetectorError(f"bank {b} has {x.shape[1]} channels, expected {cfg.in_channels}")
            if pad:
                x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
            stage_caches = []
            for s, st in enumerate(cfg.stages):
                pre, cols = nn.conv_layer_fwd(x, p[f"bank{b}.conv{s}.weight"], p[f"bank{b}.conv{s}.bias"])
                act = nn.relu_eps_fwd(pre, eps)
                idx = None
                if st.pool:
                    out, idx = conv.maxpool2(act)
                else:
                    out = act
                stage_caches.append((x.shape, cols, pre, idx))
                x = out
            if b == 0:
                merged = x
                ref_shape = x.shape
            else:
                up = conv.upsample(x, 2**b)
                o = self._bank_offset(b)
                crop = up[:, :, o : o + ref_shape[2], o : o + ref_shape[3]]
                if crop.shape != ref_shape:
                    raise DetectorError(f"bank {b} features {crop.shape} do not cover {ref_shape}")
                merged = merged + crop
                stage_caches.append(("merge", x.shape, up.shape))
            caches.append(stage_caches)
        pre1, cols1 = nn.conv_layer_fwd(merged, p["fc1.weight"], p["fc1.bias"])
        act1 = nn.relu_eps_fwd(pre1, eps)
        out, cols2 = nn.conv_layer_fwd(act1, p["fc2.weight"], p["fc2.bias"])
        self._cache = (caches, merged.shape, cols1, pre1, act1.shape, cols2)
        return out

    def backward(self, grad) -> list[np.ndarray]:
        """Fill ``self.grads``; return gradients w.r.t. each (padded-off) bank input."""
        if self._cache is None:
            raise DetectorError("backward before forward")
        cfg, p, eps = self.config, self.params, self.config.act_eps
        caches, merged_shape, cols1, pre1, act1_shape, cols2 = self._cache
        g = {}
        d_act1, g["fc2.weight"], g["fc2.bias"] = nn.conv_layer_bwd(grad, cols2, act1_shape, p["fc2.weight"])
        d_pre1 = nn.relu_eps_bwd(pre1, d_act1, eps)
        d_merged, g["fc1.weight"], g["fc1.bias"] = nn.conv_layer_bwd(d_pre1, cols1, merged_shape, p["fc1.weight"])
        bank_grads = []
        pad = cfg.input_pad
        for b, stage_caches in enumerate(caches):
            if b == 0:
                d = d_merged
            else:
                _, feat_shape, up_shape = stage_caches[-1]
                stage_caches = stage_caches[:-1]
                o = self._bank_offset(b)
                d_up = np.zeros(up_shape)
                d_up[:, :, o : o + merged_shape[2], o : o + merged_shape[3]] = d_merged
                d = conv.upsample_backward(d_up, 2**b)
            for s in reversed(range(len(cfg.stages))):
                x_shape, cols, pre, idx = stage_caches[s]
                if idx is not None:
                    d = conv.maxpool2_backward(d, idx)
                d = nn.relu_eps_bwd(pre, d, eps)
                d, g[f"bank{b}.conv{s}.weight"], g[f"bank{b}.conv{s}.bias"] = nn.conv_layer_bwd(
                    d, cols, x_shape, p[f"bank{b}.conv{s}.weight"]
                )
            if pad:
                d = d[:, :, pad:-pad, pad:-pad]
            bank_grads.append(d)
        self.grads = g
        return bank_grads

    def heatmaps(self, banks, names=()) -> HeatMapSet:
        out = self.forward([np.asarray(b)[None] if np.ndim(b) == 3 else b for b in banks])
        return _heatmap_set(out[0], self.config, names)


def _heatmap_set(maps, config: DetectorConfig, names=()) -> HeatMapSet:
    pf = config.pool_factor
    # unpadded output cell 0 is the window at the image's top-left corner
    offset = 0.0 if config.pad_input else (config.window - pf) / 2
    return HeatMapSet(maps, float(pf), offset, tuple(names))


def dense_forward(pyramid, config: DetectorConfig, params) -> HeatMapSet:
    """Whole-image evaluation of one image's pyramid (list of ``(C, H, W)``)."""
    if len(pyramid) != config.num_banks:
        raise DetectorError(f"pyramid has {len(pyramid)} banks, config expects {config.num_banks}")
    config.check_image(*np.shape(pyramid[0])[-2:])
    return PartDetector(config, params).heatmaps(pyramid)


def _conv_stages(x, config: DetectorConfig, params, bank: int):
    eps = config.act_eps
    for s, st in enumerate(config.stages):
        x, _ = nn.conv_layer_fwd(x, params[f"bank{bank}.conv{s}.weight"], params[f"bank{bank}.conv{s}.bias"])
        x = nn.relu_eps_fwd(x, eps)
        if st.pool:
            x, _ = conv.maxpool2(x)
    return x


def sliding_window_forward(image, config: DetectorConfig, params) -> HeatMapSet:
    """Patchwise reference evaluation of the detector.

    Every output cell is computed independently from its own crops of the
    padded bank images; no feature is shared between positions.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    h, w = img.shape[-2:]
    if h < config.window or w < config.window:
        raise DetectorError(f"image {(h, w)} smaller than window {config.window}")
    config.check_image(h, w)
    pyramid = build_pyramid(img, config.num_banks)
    pad, pf, k = config.input_pad, config.pool_factor, config.fc_kernel
    rf = config.receptive_field
    padded = [np.pad(bk, ((0, 0), (pad, pad), (pad, pad))) for bk in pyramid]
    oh, ow = config.heatmap_shape(h, w)
    out = np.empty((config.num_joints, oh, ow))
    taps = np.arange(k)
    for i in range(oh):
        for j in range(ow):
            block = 0.0
            for b, bank in enumerate(padded):
                f = 2**b
                o = (f - 1) * (k - 1) // 2
                rows = (i + taps + o) // f
                cols = (j + taps + o) // f
                r0, c0 = rows[0], cols[0]
                crop = bank[:, pf * r0 : pf * rows[-1] + rf, pf * c0 : pf * cols[-1] + rf]
                feats = _conv_stages(crop[None], config, params, b)[0]
                block = block + feats[:, rows - r0][:, :, cols - c0]
            hidden = np.einsum("fcij,cij->f", params["fc1.weight"], block) + params["fc1.bias"]
            hidden = nn.relu_eps_fwd(hidden, config.act_eps)
            out[:, i, j] = params["fc2.weight"][:, :, 0, 0] @ hidden + params["fc2.bias"]
    return _heatmap_set(out, config)


def extract_joints(hm: HeatMapSet) -> list[tuple[int, float, float]]:
    """Per-joint argmax mapped to image ``(joint, u, v)`` at the cell centre."""
    maps = np.asarray(hm.maps)
    result = []
    for j in range(maps.shape[0]):
        r, c, _ = argmax2d(maps, j)
        u, v = hm.to_image(r, c)
        result.append((j, u, v))
    return result
