"""Nesterov SGD and the three-stage training protocol.

Stage 1 fits the part detector to Gaussian target maps. Stage 2 freezes it,
caches its heat-maps and fits the spatial model on them (plus a torso-map
channel). Stage 3 back-propagates through both networks together.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from . import data, detector, evaluation, nn, spatial
from .data import Annotation, Dataset
from .detector import DetectorConfig, PartDetector

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, stage: int, epoch: int, detail: str = ""):
        super().__init__(f"training diverged in stage {stage}, epoch {epoch}{': ' + detail if detail else ''}")
        self.stage = stage
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.03
    momentum: float = 0.9
    batch_size: int = 16
    epochs: tuple[int, int, int] = (10, 10, 2)
    target_sigma: float = 1.0
    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.9, 1.1)
    seed: int = 0
    spatial_learning_rate: float | None = 0.1
    unified_learning_rate: float | None = None
    radii: tuple[float, ...] = (0.1, 0.25, 0.5)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.target_sigma <= 0:
            raise ValueError("target_sigma must be positive")
        lo, hi = self.scale_range
        if not 0.7 <= lo <= hi <= 1.3:
            raise ValueError("scale_range must lie within [0.7, 1.3]")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        if len(self.epochs) != 3 or min(self.epochs) < 0:
            raise ValueError("epochs must be three non-negative counts")

    @property
    def stage_rates(self) -> tuple[float, float, float]:
        lr = self.learning_rate
        s2 = self.spatial_learning_rate if self.spatial_learning_rate is not None else lr
        s3 = self.unified_learning_rate if self.unified_learning_rate is not None else 0.1 * lr
        return lr, s2, s3


@dataclass(frozen=True)
class SpatialConfig:
    kernel_size: int = 15
    beta: float = 1.0
    eps: float = 0.01
    use_torso: bool = True
    method: str = "auto"
    calibrate: bool = True


# ---------------------------------------------------------------------------
# optimizer


def nesterov_step(params: dict, grads: dict, state: dict, lr: float, mu: float) -> None:
    """One lookahead-form Nesterov update, in place.

    ``grads`` must be evaluated at ``params + mu * velocity`` (see
    :func:`lookahead`). Then ``v <- mu*v - lr*g`` and ``params <- params + v``.
    Missing velocities start at zero.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k!r}")
        p = params[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k!r}")
        v = state.get(k)
        if v is None:
            v = state[k] = np.zeros_like(p)
        v *= mu
        v -= lr * g
        p += v


def lookahead(params: dict, state: dict, mu: float) -> dict:
    """Shift parameters to ``params + mu * v`` in place; return the originals."""
    saved = {k: p.copy() for k, p in params.items()}
    for k, p in params.items():
        v = state.get(k)
        if v is not None:
            p += mu * v
    return saved


def restore(params: dict, saved: dict) -> None:
    for k, p in params.items():
        p[...] = saved[k]


# ---------------------------------------------------------------------------
# targets and augmentation


def render_target(annotation: Annotation, geometry: tuple[int, int], sigma: float = 1.0, scale: float = 1.0) -> np.ndarray:
    """One unit-peak Gaussian per joint on a ``geometry`` heat-map grid.

    Joints outside the grid are clamped to the border cell (with a warning).
    Invisible joints get an all-zero map.
    """
    h, w = geometry
    cells = data.to_cells(annotation.joints, scale)
    out = np.zeros((len(cells), h, w))
    for j, (cu, cv) in enumerate(cells):
        if not annotation.visible[j]:
            continue
        if not (-0.5 <= cu <= w - 0.5 and -0.5 <= cv <= h - 0.5):
            log.warning("joint %d at cell (%.2f, %.2f) outside %dx%d map; clamped", j, cu, cv, h, w)
        out[j] = data.gaussian_map((cu, cv), geometry, sigma)
    return out


@dataclass(frozen=True)
class Transform:
    flip: bool = False
    scale: float = 1.0

    @property
    def identity(self) -> bool:
        return not self.flip and self.scale == 1.0


def _zoom(maps: np.ndarray, s: float) -> np.ndarray:
    if s == 1.0:
        return maps.copy()
    h, w = maps.shape[-2:]
    c = np.array([(h - 1) / 2, (w - 1) / 2])
    out = np.empty_like(maps)
    flat_in = maps.reshape(-1, h, w)
    flat_out = out.reshape(-1, h, w)
    for i in range(flat_in.shape[0]):
        flat_out[i] = ndimage.affine_transform(flat_in[i], np.eye(2) / s, offset=c - c / s, order=1, mode="constant", cval=0.0)
    return out


def transform_maps(maps: np.ndarray, t: Transform, swaps=()) -> np.ndarray:
    """Apply ``t`` to ``(..., C, H, W)`` maps; flipping also swaps channel pairs."""
    out = np.asarray(maps, dtype=np.float64)
    if t.flip:
        out = out[..., ::-1].copy()
        for a, b in swaps:
            out[..., [a, b], :, :] = out[..., [b, a], :, :]
    return _zoom(out, t.scale)


def transform_annotation(ann: Annotation, t: Transform, size: tuple[int, int], swaps=()) -> Annotation:
    h, w = size
    joints = ann.joints.copy()
    visible = ann.visible.copy()
    u, v, bw, bh = ann.torso_box
    if t.flip:
        joints[:, 0] = (w - 1) - joints[:, 0]
        u = (w - 1) - (u + bw)
        for a, b in swaps:
            joints[[a, b]] = joints[[b, a]]
            visible[[a, b]] = visible[[b, a]]
    c = np.array([(w - 1) / 2, (h - 1) / 2])
    s = t.scale
    joints = c + s * (joints - c)
    u, v = c[0] + s * (u - c[0]), c[1] + s * (v - c[1])
    return Annotation(joints, (u, v, bw * s, bh * s), visible, ann.person_id, ann.image_id)


def draw_transform(ann: Annotation, config: TrainConfig, rng, size: tuple[int, int], swaps=()) -> Transform:
    """Random flip/scale keeping every visible joint inside the frame."""
    h, w = size
    flip = bool(rng.random() < config.flip_prob)
    for _ in range(10):
        s = float(rng.uniform(*config.scale_range))
        t = Transform(flip, s)
        moved = transform_annotation(ann, t, size, swaps)
        pts = moved.joints[moved.visible]
        if np.all((pts >= 0) & (pts <= np.array([w - 1, h - 1]))):
            return t
    return Transform(flip, 1.0)


def augment(image, annotation: Annotation, config: TrainConfig, rng, swaps=()) -> tuple[np.ndarray, Annotation]:
    """Randomly flip and rescale an image and its annotation together.

    ``swaps`` lists the (left, right) joint index pairs exchanged by a flip.
    """
    img = np.asarray(image, dtype=np.float64)
    size = img.shape[-2:]
    t = draw_transform(annotation, config, rng, size, swaps)
    return transform_maps(img, t), transform_annotation(annotation, t, size, swaps)


# ---------------------------------------------------------------------------
# models and prediction


def joint_set(names, use_torso: bool = True) -> spatial.JointSet:
    names = tuple(names)
    if use_torso:
        return spatial.JointSet(names + ("torso",), (False,) * len(names) + (True,))
    return spatial.JointSet(names)


def spatial_inputs(unaries: np.ndarray, annotations, det_cfg: DetectorConfig, use_torso: bool) -> np.ndarray:
    """Append the torso-map channel to ``(N, J, h, w)`` unaries when enabled."""
    if not use_torso:
        return unaries
    geom = unaries.shape[-2:]
    torso = np.stack([data.render_torso_map(a, geom, det_cfg.pool_factor)[None] for a in annotations])
    return np.concatenate([unaries, torso], axis=1)


def _banks_batch(images, det_cfg: DetectorConfig) -> list[np.ndarray]:
    pyrs = [detector.build_pyramid(img, det_cfg.num_banks) for img in images]
    return [np.stack([p[b] for p in pyrs]) for b in range(det_cfg.num_banks)]


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def detector_maps(images, det_cfg: DetectorConfig, params, batch_size: int = 32) -> np.ndarray:
    net = PartDetector(det_cfg, params)
    out = [net.forward(_banks_batch(images[sl], det_cfg)) for sl in _batches(len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, det_cfg.num_joints, 0, 0))


def predict(dataset: Dataset, det_cfg: DetectorConfig, det_params, spatial_params=None, use_torso: bool = True, method: str = "auto") -> tuple[list[np.ndarray], np.ndarray]:
    """Joint predictions ``(J, 2)`` per image and the final heat-maps."""
    maps = detector_maps(dataset.images, det_cfg, det_params)
    if spatial_params is not None:
        net = spatial.SpatialModel(spatial_params, method)
        inputs = spatial_inputs(maps, dataset.annotations, det_cfg, use_torso)
        maps = np.concatenate([net.forward(inputs[sl]) for sl in _batches(len(inputs), 32)]) if len(inputs) else maps
    preds = []
    for m in maps:
        hm = detector._heatmap_set(m, det_cfg)
        preds.append(np.array([[u, v] for _, u, v in detector.extract_joints(hm)]))
    return preds, maps


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    detector_config: DetectorConfig
    joints: spatial.JointSet
    detector_stage1: dict[str, np.ndarray]
    spatial_stage2: spatial.SpatialModelParams
    detector_unified: dict[str, np.ndarray]
    spatial_unified: spatial.SpatialModelParams
    metrics: list[dict] = field(default_factory=list)


def _copy(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}


def _sgd_epoch(params, state, order, batch_size, loss_grad: Callable, lr, mu, stage, epoch) -> float:
    total, count = 0.0, 0
    for sl in _batches(len(order), batch_size):
        idx = order[sl]
        saved = lookahead(params, state, mu)
        loss, grads = loss_grad(idx)
        restore(params, saved)
        if not math.isfinite(loss):
            raise TrainingDiverged(stage, epoch, "loss is not finite")
        try:
            nesterov_step(params, grads, state, lr, mu)
        except FloatingPointError as exc:
            raise TrainingDiverged(stage, epoch, str(exc)) from exc
        total += loss * len(idx)
        count += len(idx)
    return total / max(count, 1)


def _metric_row(stage, epoch, split, mse, curve, radii) -> dict:
    row = {"stage": stage, "epoch": epoch, "split": split, "mse": mse}
    for r in radii:
        row[f"det_rate@{r}"] = curve.rate_at(r) if curve is not None else float("nan")
    return row


def initial_spatial(train: Dataset, det_cfg: DetectorConfig, unaries: np.ndarray, scfg: SpatialConfig) -> spatial.SpatialModelParams:
    joints = joint_set(train.joint_names, scfg.use_torso)
    pts = np.stack([a.joints for a in train.annotations])
    vis = np.stack([a.visible for a in train.annotations])
    if scfg.use_torso:
        torso = np.array([a.torso_center for a in train.annotations])[:, None]
        pts = np.concatenate([pts, torso], axis=1)
        vis = np.concatenate([vis, np.ones((len(vis), 1), bool)], axis=1)
    mean = float(np.mean(nn.relu_eps_fwd(unaries, scfg.eps))) if unaries.size else 1.0
    params = spatial.init_params(pts, joints, scfg.kernel_size, det_cfg.pool_factor, vis, mean, scfg.beta, scfg.eps)
    if not scfg.calibrate:
        return params
    geom = unaries.shape[-2:]
    inputs = spatial_inputs(unaries, train.annotations, det_cfg, scfg.use_torso)
    nj = det_cfg.num_joints
    cells = np.rint(data.to_cells(pts[:, :nj], det_cfg.pool_factor)).astype(int)
    cells = np.clip(cells, 0, np.array([geom[1] - 1, geom[0] - 1]))
    return spatial.calibrate_gains(params, inputs, cells, vis[:, :nj])


def train_staged(
    train: Dataset,
    val: Dataset,
    det_cfg: DetectorConfig,
    scfg: SpatialConfig,
    tcfg: TrainConfig,
    cache_dir=None,
    detector_init: dict | None = None,
    skip_stage1: bool = False,
    metric_log: Callable[[dict], None] | None = None,
) -> TrainResult:
    rng = np.random.default_rng(tcfg.seed)
    swaps = train.symmetry_indices()
    lr1, lr2, lr3 = tcfg.stage_rates
    mu, bs = tcfg.momentum, tcfg.batch_size
    n = len(train)
    if n == 0:
        raise ValueError("empty training set")
    size = train.images[0].shape
    for img in train.images:
        det_cfg.check_image(*img.shape)
    geom = det_cfg.heatmap_shape(*size)
    pf = det_cfg.pool_factor
    metrics: list[dict] = []

    def record(row):
        metrics.append(row)
        if metric_log:
            metric_log(row)
        log.info("%s", row)

    def evaluate(stage, epoch, det_params, sp_params):
        if not len(val):
            return
        preds, maps = predict(val, det_cfg, det_params, sp_params, scfg.use_torso, scfg.method)
        targets = np.stack([render_target(a, geom, tcfg.target_sigma, pf) for a in val.annotations])
        mse = nn.mse_loss(maps, targets)[0]
        curve = evaluation.detection_rate(preds, val.annotations, tcfg.radii, val.joint_names)
        record(_metric_row(stage, epoch, "val", mse, curve, tcfg.radii))

    def sample(i, augmenting=True):
        ann = train.annotations[i]
        t = draw_transform(ann, tcfg, rng, size, swaps) if augmenting else Transform()
        return t, transform_annotation(ann, t, size, swaps)

    # -- stage 1: part detector ------------------------------------------------
    det = PartDetector(det_cfg, _copy(detector_init) if detector_init else None, seed=tcfg.seed)
    state: dict = {}

    def det_loss(idx):
        imgs, tgts = [], []
        for i in idx:
            t, ann = sample(i)
            imgs.append(transform_maps(train.images[i], t))
            tgts.append(render_target(ann, geom, tcfg.target_sigma, pf))
        out = det.forward(_banks_batch(imgs, det_cfg))
        loss, g = nn.mse_loss(out, np.stack(tgts))
        det.backward(g)
        return loss, det.grads

    if not skip_stage1:
        for epoch in range(tcfg.epochs[0]):
            order = rng.permutation(n)
            loss = _sgd_epoch(det.params, state, order, bs, det_loss, lr1, mu, 1, epoch)
            record(_metric_row(1, epoch, "train", loss, None, tcfg.radii))
            evaluate(1, epoch, det.params, None)
    detector_stage1 = _copy(det.params)

    # -- stage 2: spatial model on frozen heat-maps -----------------------------
    unaries = detector_maps(train.images, det_cfg, detector_stage1)
    if cache_dir is not None:
        cache = Path(cache_dir)
        cache.mkdir(parents=True, exist_ok=True)
        for i, m in enumerate(unaries):
            nn.save_params(cache / f"heatmap_{i:05d}.bin", {"unary": m}, {"image_id": train.annotations[i].image_id})
    sp_params = initial_spatial(train, det_cfg, unaries, scfg)
    sp = spatial.SpatialModel(sp_params, scfg.method)
    state = {}

    def sp_loss(idx):
        ins, tgts = [], []
        for i in idx:
            t, ann = sample(i)
            u = transform_maps(unaries[i], t, swaps)
            ins.append(spatial_inputs(u[None], [ann], det_cfg, scfg.use_torso)[0])
            tgts.append(render_target(ann, geom, tcfg.target_sigma, pf))
        out = sp.forward(np.stack(ins))
        loss, g = nn.mse_loss(out, np.stack(tgts))
        sp.backward(g)
        return loss, sp.grads

    for epoch in range(tcfg.epochs[1]):
        order = rng.permutation(n)
        loss = _sgd_epoch(sp.params, state, order, bs, sp_loss, lr2, mu, 2, epoch)
        record(_metric_row(2, epoch, "train", loss, None, tcfg.radii))
        evaluate(2, epoch, detector_stage1, sp_params)
    spatial_stage2 = sp_params.copy()

    # -- stage 3: unified fine-tuning -------------------------------------------
    sp3 = spatial_stage2.copy()
    spn = spatial.SpatialModel(sp3, scfg.method)
    det3 = PartDetector(det_cfg, _copy(detector_stage1))
    params = {f"det.{k}": v for k, v in det3.params.items()}
    params.update({f"sp.{k}": v for k, v in spn.params.items()})
    state = {}
    nj = det_cfg.num_joints

    def unified_loss(idx):
        imgs, anns, tgts = [], [], []
        for i in idx:
            t, ann = sample(i)
            imgs.append(transform_maps(train.images[i], t))
            anns.append(ann)
            tgts.append(render_target(ann, geom, tcfg.target_sigma, pf))
        un = det3.forward(_banks_batch(imgs, det_cfg))
        out = spn.forward(spatial_inputs(un, anns, det_cfg, scfg.use_torso))
        loss, g = nn.mse_loss(out, np.stack(tgts))
        g_in = spn.backward(g)
        det3.backward(g_in[:, :nj])
        grads = {f"det.{k}": v for k, v in det3.grads.items()}
        grads.update({f"sp.{k}": v for k, v in spn.grads.items()})
        return loss, grads

    for epoch in range(tcfg.epochs[2]):
        order = rng.permutation(n)
        loss = _sgd_epoch(params, state, order, bs, unified_loss, lr3, mu, 3, epoch)
        record(_metric_row(3, epoch, "train", loss, None, tcfg.radii))
        evaluate(3, epoch, det3.params, sp3)

    return TrainResult(det_cfg, sp_params.joints, detector_stage1, spatial_stage2, _copy(det3.params), sp3.copy(), metrics)


# ---------------------------------------------------------------------------
# model files


def save_model(path, kind: str, det_cfg: DetectorConfig, det_params, sp_params=None, extra: dict | None = None) -> None:
    """Detector (and optionally spatial) parameters in one nn-format file.

    Detector tensors are prefixed ``det.``, spatial ones ``sp.``; the metadata
    carries the detector config and the spatial pair-index table.
    """
    tensors = {f"det.{k}": v for k, v in det_params.items()}
    meta = {"kind": kind, "detector_config": det_cfg.to_dict()}
    if sp_params is not None:
        tensors["sp.weight"] = sp_params.weights
        tensors["sp.bias"] = sp_params.biases
        joints = sp_params.joints
        meta["spatial"] = {
            "beta": sp_params.beta,
            "eps": sp_params.eps,
            "kernel_size": sp_params.kernel_size,
            "joints": list(joints.names) if joints else None,
            "virtual": list(joints.virtual) if joints else None,
            "pairs": [[a, v] for a in range(sp_params.n_out) for v in range(sp_params.n_in)],
        }
    meta.update(extra or {})
    nn.save_params(path, tensors, meta)


@dataclass
class ModelBundle:
    kind: str
    detector_config: DetectorConfig
    detector_params: dict[str, np.ndarray]
    spatial_params: spatial.SpatialModelParams | None
    meta: dict

    @property
    def uses_torso(self) -> bool:
        p = self.spatial_params
        return p is not None and p.joints is not None and any(p.joints.virtual)


def load_model(path) -> ModelBundle:
    tensors, meta = nn.load_params(path)
    if "detector_config" not in meta:
        raise nn.NNError(f"{path}: missing detector config block")
    cfg = DetectorConfig.from_dict(meta["detector_config"])
    det = {k[4:]: v for k, v in tensors.items() if k.startswith("det.")}
    sp = None
    if "spatial" in meta:
        sm = meta["spatial"]
        joints = spatial.JointSet(tuple(sm["joints"]), tuple(sm["virtual"])) if sm.get("joints") else None
        sp = spatial.SpatialModelParams(tensors["sp.weight"], tensors["sp.bias"], sm["beta"], sm["eps"], joints)
    return ModelBundle(meta.get("kind", "detector"), cfg, det, sp, meta)


def composed_loss(dataset: Dataset, det_cfg: DetectorConfig, det_params, sp_params, scfg: SpatialConfig, sigma: float = 1.0) -> float:
    """MSE of detector+spatial on un-augmented data."""
    _, maps = predict(dataset, det_cfg, det_params, sp_params, scfg.use_torso, scfg.method)
    geom = maps.shape[-2:]
    targets = np.stack([render_target(a, geom, sigma, det_cfg.pool_factor) for a in dataset.annotations])
    return nn.mse_loss(maps, targets)[0]
