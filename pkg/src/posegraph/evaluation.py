"""Detection rate at torso-normalized radius, and its CSV form."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import Annotation

DEFAULT_RADII = tuple(round(0.05 * i, 2) for i in range(11))


class EvalError(ValueError):
    pass


@dataclass
class DetectionCurve:
    radii: np.ndarray
    rates: np.ndarray  # (joints, radii)
    joint_names: tuple[str, ...] = ()
    model_tag: str = ""
    counts: np.ndarray = field(default=None, repr=False)

    @property
    def mean_rates(self) -> np.ndarray:
        if self.rates.size == 0:
            return np.zeros(len(self.radii))
        return np.nanmean(self.rates, axis=0)

    def rate_at(self, radius: float, joint: int | None = None) -> float:
        idx = int(np.flatnonzero(np.isclose(self.radii, radius))[0])
        return float(self.mean_rates[idx] if joint is None else self.rates[joint, idx])


def normalized_errors(predictions, annotations: Sequence[Annotation]) -> tuple[np.ndarray, np.ndarray]:
    """``(images, joints)`` distances over torso height, plus visibility mask."""
    if isinstance(predictions, Mapping):
        try:
            preds = [predictions[a.image_id] for a in annotations]
        except KeyError as exc:
            raise EvalError(f"no prediction for image id {exc.args[0]!r}") from None
        if len(predictions) != len(annotations):
            raise EvalError("prediction ids do not match annotation ids")
    else:
        preds = list(predictions)
        if len(preds) != len(annotations):
            raise EvalError(f"{len(preds)} predictions for {len(annotations)} annotations")
    if not annotations:
        return np.zeros((0, 0)), np.zeros((0, 0), bool)
    errs, vis = [], []
    for p, a in zip(preds, annotations):
        p = np.asarray(p, dtype=np.float64).reshape(-1, 2)
        if p.shape != a.joints.shape:
            raise EvalError(f"image {a.image_id!r}: prediction shape {p.shape} != {a.joints.shape}")
        if a.torso_height <= 0:
            raise EvalError(f"image {a.image_id!r}: non-positive torso height")
        errs.append(np.linalg.norm(p - a.joints, axis=1) / a.torso_height)
        vis.append(a.visible)
    return np.array(errs), np.array(vis)


def detection_rate(predictions, annotations: Sequence[Annotation], radii=DEFAULT_RADII, joint_names=(), model_tag="") -> DetectionCurve:
    """Fraction of images whose joint lies within ``r * torso_height``.

    ``predictions`` is a sequence of ``(J, 2)`` arrays aligned with
    ``annotations`` or a mapping from ``image_id``. Invisible joints count in
    neither numerator nor denominator.
    """
    radii = np.asarray(radii, dtype=np.float64)
    errs, vis = normalized_errors(predictions, annotations)
    if errs.size == 0:
        return DetectionCurve(radii, np.zeros((0, len(radii))), tuple(joint_names), model_tag, np.zeros(0, int))
    hits = (errs[:, :, None] <= radii[None, None, :]) & vis[:, :, None]
    counts = vis.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        rates = hits.sum(axis=0) / counts[:, None]
    return DetectionCurve(radii, rates, tuple(joint_names), model_tag, counts)


def emit_curves(curve: DetectionCurve, path, model_tag: str | None = None) -> None:
    """Write ``radius, joint, rate, model_tag`` rows, radius-major."""
    tag = curve.model_tag if model_tag is None else model_tag
    names = curve.joint_names or tuple(str(j) for j in range(curve.rates.shape[0]))
    try:
        fh = open(path, "w", newline="")
    except OSError as exc:
        raise EvalError(f"cannot write {path}: {exc}") from exc
    with fh:
        w = csv.writer(fh)
        w.writerow(["radius", "joint", "rate", "model_tag"])
        for ri, r in enumerate(curve.radii):
            for j, name in enumerate(names):
                w.writerow([repr(float(r)), name, repr(float(curve.rates[j, ri])), tag])


def read_curves(path) -> DetectionCurve:
    radii: list[float] = []
    names: list[str] = []
    values: dict[tuple[float, str], float] = {}
    tag = ""
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            r = float(row["radius"])
            if r not in radii:
                radii.append(r)
            if row["joint"] not in names:
                names.append(row["joint"])
            values[(r, row["joint"])] = float(row["rate"])
            tag = row["model_tag"]
    rates = np.array([[values[(r, n)] for r in radii] for n in names]).reshape(len(names), len(radii))
    return DetectionCurve(np.array(radii), rates, tuple(names), tag)
