"""Synthetic stick-figure scenes and the on-disk dataset format.

A scene holds one labeled figure plus ``num_distractors`` unlabeled figures
drawn from the same skeleton distribution, rendered as anti-aliased line
segments on a dark background.

On disk a dataset is a directory with ``images/NNNNN.pgm`` (binary P5,
8 or 16 bit) and ``annotations.jsonl``: a header object (joint names,
symmetry pairs, image size) followed by one object per image.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Bone:
    """Segment from ``parent`` to joint ``name``.

    ``angle`` is in degrees, image convention (0 = +u, 90 = +v i.e. down).
    ``relative`` angles are added to the parent bone's angle.
    """

    name: str
    parent: str
    length: tuple[float, float]
    angle: tuple[float, float]
    relative: bool = False
    annotated: bool = True
    thickness: float = 1.2


NECK = "neck"

# Default 7-joint upper body. Person-left joints appear on the image right.
DEFAULT_BONES: tuple[Bone, ...] = (
    Bone("pelvis", NECK, (8.0, 10.0), (80.0, 100.0), annotated=False, thickness=2.2),
    Bone("head", NECK, (3.0, 4.0), (-105.0, -75.0)),
    Bone("lsho", NECK, (2.5, 3.5), (-15.0, 15.0)),
    Bone("rsho", NECK, (2.5, 3.5), (165.0, 195.0)),
    Bone("lelb", "lsho", (4.0, 5.0), (-20.0, 110.0)),
    Bone("relb", "rsho", (4.0, 5.0), (70.0, 200.0)),
    Bone("lwri", "lelb", (3.5, 4.5), (-60.0, 60.0), relative=True),
    Bone("rwri", "relb", (3.5, 4.5), (-60.0, 60.0), relative=True),
)

DEFAULT_SYMMETRY: tuple[tuple[str, str], ...] = (("lsho", "rsho"), ("lelb", "relb"), ("lwri", "rwri"))


@dataclass(frozen=True)
class SyntheticSceneConfig:
    image_size: tuple[int, int] = (32, 32)
    bones: tuple[Bone, ...] = DEFAULT_BONES
    symmetry: tuple[tuple[str, str], ...] = DEFAULT_SYMMETRY
    num_distractors: int = 0
    noise: float = 0.05
    intensity: float = 1.0
    head_radius: float = 1.5
    min_separation: float = 8.0
    margin: float = 1.0

    def __post_init__(self):
        seen = {NECK}
        for b in self.bones:
            if b.parent not in seen:
                raise DataError(f"bone {b.name!r} attached to unknown parent {b.parent!r}")
            if b.name in seen:
                raise DataError(f"duplicate joint {b.name!r}")
            seen.add(b.name)
        if "pelvis" not in seen:
            raise DataError("skeleton needs a 'pelvis' bone to define the torso")

    @property
    def joint_names(self) -> tuple[str, ...]:
        return tuple(b.name for b in self.bones if b.annotated)


@dataclass
class Annotation:
    """Ground truth for the labeled figure of one image.

    ``joints`` is ``(J, 2)`` in ``(u, v)`` pixel coordinates (pixel centres at
    integers); ``torso_box`` is ``(u, v, w, h)`` with ``(u, v)`` the top-left.
    """

    joints: np.ndarray
    torso_box: tuple[float, float, float, float]
    visible: np.ndarray = None
    person_id: int = 0
    image_id: str = ""

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 2)
        if self.visible is None:
            self.visible = np.ones(len(self.joints), bool)
        self.visible = np.asarray(self.visible, bool)
        self.torso_box = tuple(float(x) for x in self.torso_box)
        if self.torso_box[3] <= 0:
            raise DataError("torso box height must be positive")

    @property
    def torso_height(self) -> float:
        return self.torso_box[3]

    @property
    def torso_center(self) -> tuple[float, float]:
        u, v, w, h = self.torso_box
        return u + w / 2, v + h / 2

    def __eq__(self, other):
        if not isinstance(other, Annotation):
            return NotImplemented
        return (
            np.array_equal(self.joints, other.joints)
            and np.array_equal(self.visible, other.visible)
            and self.torso_box == other.torso_box
            and self.person_id == other.person_id
            and self.image_id == other.image_id
        )


@dataclass
class Dataset:
    images: list[np.ndarray]
    annotations: list[Annotation]
    joint_names: tuple[str, ...]
    symmetry: tuple[tuple[str, str], ...] = ()
    bit_depth: int = 16

    def __post_init__(self):
        if len(self.images) != len(self.annotations):
            raise DataError("one annotation per image required")

    def __len__(self):
        return len(self.images)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            tuple(self.joint_names) == tuple(other.joint_names)
            and [tuple(p) for p in self.symmetry] == [tuple(p) for p in other.symmetry]
            and len(self) == len(other)
            and all(np.array_equal(a, b) for a, b in zip(self.images, other.images))
            and all(a == b for a, b in zip(self.annotations, other.annotations))
        )

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset(
            [self.images[i] for i in idx],
            [self.annotations[i] for i in idx],
            self.joint_names,
            self.symmetry,
            self.bit_depth,
        )

    def symmetry_indices(self) -> list[tuple[int, int]]:
        pos = {n: i for i, n in enumerate(self.joint_names)}
        return [(pos[a], pos[b]) for a, b in self.symmetry]


# ---------------------------------------------------------------------------
# generation


@dataclass
class _Figure:
    points: dict[str, np.ndarray] = field(default_factory=dict)

    def shifted(self, offset) -> "_Figure":
        return _Figure({k: v + offset for k, v in self.points.items()})


def _sample_figure(config: SyntheticSceneConfig, rng: np.random.Generator) -> _Figure:
    pts = {NECK: np.zeros(2)}
    angles = {NECK: 90.0}
    for b in config.bones:
        length = rng.uniform(*b.length)
        ang = rng.uniform(*b.angle)
        if b.relative:
            ang += angles[b.parent]
        rad = math.radians(ang)
        pts[b.name] = pts[b.parent] + length * np.array([math.cos(rad), math.sin(rad)])
        angles[b.name] = ang
    return _Figure(pts)


def _torso_box(fig: _Figure, config: SyntheticSceneConfig) -> tuple[float, float, float, float]:
    neck, pelvis = fig.points[NECK], fig.points["pelvis"]
    paired = {a for pair in config.symmetry for a in pair}
    shoulders = [fig.points[b.name] for b in config.bones if b.parent == NECK and b.name in paired]
    xs = [neck[0], pelvis[0]] + [s[0] for s in shoulders]
    u0, u1 = min(xs), max(xs)
    v0, v1 = min(neck[1], pelvis[1]), max(neck[1], pelvis[1])
    return (u0, v0, u1 - u0, v1 - v0)


def _place(config, rng, others, contained: bool = True) -> _Figure:
    """Sample a pose and position whose torso keeps ``min_separation`` from ``others``.

    A ``contained`` figure lies entirely inside the frame; otherwise only its
    torso centre has to.
    """
    h, w = config.image_size
    for _ in range(50):
        fig = _sample_figure(config, rng)
        mid = (fig.points[NECK] + fig.points["pelvis"]) / 2
        if contained:
            allp = np.array(list(fig.points.values()))
            lo = allp.min(axis=0) - config.head_radius - config.margin
            hi = allp.max(axis=0) + config.head_radius + config.margin
            if hi[0] - lo[0] > w - 1 or hi[1] - lo[1] > h - 1:
                continue
        else:
            lo = mid - config.margin
            hi = mid + config.margin
        offset = np.array([rng.uniform(-lo[0], w - 1 - hi[0]), rng.uniform(-lo[1], h - 1 - hi[1])])
        if all(np.linalg.norm(offset + mid - c) >= config.min_separation for c in others):
            return fig.shifted(offset)
    raise DataError("could not place figure after 50 tries")


def _segment_coverage(shape, p0, p1, thickness) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    d = p1 - p0
    denom = float(d @ d)
    if denom == 0.0:
        t = np.zeros_like(xx)
    else:
        t = np.clip(((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / denom, 0.0, 1.0)
    dist = np.hypot(xx - (p0[0] + t * d[0]), yy - (p0[1] + t * d[1]))
    return np.clip(thickness / 2 + 0.5 - dist, 0.0, 1.0)


def _render_figure(canvas: np.ndarray, fig: _Figure, config: SyntheticSceneConfig) -> None:
    for b in config.bones:
        cov = _segment_coverage(canvas.shape, fig.points[b.parent], fig.points[b.name], b.thickness)
        np.maximum(canvas, config.intensity * cov, out=canvas)
    head = fig.points.get("head")
    if head is not None:
        cov = _segment_coverage(canvas.shape, head, head, 2 * config.head_radius)
        np.maximum(canvas, config.intensity * cov, out=canvas)


def quantize(image: np.ndarray, bit_depth: int = 16) -> np.ndarray:
    top = (1 << bit_depth) - 1
    return np.rint(np.clip(image, 0.0, 1.0) * top) / top


def generate_scene(config: SyntheticSceneConfig, rng) -> tuple[np.ndarray, Annotation]:
    """Render one labeled figure plus distractors; returns ``(H, W)`` image in [0, 1].

    The labeled figure lies fully inside the frame; distractors only need
    their torso centre inside and may be cut off at the border.
    """
    rng = np.random.default_rng(rng)
    labeled = _place(config, rng, [])
    centres = [(labeled.points[NECK] + labeled.points["pelvis"]) / 2]
    figures = [labeled]
    for _ in range(config.num_distractors):
        fig = _place(config, rng, centres, contained=False)
        centres.append((fig.points[NECK] + fig.points["pelvis"]) / 2)
        figures.append(fig)
    canvas = np.zeros(config.image_size)
    for fig in figures:
        _render_figure(canvas, fig, config)
    if config.noise > 0:
        canvas = canvas + rng.normal(0.0, config.noise, canvas.shape)
    joints = np.array([labeled.points[n] for n in config.joint_names])
    h, w = config.image_size
    visible = (joints[:, 0] >= 0) & (joints[:, 0] <= w - 1) & (joints[:, 1] >= 0) & (joints[:, 1] <= h - 1)
    ann = Annotation(joints, _torso_box(labeled, config), visible)
    return quantize(canvas), ann


def generate_dataset(config: SyntheticSceneConfig, count: int, seed: int = 0) -> Dataset:
    """``count`` scenes, scene ``i`` seeded from ``(seed, i)``."""
    images, anns = [], []
    for i in range(count):
        img, ann = generate_scene(config, np.random.default_rng([seed, i]))
        ann.image_id = f"{i:05d}"
        images.append(img)
        anns.append(ann)
    return Dataset(images, anns, config.joint_names, config.symmetry)


# ---------------------------------------------------------------------------
# heat-map rendering


def to_cells(points, scale: float) -> np.ndarray:
    """Image pixel coordinates -> fractional heat-map cell coordinates."""
    return (np.asarray(points, dtype=np.float64) + 0.5) / scale - 0.5


def gaussian_map(center_uv, shape: tuple[int, int], sigma: float) -> np.ndarray:
    """Unit-peak Gaussian centred on the cell nearest to ``center_uv`` (cells)."""
    h, w = shape
    cu = min(max(int(np.rint(center_uv[0])), 0), w - 1)
    cv = min(max(int(np.rint(center_uv[1])), 0), h - 1)
    yy, xx = np.mgrid[0:h, 0:w]
    return np.exp(-((xx - cu) ** 2 + (yy - cv) ** 2) / (2.0 * sigma**2))


def render_torso_map(annotation: Annotation, geometry: tuple[int, int], scale: float = 1.0, sigma: float = 1.0) -> np.ndarray:
    """Gaussian bump at the torso-box centre on the heat-map grid."""
    centre = to_cells(annotation.torso_center, scale)
    return gaussian_map(centre, geometry, sigma)


# ---------------------------------------------------------------------------
# I/O


def write_pgm(path, image: np.ndarray, bit_depth: int = 16) -> None:
    top = (1 << bit_depth) - 1
    q = np.rint(np.clip(image, 0.0, 1.0) * top)
    dtype = ">u2" if bit_depth == 16 else "u1"
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{top}\n".encode())
        fh.write(q.astype(dtype).tobytes())


def read_pgm(path) -> np.ndarray:
    """Binary PGM -> float image scaled to [0, 1] by maxval."""
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        fields.append(data[start:pos])
    pos += 1
    if fields[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    try:
        w, h, top = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise DataError(f"{path}: bad PGM header field") from exc
    if not 0 < top < 65536:
        raise DataError(f"{path}: maxval {top} out of range")
    dtype = ">u2" if top > 255 else "u1"
    n = w * h * np.dtype(dtype).itemsize
    if len(data) - pos < n:
        raise DataError(f"{path}: pixel data truncated")
    pixels = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return pixels.astype(np.float64) / top


def _annotation_record(ann: Annotation, names, image_file: str) -> dict:
    return {
        "image": image_file,
        "image_id": ann.image_id,
        "person_id": ann.person_id,
        "joints": {n: [float(u), float(v), int(vis)] for n, (u, v), vis in zip(names, ann.joints, ann.visible)},
        "torso_box": list(ann.torso_box),
    }


def write_dataset(path, dataset: Dataset) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    h, w = dataset.images[0].shape if dataset.images else (0, 0)
    header = {
        "type": "header",
        "joints": list(dataset.joint_names),
        "symmetry": [list(p) for p in dataset.symmetry],
        "image_size": [h, w],
        "bit_depth": dataset.bit_depth,
        "count": len(dataset),
    }
    lines = [json.dumps(header)]
    for i, (img, ann) in enumerate(zip(dataset.images, dataset.annotations)):
        fname = f"{i:05d}.pgm"
        write_pgm(root / "images" / fname, img, dataset.bit_depth)
        lines.append(json.dumps(_annotation_record(ann, dataset.joint_names, fname)))
    (root / "annotations.jsonl").write_text("\n".join(lines) + "\n")


def _field(rec: dict, key: str, where: str):
    if key not in rec:
        raise DataError(f"{where}: missing field '{key}'")
    return rec[key]


def read_dataset(path) -> Dataset:
    root = Path(path)
    ann_path = root / "annotations.jsonl"
    if not ann_path.exists():
        raise DataError(f"{ann_path}: annotation file missing")
    lines = [ln for ln in ann_path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{ann_path}: empty annotation file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{ann_path}: header line is not JSON") from exc
    if header.get("type") != "header":
        raise DataError(f"{ann_path}: first line must be the header")
    names = tuple(_field(header, "joints", f"{ann_path} header"))
    symmetry = tuple(tuple(p) for p in header.get("symmetry", []))
    records = {}
    for lineno, line in enumerate(lines[1:], start=2):
        where = f"{ann_path}:{lineno}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{where}: not valid JSON") from exc
        records[_field(rec, "image", where)] = (rec, where)
    image_files = sorted(p.name for p in (root / "images").glob("*.pgm")) if (root / "images").exists() else []
    for fname in records:
        if fname not in image_files:
            raise DataError(f"{ann_path}: annotation refers to missing image '{fname}'")
    images, anns = [], []
    for fname in image_files:
        if fname not in records:
            raise DataError(f"{root / 'images' / fname}: no annotation line for image")
        rec, where = records[fname]
        jmap = _field(rec, "joints", where)
        coords, vis = [], []
        for n in names:
            if n not in jmap:
                raise DataError(f"{where}: missing field 'joints.{n}'")
            entry = jmap[n]
            if len(entry) != 3:
                raise DataError(f"{where}: field 'joints.{n}' must be [u, v, visible]")
            coords.append(entry[:2])
            vis.append(bool(entry[2]))
        box = _field(rec, "torso_box", where)
        if len(box) != 4:
            raise DataError(f"{where}: field 'torso_box' must have 4 numbers")
        ann = Annotation(np.array(coords, dtype=np.float64), box, np.array(vis, bool), int(rec.get("person_id", 0)), rec.get("image_id", ""))
        images.append(read_pgm(root / "images" / fname))
        anns.append(ann)
    return Dataset(images, anns, names, symmetry, int(header.get("bit_depth", 16)))
