"""Command-line entry point: ``python -m posegraph <command> [flags]``.

Commands: ``gen``, ``train``, ``eval``, ``infer``, ``selftest``. Settings come
from an INI file (``--config``) overridden by ``--set section.key=value``; the
effective config is written to the output directory together with a
``manifest.json`` holding the seed and a hash of the config.
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import conv, data, detector, evaluation, nn, spatial, train
from .detector import ConvStage, DetectorConfig
from .tensor import argmax2d

log = logging.getLogger("posegraph")


class ConfigError(ValueError):
    pass


# section -> key -> default. The type of the default is the type of the key.
SCHEMA: dict[str, dict[str, object]] = {
    "data": {
        "count": 100,
        "image_size": 32,
        "num_distractors": 2,
        "noise": 0.05,
        "bit_depth": 16,
    },
    "detector": {
        "num_banks": 2,
        "window": 32,
        "stages": "5x8,5x16",
        "fc_features": 32,
        "act_eps": 0.01,
    },
    "spatial": {
        "kernel_size": 15,
        "beta": 1.0,
        "eps": 0.01,
        "use_torso": True,
        "method": "auto",
        "calibrate": True,
    },
    "train": {
        "dataset": "",
        "val_fraction": 0.2,
        "learning_rate": 0.03,
        "spatial_learning_rate": 0.1,
        # negative means 0.1 x learning_rate; that is unstable at these settings
        "unified_learning_rate": 0.001,
        "momentum": 0.9,
        "batch_size": 16,
        "epochs": "12,4,2",
        "target_sigma": 1.0,
        "flip_prob": 0.5,
        "scale_min": 0.9,
        "scale_max": 1.1,
        "radii": "0.1,0.25,0.5",
        "resume_detector": "",
    },
    "eval": {
        "dataset": "",
        "model_dir": "",
        "radii": ",".join(str(r) for r in evaluation.DEFAULT_RADII),
    },
    "infer": {
        "model": "",
        "image": "",
        "torso_box": "",
        "dump_heatmaps": False,
    },
}


def _parse_value(section: str, key: str, raw: str):
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    default = SCHEMA[section][key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def load_config(path=None, overrides=()) -> dict[str, dict[str, object]]:
    """Defaults, then the INI file, then ``section.key=value`` overrides."""
    cfg = {s: dict(keys) for s, keys in SCHEMA.items()}
    if path:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg.setdefault(section, {})[key] = _parse_value(section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, raw = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        cfg[section][key] = _parse_value(section, key, raw)
    return cfg


def config_hash(cfg: dict, seed: int) -> str:
    blob = json.dumps({"config": cfg, "seed": seed}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def write_effective(out: Path, cfg: dict, seed: int, command: str, extra: dict | None = None) -> str:
    out.mkdir(parents=True, exist_ok=True)
    parser = configparser.ConfigParser()
    for section, keys in cfg.items():
        parser[section] = {k: str(v) for k, v in keys.items()}
    with open(out / "config.ini", "w") as fh:
        parser.write(fh)
    digest = config_hash(cfg, seed)
    manifest = {"command": command, "seed": seed, "config_hash": digest, "config": cfg}
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return digest


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def parse_stages(text: str) -> tuple[ConvStage, ...]:
    """``"5x16,5x32"``; a trailing ``n`` (``5x32n``) marks an unpooled stage."""
    stages = []
    for part in text.split(","):
        part = part.strip()
        pool = not part.endswith("n")
        k, f = part.rstrip("n").split("x")
        stages.append(ConvStage(int(k), int(f), pool))
    return tuple(stages)


def detector_config(cfg: dict, num_joints: int) -> DetectorConfig:
    d = cfg["detector"]
    return DetectorConfig(
        num_joints=num_joints,
        num_banks=d["num_banks"],
        window=d["window"],
        stages=parse_stages(d["stages"]),
        fc_features=d["fc_features"],
        act_eps=d["act_eps"],
    )


def spatial_config(cfg: dict) -> train.SpatialConfig:
    s = cfg["spatial"]
    return train.SpatialConfig(s["kernel_size"], s["beta"], s["eps"], s["use_torso"], s["method"], s["calibrate"])


def train_config(cfg: dict, seed: int) -> train.TrainConfig:
    t = cfg["train"]
    epochs = _ints(t["epochs"])
    if len(epochs) != 3:
        raise ConfigError("train.epochs needs three comma-separated counts")
    return train.TrainConfig(
        learning_rate=t["learning_rate"],
        momentum=t["momentum"],
        batch_size=t["batch_size"],
        epochs=epochs,
        target_sigma=t["target_sigma"],
        flip_prob=t["flip_prob"],
        scale_range=(t["scale_min"], t["scale_max"]),
        seed=seed,
        spatial_learning_rate=t["spatial_learning_rate"],
        unified_learning_rate=None if t["unified_learning_rate"] < 0 else t["unified_learning_rate"],
        radii=_floats(t["radii"]),
    )


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: dict, out: Path, seed: int) -> int:
    d = cfg["data"]
    if d["count"] < 0:
        raise ConfigError("data.count must be non-negative")
    scene = data.SyntheticSceneConfig(image_size=(d["image_size"], d["image_size"]), num_distractors=d["num_distractors"], noise=d["noise"])
    ds = data.generate_dataset(scene, d["count"], seed)
    ds.bit_depth = d["bit_depth"]
    data.write_dataset(out, ds)
    write_effective(out, cfg, seed, "gen", {"count": len(ds)})
    print(f"wrote {len(ds)} scenes to {out}")
    return 0


def _split(ds: data.Dataset, fraction: float) -> tuple[data.Dataset, data.Dataset]:
    n_val = int(round(len(ds) * fraction))
    n_train = len(ds) - n_val
    return ds.subset(range(n_train)), ds.subset(range(n_train, len(ds)))


def _write_metrics(path: Path, rows: list[dict], radii) -> None:
    cols = ["stage", "epoch", "split", "mse"] + [f"det_rate@{r}" for r in radii]
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols))
    path.write_text("\n".join(lines) + "\n")


def cmd_train(cfg: dict, out: Path, seed: int) -> int:
    t = cfg["train"]
    if not t["dataset"]:
        raise ConfigError("train.dataset is required")
    ds = data.read_dataset(t["dataset"])
    trn, val = _split(ds, t["val_fraction"])
    det_cfg = detector_config(cfg, len(ds.joint_names))
    scfg = spatial_config(cfg)
    tcfg = train_config(cfg, seed)
    stage1_keys = ("learning_rate", "momentum", "batch_size", "target_sigma", "flip_prob", "scale_min", "scale_max", "val_fraction")
    stage1 = {k: t[k] for k in stage1_keys}
    stage1["epochs"] = tcfg.epochs[0]
    det_hash = config_hash({"detector": cfg["detector"], "dataset": str(Path(t["dataset"]).resolve()), "train": stage1}, seed)

    init, skip = None, False
    if t["resume_detector"]:
        bundle = train.load_model(t["resume_detector"])
        found = bundle.meta.get("stage1_hash")
        if found != det_hash:
            print(f"error: {t['resume_detector']} was trained with a different config (hash {found}, expected {det_hash})", file=sys.stderr)
            return 3
        init, skip = bundle.detector_params, True

    out.mkdir(parents=True, exist_ok=True)
    digest = write_effective(out, cfg, seed, "train", {"stage1_hash": det_hash})
    result = train.train_staged(trn, val, det_cfg, scfg, tcfg, cache_dir=out / "cache", detector_init=init, skip_stage1=skip)
    extra = {"config_hash": digest, "seed": seed, "stage1_hash": det_hash}
    det_path = out / "detector.model"
    if skip:
        if Path(t["resume_detector"]).resolve() != det_path.resolve():
            shutil.copyfile(t["resume_detector"], det_path)
    else:
        train.save_model(det_path, "detector", det_cfg, result.detector_stage1, None, extra)
    train.save_model(out / "spatial.model", "spatial", det_cfg, result.detector_stage1, result.spatial_stage2, extra)
    train.save_model(out / "unified.model", "unified", det_cfg, result.detector_unified, result.spatial_unified, extra)
    _write_metrics(out / "metrics.csv", result.metrics, tcfg.radii)
    print(f"trained on {len(trn)} images ({len(val)} validation); models in {out}")
    return 0


def cmd_eval(cfg: dict, out: Path, seed: int) -> int:
    e = cfg["eval"]
    if not e["dataset"] or not e["model_dir"]:
        raise ConfigError("eval.dataset and eval.model_dir are required")
    ds = data.read_dataset(e["dataset"])
    radii = _floats(e["radii"])
    out.mkdir(parents=True, exist_ok=True)
    write_effective(out, cfg, seed, "eval")
    summary = {}
    for tag in ("detector", "spatial", "unified"):
        path = Path(e["model_dir"]) / f"{tag}.model"
        if not path.exists():
            continue
        b = train.load_model(path)
        preds, _ = train.predict(ds, b.detector_config, b.detector_params, b.spatial_params, b.uses_torso, cfg["spatial"]["method"])
        curve = evaluation.detection_rate(preds, ds.annotations, radii, ds.joint_names, tag)
        evaluation.emit_curves(curve, out / f"curves_{tag}.csv")
        summary[tag] = {repr(float(r)): float(v) for r, v in zip(radii, curve.mean_rates)}
        print(tag, " ".join(f"{r:g}:{v:.3f}" for r, v in zip(radii, curve.mean_rates)))
    if not summary:
        raise ConfigError(f"no model files in {e['model_dir']}")
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return 0


def infer_image(bundle: train.ModelBundle, image: np.ndarray, torso_box=None, method: str = "auto") -> tuple[list[dict], np.ndarray]:
    """Per-joint ``{name, u, v, confidence}`` plus the final heat-maps."""
    cfg = bundle.detector_config
    if image.ndim != 2 and cfg.in_channels == 1:
        raise ConfigError("geometry mismatch: expected a single-channel image")
    try:
        cfg.check_image(*image.shape)
        maps = train.detector_maps([image], cfg, bundle.detector_params)
    except (detector.DetectorError, nn.NNError) as exc:
        raise ConfigError(f"geometry mismatch: {exc}") from exc
    if bundle.spatial_params is not None:
        if bundle.uses_torso:
            if torso_box is None:
                raise ConfigError("this model needs infer.torso_box (u,v,w,h) of the target person")
            ann = data.Annotation(np.zeros((cfg.num_joints, 2)), torso_box)
            inputs = train.spatial_inputs(maps, [ann], cfg, True)
        else:
            inputs = maps
        maps = spatial.SpatialModel(bundle.spatial_params, method).forward(inputs)
    hm = detector._heatmap_set(maps[0], cfg)
    names = bundle.spatial_params.joints.outputs if bundle.spatial_params is not None and bundle.spatial_params.joints else tuple(str(j) for j in range(cfg.num_joints))
    joints = []
    for j, u, v in detector.extract_joints(hm):
        _, _, conf = argmax2d(maps[0], j)
        joints.append({"joint": names[j], "u": u, "v": v, "confidence": conf})
    return joints, maps[0]


def cmd_infer(cfg: dict, out: Path, seed: int) -> int:
    i = cfg["infer"]
    if not i["model"] or not i["image"]:
        raise ConfigError("infer.model and infer.image are required")
    bundle = train.load_model(i["model"])
    image = data.read_pgm(i["image"])
    box = _floats(i["torso_box"]) if i["torso_box"] else None
    if box is not None and len(box) != 4:
        raise ConfigError("infer.torso_box needs four numbers u,v,w,h")
    joints, maps = infer_image(bundle, image, box, cfg["spatial"]["method"])
    out.mkdir(parents=True, exist_ok=True)
    write_effective(out, cfg, seed, "infer")
    result = {"model": str(i["model"]), "kind": bundle.kind, "image": str(i["image"]), "joints": joints}
    if i["dump_heatmaps"]:
        nn.save_params(out / "heatmaps.bin", {"heatmaps": maps}, {"pool_factor": bundle.detector_config.pool_factor})
        result["heatmaps"] = "heatmaps.bin"
    (out / "predictions.json").write_text(json.dumps(result, indent=2) + "\n")
    for j in joints:
        print(f"{j['joint']:>8} u={j['u']:7.2f} v={j['v']:7.2f} conf={j['confidence']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# selftest


def _check_fft(rng) -> float:
    worst = 0.0
    for size in (3, 7, 15, 31):
        x = rng.normal(size=(12, 10))
        k = rng.normal(size=(size, size))
        for pad in ("valid", "same", "full"):
            if pad == "valid" and size > 10:
                continue
            a = conv.conv2d_fft(x, k, pad)
            b = conv.conv2d_direct(x, k, pad)
            worst = max(worst, float(np.max(np.abs(a - b))))
    return worst


def _check_layers(rng) -> float:
    net = nn.Sequential(
        [
            nn.LCN(),
            nn.ConvLayer(1, 3, 3, 1, rng),
            nn.ReLUeps(0.01),
            nn.MaxPool(),
            nn.SoftPlusBeta(1.0),
            nn.Upsample(2),
        ]
    )
    x = rng.normal(size=(2, 1, 12, 12))
    return nn.grad_check(net, x, seed=int(rng.integers(1 << 30)))


def _check_spatial(rng) -> float:
    joints = spatial.JointSet(("a", "b", "t"), (False, False, True))
    p = spatial.SpatialModelParams(rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(2, 3)), 1.0, 0.01, joints)
    net = spatial.SpatialModel(p, "direct")
    x = rng.uniform(0.05, 1.0, size=(2, 3, 6, 6))
    return nn.grad_check(net, x, seed=int(rng.integers(1 << 30)))


def _check_dense(rng) -> float:
    cfg = DetectorConfig(num_joints=3, num_banks=1, window=16, stages=((5, 4), (3, 4)), fc_features=6)
    params = detector.init_params(cfg, int(rng.integers(1 << 30)))
    img = rng.uniform(size=(16, 16))
    dense = detector.dense_forward(detector.build_pyramid(img, 1), cfg, params).maps
    slide = detector.sliding_window_forward(img, cfg, params).maps
    return float(np.max(np.abs(np.asarray(dense) - np.asarray(slide))))


def _check_bypass(rng) -> float:
    p = spatial.SpatialModelParams(rng.uniform(0.01, 1.0, size=(3, 3, 5, 5)), rng.uniform(0.01, 1.0, size=(3, 3)), 1.0, 0.01)
    x = rng.uniform(0.05, 1.0, size=(3, 8, 8))
    ours = np.asarray(spatial.spatial_forward(x, p, "direct", bypass=True).maps)
    ref = np.asarray(spatial.mrf_oracle(x, p, normalize=False).marginals.maps)
    return float(np.max(np.abs(ours - ref) / np.maximum(np.abs(ref), 1e-300)))


def _check_metric(rng) -> float:
    anns, preds = [], []
    for i in range(20):
        j = rng.uniform(0, 32, size=(4, 2))
        anns.append(data.Annotation(j, (0, 0, 10, rng.uniform(5, 15)), rng.random(4) > 0.2, image_id=str(i)))
        preds.append(j + rng.normal(0, 3, size=j.shape))
    radii = np.linspace(0, 0.5, 11)
    curve = evaluation.detection_rate(preds, anns, radii)
    bad = 0.0
    for ji in range(4):
        for ri, r in enumerate(radii):
            hit = tot = 0
            for a, p in zip(anns, preds):
                if a.visible[ji]:
                    tot += 1
                    hit += np.hypot(*(p[ji] - a.joints[ji])) <= r * a.torso_height
            expect = hit / tot if tot else np.nan
            if not (np.isnan(expect) and np.isnan(curve.rates[ji, ri])):
                bad = max(bad, abs(expect - curve.rates[ji, ri]))
    return bad


SELFTESTS = (
    ("fft-vs-direct convolution", _check_fft, 1e-9),
    ("layer gradients", _check_layers, 1e-4),
    ("spatial-model gradients", _check_spatial, 1e-4),
    ("dense vs sliding window", _check_dense, 1e-6),
    ("bypass vs mrf oracle", _check_bypass, 1e-10),
    ("detection-rate counting oracle", _check_metric, 0.0),
)


def cmd_selftest(cfg: dict, out: Path | None, seed: int) -> int:
    rng = np.random.default_rng(seed)
    failed = 0
    for name, fn, tol in SELFTESTS:
        t0 = time.perf_counter()
        try:
            err = fn(rng)
            ok = np.isfinite(err) and err <= tol
            detail = f"error {err:.3g} (tol {tol:g})"
        except Exception as exc:  # report and keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail} [{time.perf_counter() - t0:.2f}s]")
    print(f"{len(SELFTESTS) - failed}/{len(SELFTESTS)} checks passed")
    return 1 if failed else 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "selftest": cmd_selftest}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="posegraph", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", metavar="PATH", help="INI config file")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config key, e.g. train.epochs=5,2,1")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


@contextlib.contextmanager
def _thread_limit():
    n = int(os.environ.get("POSEGRAPH_THREADS", "1") or 1)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=max(n, 1)):
        yield


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.command != "selftest" and not args.out:
        print("error: --out is required", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else None
    with _thread_limit():
        try:
            return COMMANDS[args.command](cfg, out, args.seed)
        except train.TrainingDiverged as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 4
        except (ConfigError, data.DataError, nn.NNError, detector.DetectorError, spatial.SpatialError, evaluation.EvalError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
