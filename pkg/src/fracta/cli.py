"""``fracta`` command line: dataset synthesis, training, inference, evaluation and scan ingestion.

Every subcommand reads the same key=value configuration (``--config``) with
``--set key=value`` overrides. Randomness for each stage comes from the root
seed and the stage name, so stages can be rerun independently.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import eval as metrics
from .algebra import GridFormatError
from .fracture import DESK_SHAPES, CompleteShape, FractureRejected, load_tuple, random_fracture, save_tuple
from .geometry import MeshError, load_mesh, save_mesh
from .neural import CheckpointError, FieldModel, ModelConfig, NonFiniteLoss, TrainConfig, load_model, save_model
from .render import fracture_camera, read_pnm, render_observation, write_depth, write_pnm
from .sampling import SampleFormatError, SamplingError, load_samples, precompute_samples, save_samples
from .scan import ProjectError, ScanFormatError, parse_project, parse_scan, project_mask
from .training import TrainingItem, infer, train

log = logging.getLogger("fracta")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("fracture", "render", "sample", "train", "infer", "eval", "ingest")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class PipelineConfig:
    seed: int = 0
    dataset: str = "data"
    output: str = "out"
    # fracture
    shapes: str = "sphere,box"
    seeds_per_shape: int = 4
    grid_k: int = 64
    # render and model
    image_size: int = 64
    encoder: str = "tiny"
    latent_dim: int = 512
    decoder_width: int = 256
    decoder_blocks: int = 6
    dtype: str = "float64"
    # sampling
    n: int = 50_000
    sigma: float = 0.01
    m: int = 2048
    # training
    lambda_break: float = 1.0
    lambda_restoration: float = 1.0
    lr: float = 2e-5
    epochs: int = 10
    steps: int = 0
    images_per_step: int = 4
    # inference
    checkpoint: str = ""
    image: str = ""
    k: int = 128
    # evaluation
    pred: str = ""
    gt: str = ""
    metric_points: int = 30_000
    rotations: int = 36
    # ingestion
    project: str = ""

    def validate(self):
        known = {name for name, _ in DESK_SHAPES}
        checks = [
            (self.seeds_per_shape >= 0, "seeds_per_shape must be >= 0"),
            (self.grid_k >= 2, "grid_k must be >= 2"),
            (self.k >= 2, "k must be >= 2"),
            (self.image_size >= 16, "image_size must be >= 16"),
            (self.n > 0, "n must be positive"),
            (self.sigma >= 0, "sigma must be >= 0"),
            (self.m >= 6, "m must be >= 6"),
            (self.lambda_break >= 0 and self.lambda_restoration >= 0, "loss weights must be >= 0"),
            (self.lr >= 0, "lr must be >= 0"),
            (self.epochs >= 0 and self.steps >= 0, "epochs and steps must be >= 0"),
            (self.images_per_step >= 1, "images_per_step must be >= 1"),
            (self.metric_points > 0, "metric_points must be positive"),
            (self.rotations >= 1, "rotations must be >= 1"),
            (self.dtype in ("float32", "float64"), "dtype must be float32 or float64"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        for shape in self.shape_list():
            if shape not in known and not Path(shape).suffix.lower() in (".ply", ".off"):
                raise ConfigError(f"unknown shape {shape!r}: use a desk shape name or a mesh path")
        try:
            self.model_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def shape_list(self):
        return [s.strip() for s in self.shapes.split(",") if s.strip()]

    def model_config(self):
        return ModelConfig(encoder=self.encoder, image_size=self.image_size, latent_dim=self.latent_dim,
                           decoder_width=self.decoder_width, decoder_blocks=self.decoder_blocks,
                           dtype=self.dtype, seed=stage_seed(self.seed, "model") % 2**31)

    def train_config(self):
        return TrainConfig(self.lambda_break, self.lambda_restoration, self.lr, self.epochs, self.m,
                           stage_seed(self.seed, "train"), self.encoder, self.images_per_step)


def stage_seed(root: int, stage: str) -> int:
    """Per-stage seed: the first 8 bytes of sha256("<root>:<stage>"), as a non-negative int."""
    digest = hashlib.sha256(f"{root}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def parse_config_text(text, source="config"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        values[key.strip()] = value.strip()
    return values


def build_config(config_path=None, overrides=(), seed=None) -> PipelineConfig:
    values = {}
    if config_path:
        try:
            text = Path(config_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        values.update(parse_config_text(text, config_path))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = value.strip()
    if seed is not None:
        values["seed"] = str(seed)
    kinds = {f.name: f.type for f in fields(PipelineConfig)}
    parsed = {}
    for key, raw in values.items():
        if key not in kinds:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            parsed[key] = {"int": int, "float": float}.get(kinds[key], str)(raw)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
    cfg = PipelineConfig(**parsed)
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# dataset layout helpers

MANIFEST = "manifest.csv"


def _read_manifest(root: Path):
    path = root / MANIFEST
    if not path.exists():
        raise DataError(f"no manifest at {path}; run 'fracta fracture' first")
    with path.open(newline="", encoding="utf-8") as fh:
        return [row for row in csv.DictReader(fh)]


def _ok_bundles(root: Path):
    rows = [r for r in _read_manifest(root) if r["status"] == "ok"]
    for r in rows:
        if not (root / r["id"]).is_dir():
            raise DataError(f"missing bundle directory {root / r['id']}")
    return [root / r["id"] for r in rows]


def _complete_shape(spec):
    if Path(spec).suffix.lower() in (".ply", ".off"):
        return CompleteShape.from_mesh(load_mesh(spec))
    params = dict(DESK_SHAPES)[spec]
    return CompleteShape.analytic(spec, **params)


# --------------------------------------------------------------------------
# commands


def cmd_fracture(cfg: PipelineConfig):
    root = Path(cfg.dataset)
    root.mkdir(parents=True, exist_ok=True)
    base = stage_seed(cfg.seed, "fracture")
    rows = []
    for s_idx, shape in enumerate(cfg.shape_list()):
        name = Path(shape).stem if Path(shape).suffix else shape
        try:
            complete = _complete_shape(shape)
        except (OSError, MeshError, ValueError) as exc:
            log.error("shape %s: %s", shape, exc)
            rows.append({"id": f"{name}", "shape": shape, "seed": "", "status": f"error: {exc}",
                         "restoration_fraction": ""})
            continue
        for j in range(cfg.seeds_per_shape):
            seed = (base + 1000 * s_idx + j) % 2**63
            item_id = f"{s_idx:02d}-{name}-{j:03d}"
            try:
                tup = random_fracture(complete, seed, grid_k=cfg.grid_k)
            except FractureRejected as exc:
                log.warning("%s rejected: %s", item_id, exc)
                rows.append({"id": item_id, "shape": shape, "seed": seed, "status": f"rejected: {exc}",
                             "restoration_fraction": ""})
                continue
            save_tuple(tup, root / item_id)
            rows.append({"id": item_id, "shape": shape, "seed": seed, "status": "ok",
                         "restoration_fraction": f"{tup.restoration_fraction:.9g}"})
    with (root / MANIFEST).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, ["id", "shape", "seed", "status", "restoration_fraction"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    print(f"{sum(r['status'] == 'ok' for r in rows)} tuples written to {root}")
    return EXIT_OK


def cmd_render(cfg: PipelineConfig):
    for bundle in _ok_bundles(Path(cfg.dataset)):
        tup = load_tuple(bundle)
        camera = fracture_camera(tup, width=cfg.image_size, height=cfg.image_size)
        obs = render_observation(tup.fractured_mesh, camera)
        write_pnm(obs.image, bundle / "observation.pgm")
        write_pnm(obs.silhouette.astype(float), bundle / "silhouette.pgm")
        write_depth(obs.depth, bundle / "depth.fxdm")
    return EXIT_OK


def cmd_sample(cfg: PipelineConfig):
    base = stage_seed(cfg.seed, "sample")
    for i, bundle in enumerate(_ok_bundles(Path(cfg.dataset))):
        samples = precompute_samples(load_tuple(bundle), cfg.n, cfg.sigma, seed=(base + i) % 2**63)
        save_samples(samples, bundle / "samples.fxss")
    return EXIT_OK


def _load_items(cfg: PipelineConfig):
    items = []
    for bundle in _ok_bundles(Path(cfg.dataset)):
        for name in ("observation.pgm", "samples.fxss"):
            if not (bundle / name).exists():
                raise DataError(f"{bundle / name} is missing; run 'fracta render' and 'fracta sample'")
        items.append(TrainingItem(bundle.name, read_pnm(bundle / "observation.pgm"),
                                  load_samples(bundle / "samples.fxss")))
    if not items:
        raise DataError("no training items in the dataset")
    return items


def cmd_train(cfg: PipelineConfig):
    items = _load_items(cfg)
    model = FieldModel(cfg.model_config())
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    trace = []
    try:
        train(model, items, cfg.train_config(), steps=cfg.steps or None,
              callback=lambda step, value: trace.append(value))
    except NonFiniteLoss:
        # the failing step raised before its update, so the model is the last good state
        save_model(model, out / "model.fxck")
        _write_trace(trace, out / "loss.csv")
        raise
    save_model(model, out / "model.fxck")
    _write_trace(trace, out / "loss.csv")
    if trace:
        print(f"trained {len(trace)} steps; loss {trace[0]:.6g} -> {trace[-1]:.6g}")
    return EXIT_OK


def _write_trace(trace, path):
    lines = ["step,loss"] + [f"{i},{v!r}" for i, v in enumerate(trace)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_infer(cfg: PipelineConfig):
    if not cfg.checkpoint or not cfg.image:
        raise ConfigError("infer needs checkpoint=... and image=...")
    model = load_model(cfg.checkpoint)
    image = read_pnm(cfg.image)
    result = infer(model, image, cfg.k)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(cfg.image).stem
    if result.nonzero:
        save_mesh(result.mesh, out / f"{stem}-restoration.ply")
        print(f"nonzero=1 faces={len(result.mesh.triangles)} -> {out / f'{stem}-restoration.ply'}")
    else:
        print("nonzero=0 (no restoration generated)")
    return EXIT_OK


def _meshes_by_id(directory: Path, gt=False):
    found = {}
    for path in sorted(directory.iterdir()):
        if path.is_dir() and gt and (path / "restoration.ply").exists():
            found[path.name] = path / "restoration.ply"
        elif path.suffix.lower() in (".ply", ".off"):
            stem = path.stem[: -len("-restoration")] if path.stem.endswith("-restoration") else path.stem
            found[stem] = path
    return found


def cmd_eval(cfg: PipelineConfig):
    if not cfg.pred or not cfg.gt:
        raise ConfigError("eval needs pred=... and gt=...")
    pred_dir, gt_dir = Path(cfg.pred), Path(cfg.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise DataError(f"{d} is not a directory")
    gts = _meshes_by_id(gt_dir, gt=True)
    if not gts:
        raise DataError(f"no ground-truth meshes in {gt_dir}")
    preds = _meshes_by_id(pred_dir)
    seed = stage_seed(cfg.seed, "eval") % 2**31
    report = metrics.MetricReport()
    for object_id, gt_path in sorted(gts.items()):
        pred = load_mesh(preds[object_id]) if object_id in preds else None
        report.rows.append(metrics.evaluate_object(object_id, pred, load_mesh(gt_path),
                                                   cfg.metric_points, cfg.rotations, seed))
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    text = report.to_csv()
    (out / "metrics.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_ingest(cfg: PipelineConfig):
    if not cfg.project:
        raise ConfigError("ingest needs project=...")
    try:
        project = parse_project(cfg.project)
    except (OSError, ProjectError) as exc:
        raise DataError(f"project file: {exc}") from exc
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    model = load_mesh(project.model) if project.model else None
    rows = []
    for i, (image_path, record_path) in enumerate(project.scans):
        row = {"index": i, "record": str(record_path), "points": "", "mask_pixels": "", "status": "ok"}
        try:
            rec = parse_scan(record_path)
            row["points"] = len(rec.points)
            if model is not None:
                mask = project_mask(model, rec.alignment, project.K, project.size)
                row["mask_pixels"] = int(mask.sum())
                write_pnm(mask.astype(float), out / f"mask-{i:03d}.pgm")
                if image_path is not None and Path(image_path).exists():
                    img = read_pnm(image_path)
                    masked = img * (mask[..., None] if img.ndim == 3 else mask)
                    write_pnm(masked, out / f"masked-{i:03d}{Path(image_path).suffix}")
        except (OSError, ScanFormatError, ValueError) as exc:
            log.error("scan %d: %s", i, exc)
            row["status"] = f"error: {exc}"
        rows.append(row)
    with (out / "ingest.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, ["index", "record", "points", "mask_pixels", "status"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    print(f"ingested {sum(r['status'] == 'ok' for r in rows)} of {len(rows)} scans")
    return EXIT_OK


HANDLERS = {
    "fracture": cmd_fracture, "render": cmd_render, "sample": cmd_sample, "train": cmd_train,
    "infer": cmd_infer, "eval": cmd_eval, "ingest": cmd_ingest,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="fracta", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="key=value configuration file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration value (repeatable)")
    parser.add_argument("--seed", type=int, help="root seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = build_config(args.config, args.set, args.seed)
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"fracta: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLoss, FloatingPointError) as exc:
        print(f"fracta: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, MeshError, ScanFormatError, ProjectError, SampleFormatError,
            SamplingError, GridFormatError, CheckpointError, FractureRejected) as exc:
        print(f"fracta: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
