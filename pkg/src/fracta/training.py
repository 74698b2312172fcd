"""Training loop, inference and voxel IoU on top of the neural model.

Each optimizer step draws a quota-balanced minibatch for several observations
and runs them through the decoders as one batch. The decoders normalize over
the batch, and a latent code that is constant across the batch would be
normalized away, so a step always mixes points from several images.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .algebra import OccupancyField
from .eval import nz_percent
from .fracture import ShapeTuple, desk_shapes, random_fracture
from .geometry import OccupancyGrid
from .isosurface import ExtractionResult, extract, query_grid
from .neural import FieldModel, ModelConfig, TrainConfig, train_step
from .render import fracture_camera, render_observation
from .sampling import DEFAULT_N, DEFAULT_SIGMA, SampleSet, draw_minibatch, precompute_samples

log = logging.getLogger(__name__)

# fixed minibatches per tuple in the overfit check
OVERFIT_POOL = 4


@dataclass(eq=False)
class TrainingItem:
    item_id: str
    image: np.ndarray
    samples: SampleSet
    tuple: ShapeTuple = None


def observe(tup: ShapeTuple, image_size: int) -> np.ndarray:
    """Grayscale render of the fractured mesh from its fracture-facing camera."""
    camera = fracture_camera(tup, width=image_size, height=image_size)
    return render_observation(tup.fractured_mesh, camera).image


def make_item(item_id, tup: ShapeTuple, image_size=64, n=DEFAULT_N, sigma=DEFAULT_SIGMA, seed=0):
    return TrainingItem(item_id, observe(tup, image_size), precompute_samples(tup, n, sigma, seed), tup)


def schedule(count, images_per_step, steps, seed):
    """Image indices for every step: reshuffled passes over the items, cut into groups."""
    rng = np.random.default_rng(seed)
    per = min(images_per_step, count)
    order = []
    while len(order) < steps * per:
        order.extend(rng.permutation(count).tolist())
    return [order[i * per:(i + 1) * per] for i in range(steps)]


def train(model: FieldModel, items, cfg: TrainConfig, steps=None, callback=None, resample=True,
          pool=1):
    """Run the training loop; returns the per-step loss trace.

    ``steps`` defaults to ``cfg.epochs`` passes over the items. ``cfg.m`` is
    the number of points drawn for each image in a step. With ``resample``
    off, every item keeps the first ``pool`` minibatches drawn for it and
    cycles through them, which turns the run into a memorization check.
    """
    if not items:
        raise ValueError("no training items")
    per = min(cfg.images_per_step, len(items))
    if steps is None:
        steps = cfg.epochs * -(-len(items) // per)
    rng = np.random.default_rng(cfg.seed)
    plan = schedule(len(items), per, steps, int(rng.integers(2**63)))
    trace = []
    fixed, visits = {}, {}
    for step, chosen in enumerate(plan):
        images, points, labels, groups = [], [], [], []
        for g, idx in enumerate(chosen):
            item = items[idx]
            seed = int(rng.integers(2**63))
            if resample:
                batch = draw_minibatch(item.samples, cfg.m, seed=seed)
            else:
                kept = fixed.setdefault(idx, [])
                visits[idx] = visits.get(idx, -1) + 1
                if len(kept) < pool:
                    kept.append(draw_minibatch(item.samples, cfg.m, seed=seed))
                batch = kept[visits[idx] % pool]
            images.append(item.image)
            points.append(item.samples.points[batch.indices])
            labels.append(item.samples.labels[batch.indices])
            groups.append(np.full(len(batch), g))
        value = train_step(model, np.stack(images), np.concatenate(points), np.concatenate(labels),
                           cfg, np.concatenate(groups))
        trace.append(value)
        if callback is not None:
            callback(step, value)
    return trace


def warmup_batchnorm(model: FieldModel, items, cfg: TrainConfig, passes=20):
    """Refresh batch-norm running statistics in training mode without touching parameters."""
    rng = np.random.default_rng(cfg.seed + 1)
    per = min(cfg.images_per_step, len(items))
    for chosen in schedule(len(items), per, passes, int(rng.integers(2**63))):
        z = model.encode(np.stack([items[i].image for i in chosen]), train=True)
        pts, groups = [], []
        for g, idx in enumerate(chosen):
            batch = draw_minibatch(items[idx].samples, cfg.m, seed=int(rng.integers(2**63)))
            pts.append(items[idx].samples.points[batch.indices])
            groups.append(np.full(len(batch), g))
        model.logits(z, np.concatenate(pts), train=True, groups=np.concatenate(groups))


def infer(model: FieldModel, image, k=64) -> ExtractionResult:
    """Restoration mesh (or an empty result) for one observation."""
    z = model.encode(image)
    return extract(OccupancyField(model.field_function(z, "restoration"), "neural"), k)


def predicted_grid(model: FieldModel, image, k=64, which="restoration") -> OccupancyGrid:
    z = model.encode(image)
    return query_grid(OccupancyField(model.field_function(z, which), "neural"), k)


def voxel_iou(a: OccupancyGrid, b: OccupancyGrid, threshold=0.5) -> float:
    if not a.same_layout(b):
        raise ValueError("grids have different layouts")
    x, y = a.occupied(threshold), b.occupied(threshold)
    union = int((x | y).sum())
    return 1.0 if union == 0 else int((x & y).sum()) / union


def relative_final_loss(trace, window=None) -> float:
    """Mean of the last ``window`` losses divided by the first loss."""
    window = window or max(1, len(trace) // 100)
    return float(np.mean(trace[-window:]) / trace[0])


def overfit_model_config(**overrides) -> ModelConfig:
    """Desk-scale preset for the overfit check: tiny encoder at 64x64, narrower f32 decoders."""
    base = dict(encoder="tiny", image_size=64, latent_dim=128, decoder_width=128, dtype="float32")
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class OverfitResult:
    loss_ratio: float
    ious: list
    nz_percent: float
    trace: list
    seconds: float


def run_overfit(steps=2000, lr=2e-5, m=512, pool=OVERFIT_POOL, image_size=64, k=64, n=10_000,
                shape_seeds=(10, 11, 12, 13), callback=None) -> OverfitResult:
    """Memorize four generated tuples, then score their inferred restorations.

    Each tuple keeps ``pool`` fixed minibatches of ``m`` points; all four
    images share every step. Restorations are compared with the ground
    truth by voxel IoU on a k^3 grid.
    """
    start = time.perf_counter()
    shapes = desk_shapes()
    items = []
    for i, seed in enumerate(shape_seeds):
        tup = random_fracture(shapes[i % len(shapes)], seed=seed, grid_k=k)
        items.append(make_item(f"overfit-{i}", tup, image_size, n=n, seed=i))
    model = FieldModel(overfit_model_config(image_size=image_size))
    cfg = TrainConfig(lr=lr, m=m, images_per_step=len(items))
    trace = train(model, items, cfg, steps=steps, callback=callback, resample=False, pool=pool)
    ious, nonzero = [], []
    for item in items:
        pred = predicted_grid(model, item.image, k)
        ious.append(voxel_iou(pred, query_grid(item.tuple.restoration, k)))
        nonzero.append(bool(pred.occupied().any()))
    return OverfitResult(relative_final_loss(trace), ious, nz_percent(nonzero), trace,
                         time.perf_counter() - start)
