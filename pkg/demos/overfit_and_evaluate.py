"""Train a small restoration model on a few tuples and score what it infers.

This is the quick version of the overfit acceptance check: a handful of
tuples, a narrow decoder and a few hundred steps.

Run: python demos/overfit_and_evaluate.py
"""

from fracta.eval import evaluate_object
from fracta.fracture import desk_shapes, random_fracture
from fracta.isosurface import query_grid
from fracta.neural import FieldModel, TrainConfig
from fracta.training import (
    infer,
    make_item,
    overfit_model_config,
    predicted_grid,
    relative_final_loss,
    train,
    voxel_iou,
)

shapes = desk_shapes()
items = []
for i in range(4):
    tup = random_fracture(shapes[i % len(shapes)], seed=20 + i, grid_k=32)
    items.append(make_item(f"demo-{i}", tup, image_size=32, n=2000, seed=i))

model = FieldModel(overfit_model_config(image_size=32, latent_dim=32, decoder_width=32))
cfg = TrainConfig(lr=1e-3, m=256, images_per_step=4)


def progress(step, value):
    if step % 50 == 0:
        print(f"step {step:4d}  loss {value:8.2f}")


trace = train(model, items, cfg, steps=300, callback=progress, resample=False, pool=2)
print(f"final/initial loss: {relative_final_loss(trace):.3f}")

for item in items:
    iou = voxel_iou(predicted_grid(model, item.image, 32), query_grid(item.tuple.restoration, 32))
    mesh = infer(model, item.image, k=32).mesh
    row = evaluate_object(item.item_id, mesh, item.tuple.restoration_mesh, npoints=2000, x=12)
    print(f"{item.item_id}: IoU {iou:.3f}  CD {row.cd:.4f}  NC {row.nc:.3f}  angle {row.angle:.0f}")
