import csv
import shutil
from pathlib import Path

import numpy as np
import pytest

from fracta import cli
from fracta.geometry import save_mesh
from fracta.neural import NonFiniteLoss
from fracta.render import read_pnm

FIXTURE = Path(__file__).parent / "fixtures" / "ingest"

SMALL = ["grid_k=32", "image_size=16", "latent_dim=16", "decoder_width=16", "decoder_blocks=2",
         "n=500", "m=60", "steps=4", "images_per_step=2", "lr=1e-3", "k=16"]


def run(*args, sets=()):
    argv = list(args)
    for s in sets:
        argv += ["--set", s]
    return cli.main(argv)


def sets_for(tmp, *extra):
    return SMALL + [f"dataset={tmp / 'data'}", f"output={tmp / 'out'}", *extra]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipeline")
    s = sets_for(tmp, "shapes=sphere,box", "seeds_per_shape=4")
    assert run("fracture", "--seed", "3", sets=s) == 0
    assert run("render", "--seed", "3", sets=s) == 0
    assert run("sample", "--seed", "3", sets=s) == 0
    return tmp, s


def read_manifest(root):
    with (root / "manifest.csv").open() as fh:
        return list(csv.DictReader(fh))


def test_fracture_writes_bundles_and_manifest(dataset):
    tmp, _ = dataset
    rows = read_manifest(tmp / "data")
    assert len(rows) == 8
    assert {r["shape"] for r in rows} == {"sphere", "box"}
    for r in rows:
        if r["status"] == "ok":
            bundle = tmp / "data" / r["id"]
            for name in ("fractured.ply", "restoration.ply", "observation.pgm", "depth.fxdm", "samples.fxss"):
                assert (bundle / name).exists()


def test_fracture_is_deterministic(dataset, tmp_path):
    tmp, s = dataset
    again = [x.replace(str(tmp / "data"), str(tmp_path / "data")) for x in s]
    assert run("fracture", "--seed", "3", sets=again) == 0
    assert (tmp_path / "data" / "manifest.csv").read_bytes() == (tmp / "data" / "manifest.csv").read_bytes()
    first = read_manifest(tmp / "data")[0]["id"]
    for name in ("fractured.ply", "meta", "grids/break.fxog"):
        assert (tmp_path / "data" / first / name).read_bytes() == (tmp / "data" / first / name).read_bytes()


def test_zero_requested_gives_empty_manifest(tmp_path):
    assert run("fracture", sets=sets_for(tmp_path, "seeds_per_shape=0")) == 0
    assert (tmp_path / "data" / "manifest.csv").read_text() == "id,shape,seed,status,restoration_fraction\n"


def test_invalid_base_mesh_is_a_row_error(tmp_path):
    bad = tmp_path / "broken.ply"
    bad.write_bytes(b"ply\nformat ascii 1.0\nend_header\n")
    assert run("fracture", sets=sets_for(tmp_path, f"shapes=sphere,{bad}", "seeds_per_shape=1")) == 0
    rows = read_manifest(tmp_path / "data")
    assert rows[-1]["status"].startswith("error")
    assert rows[0]["status"] in ("ok",) or rows[0]["status"].startswith("rejected")


def test_train_is_reproducible(dataset, tmp_path):
    tmp, s = dataset
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert run("train", "--seed", "3", sets=s + [f"output={out_a}"]) == 0
    assert run("train", "--seed", "3", sets=s + [f"output={out_b}"]) == 0
    assert (out_a / "loss.csv").read_bytes() == (out_b / "loss.csv").read_bytes()
    assert (out_a / "model.fxck").read_bytes() == (out_b / "model.fxck").read_bytes()
    lines = (out_a / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 5


def test_train_missing_bundle_is_a_data_error(dataset, tmp_path, capsys):
    tmp, s = dataset
    copy = tmp_path / "data"
    shutil.copytree(tmp / "data", copy)
    victim = next(r["id"] for r in read_manifest(copy) if r["status"] == "ok")
    shutil.rmtree(copy / victim)
    code = run("train", sets=s + [f"dataset={copy}", f"output={tmp_path / 'out'}"])
    assert code == 2
    assert victim in capsys.readouterr().err


def test_nonfinite_loss_exit_code(dataset, tmp_path, monkeypatch):
    tmp, s = dataset

    def explode(*args, **kwargs):
        raise NonFiniteLoss("loss is nan")

    monkeypatch.setattr(cli, "train", explode)
    assert run("train", sets=s + [f"output={tmp_path}"]) == 3
    assert (tmp_path / "model.fxck").exists()


def test_infer_untrained_model_on_blank_image(dataset, tmp_path):
    tmp, s = dataset
    assert run("train", sets=s + [f"output={tmp_path}", "steps=1"]) == 0
    blank = tmp_path / "blank.pgm"
    blank.write_bytes(b"P5\n16 16\n255\n" + bytes(256))
    for k in ("16", "2"):
        code = run("infer", sets=s + [f"output={tmp_path / 'pred'}", f"checkpoint={tmp_path / 'model.fxck'}",
                                      f"image={blank}", f"k={k}"])
        assert code == 0


def test_eval_identical_and_missing(dataset, tmp_path):
    tmp, s = dataset
    ids = [r["id"] for r in read_manifest(tmp / "data") if r["status"] == "ok"][:3]
    gt_dir, pred_dir = tmp_path / "gt", tmp_path / "pred"
    gt_dir.mkdir()
    pred_dir.mkdir()
    for i in ids:
        shutil.copytree(tmp / "data" / i, gt_dir / i)
        shutil.copy(tmp / "data" / i / "restoration.ply", pred_dir / f"{i}-restoration.ply")
    ev = s + [f"gt={gt_dir}", f"pred={pred_dir}", "metric_points=2000", f"output={tmp_path / 'e1'}"]
    assert run("eval", sets=ev) == 0
    text = (tmp_path / "e1" / "metrics.csv").read_text()
    rows = [l.split(",") for l in text.splitlines()[1:-1]]
    assert all(float(r[1]) < 1e-12 and abs(float(r[2]) - 1) < 1e-6 and r[4] == "1" for r in rows)
    assert "nz_percent=100" in text

    (pred_dir / f"{ids[0]}-restoration.ply").unlink()
    assert run("eval", sets=ev[:-1] + [f"output={tmp_path / 'e2'}"]) == 0
    text = (tmp_path / "e2" / "metrics.csv").read_text()
    assert "nz_percent=66.6667" in text and "generated=2 total=3" in text


def test_eval_order_invariance(dataset, tmp_path):
    tmp, s = dataset
    ids = [r["id"] for r in read_manifest(tmp / "data") if r["status"] == "ok"][:3]
    outs = []
    for order, name in ((ids, "x"), (ids[::-1], "y")):
        gt_dir, pred_dir = tmp_path / f"gt{name}", tmp_path / f"pred{name}"
        gt_dir.mkdir()
        pred_dir.mkdir()
        for i in order:
            save_mesh(cli.load_mesh(tmp / "data" / i / "restoration.ply"), gt_dir / f"{i}.ply")
            shutil.copy(tmp / "data" / i / "fractured.ply", pred_dir / f"{i}.ply")
        assert run("eval", sets=s + [f"gt={gt_dir}", f"pred={pred_dir}", "metric_points=1000",
                                     "rotations=4", f"output={tmp_path / name}"]) == 0
        outs.append((tmp_path / name / "metrics.csv").read_bytes())
    assert outs[0] == outs[1]


def test_ingest_matches_goldens(tmp_path):
    assert run("ingest", sets=[f"project={FIXTURE / 'scan.project'}", f"output={tmp_path}"]) == 0
    for i in range(2):
        assert (tmp_path / f"mask-{i:03d}.pgm").read_bytes() == (FIXTURE / f"golden-{i:03d}.pgm").read_bytes()
    with (tmp_path / "ingest.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["status"] for r in rows[:2]] == ["ok", "ok"]
    assert rows[2]["status"].startswith("error")
    assert int(rows[0]["mask_pixels"]) == int(read_pnm(FIXTURE / "golden-000.pgm").sum())


def test_ingest_empty_project(tmp_path):
    project = tmp_path / "empty.project"
    project.write_text("fx=10\nfy=10\ncx=8\ncy=8\nwidth=16\nheight=16\n")
    assert run("ingest", sets=[f"project={project}", f"output={tmp_path / 'out'}"]) == 0
    assert (tmp_path / "out" / "ingest.csv").read_text() == "index,record,points,mask_pixels,status\n"


@pytest.mark.parametrize("argv", [
    ["explode"],
    ["fracture", "--set", "nonsense=1"],
    ["fracture", "--set", "grid_k=1"],
    ["fracture", "--set", "lr=abc"],
    ["infer"],
])
def test_configuration_errors(argv, tmp_path):
    assert cli.main(argv + ["--set", f"output={tmp_path}"]) == 1


def test_stage_seeds_differ():
    assert cli.stage_seed(0, "fracture") != cli.stage_seed(0, "sample")
    assert cli.stage_seed(5, "train") == cli.stage_seed(5, "train")
    assert 0 <= cli.stage_seed(1, "x") < 2**63


def test_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nseed=7\nk=32\n")
    cfg = cli.build_config(path, ["k=64"])
    assert cfg.seed == 7 and cfg.k == 64
    assert cfg.train_config().lr == 2e-5
