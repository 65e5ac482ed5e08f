import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from pointmeta.cli import main
from pointmeta.model import load_checkpoint

SYNTH_SPEC = {
    "density": 40,
    "color_noise": 5,
    "areas": [
        {"name": "AreaA", "rooms": {"office": 2, "hallway": 2, "storage": 2}},
        {"name": "AreaB", "rooms": {"office": 2, "hallway": 2, "storage": 2}},
    ],
}

RUN_CONFIG = {
    "data": {"root": None, "areas": ["AreaA"], "points_per_block": 32},
    "episode": {"ways": 2, "shots": 2, "queries": 1},
    "model": {"mlp1_widths": [8, 8], "mlp2_widths": [8, 16], "seg_head_widths": [8]},
    "meta": {"alpha": 1e-3, "beta": 1e-3, "epochs": 2, "steps_per_epoch": 3},
    "seeds": {"init": 0, "tasks": 1},
}


def tree_hashes(root: Path) -> dict:
    # manifest.json records the (path-dependent) input fingerprints, so byte
    # comparisons across reruns cover everything else
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(SYNTH_SPEC))
    out = root / "data"
    assert main(["synth", "--spec", str(spec_path), "--seed", "7", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def pretrained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = json.loads(json.dumps(RUN_CONFIG))
    cfg["data"]["root"] = str(dataset)
    cfg_path = out / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    run_dir = out / "train"
    assert main(["pretrain", "--config", str(cfg_path), "--out", str(run_dir)]) == 0
    return run_dir


def test_synth_layout_and_determinism(dataset, tmp_path):
    assert (dataset / "vocab.txt").exists()
    assert sorted(p.name for p in dataset.iterdir() if p.is_dir()) == ["AreaA", "AreaB"]
    assert (dataset / "manifest.json").exists()
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(SYNTH_SPEC))
    again = tmp_path / "data2"
    assert main(["synth", "--spec", str(spec_path), "--seed", "7", "--out", str(again)]) == 0
    assert tree_hashes(dataset) == tree_hashes(again)


def test_synth_block_counts_match_partitioner(dataset, tmp_path, capsys):
    from pointmeta.data import load_dataset, partition_blocks

    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(SYNTH_SPEC))
    assert main(["synth", "--spec", str(spec_path), "--seed", "7", "--out", str(tmp_path / "d")]) == 0
    printed = {}
    for line in capsys.readouterr().out.splitlines():
        if "blocks" in line:
            printed[line.split(":")[0]] = int(line.split()[-2])
    areas, _ = load_dataset(tmp_path / "d")
    for area in areas:
        recount = sum(len(partition_blocks(room)) for room in area.rooms)
        assert printed[area.name] == recount


def test_synth_bad_spec(tmp_path, capsys):
    spec = tmp_path / "bad.json"
    spec.write_text(json.dumps({"areas": [{"name": "X", "rooms": {"throne_room": 1}}]}))
    code = main(["synth", "--spec", str(spec), "--seed", "0", "--out", str(tmp_path / "o")])
    assert code == 2
    assert "throne_room" in capsys.readouterr().err


def test_ingest_prints_stats(dataset, capsys):
    assert main(["ingest", "--data", str(dataset)]) == 0
    out = capsys.readouterr().out
    assert "AreaA" in out and "AreaB" in out and "blocks" in out


def test_ingest_missing_dir(tmp_path):
    assert main(["ingest", "--data", str(tmp_path / "nope")]) in (2, 5)


def test_pretrain_outputs(pretrained):
    names = {p.name for p in pretrained.iterdir()}
    assert {"ckpt_epoch0", "ckpt_epoch1", "ckpt_epoch2", "loss.csv", "manifest.json"} <= names
    with open(pretrained / "loss.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "query_loss", "beta", "alpha"]
    assert len(rows) == 1 + 6  # 2 epochs x 3 steps


def test_pretrain_zero_steps_checkpoint_equals_init(dataset, tmp_path):
    cfg = json.loads(json.dumps(RUN_CONFIG))
    cfg["data"]["root"] = str(dataset)
    cfg["meta"]["epochs"] = 0
    cfg["meta"]["steps_per_epoch"] = 0
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    out = tmp_path / "zero"
    assert main(["pretrain", "--config", str(cfg_path), "--out", str(out)]) == 0
    _, params = load_checkpoint(out / "ckpt_epoch0")
    from pointmeta.model import PointNetConfig, init_params

    reference = init_params(
        PointNetConfig(num_classes=6, mlp1_widths=(8, 8), mlp2_widths=(8, 16), seg_head_widths=(8,), points_per_block=32),
        seed=0,
    )
    assert all(np.array_equal(params[n], reference[n]) for n in reference.keys())


def test_pretrain_missing_data_path(tmp_path):
    cfg = json.loads(json.dumps(RUN_CONFIG))
    cfg["data"]["root"] = str(tmp_path / "missing")
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    assert main(["pretrain", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) in (2, 5)


def test_pretrain_divergence_exit_code(dataset, tmp_path):
    cfg = json.loads(json.dumps(RUN_CONFIG))
    cfg["data"]["root"] = str(dataset)
    cfg["meta"]["alpha"] = 1e7
    cfg["meta"]["epochs"] = 1
    cfg["meta"]["steps_per_epoch"] = 50
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    out = tmp_path / "boom"
    with np.errstate(all="ignore"):
        assert main(["pretrain", "--config", str(cfg_path), "--out", str(out)]) == 3
    # the initial checkpoint and the partial loss record survive the abort
    assert (out / "ckpt_epoch0").exists()
    assert (out / "loss.csv").exists()


def test_pretrain_beta_sweep(dataset, tmp_path):
    cfg = json.loads(json.dumps(RUN_CONFIG))
    cfg["data"]["root"] = str(dataset)
    cfg["meta"]["epochs"] = 1
    cfg["meta"]["steps_per_epoch"] = 2
    cfg["meta"]["beta_sweep"] = [1e-2, 1e-3, 1e-4]
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    out = tmp_path / "sweep"
    assert main(["pretrain", "--config", str(cfg_path), "--out", str(out)]) == 0
    for beta in ("0.01", "0.001", "0.0001"):
        assert (out / f"beta_{beta}" / "loss.csv").exists()
    with open(out / "beta_0.01" / "loss.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[1][2] == repr(0.01)


def test_pretrain_rerun_identical(dataset, tmp_path, pretrained):
    cfg = json.loads(json.dumps(RUN_CONFIG))
    cfg["data"]["root"] = str(dataset)
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    rerun = tmp_path / "train2"
    assert main(["pretrain", "--config", str(cfg_path), "--out", str(rerun)]) == 0
    ours = tree_hashes(rerun)
    theirs = tree_hashes(pretrained)
    assert ours == theirs


def test_adapt_eval_and_outputs(dataset, pretrained, tmp_path, capsys):
    out = tmp_path / "eval"
    code = main(
        [
            "adapt-eval",
            "--checkpoint", str(pretrained / "ckpt_epoch2"),
            "--data", str(dataset),
            "--areas", "AreaB",
            "--ways", "2", "--shots", "2", "--episodes", "3",
            "--beta", "0.001", "--inner-steps", "2",
            "--seed", "5",
            "--out", str(out),
        ]
    )
    assert code == 0
    assert "oAcc=" in capsys.readouterr().out
    with open(out / "episodes.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 + 3
    with open(out / "metrics.csv") as fh:
        mrows = list(csv.reader(fh))
    assert mrows[0][0] == "class"
    assert mrows[-1][0] == "overall"


def test_adapt_eval_zero_episodes_usage_error(dataset, pretrained, tmp_path):
    code = main(
        [
            "adapt-eval",
            "--checkpoint", str(pretrained / "ckpt_epoch2"),
            "--data", str(dataset),
            "--episodes", "0",
            "--out", str(tmp_path / "x"),
        ]
    )
    assert code == 2


def test_adapt_eval_capacity_error(dataset, pretrained, tmp_path):
    code = main(
        [
            "adapt-eval",
            "--checkpoint", str(pretrained / "ckpt_epoch2"),
            "--data", str(dataset),
            "--areas", "AreaB",
            "--ways", "6", "--shots", "6", "--episodes", "2",
            "--out", str(tmp_path / "x"),
        ]
    )
    assert code == 4


def test_export_ply(dataset, pretrained, tmp_path):
    room = next((dataset / "AreaB").glob("office_*.txt"))
    out = tmp_path / "ply"
    code = main(
        [
            "export-ply",
            "--checkpoint", str(pretrained / "ckpt_epoch2"),
            "--room", str(room),
            "--vocab", str(dataset / "vocab.txt"),
            "--out", str(out),
        ]
    )
    assert code == 0
    preds = sorted(out.glob("*_pred.ply"))
    truths = sorted(out.glob("*_truth.ply"))
    assert len(preds) == len(truths) >= 1
    per_block = 32  # checkpoint's points_per_block
    for ply in preds + truths:
        header = ply.read_text().splitlines()
        vertex = next(l for l in header if l.startswith("element vertex"))
        assert int(vertex.split()[-1]) == per_block


def test_export_ply_palette_missing_class(dataset, pretrained, tmp_path):
    room = next((dataset / "AreaB").glob("office_*.txt"))
    palette = tmp_path / "palette.json"
    palette.write_text(json.dumps({"0": [255, 0, 0]}))
    code = main(
        [
            "export-ply",
            "--checkpoint", str(pretrained / "ckpt_epoch2"),
            "--room", str(room),
            "--vocab", str(dataset / "vocab.txt"),
            "--palette", str(palette),
            "--out", str(tmp_path / "ply2"),
        ]
    )
    assert code == 2


def test_cross_validate_table(dataset, tmp_path):
    cfg = json.loads(json.dumps(RUN_CONFIG))
    cfg["data"]["root"] = str(dataset)
    del cfg["data"]["areas"]
    cfg["meta"]["epochs"] = 1
    cfg["meta"]["steps_per_epoch"] = 2
    cfg["eval"] = {"episodes": 2, "beta": 1e-3, "inner_steps": 1, "seed": 3}
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    out = tmp_path / "cv"
    assert main(["cross-validate", "--config", str(cfg_path), "--out", str(out)]) == 0
    with open(out / "crossval.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["test_area", "AreaA", "AreaB"]
    table = {r[0]: r[1:] for r in rows[1:]}
    assert table["AreaA"][0] == ""  # empty diagonal
    assert table["AreaB"][1] == ""
    assert float(table["AreaB"][0]) > 0


def test_gradcheck_passes_and_negative_control(capsys):
    assert main(["gradcheck", "--bits", "64"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert main(["gradcheck", "--bits", "32"]) == 0
    assert main(["gradcheck", "--bits", "64", "--inject-error"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_manifest_contents(pretrained):
    manifest = json.loads((pretrained / "manifest.json").read_text())
    assert manifest["tool"] == "pointmeta"
    assert manifest["command"] == "pretrain"
    assert "config_hash" in manifest and manifest["outputs"]
    assert any(k.endswith("loss.csv") for k in manifest["outputs"])
