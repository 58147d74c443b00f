import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from fusionchem.cli import main
from fusionchem.molio import Atom, Bond, MolecularGraph, read_archive, write_structure_file

RASTER = ["--width", "24", "--height", "24", "--resolution", "0.75"]


def run(*argv):
    return main([str(a) for a in argv])


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


def read_csv(path):
    with open(path, newline="") as fp:
        return list(csv.DictReader(fp))


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", 60, root / "data", "--seed", 3) == 0
    assert run("rasterize", root / "data" / "structures.sdf", "-o", root / "data" / "images.bfds", *RASTER) == 0
    return root


def base_config(data, family="mlp", **extra):
    cfg = {
        "family": family,
        "seed": 1,
        "data": {"archive": str(data / "data" / "images.bfds"),
                 "structures": str(data / "data" / "structures.sdf"),
                 "descriptors": str(data / "data" / "descriptors.csv"),
                 "labels": str(data / "data" / "labels.csv")},
        "split": {"mode": "kfold", "k": 4, "fold": 0},
        "mlp": {"depth": 2, "width": 16},
        "cnn": {"filters": 4, "n_blocks": 1},
        "optimizer": {"max_epochs": 3, "batch_size": 16},
        "train": {"patience": 5},
    }
    cfg.update(extra)
    return cfg


@pytest.fixture(scope="module")
def cnn_run(data):
    cfg = write_json(data / "cnn.json", base_config(data, "cnn", out=str(data / "runs" / "cnn")))
    assert run("train", cfg) == 0
    return data / "runs" / "cnn"


# -- rasterize ----------------------------------------------------------------


def mol(name, x=0.0):
    atoms = (Atom("C", x, 0.0), Atom("O", x + 1.2, 0.0))
    return MolecularGraph(atoms, (Bond(0, 1, 1.0),), name, {"label": "RB"})


def test_rasterize_three_valid(tmp_path):
    sdf = tmp_path / "three.sdf"
    sdf.write_text(write_structure_file([mol("a"), mol("b"), mol("c")]))
    out = tmp_path / "three.bfds"
    assert run("rasterize", sdf, "-o", out) == 0
    with open(out, "rb") as fp:
        archive = read_archive(fp)
    assert list(archive.ids) == ["a", "b", "c"] and archive.images.shape == (3, 80, 80, 4)
    assert read_csv(str(out) + ".rejects.csv") == []


def test_rasterize_rejects_oversized_and_is_deterministic(tmp_path):
    wide = MolecularGraph((Atom("C", 0.0, 0.0), Atom("C", 60.0, 0.0)), (Bond(0, 1, 1.0),), "wide")
    sdf = tmp_path / "mixed.sdf"
    sdf.write_text(write_structure_file([mol("a"), wide, mol("c")]))
    out1, out2 = tmp_path / "one.bfds", tmp_path / "two.bfds"
    assert run("rasterize", sdf, "-o", out1, "--rejects", tmp_path / "rej.csv") == 0
    with open(out1, "rb") as fp:
        assert list(read_archive(fp).ids) == ["a", "c"]
    rejects = read_csv(tmp_path / "rej.csv")
    assert len(rejects) == 1 and rejects[0]["id"] == "wide" and rejects[0]["reason"]
    assert run("rasterize", sdf, "-o", out2, "--rejects", tmp_path / "rej2.csv") == 0
    assert out1.read_bytes() == out2.read_bytes()


def test_rasterize_rejects_unparsable_record(tmp_path):
    sdf = tmp_path / "bad.sdf"
    text = write_structure_file([mol("a"), mol("b")])
    sdf.write_text(text.replace("    1.2000    0.0000    0.0000 O", "    x.xxxx    0.0000    0.0000 O", 1))
    assert run("rasterize", sdf, "-o", tmp_path / "bad.bfds") == 0
    rejects = read_csv(str(tmp_path / "bad.bfds") + ".rejects.csv")
    assert [r["record"] for r in rejects] == ["0"] and "line" in rejects[0]["reason"]


# -- train --------------------------------------------------------------------


def test_train_mlp_run_directory(data):
    cfg = write_json(data / "mlp.json", base_config(data, out=str(data / "runs" / "mlp")))
    assert run("train", cfg) == 0
    rd = data / "runs" / "mlp"
    for name in ("model.bfus", "history.csv", "split.json", "config.json", "manifest.json"):
        assert (rd / name).is_file()
    manifest = json.loads((rd / "manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["seeds"] == [1]
    assert set(manifest["artifacts"]) >= {"model.bfus", "history.csv", "split.json", "config.json"}
    split = json.loads((rd / "split.json").read_text())
    assert split["test"] is None
    assert split["validation"]["mode"] == "kfold" and len(split["validation"]["assignments"]) == 60


def test_train_is_reproducible(data):
    outs = []
    for tag in ("a", "b"):
        cfg = write_json(data / f"rep_{tag}.json", base_config(data, out=str(data / "runs" / f"rep_{tag}")))
        assert run("train", cfg) == 0
        outs.append(data / "runs" / f"rep_{tag}")
    assert (outs[0] / "history.csv").read_bytes() == (outs[1] / "history.csv").read_bytes()
    assert (outs[0] / "model.bfus").read_bytes() == (outs[1] / "model.bfus").read_bytes()


def test_seed_flag_overrides_config(data):
    cfg = write_json(data / "seed.json", base_config(data, out=str(data / "runs" / "seed7")))
    assert run("train", cfg, "--seed", 7, "--set", "optimizer.max_epochs=2") == 0
    manifest = json.loads((data / "runs" / "seed7" / "manifest.json").read_text())
    assert manifest["seeds"] == [7] and manifest["config"]["optimizer"]["max_epochs"] == 2


def test_sequential_without_checkpoint_is_config_error(data, capsys):
    cfg = write_json(data / "seq_bad.json", base_config(data, "sequential", out=str(data / "runs" / "x")))
    assert run("train", cfg) == 1
    assert "cnn_checkpoint" in capsys.readouterr().err


def test_config_errors_are_listed_together(data, capsys):
    cfg = base_config(data, out=str(data / "runs" / "bad"))
    cfg["mlp"] = {"depth": 7, "width": 16}
    cfg["split"] = {"mode": "kfold", "k": 4, "fold": 9}
    cfg["bogus"] = 1
    assert run("train", write_json(data / "bad.json", cfg)) == 1
    err = capsys.readouterr().err
    problems = [line for line in err.splitlines() if line.startswith("  - ")]
    assert len(problems) >= 3
    assert not (data / "runs" / "bad").exists()


def test_train_sequential_with_checkpoint(data, cnn_run):
    cfg = base_config(data, "sequential", out=str(data / "runs" / "seq"),
                      cnn_checkpoint=str(cnn_run / "model.bfus"))
    assert run("train", write_json(data / "seq.json", cfg)) == 0
    assert (data / "runs" / "seq" / "model.bfus").is_file()


def test_train_remix_with_test_data(data):
    assert run("synth", 20, data / "held", "--seed", 8, "--prefix", "held") == 0
    held = data / "held"
    cfg = base_config(data, out=str(data / "runs" / "remix"),
                      test_data={"descriptors": str(held / "descriptors.csv"), "labels": str(held / "labels.csv")},
                      split={"mode": "remix", "fraction": 0.4, "k": 4, "fold": 0})
    assert run("train", write_json(data / "remix.json", cfg)) == 0
    rd = data / "runs" / "remix"
    split = json.loads((rd / "split.json").read_text())
    test_ids = [i for i, f in split["test"]["assignments"].items() if f == "test"]
    assert len(test_ids) == 32
    assert any(i.startswith("held") for i in test_ids) and any(i.startswith("mol") for i in test_ids)
    assert len(read_csv(rd / "test_report.csv")) == 32
    assert "Er:" in (rd / "test_summary.txt").read_text()


# -- gridsearch ---------------------------------------------------------------


def test_gridsearch_single_cell_and_resume(data, capsys):
    out = data / "runs" / "grid"
    cfg = write_json(data / "grid.json", base_config(data, out=str(out),
                                                     grid={"depths": [2], "widths": [16], "folds": [0]}))
    assert run("gridsearch", cfg) == 0
    rows = read_csv(out / "grid_report.csv")
    assert len(rows) == 1 and rows[0]["depth"] == "2" and rows[0]["width"] == "16"
    best = json.loads((out / "best_config.json").read_text())
    assert best["mlp"]["depth"] == 2 and best["mlp"]["width"] == 16
    assert run("gridsearch", cfg) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["resumed_cells"] == 1 and manifest["computed_cells"] == 0


def test_gridsearch_rejects_cnn_family(data):
    cfg = write_json(data / "grid_cnn.json", base_config(data, "cnn", out=str(data / "runs" / "gc")))
    assert run("gridsearch", cfg) == 1


# -- ensemble -----------------------------------------------------------------


@pytest.fixture(scope="module")
def ensemble_run(data):
    out = data / "runs" / "ens"
    cfg = write_json(data / "ens.json", base_config(data, out=str(out), ensemble={"seeds": [0, 1, 2, 3, 4]}))
    assert run("ensemble", cfg) == 0
    return out


def test_ensemble_has_five_members(ensemble_run):
    spec = json.loads((ensemble_run / "ensemble.json").read_text())
    assert spec["seeds"] == [0, 1, 2, 3, 4]
    for seed in range(5):
        assert (ensemble_run / "members" / f"seed_{seed}" / "model.bfus").is_file()


def test_ensemble_duplicate_seeds(data, capsys):
    cfg = write_json(data / "ens_dup.json", base_config(data, out=str(data / "runs" / "dup"),
                                                        ensemble={"seeds": [0, 1, 1]}))
    assert run("ensemble", cfg) == 1
    assert "distinct" in capsys.readouterr().err


def test_ensemble_member_matches_independent_run(data, ensemble_run):
    cfg = write_json(data / "solo.json", base_config(data, out=str(data / "runs" / "solo2")))
    assert run("train", cfg, "--seed", 2) == 0
    member = ensemble_run / "members" / "seed_2"
    assert (member / "model.bfus").read_bytes() == (data / "runs" / "solo2" / "model.bfus").read_bytes()
    assert (member / "history.csv").read_bytes() == (data / "runs" / "solo2" / "history.csv").read_bytes()


# -- evaluate / predict -------------------------------------------------------


def test_evaluate_without_tau_has_full_coverage(data, ensemble_run):
    out = data / "eval_full"
    assert run("evaluate", ensemble_run, "--descriptors", data / "data" / "descriptors.csv",
               "--labels", data / "data" / "labels.csv", "--out", out) == 0
    assert "coverage: 1.0000" in (out / "summary.txt").read_text()
    assert len(read_csv(out / "report.csv")) == 60


def test_evaluate_tau_echoed_in_manifest(data):
    out = data / "eval_tau"
    assert run("evaluate", data / "runs" / "mlp", "--descriptors", data / "data" / "descriptors.csv",
               "--labels", data / "data" / "labels.csv", "--abstain-threshold", 0.8, "--out", out) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["abstain_threshold"] == 0.8
    assert 0.0 <= manifest["coverage"] <= 1.0


def test_evaluate_bad_tau(data):
    assert run("evaluate", data / "runs" / "mlp", "--descriptors", data / "data" / "descriptors.csv",
               "--labels", data / "data" / "labels.csv", "--abstain-threshold", 0.3,
               "--out", data / "eval_bad") == 1


def test_predict_unlabeled(data, tmp_path):
    rows = (data / "data" / "descriptors.csv").read_text().splitlines()
    unlabeled = tmp_path / "desc.csv"
    unlabeled.write_text("\n".join(rows[:11]) + "\n")
    assert run("predict", data / "runs" / "mlp", "--descriptors", unlabeled, "--out", tmp_path / "pred") == 0
    preds = read_csv(tmp_path / "pred" / "predictions.csv")
    assert len(preds) == 10 and set(preds[0]) == {"id", "probability", "prediction"}
    assert all(r["prediction"] in ("RB", "NRB") for r in preds)
    assert all(0.0 < float(r["probability"]) < 1.0 for r in preds)


def test_predict_cnn_needs_images(data, cnn_run, tmp_path):
    assert run("predict", cnn_run, "--descriptors", data / "data" / "descriptors.csv",
               "--out", tmp_path / "p") == 1


def test_inputs_are_not_mutated(data):
    before = {p: p.read_bytes() for p in (data / "data").iterdir() if p.is_file()}
    run("train", write_json(data / "mut.json", base_config(data, out=str(data / "runs" / "mut"))))
    assert {p: p.read_bytes() for p in before} == before


def test_console_script_entry_point(tmp_path):
    result = subprocess.run([sys.executable, "-m", "fusionchem.cli", "synth", "5", str(tmp_path / "s")],
                            capture_output=True, text=True)
    assert result.returncode == 0, result.stderr
    assert os.path.isfile(tmp_path / "s" / "labels.csv")
    assert np.loadtxt(tmp_path / "s" / "labels.csv", delimiter=",", skiprows=1, usecols=1).shape == (5,)


# -- pretrain -----------------------------------------------------------------


def test_pretrain_backbone_feeds_training(data, tmp_path):
    unl = tmp_path / "unl"
    assert run("synth", 40, unl, "--seed", 8, "--prefix", "unl") == 0
    cfg = {"family": "cnn", "seed": 2, "data": {"structures": str(unl / "structures.sdf")},
           "cnn": {"filters": 4, "n_blocks": 1}, "raster": {"width_px": 24, "height_px": 24, "resolution": 0.75},
           "optimizer": {"max_epochs": 3, "batch_size": 16}, "out": str(tmp_path / "pre")}
    assert run("pretrain", write_json(tmp_path / "pre.json", cfg)) == 0
    manifest = json.loads((tmp_path / "pre" / "manifest.json").read_text())
    assert set(manifest["artifacts"]) == {"config.json", "history.csv", "backbone.bfus"}
    assert manifest["targets"] >= 1
    backbone = tmp_path / "pre" / "backbone.bfus"
    train_cfg = base_config(data, "parallel", backbone=str(backbone), out=str(tmp_path / "run"))
    assert run("train", write_json(tmp_path / "train.json", train_cfg)) == 0
    assert (tmp_path / "run" / "model.bfus").is_file()


def test_pretrain_rejects_vector_family(data, tmp_path, capsys):
    cfg = {"family": "mlp", "data": {"descriptors": str(data / "data" / "descriptors.csv")},
           "out": str(tmp_path / "pre")}
    assert run("pretrain", write_json(tmp_path / "pre.json", cfg)) == 1
    err = capsys.readouterr().err
    assert "no image branch" in err and "data.structures" in err
    assert not (tmp_path / "pre").exists()
