import csv
import json

import numpy as np
import pytest

from ctkd.cli import ABLATIONS, EXIT_CONFIG, EXIT_DATA, EXIT_OK, main, resolve_checkpoint
from ctkd.config import dump_config, load_config
from ctkd.data.dataset import read_manifest
from ctkd.data.volume import load_volume
from ctkd.errors import ConfigError
from ctkd.losses import Ablation

TINY_INI = """
[train]
epochs = 2
patch = 16, 8, 16
coarse_extents = 16, 16, 16
fine_extents = 16, 8, 16
base_features = 4
se_reduction = 2
val_every = 1

[phantoms]
n_labeled = 2
n_unlabeled = 2
n_validation = 2
extents = 24, 24, 24
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ini = root / "tiny.ini"
    ini.write_text(TINY_INI)
    assert main(["--config", str(ini), "phantoms", "--out", str(root / "data")]) == EXIT_OK
    return root, ini


@pytest.fixture(scope="module")
def trained(workspace):
    root, ini = workspace
    base = ["--config", str(ini), "train", "--dataset", str(root / "data")]
    assert main(base + ["--run", str(root / "coarse")]) == EXIT_OK
    assert main(base + ["--run", str(root / "fine"), "--stage", "fine", "--coarse-run", str(root / "coarse")]) == EXIT_OK
    return root, ini


# -------------------------------------------------------------------- config
def test_defaults_and_round_trip(tmp_path):
    cfg = load_config()
    assert cfg.train.epochs == 100 and cfg.train.lr0 == 0.01 and cfg.phantoms.n_unlabeled == 40
    path = tmp_path / "c.ini"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_unknown_keys_rejected(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[train]\nepochz = 3\n")
    with pytest.raises(ConfigError, match="train.epochz"):
        load_config(p)
    p.write_text("[nonsense]\nx = 1\n")
    with pytest.raises(ConfigError, match="nonsense"):
        load_config(p)
    p.write_text("[train]\nepochs = many\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_env_overrides(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train]\nepochs = 7\n")
    cfg = load_config(p, environ={"CTKD_TRAIN__EPOCHS": "9", "CTKD_ABLATION__NO_KD": "true", "HOME": "/x"})
    assert cfg.train.epochs == 9 and cfg.train.ablation.no_kd
    with pytest.raises(ConfigError):
        load_config(p, environ={"CTKD_TRAIN__WHAT": "1"})


def test_ablation_flags_map_to_toggles():
    assert ABLATIONS["proposed"] == {}
    assert Ablation(**ABLATIONS["fsl"]).fsl
    assert Ablation(**ABLATIONS["ctt-sd"]).same_decoder_teachers
    assert Ablation(**ABLATIONS["cts"]).cts
    for flags in ABLATIONS.values():
        Ablation(**flags).validate()


# ------------------------------------------------------------------ phantoms
def test_phantoms_counts_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["--seed", "7", "phantoms", "--labeled", "5", "--unlabeled", "20", "--validation", "3"]
    ini = tmp_path / "small.ini"
    ini.write_text("[phantoms]\nextents = 16, 16, 16\n")
    assert main(["--config", str(ini)] + args + ["--out", str(a)]) == EXIT_OK
    assert main(["--config", str(ini)] + args + ["--out", str(b)]) == EXIT_OK
    man = read_manifest(a)
    assert len(man["cases"]) == 28
    splits = [c["split"] for c in man["cases"]]
    assert splits.count("labeled") == 5 and splits.count("unlabeled") == 20 and splits.count("validation") == 3
    assert all("label" not in c for c in man["cases"] if c["split"] == "unlabeled")
    for f in sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file()):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_exit_codes(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nbogus = 1\n")
    assert main(["--config", str(bad), "phantoms", "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["evaluate", "--pred", str(tmp_path), "--dataset", str(tmp_path / "none")]) == EXIT_DATA
    assert main(["phantoms", "--out", str(tmp_path / "y"), "--labeled", "0"]) == EXIT_CONFIG
    with pytest.raises(SystemExit):
        main(["train", "--dataset", "x", "--run", "y", "--ablation", "unknown"])


# ------------------------------------------------------------ train / infer
def test_train_outputs(trained):
    root, _ = trained
    for run in ("coarse", "fine"):
        d = root / run
        assert (d / "config.resolved.ini").exists()
        rows = list(csv.DictReader((d / "metrics.csv").open()))
        assert len(rows) == 2
        assert (d / "training_curves.png").stat().st_size > 0
        assert resolve_checkpoint(d).name == "ckpt_epoch_1"
    state = json.loads((root / "coarse" / "ckpt_epoch_1" / "state.json").read_text())
    assert state["models"] == ["T1", "T2", "S"] and state["student"] == "S"


def test_fine_stage_requires_coarse_run(trained):
    root, ini = trained
    rc = main(["--config", str(ini), "train", "--dataset", str(root / "data"), "--run", str(root / "f2"), "--stage", "fine"])
    assert rc == EXIT_CONFIG


def test_infer_and_evaluate(trained):
    root, ini = trained
    args = ["--config", str(ini), "infer", "--coarse", str(root / "coarse"), "--fine", str(root / "fine")]
    assert main(args + ["--dataset", str(root / "data"), "--out", str(root / "pred")]) == EXIT_OK
    assert main(args + ["--dataset", str(root / "data"), "--out", str(root / "pred2")]) == EXIT_OK
    masks = sorted((root / "pred").glob("val_*.json"))
    assert len(masks) == 2
    for m in masks:
        assert m.read_bytes() == (root / "pred2" / m.name).read_bytes()
        assert (root / "pred" / m.name.replace(".json", ".raw")).read_bytes() == (
            root / "pred2" / m.name.replace(".json", ".raw")
        ).read_bytes()
    timing = list(csv.DictReader((root / "pred" / "timing.csv").open()))
    assert [r["case_id"] for r in timing] == ["val_000", "val_001"]
    assert all(float(r["seconds"]) > 0 for r in timing)

    assert main(["--config", str(ini), "evaluate", "--pred", str(root / "pred"), "--dataset", str(root / "data")]) == 0
    rows = list(csv.reader((root / "pred" / "report.csv").open()))
    assert rows[0] == ["class", "dsc_mean", "dsc_std", "nsd_mean", "nsd_std"] and len(rows) == 5
    assert (root / "pred" / "report.png").stat().st_size > 0
    first = (root / "pred" / "report.csv").read_bytes()
    main(["--config", str(ini), "evaluate", "--pred", str(root / "pred"), "--dataset", str(root / "data")])
    assert (root / "pred" / "report.csv").read_bytes() == first


def test_evaluate_perfect_and_empty_predictions(workspace, tmp_path):
    root, ini = workspace
    labels = root / "data" / "labels"
    perfect = tmp_path / "perfect"
    perfect.mkdir()
    for f in labels.glob("val_*"):
        (perfect / f.name).write_bytes(f.read_bytes())
    assert main(["--config", str(ini), "evaluate", "--pred", str(perfect), "--dataset", str(root / "data")]) == 0
    mean = list(csv.DictReader((perfect / "report.csv").open()))[-1]
    assert mean["class"] == "mean" and float(mean["dsc_mean"]) == 1.0 and float(mean["nsd_mean"]) == 1.0

    empty = tmp_path / "empty"
    empty.mkdir()
    for f in labels.glob("val_*.json"):
        man = json.loads(f.read_text())
        (empty / f.name).write_text(f.read_text())
        (empty / man["payload"]).write_bytes(bytes(len((labels / man["payload"]).read_bytes())))
        assert load_volume(empty / f.name).data.max() == 0
    assert main(["--config", str(ini), "evaluate", "--pred", str(empty), "--dataset", str(root / "data")]) == 0
    rows = list(csv.DictReader((empty / "report.csv").open()))
    assert all(float(r["dsc_mean"]) == 0.0 for r in rows)


def test_infer_nifti_input(trained, tmp_path):
    from ctkd.data.nifti import read_nifti, write_nifti

    root, ini = trained
    img = load_volume(root / "data" / "images" / "val_000.json")
    nii = write_nifti(tmp_path / "scan.nii", img)
    out = tmp_path / "out"
    rc = main(["--config", str(ini), "infer", "--coarse", str(root / "coarse"), "--fine", str(root / "fine"),
               "--input", str(nii), "--out", str(out)])
    assert rc == EXIT_OK
    mask = read_nifti(out / "scan.nii", kind="mask")
    assert mask.extents == img.extents
    np.testing.assert_allclose(mask.direction, img.direction)
    rc = main(["--config", str(ini), "infer", "--coarse", str(tmp_path / "nope"), "--fine", str(root / "fine"),
               "--input", str(nii), "--out", str(out)])
    assert rc == EXIT_DATA
