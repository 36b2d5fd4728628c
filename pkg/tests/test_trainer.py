import csv
from dataclasses import replace

import numpy as np
import pytest

from ctkd.data.augment import AugmentConfig
from ctkd.errors import ConfigError, DivergedTrainingError
from ctkd.losses import Ablation, warmup_weight
from ctkd.pipeline import phantom_dataset
from ctkd.trainer import (
    METRICS_HEADER,
    TrainConfig,
    Trainer,
    load_student,
    model_configs,
    prepare_coarse_data,
    sgd_nesterov_step,
    train,
)

TINY = TrainConfig(
    epochs=4,
    patch=(16, 8, 16),
    coarse_extents=(16, 16, 16),
    fine_extents=(16, 8, 16),
    base_features=4,
    se_reduction=2,
    val_every=2,
)


@pytest.fixture(scope="module")
def cases():
    return phantom_dataset(3, 3, 1, seed=5, extents=(24, 24, 24))


@pytest.fixture(scope="module")
def coarse_data(cases):
    return prepare_coarse_data(cases, TINY)


def _params(trainer, name):
    return {k: p.data.copy() for k, p in trainer.models[name].params.items()}


# ------------------------------------------------------------------ optimizer
def test_sgd_examples():
    theta, buf = np.array([1.0]), np.zeros(1)
    sgd_nesterov_step([theta], [np.array([0.1])], [buf], lr=0.1, momentum=0.9, weight_decay=0.0)
    assert buf[0] == pytest.approx(0.1, abs=1e-15)
    assert abs(theta[0] - 0.981) < 1e-15
    theta, buf = np.array([2.0, -3.0]), np.zeros(2)
    sgd_nesterov_step([theta], [np.zeros(2)], [buf], 0.1, 0.99, 0.0)
    np.testing.assert_array_equal(theta, [2.0, -3.0])
    prev = theta.copy()
    for _ in range(20):
        sgd_nesterov_step([theta], [None], [buf], 0.1, 0.99, 3e-5)
        assert (np.abs(theta) < np.abs(prev)).all() and (np.sign(theta) == np.sign(prev)).all()
        prev = theta.copy()
    with pytest.raises(ValueError):
        sgd_nesterov_step([np.zeros(2)], [np.zeros(3)], [np.zeros(2)], 0.1, 0.9, 0.0)


# --------------------------------------------------------------- model sets
def test_model_sets_per_ablation():
    assert set(model_configs(replace(TINY, ablation=Ablation(fsl=True)))) == {"S"}
    cts = model_configs(replace(TINY, ablation=Ablation(cts=True)))
    assert set(cts) == {"S1", "S2"}
    assert {c.conv_style for c in cts.values()} == {"depthwise"}
    full = model_configs(TINY)
    assert full["T1"].decoder_upsampling != full["T2"].decoder_upsampling
    same = model_configs(replace(TINY, ablation=Ablation(same_decoder_teachers=True)))
    assert same["T1"] == same["T2"]
    assert set(model_configs(replace(TINY, ablation=Ablation(single_teacher=True)))) == {"T1", "S"}


def test_config_validation():
    with pytest.raises(ConfigError):
        replace(TINY, batch_size=2).validate()
    with pytest.raises(ConfigError):
        replace(TINY, patch=(18, 8, 16)).validate()
    with pytest.raises(ConfigError):
        replace(TINY, epochs=0).validate()
    with pytest.raises(ConfigError):
        replace(TINY, ablation=Ablation(cts=True, fsl=True)).validate()


def test_unlabeled_forward_skipped():
    assert Trainer(replace(TINY, ablation=Ablation(fsl=True))).unlabeled_models() == []
    assert Trainer(replace(TINY, ablation=Ablation(no_kd=True, no_psv=True, no_ctl=True))).unlabeled_models() == []
    assert Trainer(TINY).unlabeled_models() == ["T1", "T2", "S"]
    assert Trainer(replace(TINY, ablation=Ablation(cts=True))).unlabeled_models() == ["S1", "S2"]


# ------------------------------------------------------------- train steps
def test_cts_step_reports_cross_teaching_only(coarse_data):
    tr = Trainer(replace(TINY, ablation=Ablation(cts=True)))
    img, lbl = next(iter(coarse_data.labeled.values()))
    x_l, y_l = tr._patch(img, lbl, 0, 0, 0)
    x_u, _ = tr._patch(next(iter(coarse_data.unlabeled.values())), None, 0, 0, 1)
    rec = tr.train_step(x_l, y_l, x_u, 3, 0.01)
    assert rec["L_ctl"] is not None and rec["L_kd"] is None and rec["L_psv"] is None


def test_overfit_one_patch(coarse_data):
    # desk-default network width on a patch holding every class
    tr = Trainer(replace(TINY, base_features=8, se_reduction=8), dtype=np.float64)
    img, lbl = next(iter(coarse_data.labeled.values()))
    x, y = img[:16, 4:12, :16], lbl[:16, 4:12, :16]
    assert (np.bincount(y.ravel(), minlength=4) > 0).all()
    first = tr.train_step(x, y, None, 0, 0.01)["total"]
    for step in range(1, 50):
        last = tr.train_step(x, y, None, 0, 0.01, step)["total"]
    assert last <= 0.5 * first


def test_divergence_guard():
    tr = Trainer(TINY)
    x = np.full((16, 8, 16), np.nan, dtype=np.float32)
    with pytest.raises(DivergedTrainingError) as info:
        tr.train_step(x, np.zeros((16, 8, 16), np.uint8), None, 2, 0.01, step=7)
    assert info.value.epoch == 2 and info.value.step == 7


def test_severed_terms_match_fsl_bitwise(coarse_data):
    off = Trainer(replace(TINY, epochs=7, val_every=0, ablation=Ablation(no_kd=True, no_psv=True, no_ctl=True)))
    fsl = Trainer(replace(TINY, epochs=7, val_every=0, ablation=Ablation(fsl=True)))
    off.fit(coarse_data)
    fsl.fit(coarse_data)  # 7 epochs x 3 labeled cases = 21 steps
    a, b = _params(off, "S"), _params(fsl, "S")
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes(), k


def test_kd_and_psv_leave_teacher_gradients_unchanged(coarse_data):
    full = Trainer(TINY, dtype=np.float64)
    cut = Trainer(replace(TINY, ablation=Ablation(no_kd=True, no_psv=True)), dtype=np.float64)
    img, lbl = next(iter(coarse_data.labeled.values()))
    x_l, y_l = full._patch(img, lbl, 0, 0, 0)
    x_u, _ = full._patch(next(iter(coarse_data.unlabeled.values())), None, 0, 0, 1)
    g_full = full.compute_gradients(x_l, y_l, x_u, 3)
    g_cut = cut.compute_gradients(x_l, y_l, x_u, 3)
    for name in ("T1", "T2"):
        for k, g in g_full[name].items():
            assert g.tobytes() == g_cut[name][k].tobytes(), (name, k)
    assert any(not np.array_equal(g, g_cut["S"][k]) for k, g in g_full["S"].items())


# --------------------------------------------------------------- fit / state
def test_metrics_log_and_schedules(cases, tmp_path):
    cfg = replace(
        TINY,
        epochs=100,
        val_every=50,
        ablation=Ablation(fsl=True),
        augment=AugmentConfig.disabled(),
    )
    one = [c for c in cases if c.split != "labeled"] + [next(c for c in cases if c.split == "labeled")]
    trainer = train(one, cfg, tmp_path, stage="coarse")
    rows = list(csv.DictReader((tmp_path / "metrics.csv").open()))
    assert list(rows[0]) == METRICS_HEADER
    assert len(rows) == 100
    assert float(rows[0]["lr"]) == 0.01
    assert float(rows[-1]["lr"]) < 1e-4
    for r in rows:
        t = int(r["epoch"])
        assert abs(float(r["lambda_dis"]) - warmup_weight(t, cfg.schedule_max, cfg.loss.lambda_dis)) <= 1e-12
        assert abs(float(r["lambda_ssl"]) - warmup_weight(t, cfg.schedule_max, cfg.loss.lambda_ssl)) <= 1e-12
    assert rows[0]["L_kd"] == "" and rows[0]["val_dsc"] == ""
    assert rows[49]["val_dsc"] != "" and rows[99]["val_dsc"] != ""
    assert (tmp_path / "ckpt_epoch_99" / "state.json").exists()
    assert (tmp_path / "ckpt_best" / "state.json").exists()
    assert (tmp_path / "training_curves.png").stat().st_size > 0
    assert trainer.state.epoch == 99


def test_checkpoint_round_trip(coarse_data, tmp_path):
    tr = Trainer(TINY)
    tr.fit(replace(coarse_data, validation={}))
    tr.save_checkpoint(tmp_path / "ck")
    back = Trainer(TINY)
    back.load_checkpoint(tmp_path / "ck")
    for name in tr.models:
        for k, p in tr.models[name].params.items():
            assert back.models[name].params[k].data.tobytes() == p.data.tobytes()
            assert back.buffers[name][k].tobytes() == tr.buffers[name][k].tobytes()
    assert back.state == tr.state
    s = load_student(tmp_path / "ck")
    assert s.config == tr.student.config
    with pytest.raises(ValueError):
        Trainer(replace(TINY, ablation=Ablation(fsl=True))).load_checkpoint(tmp_path / "ck")


def test_resume_is_bitwise(coarse_data, tmp_path):
    cfg = replace(TINY, epochs=4, ckpt_every=2)
    ref = Trainer(cfg, tmp_path / "ref")
    ref_rows = ref.fit(coarse_data)
    assert (tmp_path / "ref" / "ckpt_epoch_1").exists()

    resumed = Trainer(cfg, tmp_path / "ref2")
    resumed.load_checkpoint(tmp_path / "ref" / "ckpt_epoch_1")
    rows = resumed.fit(coarse_data)
    assert [r["epoch"] for r in rows] == [2, 3]
    for a, b in zip(ref_rows[2:], rows):
        for k in METRICS_HEADER:
            assert a[k] == b[k], k
    for name in ref.models:
        for k, p in ref.models[name].params.items():
            assert resumed.models[name].params[k].data.tobytes() == p.data.tobytes()


def test_fine_stage_needs_coarse_student(cases):
    with pytest.raises(ValueError, match="coarse student"):
        train(cases, replace(TINY, epochs=1), stage="fine")
    with pytest.raises(ValueError):
        train(cases, TINY, stage="middle")
