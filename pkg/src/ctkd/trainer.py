"""Joint online training of two teachers and a student.

One total loss is built per labeled/unlabeled pair, backpropagated once, and
every model takes one SGD step. Which networks exist and which loss terms are
active is decided by :class:`~ctkd.losses.Ablation`.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_model, load_tensors, save_model, save_tensors
from .data.augment import AugmentConfig, augment
from .data.preprocess import (
    clip_hu,
    foreground_box,
    preprocess_image,
    reorient_rai,
    resample_to,
    zscore,
)
from .data.sampler import build_epoch_plan
from .data.volume import Case, Volume
from .errors import ConfigError, DivergedTrainingError
from .inference import (
    InferenceConfig,
    coarse_segment,
    gaussian_importance,
    make_sliding_plan,
    sliding_window_predict,
)
from .losses import (
    Ablation,
    BranchTerms,
    LossConfig,
    branch_objective,
    one_hot,
    poly_lr,
    total_objective,
    warmup_weight,
)
from .metrics import dsc
from .networks import Model, NetworkConfig, build_model

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "lr", "lambda_dis", "lambda_ssl", "L_seg", "L_ctl", "L_psv", "L_kd", "total", "val_dsc"]

# Fixed per-name offsets keep a model's initialization independent of which
# other models are trained alongside it.
_MODEL_SEED_OFFSET = {"T1": 1, "T2": 2, "S": 3, "S1": 4, "S2": 5}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 1
    patch: tuple[int, int, int] = (32, 16, 32)
    coarse_extents: tuple[int, int, int] = (32, 24, 32)
    fine_extents: tuple[int, int, int] = (32, 16, 32)
    lr0: float = 0.01
    momentum: float = 0.99
    weight_decay: float = 3e-5
    num_classes: int = 4
    base_features: int = 8
    num_stages: int = 2
    se_reduction: int = 8
    seed: int = 0
    val_every: int = 1
    ckpt_every: int = 0  # 0: only the final epoch
    pad_fraction: float = 0.10
    clip: tuple[float, float] = (-300.0, 300.0)
    loss: LossConfig = field(default_factory=LossConfig)
    ablation: Ablation = field(default_factory=Ablation)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size != 1:
            raise ConfigError(f"train.batch_size: only 1 is supported, got {self.batch_size}")
        div = 2**self.num_stages
        for name in ("patch", "fine_extents", "coarse_extents"):
            ext = getattr(self, name)
            if len(ext) != 3 or any(n < 1 or n % div for n in ext):
                raise ConfigError(f"train.{name} {ext} must be three extents divisible by 2^num_stages = {div}")
        if any(p > c for p, c in zip(self.patch, self.coarse_extents)):
            raise ConfigError(f"train.patch {self.patch} exceeds train.coarse_extents {self.coarse_extents}")
        if not 0 <= self.momentum < 1 or self.lr0 <= 0 or self.weight_decay < 0:
            raise ConfigError("train.momentum must be in [0, 1), lr0 > 0, weight_decay >= 0")
        try:
            self.loss.validate()
            self.ablation.validate()
            for cfg in model_configs(self).values():
                cfg.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    @property
    def schedule_max(self) -> int:
        """Epoch index at which the schedules reach their end points."""
        return max(self.epochs - 1, 1)

    @property
    def inference(self) -> InferenceConfig:
        return InferenceConfig(
            coarse_extents=self.coarse_extents,
            fine_extents=self.fine_extents,
            patch=self.patch,
            pad_fraction=self.pad_fraction,
            clip=self.clip,
        )


def model_configs(cfg: TrainConfig) -> dict[str, NetworkConfig]:
    """Networks trained under ``cfg.ablation``, keyed T1/T2/S or S1/S2."""
    base = NetworkConfig(
        num_classes=cfg.num_classes,
        base_features=cfg.base_features,
        num_stages=cfg.num_stages,
        se_reduction=cfg.se_reduction,
    )
    teacher1 = replace(base, decoder_upsampling="transposed", conv_style="regular")
    teacher2 = replace(
        base,
        decoder_upsampling="transposed" if cfg.ablation.same_decoder_teachers else "trilinear",
        conv_style="regular",
    )
    student = replace(base, decoder_upsampling="transposed", conv_style="depthwise")
    ab = cfg.ablation
    if ab.fsl:
        return {"S": student}
    if ab.cts:
        return {"S1": student, "S2": replace(student, decoder_upsampling="trilinear")}
    if ab.single_teacher:
        return {"T1": teacher1, "S": student}
    return {"T1": teacher1, "T2": teacher2, "S": student}


def inference_model_name(names: Iterable[str]) -> str:
    names = list(names)
    return "S" if "S" in names else "S1"


# ---------------------------------------------------------------- optimizer
def sgd_nesterov_step(
    params: Sequence[np.ndarray],
    grads: Sequence[Optional[np.ndarray]],
    buffers: Sequence[np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """In place: d = g + wd*theta; buf = mu*buf + d; theta -= lr*(d + mu*buf)."""
    if not (len(params) == len(grads) == len(buffers)):
        raise ValueError("params, grads and buffers must have the same length")
    for i, (theta, g, buf) in enumerate(zip(params, grads, buffers)):
        if buf.shape != theta.shape or (g is not None and g.shape != theta.shape):
            raise ValueError(f"entry {i}: shape mismatch between parameter {theta.shape}, gradient and buffer")
        d = weight_decay * theta if g is None else g + weight_decay * theta
        buf *= momentum
        buf += d
        theta -= lr * (d + momentum * buf)


# --------------------------------------------------------------------- data
@dataclass
class StageData:
    """Preprocessed arrays for one training stage."""

    stage: str
    labeled: dict[str, tuple[np.ndarray, np.ndarray]]
    unlabeled: dict[str, np.ndarray]
    validation: dict[str, tuple[np.ndarray, np.ndarray]]


def _label_rai(case: Case) -> Volume:
    if case.label is None:
        raise ValueError(f"case {case.case_id} has no label")
    return reorient_rai(case.label)


def coarse_arrays(case: Case, cfg: TrainConfig, with_label: bool = True):
    img = preprocess_image(case.image, cfg.coarse_extents, cfg.clip).data.astype(np.float32)
    if not with_label:
        return img
    lbl = resample_to(_label_rai(case), cfg.coarse_extents, "nearest").data.astype(np.uint8)
    return img, lbl


def fine_arrays(image: Volume, mask_rai: np.ndarray, cfg: TrainConfig, label: Optional[Volume] = None):
    """Crop around ``mask_rai`` (RAI grid) and resample to the fine extents."""
    rai = reorient_rai(image)
    try:
        box = foreground_box(mask_rai, cfg.pad_fraction)
    except ValueError:
        box = tuple((0, n) for n in rai.extents)
    sl = tuple(slice(a, b) for a, b in box)
    crop = rai.with_data(np.ascontiguousarray(rai.data[sl]))
    img = zscore(clip_hu(resample_to(crop, cfg.fine_extents, "trilinear"), *cfg.clip)).data.astype(np.float32)
    if label is None:
        return img
    lrai = reorient_rai(label)
    lcrop = lrai.with_data(np.ascontiguousarray(lrai.data[sl]))
    return img, resample_to(lcrop, cfg.fine_extents, "nearest").data.astype(np.uint8)


def prepare_coarse_data(cases: Sequence[Case], cfg: TrainConfig) -> StageData:
    data = StageData("coarse", {}, {}, {})
    for c in cases:
        if c.split == "unlabeled":
            data.unlabeled[c.case_id] = coarse_arrays(c, cfg, with_label=False)
        elif c.split == "labeled":
            data.labeled[c.case_id] = coarse_arrays(c, cfg)
        else:
            data.validation[c.case_id] = coarse_arrays(c, cfg)
    return data


def prepare_fine_data(
    cases: Sequence[Case], cfg: TrainConfig, pseudo_masks: Mapping[str, np.ndarray]
) -> StageData:
    """Labeled/validation cases crop around ground truth, unlabeled around coarse masks."""
    data = StageData("fine", {}, {}, {})
    for c in cases:
        if c.split == "unlabeled":
            if c.case_id not in pseudo_masks:
                raise ValueError(f"no coarse pseudo-mask for unlabeled case {c.case_id}")
            data.unlabeled[c.case_id] = fine_arrays(c.image, pseudo_masks[c.case_id], cfg)
        else:
            target = data.labeled if c.split == "labeled" else data.validation
            target[c.case_id] = fine_arrays(c.image, _label_rai(c).data, cfg, c.label)
    return data


def generate_pseudo_masks(coarse_model: Model, cases: Sequence[Case], cfg: TrainConfig) -> dict[str, np.ndarray]:
    """Coarse student predictions (RAI grid) for every unlabeled case."""
    return {
        c.case_id: coarse_segment(coarse_model, c.image, cfg.inference) for c in cases if c.split == "unlabeled"
    }


# ------------------------------------------------------------------ trainer
@dataclass
class TrainState:
    epoch: int = -1  # last completed epoch
    best_val: float = -math.inf
    best_epoch: int = -1


def _scalar(t: Optional[Tensor]) -> Optional[float]:
    return None if t is None else float(t.data)


class Trainer:
    def __init__(self, cfg: TrainConfig, run_dir=None, dtype=np.float32):
        self.cfg = cfg.validate()
        self.loss_cfg = replace(cfg.loss, t_max=cfg.schedule_max)
        self.dtype = dtype
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.models: dict[str, Model] = {}
        for name, ncfg in model_configs(cfg).items():
            seed = int(np.random.SeedSequence([cfg.seed, _MODEL_SEED_OFFSET[name]]).generate_state(1)[0])
            self.models[name] = Model(ncfg, build_model(ncfg, seed, dtype=dtype))
        self.buffers = {n: {k: np.zeros_like(p.data) for k, p in m.params.items()} for n, m in self.models.items()}
        self.state = TrainState()
        self.student_name = inference_model_name(self.models)

    # ---------------------------------------------------------------- models
    @property
    def student(self) -> Model:
        return self.models[self.student_name]

    def unlabeled_models(self) -> list[str]:
        """Models whose unlabeled predictions feed at least one active term."""
        ab = self.cfg.ablation
        if not ab.uses_unlabeled:
            return []
        names = set(self.models)
        needed: set[str] = set()
        for a, b in (("T1", "T2"), ("S1", "S2")):
            if a in names and b in names and not ab.no_ctl:
                needed |= {a, b}
        teachers = names & {"T1", "T2"}
        if "S" in names and teachers and not (ab.no_psv and ab.no_kd):
            needed |= teachers | {"S"}
        return [n for n in self.models if n in needed]

    # ------------------------------------------------------------ objectives
    def _input(self, x: np.ndarray) -> Tensor:
        return Tensor(np.asarray(x, dtype=self.dtype)[None, None])

    def objective(self, x_l, y_l, x_u, t: int):
        """Total loss tensor plus its labeled/unlabeled branch terms."""
        lam_dis = warmup_weight(t, self.cfg.schedule_max, self.loss_cfg.lambda_dis)
        if y_l is None:
            raise ValueError("labeled branch needs labels")
        xl = self._input(x_l)
        Y = one_hot(np.asarray(y_l)[None], self.cfg.num_classes, dtype=self.dtype)
        preds_l = {n: m.probabilities(xl) for n, m in self.models.items()}
        lab = branch_objective(preds_l, Y, lam_dis, self.loss_cfg, self.cfg.ablation)
        unl = None
        names_u = self.unlabeled_models()
        if x_u is not None and names_u:
            xu = self._input(x_u)
            preds_u = {n: self.models[n].probabilities(xu) for n in names_u}
            unl = branch_objective(preds_u, None, lam_dis, self.loss_cfg, self.cfg.ablation)
        total, lam_ssl = total_objective(lab, unl, t, self.loss_cfg)
        return total, lab, unl, lam_dis, lam_ssl

    def compute_gradients(self, x_l, y_l, x_u, t: int) -> dict[str, dict[str, Optional[np.ndarray]]]:
        """Gradients of the total loss for every parameter (no update)."""
        self.zero_grad()
        total, *_ = self.objective(x_l, y_l, x_u, t)
        ad.backward(total)
        grads = {n: {k: p.grad for k, p in m.params.items()} for n, m in self.models.items()}
        self.zero_grad()
        return grads

    def zero_grad(self) -> None:
        for m in self.models.values():
            for p in m.params.values():
                p.grad = None

    def train_step(self, x_l, y_l, x_u, t: int, lr: float, step: int = 0) -> dict[str, Optional[float]]:
        self.zero_grad()
        total, lab, unl, lam_dis, lam_ssl = self.objective(x_l, y_l, x_u, t)
        value = float(total.data)
        if not math.isfinite(value):
            raise DivergedTrainingError(t, step, value)
        ad.backward(total)
        for name, model in self.models.items():
            keys = list(model.params)
            sgd_nesterov_step(
                [model.params[k].data for k in keys],
                [model.params[k].grad for k in keys],
                [self.buffers[name][k] for k in keys],
                lr,
                self.cfg.momentum,
                self.cfg.weight_decay,
            )
        self.zero_grad()
        kd = [v for v in (_scalar(lab.kd), _scalar(unl.kd) if unl else None) if v is not None]
        return {
            "L_seg": _scalar(lab.seg),
            "L_ctl": _scalar(unl.ctl) if unl else None,
            "L_psv": _scalar(unl.psv) if unl else None,
            "L_kd": float(np.mean(kd)) if kd else None,
            "total": value,
        }

    # ------------------------------------------------------------- validation
    def validate(self, data: StageData) -> Optional[float]:
        """Student-only mean foreground DSC over the validation arrays."""
        if not data.validation:
            return None
        model = self.student
        scores = []
        for img, lbl in data.validation.values():
            if data.stage == "coarse" and tuple(img.shape) != tuple(self.cfg.patch):
                plan = make_sliding_plan(img.shape, self.cfg.patch)
                probs = sliding_window_predict(model.predict, img, plan, gaussian_importance(self.cfg.patch))
            else:
                probs = model.predict(img[None, None])[0]
            pred = np.argmax(probs, axis=0)
            scores.append(np.mean([dsc(pred, lbl, c) for c in range(1, self.cfg.num_classes)]))
        return float(np.mean(scores))

    # ---------------------------------------------------------------- fitting
    def _pairs(self, plan):
        pairs, pending = [], None
        for step in plan:
            if step.branch == "labeled":
                if pending is not None:
                    pairs.append((pending, None))
                pending = step.case_id
            else:
                pairs.append((pending, step.case_id))
                pending = None
        if pending is not None:
            pairs.append((pending, None))
        return pairs

    def _patch(self, img, lbl, epoch: int, index: int, branch: int):
        rng = np.random.default_rng([self.cfg.seed, epoch, index, branch])
        patch = tuple(min(p, n) for p, n in zip(self.cfg.patch, img.shape))
        return augment(img, lbl, self.cfg.augment, rng, patch=patch)

    def run_epoch(self, data: StageData, epoch: int) -> dict:
        cfg = self.cfg
        lr = poly_lr(epoch, cfg.schedule_max, cfg.lr0)
        use_u = bool(self.unlabeled_models()) and bool(data.unlabeled)
        plan = build_epoch_plan(
            sorted(data.labeled), sorted(data.unlabeled), epoch, cfg.seed, include_unlabeled=use_u
        )
        records = []
        for i, (lid, uid) in enumerate(self._pairs(plan)):
            img, lbl = data.labeled[lid]
            x_l, y_l = self._patch(img, lbl, epoch, i, 0)
            x_u = None
            if uid is not None:
                x_u, _ = self._patch(data.unlabeled[uid], None, epoch, i, 1)
            records.append(self.train_step(x_l, y_l, x_u, epoch, lr, step=i))

        def avg(key):
            vals = [r[key] for r in records if r[key] is not None]
            return float(np.mean(vals)) if vals else None

        row = {
            "epoch": epoch,
            "lr": lr,
            "lambda_dis": warmup_weight(epoch, cfg.schedule_max, self.loss_cfg.lambda_dis),
            "lambda_ssl": warmup_weight(epoch, cfg.schedule_max, self.loss_cfg.lambda_ssl),
        }
        row.update({k: avg(k) for k in ("L_seg", "L_ctl", "L_psv", "L_kd", "total")})
        return row

    def fit(self, data: StageData, on_epoch=None) -> list[dict]:
        """Train until ``cfg.epochs``; resumes after ``state.epoch``."""
        cfg = self.cfg
        if not data.labeled:
            raise ValueError("no labeled cases to train on")
        rows = self._load_metrics()
        for epoch in range(self.state.epoch + 1, cfg.epochs):
            t0 = time.perf_counter()
            row = self.run_epoch(data, epoch)
            last = epoch == cfg.epochs - 1
            val = None
            if last or (cfg.val_every > 0 and (epoch + 1) % cfg.val_every == 0):
                val = self.validate(data)
            row["val_dsc"] = val
            rows.append(row)
            self.state.epoch = epoch
            if val is not None and val > self.state.best_val:
                self.state.best_val, self.state.best_epoch = val, epoch
                if self.run_dir is not None:
                    self.save_checkpoint(self.run_dir / "ckpt_best")
            if self.run_dir is not None:
                self._write_metrics(rows)
                if last or (cfg.ckpt_every > 0 and (epoch + 1) % cfg.ckpt_every == 0):
                    self.save_checkpoint(self.run_dir / f"ckpt_epoch_{epoch}")
            log.info(
                "%s epoch %d/%d lr=%.5f total=%.4f val_dsc=%s (%.1fs)",
                data.stage,
                epoch + 1,
                cfg.epochs,
                row["lr"],
                row["total"],
                "-" if val is None else f"{val:.4f}",
                time.perf_counter() - t0,
            )
            if on_epoch is not None:
                on_epoch(row)
        return rows

    # ------------------------------------------------------------ persistence
    def _write_metrics(self, rows: list[dict]) -> None:
        path = self.run_dir / "metrics.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRICS_HEADER)
            for r in rows:
                w.writerow(["" if r.get(k) is None else repr(r[k]) for k in METRICS_HEADER])

    def _load_metrics(self) -> list[dict]:
        if self.run_dir is None or self.state.epoch < 0:
            return []
        path = self.run_dir / "metrics.csv"
        if not path.exists():
            return []
        rows = []
        with path.open() as fh:
            for rec in csv.DictReader(fh):
                row = {k: (None if rec[k] == "" else float(rec[k])) for k in METRICS_HEADER}
                row["epoch"] = int(row["epoch"])
                if row["epoch"] <= self.state.epoch:
                    rows.append(row)
        return rows

    def save_checkpoint(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, model in self.models.items():
            save_model(directory / name, model.config, model.params)
            save_tensors(directory / f"{name}.momentum", self.buffers[name])
        manifest = {
            "state": asdict(self.state),
            "models": list(self.models),
            "student": self.student_name,
            "config": config_to_dict(self.cfg),
        }
        (directory / "state.json").write_text(json.dumps(manifest, indent=1) + "\n")
        return directory

    def load_checkpoint(self, directory) -> None:
        directory = Path(directory)
        manifest = json.loads((directory / "state.json").read_text())
        if sorted(manifest["models"]) != sorted(self.models):
            raise ValueError(f"checkpoint models {manifest['models']} do not match {sorted(self.models)}")
        for name in self.models:
            ncfg, params = load_model(directory / name)
            self.models[name] = Model(ncfg, params.astype(self.dtype))
            bufs, _ = load_tensors(directory / f"{name}.momentum")
            self.buffers[name] = {k: v.astype(self.dtype) for k, v in bufs.items()}
        st = manifest["state"]
        self.state = TrainState(int(st["epoch"]), float(st["best_val"]), int(st["best_epoch"]))


def load_student(directory, dtype=np.float32) -> Model:
    """The inference network stored in a checkpoint directory."""
    directory = Path(directory)
    state = directory / "state.json"
    if not state.exists():
        raise FileNotFoundError(f"{directory} is not a checkpoint directory (state.json missing)")
    name = json.loads(state.read_text())["student"]
    ncfg, params = load_model(directory / name)
    return Model(ncfg, params.astype(dtype))


def config_to_dict(cfg: TrainConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def train(
    cases: Sequence[Case],
    cfg: TrainConfig,
    run_dir=None,
    stage: str = "coarse",
    coarse_student: Optional[Model] = None,
    resume_from=None,
) -> Trainer:
    """Train one stage. The fine stage needs the trained coarse student."""
    if stage == "coarse":
        data = prepare_coarse_data(cases, cfg)
    elif stage == "fine":
        masks = {}
        if any(c.split == "unlabeled" for c in cases) and cfg.ablation.uses_unlabeled:
            if coarse_student is None:
                raise ValueError("fine stage needs a coarse student to crop unlabeled cases")
            masks = generate_pseudo_masks(coarse_student, cases, cfg)
        keep = [c for c in cases if c.split != "unlabeled" or c.case_id in masks]
        data = prepare_fine_data(keep, cfg, masks)
    else:
        raise ValueError(f"stage must be 'coarse' or 'fine', got {stage!r}")
    trainer = Trainer(cfg, run_dir)
    if resume_from is not None:
        trainer.load_checkpoint(resume_from)
    trainer.fit(data)
    if run_dir is not None:
        from .plotting import plot_training_curves

        plot_training_curves(Path(run_dir) / "metrics.csv", Path(run_dir) / "training_curves.png")
    return trainer
