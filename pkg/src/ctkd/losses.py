"""Segmentation, cross-teaching, pseudo-supervision and distillation objectives.

All losses take channel-normalized probability tensors shaped [B, C, X, Y, Z].
Targets derived from other networks (hard pseudo-labels, the teacher mean) are
always detached, so gradients only reach the network whose prediction is the
first argument.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    focal_alpha: float = 0.5
    focal_gamma: float = 2.0
    dice_eps: float = 1e-5
    class_set: Optional[tuple[int, ...]] = None  # None -> all foreground classes
    lambda_dis: float = 10.0
    lambda_ssl: float = 0.1
    t_max: int = 100

    def validate(self) -> "LossConfig":
        if not 0.0 < self.focal_alpha <= 1.0:
            raise ValueError(f"focal_alpha must be in (0, 1], got {self.focal_alpha}")
        if self.focal_gamma < 0:
            raise ValueError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if self.dice_eps <= 0:
            raise ValueError(f"dice_eps must be > 0, got {self.dice_eps}")
        if self.t_max < 1:
            raise ValueError(f"t_max must be >= 1, got {self.t_max}")
        return self


@dataclass(frozen=True)
class Ablation:
    """Switches that remove loss terms or models."""

    fsl: bool = False  # student only, labeled data only
    no_ssl: bool = False  # skip the unlabeled branch
    no_kd: bool = False
    no_psv: bool = False
    no_ctl: bool = False
    single_teacher: bool = False
    cts: bool = False  # two student-size networks cross-teach, no teachers
    same_decoder_teachers: bool = False

    def validate(self) -> "Ablation":
        if self.cts and (self.fsl or self.single_teacher or self.same_decoder_teachers):
            raise ValueError("cts excludes fsl, single_teacher and same_decoder_teachers")
        return self

    @property
    def uses_unlabeled(self) -> bool:
        return not (self.fsl or self.no_ssl)


def _as_target(y, like: Tensor) -> Tensor:
    if isinstance(y, Tensor):
        return y if not y.requires_grad else y.detach()
    return Tensor(np.asarray(y, dtype=like.dtype))


def _classes(cfg_classes, num_channels: int) -> list[int]:
    classes = list(range(1, num_channels)) if cfg_classes is None else list(cfg_classes)
    if not classes:
        raise ValueError("class_set is empty")
    return classes


def dice_loss(P: Tensor, Y, class_set: Sequence[int] | None = None, eps: float = 1e-5) -> Tensor:
    """Mean over ``class_set`` of 1 - soft Dice, pooled over batch and voxels."""
    Yt = _as_target(Y, P)
    if Yt.shape != P.shape:
        raise ValueError(f"prediction {P.shape} and target {Yt.shape} differ")
    classes = _classes(class_set, P.shape[1])
    axes = (0,) + tuple(range(2, P.ndim))
    inter = ad.take(ad.sum(ad.mul(P, Yt), axis=axes), classes, axis=0)
    psum = ad.take(ad.sum(P, axis=axes), classes, axis=0)
    ysum = Yt.data.sum(axis=axes)[classes]
    dice = ad.div(ad.add(ad.scale(inter, 2.0), eps), ad.add(psum, ysum + eps))
    return ad.mean(ad.sub(1.0, dice))


def focal_loss(P: Tensor, Y, alpha: float = 0.5, gamma: float = 2.0) -> Tensor:
    """Mean over voxels of -alpha (1 - p_t)^gamma ln p_t."""
    Yt = _as_target(Y, P)
    if Yt.shape != P.shape:
        raise ValueError(f"prediction {P.shape} and target {Yt.shape} differ")
    pt = ad.clamp(ad.sum(ad.mul(P, Yt), axis=1), PROB_FLOOR, 1.0)
    term = ad.log(pt)
    if gamma != 0:
        term = ad.mul(ad.power(ad.sub(1.0, pt), gamma), term)
    return ad.scale(ad.mean(term), -alpha)


def supervised_loss(P: Tensor, Y, cfg: LossConfig) -> Tensor:
    return ad.add(
        dice_loss(P, Y, cfg.class_set, cfg.dice_eps),
        focal_loss(P, Y, cfg.focal_alpha, cfg.focal_gamma),
    )


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    """[B, X, Y, Z] integer labels -> [B, C, X, Y, Z] one-hot."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(out, labels[:, None].astype(np.intp), 1.0, axis=1)
    return out


def hard_pseudo_label(P) -> Tensor:
    """Detached one-hot argmax along channel; ties go to the lowest index."""
    data = P.data if isinstance(P, Tensor) else np.asarray(P)
    return Tensor(one_hot(np.argmax(data, axis=1), data.shape[1], dtype=data.dtype))


def cross_teaching_loss(P_T1: Tensor, P_T2: Tensor, cfg: LossConfig) -> Tensor:
    return ad.add(
        dice_loss(P_T1, hard_pseudo_label(P_T2), cfg.class_set, cfg.dice_eps),
        dice_loss(P_T2, hard_pseudo_label(P_T1), cfg.class_set, cfg.dice_eps),
    )


def teacher_mean(*teachers: Tensor) -> Tensor:
    """Detached average of teacher probabilities."""
    if not teachers:
        raise ValueError("need at least one teacher prediction")
    shape = teachers[0].shape
    for t in teachers[1:]:
        if t.shape != shape:
            raise ValueError(f"teacher shapes differ: {shape} vs {t.shape}")
    if len(teachers) == 1:
        return teachers[0].detach()
    acc = teachers[0].data.copy()
    for t in teachers[1:]:
        acc = acc + t.data
    return Tensor(acc / len(teachers))


def pseudo_supervision_loss(P_S: Tensor, P_Tbar: Tensor, cfg: LossConfig) -> Tensor:
    return dice_loss(P_S, hard_pseudo_label(P_Tbar), cfg.class_set, cfg.dice_eps)


def kd_loss(P_S: Tensor, P_Tbar) -> Tensor:
    """Voxel-mean KL(teacher mean || student); the teacher side is a constant."""
    q = P_Tbar.data if isinstance(P_Tbar, Tensor) else np.asarray(P_Tbar)
    if q.shape != P_S.shape:
        raise ValueError(f"student {P_S.shape} and teacher {q.shape} differ")
    log_q = np.where(q > 0, np.log(np.maximum(q, PROB_FLOOR)), 0.0).astype(q.dtype)
    log_p = ad.log(ad.clamp(P_S, PROB_FLOOR, None))
    terms = ad.mul(Tensor(q), ad.sub(Tensor(log_q), log_p))
    return ad.mean(ad.sum(terms, axis=1))


# ----------------------------------------------------------------- schedules
def warmup_weight(t: float, t_max: float, lambda0: float) -> float:
    """Gaussian ramp lambda0 * exp(-5 (1 - t/t_max)^2)."""
    if t_max <= 0 or not 0 <= t <= t_max:
        raise ValueError(f"need 0 <= t <= t_max, got t={t}, t_max={t_max}")
    return lambda0 * math.exp(-5.0 * (1.0 - t / t_max) ** 2)


def poly_lr(epoch: float, epoch_max: float, lr0: float = 0.01, exponent: float = 0.9) -> float:
    if epoch_max <= 0 or not 0 <= epoch <= epoch_max:
        raise ValueError(f"need 0 <= epoch <= epoch_max, got epoch={epoch}, epoch_max={epoch_max}")
    return lr0 * (1.0 - epoch / epoch_max) ** exponent


# ---------------------------------------------------------------- objectives
@dataclass
class BranchTerms:
    """Loss components of one branch; absent terms stay ``None``."""

    total: Tensor
    seg: Optional[Tensor] = None
    ctl: Optional[Tensor] = None
    psv: Optional[Tensor] = None
    kd: Optional[Tensor] = None
    lambda_dis: float = 0.0
    extras: dict = field(default_factory=dict)


def _teachers(preds: Mapping[str, Tensor]) -> list[Tensor]:
    return [preds[k] for k in ("T1", "T2") if k in preds]


def _peers(preds: Mapping[str, Tensor]) -> Optional[tuple[Tensor, Tensor]]:
    for a, b in (("T1", "T2"), ("S1", "S2")):
        if a in preds and b in preds:
            return preds[a], preds[b]
    return None


def _add(acc: Optional[Tensor], term: Tensor) -> Tensor:
    return term if acc is None else ad.add(acc, term)


def branch_objective(
    preds: Mapping[str, Tensor],
    Y,
    lambda_dis: float,
    cfg: LossConfig,
    ablation: Ablation = Ablation(),
) -> BranchTerms:
    """L_labeled when ``Y`` is given, L_unlabeled otherwise.

    ``preds`` maps model names (T1, T2, S, or S1/S2 for cross-teaching
    students) to probability tensors.
    """
    teachers = _teachers(preds)
    student = preds.get("S")
    distill = student is not None and bool(teachers) and not ablation.fsl
    tbar = teacher_mean(*teachers) if distill else None
    terms = BranchTerms(total=None, lambda_dis=lambda_dis)  # type: ignore[arg-type]

    if Y is not None:
        for name in preds:
            terms.seg = _add(terms.seg, supervised_loss(preds[name], Y, cfg))
        total = terms.seg
    else:
        total = None
        peers = _peers(preds)
        if peers is not None and not ablation.no_ctl:
            terms.ctl = cross_teaching_loss(*peers, cfg)
            total = _add(total, terms.ctl)
        if distill and not ablation.no_psv:
            terms.psv = pseudo_supervision_loss(student, tbar, cfg)
            total = _add(total, terms.psv)

    if distill and not ablation.no_kd:
        terms.kd = kd_loss(student, tbar)
        total = _add(total, ad.scale(terms.kd, lambda_dis))
    terms.total = total
    return terms


def combined_objectives(
    P_S: Optional[Tensor],
    P_T1: Optional[Tensor],
    P_T2: Optional[Tensor],
    Y,
    t: float,
    cfg: LossConfig,
    ablation: Ablation = Ablation(),
) -> BranchTerms:
    """One branch of the joint objective with warm-up weighted distillation."""
    if ablation.fsl and Y is None:
        raise ValueError("fully supervised mode has no unlabeled branch")
    preds = {k: v for k, v in (("T1", P_T1), ("T2", P_T2), ("S", P_S)) if v is not None}
    if not preds:
        raise ValueError("no predictions given")
    lam = warmup_weight(t, cfg.t_max, cfg.lambda_dis)
    return branch_objective(preds, Y, lam, cfg, ablation)


def total_objective(
    labeled: BranchTerms, unlabeled: Optional[BranchTerms], t: float, cfg: LossConfig
) -> tuple[Tensor, float]:
    """L_labeled + lambda_ssl(t) * L_unlabeled, and the lambda_ssl used."""
    lam_ssl = warmup_weight(t, cfg.t_max, cfg.lambda_ssl)
    if unlabeled is None or unlabeled.total is None:
        return labeled.total, lam_ssl
    return ad.add(labeled.total, ad.scale(unlabeled.total, lam_ssl)), lam_ssl
