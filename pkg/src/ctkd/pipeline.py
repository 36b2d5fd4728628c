"""Two-stage workflow: coarse training, pseudo-masks, fine training, inference, evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data.phantom import generate_phantom
from .data.volume import Case
from .inference import coarse_to_fine_infer
from .metrics import RunReport, evaluate_run
from .networks import Model
from .trainer import TrainConfig, Trainer, train

log = logging.getLogger(__name__)


def phantom_dataset(
    n_labeled: int,
    n_unlabeled: int,
    n_validation: int,
    seed: int = 0,
    extents=(48, 48, 48),
    num_classes: int = 4,
) -> list[Case]:
    """Deterministic phantom cases; each case seed derives from ``seed`` and its index."""
    cases = []
    splits = [("labeled", n_labeled), ("unlabeled", n_unlabeled), ("validation", n_validation)]
    index = 0
    for split, count in splits:
        for i in range(count):
            case_seed = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
            cases.append(
                generate_phantom(case_seed, extents, num_classes, case_id=f"{split[:3]}_{i:03d}", split=split)
            )
            index += 1
    return cases


def infer_cases(coarse: Model, fine: Model, cases: Sequence[Case], cfg: TrainConfig):
    """Predicted masks and wall-clock seconds per case."""
    preds, seconds = {}, {}
    for c in cases:
        t0 = time.perf_counter()
        res = coarse_to_fine_infer(coarse, fine, c, cfg.inference)
        seconds[c.case_id] = time.perf_counter() - t0
        preds[c.case_id] = res.label
    return preds, seconds


@dataclass
class PipelineResult:
    coarse: Trainer
    fine: Trainer
    report: RunReport
    seconds: float


def run_pipeline(cases: Sequence[Case], cfg: TrainConfig, out_dir=None, fine_cfg: Optional[TrainConfig] = None) -> PipelineResult:
    """Train both stages and evaluate the students on the validation cases."""
    t0 = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    coarse = train(cases, cfg, out / "coarse" if out else None, stage="coarse")
    fine_cfg = fine_cfg or cfg
    fine = train(cases, fine_cfg, out / "fine" if out else None, stage="fine", coarse_student=coarse.student)
    val = [c for c in cases if c.split == "validation"]
    preds, secs = infer_cases(coarse.student, fine.student, val, fine_cfg)
    report = evaluate_run(
        {k: v.data for k, v in preds.items()},
        {c.case_id: c.label.data for c in val},
        cfg.num_classes,
        spacings={c.case_id: c.image.spacing for c in val},
        seconds=secs,
    )
    if out is not None:
        from .plotting import plot_report

        report.to_csv(out / "report.csv")
        plot_report(report, out / "report.png")
    return PipelineResult(coarse, fine, report, time.perf_counter() - t0)
