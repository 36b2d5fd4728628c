"""Largest-component postprocessing and DSC / NSD evaluation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    if connectivity == 18:
        return ndimage.generate_binary_structure(3, 2)
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")


def largest_component_per_class(mask: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Keep only the largest connected component of every nonzero class.

    Equal-size components are resolved in favour of the one whose first voxel
    comes first in C scan order.
    """
    mask = np.asarray(mask)
    out = mask.copy()
    structure = _structure(connectivity)
    for c in np.unique(mask):
        if c == 0:
            continue
        comps, n = ndimage.label(mask == c, structure=structure)
        if n <= 1:
            continue
        sizes = np.bincount(comps.ravel())[1:]
        keep = int(np.argmax(sizes)) + 1
        out[(comps != keep) & (comps > 0)] = 0
    return out


def _check_grids(pred, gt):
    if np.shape(pred) != np.shape(gt):
        raise ValueError(f"prediction grid {np.shape(pred)} != ground-truth grid {np.shape(gt)}")


def dsc(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """2|P & G| / (|P| + |G|); 1.0 when both are empty."""
    _check_grids(pred, gt)
    p = np.asarray(pred) == class_id
    g = np.asarray(gt) == class_id
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def surface_voxels(binary: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one face neighbour outside the object."""
    b = np.asarray(binary, dtype=bool)
    padded = np.pad(b, 1, constant_values=False)
    interior = b.copy()
    for ax in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=ax)[1:-1, 1:-1, 1:-1]
    return b & ~interior


def _within_tolerance(src: np.ndarray, dst: np.ndarray, spacing, tolerance_mm: float) -> int:
    """Number of ``src`` surface voxels within ``tolerance_mm`` of the ``dst`` surface."""
    if not src.any() or not dst.any():
        return 0
    sp = np.asarray(spacing, dtype=np.float64)
    idx = ndimage.distance_transform_edt(~dst, sampling=sp, return_distances=False, return_indices=True)
    pts = np.argwhere(src)
    nearest = idx[:, pts[:, 0], pts[:, 1], pts[:, 2]].T
    dist = np.sqrt((((pts - nearest) * sp) ** 2).sum(axis=1))
    return int((dist <= tolerance_mm).sum())


def nsd(
    pred: np.ndarray,
    gt: np.ndarray,
    class_id: int,
    tolerance_mm: float = 1.0,
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
) -> float:
    """Normalized surface Dice at ``tolerance_mm``; 1.0 when both are empty."""
    _check_grids(pred, gt)
    if tolerance_mm < 0:
        raise ValueError(f"tolerance must be >= 0, got {tolerance_mm}")
    sp = surface_voxels(np.asarray(pred) == class_id)
    sg = surface_voxels(np.asarray(gt) == class_id)
    denom = int(sp.sum()) + int(sg.sum())
    if denom == 0:
        return 1.0
    hits = _within_tolerance(sp, sg, spacing, tolerance_mm) + _within_tolerance(sg, sp, spacing, tolerance_mm)
    return hits / denom


# ------------------------------------------------------------------ reports
@dataclass
class CaseResult:
    case_id: str
    dsc: list[float]  # foreground classes 1..C-1
    nsd: list[float]
    seconds: Optional[float] = None

    @property
    def mean_dsc(self) -> float:
        return float(np.mean(self.dsc))

    @property
    def mean_nsd(self) -> float:
        return float(np.mean(self.nsd))


def evaluate_case(
    case_id: str,
    pred: np.ndarray,
    gt: np.ndarray,
    num_classes: int,
    spacing=(1.0, 1.0, 1.0),
    tolerance_mm: float = 1.0,
    seconds: Optional[float] = None,
) -> CaseResult:
    classes = range(1, num_classes)
    return CaseResult(
        case_id=case_id,
        dsc=[dsc(pred, gt, c) for c in classes],
        nsd=[nsd(pred, gt, c, tolerance_mm, spacing) for c in classes],
        seconds=seconds,
    )


@dataclass
class ReportRow:
    name: str
    dsc_mean: float
    dsc_std: float
    nsd_mean: float
    nsd_std: float


@dataclass
class RunReport:
    rows: list[ReportRow]
    cases: list[CaseResult]
    mean_seconds: Optional[float] = None
    max_seconds: Optional[float] = None
    extra: dict = field(default_factory=dict)

    @property
    def mean(self) -> ReportRow:
        return self.rows[-1]

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "dsc_mean", "dsc_std", "nsd_mean", "nsd_std"])
            for r in self.rows:
                w.writerow([r.name, f"{r.dsc_mean:.6f}", f"{r.dsc_std:.6f}", f"{r.nsd_mean:.6f}", f"{r.nsd_std:.6f}"])
        return path

    def format_table(self) -> str:
        lines = [f"{'Class':<12} {'DSC':>17} {'NSD':>17}", "-" * 48]
        for r in self.rows:
            if r.name == "mean":
                lines.append("-" * 48)
            lines.append(
                f"{r.name:<12} {r.dsc_mean:.4f}±{r.dsc_std:.4f}   {r.nsd_mean:.4f}±{r.nsd_std:.4f}"
            )
        if self.mean_seconds is not None:
            lines.append(f"time per case: mean {self.mean_seconds:.2f} s, max {self.max_seconds:.2f} s")
        return "\n".join(lines)


def evaluate_run(
    pred_cases: Mapping[str, np.ndarray],
    gt_cases: Mapping[str, np.ndarray],
    num_classes: int,
    spacings: Optional[Mapping[str, Sequence[float]]] = None,
    tolerance_mm: float = 1.0,
    seconds: Optional[Mapping[str, float]] = None,
    class_names: Optional[Sequence[str]] = None,
) -> RunReport:
    """Per-class and mean DSC/NSD (mean ± population std over cases)."""
    missing_pred = sorted(set(gt_cases) - set(pred_cases))
    missing_gt = sorted(set(pred_cases) - set(gt_cases))
    if missing_pred or missing_gt:
        raise ValueError(f"case ids differ: missing predictions {missing_pred}, missing ground truth {missing_gt}")
    if not gt_cases:
        raise ValueError("no cases to evaluate")
    results = []
    for cid in sorted(gt_cases):
        sp = spacings[cid] if spacings else (1.0, 1.0, 1.0)
        secs = seconds.get(cid) if seconds else None
        results.append(evaluate_case(cid, pred_cases[cid], gt_cases[cid], num_classes, sp, tolerance_mm, secs))
    d = np.array([r.dsc for r in results])
    n = np.array([r.nsd for r in results])
    names = list(class_names) if class_names else [f"class_{c}" for c in range(1, num_classes)]
    rows = [
        ReportRow(names[i], float(d[:, i].mean()), float(d[:, i].std()), float(n[:, i].mean()), float(n[:, i].std()))
        for i in range(num_classes - 1)
    ]
    per_case_d, per_case_n = d.mean(axis=1), n.mean(axis=1)
    rows.append(
        ReportRow("mean", float(per_case_d.mean()), float(per_case_d.std()), float(per_case_n.mean()), float(per_case_n.std()))
    )
    times = [r.seconds for r in results if r.seconds is not None]
    return RunReport(
        rows=rows,
        cases=results,
        mean_seconds=float(np.mean(times)) if times else None,
        max_seconds=float(np.max(times)) if times else None,
    )
