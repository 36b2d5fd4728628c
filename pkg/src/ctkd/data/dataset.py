"""On-disk datasets: native volumes plus a ``dataset.json`` split manifest.

Labels of the unlabeled split are never written.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

from ..errors import UnsupportedFormatError
from .nifti import read_nifti
from .volume import SPLITS, Case, Volume, load_volume, save_volume

MANIFEST = "dataset.json"


def write_dataset(cases: Sequence[Case], out_dir, meta: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    entries = []
    for c in cases:
        entry = {"id": c.case_id, "split": c.split, "image": f"images/{c.case_id}.json"}
        save_volume(out / "images" / c.case_id, c.image)
        if c.split != "unlabeled" and c.label is not None:
            save_volume(out / "labels" / c.case_id, c.label)
            entry["label"] = f"labels/{c.case_id}.json"
        entries.append(entry)
    manifest = {"cases": entries}
    if meta:
        manifest["meta"] = meta
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def read_manifest(root) -> dict:
    root = Path(root)
    path = root / MANIFEST if root.is_dir() else root
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest {path} not found")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UnsupportedFormatError(f"{path}: not valid JSON ({exc})") from exc
    if "cases" not in manifest:
        raise UnsupportedFormatError(f"{path}: no 'cases' list")
    return manifest


def read_dataset(root, splits: Iterable[str] = SPLITS) -> list[Case]:
    root = Path(root)
    base = root if root.is_dir() else root.parent
    wanted = set(splits)
    cases = []
    for e in read_manifest(root)["cases"]:
        if e["split"] not in wanted:
            continue
        image = load_volume(base / e["image"])
        label = load_volume(base / e["label"]) if "label" in e else None
        cases.append(Case(e["id"], image, label, e["split"]))
    return cases


def read_any(path, kind: str = "image") -> Volume:
    """Native manifest (``.json``) or NIfTI-1 (``.nii``)."""
    path = Path(path)
    if path.suffix == ".nii":
        return read_nifti(path, kind=kind)
    if path.suffix == ".json":
        return load_volume(path)
    raise UnsupportedFormatError(f"{path}: expected a .json manifest or a .nii file")
