"""Command-line entry point: ``ctkd phantoms | train | infer | evaluate``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import re
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

ABLATIONS = {
    "proposed": {},
    "fsl": {"fsl": True},
    "kd": {"single_teacher": True, "no_ssl": True},
    "ssl-kd": {"single_teacher": True, "no_psv": True},
    "ssl-psv": {"single_teacher": True, "no_kd": True},
    "ssl-kd-psv": {"single_teacher": True},
    "cts": {"cts": True},
    "ctt-psv": {"no_kd": True},
    "ctt-kd": {"no_psv": True},
    "ctt-sd": {"same_decoder_teachers": True},
}

log = logging.getLogger("ctkd")


def _set_threads(n: int) -> None:
    # Must happen before numpy loads its BLAS.
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctkd", description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, help="INI run configuration")
    p.add_argument("--seed", type=int, help="overrides train.seed")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, deterministic)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantoms", help="generate a synthetic phantom dataset")
    ph.add_argument("--out", type=Path, required=True)
    ph.add_argument("--labeled", type=int, help="overrides phantoms.n_labeled")
    ph.add_argument("--unlabeled", type=int, help="overrides phantoms.n_unlabeled")
    ph.add_argument("--validation", type=int, help="overrides phantoms.n_validation")

    tr = sub.add_parser("train", help="train one stage")
    tr.add_argument("--dataset", type=Path, required=True)
    tr.add_argument("--run", type=Path, required=True, help="output run directory")
    tr.add_argument("--stage", choices=("coarse", "fine"), default="coarse")
    tr.add_argument("--ablation", choices=sorted(ABLATIONS), default="proposed")
    tr.add_argument("--coarse-run", type=Path, help="coarse run (or checkpoint) used to crop unlabeled cases")
    tr.add_argument("--resume", type=Path, help="checkpoint directory to resume from")

    inf = sub.add_parser("infer", help="coarse-to-fine inference with the two students")
    inf.add_argument("--coarse", type=Path, required=True, help="coarse run or checkpoint directory")
    inf.add_argument("--fine", type=Path, required=True, help="fine run or checkpoint directory")
    src = inf.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset", type=Path, help="dataset directory (uses --split)")
    src.add_argument("--input", type=Path, nargs="+", help=".json or .nii image files")
    inf.add_argument("--split", default="validation")
    inf.add_argument("--out", type=Path, required=True)

    ev = sub.add_parser("evaluate", help="DSC/NSD report for predicted masks")
    ev.add_argument("--pred", type=Path, required=True, help="directory of predicted masks (<id>.json)")
    ev.add_argument("--dataset", type=Path, required=True)
    ev.add_argument("--split", default="validation")
    ev.add_argument("--out", type=Path, help="report directory (default: --pred)")
    return p


def resolve_checkpoint(path: Path, which: str = "last") -> Path:
    """A checkpoint directory, or the last/best one inside a run directory."""
    path = Path(path)
    if (path / "state.json").exists():
        return path
    if which == "best" and (path / "ckpt_best" / "state.json").exists():
        return path / "ckpt_best"
    epochs = []
    for d in path.glob("ckpt_epoch_*"):
        m = re.fullmatch(r"ckpt_epoch_(\d+)", d.name)
        if m and (d / "state.json").exists():
            epochs.append((int(m.group(1)), d))
    if not epochs:
        raise FileNotFoundError(f"no checkpoint found in {path}")
    return max(epochs)[1]


def _cmd_phantoms(args, cfg) -> int:
    from .data.dataset import write_dataset
    from .pipeline import phantom_dataset

    ph = cfg.phantoms
    n_l = ph.n_labeled if args.labeled is None else args.labeled
    n_u = ph.n_unlabeled if args.unlabeled is None else args.unlabeled
    n_v = ph.n_validation if args.validation is None else args.validation
    if n_l < 1 or n_v < 1 or n_u < 0:
        from .errors import ConfigError

        raise ConfigError("phantoms: labeled and validation counts must be >= 1, unlabeled >= 0")
    cases = phantom_dataset(n_l, n_u, n_v, cfg.train.seed, ph.extents, cfg.train.num_classes)
    meta = {"seed": cfg.train.seed, "num_classes": cfg.train.num_classes, "extents": list(ph.extents)}
    path = write_dataset(cases, args.out, meta)
    print(f"wrote {len(cases)} cases ({n_l} labeled, {n_u} unlabeled, {n_v} validation) to {path}")
    return EXIT_OK


def _cmd_train(args, cfg) -> int:
    from .config import write_resolved
    from .data.dataset import read_dataset
    from .trainer import load_student, train

    cfg = replace(cfg, train=replace(cfg.train, ablation=replace(cfg.train.ablation, **ABLATIONS[args.ablation])))
    cfg.validate()
    cases = read_dataset(args.dataset)
    write_resolved(cfg, args.run)
    coarse = None
    if args.stage == "fine" and cfg.train.ablation.uses_unlabeled and any(c.split == "unlabeled" for c in cases):
        if args.coarse_run is None:
            from .errors import ConfigError

            raise ConfigError("train --stage fine needs --coarse-run to crop unlabeled cases")
        coarse = load_student(resolve_checkpoint(args.coarse_run))
    trainer = train(cases, cfg.train, args.run, stage=args.stage, coarse_student=coarse, resume_from=args.resume)
    best = trainer.state.best_val
    print(f"{args.stage} training done: {args.run} (best val DSC {best:.4f} at epoch {trainer.state.best_epoch})")
    return EXIT_OK


def _cmd_infer(args, cfg) -> int:
    from .config import write_resolved
    from .data.dataset import read_any, read_dataset
    from .data.nifti import write_nifti
    from .data.volume import Case, save_volume
    from .inference import coarse_to_fine_infer
    from .trainer import load_student

    coarse = load_student(resolve_checkpoint(args.coarse))
    fine = load_student(resolve_checkpoint(args.fine))
    if args.dataset is not None:
        items = [(c.case_id, c.image, None) for c in read_dataset(args.dataset, [args.split])]
    else:
        items = []
        for path in args.input:
            name = path.name[: -len(path.suffix)] if path.suffix else path.name
            items.append((name, read_any(path), path.suffix == ".nii"))
    args.out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, args.out)
    icfg = cfg.inference_config
    rows = []
    for case_id, image, as_nifti in items:
        t0 = time.perf_counter()
        res = coarse_to_fine_infer(coarse, fine, Case(case_id, image, split="validation"), icfg)
        secs = time.perf_counter() - t0
        if as_nifti:
            write_nifti(args.out / f"{case_id}.nii", res.label, template=image.meta.get("nifti_header"))
        else:
            save_volume(args.out / case_id, res.label)
        rows.append((case_id, secs, res.fallback))
        log.info("%s: %.2f s%s", case_id, secs, " (whole-volume fallback)" if res.fallback else "")
    with (args.out / "timing.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "seconds", "fallback"])
        for case_id, secs, fb in rows:
            w.writerow([case_id, f"{secs:.6f}", int(fb)])
    print(f"wrote {len(rows)} masks to {args.out}")
    return EXIT_OK


def _cmd_evaluate(args, cfg) -> int:
    from .data.dataset import read_dataset
    from .data.volume import load_volume
    from .metrics import evaluate_run
    from .plotting import plot_report

    cases = [c for c in read_dataset(args.dataset, [args.split]) if c.label is not None]
    gt = {c.case_id: c.label.data for c in cases}
    preds = {}
    for c in cases:
        path = args.pred / f"{c.case_id}.json"
        if not path.exists():
            raise FileNotFoundError(f"prediction {path} missing for case {c.case_id}")
        preds[c.case_id] = load_volume(path).data
    seconds = None
    timing = args.pred / "timing.csv"
    if timing.exists():
        with timing.open() as fh:
            seconds = {r["case_id"]: float(r["seconds"]) for r in csv.DictReader(fh)}
    report = evaluate_run(
        preds,
        gt,
        cfg.train.num_classes,
        spacings={c.case_id: c.image.spacing for c in cases},
        tolerance_mm=cfg.metrics.tolerance_mm,
        seconds=seconds,
    )
    out = args.out or args.pred
    report.to_csv(out / "report.csv")
    plot_report(report, out / "report.png")
    print(report.format_table())
    print(f"report written to {out / 'report.csv'} and {out / 'report.png'}")
    return EXIT_OK


_COMMANDS = {"phantoms": _cmd_phantoms, "train": _cmd_train, "infer": _cmd_infer, "evaluate": _cmd_evaluate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    _set_threads(args.threads)

    from .config import load_config
    from .errors import ConfigError, DivergedTrainingError, UnsupportedFormatError, UnsupportedOrientationError

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, train=replace(cfg.train, seed=args.seed)).validate()
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, UnsupportedFormatError, UnsupportedOrientationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergedTrainingError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
