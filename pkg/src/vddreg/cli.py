"""``vddreg`` command-line interface.

Exit codes: 0 success, 1 usage or config error, 2 I/O error, 3 registration or
training failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ConfigError, RunConfig
from .errors import DatasetError, RegistrationFailure, TrainingError, WeightsError

log = logging.getLogger("vddreg")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FAILURE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML run config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. train.epochs_stage1=200 (repeatable)")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")


def _load_config(args) -> RunConfig:
    overrides = list(args.overrides)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return RunConfig.load(args.config, overrides)


def _atomic_dir(final: Path):
    """Temporary sibling directory that replaces ``final`` on success."""
    final.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{final.name}.", dir=final.parent))


def _commit_dir(tmp: Path, final: Path) -> None:
    if final.exists():
        for child in tmp.iterdir():
            target = final / child.name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
            os.replace(child, target)
        tmp.rmdir()
    else:
        os.replace(tmp, final)


def _write_json_atomic(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(json.dumps(obj, indent=2))
    os.replace(tmp, path)


# --- synth ------------------------------------------------------------------

def cmd_synth_generate(args) -> int:
    from .data.io import write_synthetic_dataset
    from .data.synth import generate_dataset, generate_style_target

    cfg = _load_config(args)
    if args.n_pairs is not None:
        cfg.synth.n_pairs = args.n_pairs
    out = Path(args.out)
    tmp = _atomic_dir(out)
    try:
        pairs = generate_dataset(cfg.synth)
        write_synthetic_dataset(pairs, generate_style_target(cfg.synth), tmp, cfg.synth.to_dict())
        cfg.save(tmp / "resolved_config.yaml")
        _commit_dir(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"wrote {len(pairs)} pairs to {out}")
    return EXIT_OK


# --- seg train --------------------------------------------------------------

def _prepare(records, cfg: RunConfig):
    from .data.io import preprocess_pair

    if cfg.preprocess_size is None:
        return records
    return [preprocess_pair(r, cfg.preprocess_size) for r in records]


def _style_target(dataset: Path, explicit: Optional[Path]):
    from .data.io import load_style_target

    path = explicit or dataset / "style_target.png"
    if not path.exists():
        raise DatasetError(f"style target {path} not found (pass --style-target)")
    return load_style_target(path)


def build_lvdseg_dataset(records, style_target):
    from .trainer import LVDSegDataset

    train = [r for r in records if r.split == "train"]
    if not train:
        raise DatasetError("dataset has no training pairs")
    annotated = [(r.moving, r.gt_moving_mask) for r in train if r.gt_moving_mask is not None]
    return LVDSegDataset(annotated, [(r.moving, r.fixed) for r in train], style_target)


def cmd_seg_train(args) -> int:
    from .data.io import load_dataset
    from .trainer import run_lvdseg

    cfg = _load_config(args)
    if args.n_masks is not None:
        cfg.train.n_supervised_masks = args.n_masks
    mode = "stage1_only" if args.stage1_only else "stage2_only" if args.stage2_only else "full"
    dataset = Path(args.dataset)
    if not dataset.exists():
        raise DatasetError(f"dataset path {dataset} does not exist")
    records = _prepare(load_dataset(dataset), cfg)
    data = build_lvdseg_dataset(records, _style_target(dataset, args.style_target))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "resolved_config.yaml")
    _, _, report = run_lvdseg(data, cfg.train, mode=mode, out_dir=out)
    print(f"trained ({mode}); checkpoints in {out}")
    return EXIT_OK


# --- register ---------------------------------------------------------------

def _load_weights(weights: Optional[Path], raw: bool):
    from .segmentation import load_network

    if raw:
        return None, None
    if weights is None:
        raise UsageError("--weights is required unless --raw is given")
    w = Path(weights)
    files = [w / "octa.pt", w / "ema.pt"]
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise WeightsError("missing network weights: " + ", ".join(missing))
    return load_network(files[0]), load_network(files[1])


def _load_pair(path: Path, cfg: RunConfig):
    from .core import GrayImage
    from .data.io import load_memo, preprocess_pair
    from .data.records import ImagePairRecord

    if not path.is_dir():
        raise DatasetError(f"pair directory {path} does not exist")
    tmp_root = Path(tempfile.mkdtemp(prefix="vddreg_pair_"))
    try:
        link = tmp_root / (path.name if path.name.startswith("pair_") else f"pair_{path.name}")
        link.symlink_to(path.resolve(), target_is_directory=True)
        synth = path.parent / "synth_config.json"
        if synth.exists():
            shutil.copy(synth, tmp_root / "synth_config.json")
        (rec,) = load_memo(tmp_root)
    finally:
        shutil.rmtree(tmp_root, ignore_errors=True)
    return preprocess_pair(rec, cfg.preprocess_size) if cfg.preprocess_size else rec


def cmd_register(args) -> int:
    from .data.io import write_image
    from .registration.keypoints import load_detector
    from .registration.pipeline import overlay, register_pair, write_result

    cfg = _load_config(args)
    if args.raw:
        cfg.raw = True
    rec = _load_pair(Path(args.pair), cfg)
    net_o, net_e = _load_weights(args.weights, cfg.raw)
    detector = load_detector(args.detector or cfg.detector_weights)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "resolved_config.yaml")
    res = register_pair(rec.fixed, rec.moving, net_o, net_e, detector, cfg.registration,
                        gt=rec.gt_correspondences)
    write_result(res, out / "result.json", pair_id=rec.id)
    if res.result.failed:
        print(f"registration failed at {res.result.failure_stage}: {res.result.failure_message}",
              file=sys.stderr)
        return EXIT_FAILURE
    res.result.transform.save(out / "transform.json")
    write_image(out / "overlay.png", overlay(rec.fixed, rec.moving, res.result.transform)[..., ::-1] / 255.0)
    if res.mask_a is not None:
        write_image(out / "mask_fixed.png", res.mask_a.values.astype(float))
        write_image(out / "mask_moving.png", res.mask_b.values.astype(float))
    print(json.dumps(res.result.to_dict()))
    return EXIT_OK


# --- evaluate ---------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(weights, cfg_dict, detector_spec):
    import torch

    from .registration.keypoints import load_detector

    torch.set_num_threads(1)
    cfg = RunConfig.from_dict(cfg_dict)
    _WORKER["cfg"] = cfg
    _WORKER["nets"] = _load_weights(weights, cfg.raw)
    _WORKER["detector"] = load_detector(detector_spec)


def evaluate_record(rec, cfg: RunConfig, nets, detector, identity: bool = False):
    """Register one record (or apply the identity) and compute every per-pair metric."""
    from .core import PartialAffine2D, RegistrationResult
    from .metrics import PairEvaluation, mae, overlap_metrics, reprojection_errors, rmse
    from .registration.pipeline import register_pair

    if identity:
        result = RegistrationResult(PartialAffine2D.identity())
    else:
        result = register_pair(rec.fixed, rec.moving, nets[0], nets[1], detector,
                               cfg.registration).result
    ev = PairEvaluation(rec.id, result)
    t = result.transform
    if t is None:
        return ev
    if rec.gt_correspondences is not None:
        err = reprojection_errors(t, rec.gt_correspondences)
        result.rmse, result.mae = rmse(err), mae(err)
    ov = overlap_metrics(rec.fixed, rec.moving, t, rec.gt_moving_mask, cfg.vesselness)
    ev.soft_dice = ov["soft_dice"]
    m = ov.get("masked_soft_dice")
    ev.masked_soft_dice = None if m is None or not np.isfinite(m) else m
    return ev


def _eval_job(job):
    rec, identity = job
    return evaluate_record(rec, _WORKER["cfg"], _WORKER["nets"], _WORKER["detector"], identity)


def evaluate_records(records, cfg: RunConfig, weights, jobs: int = 1,
                     include_unregistered: bool = False, pair_dir: Optional[Path] = None):
    from .registration.keypoints import load_detector

    work = [(r, False) for r in records]
    if include_unregistered:
        work += [(r, True) for r in records]
    if jobs > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker,
                                 initargs=(weights, cfg.to_dict(), cfg.detector_weights)) as ex:
            evals = list(ex.map(_eval_job, work))
    else:
        nets = _load_weights(weights, cfg.raw)
        detector = load_detector(cfg.detector_weights)
        evals = [evaluate_record(r, cfg, nets, detector, ident) for r, ident in work]
    reg, base = evals[: len(records)], evals[len(records):]
    if pair_dir is not None:
        for e in reg:
            _write_json_atomic(pair_dir / f"{e.id}.json", {"id": e.id, **e.result.to_dict(),
                                                          "soft_dice": e.soft_dice,
                                                          "masked_soft_dice": e.masked_soft_dice})
    return reg, (base if include_unregistered else None)


def cmd_evaluate(args) -> int:
    from .data.io import load_dataset
    from .metrics import write_report

    cfg = _load_config(args)
    if args.raw:
        cfg.raw = True
    if args.detector:
        cfg.detector_weights = args.detector
    dataset = Path(args.dataset)
    if not dataset.exists():
        raise DatasetError(f"dataset path {dataset} does not exist")
    records = _prepare(load_dataset(dataset), cfg)
    if args.split != "all":
        records = [r for r in records if r.split == args.split]
    if not records:
        raise DatasetError(f"no pairs in split {args.split!r}")
    _load_weights(args.weights, cfg.raw)  # fail fast before spawning workers
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "resolved_config.yaml")
    reg, base = evaluate_records(records, cfg, args.weights, args.jobs, args.include_unregistered,
                                 pair_dir=out / "pairs")
    summary = write_report(reg, out, baseline=base)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


# --- experiments ------------------------------------------------------------

def cmd_experiments(args) -> int:
    from .experiments import TABLES, run_table_reproduction

    cfg = _load_config(args) if (args.config or args.overrides) else None
    tables = TABLES if args.table == "all" else (args.table,)
    for t in tables:
        report = run_table_reproduction(t, args.scale, out_dir=args.out, config=cfg,
                                        memo_root=args.memo_root, cffa_root=args.cffa_root,
                                        weights=args.weights)
        print(report.markdown())
    return EXIT_OK


# --- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vddreg", description="Multimodal retinal image registration.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    synth = sub.add_parser("synth", help="synthetic data")
    ssub = synth.add_subparsers(dest="action", required=True, parser_class=_Parser)
    g = ssub.add_parser("generate", help="write a deterministic synthetic dataset")
    _add_config(g)
    g.add_argument("--out", required=True)
    g.add_argument("--n-pairs", type=int)
    g.set_defaults(func=cmd_synth_generate)

    seg = sub.add_parser("seg", help="segmentation networks")
    segsub = seg.add_subparsers(dest="action", required=True, parser_class=_Parser)
    t = segsub.add_parser("train", help="two-stage training")
    _add_config(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--n-masks", type=int, help="annotated masks used in stage 1")
    t.add_argument("--style-target", type=Path)
    mode = t.add_mutually_exclusive_group()
    mode.add_argument("--stage1-only", action="store_true")
    mode.add_argument("--stage2-only", action="store_true")
    t.set_defaults(func=cmd_seg_train)

    r = sub.add_parser("register", help="register one pair directory")
    _add_config(r)
    r.add_argument("--pair", required=True)
    r.add_argument("--weights", type=Path, help="directory holding ema.pt and octa.pt")
    r.add_argument("--out", required=True)
    r.add_argument("--raw", action="store_true", help="detect keypoints on the raw images")
    r.add_argument("--detector", help="'classical' or a keypoint weights file")
    r.set_defaults(func=cmd_register)

    e = sub.add_parser("evaluate", help="register and score a dataset")
    _add_config(e)
    e.add_argument("--dataset", required=True)
    e.add_argument("--weights", type=Path)
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=("test", "train", "all"), default="test")
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--raw", action="store_true")
    e.add_argument("--detector")
    e.add_argument("--include-unregistered", action="store_true",
                   help="add a before-registration (identity transform) baseline")
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("experiments", help="table reproductions")
    _add_config(x)
    x.add_argument("table", help="T2_cffa, T3_memo, T4_stages, T5_nmasks, T6_datasets, T7_families or all")
    x.add_argument("--scale", choices=("desk", "full"), default="desk")
    x.add_argument("--out", default="reports")
    x.add_argument("--memo-root", type=Path)
    x.add_argument("--cffa-root", type=Path)
    x.add_argument("--weights", type=Path, help="directory with pretrained backbone/keypoint weights")
    x.set_defaults(func=cmd_experiments)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"vddreg: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DatasetError, WeightsError) as e:
        print(f"vddreg: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (RegistrationFailure, TrainingError) as e:
        print(f"vddreg: failure: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except ValueError as e:
        print(f"vddreg: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
