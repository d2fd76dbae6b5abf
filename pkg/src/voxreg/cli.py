"""Command-line interface.

Subcommands: register (one pair end to end), metrics (score an existing
displacement), mind (descriptors to FVL1), pca (project two feature files
into a joint basis), synth (generate a ground-truth pair), eval-pairs
(batch register+metrics over a manifest).

Exit codes: 0 success, 2 usage/configuration error, 3 I/O or data error,
4 numerical abort. Errors print one line on stderr:
``voxreg: <kind>: <message>``. The VOXREG_LOG environment variable
(error|warn|info|debug) sets log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .adam_refine import write_loss_trace
from .config import (
    build_registration_config,
    build_synth_config,
    config_echo,
    parse_config_file,
)
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    GeometryError,
    NumericalAbortError,
)
from .features import fit_pca, ingest_features, mind_ssc, project, save_basis
from .fields import upsample_field
from .io_formats import (
    read_displacement,
    read_labels,
    read_nifti,
    write_displacement,
    write_fvl1,
    write_nifti,
)
from .metrics import evaluate, report_as_dict, write_report
from .pipeline import register
from .synth import make_pair, with_seed
from .volume import GridGeometry, Volume3, preprocess_ct, preprocess_mri

logger = logging.getLogger(__name__)

_LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def _setup_logging():
    name = os.environ.get("VOXREG_LOG", "warn").strip().lower()
    level = _LOG_LEVELS.get(name)
    if level is None:
        level = logging.WARNING
    logging.basicConfig(
        level=level, format="%(levelname)s %(name)s: %(message)s"
    )
    if name and name not in _LOG_LEVELS:
        logger.warning("ignoring unknown VOXREG_LOG value %r", name)


def _overrides(args) -> dict:
    out: dict[str, object] = {}
    if getattr(args, "config", None):
        out.update(parse_config_file(args.config))
    if getattr(args, "features", None):
        out["feature_source"] = args.features
    if getattr(args, "seed", None) is not None:
        out["pca.seed"] = args.seed
    return out


def _preprocessed(vol, mode: str):
    if mode == "mri":
        return preprocess_mri(vol)
    if mode == "ct":
        return preprocess_ct(vol)
    return vol


def _cmd_register(args) -> int:
    cfg = build_registration_config(_overrides(args))
    fixed = read_nifti(args.fixed)
    moving = read_nifti(args.moving)
    ext = None
    if cfg.feature_source == "external":
        if not (args.fixed_feat and args.moving_feat):
            raise ConfigError(
                "--fixed-feat and --moving-feat are required with external features"
            )
        ext = (ingest_features(args.fixed_feat), ingest_features(args.moving_feat))
    result = register(fixed, moving, cfg, ext)
    if args.out_disp:
        write_displacement(result.displacement, args.out_disp)
    if args.out_warped:
        write_nifti(result.warped_moving, args.out_warped)
    if args.out_report:
        write_loss_trace(
            result.loss_trace, args.out_report, comment=f"seed={cfg.pca.seed}"
        )
    logger.info(
        "registered %s -> %s in %.0f ms",
        args.moving, args.fixed, result.timings_ms["total_ms"],
    )
    return 0


def _cmd_metrics(args) -> int:
    fixed_seg = read_labels(args.fixed_seg)
    moving_seg = read_labels(args.moving_seg)
    field = read_displacement(args.disp)
    if field.stride != 1 or field.geometry.dims != fixed_seg.geometry.dims:
        field = upsample_field(field, fixed_seg.geometry)
    report = evaluate(fixed_seg, moving_seg, field)
    write_report(report, args.out_report)
    return 0


def _cmd_mind(args) -> int:
    cfg = build_registration_config(_overrides(args))
    vol = read_nifti(args.fixed)
    feats = mind_ssc(_preprocessed(vol, cfg.preprocessing), cfg.mind)
    write_fvl1(feats, args.out_feat)
    return 0


def _cmd_pca(args) -> int:
    cfg = build_registration_config(_overrides(args))
    a = ingest_features(args.fixed_feat)
    b = ingest_features(args.moving_feat)
    basis = fit_pca(a, b, cfg.pca)
    write_fvl1(project(a, basis), args.out_fixed_feat)
    write_fvl1(project(b, basis), args.out_moving_feat)
    save_basis(basis, args.out_basis)
    return 0


def _labels_as_volume(seg) -> Volume3:
    return Volume3(seg.geometry, seg.labels.astype(np.float32))


def _cmd_synth(args) -> int:
    scfg = build_synth_config(_overrides(args))
    if args.seed is not None:
        scfg = with_seed(scfg, args.seed)
    dims = tuple(int(t) for t in args.dims.split(","))
    if len(dims) == 1:
        dims = dims * 3
    geom = GridGeometry(dims)
    fixed, moving, truth, fixed_seg, moving_seg = make_pair(geom, scfg)
    write_nifti(fixed, args.out_fixed)
    write_nifti(moving, args.out_moving)
    write_displacement(truth, args.out_truth)
    if args.out_fixed_seg:
        write_nifti(_labels_as_volume(fixed_seg), args.out_fixed_seg)
    if args.out_moving_seg:
        write_nifti(_labels_as_volume(moving_seg), args.out_moving_seg)
    return 0


def _read_manifest(path) -> list[tuple[str, str, str, str]]:
    pairs = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split("\t")
            if len(parts) != 4:
                raise DataError(
                    f"{path}:{lineno}: expected 4 tab-separated paths "
                    f"(fixed, moving, fixed_seg, moving_seg), got {len(parts)}"
                )
            pairs.append(tuple(parts))
    if not pairs:
        raise DataError(f"{path}: manifest lists no pairs")
    return pairs


def _cmd_eval_pairs(args) -> int:
    cfg = build_registration_config(_overrides(args))
    pairs = _read_manifest(args.manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def run_pair(item):
        index, (f_path, m_path, fs_path, ms_path) = item
        fixed = read_nifti(f_path)
        moving = read_nifti(m_path)
        fixed_seg = read_labels(fs_path)
        moving_seg = read_labels(ms_path)
        result = register(fixed, moving, cfg)
        stem = f"pair{index:03d}"
        write_displacement(result.displacement, out_dir / f"{stem}_disp.fvl1")
        write_nifti(result.warped_moving, out_dir / f"{stem}_warped.nii")
        write_loss_trace(
            result.loss_trace,
            out_dir / f"{stem}_loss.csv",
            comment=f"seed={cfg.pca.seed}",
        )
        report = evaluate(fixed_seg, moving_seg, result.displacement)
        write_report(report, out_dir / f"{stem}_report.json")
        return index, report

    items = list(enumerate(pairs))
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(run_pair, items))
    else:
        results = [run_pair(item) for item in items]

    def stats(values):
        arr = np.asarray(values, dtype=np.float64)
        return {"mean": float(arr.mean()), "std": float(arr.std())}

    reports = [r for _, r in sorted(results)]
    summary = {
        "pair_count": len(reports),
        "seed": cfg.pca.seed,
        "dice_mean": stats([r.dice_mean for r in reports]),
        "sdlogj": stats([r.sdlogj for r in reports]),
        "folding_pct": stats([r.folding_pct for r in reports]),
        "pairs": [
            {
                "index": i,
                "fixed": pairs[i][0],
                "moving": pairs[i][1],
                "report": report_as_dict(r),
            }
            for i, r in sorted(results)
        ],
        "config": config_echo(cfg),
    }
    with open(args.out_report, "w") as f:
        json.dump(summary, f, indent=2, allow_nan=False)
        f.write("\n")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxreg",
        description="Feature-based 3D deformable registration toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int, help="seed for all randomness (default 0)")

    reg = sub.add_parser("register", help="register one image pair")
    reg.add_argument("--fixed", required=True)
    reg.add_argument("--moving", required=True)
    reg.add_argument("--features", choices=("mind", "external"))
    reg.add_argument("--fixed-feat", help="FVL1 features for --features external")
    reg.add_argument("--moving-feat", help="FVL1 features for --features external")
    reg.add_argument("--out-disp", help="output displacement field (FVL1)")
    reg.add_argument("--out-warped", help="output warped moving image (NIfTI)")
    reg.add_argument("--out-report", help="output loss trace (CSV)")
    add_common(reg)
    reg.set_defaults(func=_cmd_register)

    met = sub.add_parser("metrics", help="score a displacement field")
    met.add_argument("--disp", required=True, help="displacement field (FVL1)")
    met.add_argument("--fixed-seg", required=True)
    met.add_argument("--moving-seg", required=True)
    met.add_argument("--out-report", required=True, help="metrics report (JSON)")
    add_common(met)
    met.set_defaults(func=_cmd_metrics)

    mind = sub.add_parser("mind", help="compute descriptors for one volume")
    mind.add_argument("--fixed", required=True, help="input volume (NIfTI)")
    mind.add_argument("--out-feat", required=True, help="output features (FVL1)")
    add_common(mind)
    mind.set_defaults(func=_cmd_mind)

    pca = sub.add_parser("pca", help="project two feature files into a joint basis")
    pca.add_argument("--fixed-feat", required=True)
    pca.add_argument("--moving-feat", required=True)
    pca.add_argument("--out-fixed-feat", required=True)
    pca.add_argument("--out-moving-feat", required=True)
    pca.add_argument("--out-basis", required=True, help="basis file (npz)")
    add_common(pca)
    pca.set_defaults(func=_cmd_pca)

    synth = sub.add_parser("synth", help="generate a synthetic pair with ground truth")
    synth.add_argument("--dims", default="48,48,48", help="volume dims, e.g. 64,64,64")
    synth.add_argument("--out-fixed", required=True)
    synth.add_argument("--out-moving", required=True)
    synth.add_argument("--out-truth", required=True, help="truth field (FVL1)")
    synth.add_argument("--out-fixed-seg")
    synth.add_argument("--out-moving-seg")
    add_common(synth)
    synth.set_defaults(func=_cmd_synth)

    ev = sub.add_parser("eval-pairs", help="batch register + metrics over a manifest")
    ev.add_argument(
        "--manifest", required=True,
        help="text file: fixed<TAB>moving<TAB>fixed_seg<TAB>moving_seg per line",
    )
    ev.add_argument("--out-dir", required=True, help="directory for per-pair artifacts")
    ev.add_argument("--out-report", required=True, help="summary report (JSON)")
    ev.add_argument("--jobs", type=int, default=1, help="concurrent pairs")
    add_common(ev)
    ev.set_defaults(func=_cmd_eval_pairs)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    try:
        return args.func(args)
    except (ConfigError, GeometryError) as e:
        print(f"voxreg: usage-error: {e}", file=sys.stderr)
        return 2
    except NumericalAbortError as e:
        print(f"voxreg: numerical-abort: {e}", file=sys.stderr)
        return 4
    except (FormatError, DataError) as e:
        print(f"voxreg: data-error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"voxreg: io-error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
