"""Command-line entry points: ``dino3d train`` and ``dino3d export``."""

import argparse
import logging
import sys

import torch

from .config import ConfigError, load_config
from .data import VolumeFolderDataset
from .train import TrainConfig, TrainingAbort, build_models, load_train_config, train_toy

logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_IO = 3


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="dino3d",
        description="Toy self-distillation pretraining for 3D volumes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the toy training loop")
    p_train.add_argument("--out", required=True, help="checkpoint output path")
    p_train.add_argument("--steps", type=int, default=200)
    p_train.add_argument("--config", help="key = value override file")
    p_train.add_argument("--data", help="folder of .nii/.nii.gz volumes "
                                        "(default: synthetic shapes)")
    p_train.add_argument("--resume", help="checkpoint to continue from")

    p_export = sub.add_parser("export", help="write dense features for a volume")
    p_export.add_argument("--checkpoint", required=True)
    p_export.add_argument("--volume", required=True)
    p_export.add_argument("--out", required=True)
    return parser


def _cmd_train(args):
    cfg = TrainConfig()
    if args.config:
        cfg = load_config(args.config, base=cfg)
    dataset = None
    if args.data:
        dataset = VolumeFolderDataset(args.data, seed=cfg.seed + 2)
    resume_state = None
    if args.resume:
        resume_state = torch.load(args.resume, weights_only=False)
    records, _ = train_toy(
        cfg, args.steps, checkpoint_path=args.out,
        dataset=dataset, resume_state=resume_state,
    )
    if records:
        logger.info("finished at step %d with loss %.4f",
                    records[-1].step, records[-1].total)
    return 0


def _cmd_export(args):
    from .export import export_features

    state = torch.load(args.checkpoint, weights_only=False)
    cfg = load_train_config(state)
    _, teacher = build_models(cfg)
    teacher.load_state_dict(state["teacher"])
    export_features(teacher.backbone, args.volume, args.out, cfg.vit.crop_size)
    return 0


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "export":
            return _cmd_export(args)
        parser.error(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"dino3d: config-error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, TrainingAbort) as exc:
        print(f"dino3d: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"dino3d: io-error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
