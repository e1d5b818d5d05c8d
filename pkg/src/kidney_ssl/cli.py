"""
Command-line entry point (``kidney-ssl``).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments as X
from .config import ConfigError, load_config
from .models import ArchitectureError
from .phantom import PhantomError
from .proxy_data import ProxyDataError
from .training import TrainingDivergence
from .volume import VolumeError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _parser():
    p = argparse.ArgumentParser(prog="kidney-ssl", description=__doc__.strip().splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment configuration")
    common.add_argument("--seed", type=int, help="override the experiment seed(s)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--device", default=None, help="compute device (only 'cpu')")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("preprocess", parents=[common], help="KiTS-layout NIfTI -> case archives")
    s.add_argument("input_dir", type=Path)
    sub.add_parser("gen-phantoms", parents=[common], help="write a synthetic phantom dataset")
    s = sub.add_parser("train-proxy", parents=[common], help="siamese pre-training")
    s.add_argument("--resume", action="store_true")
    s = sub.add_parser("train-seg", parents=[common], help="segmentation training")
    s.add_argument("--init", type=Path, default=None, help="siamese checkpoint to transfer")
    s.add_argument("--resume", action="store_true")
    s = sub.add_parser("evaluate", parents=[common], help="metrics of a checkpoint")
    s.add_argument("checkpoint", type=Path)
    s.add_argument("case_dir", type=Path)
    sub.add_parser("compare", parents=[common], help="paired pre-trained vs. scratch runs")
    s = sub.add_parser("export-masks", parents=[common], help="NIfTI predictions, original grid")
    s.add_argument("checkpoint", type=Path)
    s.add_argument("case_dir", type=Path)
    return p


def _config(args):
    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
        overrides["proxy"] = {"train": {"seed": args.seed}}
        overrides["segmentation"] = {"train": {"seed": args.seed}}
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    if args.device is not None:
        overrides["device"] = args.device
    return load_config(args.config, overrides)


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        out = cfg.output_dir
        if args.command == "preprocess":
            X.cmd_preprocess(args.input_dir, out, cfg)
        elif args.command == "gen-phantoms":
            X.cmd_gen_phantoms(cfg, out)
        elif args.command == "train-proxy":
            X.cmd_train_proxy(cfg, out, resume=args.resume)
        elif args.command == "train-seg":
            X.cmd_train_seg(cfg, out, init_ckpt=args.init, resume=args.resume)
        elif args.command == "evaluate":
            _, summary = X.cmd_evaluate(args.checkpoint, args.case_dir, out,
                                        cfg.seg_train.threshold)
            print(json.dumps(summary, indent=2))
        elif args.command == "compare":
            result = X.cmd_compare(cfg, out)
            print((Path(out) / "summary.md").read_text(), end="")
            if not result.completed:
                return EXIT_DIVERGED if any("Divergence" in (s.error or "")
                                            for s in result.seeds) else EXIT_DATA
        elif args.command == "export-masks":
            X.cmd_export_masks(args.checkpoint, args.case_dir, out, cfg.seg_train.threshold)
    except (ConfigError, ArchitectureError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (X.DataError, VolumeError, ProxyDataError, PhantomError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
