"""Command-line entry point.

Exit codes: 0 success, 2 usage/config, 3 I/O or file format, 4 numeric,
5 integrity, 6 internal state, 1 anything else.  Logs go to standard error;
data goes to files only.
"""

from __future__ import annotations

import os

# Reproducibility requires single-threaded BLAS; set before numpy loads.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402

from .errors import WccError  # noqa: E402

log = logging.getLogger("wccnet")

EXIT_IO = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wccnet", description="Wavelet-conditioned diffusion denoising on phantoms.")
    parser.add_argument("--config", help="INI-style run config (built-in smoke defaults when omitted)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("show-config", help="print the resolved config and its hash")
    p.set_defaults(func=_show_config)

    p = sub.add_parser("phantom-gen", help="generate the phantom dataset")
    p.add_argument("--out", help="dataset directory (default paths.data_dir)")
    p.set_defaults(func=_phantom_gen)

    p = sub.add_parser("train-backbone", help="train the conditional DDPM backbone")
    p.add_argument("--data", help="dataset directory (default paths.data_dir)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=_train_backbone)

    p = sub.add_parser("train-control", help="train the wavelet control branch over a frozen backbone")
    p.add_argument("--data")
    p.add_argument("--backbone", required=True)
    p.add_argument("--selector", help="subband selector (default control.selector)")
    p.add_argument("--out", required=True, help="branch checkpoint path")
    p.set_defaults(func=_train_control)

    p = sub.add_parser("denoise", help="denoise a volume or a directory of volumes")
    p.add_argument("--backbone", required=True)
    p.add_argument("--branch", help="control branch checkpoint; omitted = backbone only")
    p.add_argument("--input", required=True, help="VXV1 file or directory")
    p.add_argument("--output", required=True, help="VXV1 file or directory")
    p.set_defaults(func=_denoise)

    p = sub.add_parser("eval", help="metrics and paired tests for a directory of predictions")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--comparator", help="directory of comparator predictions (named by eval.comparator)")
    p.add_argument("--name", default="method")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=_eval)

    p = sub.add_parser("ablate", help="subband-selection ablation over one backbone")
    p.add_argument("--data")
    p.add_argument("--backbone", help="reuse an existing backbone checkpoint")
    p.add_argument("--out", help="output directory (default paths.out_dir/ablate)")
    p.set_defaults(func=_ablate)
    return parser


def _show_config(cfg, args):
    sys.stdout.write(cfg.to_ini() + f"# config_hash = {cfg.hash()}\n")


def _phantom_gen(cfg, args):
    from .pipeline import cmd_phantom_gen

    cmd_phantom_gen(cfg, args.out)


def _train_backbone(cfg, args):
    from .pipeline import cmd_train_backbone

    cmd_train_backbone(cfg, args.out, args.data)


def _train_control(cfg, args):
    from .pipeline import cmd_train_control
    from .wavelet import SubbandSelector

    sel = SubbandSelector.parse(args.selector) if args.selector else None
    cmd_train_control(cfg, args.backbone, args.out, args.data, sel)


def _denoise(cfg, args):
    from .pipeline import cmd_denoise

    cmd_denoise(cfg, args.backbone, args.input, args.output, args.branch)


def _eval(cfg, args):
    from .pipeline import cmd_eval

    report = cmd_eval(cfg, args.pred, args.ref, args.out, args.comparator, args.name)
    log.info("evaluation\n%s", report.table())


def _ablate(cfg, args):
    from .pipeline import cmd_ablate

    cmd_ablate(cfg, args.out, args.data, args.backbone)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    from .config import load_config

    try:
        cfg = load_config(args.config, args.overrides)
        args.func(cfg, args)
    except WccError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
