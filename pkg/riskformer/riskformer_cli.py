"""
Risk estimation on sparse, irregular consumption time series.

(c) 2024 riskformer contributors
Licensed under the MIT license: https://www.opensource.org/licenses/mit-license.php

Usage examples:
    $ riskformer --help
    $ riskformer synth --out work/synth
    $ riskformer preprocess --readings work/synth/readings.csv --labels work/synth/labels.txt --out work/prep
    $ riskformer train --dataset work/prep/dataset.npz --model tr-la --window 5 --out work/tr-la
    $ riskformer infer --dataset work/prep/dataset.npz --checkpoint work/tr-la/model.npz --out work/risk
    $ riskformer evaluate work/risk/report.csv --labels work/synth/labels.txt --out work/eval
"""

import argparse
import logging
import sys

from snazzy import enable_colors

from riskformer import __version__
from riskformer.cli_common import common_parser, run_parser, verbose_parser
from riskformer.run_manager import RunManager
from riskformer.training import SUBSET_PRESETS
from riskformer.util import (
    RiskformerError,
    check_cli_verbose,
    exit_code_for,
    init_logging,
    logger,
    parse_option_args,
    version_info,
)


class RiskformerArgumentParser(argparse.ArgumentParser):
    """Report usage errors with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _positive_int(s):
    try:
        value = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {s!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a value >= 1, got {value}")
    return value


def window_arg(s):
    """`--window N|full`"""
    if s == "full":
        return s
    return _positive_int(s)


def epochs_arg(s):
    if s == "auto":
        return s
    return _positive_int(s)


def subset_arg(s):
    if s in SUBSET_PRESETS:
        return s
    return _positive_int(s)


def fraction_arg(s):
    try:
        value = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {s!r}") from None
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"expected a fraction in (0, 1), got {value}")
    return value


#: argparse dest -> configuration key
OVERRIDE_ARGS = {
    "seed": "seed",
    "model": "model.name",
    "window": "model.window",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "subset": "train.subset",
    "fraction": "cluster.fraction",
    "thresholds": "cluster.thresholds",
}


def collect_overrides(parser, args):
    """Return {dotted.key: value} from `--option` and the dedicated flags."""
    try:
        overrides = parse_option_args(args.option, coerce_values=True)
    except Exception as e:
        parser.error(f"--option: {e}")
    for dest, key in OVERRIDE_ARGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    return overrides


def _run_manager(parser, args):
    rm = RunManager(args.out)
    rm.load_config(args.config, collect_overrides(parser, args))
    return rm


def handle_synth_command(parser, args):
    rm = _run_manager(parser, args)
    rm.run("synth")
    return 0


def handle_preprocess_command(parser, args):
    rm = _run_manager(parser, args)
    rm.run(
        "preprocess",
        readings=args.readings,
        labels=args.labels,
        strict=True if args.strict else None,
    )
    return 0


def handle_train_command(parser, args):
    rm = _run_manager(parser, args)
    rm.run("train", dataset=args.dataset)
    return 0


def handle_infer_command(parser, args):
    rm = _run_manager(parser, args)
    rm.run("infer", dataset=args.dataset, checkpoint=args.checkpoint, latent=args.latent)
    return 0


def handle_evaluate_command(parser, args):
    rm = _run_manager(parser, args)
    rm.run("evaluate", reports=args.reports, labels=args.labels)
    return 0


def handle_plot_command(parser, args):
    rm = _run_manager(parser, args)
    rm.run(
        "plot",
        checkpoints=args.checkpoints or (),
        reports=args.reports or (),
        labels=args.labels,
    )
    return 0


def handle_represent_command(parser, args):
    rm = _run_manager(parser, args)
    rm.run(
        "represent",
        dataset=args.dataset,
        threshold=args.threshold,
        two_sided=args.two_sided or None,
    )
    return 0


def _add_model_args(sp):
    sp.add_argument(
        "--dataset",
        metavar="PATH",
        help="normalized dataset (default: `paths.dataset`)",
    )
    sp.add_argument(
        "--model",
        help="model family: tr-la, tr-fu, conv, ff-nn (default: `model.name`)",
    )
    sp.add_argument(
        "--window",
        type=window_arg,
        help="local attention window size w or 'full' (default: `model.window`)",
    )
    sp.add_argument(
        "--epochs",
        type=epochs_arg,
        help="number of epochs or 'auto' (default: `train.epochs`)",
    )
    sp.add_argument(
        "--batch-size",
        type=_positive_int,
        help="training batch size (default: `train.batch_size`)",
    )
    sp.add_argument(
        "--subset",
        type=subset_arg,
        help="training subset: full, 100k, 10k or a count (default: `train.subset`)",
    )


def build_parser():
    parents = [verbose_parser, common_parser]
    parser = RiskformerArgumentParser(
        description="Risk estimation with a local-attention transformer autoencoder.",
        parents=parents,
        # allow_abbrev=False,
    )
    parser.add_argument(
        "-V",
        "--version",
        action="store_true",
        help="display version info and exit (combine with -v for more information)",
    )
    subparsers = parser.add_subparsers(help="sub-command help")

    # --- synth ----------------------------------------------------------------

    sp = subparsers.add_parser(
        "synth",
        parents=parents + [run_parser],
        help="generate synthetic readings and ground-truth labels",
    )
    sp.set_defaults(command=handle_synth_command)

    # --- preprocess -----------------------------------------------------------

    sp = subparsers.add_parser(
        "preprocess",
        parents=parents + [run_parser],
        help="turn raw readings into a normalized fixed-length dataset",
    )
    sp.add_argument(
        "--readings",
        metavar="PATH",
        help="readings CSV (default: `paths.readings`)",
    )
    sp.add_argument(
        "--labels",
        metavar="PATH",
        help="labeled account ids, one per line (default: `paths.labels`)",
    )
    sp.add_argument(
        "--strict",
        action="store_true",
        help="fail on the first malformed reading instead of skipping it",
    )
    sp.set_defaults(command=handle_preprocess_command)

    # --- train ----------------------------------------------------------------

    sp = subparsers.add_parser(
        "train",
        parents=parents + [run_parser],
        help="train a model and write a checkpoint",
    )
    _add_model_args(sp)
    sp.set_defaults(command=handle_train_command)

    # --- infer ----------------------------------------------------------------

    sp = subparsers.add_parser(
        "infer",
        aliases=["cluster"],
        parents=parents + [run_parser],
        help="score, rank and cluster all series into a risk report",
    )
    sp.add_argument(
        "--dataset",
        metavar="PATH",
        help="normalized dataset (default: `paths.dataset`)",
    )
    sp.add_argument(
        "--checkpoint",
        metavar="PATH",
        help="trained model (default: `paths.checkpoint`)",
    )
    sp.add_argument(
        "--fraction",
        type=fraction_arg,
        help="cluster size as a share of all accounts (default: `cluster.fraction`)",
    )
    sp.add_argument(
        "--threshold",
        dest="thresholds",
        type=float,
        action="append",
        help="cluster by score thresholds instead (descending, multiple values allowed)",
    )
    sp.add_argument(
        "--latent",
        action="store_true",
        help="also write the latent vector of every series",
    )
    sp.set_defaults(command=handle_infer_command)

    # --- evaluate -------------------------------------------------------------

    sp = subparsers.add_parser(
        "evaluate",
        parents=parents + [run_parser],
        help="recall, precision and consistency of risk reports",
    )
    sp.add_argument(
        "reports",
        metavar="REPORT",
        nargs="+",
        help="risk report CSV (multiple values allowed)",
    )
    sp.add_argument(
        "--labels",
        metavar="PATH",
        help="labeled account ids (default: `paths.labels`)",
    )
    sp.set_defaults(command=handle_evaluate_command)

    # --- plot -----------------------------------------------------------------

    sp = subparsers.add_parser(
        "plot",
        parents=parents + [run_parser],
        help="render loss curves and per-cluster label histograms",
    )
    sp.add_argument(
        "--checkpoint",
        dest="checkpoints",
        metavar="PATH",
        action="append",
        help="checkpoint whose loss curve is drawn (multiple values allowed)",
    )
    sp.add_argument(
        "--report",
        dest="reports",
        metavar="PATH",
        action="append",
        help="risk report whose labeled accounts are counted (multiple values allowed)",
    )
    sp.add_argument(
        "--labels",
        metavar="PATH",
        help="labeled account ids (default: `paths.labels`)",
    )
    sp.set_defaults(command=handle_plot_command)

    # --- represent ------------------------------------------------------------

    sp = subparsers.add_parser(
        "represent",
        parents=parents + [run_parser],
        help="check whether the training subset is representative of the dataset",
    )
    _add_model_args(sp)
    sp.add_argument(
        "--threshold",
        type=float,
        help="tolerance t (default: `train.representative_threshold`)",
    )
    sp.add_argument(
        "--two-sided",
        action="store_true",
        help="compare |delta| to t (default: `train.representative_two_sided`)",
    )
    sp.set_defaults(command=handle_represent_command)

    return parser


# ===============================================================================
# run
# ===============================================================================
def run(argv=None):
    """CLI main entry point."""

    # We want to see some logging, even if init_logging() wasn't called yet:
    level = logging.DEBUG if check_cli_verbose() >= 4 else logging.INFO
    logging.basicConfig(level=level, format="%(message)s", datefmt="%H:%M:%S")

    parser = build_parser()
    args = parser.parse_args(argv)

    args.verbose -= args.quiet
    del args.quiet

    init_logging(args.verbose, args.log_file)

    if not args.no_color:
        # Enable snazzy colors and emojis if terminal supports them
        enable_colors(True, force=False)

    if getattr(args, "version", None):
        if args.verbose >= 4:
            info = version_info
            info += f"\nPython from: {sys.executable}"
        else:
            info = __version__
        print(info)  # noqa: T201
        return 0

    if not callable(getattr(args, "command", None)):
        parser.error("missing command")

    try:
        return args.command(parser, args)
    except KeyboardInterrupt:
        print("\nAborted by user.", file=sys.stderr)  # noqa: T201
        return 3
    except RiskformerError as e:
        logger.error(f"{e.__class__.__name__}: {e}")
        return exit_code_for(e)


# Script entry point
if __name__ == "__main__":
    sys.exit(run())
