"""``sdpc`` command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical or analysis failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

from .config import CFD_DEFAULTS, RunConfig
from .errors import AnalysisError, ConfigurationError, DataError, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

HELP = {
    "preprocess": "LCN + whitening of the train/test splits (cached)",
    "train": "alternate inference and dictionary learning; checkpoint every epoch",
    "denoise": "SSIM of layer reconstructions from noisy inputs per (k_fb, sigma)",
    "maps": "interaction maps, co-linearity/co-circularity and activity ratios",
    "sparsity": "fraction of active layer units per feedback strength",
    "show-rfs": "mosaics of effective receptive fields ranked by activation probability",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--preset", choices=["stl10", "cfd"], help="dataset defaults (stl10 is the default)")
    p.add_argument("--eta-l1", type=float, help="layer-1 learning rate")
    p.add_argument("--eta-l2", type=float, help="layer-2 learning rate")
    p.add_argument("-v", "--verbose", action="count", default=0)
    group = p.add_argument_group("config fields")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            group.add_argument(flag, dest=f.name, nargs="?", const="true", default=None)
        else:
            group.add_argument(flag, dest=f.name, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdpc", description="Sparse deep predictive coding experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in HELP.items():
        _add_config_flags(sub.add_parser(name, help=text, description=text))
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    base = RunConfig()
    if args.preset == "cfd":
        base = base.replace(**CFD_DEFAULTS)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
        base = RunConfig.from_text(text, base)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip().replace("-", "_")] = v
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            overrides[f.name] = v
    cfg = base.replace(**overrides)
    if args.eta_l1 is not None or args.eta_l2 is not None:
        eta = cfg.eta_list()
        if args.eta_l1 is not None:
            eta[0] = args.eta_l1
        if args.eta_l2 is not None:
            if len(eta) < 2:
                raise ConfigurationError("--eta-l2 needs a two-layer network")
            eta[1] = args.eta_l2
        cfg = cfg.replace(eta_l=",".join(repr(e) for e in eta))
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    from .experiments import COMMANDS

    try:
        cfg = config_from_args(args)
        manifest = COMMANDS[args.command](cfg)
    except ConfigurationError as exc:
        print(f"sdpc {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"sdpc {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, AnalysisError) as exc:
        print(f"sdpc {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    summary = {k: manifest[k] for k in ("command", "outputs", "wall_clock_s") if k in manifest}
    print(json.dumps(summary, indent=2))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
