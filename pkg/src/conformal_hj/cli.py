"""Command-line entry point: ``conformal-hj <command> [options]``."""

import argparse
import json
import logging
import sys

from .exceptions import ArtifactError, ConfigurationError, ContractError
from .experiments import COMMANDS, RunConfig


def build_parser():
    parser = argparse.ArgumentParser(
        prog="conformal-hj",
        description="Calibrated learned safety filters: training, calibration, evaluation, "
                    "certification and oracle checks.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", help="output root directory")
        p.add_argument("--alpha", type=float, help="miscoverage level for filtering")
        p.add_argument("--strategy", choices=["single", "multiple"])
        p.add_argument("--members", type=int, help="ensemble size")
        p.add_argument("--trials", type=int, help="evaluation episodes per policy")
        p.add_argument("--ncert", type=int, nargs="+", help="certification episode counts")
    return parser


def config_from_args(args):
    base = {}
    if args.config:
        with open(args.config) as fh:
            base = json.load(fh)
    for key in ("seed", "out", "alpha", "strategy", "members", "trials", "ncert"):
        value = getattr(args, key)
        if value is not None:
            base[key] = value
    return RunConfig.from_dict(base)


def _summary(command, result):
    if command == "train":
        return {"run_id": result["run_id"], "models": result["models"]}
    if command == "calibrate":
        return {"run_id": result["run_id"], "calibrations": result["calibrations"]}
    if command == "eval":
        return [{k: r[k] for k in ("policy", "strategy", "violation_rate", "success_rate")}
                for r in result["table"]]
    if command == "certify":
        return [{k: r[k] for k in ("policy", "n_cert", "k", "mean")} for r in result["results"]]
    if command == "oracle":
        return {"grid": result["grid"], "sign_agreement": result["learned"]["sign_agreement"],
                "coverage": result["coverage"]}
    return {k: len(v) for k, v in result.items()}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        result = COMMANDS[args.command](cfg)
    except (ConfigurationError, ContractError, ArtifactError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(_summary(args.command, result), indent=1, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
