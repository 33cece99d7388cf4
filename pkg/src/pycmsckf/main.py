#!/usr/bin/env python3

import argparse
import logging
import os
import sys

import pycmsckf.backends
from pycmsckf.errors import FilterError
from pycmsckf.harness import (
    RunConfig,
    build_world,
    compare_backends,
    run,
    scaling_table,
)
from pycmsckf.plotting import plot_keyframe_uncertainty
from pycmsckf.simulator import export_streams


def _add_scenario_args(parser):
    parser.add_argument("--scenario", action="store", default=None, help="scenario YAML file")
    parser.add_argument("--seed", action="store", type=int, default=None, help="random seed")
    parser.add_argument("--out", action="store", required=True, help="output directory")


def _run(args):
    config = RunConfig(
        mode=args.mode,
        scenario=args.scenario,
        seed=args.seed,
        keyframe_interval=args.keyframe_interval,
        n_clones=args.n_clones,
        out_dir=args.out,
        oracle_lockstep=args.lockstep,
    )
    report = run(config)
    if args.plot:
        plot_keyframe_uncertainty(
            report.keyframes(), report.steps(), os.path.join(args.out, "keyframes.png")
        )
    if args.streams:
        scenario = config.load_scenario()
        seed = args.seed if args.seed is not None else scenario.seed
        world = build_world(scenario, seed)
        frames = list(world.frames())
        export_streams(
            os.path.join(args.out, "streams"),
            world.truth,
            world.imu,
            [(t, obs) for t, obs, _ in frames],
            [fix for _, _, fix in frames if fix is not None],
        )
    for key, value in report.summary.items():
        print(f"{key}: {value}")
    return 0


def _compare(args):
    configs = [
        RunConfig(
            mode=mode,
            scenario=args.scenario,
            seed=args.seed,
            out_dir=os.path.join(args.out, mode),
            oracle_lockstep=mode != "full",
        )
        for mode in pycmsckf.backends.BACKENDS
    ]
    table, _ = compare_backends(configs, jobs=args.jobs)
    os.makedirs(args.out, exist_ok=True)
    table.to_csv(os.path.join(args.out, "comparison.csv"), index=False, na_rep="nan")
    print(table.to_string(index=False))
    return 0


def _scaling(args):
    table = scaling_table(repeats=args.repeats)
    os.makedirs(args.out, exist_ok=True)
    table.to_csv(os.path.join(args.out, "scaling.csv"), index=False)
    print(table.to_string(index=False))
    for key, value in table.attrs.items():
        print(f"{key}: {value:.3f}")
    return 0


def main():
    parser = argparse.ArgumentParser(description="pycmsckf")
    parser.add_argument(
        "--log", default="warning", action="store", help="change log level"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="run one estimator")
    run_parser.add_argument(
        "--mode", action="store", default="compressed", help="Backend to use; ? for list"
    )
    _add_scenario_args(run_parser)
    run_parser.add_argument(
        "--lockstep", action="store_true", help="compare against a dense lockstep twin"
    )
    run_parser.add_argument(
        "--keyframe-interval", action="store", type=float, default=None, metavar="SECONDS"
    )
    run_parser.add_argument("--n-clones", action="store", type=int, default=None)
    run_parser.add_argument("--plot", action="store_true", help="write keyframes.png")
    run_parser.add_argument("--streams", action="store_true", help="write the sensor streams")
    run_parser.set_defaults(handler=_run)

    compare_parser = commands.add_parser("compare", help="run every estimator")
    _add_scenario_args(compare_parser)
    compare_parser.add_argument("--jobs", action="store", type=int, default=1)
    compare_parser.set_defaults(handler=_compare)

    scaling_parser = commands.add_parser("scaling", help="update cost against global size")
    scaling_parser.add_argument("--out", action="store", required=True)
    scaling_parser.add_argument("--repeats", action="store", type=int, default=5)
    scaling_parser.set_defaults(handler=_scaling)

    args = parser.parse_args()

    logging.basicConfig(level=args.log.upper())

    if getattr(args, "mode", None) == "?":
        print("Valid backends:")
        for k, v in pycmsckf.backends.BACKENDS.items():
            print("\t", k)
        return 1

    try:
        return args.handler(args)
    except FilterError as err:
        print(f"{type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
