"""``blockloc`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error. Runtime errors are
reported on stderr as one JSON line ``{"code": ..., "message": ...}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional, Sequence

from .config import Config, describe
from .errors import BlockLocError, NoInput
from .formats import format_pose_line, iter_scans, read_imu_csv, read_scan, read_trajectory, save_library, write_trajectory

log = logging.getLogger("blockloc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _triple(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, default=7, help="random seed (u64)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="blockloc", description="Block-map lidar-inertial localization toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("simulate", parents=[common], help="render a synthetic dataset")
    s.add_argument("--scenario", default="corridor-loop")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, help="render only the first N sweeps")
    s.add_argument("--noise-free", action="store_true")
    s.add_argument("--offline-sigma", type=float, default=0.0, help="perturbation of the offline poses")

    s = sub.add_parser("build-maps", parents=[common], help="generate block maps from scans and offline poses")
    s.add_argument("--scans", required=True)
    s.add_argument("--poses", required=True, help="offline trajectory (stamp x y z qx qy qz qw)")
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=float, help="block size S in meters (overrides map.size_S)")

    s = sub.add_parser("serve", parents=[common], help="serve a block-map library")
    s.add_argument("--maps", required=True)
    s.add_argument("--addr", default="127.0.0.1:7700")

    s = sub.add_parser("init", parents=[common], help="global initialization of one scan")
    s.add_argument("--scan", required=True)
    s.add_argument("--coarse", type=_triple, required=True)
    s.add_argument("--server", required=True)
    s.add_argument("--window", type=float)
    s.add_argument("--res", type=float)

    s = sub.add_parser("localize", parents=[common], help="track a scan sequence against served block maps")
    s.add_argument("--scans", required=True)
    s.add_argument("--imu", required=True)
    s.add_argument("--server", required=True)
    s.add_argument("--init", type=_triple, required=True, help="coarse start position for global initialization")
    s.add_argument("--out", required=True)
    s.add_argument("--timing")

    s = sub.add_parser("eval", parents=[common], help="absolute trajectory error")
    s.add_argument("--est", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--mode", choices=("trans", "full"), default="trans")
    s.add_argument("--no-align", action="store_true")
    s.add_argument("--csv")

    s = sub.add_parser("config", parents=[common], help="print the effective configuration")
    return p


def _client(server: str, cfg: Config):
    from .map_server import TIMEOUT_ENV, MapClient

    timeout = None if os.environ.get(TIMEOUT_ENV) else cfg["server.timeout_ms"] / 1000.0
    return MapClient(server, timeout)


def cmd_simulate(args, cfg: Config, out) -> int:
    from .sim import make_scenario, render_dataset, write_dataset

    sc = make_scenario(args.scenario, seed=args.seed)
    frames = range(min(args.frames, sc.n_frames)) if args.frames else None
    ds = render_dataset(sc, frames, noise=not args.noise_free, offline_sigma=args.offline_sigma)
    path = write_dataset(ds, args.out)
    print(f"wrote {len(ds.scans)} sweeps, {len(ds.imu)} IMU samples to {path}", file=out)
    return 0


def cmd_build_maps(args, cfg: Config, out) -> int:
    from .pipeline import build_library

    poses = read_trajectory(args.poses)
    if not poses:
        raise NoInput(f"{args.poses} holds no poses")
    size = args.size if args.size is not None else cfg["map.size_S"]
    lib = build_library(
        iter_scans(args.scans), poses, size, max_stamp_gap=cfg["map.max_stamp_gap"],
        leaf=cfg["map.leaf"], strict=cfg["map.strict"],
    )
    save_library(lib, args.out)
    st = lib.stats
    print(
        f"{len(lib)} blocks (stored {st.stored}, merged {st.merged}, discarded {st.discarded}, "
        f"skipped {st.skipped_pose_gap} of {st.scans} scans) -> {args.out}",
        file=out,
    )
    return 0


def cmd_serve(args, cfg: Config, out) -> int:
    from .map_server import serve

    serve(args.maps, args.addr)
    return 0


def cmd_init(args, cfg: Config, out) -> int:
    from .global_init import initialize_pose

    scan = read_scan(args.scan)
    with _client(args.server, cfg) as client:
        res = initialize_pose(
            args.coarse, client, scan,
            window_size=args.window or cfg["bbs.window"],
            resolution=args.res or cfg["bbs.resolution"],
            levels=cfg["bbs.levels"],
        )
    print(format_pose_line(scan.t_start, res.pose), file=out)
    log.info("block %d, %d hits, base score %.2f", res.bm_id, res.candidate.hits, res.base_score)
    return 0


def cmd_localize(args, cfg: Config, out) -> int:
    from .pipeline import run_localization, write_timing_csv

    scans = list(iter_scans(args.scans))
    if not scans:
        raise NoInput(f"no .scn files in {args.scans}")
    imu = read_imu_csv(args.imu)
    with _client(args.server, cfg) as client:
        run = run_localization(
            scans, imu, client, coarse=args.init, config=cfg.tracker_config(),
            window_size=cfg["bbs.window"], raise_on_lost=False,
        )
    write_trajectory(args.out, run.trajectory())
    if args.timing:
        write_timing_csv(args.timing, run.records)
    if run.lost is not None:
        raise run.lost
    print(f"{len(run.records)} poses, {run.switches} block switches -> {args.out}", file=out)
    return 0


def cmd_eval(args, cfg: Config, out) -> int:
    from .evaluation import associate, ate_rmse, pose_errors, write_error_csv

    pair = associate(read_trajectory(args.est), read_trajectory(args.gt), cfg["eval.max_gap"])
    align = not args.no_align
    rmse = ate_rmse(pair, args.mode, align)
    if args.csv:
        write_error_csv(args.csv, pair, pose_errors(pair, align))
    print(f"ate_rmse_{args.mode} {rmse:.6f}", file=out)
    return 0


def cmd_config(args, cfg: Config, out) -> int:
    print(describe(cfg), file=out)
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "build-maps": cmd_build_maps,
    "serve": cmd_serve,
    "init": cmd_init,
    "localize": cmd_localize,
    "eval": cmd_eval,
    "config": cmd_config,
}


def _error_line(code: str, message: str) -> str:
    return json.dumps({"code": code, "message": message})


def run(argv: Optional[Sequence[str]] = None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=stderr)
    try:
        cfg = Config.load(args.config, args.set)
        return COMMANDS[args.command](args, cfg, stdout)
    except BlockLocError as exc:
        print(_error_line(exc.code, str(exc)), file=stderr)
        return 2
    except (OSError, ValueError) as exc:
        code = "io_error" if isinstance(exc, OSError) else "invalid_value"
        print(_error_line(code, str(exc)), file=stderr)
        return 2
    except KeyboardInterrupt:
        print(_error_line("interrupted", "interrupted"), file=stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
