"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are collected in ``RESULTS`` and echoed by the terminal-summary
hook in ``conftest.py``; running this file directly does the same.
"""

import io
import math
import time

import numpy as np
import pytest

from blockloc import cli, pipeline
from blockloc.deskew import RawScan
from blockloc.formats import (
    decode_bmap, decode_scan, encode_bmap, encode_scan, load_library, read_trajectory,
)
from blockloc.geometry import PoseSE3, pose_distance
from blockloc.global_init import (
    SearchWindow, angular_step_for, bbs_search, build_pyramid, build_pyramid_from_xy, exhaustive_search, prepare_scan,
)
from blockloc.map_builder import BlockMap, generate_block_maps
from blockloc.map_server import (
    ERROR, FETCH, QUERY, RESPONSE_BLOB, RESPONSE_META, Frame, LocalLibraryClient, decode_frame, error_frame,
    fetch_frame, meta_frame, query_frame, start_server,
)
from blockloc.pipeline import build_library, run_localization
from blockloc.sim import make_scenario, render_dataset

from oracles import dense_least_squares, fd_derivative_errors, linear_chain, random_ndt_problem
from test_map_builder import marching_input, members
from test_solver import sliding_window

RESULTS = {}


def record(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    return ok


# --- shared end-to-end run on corridor-loop (criteria 2, 5, 6, 8) ---


def call(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli.run([str(a) for a in argv], out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    data, maps = root / "data", root / "maps"
    captured = {}
    t0 = time.perf_counter()
    steps = {}

    code, _, err = call("simulate", "--scenario", "corridor-loop", "--seed", 7, "--out", data)
    assert code == 0, err
    code, _, err = call("build-maps", "--scans", data / "scans", "--poses", data / "poses.txt", "--out", maps)
    assert code == 0, err
    server, _ = start_server(maps)
    addr = "%s:%d" % server.server_address[:2]
    start = read_trajectory(data / "gt.txt")[0][1].translation

    real = pipeline.run_localization

    def keep(*a, **kw):
        captured["run"] = real(*a, **kw)
        return captured["run"]

    pipeline.run_localization = keep
    try:
        steps["localize"] = call(
            "localize", "--scans", data / "scans", "--imu", data / "imu.csv", "--server", addr,
            "--init", ",".join(repr(float(v)) for v in start), "--out", root / "est.txt", "--timing", root / "timing.csv",
        )
    finally:
        pipeline.run_localization = real
        server.shutdown()
        server.server_close()
    steps["eval"] = call("eval", "--est", root / "est.txt", "--gt", data / "gt.txt")
    elapsed = time.perf_counter() - t0
    return {
        "root": root, "data": data, "maps": maps, "steps": steps, "run": captured.get("run"),
        "elapsed": elapsed, "gt": read_trajectory(data / "gt.txt"),
    }


# --- 1 ---


def random_block_xy(rng, n_walls=14, extent=15.0, res=0.25):
    pts = []
    for _ in range(n_walls):
        a = rng.uniform(-extent, extent, 2)
        ang = rng.uniform(0, np.pi)
        length = rng.uniform(2, 10)
        s = np.arange(0, length, res / 2)
        pts.append(a + np.outer(s, [np.cos(ang), np.sin(ang)]))
    return np.vstack(pts)


def test_c01_bbs_matches_exhaustive():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    mismatches, largest = 0, 0
    for k in range(50):
        xy = random_block_xy(rng)
        pyr = build_pyramid_from_xy(xy, 0.25, int(rng.integers(2, 7)))
        th = rng.uniform(-np.pi, np.pi)
        c, s = np.cos(th), np.sin(th)
        origin = rng.uniform(-5, 5, 2)
        local = (xy[rng.choice(len(xy), 160, replace=False)] - origin) @ np.array([[c, -s], [s, c]])
        local += rng.normal(scale=0.05, size=local.shape)
        wx, wy, wt = (20, 20, 31) if k == 0 else (int(rng.integers(0, 21)), int(rng.integers(0, 21)), int(rng.integers(0, 32)))
        center = (origin[0] + rng.uniform(-2, 2), origin[1] + rng.uniform(-2, 2), th + rng.uniform(-0.3, 0.3))
        win = SearchWindow(center, 0.25 * wx, 0.25 * wy, 0.02 * wt, 0.25, 0.02)
        largest = max(largest, win.size)
        a = bbs_search(local, pyr, win, 0.0)
        b = exhaustive_search(local, pyr, win, 0.0)
        if not (abs(a.score - b.score) <= 1e-12 and a.index == b.index and a.pose == b.pose):
            mismatches += 1
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 60.0
    record(1, ok, f"{mismatches}/50 mismatches, largest window {largest} poses, {elapsed:.1f} s (< 60)")
    assert largest == 41 * 41 * 63
    assert mismatches == 0
    assert elapsed < 60.0


# --- 2 ---


def test_c02_bbs_pruning(e2e):
    lib = load_library(e2e["maps"])
    scan = decode_scan((e2e["data"] / "scans" / "000000.scn").read_bytes())
    start = e2e["gt"][0][1].translation
    client = LocalLibraryClient(lib)
    bm_id, _, _ = client.query(start)
    block = client.fetch(bm_id)
    pyr = build_pyramid(block, 0.25, 6)
    xy = prepare_scan(scan.points, 0.25)
    dth = angular_step_for(0.25, float(np.max(np.linalg.norm(xy, axis=1))))
    win = SearchWindow((start[0], start[1], 0.0), 20.0, 20.0, math.pi, 0.25, dth)
    cand = bbs_search(xy, pyr, win, 0.5)
    ratio = cand.nodes / win.size
    record(2, ratio <= 0.10, f"expanded {cand.nodes} of {win.size} nodes, ratio {ratio:.4f} (<= 0.10)")
    assert ratio <= 0.10


# --- 3 ---


def test_c03_marginalization_matches_batch():
    rng = np.random.default_rng(303)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(5, 21))
        window = int(rng.integers(2, n))
        spec = linear_chain(rng, n)
        kept = sliding_window(spec, n, window)
        ref = dense_least_squares(spec, n)
        worst = max(worst, max(float(np.max(np.abs(v - ref[k]))) for k, v in kept.items()))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and elapsed < 10.0
    record(3, ok, f"max deviation from batch {worst:.2e} (< 1e-9), {elapsed:.1f} s (< 10)")
    assert worst < 1e-9
    assert elapsed < 10.0


# --- 4 ---


def test_c04_ndt_derivatives():
    rng = np.random.default_rng(404)
    t0 = time.perf_counter()
    g_worst = h_worst = 0.0
    for _ in range(100):
        g, h = fd_derivative_errors(*random_ndt_problem(rng))
        g_worst, h_worst = max(g_worst, g), max(h_worst, h)
    elapsed = time.perf_counter() - t0
    ok = g_worst < 1e-5 and h_worst < 1e-3 and elapsed < 30.0
    record(4, ok, f"gradient {g_worst:.2e} (< 1e-5), Hessian {h_worst:.2e} (< 1e-3), {elapsed:.1f} s (< 30)")
    assert g_worst < 1e-5
    assert h_worst < 1e-3
    assert elapsed < 30.0


# --- 5 ---


def test_c05_end_to_end(e2e):
    loc_code, loc_out, loc_err = e2e["steps"]["localize"]
    ev_code, ev_out, ev_err = e2e["steps"]["eval"]
    n_blocks = len(load_library(e2e["maps"]))
    run = e2e["run"]
    rmse = float(ev_out.split()[1]) if ev_code == 0 else float("inf")
    switches = run.switches if run else 0
    lost = run is None or run.lost is not None
    ok = (
        loc_code == 0 and ev_code == 0 and rmse < 0.15 and not lost
        and n_blocks >= 4 and switches >= 3 and e2e["elapsed"] < 600
    )
    record(
        5, ok,
        f"RMSE {rmse:.4f} m (< 0.15), {n_blocks} blocks, {switches} switches, lost={lost}, "
        f"{e2e['elapsed']:.0f} s (< 600)",
    )
    assert loc_code == 0, loc_err
    assert ev_code == 0, ev_err
    assert not lost
    assert n_blocks >= 4 and switches >= 3
    assert rmse < 0.15
    assert e2e["elapsed"] < 600


# --- 6 ---


def keyframe_increment_errors(records, gt):
    """Translation error of each keyframe-to-keyframe increment, and whether that increment crosses a switch."""
    truth = {round(t, 6): p for t, p in gt}
    kf = [r for r in records if r.is_keyframe]
    errs, at_switch = [], []
    for a, b in zip(kf, kf[1:]):
        est = a.pose.inverse() @ b.pose
        ref = truth[round(a.stamp, 6)].inverse() @ truth[round(b.stamp, 6)]
        errs.append(pose_distance(est, ref)[0])
        at_switch.append(b.switched)
    return np.array(errs), np.array(at_switch)


def test_c06_switch_smoothness(e2e):
    run = e2e["run"]
    assert run is not None
    errs, at_switch = keyframe_increment_errors(run.records, e2e["gt"])
    med = float(np.median(errs))
    ratios = errs[at_switch] / med
    ok = len(ratios) > 0 and bool(np.all(ratios < 2.0))
    record(6, ok, f"{len(ratios)} switches, worst increment error {ratios.max():.2f}x median (< 2)")
    assert len(ratios) == run.switches
    assert np.all(ratios < 2.0)


# --- 7 ---


@pytest.fixture(scope="module")
def large_world():
    sc = make_scenario("corridor-loop-large")
    # every second sweep is plenty for the maps; the tracked stretch is the first 300
    mapping = render_dataset(sc, range(0, sc.n_frames, 2))
    lib = build_library(mapping.scans, mapping.offline, sc.size_S)
    track = render_dataset(sc, range(300))
    return sc, lib, track


def test_c07_block_vs_monolithic(large_world):
    sc, lib, ds = large_world
    client = LocalLibraryClient(lib)
    block = run_localization(ds.scans, ds.imu, client, sc.size_S, init_pose=ds.start_pose)
    mono = run_localization(ds.scans, ds.imu, client, sc.size_S, init_pose=ds.start_pose, monolithic=lib)
    b_ms = float(np.mean([r.update_ms for r in block.records[1:]]))
    m_ms = float(np.mean([r.update_ms for r in mono.records[1:]]))
    ratio = b_ms / m_ms
    ok = len(lib) >= 8 and ratio <= 0.7
    record(7, ok, f"{len(lib)} blocks, block {b_ms:.1f} ms vs monolithic {m_ms:.1f} ms, ratio {ratio:.2f} (<= 0.7)")
    assert len(lib) >= 8
    assert ratio <= 0.7


# --- 8 ---


def test_c08_window_policy(e2e):
    run = e2e["run"]
    assert run is not None
    recs = run.records
    sizes = [r.window_size for r in recs]
    after = [r.window_size for r in recs if r.switched]
    ok = len(recs) >= 1000 and max(sizes) <= 20 and len(after) > 0 and all(w == 5 for w in after)
    record(8, ok, f"{len(recs)} frames, max window {max(sizes)} (<= 20), after switches {after} (all 5)")
    assert len(recs) >= 1000
    assert max(sizes) <= 20
    assert after and all(w == 5 for w in after)


# --- 9 ---


def test_c09_hand_enacted_line():
    scans, poses = marching_input()
    S = 10.0
    lib = generate_block_maps(scans, poses, PoseSE3.identity(), S)
    got = {
        "count": len(lib),
        "members": [members(b) for b in lib.blocks],
        "decisions": [d[1] for d in lib.stats.decisions],
    }
    want = {
        "count": 4,
        "members": [list(range(0, 11)), list(range(12, 22)), list(range(23, 33)), [34]],
        "decisions": ["store"] * 4,
    }
    c = lib.centroids
    gaps = [np.linalg.norm(c[i] - c[j]) for i in range(len(c)) for j in range(i + 1, len(c))]
    ok = got == want and min(gaps) > 0.1 * S
    record(9, ok, f"{got['count']} blocks, decisions {got['decisions']}, min centroid gap {min(gaps):.1f} m (> {0.1 * S})")
    assert got == want
    assert min(gaps) > 0.1 * S


# --- 10 ---


def fuzz_frames(rng):
    kind = int(rng.integers(0, 5))
    if kind == 0:
        return query_frame(rng.normal(scale=10 ** rng.uniform(-3, 6), size=3))
    if kind == 1:
        return fetch_frame(int(rng.integers(0, 2**32)))
    if kind == 2:
        return meta_frame(int(rng.integers(0, 2**32)), rng.normal(scale=100, size=3), float(rng.uniform(0, 1e3)))
    if kind == 3:
        return error_frame(int(rng.integers(1, 4)), "".join(chr(int(c)) for c in rng.integers(32, 0x2FF, rng.integers(0, 40))))
    return Frame(int(rng.choice([QUERY, FETCH, RESPONSE_META, RESPONSE_BLOB, ERROR])), rng.bytes(int(rng.integers(0, 300))))


def test_c10_codec_round_trips():
    rng = np.random.default_rng(1010)
    bad = {"bmap": 0, "scan": 0, "frame": 0}
    for _ in range(1000):
        n = int(rng.integers(0, 400))
        block = BlockMap.from_points(int(rng.integers(0, 2**32)), rng.normal(scale=10 ** rng.uniform(-2, 4), size=(max(n, 1), 3)), float(rng.uniform(1, 100)))
        data = encode_bmap(block)
        if encode_bmap(decode_bmap(data)) != data:
            bad["bmap"] += 1

        t0 = float(rng.uniform(0, 2e9))
        scan = RawScan(t0, t0 + float(rng.uniform(1e-3, 1)), rng.normal(scale=50, size=(n, 3)), rng.uniform(0, 1, n))
        data = encode_scan(scan)
        if encode_scan(decode_scan(data)) != data:
            bad["scan"] += 1

        frame = fuzz_frames(rng)
        data = frame.encode()
        back, used = decode_frame(data)
        if back.encode() != data or used != len(data):
            bad["frame"] += 1
    ok = not any(bad.values())
    record(10, ok, f"1000 instances each, failures {bad}")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
