import csv
import math

import numpy as np
import pytest

from blockloc.errors import InsufficientOverlap
from blockloc.evaluation import (
    associate, ate_rmse, pose_errors, rpy_from_matrix, timing_stats, umeyama, write_error_csv,
)
from blockloc.geometry import PoseSE3, so3_exp
from blockloc.pipeline import read_timing_csv, write_timing_csv
from blockloc.tracker import FrameRecord

from conftest import random_pose


def traj(rng, n=10):
    return [(0.1 * i, random_pose(rng)) for i in range(n)]


def rz(a):
    return np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])


def ry(a):
    return np.array([[math.cos(a), 0, math.sin(a)], [0, 1, 0], [-math.sin(a), 0, math.cos(a)]])


def rx(a):
    return np.array([[1, 0, 0], [0, math.cos(a), -math.sin(a)], [0, math.sin(a), math.cos(a)]])


def test_identical_is_zero(rng):
    t = traj(rng)
    pair = associate(t, t)
    for mode in ("trans", "full"):
        assert ate_rmse(pair, mode) < 1e-12
        assert ate_rmse(pair, mode, align=False) < 1e-12


def test_constant_offset_without_alignment(rng):
    ref = traj(rng)
    est = [(t, PoseSE3(p.rotation, p.translation + [1.0, 0, 0])) for t, p in ref]
    pair = associate(est, ref)
    assert ate_rmse(pair, "trans", align=False) == 1.0
    assert ate_rmse(pair, "trans", align=True) < 1e-9


def test_direct_summation_oracle(rng):
    ref = traj(rng)
    est = [(t, p.retract(rng.normal(scale=0.1, size=6))) for t, p in ref]
    pair = associate(est, ref)
    # alignment from a closed-form Kabsch solve written out here
    A = np.array([p.translation for _, p in est])
    B = np.array([p.translation for _, p in ref])
    ca, cb = A.mean(0), B.mean(0)
    U, _, Vt = np.linalg.svd((A - ca).T @ (B - cb))
    D = np.diag([1, 1, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    t = cb - R @ ca
    sq_t, sq_f = 0.0, 0.0
    for (_, e), (_, r) in zip(est, ref):
        de = R @ e.translation + t - r.translation
        M = r.R.T @ R @ e.R
        ang = np.array([math.atan2(M[2, 1], M[2, 2]), -math.asin(M[2, 0]), math.atan2(M[1, 0], M[0, 0])])
        sq_t += de @ de
        sq_f += de @ de + ang @ ang
    assert ate_rmse(pair, "trans") == pytest.approx(math.sqrt(sq_t / len(est)), abs=1e-12)
    assert ate_rmse(pair, "full") == pytest.approx(math.sqrt(sq_f / len(est)), abs=1e-12)


def test_rigid_invariance(rng):
    ref = traj(rng)
    est = [(t, p.retract(rng.normal(scale=0.1, size=6))) for t, p in ref]
    G = random_pose(rng)
    a = associate(est, ref)
    b = associate([(t, G @ p) for t, p in est], [(t, G @ p) for t, p in ref])
    for mode in ("trans", "full"):
        assert ate_rmse(b, mode) == pytest.approx(ate_rmse(a, mode), abs=1e-9)


def test_full_equals_trans_when_rotations_agree(rng):
    ref = traj(rng)
    est = [(t, PoseSE3(p.rotation, p.translation + rng.normal(scale=0.2, size=3))) for t, p in ref]
    pair = associate(est, ref)
    assert ate_rmse(pair, "full", align=False) == pytest.approx(ate_rmse(pair, "trans", align=False), abs=1e-12)


def test_umeyama_recovers_transform(rng):
    src = rng.normal(size=(30, 3))
    G = random_pose(rng)
    T = umeyama(src, G.transform_points(src))
    assert np.allclose(T.matrix(), G.matrix(), atol=1e-9)


def test_rpy_convention():
    r, p, y = 0.1, -0.2, 0.3
    assert np.allclose(rpy_from_matrix(rz(y) @ ry(p) @ rx(r)), [r, p, y], atol=1e-12)


def test_association_window(rng):
    ref = traj(rng)
    est = [(t + 0.04, p) for t, p in ref] + [(5.0, ref[0][1])]
    pair = associate(est, ref)
    assert len(pair) == len(ref)
    sparse = [(10 * t, p) for t, p in ref]
    with pytest.raises(InsufficientOverlap):
        associate([(t + 0.06, p) for t, p in sparse], sparse)
    with pytest.raises(InsufficientOverlap):
        associate(ref[:1], ref)
    with pytest.raises(ValueError):
        ate_rmse(associate(ref, ref), "xyz")


def test_error_csv(tmp_path, rng):
    ref = traj(rng)
    est = [(t, p.retract(rng.normal(scale=0.1, size=6))) for t, p in ref]
    pair = associate(est, ref)
    errs = pose_errors(pair)
    path = tmp_path / "err.csv"
    write_error_csv(path, pair, errs)
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == ["stamp", "ex", "ey", "ez", "er", "ep", "eyaw"]
    assert float(rows[3]["eyaw"]) == errs[3, 5]


def test_timing_small_cases():
    s = timing_stats([{"update_ms": 10.0, "bm_id": 0, "switched": False}])
    assert s.mean_ms == 10 and s.p95_ms == 10
    rows = [{"update_ms": v, "bm_id": b, "switched": w} for v, b, w in ((10, 0, False), (20, 1, True), (30, 1, False))]
    s = timing_stats(rows)
    assert s.mean_ms == 20 and s.per_bm == {0: 10.0, 1: 25.0} and s.switches == 1
    with pytest.raises(ValueError):
        timing_stats([])


def test_timing_recomputation(tmp_path, rng):
    n = 5000
    recs = [FrameRecord(0.1 * i, PoseSE3.identity(), float(rng.gamma(2, 10)), int(rng.integers(1, 21)),
                        int(rng.integers(0, 6)), bool(rng.random() < 0.01), False, 1.0, None) for i in range(n)]
    path = tmp_path / "timing.csv"
    write_timing_csv(path, recs)
    s = timing_stats(read_timing_csv(path))
    # recompute from the text the way a spreadsheet would: sort, interpolate the 95th rank
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    vals = sorted(float(r["update_ms"]) for r in rows)
    rank = 0.95 * (n - 1)
    lo = int(math.floor(rank))
    p95 = vals[lo] + (rank - lo) * (vals[lo + 1] - vals[lo])
    assert s.mean_ms == pytest.approx(sum(vals) / n, rel=1e-12)
    assert s.p95_ms == pytest.approx(p95, rel=1e-12)
    groups = {}
    for r in rows:
        groups.setdefault(int(r["bm_id"]), []).append(float(r["update_ms"]))
    assert s.per_bm == pytest.approx({k: sum(v) / len(v) for k, v in groups.items()}, rel=1e-12)
    assert s.switches == sum(r["switched"] == "1" for r in rows)
