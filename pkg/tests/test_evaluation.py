import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pressure_motion.evaluation import (
    CoPConfig, EvaluatorConfig, MetricReport, batched_r_precision, cop_distances, cop_error, cop_weights,
    embed_motions, embed_texts, evaluate_set, fid, foot_skating, format_table, joint_errors, motion_cop,
    r_precision, report_fields, skating_flags, train_evaluator, trajectory_error_ratio,
)
from pressure_motion.pressure import Calibration

heights = arrays(np.float64, st.tuples(st.integers(1, 5), st.just(22), st.just(3)),
                 elements=st.floats(-2, 2, allow_nan=False))


def _feet_at(xz, y=0.0, frames=1):
    j = np.zeros((frames, 22, 3))
    for k in (7, 8, 10, 11):
        j[:, k] = (xz[0], y, xz[1])
    return j


class TestCoP:
    @settings(max_examples=50)
    @given(heights)
    def test_weights_sum_to_one(self, joints):
        w = cop_weights(joints)
        assert np.all(w >= 0) and np.allclose(w.sum(1), 1, atol=1e-9)

    def test_lowest_joint_dominates(self):
        j = np.zeros((1, 22, 3))
        j[0, [7, 8, 10, 11], 1] = [0.0, 0.5, 0.5, 0.5]
        j[0, 7, 0] = 1.0
        assert motion_cop(j)[0, 0] == pytest.approx(1 / (1 + 3 * math.exp(-10)), abs=1e-12)

    def test_rigid_offset(self):
        # a single loaded pixel sitting d metres from the feet
        calib = Calibration((0.02, 0.02), (0.0, 0.0))
        p = np.zeros((3, 32, 32))
        p[:, 10, 10] = 5.0
        feet = _feet_at((0.2 + 0.3, 0.2 - 0.4), frames=3)
        assert cop_error(p, feet, calib) == pytest.approx(0.5, abs=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(1e-3, 1e3), st.integers(0, 1000))
    def test_scale_invariant(self, k, seed):
        rng = np.random.default_rng(seed)
        p = rng.random((4, 12, 12))
        j = rng.normal(size=(4, 22, 3))
        cal = Calibration((0.05, 0.05), (-0.3, -0.3))
        assert cop_error(p * k, j, cal) == pytest.approx(cop_error(p, j, cal), rel=1e-9)

    def test_no_contact(self):
        assert cop_error(np.zeros((2, 8, 8)), np.zeros((2, 22, 3)), Calibration()) is None

    def test_frame_mismatch(self):
        with pytest.raises(ValueError):
            cop_distances(np.ones((2, 8, 8)), np.zeros((3, 22, 3)), Calibration())

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            CoPConfig(tau=0.0)


class TestSkating:
    def test_static_contact_is_clean(self):
        assert foot_skating(np.zeros((5, 22, 3)), np.ones((5, 4))) == 0.0

    def test_sliding_foot_counted(self):
        j = np.zeros((4, 22, 3))
        j[:, 7, 0] = np.arange(4) * 0.01
        c = np.zeros((4, 4))
        c[:, 0] = 1
        # frames 0-2 move 1 cm, frame 3 repeats the last displacement
        assert foot_skating(j, c) == 1.0
        c[:, 1] = 1
        assert foot_skating(j, c) == 0.5

    def test_no_contact_defined_zero(self):
        assert foot_skating(np.random.default_rng(0).normal(size=(4, 22, 3)), np.zeros((4, 4))) == 0.0

    def test_contact_shape_checked(self):
        with pytest.raises(ValueError):
            skating_flags(np.zeros((4, 22, 3)), np.zeros((4, 3)))


class TestJointMetrics:
    def test_identical(self):
        j = np.random.default_rng(0).normal(size=(5, 22, 3))
        assert joint_errors(j, j) == (0.0, 0.0)
        assert trajectory_error_ratio([j], [j]) == 0.0

    def test_uniform_shift(self):
        j = np.zeros((5, 22, 3))
        mp, lmp = joint_errors(j + [0.0, 0.1, 0.0], j)
        assert mp == pytest.approx(0.1) and lmp == pytest.approx(0.1)

    def test_trajectory_threshold_strict(self):
        g = np.zeros((3, 22, 3))
        near, far = g.copy(), g.copy()
        near[2, 0, 0] = 0.5
        far[2, 0, 0] = 0.51
        assert trajectory_error_ratio([near, far], [g, g]) == 0.5

    def test_trajectory_ignores_height(self):
        g = np.zeros((3, 22, 3))
        p = g.copy()
        p[:, 0, 1] = 2.0
        assert trajectory_error_ratio([p], [g]) == 0.0


class TestFID:
    def test_self_distance(self):
        a = np.random.default_rng(0).normal(size=(64, 16))
        assert fid(a, a) < 1e-6

    def test_one_dimensional_case(self):
        # means 0 and 1, variances 1 and 4: 1 + 1 + 4 - 2 * 2
        a = np.array([[-1.0], [1.0]]) / math.sqrt(2)
        b = 1.0 + np.array([[-1.0], [1.0]]) * math.sqrt(2)
        assert fid(a, b) == pytest.approx(2.0, abs=1e-6)

    def test_matches_scipy_sqrtm(self):
        from scipy.linalg import sqrtm
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(40, 5)), rng.normal(size=(50, 5)) * 1.5 + 0.3
        ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
        want = np.sum((a.mean(0) - b.mean(0)) ** 2) + np.trace(ca + cb - 2 * sqrtm(ca @ cb).real)
        assert fid(a, b) == pytest.approx(want, abs=1e-4)

    def test_singular_covariance(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(10, 40))
        assert fid(a, a) < 1e-6
        assert abs(fid(a, a + 1.0) - 40.0) < 1e-3

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(30, 4)), rng.normal(size=(25, 4)) * 2
        assert fid(a, b) == pytest.approx(fid(b, a), rel=1e-8)

    def test_rejects_nan(self):
        a = np.zeros((4, 2))
        a[0, 0] = np.nan
        with pytest.raises(ValueError):
            fid(a, np.zeros((4, 2)))


class TestRPrecision:
    def test_perfect_pairs(self):
        e = np.eye(32)
        assert r_precision(e, e) == 1.0

    def test_null_rate(self):
        rng = np.random.default_rng(0)
        scores = [r_precision(rng.normal(size=(32, 16)), rng.normal(size=(32, 16))) for _ in range(300)]
        assert abs(np.mean(scores) - 3 / 32) < 0.01

    def test_batched_drops_tail(self):
        e = np.eye(70)
        assert batched_r_precision(e, e, batch=32) == 1.0
        with pytest.raises(ValueError):
            batched_r_precision(e[:10], e[:10])


class TestReport:
    def test_ratio_bounds(self):
        with pytest.raises(ValueError):
            MetricReport(foot_skating=1.2)
        with pytest.raises(ValueError):
            MetricReport(mpjpe_m=-0.1)

    def test_json_and_table(self):
        rep = MetricReport(fid=0.0, mpjpe_m=0.0, traj_error_ratio=0.0)
        d = json.loads(rep.to_json("GT"))
        assert d["method"] == "GT" and list(d)[1:] == report_fields()
        table = format_table({"GT": rep})
        assert table.splitlines()[0].split(" | ")[1].strip() == "FID"
        assert "0.0000" in table.splitlines()[2] and "-" in table.splitlines()[2]

    def test_gt_against_gt(self):
        rng = np.random.default_rng(0)
        joints = [rng.normal(size=(6, 22, 3)) for _ in range(3)]
        maps = [np.ones((6, 8, 8)) for _ in range(3)]
        rep = evaluate_set(joints, joints, maps, [Calibration()] * 3, [np.zeros((6, 4))] * 3)
        assert rep.mpjpe_m == 0.0 and rep.traj_error_ratio == 0.0 and rep.foot_skating == 0.0


def test_evaluator_separates_pairs():
    g = torch.Generator().manual_seed(0)
    poses = torch.randn(64, 10, 263, generator=g)
    text = torch.randn(64, 2, 512, generator=g)
    ev = train_evaluator(poses, text, EvaluatorConfig(steps=150, batch_size=32), seed=0)
    m, t = embed_motions(ev, poses), embed_texts(ev, text[:, 0])
    assert np.allclose(np.linalg.norm(m, axis=1), 1, atol=1e-5)
    assert batched_r_precision(m, t) > 0.5
    # the initial heading slot is ignored
    shifted = poses.clone()
    shifted[:, 0, 0] += 3.0
    assert np.allclose(embed_motions(ev, shifted), m, atol=1e-6)
