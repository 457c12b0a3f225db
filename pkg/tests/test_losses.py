import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from evfield import losses as L
from evfield import rotations as rot
from evfield.kinematics import Camera, project
from evfield.losses import JointSet, LossWeights

from oracles import brute_similarity_sse, central_difference, geodesic_logm, rel_error


class TestOrientation:
    def test_identical(self, rng):
        q = rot.normalize(rng.normal(size=(3, 5, 4)))
        assert L.loss_ori(q, q) == pytest.approx(0.0, abs=1e-12)

    def test_quarter_turn(self):
        pred = np.tile(rot.IDENTITY, (1, 3, 1))
        gt = pred.copy()
        gt[0, 1] = rot.from_axis_angle([0, 0, 1], np.pi / 2)
        assert L.loss_ori(pred, gt) == pytest.approx(np.sqrt(2) * np.pi / 2, abs=1e-12)
        assert L.loss_ori(rot.to_matrix(pred), rot.to_matrix(gt)) == pytest.approx(
            geodesic_logm(np.eye(3), rot.to_matrix(gt[0, 1])), abs=1e-12)

    def test_nonnegative(self, rng):
        a, b = rot.normalize(rng.normal(size=(2, 100, 4)))
        assert np.all([L.loss_ori(x, y) >= 0 for x, y in zip(a, b)])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            L.loss_ori(np.zeros((2, 4)), np.zeros((3, 4)))

    def test_gradient_fd(self):
        rng = np.random.default_rng(1)
        p, g = rot.normalize(rng.normal(size=(2, 3, 4)))
        ref = central_difference(lambda v: L.loss_ori(rot.normalize(v.reshape(3, 4)), g), p.ravel())
        got = rot.normalize_backward(p, L.loss_ori_grad(p, g)).ravel()
        assert rel_error(got, ref) < 1e-6


class TestSquaredLosses:
    def test_three_four_five(self):
        assert L.loss_3d([[[3.0, 4.0, 0.0]]], [[[0.0, 0.0, 0.0]]]) == 25.0
        assert L.loss_t([[3.0, 4.0, 0.0]], [[0.0, 0.0, 0.0]]) == 25.0

    def test_identical(self, rng):
        x = rng.normal(size=(4, 6, 3))
        assert L.loss_3d(x, x) == 0.0

    def test_loop_oracle(self, rng):
        a, b = rng.normal(size=(2, 3, 4, 3))
        ref = sum((a[i, j, k] - b[i, j, k]) ** 2 for i in range(3) for j in range(4) for k in range(3))
        assert L.loss_3d(a, b) == pytest.approx(ref, rel=1e-12)

    def test_2d(self, rng):
        cam = Camera(100, 100, 50, 50, 100, 100)
        X = rng.normal(size=(2, 3, 3)) + [0, 0, 4]
        px = project(cam, X)
        assert L.loss_2d(X, px, cam) == 0.0
        assert L.loss_2d(X, px + [3.0, 4.0], cam) == pytest.approx(6 * 25.0)


class TestFlowLoss:
    def test_identical(self):
        assert L.loss_flow([[1.0, 2.0]], [[1.0, 2.0]]) == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal(self):
        assert L.loss_flow([[1.0, 0.0], [0.0, 2.0]], [[0.0, 3.0], [5.0, 0.0]]) == pytest.approx(2.0)

    def test_scalar_oracle(self, rng):
        a, b = rng.normal(size=(2, 30, 2))
        ref = sum(1 - (x @ y) / (np.hypot(*x) * np.hypot(*y)) for x, y in zip(a, b))
        assert L.loss_flow(a, b) == pytest.approx(ref, rel=1e-12)

    def test_zero_vectors_skipped(self):
        assert L.loss_flow([[0.0, 0.0], [1.0, 0.0]], [[1.0, 0.0], [-1.0, 0.0]]) == pytest.approx(2.0)
        with pytest.warns(RuntimeWarning):
            assert L.loss_flow([[0.0, 0.0]], [[1.0, 0.0]]) == 0.0

    def test_gradient_fd(self, rng):
        a, b = rng.normal(size=(2, 10, 2))
        ref = central_difference(lambda v: L.loss_flow(v.reshape(10, 2), b), a.ravel())
        assert rel_error(L.loss_flow_grad(a, b).ravel(), ref) < 1e-7


class TestTotal:
    def test_zero(self):
        assert L.total_loss({k: 0.0 for k in L.TERMS}, LossWeights()) == 0.0

    def test_unit_components_default_weights(self):
        w = LossWeights()
        z = np.ones(4)
        comps = {k: 1.0 for k in ("ori", "t", "j3d", "j2d", "flow", "c")}
        comps["z"] = L.prior(z)
        assert L.total_loss(comps, w) == pytest.approx(10 + 10 + 20 + 20 + 0.1 + 0.1 + w.z * 2.0, rel=1e-12)

    def test_linear(self, rng):
        w = LossWeights()
        a = {k: rng.uniform(0, 3) for k in L.TERMS}
        b = {k: rng.uniform(0, 3) for k in L.TERMS}
        s = {k: a[k] + 2 * b[k] for k in L.TERMS}
        assert L.total_loss(s, w) == pytest.approx(L.total_loss(a, w) + 2 * L.total_loss(b, w), rel=1e-12)

    def test_errors(self):
        with pytest.raises(KeyError):
            L.total_loss({"bogus": 1.0}, LossWeights())
        with pytest.raises(ValueError):
            L.total_loss({"t": np.nan}, LossWeights())
        with pytest.raises(ValueError):
            LossWeights(t=-1.0)

    def test_unsupervised(self):
        w = LossWeights().unsupervised()
        assert (w.ori, w.t, w.j3d, w.j2d) == (0, 0, 0, 0) and w.c == 0.1


def similarity(rng, X, s=1.3):
    R = Rotation.random(random_state=int(rng.integers(1 << 30))).as_matrix()
    return s * X @ R.T + rng.normal(size=3)


class TestMetrics:
    def test_identity(self, rng):
        X = rng.normal(size=(5, 6, 3))
        m = L.evaluate(X, X, head_len=0.1)
        assert m["mpjpe"] == 0.0 and m["pel_mpjpe"] == 0.0 and m["pa_mpjpe"] < 1e-9
        assert m["pckh"] == 1.0

    def test_mm_units(self):
        assert L.mpjpe([[[0.003, 0.004, 0.0]]], [[[0.0, 0.0, 0.0]]]) == pytest.approx(5.0)

    def test_similarity_invariance(self, rng):
        for _ in range(10):
            gt = rng.normal(size=(1, 8, 3))
            pred = similarity(rng, gt[0])[None]
            assert L.pa_mpjpe(pred, gt) < 1e-9
            assert L.mpjpe(pred, gt) > 0

    def test_alignment_vs_brute_force(self):
        rng = np.random.default_rng(12)
        gt = np.array([[0.0, 0, 0], [0.3, 0, 0], [0, 0.2, 0], [0, 0, 0.25]])
        pred = similarity(rng, gt + rng.normal(0, 0.02, gt.shape), s=0.8)
        ours = L.pa_frame_errors(pred[None], gt[None], squared=True)[0]
        ref = brute_similarity_sse(pred, gt)
        assert ours <= ref + 1e-12
        assert ours == pytest.approx(ref, rel=1e-6)

    def test_pa_not_above_pelvis_squared(self, rng):
        p, g = rng.normal(size=(2, 20, 6, 3))
        assert np.all(L.pa_frame_errors(p, g, squared=True) <= L.pel_frame_errors(p, g, squared=True) + 1e-12)

    def test_proper_rotation(self, rng):
        src = rng.normal(size=(6, 3))
        dst = src * [1, 1, -1]  # a reflection is not allowed
        s, R, t = L.similarity_align(src, dst)
        assert np.linalg.det(R) == pytest.approx(1.0)

    def test_collinear_fallback_warns(self):
        line = np.array([[[0.0, 0, 0], [1, 0, 0], [2, 0, 0]]])
        with pytest.warns(RuntimeWarning, match="degenerate"):
            L.pa_mpjpe(line + 0.01, line)

    def test_pckh(self):
        gt = np.zeros((1, 4, 3))
        pred = gt.copy()
        pred[0, :, 0] = [0.01, 0.04, 0.06, 0.2]
        assert L.pckh(pred, gt, 0.1) == 0.5
        with pytest.raises(ValueError):
            L.pckh(pred, gt, 0.0)

    def test_pckh_monotone_in_threshold(self, rng):
        p, g = rng.normal(size=(2, 4, 5, 3))
        vals = [L.pckh(p, g, 1.0, th) for th in np.linspace(0, 5, 20)]
        assert np.all(np.diff(vals) >= 0)
        assert 0.0 <= min(vals) and max(vals) <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            L.mpjpe(np.zeros((1, 2, 3)), np.zeros((1, 3, 3)))


class TestJointCsv:
    def test_round_trip(self, tmp_path, rng):
        js = JointSet(rng.normal(size=(3, 4, 3)), None, np.array([0.0, 0.01, 0.02]))
        L.write_joints_csv(js, tmp_path / "j.csv")
        back = L.read_joints_csv(tmp_path / "j.csv")
        np.testing.assert_array_equal(back.positions, js.positions)
        np.testing.assert_array_equal(back.times, js.times)

    def test_2d_round_trip(self, rng):
        js = JointSet(None, rng.normal(size=(2, 3, 2)))
        back = L.read_joints_csv(L.write_joints_csv(js))
        np.testing.assert_array_equal(back.pixels, js.pixels)

    def test_missing_pair(self):
        with pytest.raises(ValueError):
            L.read_joints_csv("frame,joint,x,y,z\n0,0,1,2,3\n1,1,1,2,3\n")

    def test_bad_header(self):
        with pytest.raises(ValueError):
            L.read_joints_csv("a,b,c\n1,2,3\n")

    def test_mismatched_arrays(self):
        with pytest.raises(ValueError):
            JointSet(np.zeros((2, 3, 3)), np.zeros((2, 4, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.2, 5.0))
def test_pa_invariant_to_similarity(seed, s):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(1, 5, 3))
    pred = rng.normal(size=(1, 5, 3))
    moved = similarity(rng, pred[0], s)[None]
    assert L.pa_mpjpe(moved, gt) == pytest.approx(L.pa_mpjpe(pred, gt), rel=1e-7, abs=1e-9)
