import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from evfield.estimators import EventEncoder, GlobalFlowEstimator, MotionFieldEstimator, VoxelTransformer
from evfield.fit import Supervision
from evfield.kinematics import Pose
from evfield.synth import MotionScript, generate
from evfield.voxel import voxelize

from conftest import random_stream


class TestVoxelTransformer:
    def test_matches_function(self, rng):
        s = random_stream(rng)
        out = VoxelTransformer(bins=3).fit_transform([s, s])
        assert out.shape == (2, 3, 24, 32)
        np.testing.assert_array_equal(out[0], voxelize(s, 3).values)

    def test_params_and_clone(self):
        est = VoxelTransformer(bins=5)
        assert clone(est).get_params()["bins"] == 5

    def test_not_fitted(self, rng):
        with pytest.raises(NotFittedError):
            VoxelTransformer().transform(random_stream(rng))

    def test_bad_bins(self, rng):
        with pytest.raises(ValueError):
            VoxelTransformer(bins=0).fit(random_stream(rng))

    def test_type_check(self):
        with pytest.raises(TypeError):
            VoxelTransformer().fit([np.zeros(3)])


class TestEventEncoder:
    def test_shapes_and_determinism(self, rng):
        seqs = [[rng.normal(size=(2, 8, 8)) for _ in range(3)] for _ in range(2)]
        enc = EventEncoder(patch_grid=2, hidden_dim=5, d_local=3, d_global=2, random_state=1)
        a = enc.fit_transform(seqs)
        b = clone(enc).fit_transform(seqs)
        assert a.shape == (2, 5)
        np.testing.assert_array_equal(a, b)

    def test_empty(self):
        with pytest.raises(ValueError):
            EventEncoder().fit([])


class TestGlobalFlowEstimator:
    def test_fit_and_score(self, bar_scene):
        est = GlobalFlowEstimator(n_windows=4).fit(bar_scene.events)
        np.testing.assert_allclose(est.flow_, [3.0, -2.0], atol=0.1)
        assert est.variance_after_ > est.variance_before_
        imgs = est.transform(bar_scene.events)
        assert imgs.shape == (4, 2, 180, 240)
        assert est.score(bar_scene.events) > 0


class TestMotionFieldEstimator:
    def test_supervised_fit_reduces_error(self, bar, cam):
        script = MotionScript(0.02, 1, root_start=(0, 0, 2.0), root_velocity=(0.5, 0, 0), camera=cam)
        out = generate(bar, cam, script)
        sup = Supervision.from_synth(out)
        est = MotionFieldEstimator(bar, cam, Pose.identity(1, (0, 0, 2.0)), mode="latent+gmp", lr=1e-2,
                                   max_iters=30, random_state=0)
        before = -MotionFieldEstimator(bar, cam, Pose.identity(1, (0, 0, 2.0)), max_iters=0).fit(
            None, sup).score(out.gt_times, out.gt_joints)
        est.fit(None, sup)
        after = -est.score(out.gt_times, out.gt_joints)
        assert after < before
        assert est.predict(out.gt_times).shape == out.gt_joints.shape

    def test_requires_model(self):
        with pytest.raises(ValueError):
            MotionFieldEstimator().fit(None, None)
