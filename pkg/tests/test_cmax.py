import numpy as np
import pytest

from evfield import cmax
from evfield.events import EventStream
from evfield.kinematics import Pose, project
from evfield.optim import Adam
from evfield.synth import bar_script, generate
from evfield.voxel import accumulate

from conftest import random_stream
from oracles import central_difference, nearest_anchor_brute, variance_two_pass


def static_source(pose):
    return lambda times: Pose(np.broadcast_to(pose.local, (len(times),) + pose.local.shape).copy(),
                              np.broadcast_to(pose.root_rot, (len(times), 4)).copy(),
                              np.broadcast_to(pose.root_t, (len(times), 3)).copy())


def translating_source(t0, v):
    t0, v = np.asarray(t0, float), np.asarray(v, float)
    return lambda times: Pose.identity(1, t0) if False else Pose(
        np.tile([1.0, 0, 0, 0], (len(times), 1, 1)), np.tile([1.0, 0, 0, 0], (len(times), 1)),
        t0 + np.asarray(times)[:, None] * v)


class TestVertexFlow:
    def test_static_is_zero(self, bar, cam):
        f = cmax.vertex_flow(bar, cam, static_source(Pose.identity(1, (0, 0, 2.0))), 0.0, 0.01)
        assert f.visible.any()
        np.testing.assert_array_equal(f.flow, 0.0)

    def test_translation_matches_projection(self, bar, cam):
        v, dt, Z = 0.5, 0.01, 2.0
        src = translating_source((0, 0, Z), (v, 0, 0))
        f = cmax.vertex_flow(bar, cam, src, 0.0, dt)
        V0 = bar.vertices + [0, 0, Z]
        expect = project(cam, V0 + [v * dt, 0, 0]) - project(cam, V0)
        np.testing.assert_allclose(f.flow[f.visible], expect[f.visible], atol=1e-9)
        # planar bar at constant depth: every vertex moves fx v dt / Z
        np.testing.assert_allclose(f.flow[f.visible], [[cam.fx * v * dt / Z, 0.0]] * f.visible.sum(), atol=1e-9)
        np.testing.assert_allclose(f.anchors, project(cam, V0), atol=1e-12)

    def test_masked_vertices_zero(self, bar, cam):
        src = translating_source((0, 0, 2.0), (0.5, 0, 0))
        vis = np.zeros(bar.n_vertices, bool)
        vis[:5] = True
        f = cmax.vertex_flow(bar, cam, src, 0.0, 0.01, visible=vis)
        assert not f.flow[5:].any() and np.abs(f.flow[:5, 0]).min() > 0

    def test_behind_camera_masked(self, bar, cam):
        f = cmax.vertex_flow(bar, cam, static_source(Pose.identity(1, (0, 0, -1.0))), 0.0, 0.01)
        assert not f.visible.any()

    def test_time_order(self, bar, cam):
        with pytest.raises(ValueError):
            cmax.vertex_flow(bar, cam, static_source(Pose.identity(1, (0, 0, 2.0))), 0.02, 0.01)


def samples(anchors, flow, visible=None, t_i=0.0, t_j=0.01):
    anchors = np.asarray(anchors, float)
    visible = np.ones(len(anchors), bool) if visible is None else np.asarray(visible)
    return cmax.FlowSamples(np.asarray(flow, float), visible, anchors, t_i, t_j)


class TestAssociation:
    def test_full_window_scale(self):
        s = samples([[5.0, 5.0]], [[2.0, -1.0]])
        ev = EventStream([0], [5], [5], [1], 16, 16, 0, 10_000)
        d = cmax.flow_to_events(s, ev, t_ref_us=10_000)
        # forward warp by the full vertex flow: x' = x - d = x + flow
        np.testing.assert_allclose(d, [[-2.0, 1.0]])

    def test_event_at_reference_time(self):
        s = samples([[5.0, 5.0]], [[2.0, -1.0]])
        ev = EventStream([10_000], [5], [5], [1], 16, 16, 0, 10_001)
        np.testing.assert_array_equal(cmax.flow_to_events(s, ev, t_ref_us=10_000), [[0.0, 0.0]])

    def test_out_of_radius(self):
        s = samples([[0.0, 0.0]], [[2.0, 0.0]])
        ev = EventStream([0], [10], [0], [1], 16, 16, 0, 10_000)
        np.testing.assert_array_equal(cmax.flow_to_events(s, ev, radius=8.0), [[0.0, 0.0]])

    def test_empty_flow_warns(self, caplog):
        s = samples([[1.0, 1.0]], [[0.0, 0.0]], visible=[False])
        ev = EventStream([0], [1], [1], [1], 4, 4, 0, 100)
        np.testing.assert_array_equal(cmax.flow_to_events(s, ev), [[0.0, 0.0]])
        assert "no visible" in caplog.text

    def test_matches_brute_force(self):
        rng = np.random.default_rng(21)
        for _ in range(5):
            anchors = rng.uniform(0, 40, (60, 2))
            vis = rng.random(60) < 0.7
            s = samples(anchors, rng.normal(size=(60, 2)), vis)
            ev = random_stream(rng, n=300, width=40, height=40)
            got = cmax.associate(s, ev, radius=6.0).vertex
            ref = nearest_anchor_brute(anchors, vis, np.stack([ev.x, ev.y], 1).astype(float), 6.0)
            pts = np.stack([ev.x, ev.y], 1).astype(float)
            for g, r, p in zip(got, ref, pts):
                if g != r:  # equidistant ties may resolve either way
                    assert g >= 0 and r >= 0
                    assert np.linalg.norm(anchors[g] - p) == pytest.approx(np.linalg.norm(anchors[r] - p))


class TestVariance:
    def test_uniform(self):
        assert cmax.image_variance(np.full((3, 4), 2.5)) == 0.0

    def test_two_by_two(self):
        assert cmax.image_variance([[4.0, 0.0], [0.0, 0.0]]) == 3.0

    def test_two_pass_oracle(self, rng):
        for _ in range(10):
            img = rng.exponential(size=(13, 17))
            assert cmax.image_variance(img) == pytest.approx(variance_two_pass(img), rel=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            cmax.image_variance(np.zeros((0, 3)))

    def test_report(self, rng):
        ev = random_stream(rng)
        rep = cmax.iwe_variance_report(cmax.warp(ev, np.zeros((len(ev), 2))))
        assert rep["objective"] == pytest.approx(rep["pos"] + rep["neg"])
        img = accumulate(ev)
        assert rep["combined"] == pytest.approx(variance_two_pass(img.pos + img.neg))

    def test_zero_flow_is_histogram(self, rng):
        ev = random_stream(rng)
        iwe = cmax.warp(ev, np.zeros((len(ev), 2)))
        hist = np.zeros((24, 32))
        np.add.at(hist, (ev.y[ev.p > 0], ev.x[ev.p > 0]), 1.0)
        np.testing.assert_array_equal(iwe.image.pos, hist)


def global_problem(events, n=1):
    return cmax.global_flow_problem(events, n)


class TestObjective:
    def test_order_invariant(self, bar_scene):
        ev = bar_scene.events
        # shuffle within runs of equal timestamps so the stream stays sorted
        perm = np.lexsort((np.random.default_rng(0).random(len(ev)), ev.t))
        shuffled = EventStream(ev.t[perm], ev.x[perm], ev.y[perm], ev.p[perm], ev.width, ev.height,
                               ev.t_start, ev.t_end)
        theta = np.array([2.0, -1.5])
        assert global_problem(ev).objective(theta) == pytest.approx(global_problem(shuffled).objective(theta),
                                                                    rel=1e-12)

    def test_duplicate_stream_quadruples(self, bar_scene):
        ev = bar_scene.events
        theta = np.array([5.0, -3.0])
        idx = np.repeat(np.arange(len(ev)), 2)
        twice = EventStream(ev.t[idx], ev.x[idx], ev.y[idx], ev.p[idx], ev.width, ev.height, ev.t_start, ev.t_end)
        assert global_problem(twice).objective(theta) == pytest.approx(4 * global_problem(ev).objective(theta),
                                                                       rel=1e-12)

    def test_no_events(self):
        ev = EventStream.empty(8, 8)
        with pytest.raises(ValueError):
            global_problem(ev)

    def test_deterministic(self, bar_scene):
        p = global_problem(bar_scene.events, 4)
        assert p.objective([1.0, 1.0]) == p.objective([1.0, 1.0])

    @pytest.mark.parametrize("seed", range(20))
    def test_true_flow_beats_zero(self, bar, cam, seed):
        rng = np.random.default_rng(seed)
        angle = rng.uniform(0, 2 * np.pi)
        mag = rng.uniform(2.0, 5.0)
        flow = (mag * np.cos(angle), mag * np.sin(angle))
        scene = generate(bar, cam, bar_script(flow, 2, 0.01, 2.0, cam, seed=seed), samples_per_edge=16)
        p = global_problem(scene.events)
        # displacement over the whole span is forward flow times window count
        assert p.objective(np.array(flow) * 2) < p.objective(np.zeros(2))


class TestGradient:
    def test_static_scene_zero_gradient(self, bar, cam):
        src = static_source(Pose.identity(1, (0, 0, 2.0)))
        ev = random_stream(np.random.default_rng(0), n=100, width=cam.width, height=cam.height)
        flow = cmax.vertex_flow(bar, cam, src, 0.0, 0.01)
        win = cmax.ContrastWindow(ev, 0.0, 0.01, cmax.associate(flow, ev))
        # parameters scale a motion that is identically zero
        p = cmax.ContrastProblem([win], lambda th: (flow.flow * th[0])[None])
        _, g = p.gradient(np.array([1.0]))
        np.testing.assert_array_equal(g, 0.0)

    def test_one_parameter_model_vs_fd(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            ev = random_stream(rng, n=400, width=24, height=20)
            win = cmax.ContrastWindow(ev, 0.0, 0.01, cmax.Association(np.zeros(len(ev), np.int64),
                                                                      rng.uniform(0, 1, len(ev))))
            p = cmax.ContrastProblem([win], lambda th: np.array([[[th[0], 0.0]]]))
            theta = np.array([rng.uniform(-3, 3)])
            _, g = p.gradient(theta)
            ref = central_difference(p.objective, theta, h=1e-6)
            assert abs(g[0] - ref[0]) / max(abs(ref[0]), 1e-12) < 1e-4

    def test_vertex_flow_model_vs_fd(self):
        rng = np.random.default_rng(4)
        anchors = rng.uniform(0, 30, (20, 2))
        ev = random_stream(rng, n=300, width=30, height=30)
        base = rng.normal(size=(20, 2))
        s = samples(anchors, base)
        assoc = cmax.associate(s, ev, radius=10.0)
        win = cmax.ContrastWindow(ev, 0.0, 0.01, assoc)
        p = cmax.ContrastProblem([win], lambda th: (base * th[0] + th[1:3])[None])
        theta = np.array([1.3, 0.4, -0.7])
        _, g = p.gradient(theta)
        ref = central_difference(p.objective, theta, h=1e-6)
        assert np.abs(g - ref).max() / np.abs(ref).max() < 1e-4

    def test_parameter_cap(self, bar_scene):
        win = global_problem(bar_scene.events).windows
        p = cmax.ContrastProblem(win, lambda th: np.zeros((1, 1, 2)))
        with pytest.raises(ValueError, match="cap"):
            p.gradient(np.zeros(cmax.MAX_PARAMS + 1))

    def test_ascent_monotone_from_zero(self, bar_scene):
        # zero displacement puts every event on the pixel lattice, a kink where
        # any first move blurs the splat; ascent is monotone from there on
        p = global_problem(bar_scene.events)
        theta = np.zeros(2)
        opt = Adam([theta], lr=0.1)
        values = []
        for _ in range(50):
            val, g = p.gradient(theta)
            values.append(val)
            opt.step([g])
        values.append(p.objective(theta))
        assert np.all(np.diff(values[1:]) < 0)
        assert values[-1] < values[0]


class TestGlobalFlow:
    def test_recovers_bar_flow(self, bar_scene):
        res = cmax.fit_global_flow(bar_scene.events, 4)
        np.testing.assert_allclose(res.flow, [3.0, -2.0], atol=0.1)
        assert res.variance_after > res.variance_before

    def test_split_windows(self):
        assert cmax.split_windows(None, 0, 100, 4) == [(0, 25), (25, 50), (50, 75), (75, 100)]
        with pytest.raises(ValueError):
            cmax.split_windows(None, 0, 0, 1)
