import numpy as np
import pytest

from artiflow import simenv
from artiflow.artkin import FlowField, PointCloudObs
from artiflow.policy import (NoActionableFlow, PolicyConfig, PolicyState, RolloutTrace,
                             angle_between, consistency_check, needs_switch, rollout,
                             select_grasp_point, update_after_execution)
from artiflow.synthgen import DoorSpec, make_door


def field(rows) -> FlowField:
    return FlowField(np.asarray(rows, dtype=float), source="predicted")


def rotated(v, deg, axis=(0, 0, 1.0)):
    from artiflow.artkin import rotation_about_axis
    return rotation_about_axis(np.asarray(axis, dtype=float), np.deg2rad(deg)) @ v


def dummy_obs(points) -> PointCloudObs:
    pts = np.asarray(points, dtype=float)
    return PointCloudObs(points=pts, link_ids=np.zeros(len(pts), dtype=int),
                         link_names=("panel",))


class TestSelectGraspPoint:
    def test_argmax(self):
        f = field([[0, 0, 0.5], [0, 0, 1.0]])
        assert select_grasp_point(f) == 1

    def test_tie_breaks_low_index(self):
        f = field([[0, 0, 0.7], [0, 0.7, 0], [0.7, 0, 0]])
        assert select_grasp_point(f) == 0

    def test_zero_field_rejected(self):
        with pytest.raises(NoActionableFlow):
            select_grasp_point(field(np.zeros((4, 3))))

    def test_matches_brute_force(self, rng):
        rows = rng.normal(size=(1000, 3))
        f = field(rows)
        norms = [float(np.linalg.norm(r)) for r in rows]
        assert select_grasp_point(f) == int(np.argmax(norms))


class TestNeedsSwitch:
    def test_gap_above_threshold(self):
        f = field([[0, 0, 1.0], [0, 0, 0.7]])
        assert needs_switch(f, 1, 0.2)

    def test_grasp_is_argmax(self):
        f = field([[0, 0, 1.0], [0, 0, 0.7]])
        assert not needs_switch(f, 0, 0.2)

    def test_boundary_is_strict(self):
        # norms 1.0 and 0.8: the float gap is just below 0.2 -> no switch
        f = field([[0, 0, 1.0], [0, 0, 0.8]])
        assert not needs_switch(f, 1, 0.2)
        f = field([[0, 0, 1.0], [0, 0, 0.8 - 1e-6]])
        assert needs_switch(f, 1, 0.2)

    def test_argmax_invariant_under_scaling(self, rng):
        rows = rng.normal(size=(50, 3))
        f1 = field(rows)
        f2 = field(rows * 7.3)
        assert select_grasp_point(f1) == select_grasp_point(f2)


class TestConsistencyCheck:
    def test_vacuous_without_history(self):
        assert consistency_check(np.array([1.0, 0, 0]), None, np.deg2rad(30))

    def test_exact_cone_boundary_rejected(self):
        g = np.array([1.0, 0.0, 0.0])
        f = np.array([np.cos(np.pi / 6), np.sin(np.pi / 6), 0.0])
        assert angle_between(f, g) == np.pi / 6  # atan2 form is exact here
        assert not consistency_check(f, g, np.deg2rad(30.0))

    def test_just_inside_cone_accepted(self):
        g = np.array([1.0, 0.0, 0.0])
        f = rotated(g, 30.0 - 1e-4)
        assert consistency_check(f, g, np.deg2rad(30.0))

    def test_45_degrees_rejected_at_30(self):
        g = np.array([1.0, 0.0, 0.0])
        assert not consistency_check(rotated(g, 45.0), g, np.deg2rad(30.0))

    def test_magnitude_free(self):
        g = np.array([0.2, 0.1, 0.0])
        assert consistency_check(2.0 * g, g, np.deg2rad(30.0))

    def test_zero_fmax_rejected(self):
        with pytest.raises(NoActionableFlow):
            consistency_check(np.zeros(3), np.array([1.0, 0, 0]), np.deg2rad(30))


class TestHistoryFilter:
    def setup_method(self):
        self.config = PolicyConfig()
        self.obs = dummy_obs(np.random.default_rng(0).normal(size=(8, 3)))
        self.flow = field(np.random.default_rng(1).normal(size=(8, 3)) * 0.1)

    def test_first_motion_seeds_both(self):
        state = PolicyState()
        new, updated = update_after_execution(state, np.array([0.05, 0, 0]),
                                              self.obs, self.flow, self.config)
        assert updated
        assert new.history is not None
        assert np.allclose(new.g_his, [0.05, 0, 0])

    def test_opposed_motion_updates_nothing(self):
        state = PolicyState(g_his=np.array([1.0, 0, 0]))
        new, updated = update_after_execution(state, np.array([-0.5, -0.01, 0]),
                                              self.obs, self.flow, self.config)
        assert not updated
        assert new.history is None
        assert np.allclose(new.g_his, [1.0, 0, 0])

    def test_exact_90_rejected(self):
        state = PolicyState(g_his=np.array([1.0, 0, 0]))
        new, updated = update_after_execution(state, np.array([0.0, 0.5, 0]),
                                              self.obs, self.flow, self.config)
        assert not updated and new.history is None

    def test_aligned_small_motion_updates_ghis_only(self):
        state = PolicyState(g_his=np.array([1.0, 0, 0]))
        g = np.array([0.005, 0.0, 0.0])  # below eps_m = 1e-2
        new, updated = update_after_execution(state, g, self.obs, self.flow, self.config)
        assert not updated
        assert new.history is None
        assert np.allclose(new.g_his, g)

    def test_aligned_large_motion_updates_both(self):
        state = PolicyState(g_his=np.array([1.0, 0, 0]))
        g = np.array([0.05, 0.0, 0.0])
        new, updated = update_after_execution(state, g, self.obs, self.flow, self.config)
        assert updated and new.history is not None

    def test_zero_motion_never_seeds(self):
        state = PolicyState()
        new, updated = update_after_execution(state, np.zeros(3), self.obs,
                                              self.flow, self.config)
        assert new.g_his is None and not updated

    def test_history_replaces_never_blends(self):
        state = PolicyState(g_his=np.array([1.0, 0, 0]))
        f1 = field(np.ones((8, 3)) * 0.1)
        s1, _ = update_after_execution(state, np.array([0.05, 0, 0]), self.obs,
                                       f1, self.config)
        f2 = field(np.ones((8, 3)) * 0.2)
        s2, _ = update_after_execution(s1, np.array([0.05, 0, 0]), self.obs,
                                       f2, self.config)
        assert np.allclose(s2.history.flow, 0.2)

    def test_overshooting_prediction_rescaled_into_history(self):
        state = PolicyState()
        hot = field(np.ones((8, 3)) * 1.4)  # raw norms > 1
        new, updated = update_after_execution(state, np.array([0.05, 0, 0]),
                                              self.obs, hot, self.config)
        assert updated
        assert np.linalg.norm(new.history.flow, axis=1).max() <= 1.0 + 1e-9


class ScriptedSampler:
    """Cycles through a fixed list of fields; counts draws."""

    def __init__(self, fields):
        self.fields = fields
        self.calls = 0

    def sample(self, obs, history, k=1):
        out = []
        for _ in range(k):
            out.append(self.fields[self.calls % len(self.fields)])
            self.calls += 1
        return out


class TestRollout:
    def test_already_open_returns_immediately(self):
        tree = make_door(DoorSpec())
        env = simenv.reset(tree, "hinge", 1.0)
        trace = rollout(env, simenv.OracleSampler(env), PolicyConfig(), n_points=64)
        assert trace.success and len(trace.steps) == 0

    def test_oracle_door_one_grasp(self):
        tree = make_door(DoorSpec())
        env = simenv.reset(tree, "hinge", 0.0)
        trace = rollout(env, simenv.OracleSampler(env), PolicyConfig(), n_points=128)
        assert trace.success
        assert trace.grasp_events == 1
        assert len(trace.steps) <= 30

    def test_adversarial_sampler_respects_cone(self):
        # two fields 180 degrees apart: after the first accepted motion every
        # executed direction must stay within eps_theta of g_his
        tree = make_door(DoorSpec(mode="push_left"))
        env = simenv.reset(tree, "hinge", 0.0)
        n = 64
        obs = simenv.observe(env, n)
        from artiflow.artkin import ground_truth_flow
        good = ground_truth_flow(tree, env.q, obs, "hinge")
        flipped = FlowField(-good.vectors, source="predicted")
        sampler = ScriptedSampler([flipped, good])  # always offers wrong first
        config = PolicyConfig()
        trace = rollout(env, sampler, config, n_points=n)
        directions = [s.executed_direction for s in trace.steps if s.contact_ok]
        g_his = None
        for s in trace.steps:
            if not s.contact_ok:
                continue
            if g_his is not None and not s.forced:
                assert angle_between(s.executed_direction, g_his) < config.eps_theta
            if np.linalg.norm(s.g_cur) > 0:
                g_his = s.g_cur
        assert trace.sampler_invocations == sum(s.trials_used for s in trace.steps)

    def test_trials_accounting(self):
        tree = make_door(DoorSpec())
        env = simenv.reset(tree, "hinge", 0.0)
        sampler = simenv.OracleSampler(env)
        trace = rollout(env, sampler, PolicyConfig(), n_points=64)
        assert trace.sampler_invocations == sum(s.trials_used for s in trace.steps)

    def test_trace_roundtrip(self, tmp_path):
        tree = make_door(DoorSpec())
        env = simenv.reset(tree, "hinge", 0.0)
        trace = rollout(env, simenv.OracleSampler(env), PolicyConfig(), n_points=64,
                        object_id="door_x", seed=5)
        path = tmp_path / "trace.jsonl"
        trace.to_jsonl(path)
        back = RolloutTrace.from_jsonl(path)
        assert back.object_id == "door_x"
        assert back.success == trace.success
        assert len(back.steps) == len(trace.steps)
        assert back.steps[0].trials_used == trace.steps[0].trials_used
        assert np.allclose(back.steps[-1].g_cur, trace.steps[-1].g_cur)

    def test_max_trials_forces_execution(self):
        tree = make_door(DoorSpec(mode="push_left"))
        env = simenv.reset(tree, "hinge", 0.0)
        n = 64
        obs = simenv.observe(env, n)
        from artiflow.artkin import ground_truth_flow
        good = ground_truth_flow(tree, env.q, obs, "hinge")
        flipped = FlowField(-good.vectors, source="predicted")

        class FirstGoodThenBad:
            def __init__(self):
                self.calls = 0

            def sample(self, obs, history, k=1):
                out = []
                for _ in range(k):
                    out.append(good if self.calls == 0 else flipped)
                    self.calls += 1
                return out

        config = PolicyConfig(max_trials_per_step=3, max_steps=3)
        trace = rollout(env, FirstGoodThenBad(), config, n_points=n)
        # step 1 executes the good sample and seeds g_his; later steps only see
        # the flipped field, exhaust the 3 trials, and are forced
        assert trace.steps[0].trials_used == 1 and not trace.steps[0].forced
        assert trace.steps[1].trials_used == 3 and trace.steps[1].forced


class TestPolicyConfigDefaults:
    def test_paper_thresholds(self):
        c = PolicyConfig()
        assert c.eps_l == 0.2
        assert c.eps_theta_deg == 30.0
        assert c.eps_c_deg == 90.0
        assert c.eps_m == 1e-2
        assert c.max_steps == 30

    def test_angle_bounds_validated(self):
        with pytest.raises(ValueError):
            PolicyConfig(eps_theta_deg=0.0)
        with pytest.raises(ValueError):
            PolicyConfig(eps_c_deg=180.0)
