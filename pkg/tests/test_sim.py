import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cathnav import sim
from cathnav.sim import CatheterState, VesselMap


def brute_lumen_clearance(vmap, point):
    """Independent point-in-lumen check: loop over every centerline piece."""
    best = -math.inf
    px, py = float(point[0]), float(point[1])
    for pts, r in zip(vmap.centerlines, vmap.radii):
        dmin = math.inf
        for (ax, ay), (bx, by) in zip(pts[:-1], pts[1:]):
            dx, dy = bx - ax, by - ay
            L2 = dx * dx + dy * dy
            t = 0.0 if L2 == 0 else max(0.0, min(1.0, ((px - ax) * dx + (py - ay) * dy) / L2))
            qx, qy = ax + t * dx, ay + t * dy
            dmin = min(dmin, math.hypot(px - qx, py - qy))
        best = max(best, r - dmin)
    return best


@pytest.fixture(scope="module")
def phantom():
    return sim.build_phantom(seed=0, n_targets=9)


def straight_channel():
    line = np.stack([np.full(51, 50.0), np.linspace(100.0, 0.0, 51)], axis=1)
    return VesselMap([line], [8.0], [-1], line[0], [line[45]], [0], [90.0], world_size=100.0)


class TestPhantom:
    def test_nine_targets_on_centerlines(self, phantom):
        assert phantom.n_targets == 9
        for point in phantom.targets:
            assert brute_lumen_clearance(phantom, point) >= 0

    def test_connected_tree_rooted_at_entry(self, phantom):
        assert phantom.parents[0] == -1
        assert np.allclose(phantom.centerlines[0][0], phantom.entry_point)
        assert sum(p == -1 for p in phantom.parents) == 1
        for child, parent in enumerate(phantom.parents[1:], start=1):
            assert 0 <= parent < child
            assert np.allclose(phantom.centerlines[child][0], phantom.centerlines[parent][-1])
        reached = set()
        frontier = [0]
        while frontier:
            node = frontier.pop()
            reached.add(node)
            frontier.extend(phantom.branch_graph[node])
        assert reached == set(range(len(phantom.centerlines)))

    def test_targets_reachable(self, phantom):
        for seg in phantom.target_segments:
            route = phantom.route_to(seg)
            assert route[0] == 0 and route[-1] == seg

    def test_deterministic(self, phantom):
        again = sim.build_phantom(seed=0, n_targets=9)
        assert all(np.array_equal(a, b) for a, b in zip(phantom.centerlines, again.centerlines))
        assert np.array_equal(phantom.targets, again.targets)

    def test_seed_changes_geometry(self, phantom):
        other = sim.build_phantom(seed=1, n_targets=9)
        assert any(a.shape != b.shape or not np.array_equal(a, b)
                   for a, b in zip(phantom.centerlines, other.centerlines))

    def test_rejects_zero_targets(self):
        with pytest.raises(ValueError):
            sim.build_phantom(seed=0, n_targets=0)

    def test_single_target_is_trunk(self):
        m = sim.build_phantom(seed=3, n_targets=1)
        assert len(m.centerlines) == 1 and m.target_segments == [0]

    def test_inside_world(self, phantom):
        pts = np.concatenate(phantom.centerlines)
        assert pts.min() >= 0 and pts.max() <= phantom.world_size

    def test_json_round_trip(self, phantom, tmp_path):
        path = tmp_path / "phantom.json"
        phantom.save(path)
        back = VesselMap.load(path)
        assert all(np.array_equal(a, b) for a, b in zip(phantom.centerlines, back.centerlines))
        assert back.parents == phantom.parents
        assert np.array_equal(back.targets, phantom.targets)

    def test_rejects_unknown_format(self, phantom):
        d = phantom.to_dict()
        d["format_version"] = 99
        with pytest.raises(ValueError):
            VesselMap.from_dict(d)


class TestStep:
    def test_zero_action_is_identity(self, phantom):
        s = CatheterState(insertion=30.0, base_angle=0.2, knob_bend=-0.3)
        assert sim.step(s, (0, 0, 0), phantom, 0.1) == s

    def test_translation_increment(self, phantom):
        s = sim.step(CatheterState(insertion=5.0), (1, 0, 0), phantom, 0.1)
        assert s.insertion == pytest.approx(6.0, abs=1e-12)

    def test_rotation_and_knob_rates(self, phantom):
        s = sim.step(CatheterState(), (0, 1, -1), phantom, 0.1)
        assert s.base_angle == pytest.approx(0.05)
        assert s.knob_bend == pytest.approx(-0.1)

    def test_knob_saturates(self, phantom):
        s = sim.step(CatheterState(knob_bend=0.95), (0, 0, 1), phantom, 0.1)
        assert s.knob_bend == 1.0

    def test_insertion_never_negative(self, phantom):
        s = sim.step(CatheterState(insertion=0.3), (-1, 0, 0), phantom, 0.1)
        assert s.insertion == 0.0

    @pytest.mark.parametrize("bad", [(np.nan, 0, 0), (0, 1.5, 0), (0, 0, -2), (0, 0)])
    def test_rejects_bad_actions(self, phantom, bad):
        with pytest.raises(ValueError):
            sim.step(CatheterState(), bad, phantom, 0.1)

    def test_rejects_nonpositive_dt(self, phantom):
        with pytest.raises(ValueError):
            sim.step(CatheterState(), (1, 0, 0), phantom, 0.0)

    def test_leaf_end_is_a_wall(self):
        m = straight_channel()
        s = CatheterState(insertion=99.5)
        for _ in range(10):
            s = sim.step(s, (1, 0, 0), m, 0.1)
        assert s.insertion == pytest.approx(m.lengths[0])

    def test_random_rollout_stays_in_lumen(self, phantom):
        rng = np.random.default_rng(7)
        s = CatheterState()
        for _ in range(1000):
            a = rng.uniform(-1, 1, 3)
            a[0] = abs(a[0]) if rng.random() < 0.8 else -abs(a[0])
            s = sim.step(s, a, phantom, 0.1)
            assert s.insertion >= 0
            tip, _ = sim.tip_pose(s, phantom)
            assert brute_lumen_clearance(phantom, tip) >= -1e-9

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(*[st.floats(-1, 1)] * 3), min_size=1, max_size=60))
    def test_invariants_under_arbitrary_actions(self, actions):
        m = sim.build_phantom(seed=0)
        s = CatheterState(insertion=40.0)
        for a in actions:
            s = sim.step(s, a, m, 0.1)
            assert s.insertion >= 0 and -1 <= s.knob_bend <= 1
            assert m.in_lumen(sim.tip_pose(s, m)[0])
            assert s.insertion <= m.route_length(s.route) + 1e-9


class TestExpert:
    def test_terminal_at_target(self, phantom):
        route = phantom.route_to(phantom.target_segments[2])
        ins = phantom.route_starts(route)[-1] + phantom.target_offsets[2]
        s = CatheterState(insertion=ins, route=route)
        assert np.array_equal(sim.expert_policy(s, phantom, 2), np.zeros(3))

    def test_straight_channel(self):
        m = straight_channel()
        a = sim.expert_policy(CatheterState(insertion=10.0), m, 0)
        assert a[0] > 0 and abs(a[1]) < 0.05 and abs(a[2]) < 0.05

    def test_reaches_every_target(self, phantom):
        for target in range(phantom.n_targets):
            s = CatheterState()
            for n in range(5000):
                a = sim.expert_policy(s, phantom, target)
                if not a.any():
                    break
                s = sim.step(s, a, phantom, 0.1)
            tip, _ = sim.tip_pose(s, phantom)
            assert np.linalg.norm(tip - phantom.targets[target]) <= 5.0, target
            assert n < 5000

    def test_actions_in_range(self, phantom):
        rng = np.random.default_rng(0)
        for _ in range(200):
            route = phantom.route_to(int(rng.integers(len(phantom.centerlines))))
            s = CatheterState(rng.uniform(0, phantom.route_length(route)), rng.uniform(-1, 1),
                              rng.uniform(-1, 1), route)
            a = sim.expert_policy(s, phantom, int(rng.integers(9)))
            assert np.all(np.abs(a) <= 1)

    def test_unreachable_target_reported(self):
        line = np.stack([np.full(11, 50.0), np.linspace(100.0, 50.0, 11)], axis=1)
        island = line + [20.0, -40.0]
        m = VesselMap([line, island], [5.0, 5.0], [-1, -1], line[0], [island[5]], [1], [25.0],
                      world_size=100.0)
        with pytest.raises(sim.UnreachableTarget):
            sim.expert_policy(CatheterState(), m, 0)

    def test_bad_target_index(self, phantom):
        with pytest.raises(IndexError):
            sim.expert_policy(CatheterState(), phantom, 9)


class TestRender:
    def test_default_shape_and_range(self, phantom):
        img = sim.render(phantom, CatheterState(insertion=20.0))
        assert img.shape == (224, 224, 3) and img.dtype == np.uint8

    def test_deterministic(self, phantom):
        s = CatheterState(insertion=33.0, knob_bend=0.4)
        assert np.array_equal(sim.render(phantom, s, 64, 3), sim.render(phantom, s, 64, 3))

    def test_insertion_visible(self, phantom):
        a = sim.render(phantom, CatheterState(insertion=0.0))
        b = sim.render(phantom, CatheterState(insertion=50.0))
        assert (a != b).any()

    def test_target_dot_drawn(self, phantom):
        img = sim.render(phantom, CatheterState(), 224, target_id=4)
        x, y = np.round(phantom.targets[4] * 224 / phantom.world_size).astype(int)
        assert tuple(img[y, x]) == (220, 20, 20)

    def test_rejects_tiny_resolution(self, phantom):
        with pytest.raises(ValueError):
            sim.render(phantom, CatheterState(), 16)


class TestGenerateEpisode:
    def test_noiseless_is_deterministic(self, phantom):
        a = sim.generate_episode(phantom, 1, seed=5, noise_scale=0.0, resolution=32)
        b = sim.generate_episode(phantom, 1, seed=5, noise_scale=0.0, resolution=32)
        assert np.array_equal(a.states, b.states) and np.array_equal(a.frames, b.frames)

    def test_noise_changes_actions_not_outcome(self, phantom):
        clean = sim.generate_episode(phantom, 4, seed=1, noise_scale=0.0, resolution=32)
        noisy = sim.generate_episode(phantom, 4, seed=1, noise_scale=0.05, resolution=32)
        n = min(len(clean), len(noisy))
        assert not np.array_equal(clean.states[:n], noisy.states[:n])
        for ep in (clean, noisy):
            assert np.linalg.norm(ep.tip_poses[-1, :2] - phantom.targets[4]) <= 5.0

    def test_five_repetitions_of_nine_scenarios(self, phantom):
        episodes = [sim.generate_episode(phantom, t, seed=100 * t + r, noise_scale=0.05,
                                         resolution=32, repetition_id=r + 1)
                    for t in range(9) for r in range(5)]
        assert len(episodes) == 45
        assert {(e.scenario_id, e.repetition_id) for e in episodes} == {
            (s, r) for s in range(1, 10) for r in range(1, 6)}
        for ep in episodes:
            assert np.all(np.abs(ep.states) <= 1.0)
            assert np.all(ep.states[:, 0] >= 0)  # forward advancement only
            assert all(phantom.in_lumen(p[:2]) for p in ep.tip_poses[::7])

    def test_step_cap_rejects(self, phantom):
        kin = sim.Kinematics(max_steps=10)
        with pytest.raises(sim.EpisodeFailed):
            sim.generate_episode(phantom, 0, kin=kin, resolution=32)

    def test_negative_noise_rejected(self, phantom):
        with pytest.raises(ValueError):
            sim.generate_episode(phantom, 0, noise_scale=-0.1)
