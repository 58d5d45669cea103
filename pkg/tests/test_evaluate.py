import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cathnav import data, sim
from cathnav.encoder import StubEncoder
from cathnav.evaluate import (ablation_grid, compute_metrics, evaluate, false_goals, read_results,
                              write_results)
from cathnav.policy import CONDITIONS, CVAPolicy, LSTMBaseline, PolicyConfig
from cathnav.train import TrainConfig, WindowSet, predict, train

# MSE / RMSE pairs of every row of the published comparison table
PUBLISHED_ROWS = [
    (0.0179, 0.1338), (0.0091, 0.0955), (0.0094, 0.0970),
    (0.0160, 0.1264), (0.0085, 0.0922), (0.0115, 0.1075),
    (0.0116, 0.1078), (0.0050, 0.0708), (0.0187, 0.1367),
    (0.0125, 0.1120), (0.0050, 0.0708), (0.0133, 0.1154),
]

CFG = PolicyConfig(seq_len=8, num_tokens=5, dim=16, cross_heads=2, tf_layers=1, tf_heads=2,
                   ffn_dim=32, head_dims=(32, 16, 3))


@pytest.fixture(scope="module")
def corpus():
    m = sim.build_phantom(0)
    kin = sim.Kinematics(dt=0.25)
    return [sim.generate_episode(m, t, seed=t + 10 * r, noise_scale=0.05, resolution=32,
                                 repetition_id=r, kin=kin) for t in (0, 3, 6) for r in (1, 2)]


@pytest.fixture(scope="module")
def windows(corpus):
    stats = data.dataset_stats(corpus)
    return WindowSet(corpus, 8, stats, StubEncoder(dim=16, resolution=32), name="test")


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return CVAPolicy(CFG).eval()


class TestComputeMetrics:
    def test_perfect(self):
        y = np.random.default_rng(0).normal(size=(20, 3))
        rep = compute_metrics(y, y)
        for d in data.DIMENSIONS:
            assert rep.metrics[d]["mse"] == 0 and rep.metrics[d]["r2"] == 1.0

    def test_mean_prediction_zero_r2(self):
        y = np.random.default_rng(1).normal(size=(30, 3))
        rep = compute_metrics(np.tile(y.mean(0), (30, 1)), y)
        for d in data.DIMENSIONS:
            assert rep.metrics[d]["r2"] == pytest.approx(0.0, abs=1e-12)

    def test_hand_values(self):
        y = np.array([[0.0, 1.0, 2.0], [1.0, 3.0, 2.5], [2.0, 5.0, 3.0]])
        p = y + np.array([[0.5, 0, 0], [-0.5, 0, 0], [0.0, 0, 1.0]])
        rep = compute_metrics(p, y)
        t = rep.metrics["translation"]
        assert t["mse"] == pytest.approx(1 / 6) and t["mae"] == pytest.approx(1 / 3)
        assert t["r2"] == pytest.approx(1 - 0.5 / 2.0)
        assert rep.metrics["knob"]["r2"] == pytest.approx(1 - 1.0 / 0.5)

    def test_constant_target_flagged(self):
        y = np.ones((5, 3))
        rep = compute_metrics(y + 0.1, y)
        assert math.isnan(rep.metrics["rotation"]["r2"]) and not rep.metrics["rotation"]["r2_defined"]

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            compute_metrics(np.zeros((4, 3)), np.zeros((4, 2)))
        with pytest.raises(ValueError):
            compute_metrics(np.zeros((1, 3)), np.zeros((1, 3)))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (12, 3), elements=st.floats(-5, 5)),
           arrays(np.float64, (12, 3), elements=st.floats(-5, 5)))
    def test_report_invariants(self, p, y):
        rep = compute_metrics(p, y)
        for d in data.DIMENSIONS:
            m = rep.metrics[d]
            assert abs(m["rmse"] ** 2 - m["mse"]) <= 1e-9
            assert m["mae"] >= 0
            assert not m["r2_defined"] or m["r2"] <= 1.0 + 1e-12

    @pytest.mark.parametrize("mse,rmse", PUBLISHED_ROWS)
    def test_published_rows_consistent(self, mse, rmse):
        assert abs(math.sqrt(mse) - rmse) <= 5e-4


class TestEvaluate:
    def test_baseline_is_plain_prediction(self, model, windows):
        rep, pred, target = evaluate(model, windows, "baseline")
        p2, t2 = predict(model, windows)
        assert np.array_equal(pred, p2) and np.array_equal(target, t2)
        assert rep.metrics == compute_metrics(p2, t2).metrics

    def test_unknown_condition(self, model, windows):
        with pytest.raises(ValueError):
            evaluate(model, windows, "half_goal")

    def test_no_goal_invariant_to_goal(self, model, windows):
        other = {k: torch.randn_like(v) for k, v in windows.goals.items()}
        a, _ = predict(model, windows, "no_goal")
        b, _ = predict(model, windows, "no_goal", goals=other)
        c, _ = predict(model, windows, "baseline", goals=other)
        assert np.array_equal(a, b) and not np.array_equal(a, c)

    def test_no_vision_invariant_to_frames(self, model, windows, corpus):
        scrambled = WindowSet(corpus, 8, windows.stats, windows.encoder, name="test")
        scrambled.tokens = {k: torch.randn_like(v) for k, v in scrambled.tokens.items()}
        assert np.array_equal(predict(model, windows, "no_vision")[0],
                              predict(model, scrambled, "no_vision")[0])
        assert not np.array_equal(predict(model, windows)[0], predict(model, scrambled)[0])

    def test_no_states_invariant_to_states(self, model, windows, corpus):
        shifted = WindowSet(corpus, 8, windows.stats, windows.encoder, name="test")
        for w in shifted.samples:
            object.__setattr__(w, "states", w.states + 3.0)
        assert np.array_equal(predict(model, windows, "no_states")[0],
                              predict(model, shifted, "no_states")[0])

    def test_false_goal_from_other_scenario(self, windows, corpus):
        goals = false_goals(windows, corpus, seed=3)
        assert set(goals) == set(windows.episodes)
        owners = {eid: windows.episodes[eid].scenario_id for eid in windows.episodes}
        for eid, g in goals.items():
            donors = [d for d, v in windows.goals.items() if torch.equal(v, g)]
            assert donors and all(owners[d] != owners[eid] for d in donors)
        again = false_goals(windows, corpus, seed=3)
        assert all(torch.equal(goals[k], again[k]) for k in goals)

    def test_false_goal_falls_back_to_pool(self, corpus):
        single = [e for e in corpus if e.scenario_id == 1]
        ws = WindowSet(single, 8, data.dataset_stats(single), StubEncoder(dim=16, resolution=32))
        goals = false_goals(ws, corpus, seed=0)
        assert len(goals) == len(single)
        with pytest.raises(ValueError):
            false_goals(ws, single, seed=0)

    def test_ablation_grid(self, model, windows, corpus, tmp_path):
        reports = ablation_grid(model, windows, corpus, seed=0)
        assert [r.condition for r in reports] == list(CONDITIONS)
        jsonl, table = write_results(reports, tmp_path)
        rows = read_results(jsonl)
        assert len(rows) == 15
        assert {(r["condition"], r["dimension"]) for r in rows} == {
            (c, d) for c in CONDITIONS for d in data.DIMENSIONS}
        assert table.read_text().count("\n") == 16

    def test_retrain_mode_labelled(self, model, windows, corpus):
        torch.manual_seed(1)
        other = CVAPolicy(CFG).eval()
        reports = ablation_grid(model, windows, corpus, models={"no_goal": other})
        modes = {r.condition: r.mode for r in reports}
        assert modes["no_goal"] == "retrain" and modes["baseline"] == "zero_shot"

    def test_overfit_train_split(self, corpus):
        ws = WindowSet(corpus[:1], 8, data.dataset_stats(corpus), StubEncoder(dim=32, resolution=32))
        ws.samples = ws.samples[::10][:8]
        torch.manual_seed(0)
        model = CVAPolicy(PolicyConfig(**{**CFG.__dict__, "dim": 32, "dropout": 0.0}))
        cfg = TrainConfig(batch_size=8, max_epochs=200, lr=2e-3, lr_floor=2e-3, patience=200,
                          min_delta=0.0)
        train(model, ws, ws, cfg)
        rep, _, _ = evaluate(model, ws, "baseline")
        for d in data.DIMENSIONS:
            assert rep.metrics[d]["r2"] > 0.99, d

    def test_lstm_report_schema(self, corpus):
        ws = WindowSet(corpus, 8, data.dataset_stats(corpus), name="test")
        torch.manual_seed(0)
        rep, _, _ = evaluate(LSTMBaseline().eval(), ws, "baseline", model_name="lstm")
        assert rep.model == "lstm" and len(rep.records()) == 3
        with pytest.raises(ValueError):
            evaluate(LSTMBaseline(), ws, "false_goal")
