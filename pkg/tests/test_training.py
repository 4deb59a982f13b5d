from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dispa.autodiff import NonFiniteError
from dispa.pathways import ResponseTable
from dispa.training import (
    Adam,
    MetricsError,
    MetricsReport,
    RunConfig,
    SplitError,
    SplitSpec,
    TrainingError,
    checkpoint_path,
    evaluate,
    evaluate_predictions,
    make_split,
    metric_pcc,
    metric_rmse,
    metric_scc,
    predict_pairs,
    run_report,
    train,
)
from splitcases import all_mode_violations, fixed_test_stable, grid_table, random_size_errors, split_violations


def brute_pcc(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def brute_ranks(x):
    """Average 1-based ranks by counting, ties share the mean rank."""
    return [sum(b < a for b in x) + (sum(b == a for b in x) + 1) / 2 for a in x]


class TestSplits:
    def test_random_sizes_on_100(self):
        table = grid_table(10, 10)
        s = make_split(table, SplitSpec("random", seed=0))
        assert (len(s.train), len(s.val), len(s.test)) == (60, 20, 20)

    def test_all_modes_invariants(self):
        assert all_mode_violations(grid_table()) == []

    def test_random_within_one_pair(self):
        assert max(random_size_errors(grid_table())) <= 1

    def test_fixed_test(self):
        assert fixed_test_stable(grid_table())

    def test_explicit_disjoint_example(self):
        table = grid_table(4, 4)
        s = make_split(table, SplitSpec("disjoint", test_cells=("C000", "C001"), test_drugs=("D000", "D001")))
        test_pairs = {(table.cell_ids[i], table.drug_ids[i]) for i in s.test}
        assert test_pairs == {(c, d) for c in ("C000", "C001") for d in ("D000", "D001")}
        # The two remaining cells and drugs split 1/1 between train and val (3:1 rounds to 1:1 at n=2).
        assert len(s.train) + len(s.val) + len(s.test) + s.dropped == 16
        assert split_violations(table, s, "disjoint") == []

    def test_too_few_ids(self):
        with pytest.raises(SplitError, match="at least 5"):
            make_split(grid_table(4, 10), SplitSpec("cell_blind"))

    def test_unknown_mode_and_ratios(self):
        with pytest.raises(SplitError):
            SplitSpec("sideways")
        with pytest.raises(SplitError):
            SplitSpec(ratios=(1.0, 0.0, 1.0))

    def test_unknown_explicit_ids(self):
        with pytest.raises(SplitError, match="not in the response table"):
            make_split(grid_table(6, 6), SplitSpec("cell_blind", test_cells=("nope",)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(5, 12), st.integers(5, 12), st.sampled_from(["cell_blind", "drug_blind", "disjoint"]),
           st.integers(0, 10**6))
    def test_invariants_property(self, n_cells, n_drugs, mode, seed):
        table = grid_table(n_cells, n_drugs)
        assert split_violations(table, make_split(table, SplitSpec(mode, seed=seed)), mode) == []


class TestMetrics:
    def test_examples(self):
        assert metric_rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5), abs=1e-12)
        assert metric_pcc([1, 2, 3, 4], [3, 5, 7, 9]) == pytest.approx(1.0, abs=1e-12)
        assert metric_pcc([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-12)
        assert metric_scc([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-12)

    def test_brute_force_agreement(self):
        rng = np.random.default_rng(0)
        for k in range(100):
            n = int(rng.integers(2, 40))
            x = rng.normal(size=n)
            # Every third vector gets heavy ties to exercise average ranks.
            y = np.round(rng.normal(size=n), 0 if k % 3 == 0 else 6)
            if np.ptp(y) == 0:
                y[0] += 1.0
            assert abs(metric_rmse(x, y) - math.sqrt(sum((a - b) ** 2 for a, b in zip(x, y)) / n)) < 1e-12
            assert abs(metric_pcc(x, y) - brute_pcc(list(x), list(y))) < 1e-12
            assert abs(metric_scc(x, y) - brute_pcc(brute_ranks(list(x)), brute_ranks(list(y)))) < 1e-12

    def test_errors(self):
        with pytest.raises(MetricsError):
            metric_pcc([1, 1, 1], [1, 2, 3])
        with pytest.raises(MetricsError):
            metric_pcc([1.0], [2.0])
        with pytest.raises(MetricsError):
            metric_rmse([1, 2], [1, 2, 3])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=3, max_size=30), st.floats(0.1, 10), st.floats(-5, 5))
    def test_affine_invariance(self, xs, a, b):
        x = np.array(xs)
        y = np.cos(np.arange(len(x)))
        if np.ptp(x) < 1e-6:
            return
        assert metric_pcc(a * x + b, y) == pytest.approx(metric_pcc(x, y), abs=1e-9)
        assert -1.0 <= metric_pcc(x, y) <= 1.0

    def test_evaluate_identity_and_groups(self):
        table = grid_table(5, 4)
        ev = evaluate_predictions(table, table.ln_ic50.copy())
        assert ev.rmse == 0.0 and ev.pcc == pytest.approx(1.0) and ev.scc == pytest.approx(1.0)
        assert len(ev.per_drug) == 4 and len(ev.per_cell) == 5
        assert all(g.n == 5 for g in ev.per_drug)

    def test_group_with_single_pair_is_none(self):
        table = ResponseTable(["a", "b", "b"], ["x", "y", "y2"], np.array([1.0, 2.0, 3.0]))
        ev = evaluate_predictions(table, np.array([1.0, 2.5, 2.0]))
        assert {g.id: g.pcc for g in ev.per_drug} == {"x": None, "y": None, "y2": None}

    def test_report_std(self):
        rep = MetricsReport([{"rmse": 1.0, "pcc": 0.5, "scc": 0.4}])
        assert rep.std() is None
        rep.runs.append({"rmse": 3.0, "pcc": 0.7, "scc": 0.6})
        assert rep.mean()["rmse"] == 2.0
        assert rep.std()["rmse"] == pytest.approx(math.sqrt(2.0))


class TestAdam:
    def test_matches_hand_update(self):
        p = {"w": np.array([[1.0, -2.0]])}
        g = {"w": np.array([[0.5, 0.25]])}
        opt = Adam(lr=0.1)
        opt.step(p, g)
        # First step: m_hat = g, v_hat = g^2, so the move is lr * sign(g) up to eps.
        np.testing.assert_allclose(p["w"], [[1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 - 0.1 * 0.25 / (0.25 + 1e-8)]],
                                   atol=1e-15)
        opt.step(p, g)
        m = 0.9 * 0.1 * g["w"] + 0.1 * g["w"]
        v = 0.999 * 0.001 * g["w"] ** 2 + 0.001 * g["w"] ** 2
        step2 = 0.1 * (m / (1 - 0.9 ** 2)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
        assert np.allclose(p["w"], [[1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 - 0.1 * 0.25 / (0.25 + 1e-8)]] - step2)


class TestTrain:
    def test_loss_decreases_and_report(self, small_dataset):
        cfg = RunConfig(epochs=8, batch_size=16, d_a=8, learning_rate=3e-3, seed=1)
        res = train(small_dataset, cfg, SplitSpec("random", seed=1))
        assert res.history[-1]["train_loss"] < res.initial_train_loss
        ev = evaluate(res.params, res.model_config, small_dataset, res.split.test)
        report = run_report(cfg, SplitSpec("random", seed=1), res, {"test": ev})
        assert report["config_hash"] == res.model_config.config_hash()
        assert report["split"]["sizes"]["test"] == len(res.split.test)

    def test_determinism(self, small_dataset):
        cfg = RunConfig(epochs=3, batch_size=16, d_a=8, seed=4)
        a = train(small_dataset, cfg, SplitSpec("cell_blind", seed=2))
        b = train(small_dataset, cfg, SplitSpec("cell_blind", seed=2))
        assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
        assert a.history == b.history

    def test_early_stopping_keeps_best(self, small_dataset):
        cfg = RunConfig(epochs=30, batch_size=16, d_a=8, patience=2, learning_rate=0.05, seed=0)
        res = train(small_dataset, cfg, SplitSpec("random", seed=0))
        vals = [h["val_rmse"] for h in res.history]
        assert res.best_epoch == int(np.argmin(vals))
        assert len(res.history) - 1 <= max(res.best_epoch + 2, 1) or len(res.history) == 31
        pred, _ = predict_pairs(res.params, res.model_config, small_dataset, res.split.val)
        rmse = math.sqrt(np.mean((pred - small_dataset.responses.ln_ic50[res.split.val]) ** 2))
        assert rmse == pytest.approx(vals[res.best_epoch], abs=1e-12)

    def test_non_finite_becomes_training_error(self, small_dataset, monkeypatch):
        import dispa.training as tr

        def boom(*a, **k):
            raise NonFiniteError("exp produced inf")

        monkeypatch.setattr(tr.ad, "mse", boom)
        with pytest.raises(TrainingError, match="epoch 1, batch 0"):
            tr.train(small_dataset, RunConfig(epochs=1, d_a=4), SplitSpec("random"))

    def test_run_config_validation(self):
        with pytest.raises(ValueError):
            RunConfig(epochs=0)
        with pytest.raises(ValueError):
            RunConfig(lambda_init=1.5)

    def test_checkpoint_path(self, tmp_path):
        assert checkpoint_path(tmp_path, "m", "disjoint", 3) == tmp_path / "runs/m/disjoint/seed3/best.ckpt"
