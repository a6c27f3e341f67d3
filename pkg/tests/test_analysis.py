import json
import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from promptcl.analysis import (SweepPoint, SweepResult, adaptation, emit_report, format_cell, forgetting, load_report,
                               mean_forgetting, mean_std, prompt_similarity, prune_pool, record_adaptation,
                               summary_table, sweep, sweep_trends, validate_grid, validation_stream)
from promptcl.engine import MethodConfig, StreamRunner, TrainConfig, run_stream

FAST = TrainConfig(epochs=1, batch_size=4, lr_head=1e-2, lr_prompt=1e-2)


def brute_psim(p):
    p = np.asarray(p, dtype=float)
    proto = p.mean(axis=0)
    return 100 * np.mean([v @ proto / np.linalg.norm(v) / np.linalg.norm(proto) for v in p])


class TestPromptSimilarity:
    def test_identical(self):
        assert prompt_similarity([[0.3, 1.0]] * 5).value == pytest.approx(100.0, abs=1e-12)

    def test_orthogonal_pair(self):
        assert abs(prompt_similarity([[1, 0], [0, 1]]).value - 70.71) <= 0.01

    def test_three(self):
        v = prompt_similarity([[1, 0], [1, 0], [0, 1]]).value
        assert abs(v - 74.54) <= 0.01
        assert abs(v - brute_psim([[1, 0], [1, 0], [0, 1]])) < 1e-12

    def test_zero_prototype(self):
        with pytest.warns(RuntimeWarning):
            r = prompt_similarity([[1.0, 0.0], [-1.0, 0.0]])
        assert r.value == 0.0 and r.zero_prototype

    def test_negative_flagged(self):
        with pytest.warns(RuntimeWarning):
            r = prompt_similarity([[10.0, 0.0], [-1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]])
        assert r.negative and r.value == pytest.approx(-50.0)

    def test_collinear_scaled(self):
        assert prompt_similarity([[1, 2], [2, 4], [0.5, 1]]).value == pytest.approx(100.0, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 5)), elements=st.floats(-5, 5)))
    def test_bounds_and_brute_force(self, p):
        if np.any(np.linalg.norm(p, axis=1) == 0) or np.linalg.norm(p.mean(axis=0)) < 1e-6:
            return
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            v = prompt_similarity(p).value
        assert -100 - 1e-9 <= v <= 100 + 1e-9
        assert abs(v - brute_psim(p)) < 1e-9


class TestAdaptationForgetting:
    def test_self_is_zero(self):
        a = [[0.5, None], [0.4, 0.7]]
        assert adaptation(a, a, 0) == 0.0 and adaptation(a, a, 1) == 0.0

    def test_example(self):
        assert adaptation([[0.9]], [[0.7]], 0) == pytest.approx(0.2)

    def test_forgetting_example(self):
        acc = [[0.8, None], [0.6, 0.9]]
        assert forgetting(acc, 0) == pytest.approx(0.2)
        assert forgetting(acc, 1) is None

    def test_single_task_absent(self):
        assert mean_forgetting([[0.9]]) is None

    def test_frozen_model(self):
        acc = [[0.5, None, None], [0.5, 0.6, None], [0.5, 0.6, 0.7]]
        assert mean_forgetting(acc) == 0.0

    def test_mismatched_streams(self, tiny_data, tiny_stream, tiny_backbone):
        from promptcl.data import split_stream

        a = run_stream(tiny_data, tiny_stream, tiny_backbone, MethodConfig(strategy="none"), FAST)
        b = run_stream(tiny_data, split_stream(tiny_data, 4, seed=5), tiny_backbone, MethodConfig(strategy="none"), FAST)
        with pytest.raises(ValueError):
            record_adaptation(a, b)

    def test_probe_vs_itself(self, tiny_data, tiny_stream, tiny_backbone):
        a = run_stream(tiny_data, tiny_stream, tiny_backbone, MethodConfig(strategy="none"), FAST)
        assert record_adaptation(a, a) == [0.0] * 4


class TestPrune:
    @pytest.fixture(scope="class")
    @staticmethod
    def trained( tiny_data, tiny_stream, tiny_backbone):
        runner = StreamRunner(tiny_data, tiny_stream, tiny_backbone, MethodConfig(strategy="pool", pool_size=10, top_n=3),
                              FAST)
        for t in range(4):
            runner.train_task(t)
        return runner

    def test_removes_floor_fraction(self, trained):
        r = prune_pool(trained, 0.3, seed=1)
        assert len(r.kept) == 7 and trained.prompt.pool_size == 10

    def test_tiny_fraction_keeps_accuracy(self, trained):
        r = prune_pool(trained, 0.05, seed=0)
        assert len(r.kept) == 10 and r.acc_after == r.acc_before

    def test_top_n_clipped(self, trained):
        r = prune_pool(trained, 0.9, seed=0)
        assert len(r.kept) == 1

    @pytest.mark.parametrize("frac", [0.0, 1.0, -0.1])
    def test_bad_fraction(self, trained, frac):
        with pytest.raises(ValueError):
            prune_pool(trained, frac)

    def test_needs_pool(self, tiny_data, tiny_stream, tiny_backbone):
        with pytest.raises(ValueError):
            prune_pool(StreamRunner(tiny_data, tiny_stream, tiny_backbone, MethodConfig(n_params=8), FAST), 0.3)


class TestSweep:
    def test_grid_rules(self):
        assert validate_grid([1, 10, 100]) == [1, 10, 100]
        for bad in ([1, 10], [1, 5, 5, 200], [1, 2, 3]):
            with pytest.raises(ValueError):
                validate_grid(bad)

    def test_small_sweep_deterministic(self, tiny_data, tiny_stream, tiny_backbone):
        a, recs = sweep(tiny_data, tiny_stream, tiny_backbone, [1, 16, 128], [0], train=FAST)
        b, _ = sweep(tiny_data, tiny_stream, tiny_backbone, [1, 16, 128], [0], train=FAST)
        assert a.to_csv() == b.to_csv()
        assert [p.n_params for p in a.series(0)] == [1, 16, 128]
        assert (0, 0) in recs and recs[(16, 0)].n_params_prompt == 16
        lines = a.to_csv().splitlines()
        assert lines[0] == "n_params,seed,final_acc,adaptation,forgetting,status,error" and len(lines) == 4

    def test_failed_point_recorded(self, tiny_data, tiny_stream, tiny_backbone, monkeypatch):
        import promptcl.engine as engine

        real = engine.run_stream

        def flaky(dataset, stream, backbone, method, train, **kw):
            if method.strategy == "only_prompt" and method.n_params == 16:
                raise FloatingPointError("diverged")
            return real(dataset, stream, backbone, method, train, **kw)

        monkeypatch.setattr(engine, "run_stream", flaky)
        res, recs = sweep(tiny_data, tiny_stream, tiny_backbone, [1, 16, 128], [0], train=FAST)
        status = {p.n_params: (p.status, p.error) for p in res.points}
        assert status[16] == ("failed", "FloatingPointError: diverged")
        assert status[1][0] == status[128][0] == "ok" and (16, 0) not in recs
        assert "failed,FloatingPointError: diverged" in res.to_csv()

    def test_invalid_config_raises_early(self, tiny_data, tiny_stream, tiny_backbone):
        from promptcl.errors import ConfigError

        with pytest.raises(ConfigError):
            sweep(tiny_data, tiny_stream, tiny_backbone, [1, 16, 128], [0], train=replace(FAST, tap_samples=0))

    def test_trends(self):
        pts = []
        for seed in range(2):
            for i, n in enumerate([10, 100, 1000, 10000]):
                pts.append(SweepPoint(n, seed, [0.5, 0.7, 0.6, 0.4][i], 0.1 * i, [0.1, 0.1, 0.2, 0.3][i]))
        tr = sweep_trends(SweepResult(pts))
        assert tr.adaptation_rho > 0.9 and tr.forgetting_rho_upper > 0.9
        assert tr.best_interior == 100 and tr.interior_margin == pytest.approx(20.0)


class TestValidation:
    def test_holdout_disjoint(self, tiny_stream):
        val = validation_stream(tiny_stream, 0.25, seed=0)
        for t in range(tiny_stream.n_tasks):
            tr, te = set(val.train_idx[t]), set(val.test_idx[t])
            assert not tr & te
            assert tr | te == set(tiny_stream.train_idx[t])


class TestReport:
    def test_mean_std(self):
        m, s = mean_std([0.8, 0.9, 1.0])
        assert m == pytest.approx(0.9) and s == pytest.approx(0.1)

    def test_cells(self):
        assert format_cell([0.865, 0.869, 0.873]) == "86.9 (±0.4)"
        assert format_cell([0.5]) == "50.0"

    def test_round_trip_and_columns(self, tiny_data, tiny_stream, tiny_backbone):
        recs = [run_stream(tiny_data, tiny_stream, tiny_backbone, MethodConfig(strategy="none"), FAST),
                run_stream(tiny_data, tiny_stream, tiny_backbone, MethodConfig(n_params=16), FAST)]
        csv_text, js = emit_report(recs)
        header = csv_text.splitlines()[0].split(",")
        assert header == ["run_id", "seed", "method", "n_params_prompt", "n_params_keys", "task_index", "global_acc",
                          "local_acc", "p_sim", "adaptation", "forgetting", "reg_kind", "lambda_reg"]
        assert len(csv_text.splitlines()) == 1 + 2 * 4
        back = load_report(js)
        assert [r.to_dict() for r in back] == [r.to_dict() for r in recs]
        assert json.loads(js)["content_hash"] == json.loads(emit_report(back)[1])["content_hash"]

    def test_single_record_has_no_std(self, tiny_data, tiny_stream, tiny_backbone):
        rec = run_stream(tiny_data, tiny_stream, tiny_backbone, MethodConfig(strategy="none"), FAST)
        row = summary_table([rec])[0]
        assert row["final_acc_std"] is None and "±" not in row["final_acc"]

    def test_schema_violation(self, tiny_data, tiny_stream, tiny_backbone):
        rec = run_stream(tiny_data, tiny_stream, tiny_backbone, MethodConfig(strategy="none"), FAST)
        bad = replace(rec, acc=[row[:] for row in rec.acc])
        bad.acc[0][1] = 0.5
        with pytest.raises(ValueError):
            emit_report([bad])
        bad2 = replace(rec, acc=[row[:] for row in rec.acc])
        bad2.acc[1][0] = 1.5
        with pytest.raises(ValueError):
            emit_report([bad2])
