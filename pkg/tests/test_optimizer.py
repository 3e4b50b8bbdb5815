import json

import numpy as np
import pytest

from jointprune.cost import ConstraintSpec
from jointprune.estimator import Schedule, schedule_value
from jointprune.net import SharedWeightStore, TrainSettings, desk_space, evaluate_error, make_dataset
from jointprune.optimizer import (
    OptimizerConfig,
    SharedNetEvaluator,
    TraceRecord,
    attach_evaluator,
    constrained_quadratic_optimum,
    linear_evaluator,
    quadratic_evaluator,
    read_trace,
    run,
)
from jointprune.rng import Stream


def small_net(seed=0):
    space = desk_space(widths=(6, 6, 6, 6), spatial_max=8)
    train, val = make_dataset(10, 12, 8, seed=0)
    store = SharedWeightStore.initialize(space, seed)
    constraint = ConstraintSpec("flops", 2000.0, 1.0, unit=1e3)
    return space, SharedNetEvaluator(store, train, val, constraint, eval_subset=16,
                                     train_settings=TrainSettings(batch_size=8))


def small_config(**kw):
    args = dict(outer_iterations=3, weight_iterations=2, samples=4, vector_updates_per_outer=2,
                sigma=Schedule(0.1, 0.05, 3), alpha=Schedule(0.01, 0.0, 3), seed=5)
    args.update(kw)
    return OptimizerConfig(**args)


class TestOptimizerConfig:
    def test_defaults(self):
        c = OptimizerConfig()
        assert (c.outer_iterations, c.weight_iterations, c.samples, c.vector_updates_per_outer) == (100, 200, 100, 20)
        assert c.sigma == Schedule(0.0125, 0.0025, 100)
        assert c.alpha == Schedule(0.05, 0.0, 100)

    @pytest.mark.parametrize("kw", [dict(outer_iterations=0), dict(samples=0), dict(vector_updates_per_outer=0),
                                    dict(weight_iterations=-1), dict(sigma_units="pixels"),
                                    dict(sigma=Schedule(0.1, 0.0, 10))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            OptimizerConfig(**kw)


class TestRunAnalytic:
    def test_noop_update(self):
        ev = linear_evaluator(np.arange(4.0))
        cfg = OptimizerConfig(outer_iterations=1, weight_iterations=1, samples=1, vector_updates_per_outer=1,
                              alpha=Schedule(0.0, 0.0, 1))
        mu0 = np.array([0.2, 0.4, 0.6, 0.8])
        result = run(cfg, ev, mu0)
        np.testing.assert_array_equal(result.mu, mu0)
        assert len(result.trace) == 1

    def test_schedule_conformance(self):
        cfg = OptimizerConfig(outer_iterations=7, samples=5, vector_updates_per_outer=1,
                              sigma=Schedule(0.3, 0.1, 7), alpha=Schedule(0.02, 0.0, 7))
        result = run(cfg, linear_evaluator(np.ones(3)), np.full(3, 0.5))
        for t, rec in enumerate(result.trace):
            assert rec.outer_step == t
            assert rec.sigma == schedule_value(cfg.sigma, t)
            assert rec.alpha == schedule_value(cfg.alpha, t)

    def test_moves_downhill(self):
        ev = linear_evaluator(np.array([1.0, -1.0]))
        cfg = OptimizerConfig(outer_iterations=5, samples=50, vector_updates_per_outer=3,
                              alpha=Schedule(0.01, 0.01, 5), sigma=Schedule(0.05, 0.05, 5),
                              baseline=True, seed=1)
        mu = run(cfg, ev, np.zeros(2)).mu
        assert mu[0] < 0 < mu[1]

    def test_k_bound_monotone_and_finite(self):
        ev = quadratic_evaluator(np.full(3, 0.5), ConstraintSpec("latency", 1.0, 1.0), np.ones(3))
        result = run(OptimizerConfig(outer_iterations=10, samples=20, vector_updates_per_outer=2), ev, np.ones(3))
        ks = [r.k_bound for r in result.trace]
        assert all(np.isfinite(ks))
        assert all(b >= a for a, b in zip(ks, ks[1:]))
        assert ks[-1] >= max(u["k_sample_bound"] for r in result.trace for u in r.updates)

    def test_absolute_sigma_needs_space(self):
        with pytest.raises(ValueError, match="space"):
            run(OptimizerConfig(sigma_units="absolute"), linear_evaluator(np.ones(2)), np.ones(2))

    def test_absolute_sigma_scaled_per_entry(self):
        _, ev = small_net()
        cfg = small_config(sigma_units="absolute", sigma=Schedule(2.0, 2.0, 3), outer_iterations=1,
                           weight_iterations=0)
        space = ev.space
        rec = run(cfg, ev, np.ones(space.dim), space).trace[0]
        assert rec.sigma == 2.0

    def test_reproducible(self):
        ev = quadratic_evaluator(np.full(3, 0.4), ConstraintSpec("latency", 1.0, 0.5), np.ones(3))
        a = run(OptimizerConfig(outer_iterations=5, samples=10, seed=3), ev, np.ones(3))
        b = run(OptimizerConfig(outer_iterations=5, samples=10, seed=3), ev, np.ones(3))
        assert [r.to_json() for r in a.trace] == [r.to_json() for r in b.trace]


class TestQuadraticOptimum:
    def test_stationary(self):
        c = ConstraintSpec("latency", 1.2, 3.0)
        v_star, w = np.array([0.8, 0.6, 0.9]), np.array([1.0, 0.5, 0.25])
        opt = constrained_quadratic_optimum(v_star, w, c)
        grad = 2 * (opt - v_star) + 2 * 3.0 * (w @ opt - 1.2) * w
        assert np.max(np.abs(grad)) < 1e-12

    def test_evaluator_exact(self):
        c = ConstraintSpec("latency", 1.0, 2.0)
        ev = attach_evaluator("quadratic", target_vector=[0.5, 0.5], constraint=c, cost_weights=[1.0, 1.0])
        s = ev.evaluate(np.array([1.0, 0.0]))
        assert s.error == 0.5 + 2.0 * 0.0
        assert s.cost == 1.0

    def test_linear_exact(self):
        ev = attach_evaluator("linear", a=[2.0, -1.0], offset=0.5)
        assert ev.evaluate(np.array([1.0, 3.0])).error == 2.0 - 3.0 + 0.5

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown"):
            attach_evaluator("gp")


class TestSharedNetRun:
    def test_evaluator_matches_composition(self):
        space, ev = small_net()
        ev.eval_subset = 10**6
        ev.begin_update(None)
        v = np.full(space.dim, 0.7)
        got = ev.evaluate_many([v])[0]
        want = evaluate_error(ev.store, v, ev.val_data, ev.constraint)
        assert (got.error, got.loss, got.cost) == (want.error, want.loss, want.cost)

    def test_threaded_matches_serial(self):
        space, ev = small_net()
        rng = np.random.default_rng(0)
        vs = list(rng.uniform(0.2, 1.0, (12, space.dim)))
        ev.begin_update(Stream(0))
        serial = ev.evaluate_many(vs)
        ev._losses = {}
        ev.workers = 4
        threaded = ev.evaluate_many(vs)
        assert [s.error for s in serial] == [s.error for s in threaded]

    def test_reproducible_traces(self, tmp_path):
        paths = []
        for k in range(2):
            space, ev = small_net()
            path = tmp_path / f"t{k}.jsonl"
            run(small_config(), ev, np.ones(space.dim), space, trace_path=str(path))
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_resume_equals_full_run(self, tmp_path):
        space, ev = small_net()
        full = tmp_path / "full.jsonl"
        run(small_config(), ev, np.ones(space.dim), space, trace_path=str(full))

        space, ev = small_net()
        part, ckpt = tmp_path / "part.jsonl", tmp_path / "ckpt"
        run(small_config(), ev, np.ones(space.dim), space, trace_path=str(part), checkpoint_dir=str(ckpt),
            stop_after=1)
        assert len(read_trace(str(part))[0]) == 1
        space, ev = small_net(seed=99)  # weights come from the checkpoint
        run(small_config(), ev, np.ones(space.dim), space, trace_path=str(part), checkpoint_dir=str(ckpt),
            resume=True)
        assert part.read_bytes() == full.read_bytes()

    def test_checkpoint_state(self, tmp_path):
        space, ev = small_net()
        run(small_config(), ev, np.ones(space.dim), space, checkpoint_dir=str(tmp_path))
        state = json.loads((tmp_path / "state.json").read_text())
        assert state["next_step"] == 3
        assert set(state["rng"]) == {"train", "noise", "subset"}
        assert (tmp_path / "store.bin").exists()

    def test_record_contents(self):
        space, ev = small_net()
        rec = run(small_config(outer_iterations=1, sigma=Schedule(0.1, 0.1, 1), alpha=Schedule(0.0, 0.0, 1)),
                  ev, np.ones(space.dim), space).trace[0]
        assert len(rec.updates) == 2
        assert all(len(u["samples"]) == 4 for u in rec.updates)
        assert rec.config["depth"] == 3
        assert rec.mu == [1.0] * space.dim


class TestTraceFile:
    def test_round_trip(self):
        rec = TraceRecord(0, [1.0], 0.1, 0.0, [], 0.0, 0.0, None, 1.0, 2.0, 3.0)
        assert TraceRecord.from_json(rec.to_json()) == rec

    def test_schema_version_checked(self):
        d = json.loads(TraceRecord(0, [1.0], 0.1, 0.0, [], 0.0, 0.0, None, 1.0, 2.0, 3.0).to_json())
        d["schema_version"] = 2
        with pytest.raises(ValueError, match="schema"):
            TraceRecord.from_json(json.dumps(d))

    def test_truncated(self, tmp_path):
        rec = TraceRecord(0, [1.0], 0.1, 0.0, [], 0.0, 0.0, None, 1.0, 2.0, 3.0).to_json()
        path = tmp_path / "t.jsonl"
        path.write_text(rec + "\n" + rec[: len(rec) // 2])
        records, clean = read_trace(str(path))
        assert len(records) == 1 and not clean
