import json
from pathlib import Path

import numpy as np
import pytest

from rdlab.services import training_service
from rdlab.services.codec_service import encode_eval, encode_train
from rdlab.services.training_service import (
    METRIC_COLUMNS,
    RunDirectory,
    TrainingRun,
    apply_overrides,
    grid_jobs,
    list_runs,
    load_config,
    load_models,
    plan_grid,
    read_metrics_csv,
    run_hash,
    seed_streams,
    train_grid,
    train_one,
)
from rdlab.utils.common import ConfigError, InvalidArgument, TrainingDiverged
from tests.conftest import make_config


def metrics_bytes(runs_dir, record):
    return (RunDirectory(runs_dir, record.run_hash).path / "metrics.csv").read_bytes()


class TestConfig:
    def test_shorthand_overrides_replace_grid_lists(self):
        document = apply_overrides({"alphas": [0.0, 1.0]}, ["alpha=0", "lambda=[0.01,0.02]", "source.dim=6"])
        assert document["alphas"] == [0]
        assert document["lambdas"] == [0.01, 0.02]
        assert document["source"] == {"dim": 6}

    def test_override_without_value(self):
        with pytest.raises(ConfigError):
            apply_overrides({}, ["steps"])

    def test_unknown_key_is_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, ["learning_rate=0.1"])

    def test_nonpositive_lambda_is_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, ["lambda=0"])

    def test_toml_and_json_agree(self, tmp_path):
        (tmp_path / "a.toml").write_text('steps = 10\nalphas = [0.0, 1.0]\n[source]\ndim = 6\n')
        (tmp_path / "a.json").write_text(json.dumps({"steps": 10, "alphas": [0.0, 1.0], "source": {"dim": 6}}))
        assert load_config(tmp_path / "a.toml") == load_config(tmp_path / "a.json")

    def test_shipped_sweep_config(self):
        config = load_config(Path(__file__).resolve().parent.parent / "configs" / "sweep.toml")
        assert config.seeds == [1, 2, 3]
        assert config.alphas == [0.0, 0.1, 0.3, 1.0, 3.0]
        assert config.source.dim == 8 and config.source.kind == "gauss_mix"
        assert len(grid_jobs(config)) == 60

    def test_malformed_file(self, tmp_path):
        (tmp_path / "bad.json").write_text("{steps: ")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "bad.json")

    def test_hash_depends_on_run_settings_only(self, tiny_config):
        widened = tiny_config.model_copy(update={"alphas": [0.0, 1.0]})
        assert run_hash(tiny_config, 0.013, 0.0, 1) == run_hash(widened, 0.013, 0.0, 1)
        assert run_hash(tiny_config, 0.013, 0.0, 1) != run_hash(tiny_config, 0.013, 0.0, 2)
        ablated = tiny_config.model_copy(update={"ablate_regularizer": True})
        assert run_hash(tiny_config, 0.013, 0.0, 1) != run_hash(ablated, 0.013, 0.0, 1)

    def test_seed_streams_are_independent(self):
        streams = seed_streams(3)
        draws = {name: g.standard_normal(4).tolist() for name, g in streams.items()}
        assert len({tuple(v) for v in draws.values()}) == 4
        assert seed_streams(3)["noise"].standard_normal(4).tolist() == draws["noise"]


class TestTrainingRun:
    def test_rejects_zero_lambda(self, tiny_config):
        with pytest.raises(InvalidArgument):
            TrainingRun(tiny_config, 0.0, 0.0, 1)

    def test_codec_stage_leaves_source_model_unchanged(self, tiny_config):
        run = TrainingRun(tiny_config, 0.013, 1.0, 1)
        before_source, before_codec = run.source_model.store.flat_values(), run.codec.store.flat_values()
        run.stage_one(*run.next_batch())
        np.testing.assert_array_equal(run.source_model.store.flat_values(), before_source)
        assert not np.array_equal(run.codec.store.flat_values(), before_codec)

    def test_source_stage_leaves_codec_unchanged(self, tiny_config):
        run = TrainingRun(tiny_config, 0.013, 1.0, 1)
        before_source, before_codec = run.source_model.store.flat_values(), run.codec.store.flat_values()
        run.stage_two(*run.next_batch())
        np.testing.assert_array_equal(run.codec.store.flat_values(), before_codec)
        assert not np.array_equal(run.source_model.store.flat_values(), before_source)

    def test_train_and_eval_rates_stay_close(self):
        run = TrainingRun(make_config(steps=300, codec_lr=1e-2, source_lr=1e-2), 0.013, 0.0, 1)
        for _ in range(300):
            run.step()
        valid = run.valid_set.values
        train_rate = encode_train(run.codec, valid, np.random.default_rng(0)).rate_bpd.item()
        eval_rate = encode_eval(run.codec, valid).rate_bpd.item()
        assert np.isfinite(train_rate) and np.isfinite(eval_rate)
        assert abs(train_rate - eval_rate) <= 1.0

    def test_source_period(self):
        run = TrainingRun(make_config(source_period=2), 0.013, 1.0, 1)
        initial = run.source_model.store.flat_values()
        run.step()
        np.testing.assert_array_equal(run.source_model.store.flat_values(), initial)
        run.step()
        assert not np.array_equal(run.source_model.store.flat_values(), initial)


class TestTrainOne:
    def test_zero_steps_evaluates_initialization(self, runs_dir):
        config = make_config(steps=0)
        record = train_one(config, 0.013, 0.0, 1, runs_dir)
        assert record.status == "completed"
        assert [row.step for row in record.metrics] == [0]
        codec, _ = load_models(record)
        fresh = TrainingRun(config, 0.013, 0.0, 1)
        np.testing.assert_array_equal(codec.store.flat_values(), fresh.codec.store.flat_values())

    def test_evaluation_schedule(self, runs_dir):
        record = train_one(make_config(steps=7, eval_every=3), 0.013, 0.0, 1, runs_dir)
        assert [row.step for row in record.metrics] == [0, 3, 6, 7]

    def test_deterministic(self, tmp_path, tiny_config):
        first = train_one(tiny_config, 0.0067, 1.0, 1, tmp_path / "a")
        second = train_one(tiny_config, 0.0067, 1.0, 1, tmp_path / "b")
        assert metrics_bytes(tmp_path / "a", first) == metrics_bytes(tmp_path / "b", second)

    def test_zero_alpha_matches_ablation(self, tmp_path, tiny_config):
        ablated_config = tiny_config.model_copy(update={"ablate_regularizer": True})
        anchor = train_one(tiny_config, 0.0067, 0.0, 1, tmp_path / "a")
        ablated = train_one(ablated_config, 0.0067, 0.0, 1, tmp_path / "b")
        assert anchor.run_hash != ablated.run_hash
        assert metrics_bytes(tmp_path / "a", anchor) == metrics_bytes(tmp_path / "b", ablated)

    def test_run_directory_layout(self, runs_dir, tiny_config):
        record = train_one(tiny_config, 0.013, 0.0, 1, runs_dir, command="rdlab train")
        path = RunDirectory(runs_dir, record.run_hash).path
        assert json.loads((path / "config.json").read_text())["lambda"] == 0.013
        assert (path / "metrics.csv").read_text().splitlines()[0] == ",".join(METRIC_COLUMNS)
        assert (path / "checkpoint" / "codec").is_dir()
        assert (path / "checkpoint" / "source").is_dir()
        assert list_runs(runs_dir)[0].command == "rdlab train"

    def test_metrics_read_back(self, runs_dir, tiny_config):
        record = train_one(tiny_config, 0.013, 0.0, 1, runs_dir)
        rows = read_metrics_csv(RunDirectory(runs_dir, record.run_hash).path / "metrics.csv")
        assert [r.model_dump(exclude={"wall_time"}) for r in rows] == \
            [r.model_dump(exclude={"wall_time"}) for r in record.metrics]

    def test_divergence_keeps_last_checkpoint(self, runs_dir, tiny_config, monkeypatch):
        original = TrainingRun.step

        def exploding(self):
            if self.step_count == 4:
                raise TrainingDiverged("Non-finite gradient for parameter analysis.0.weight",
                                       parameter="analysis.0.weight")
            original(self)

        monkeypatch.setattr(TrainingRun, "step", exploding)
        record = train_one(tiny_config, 0.013, 0.0, 1, runs_dir)
        assert record.status == "diverged"
        assert "step 4" in record.error and "analysis.0.weight" in record.error
        assert [row.step for row in record.metrics] == [0, 3]
        assert RunDirectory(runs_dir, record.run_hash).load().status == "diverged"
        load_models(record)

    def test_interrupt_marks_run_aborted(self, runs_dir, tiny_config, monkeypatch):
        def interrupted(self):
            raise KeyboardInterrupt

        monkeypatch.setattr(TrainingRun, "step", interrupted)
        with pytest.raises(KeyboardInterrupt):
            train_one(tiny_config, 0.013, 0.0, 1, runs_dir)
        assert list_runs(runs_dir)[0].status == "aborted"

    def test_checkpoint_hash_mismatch(self, runs_dir, tiny_config):
        record = train_one(tiny_config, 0.013, 0.0, 1, runs_dir)
        with pytest.raises(InvalidArgument):
            load_models(record.model_copy(update={"run_hash": "0" * 16}))


class TestGrid:
    def test_cardinality(self, runs_dir):
        config = make_config(alphas=[0.0, 1.0], steps=2, eval_every=1)
        records = train_grid(config, runs_dir)
        assert len(grid_jobs(config)) == len(records) == 8
        assert len({r.run_hash for r in records}) == 8
        assert all(r.status == "completed" for r in records)

    def test_cached_runs_are_reused(self, runs_dir, monkeypatch):
        config = make_config(steps=2, eval_every=1)
        first = train_grid(config, runs_dir)
        assert all(cached for _, cached in plan_grid(config, runs_dir))

        def untouchable(*args, **kwargs):
            raise AssertionError("cached run retrained")

        monkeypatch.setattr(training_service, "train_one", untouchable)
        assert [r.run_hash for r in train_grid(config, runs_dir)] == [r.run_hash for r in first]

    def test_widening_alphas_trains_only_new_runs(self, runs_dir):
        train_grid(make_config(steps=2, eval_every=1), runs_dir)
        widened = make_config(steps=2, eval_every=1, alphas=[0.0, 1.0])
        assert sum(not cached for _, cached in plan_grid(widened, runs_dir)) == 4

    def test_failed_run_is_recorded(self, runs_dir, monkeypatch):
        def broken(*args, **kwargs):
            raise RuntimeError("disk full")

        monkeypatch.setattr(training_service, "train_one", broken)
        records = train_grid(make_config(lambdas=[0.013]), runs_dir)
        assert records[0].status == "failed"
        assert "disk full" in records[0].error
        assert list_runs(runs_dir)[0].status == "failed"

    def test_anchor_distortion_falls_as_lambda_grows(self, runs_dir):
        records = train_grid(make_config(steps=400, eval_every=400, codec_lr=1e-2, source_lr=1e-2), runs_dir)
        mse = [r.metrics[-1].mse for r in sorted(records, key=lambda r: r.lmbda)]
        inversions = sum(b > a for a, b in zip(mse, mse[1:]))
        assert inversions <= 1

    def test_parallel_matches_serial(self, tmp_path):
        config = make_config(lambdas=[0.0067, 0.013], steps=2, eval_every=1)
        serial = train_grid(config, tmp_path / "serial", workers=1)
        parallel = train_grid(config, tmp_path / "parallel", workers=2)
        for a, b in zip(serial, parallel):
            assert metrics_bytes(tmp_path / "serial", a) == metrics_bytes(tmp_path / "parallel", b)
