import json

import pytest

from rdlab.cli import main
from rdlab.commands import evaluation as evaluation_commands
from rdlab.schemas.evaluation import ReportTable
from rdlab.services.training_service import list_runs
from tests.conftest import make_config

CURVE = "rate_bpd,quality_db\n0.2,30\n0.35,33\n0.6,36\n1.0,39\n"


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(make_config(steps=2, eval_every=1).model_dump_json())
    return path


def stdout_json(capsys):
    return json.loads(capsys.readouterr().out)


class TestUsage:
    def test_version(self):
        assert main(["--version"]) == 0

    def test_missing_subcommand(self):
        assert main([]) == 2

    def test_zero_count_is_a_usage_error(self):
        assert main(["verify-identities", "--count", "0"]) == 2

    def test_unknown_config_key(self, config_file, tmp_path):
        args = ["train", "--config", str(config_file), "--set", "bogus=1", "--runs-dir", str(tmp_path / "runs")]
        assert main(args) == 2
        assert not (tmp_path / "runs").exists()


class TestVerifyIdentities:
    def test_random_batch_passes(self, capsys):
        assert main(["verify-identities", "--count", "1000", "--seed", "1"]) == 0
        document = stdout_json(capsys)
        assert document["ok"]
        assert document["reports"]["transform"]["residual_positive"] >= 100

    def test_mutant_fails_and_replays(self, tmp_path, capsys):
        out = tmp_path / "report.json"
        args = ["verify-identities", "--kind", "transform", "--count", "20", "--inject-mutant", "--out", str(out)]
        assert main(args) == 1
        failure = json.loads(out.read_text())["reports"]["transform"]["failures"][0]
        replay = tmp_path / "failure.json"
        replay.write_text(json.dumps(failure))
        assert main(["verify-identities", "--replay", str(replay)]) == 1
        assert not all(check["pass"] for check in stdout_json(capsys)["identities"])

    def test_replay_of_unreadable_file(self, tmp_path):
        assert main(["verify-identities", "--replay", str(tmp_path / "missing.json")]) == 1


class TestBdRate:
    def test_identical_curves(self, tmp_path, capsys):
        (tmp_path / "a.csv").write_text(CURVE)
        assert main(["bd-rate", "--anchor", str(tmp_path / "a.csv"), "--test", str(tmp_path / "a.csv")]) == 0
        assert "BD-Rate: 0.00%" in capsys.readouterr().out

    def test_disjoint_curves(self, tmp_path, capsys):
        (tmp_path / "a.csv").write_text(CURVE)
        (tmp_path / "b.csv").write_text("rate_bpd,quality_db\n0.2,50\n0.35,53\n0.6,56\n1.0,59\n")
        assert main(["bd-rate", "--anchor", str(tmp_path / "a.csv"), "--test", str(tmp_path / "b.csv")]) == 1
        line = next(l for l in capsys.readouterr().err.splitlines() if l.startswith("{"))
        error = json.loads(line)
        assert error["error"]["kind"] == "no-overlap"


class TestTraining:
    def test_anchor_grid(self, config_file, tmp_path, capsys):
        runs_dir = tmp_path / "runs"
        args = ["train", "--config", str(config_file), "--set", "alpha=0", "--runs-dir", str(runs_dir)]
        assert main(args) == 0
        runs = stdout_json(capsys)["runs"]
        assert len(runs) == 4
        assert all(run["alpha"] == 0.0 and run["status"] == "completed" for run in runs)
        assert all(r.command.startswith("rdlab train") for r in list_runs(runs_dir))

    def test_sweep_reuses_cached_anchor(self, config_file, tmp_path, capsys, monkeypatch):
        runs_dir = tmp_path / "runs"
        assert main(["train", "--config", str(config_file), "--set", "alpha=0", "--runs-dir", str(runs_dir)]) == 0
        capsys.readouterr()

        def report(records, out_dir=None, command=None):
            return ReportTable(name="stub", columns=["runs"], rows=[[len(records)]])

        # untrained curves are too flat for a BD fit; the cache is what is under test
        monkeypatch.setattr(evaluation_commands, "alpha_sweep_report", report)
        monkeypatch.setattr(evaluation_commands, "training_progress_report", report)
        args = ["sweep-alpha", "--config", str(config_file), "--alphas", "0,1", "--runs-dir", str(runs_dir),
                "--out", str(tmp_path / "reports")]
        assert main(args) == 0
        document = stdout_json(capsys)
        assert document["new_runs"] == 4
        assert len(document["runs"]) == 8
        assert len(list_runs(runs_dir)) == 8

    def test_domain_shift_at_alpha_zero_trains_one_grid(self, config_file, tmp_path, monkeypatch):
        seen = []

        def train(train_config, args):
            seen.append(train_config.alphas)
            return [], 0

        monkeypatch.setattr(evaluation_commands, "_train", train)
        args = ["domain-shift", "--config", str(config_file), "--alpha", "0", "--runs-dir", str(tmp_path / "runs"),
                "--out", str(tmp_path / "reports")]
        assert main(args) == 1
        assert seen == [[0.0]]
        assert evaluation_commands.shift_alphas(0.3) == [0.0, 0.3]

    def test_eval_and_probe_a_run(self, config_file, tmp_path, capsys):
        runs_dir = tmp_path / "runs"
        args = ["train", "--config", str(config_file), "--set", "lambda=0.013", "--set", "alpha=0",
                "--runs-dir", str(runs_dir)]
        assert main(args) == 0
        run_hash = stdout_json(capsys)["runs"][0]["run_hash"]
        run_dir = str(runs_dir / run_hash)

        assert main(["eval", "--run", run_dir]) == 0
        evaluated = stdout_json(capsys)
        assert evaluated["config_hash"] == run_hash
        assert evaluated["point"]["rate_bpd"] >= 0

        assert main(["eval", "--run", run_dir, "--shift", "rotate", "--out", str(tmp_path / "eval.csv")]) == 0
        assert (tmp_path / "eval.csv").read_text().startswith("# command: rdlab eval")

        assert main(["probe-identities", "--run", run_dir, "--dims", "2", "--grid", "32", "--bins", "64", "8"]) == 0
        reports = stdout_json(capsys)["reports"]
        assert [r["bins"] for r in reports] == [64, 8]
        assert all(r["theorem_gap"] <= 1e-10 for r in reports)

    def test_probe_grid_over_cap(self, config_file, tmp_path, capsys):
        runs_dir = tmp_path / "runs"
        args = ["train", "--config", str(config_file), "--set", "lambda=0.013", "--set", "alpha=0",
                "--runs-dir", str(runs_dir)]
        assert main(args) == 0
        run_hash = stdout_json(capsys)["runs"][0]["run_hash"]
        assert main(["probe-identities", "--run", str(runs_dir / run_hash), "--grid", "64"]) == 1
