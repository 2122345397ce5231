"""End-to-end tests of the prefrank command line."""

import os
from pathlib import Path

import numpy as np
import pyarrow.csv as pacsv
import pytest

from prefrank.dataio import SplitPart, read_corpus
from prefrank.main import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, run
from prefrank.services.evaluation_service import rank_items
from prefrank.services.run_service import CHECKPOINT_NAME, CONFIG_NAME, EPOCH_LOG_NAME, LOCK_NAME, load_model


def _write_config(path: Path, **overrides) -> Path:
    values = {
        "corpus_path": path.parent / "corpus.txt",
        "output_dir": path.parent / "run",
        "min_core": 3,
        "num_tasks": 2,
        "embedding_dim": 8,
        "dropout": 0.0,
        "lr": 0.01,
        "l2": 0.0,
        "batch_size": 64,
        "max_epochs": 4,
        "patience": 2,
        "top_n": 5,
        "seed": 7,
    }
    values.update(overrides)
    path.write_text("".join(f"{key} = {value}\n" for key, value in values.items()), encoding="utf-8")
    return path


@pytest.fixture
def cli_config(tmp_path, raw_pairs_file):
    return _write_config(tmp_path / "run.conf", raw_path=raw_pairs_file)


@pytest.fixture
def prepared(cli_config, capsys):
    assert run(["prepare", "--config", str(cli_config)]) == EXIT_OK
    capsys.readouterr()
    return cli_config


@pytest.fixture
def trained(prepared, capsys):
    assert run(["train", "--config", str(prepared)]) == EXIT_OK
    capsys.readouterr()
    return prepared


@pytest.mark.unit
class TestPrepare:
    def test_prints_statistics(self, cli_config, tmp_path, capsys):
        assert run(["prepare", "--config", str(cli_config)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "Density" in out
        data = read_corpus(tmp_path / "corpus.txt")
        assert str(data.num_users) in out
        assert len(data.train) + len(data.validation) + len(data.test) == data.corpus.num_interactions

    def test_rerun_is_byte_identical(self, cli_config, tmp_path):
        assert run(["prepare", "--config", str(cli_config), "--out", str(tmp_path / "a.txt")]) == EXIT_OK
        assert run(["prepare", "--config", str(cli_config), "--out", str(tmp_path / "b.txt")]) == EXIT_OK
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    def test_seed_changes_split(self, cli_config, tmp_path):
        run(["prepare", "--config", str(cli_config), "--out", str(tmp_path / "a.txt")])
        run(["prepare", "--config", str(cli_config), "--seed", "8", "--out", str(tmp_path / "b.txt")])
        assert (tmp_path / "a.txt").read_bytes() != (tmp_path / "b.txt").read_bytes()

    def test_corpus_eliminated(self, cli_config, capsys):
        assert run(["prepare", "--config", str(cli_config), "--min-core", "100"]) == EXIT_USAGE
        assert "corpus eliminated by k-core" in capsys.readouterr().err

    def test_missing_raw_file(self, tmp_path, capsys):
        config = _write_config(tmp_path / "run.conf", raw_path=tmp_path / "missing.txt")
        assert run(["prepare", "--config", str(config)]) == EXIT_USAGE
        assert "not found" in capsys.readouterr().err

    def test_no_raw_configured(self, tmp_path, capsys):
        config = _write_config(tmp_path / "run.conf")
        assert run(["prepare", "--config", str(config)]) == EXIT_USAGE
        assert "raw" in capsys.readouterr().err

    def test_stats(self, prepared, capsys):
        assert run(["stats", "--config", str(prepared)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "Density" in out and "Users" in out


@pytest.mark.unit
class TestConfigErrors:
    def test_too_many_tasks(self, prepared, capsys):
        assert run(["train", "--config", str(prepared), "--set", "num_tasks=9"]) == EXIT_USAGE
        assert "num_tasks" in capsys.readouterr().err

    def test_unknown_key(self, prepared, capsys):
        assert run(["train", "--config", str(prepared), "--set", "learning_rate=0.1"]) == EXIT_USAGE
        assert "learning_rate" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert run(["stats", "--config", str(tmp_path / "nope.conf")]) == EXIT_USAGE

    def test_bad_thread_count(self, prepared):
        with pytest.raises(SystemExit) as info:
            run(["stats", "--config", str(prepared), "--threads", "0"])
        assert info.value.code == 2


@pytest.mark.unit
class TestTrainAndEvaluate:
    def test_train_writes_run_directory(self, trained, tmp_path):
        run_dir = tmp_path / "run"
        assert (run_dir / CHECKPOINT_NAME).is_file()
        assert (run_dir / EPOCH_LOG_NAME).is_file()
        assert "num_tasks = 2" in (run_dir / CONFIG_NAME).read_text(encoding="utf-8")
        assert not (run_dir / LOCK_NAME).exists()

    def test_validation_metrics_match_epoch_log(self, trained, tmp_path, capsys):
        assert run(["evaluate", "--config", str(trained), "--split", "validation"]) == EXIT_OK
        metrics = pacsv.read_csv(tmp_path / "run" / "metrics_validation.csv").to_pydict()
        log = pacsv.read_csv(tmp_path / "run" / EPOCH_LOG_NAME).to_pydict()
        recalls = log["val_recall@5"]
        best = recalls.index(max(recalls))
        assert metrics["recall@5"][0] == pytest.approx(recalls[best], abs=1e-12)
        assert metrics["ndcg@5"][0] == pytest.approx(log["val_ndcg@5"][best], abs=1e-12)
        assert "validation: Recall@5=" in capsys.readouterr().out

    def test_evaluate_reports(self, trained, tmp_path):
        reports = tmp_path / "reports"
        args = ["evaluate", "--config", str(trained), "--per-user", "--per-task", "--report-dir", str(reports)]
        assert run(args) == EXIT_OK
        per_user = pacsv.read_csv(reports / "per_user_test.csv").to_pydict()
        summary = pacsv.read_csv(reports / "metrics_test.csv").to_pydict()
        assert summary["users"][0] == len(per_user["user"])
        assert summary["recall@5"][0] == pytest.approx(np.mean(per_user["recall@5"]), abs=1e-12)
        assert all(key.startswith("user") for key in per_user["user"])
        per_task = pacsv.read_csv(reports / "per_task_test.csv").to_pydict()
        assert len(per_task["task"]) == 2

    def test_cutoff_override(self, trained, tmp_path):
        assert run(["evaluate", "--config", str(trained), "--n", "10"]) == EXIT_OK
        assert "recall@10" in pacsv.read_csv(tmp_path / "run" / "metrics_test.csv").column_names

    def test_missing_checkpoint(self, prepared, tmp_path, capsys):
        args = ["evaluate", "--config", str(prepared), "--checkpoint", str(tmp_path / "none.ckpt")]
        assert run(args) == EXIT_USAGE
        assert "checkpoint not found" in capsys.readouterr().err

    def test_recommend_order(self, trained, tmp_path, capsys):
        data = read_corpus(tmp_path / "corpus.txt")
        user_key = data.corpus.user_keys[0]
        assert run(["recommend", "--config", str(trained), "--user", user_key]) == EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        items = [line.split("\t")[0] for line in lines]
        scores = [float(line.split("\t")[1]) for line in lines]
        loaded = load_model(tmp_path / "run" / CHECKPOINT_NAME, data)
        mask = data.user_items(SplitPart.TRAIN, SplitPart.VALIDATION)[0]
        expected = rank_items(loaded.model.embeddings(), data.num_users, 0, mask, 5)
        assert items == [data.corpus.item_keys[i] for i in expected]
        assert scores == sorted(scores, reverse=True)

    def test_unknown_user(self, trained, capsys):
        assert run(["recommend", "--config", str(trained), "--user", "nobody"]) == EXIT_USAGE
        assert "unknown user 'nobody'" in capsys.readouterr().err

    def test_merge_validation(self, prepared, tmp_path):
        args = ["train", "--config", str(prepared), "--set", "merge_validation=true", "--out", str(tmp_path / "m")]
        assert run(args) == EXIT_OK
        loaded = load_model(tmp_path / "m" / CHECKPOINT_NAME, read_corpus(tmp_path / "corpus.txt"))
        assert loaded.metadata["graph_source"] == "train+validation"

    def test_locked_output_directory(self, prepared, tmp_path, capsys):
        (tmp_path / "run").mkdir()
        (tmp_path / "run" / LOCK_NAME).write_text("1", encoding="utf-8")
        assert run(["train", "--config", str(prepared)]) == EXIT_USAGE
        assert "in use" in capsys.readouterr().err

    def test_retrain_is_byte_identical(self, prepared, tmp_path):
        args = ["train", "--config", str(prepared), "--set", "max_epochs=1", "--threads", "1"]
        checkpoint = tmp_path / "run" / CHECKPOINT_NAME
        assert run(args) == EXIT_OK
        first = checkpoint.read_bytes()
        assert run(args) == EXIT_OK
        assert checkpoint.read_bytes() == first

    def test_reevaluate_is_byte_identical(self, trained, tmp_path):
        metrics = tmp_path / "run" / "metrics_test.csv"
        assert run(["evaluate", "--config", str(trained), "--threads", "1"]) == EXIT_OK
        first = metrics.read_bytes()
        assert run(["evaluate", "--config", str(trained), "--threads", "1"]) == EXIT_OK
        assert metrics.read_bytes() == first
        assert run(["evaluate", "--config", str(trained), "--threads", "3"]) == EXIT_OK
        assert metrics.read_bytes() == first

    def test_divergence_exits_numeric(self, prepared, capsys):
        assert run(["train", "--config", str(prepared), "--set", "lr=1e300"]) == EXIT_NUMERIC
        assert "non-finite" in capsys.readouterr().err


@pytest.mark.unit
class TestGrid:
    def test_grid_over_task_count(self, prepared, tmp_path, capsys):
        args = ["grid", "--config", str(prepared), "--grid", "num_tasks=1,2", "--out", str(tmp_path / "grid")]
        assert run(args) == EXIT_OK
        summary = pacsv.read_csv(tmp_path / "grid" / "grid_summary.csv").to_pydict()
        assert summary["run"] == ["num_tasks=1", "num_tasks=2"]
        assert "test_recall@5" in summary
        for name in summary["run"]:
            assert (tmp_path / "grid" / name / CHECKPOINT_NAME).is_file()
            assert (tmp_path / "grid" / name / "metrics_test.csv").is_file()
        assert not (tmp_path / "grid" / LOCK_NAME).exists()

    def test_grid_rejects_invalid_axis(self, prepared, tmp_path):
        args = ["grid", "--config", str(prepared), "--grid", "num_tasks=9", "--out", str(tmp_path / "grid")]
        assert run(args) == EXIT_USAGE
        assert not (tmp_path / "grid" / "grid_summary.csv").exists()


@pytest.mark.integration
@pytest.mark.slow
class TestPublicCorpora:
    def test_gowalla_ingestion(self, tmp_path, capsys):
        raw = os.environ.get("PREFRANK_GOWALLA_RAW")
        if not raw:
            pytest.skip("PREFRANK_GOWALLA_RAW not set")
        fmt = os.environ.get("PREFRANK_GOWALLA_FORMAT", "pairs")
        args = ["prepare", "--raw", raw, "--format", fmt, "--min-core", "10", "--out", str(tmp_path / "gowalla.txt")]
        assert run(args) == EXIT_OK
        data = read_corpus(tmp_path / "gowalla.txt")
        assert (data.num_users, data.num_items, data.corpus.num_interactions) == (29858, 49081, 1027370)

    def test_two_tasks_beat_one_on_movie_corpus(self, tmp_path):
        raw = os.environ.get("PREFRANK_MOVIE_CORPUS")
        if not raw:
            pytest.skip("PREFRANK_MOVIE_CORPUS not set")
        config = _write_config(
            tmp_path / "run.conf",
            raw_path=raw,
            min_core=10,
            embedding_dim=64,
            dropout=0.1,
            lr=0.001,
            l2=1e-6,
            batch_size=1024,
            max_epochs=100,
            patience=5,
            top_n=20,
        )
        assert run(["prepare", "--config", str(config)]) == EXIT_OK

        votes_12, votes_24 = 0, 0
        for seed in (1, 2, 3):
            out = tmp_path / f"seed{seed}"
            grid = ["grid", "--config", str(config), "--seed", str(seed), "--grid", "num_tasks=1,2,4", "--out", str(out)]
            assert run(grid) == EXIT_OK
            summary = pacsv.read_csv(out / "grid_summary.csv").to_pydict()
            recall = dict(zip(summary["run"], summary["test_recall@20"]))
            votes_12 += recall["num_tasks=2"] > recall["num_tasks=1"]
            votes_24 += recall["num_tasks=4"] <= recall["num_tasks=2"]
        assert votes_12 >= 2
        assert votes_24 >= 2
