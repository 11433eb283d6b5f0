import io

import pytest

from emodan import cli
from emodan.train import TrainError, read_log


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli.main([str(a) for a in argv], out=out, err=err)
    return code, out.getvalue(), err.getvalue()


class TestUsage:
    def test_unknown_command(self):
        code, _, err = run("frobnicate")
        assert code == 1 and "usage: emodan" in err

    def test_unknown_flag(self):
        code, _, err = run("gen", "--colour", "red")
        assert code == 1 and "usage:" in err and "--colour" in err

    def test_no_command(self):
        code, _, err = run()
        assert code == 1 and "usage" in err

    def test_help(self, capsys):
        assert run("train", "--help")[0] == 0
        assert "--phase-b-epochs" in capsys.readouterr().out

    def test_bad_value(self, tmp_path):
        code, _, err = run("gen", "--out", tmp_path / "g", "--count", "0")
        assert code == 1 and "count must be positive" in err
        assert not (tmp_path / "g").exists()


class TestGen:
    def test_twice_identical(self, tmp_path, same_tree):
        (tmp_path / "g.txt").write_text("count = 6\nseed = 4\n")
        for d in ("a", "b"):
            assert run("gen", "--config", tmp_path / "g.txt", "--out", tmp_path / d)[0] == 0
        assert same_tree(tmp_path / "a", tmp_path / "b")

    def test_seed_flag_overrides_file(self, tmp_path):
        (tmp_path / "g.txt").write_text("count = 3\nseed = 4\n")
        run("gen", "--config", tmp_path / "g.txt", "--seed", 9, "--out", tmp_path / "a")
        assert "seed = 9" in (tmp_path / "a" / "genparams.txt").read_text()

    def test_holdout(self, tmp_path):
        assert run("gen", "--count", 4, "--holdout", 2, "--out", tmp_path / "s")[0] == 0
        assert (tmp_path / "s" / "train" / "annotations.csv").exists()
        assert len((tmp_path / "s" / "test" / "annotations.csv").read_text().splitlines()) == 3


class TestPipeline:
    def test_train_eval_compare(self, small_dataset, tmp_path):
        (tmp_path / "t.txt").write_text("phase_a_epochs = 1\nphase_b_epochs = 5\nbatch_size = 8\n")
        code, out, err = run("train", "--config", tmp_path / "t.txt", "--phase-b-epochs", 1,
                             "--dataset", small_dataset, "--out", tmp_path / "run", "--seed", 2)
        assert code == 0, err
        rows = read_log(tmp_path / "run" / "metrics.csv")
        assert [r["phase"] for r in rows if r["split"] == "train"] == ["A", "B"]

        ckpt = tmp_path / "run" / "model.ckpt"
        for name in ("e1", "e2"):
            code, out, err = run("eval", "--checkpoint", ckpt, "--dataset", small_dataset, "--out", tmp_path / name)
            assert code == 0, err
            assert "accuracy (7)" in out
        assert (tmp_path / "e1" / "report.csv").read_bytes() == (tmp_path / "e2" / "report.csv").read_bytes()

        code, out, err = run("compare", tmp_path / "e1", tmp_path / "e2" / "report.csv", "--out", tmp_path / "cmp")
        assert code == 0, err
        assert out.splitlines()[1].split() == ["metric", "e1", "e2", "delta"]
        assert (tmp_path / "cmp" / "compare.csv").read_text().startswith("metric,e1,e2,delta\n")

    def test_eval_missing_checkpoint(self, small_dataset, tmp_path):
        code, _, err = run("eval", "--checkpoint", tmp_path / "nope.ckpt", "--dataset", small_dataset,
                           "--out", tmp_path / "ev")
        assert code == 1 and "checkpoint not found" in err
        assert not (tmp_path / "ev").exists()

    def test_eval_needs_arguments(self, tmp_path):
        code, _, err = run("eval", "--out", tmp_path / "ev")
        assert code == 1 and "--checkpoint" in err

    def test_compare_needs_two(self, tmp_path):
        assert run("compare", tmp_path / "a")[0] == 1

    def test_runtime_failure_exit_code(self, small_dataset, tmp_path, monkeypatch):
        def fail(cfg):
            raise TrainError("non-finite loss at epoch 1, batch 0")

        monkeypatch.setattr(cli, "train", fail)
        code, _, err = run("train", "--dataset", small_dataset, "--out", tmp_path / "r")
        assert code == 2 and "epoch 1, batch 0" in err


class TestGradcheck:
    def test_small_run(self, tmp_path):
        code, out, err = run("gradcheck", "--seeds", 1, "--coords", 3, "--out", tmp_path / "g")
        assert code == 0, err
        assert "worst relative error" in out
        assert "joint_loss:s2.fc.w" in out
        lines = (tmp_path / "g" / "gradcheck.csv").read_text().splitlines()
        assert lines[0] == "seed,target,tensor,error,tol"
        assert all(float(x.split(",")[3]) < 1e-4 for x in lines[1:])
