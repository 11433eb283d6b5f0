import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emodan import evaluation
from emodan.checkpoint import CheckpointError, save_checkpoint
from emodan.dataset import DEFAULT_LABEL_MAP_3, load_annotations, parse_label_map, remap_7_to_3, stack
from emodan.evaluation import (
    REPORT_HEADER,
    EvalError,
    ReportSummary,
    build_report,
    compare,
    evaluate,
    read_report,
    write_report,
)
from emodan.model import ModelConfig, init_params
from emodan.train import model_checkpoint


def summary(acc7, acc3=0.9, nme=0.05, dataset="sha256:x", labelmap="0110112"):
    return ReportSummary(dataset, 100, acc7, acc3, nme, labelmap, "digest")


@pytest.fixture(scope="module")
def small_set(small_dataset):
    return stack(load_annotations(small_dataset))


@pytest.fixture
def checkpoint(small_dataset, small_set, tmp_path):
    p = init_params(ModelConfig(), 0, small_set[1])
    save_checkpoint(model_checkpoint(p), tmp_path / "m.ckpt")
    return tmp_path / "m.ckpt"


class TestReport:
    def test_oracle_model(self, small_set):
        _, shapes, labels = small_set
        r = build_report(shapes, labels, shapes, labels)
        assert r.acc7 == r.acc3 == 1.0 and r.nme == 0.0

    def test_constant_class_on_balanced_set(self):
        truth = np.random.default_rng(0).integers(0, 7, 7000)
        shapes = np.random.default_rng(1).uniform(10, 50, (7000, 68, 2))
        r = build_report(shapes, np.zeros(7000, int), shapes, truth)
        assert abs(r.acc7 - 1 / 7) < 3 * np.sqrt((1 / 7) * (6 / 7) / 7000)
        np.testing.assert_array_equal(r.recall_7, [1, 0, 0, 0, 0, 0, 0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=60),
           st.sampled_from(["default", "0112112", "2222220", "0120120"]))
    def test_invariants(self, pairs, code):
        truth, pred = (np.array(x) for x in zip(*pairs))
        shapes = np.tile(np.random.default_rng(0).uniform(10, 50, (1, 68, 2)), (len(truth), 1, 1))
        m = parse_label_map(code)
        r = build_report(shapes, pred, shapes, truth, label_map=m)
        n = len(truth)
        assert r.confusion_7.sum() == n and r.confusion_3.sum() == n
        np.testing.assert_array_equal(r.confusion_7.sum(axis=1), np.bincount(truth, minlength=7))
        assert abs(r.acc7 - np.trace(r.confusion_7) / n) <= 1e-12
        assert abs(r.acc3 - np.trace(r.confusion_3) / n) <= 1e-12
        assert r.acc3 >= r.acc7
        # 3-class accuracy from the 7-class matrix pushed through the map
        lut = np.asarray(m)
        pushed = sum(r.confusion_7[i, j] for i in range(7) for j in range(7) if lut[i] == lut[j]) / n
        assert abs(pushed - r.acc3) <= 1e-12
        assert abs(np.mean(remap_7_to_3(truth, m) == remap_7_to_3(pred, m)) - r.acc3) <= 1e-12

    def test_empty_rejected(self):
        with pytest.raises(EvalError):
            build_report(np.zeros((0, 68, 2)), [], np.zeros((0, 68, 2)), [])

    def test_files(self, small_set, tmp_path):
        _, shapes, labels = small_set
        r = build_report(shapes, labels[::-1], shapes, labels, dataset="sha256:abc", checkpoint_digest="d0")
        paths = write_report(r, tmp_path / "rep")
        lines = paths["report.csv"].read_text().splitlines()
        assert lines[0] == ",".join(REPORT_HEADER) == "dataset,n,acc7,acc3,nme,labelmap3,checkpoint_digest"
        assert lines[1].startswith("sha256:abc,24,") and lines[1].endswith(",0110112,d0")
        c7 = paths["confusion7.csv"].read_text().splitlines()
        assert c7[0] == "truth\\pred,happy,sad,angry,surprised,disgust,fear,neutral"
        assert paths["confusion3.csv"].read_text().splitlines()[0] == "truth\\pred,positive,negative,neutral"
        assert "surprised->positive" in paths["report.txt"].read_text()
        back = read_report(tmp_path / "rep")
        assert back == ReportSummary.of(r)

    def test_read_report_rejects_other_csv(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n1,2\n")
        with pytest.raises(EvalError, match="not a report"):
            read_report(tmp_path / "x.csv")


class TestEvaluate:
    def test_deterministic_files(self, checkpoint, small_dataset, tmp_path):
        for out in ("a", "b"):
            write_report(evaluate(checkpoint, small_dataset), tmp_path / out)
        for name in ("report.csv", "report.txt", "confusion7.csv", "confusion3.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_digest_and_dataset_id(self, checkpoint, small_dataset):
        import hashlib

        r = evaluate(checkpoint, small_dataset)
        assert r.checkpoint_digest == hashlib.sha256(checkpoint.read_bytes()).hexdigest()
        assert r.dataset.startswith("sha256:") and r.n == 24
        assert r.labelmap3 == "0110112"
        assert r.acc3 >= r.acc7

    def test_class_mismatch_rejected_before_inference(self, small_set, tmp_path, small_dataset, monkeypatch):
        p = init_params(ModelConfig(n_classes=5), 0, small_set[1])
        save_checkpoint(model_checkpoint(p), tmp_path / "k5.ckpt")

        def boom(*a, **k):
            raise AssertionError("inference ran")

        monkeypatch.setattr(evaluation, "predict_batch", boom)
        with pytest.raises(EvalError, match="5 classes"):
            evaluate(tmp_path / "k5.ckpt", small_dataset)

    def test_corrupt_checkpoint(self, checkpoint, small_dataset, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(checkpoint.read_bytes()[:100])
        with pytest.raises(CheckpointError, match="truncated"):
            evaluate(tmp_path / "bad.ckpt", small_dataset)

    def test_label_map_echo(self, checkpoint, small_dataset):
        r = evaluate(checkpoint, small_dataset, parse_label_map("0112112"))
        assert r.labelmap3 == "0112112"
        assert evaluate(checkpoint, small_dataset, DEFAULT_LABEL_MAP_3).labelmap3 == "0110112"


class TestCompare:
    def test_identical_reports(self):
        c = compare(summary(0.6), summary(0.6), ("x", "y"))
        assert all(c.delta(m) == 0 for m in ("acc7", "acc3", "nme"))

    def test_signed_delta(self):
        c = compare(summary(0.62), summary(0.57), ("joint", "emotion_only"))
        assert c.delta("acc7") == pytest.approx(0.05, abs=1e-12)
        acc_line = next(l for l in c.text().splitlines() if l.startswith("acc7"))
        assert acc_line.split() == ["acc7", "0.6200", "0.5700", "+0.0500"]
        rows = c.csv().splitlines()
        assert rows[0] == "metric,joint,emotion_only,delta"
        assert rows[1].endswith(",+0.050000")
        worse = compare(summary(0.57), summary(0.62))
        assert worse.text().splitlines()[2].split()[-1] == "-0.0500"

    def test_dataset_mismatch(self):
        with pytest.raises(EvalError, match="different datasets"):
            compare(summary(0.6), summary(0.6, dataset="sha256:y"))

    def test_label_map_mismatch(self):
        with pytest.raises(EvalError, match="label maps"):
            compare(summary(0.6), summary(0.6, labelmap="0112112"))
