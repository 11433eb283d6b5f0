import numpy as np
import pytest

from emodan.dataset import (
    CLASS_NAMES_7,
    DEFAULT_LABEL_MAP_3,
    HEADER,
    DatasetError,
    EmotionLabel3,
    EmotionLabel7,
    GenParams,
    Sample,
    generate_synthetic,
    load_annotations,
    parse_label_map,
    read_pgm,
    remap_7_to_3,
    split,
    synthesize,
    write_dataset,
    write_pgm,
)
from emodan.geometry import interpupil_distance


class TestLabels:
    def test_neutral_and_happy(self):
        assert remap_7_to_3(EmotionLabel7.NEUTRAL) is EmotionLabel3.NEUTRAL
        assert remap_7_to_3(EmotionLabel7.HAPPY) is EmotionLabel3.POSITIVE

    def test_default_table(self):
        table = [remap_7_to_3(e) for e in EmotionLabel7]
        assert table == [EmotionLabel3.POSITIVE, EmotionLabel3.NEGATIVE, EmotionLabel3.NEGATIVE,
                         EmotionLabel3.POSITIVE, EmotionLabel3.NEGATIVE, EmotionLabel3.NEGATIVE,
                         EmotionLabel3.NEUTRAL]

    def test_surjective(self):
        assert {remap_7_to_3(e) for e in EmotionLabel7} == set(EmotionLabel3)

    def test_array_form_matches_scalar(self):
        labels = np.arange(7)
        np.testing.assert_array_equal(remap_7_to_3(labels), [int(remap_7_to_3(int(i))) for i in labels])

    def test_coarsening_keeps_correct_predictions(self):
        rng = np.random.default_rng(0)
        truth = rng.integers(0, 7, 1000)
        pred = np.where(rng.random(1000) < 0.5, truth, rng.integers(0, 7, 1000))
        ok7 = pred == truth
        ok3 = remap_7_to_3(pred) == remap_7_to_3(truth)
        assert np.all(ok3[ok7])

    def test_label_map_override(self):
        m = parse_label_map("0112112")
        assert remap_7_to_3(EmotionLabel7.SURPRISED, m) is EmotionLabel3.NEUTRAL
        assert parse_label_map("default") == DEFAULT_LABEL_MAP_3
        with pytest.raises(DatasetError):
            parse_label_map("01101")

    def test_names(self):
        assert CLASS_NAMES_7 == ["happy", "sad", "angry", "surprised", "disgust", "fear", "neutral"]


class TestIO:
    def test_pgm_round_trip(self, tmp_path):
        img = np.random.default_rng(1).integers(0, 256, (64, 64), dtype=np.uint8)
        write_pgm(tmp_path / "a.pgm", img)
        np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), img)
        assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n64 64\n255\n")

    def test_pgm_with_comment(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\xff")
        np.testing.assert_array_equal(read_pgm(tmp_path / "c.pgm"), [[1, 255]])

    def test_truncated_pgm(self, tmp_path):
        (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\n\x00\x00")
        with pytest.raises(DatasetError, match="pixel bytes"):
            read_pgm(tmp_path / "t.pgm")

    def test_empty_annotation_file(self, tmp_path):
        (tmp_path / "annotations.csv").write_text("")
        assert load_annotations(tmp_path) == []
        (tmp_path / "annotations.csv").write_text(",".join(HEADER) + "\n")
        assert load_annotations(tmp_path) == []

    def test_round_trip_generated(self, tmp_path):
        samples = generate_synthetic(GenParams(seed=3, count=10), tmp_path / "d")
        loaded = load_annotations(tmp_path / "d")
        assert [s.id for s in loaded] == [s.id for s in samples]
        for a, b in zip(samples, loaded):
            assert a.image.tobytes() == b.image.tobytes()
            assert a.label == b.label
            np.testing.assert_allclose(a.shape, b.shape, atol=1e-6)

    def _write_one(self, root, label=0, coords=None, with_image=True):
        shape = coords if coords is not None else np.full((68, 2), 30.0)
        write_dataset([Sample(np.zeros((64, 64), np.uint8), shape, label, "x1")], root)
        if not with_image:
            (root / "images" / "x1.pgm").unlink()

    def test_bad_label_rejected_with_line(self, tmp_path):
        self._write_one(tmp_path, label=7)
        with pytest.raises(DatasetError, match=r"annotations.csv:2: label 7"):
            load_annotations(tmp_path)

    def test_coordinate_out_of_range(self, tmp_path):
        coords = np.full((68, 2), 30.0)
        coords[5, 0] = 64.0
        self._write_one(tmp_path, coords=coords)
        with pytest.raises(DatasetError, match=":2: landmark coordinate"):
            load_annotations(tmp_path)

    def test_missing_image(self, tmp_path):
        self._write_one(tmp_path, with_image=False)
        with pytest.raises(DatasetError, match="missing image"):
            load_annotations(tmp_path)

    def test_malformed_row(self, tmp_path):
        self._write_one(tmp_path)
        with open(tmp_path / "annotations.csv", "a") as fh:
            fh.write("x2,1,3.0\n")
        with pytest.raises(DatasetError, match=":3: expected 138 fields"):
            load_annotations(tmp_path)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DatasetError, match="not found"):
            load_annotations(tmp_path / "nope")


class TestGenerator:
    def test_deterministic_directories(self, tmp_path, same_tree):
        p = GenParams(seed=5, count=12)
        generate_synthetic(p, tmp_path / "a")
        generate_synthetic(p, tmp_path / "b")
        assert same_tree(tmp_path / "a", tmp_path / "b")

    def test_holdout_continues_the_stream(self, tmp_path):
        p = GenParams(seed=6, count=5)
        generate_synthetic(p, tmp_path / "s", holdout=3)
        whole = synthesize(GenParams(seed=6, count=8))
        train, test = load_annotations(tmp_path / "s" / "train"), load_annotations(tmp_path / "s" / "test")
        assert [s.id for s in train + test] == [s.id for s in whole]
        assert all(a.image.tobytes() == b.image.tobytes() for a, b in zip(train + test, whole))

    def test_zero_deformation_images_identical(self):
        p = GenParams(seed=1, count=30, mouth_curve=0, brow_raise=0, brow_furrow=0, eye_open=0,
                      mouth_open=0, lip_raise=0, jitter_sigma=0, rotation_deg=0, scale_min=1,
                      scale_max=1, translation=0)
        samples = synthesize(p)
        assert len({s.label for s in samples}) > 1
        assert len({s.image.tobytes() for s in samples}) == 1

    def test_samples_in_frame_with_valid_interpupil(self):
        for s in synthesize(GenParams(seed=2, count=200), render=False):
            assert s.shape.min() >= 0 and s.shape.max() < 64
            assert interpupil_distance(s.shape) > 0

    def test_interpupil_positive_seed_sweep(self):
        for seed in range(1000):
            for s in synthesize(GenParams(seed=seed, count=2), render=False):
                assert interpupil_distance(s.shape) > 0

    def test_label_balance(self):
        labels = np.array([s.label for s in synthesize(GenParams(seed=0, count=7000), render=False)])
        freq = np.bincount(labels, minlength=7) / labels.size
        assert np.all(np.abs(freq - 1 / 7) <= 0.1 / 7)

    def test_render_flag_does_not_change_shapes(self):
        a = synthesize(GenParams(seed=4, count=5))
        b = synthesize(GenParams(seed=4, count=5), render=False)
        for x, y in zip(a, b):
            assert x.label == y.label and x.shape.tobytes() == y.shape.tobytes()

    def test_happy_vs_sad_nearest_centroid(self):
        samples = [s for s in synthesize(GenParams(seed=11, count=1800), render=False)
                   if s.label in (EmotionLabel7.HAPPY, EmotionLabel7.SAD)][:500]
        assert len(samples) == 500

        def features(s):
            mouth = s.shape[48:68]
            return (mouth - mouth.mean(axis=0)).reshape(-1)

        X = np.stack([features(s) for s in samples])
        y = np.array([s.label for s in samples])
        train, test = slice(0, 250), slice(250, 500)
        cents = {c: X[train][y[train] == c].mean(axis=0) for c in (0, 1)}
        pred = np.array([min(cents, key=lambda c: np.linalg.norm(x - cents[c])) for x in X[test]])
        assert np.mean(pred == y[test]) > 0.95

    def test_invalid_params(self):
        with pytest.raises(DatasetError):
            GenParams(count=0)
        with pytest.raises(DatasetError):
            GenParams(mouth_curve=1.5)
        with pytest.raises(DatasetError):
            GenParams(rotation_deg=90)

    def test_from_file(self, tmp_path):
        (tmp_path / "g.txt").write_text("# generator\nseed = 9\ncount = 3\njitter_sigma = 0.0\n")
        p = GenParams.from_file(tmp_path / "g.txt")
        assert (p.seed, p.count, p.jitter_sigma, p.mouth_curve) == (9, 3, 0.0, 1.0)
        p = GenParams.from_file(tmp_path / "g.txt", seed=2)
        assert p.seed == 2


class TestSplit:
    def test_sizes(self):
        tr, va, te = split(list(range(10)), (0.8, 0.1, 0.1), seed=0)
        assert (len(tr), len(va), len(te)) == (8, 1, 1)

    def test_partition(self):
        items = list(range(103))
        parts = split(items, (0.5, 0.3, 0.2), seed=4)
        flat = [x for p in parts for x in p]
        assert sorted(flat) == items and len(flat) == len(set(flat))

    def test_same_seed_same_assignment(self):
        items = list(range(50))
        assert split(items, (0.6, 0.2, 0.2), seed=7) == split(items, (0.6, 0.2, 0.2), seed=7)
        assert split(items, (0.6, 0.2, 0.2), seed=7) != split(items, (0.6, 0.2, 0.2), seed=8)

    def test_errors(self):
        with pytest.raises(DatasetError):
            split([], (0.8, 0.1, 0.1), 0)
        with pytest.raises(DatasetError):
            split([1, 2], (0.8, 0.1, 0.2), 0)
