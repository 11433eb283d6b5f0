import math

import numpy as np
import pytest

from emodan.dataset import GenParams, stack, synthesize
from emodan.geometry import apply_transform, estimate_similarity, interpupil_distances
from emodan.model import (
    ForwardOutput,
    ModelConfig,
    ModelError,
    StageError,
    forward,
    init_params,
    joint_loss,
    predict,
    predict_batch,
    stage_param_names,
)
from emodan.numgrad import Tensor, backward
from emodan.verify import model_checks


@pytest.fixture(scope="module")
def faces():
    return stack(synthesize(GenParams(seed=21, count=6)))


@pytest.fixture
def params(faces):
    return init_params(ModelConfig(), seed=3, train_shapes=faces[1])


class TestInit:
    def test_same_seed_same_params(self, faces):
        a = init_params(ModelConfig(), 5, faces[1])
        b = init_params(ModelConfig(), 5, faces[1])
        for k in a.tensors:
            assert a[k].values.tobytes() == b[k].values.tobytes()
        assert a.canonical.tobytes() == b.canonical.tobytes()

    def test_biases_zero_weights_bounded(self, params):
        for name, t in params.tensors.items():
            if name.endswith(".b"):
                assert not t.values.any()
            else:
                fan_in = t.shape[1] * 9 if t.values.ndim == 4 else t.shape[0]
                assert np.abs(t.values).max() <= math.sqrt(6 / fan_in)

    def test_single_shape_canonical_is_similar(self, faces):
        shape = faces[1][0]
        p = init_params(ModelConfig(), 0, shape[None])
        t = estimate_similarity(shape, p.canonical)
        np.testing.assert_allclose(apply_transform(t, shape), p.canonical, atol=1e-9)

    def test_canonical_inside_margin(self):
        for seed in range(20):
            shapes = stack(synthesize(GenParams(seed=seed, count=30), render=False))[1]
            c = init_params(ModelConfig(), 0, shapes).canonical
            assert c.min() >= 6.4 - 1e-9 and c.max() <= 57.6 + 1e-9

    def test_empty_training_shapes_rejected(self):
        with pytest.raises(ModelError):
            init_params(ModelConfig(), 0, np.zeros((0, 68, 2)))

    def test_config_validation(self):
        with pytest.raises(ModelError):
            ModelConfig(alpha=0.0, beta=0.0)
        with pytest.raises(ModelError):
            ModelConfig(alpha=-0.1)
        assert (ModelConfig().alpha, ModelConfig().beta) == (0.4, 0.6)


class TestForward:
    def test_zero_delta_predicts_canonical(self, params, faces):
        for stage in (1, 2):
            for n in ("delta.w", "delta.b"):
                params[f"s{stage}.{n}"].values = np.zeros_like(params[f"s{stage}.{n}"].values)
        out = forward(params, faces[0])
        for s in out.stage_shapes:
            np.testing.assert_allclose(s.values, np.broadcast_to(params.canonical, s.shape), atol=1e-9)

    def test_probabilities(self, params, faces):
        out = forward(params, faces[0])
        assert out.E.shape == (6, 7)
        np.testing.assert_allclose(out.E.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(out.E >= 0)

    def test_repeat_is_bit_identical(self, params, faces):
        a = forward(params, faces[0])
        b = forward(params, faces[0])
        assert a.S.values.tobytes() == b.S.values.tobytes()
        assert a.E.tobytes() == b.E.tobytes()

    def test_single_image_accepted(self, params, faces):
        out = forward(params, faces[0][0])
        assert out.S.shape == (1, 68, 2)

    def test_wrong_size_rejected(self, params):
        with pytest.raises(ModelError):
            forward(params, np.zeros((2, 32, 32)))

    def test_upto_stage_one(self, params, faces):
        out = forward(params, faces[0], upto=1)
        assert out.logits is None and len(out.stage_shapes) == 1

    def test_nonfinite_stage_estimate(self, params, faces):
        params["s1.delta.b"].values = np.full(136, np.nan)
        with pytest.raises(StageError) as exc:
            forward(params, faces[0])
        assert exc.value.stage == 2

    def test_degenerate_stage_estimate(self, params, faces):
        # every landmark collapses onto one point
        params["s1.delta.w"].values = np.zeros_like(params["s1.delta.w"].values)
        params["s1.delta.b"].values = (np.full((68, 2), 30.0) - params.canonical).reshape(-1)
        with pytest.raises(StageError, match="stage 2"):
            forward(params, faces[0])


def _fake_output(S, logits):
    return ForwardOutput(Tensor(S, requires_grad=True), [], Tensor(logits, requires_grad=True), None)


class TestLoss:
    def test_worked_example(self, faces):
        gt = faces[1][:1]
        d = interpupil_distances(gt)[0]
        pred = gt.copy()
        pred[..., 0] += 0.5 * d   # every point off by half the inter-pupil distance
        lb = joint_loss(_fake_output(pred, np.zeros((1, 7))), gt, [3], 0.4, 0.6)
        assert lb.landmark_term == pytest.approx(0.5, abs=1e-12)
        assert lb.emotion_term == pytest.approx(math.log(7), abs=1e-12)
        assert float(lb.total.values) == pytest.approx(0.4 * 0.5 + 0.6 * math.log(7), abs=1e-12)
        assert float(lb.total.values) == pytest.approx(1.367546, abs=1e-6)

    def test_perfect_prediction_near_zero(self, faces):
        gt, labels = faces[1], faces[2]
        logits = np.full((6, 7), -50.0)
        logits[np.arange(6), labels] = 50.0
        lb = joint_loss(_fake_output(gt.copy(), logits), gt, labels, 0.4, 0.6)
        assert float(lb.total.values) < 1e-12

    def test_decomposition(self, params, faces):
        rng = np.random.default_rng(0)
        out = forward(params, faces[0])
        for _ in range(20):
            a, b = rng.uniform(0, 2, 2)
            lb = joint_loss(out, faces[1], faces[2], a, b)
            assert abs(float(lb.total.values) - (a * lb.landmark_term + b * lb.emotion_term)) <= 1e-12

    def test_doubling_weights_doubles_total(self, params, faces):
        out = forward(params, faces[0])
        one = joint_loss(out, faces[1], faces[2], 0.4, 0.6)
        two = joint_loss(out, faces[1], faces[2], 0.8, 1.2)
        assert float(two.total.values) == 2 * float(one.total.values)
        assert (two.landmark_term, two.emotion_term) == (one.landmark_term, one.emotion_term)

    @pytest.mark.parametrize("alpha,beta,silent", [(0.4, 0.0, "emotion.w"), (0.0, 0.6, "s2.delta.w")])
    def test_zero_weight_silences_head(self, params, faces, alpha, beta, silent):
        params.zero_grad()
        backward(joint_loss(forward(params, faces[0]), faces[1], faces[2], alpha, beta).total)
        assert not params[silent].grad.any()
        assert np.abs(params["s2.fc.w"].grad).max() > 0

    def test_degenerate_ground_truth(self, params, faces):
        gt = np.full((6, 68, 2), 20.0)
        with pytest.raises(ModelError):
            joint_loss(forward(params, faces[0]), gt, faces[2], 0.4, 0.6)

    def test_full_model_gradient(self):
        worst = max(r.error for r in model_checks(seed=0))
        assert worst < 1e-4


class TestPredict:
    def test_uniform_probabilities_pick_first_class(self, params, faces):
        params["emotion.w"].values = np.zeros_like(params["emotion.w"].values)
        _, label, probs = predict(params, faces[0][0])
        np.testing.assert_allclose(probs, 1 / 7)
        assert label == 0

    def test_shift_invariance(self, params, faces):
        _, before, _ = predict_batch(params, faces[0])
        params["emotion.b"].values = params["emotion.b"].values + 123.0
        _, after, _ = predict_batch(params, faces[0])
        np.testing.assert_array_equal(before, after)

    def test_matches_forward_on_random_inputs(self, params):
        images = np.random.default_rng(8).random((100, 64, 64))
        shapes, labels, probs = predict_batch(params, images)
        out = forward(params, images)
        np.testing.assert_array_equal(labels, np.argmax(out.E, axis=1))
        np.testing.assert_array_equal(shapes, out.S.values)
        for i in (0, 57, 99):
            assert predict(params, images[i])[1] == labels[i]

    def test_stage_names(self):
        assert stage_param_names(2)[0] == "s2.conv1.w" and len(stage_param_names(1)) == 8
