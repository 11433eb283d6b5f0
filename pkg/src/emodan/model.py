"""Two-stage landmark cascade with an emotion head and the joint loss.

Stage 1 sees the raw image and regresses an offset from the canonical shape.
Stage 2 sees the image warped into the canonical frame by the similarity that
aligns the stage-1 estimate to the canonical shape, plus a heatmap of that
estimate, and regresses a second offset; the result is mapped back to the
image frame. The emotion head is a dense layer over the last stage's fc
features.

The alignment transform and the stage-2 input image are treated as
constants in differentiation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .numgrad import (
    Tensor,
    conv2d,
    dense,
    landmark_nme,
    maxpool2,
    relu,
    softmax,
    softmax_ce,
    transform_points,
)

MODEL_VERSION = "emodan-cascade-1"
CANONICAL_MARGIN = 0.1


class ModelError(ValueError):
    pass


class StageError(RuntimeError):
    """A cascade stage could not run on its input (raised at inference/training time)."""

    def __init__(self, stage: int, reason: str):
        super().__init__(f"stage {stage}: {reason}")
        self.stage = stage


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    n_landmarks: int = 68
    n_stages: int = 2
    n_classes: int = 7
    heatmap_sigma: float = 2.0
    conv1_channels: int = 8
    conv2_channels: int = 16
    fc_width: int = 128
    alpha: float = 0.4
    beta: float = 0.6

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or not self.alpha + self.beta > 0:
            raise ModelError(f"need alpha, beta >= 0 and alpha + beta > 0; got {self.alpha}, {self.beta}")
        if self.n_stages not in (1, 2):
            raise ModelError(f"n_stages must be 1 or 2; got {self.n_stages}")
        if self.input_size % 4:
            raise ModelError("input_size must be divisible by 4 (two 2x2 pools)")
        if self.heatmap_sigma <= 0:
            raise ModelError("heatmap_sigma must be positive")

    @property
    def flat_features(self) -> int:
        return self.conv2_channels * (self.input_size // 4) ** 2


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]
    canonical: np.ndarray
    version: str = MODEL_VERSION

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.values for k, t in self.tensors.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {k: t.grad for k, t in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def assign(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            self.tensors[k].values = v


def stage_param_names(stage: int) -> list[str]:
    p = f"s{stage}."
    return [p + n for n in ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "fc.w", "fc.b", "delta.w", "delta.b")]


def normalize_canonical(mean_shape: np.ndarray, size: int) -> np.ndarray:
    """Scale/translate so the bounding box fills the frame minus a 10% margin."""
    lo, hi = mean_shape.min(axis=0), mean_shape.max(axis=0)
    extent = float((hi - lo).max())
    if not extent > 0:
        raise ModelError("mean training shape is degenerate")
    s = (1.0 - 2 * CANONICAL_MARGIN) * size / extent
    return (mean_shape - (lo + hi) / 2) * s + size / 2.0


def init_params(config: ModelConfig, seed: int, train_shapes) -> ModelParams:
    shapes = np.asarray(train_shapes, dtype=np.float64)
    if shapes.ndim != 3 or shapes.shape[0] == 0:
        raise ModelError("init_params needs a non-empty [N, 68, 2] array of training shapes")
    if shapes.shape[1:] != (config.n_landmarks, 2):
        raise ModelError(f"training shapes must be [N, {config.n_landmarks}, 2]; got {shapes.shape}")
    canonical = normalize_canonical(shapes.mean(axis=0), config.input_size)
    rng = np.random.default_rng(seed)

    def he(shape, fan_in):
        lim = np.sqrt(6.0 / fan_in)
        return rng.uniform(-lim, lim, size=shape)

    c1, c2, fc = config.conv1_channels, config.conv2_channels, config.fc_width
    out = 2 * config.n_landmarks
    tensors: dict[str, np.ndarray] = {}
    for stage in range(1, config.n_stages + 1):
        cin = 1 if stage == 1 else 2
        p = f"s{stage}."
        tensors[p + "conv1.w"] = he((c1, cin, 3, 3), cin * 9)
        tensors[p + "conv1.b"] = np.zeros(c1)
        tensors[p + "conv2.w"] = he((c2, c1, 3, 3), c1 * 9)
        tensors[p + "conv2.b"] = np.zeros(c2)
        tensors[p + "fc.w"] = he((config.flat_features, fc), config.flat_features)
        tensors[p + "fc.b"] = np.zeros(fc)
        tensors[p + "delta.w"] = he((fc, out), fc)
        tensors[p + "delta.b"] = np.zeros(out)
    tensors["emotion.w"] = he((fc, config.n_classes), fc)
    tensors["emotion.b"] = np.zeros(config.n_classes)
    return ModelParams(config, {k: Tensor(v, requires_grad=True, name=k) for k, v in tensors.items()},
                       canonical)


@dataclass
class ForwardOutput:
    S: Tensor                    # [B, 68, 2] final shape, image frame
    stage_shapes: list[Tensor]   # per-stage estimates, image frame
    logits: Tensor | None        # [B, K]
    E: np.ndarray | None         # softmax probabilities [B, K]
    transforms: list[np.ndarray] = field(default_factory=list)   # image->canonical per stage > 1
    stage_inputs: list[np.ndarray] = field(default_factory=list)  # stop-gradient inputs per stage > 1


def _trunk(params: ModelParams, stage: int, x: Tensor) -> Tensor:
    p = f"s{stage}."
    h = maxpool2(relu(conv2d(x, params[p + "conv1.w"], params[p + "conv1.b"])))
    h = maxpool2(relu(conv2d(h, params[p + "conv2.w"], params[p + "conv2.b"])))
    h = h.reshape(x.shape[0], -1)
    return relu(dense(h, params[p + "fc.w"], params[p + "fc.b"]))


def _as_batch(images) -> np.ndarray:
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 2:
        imgs = imgs[None]
    return imgs


def forward(params: ModelParams, images, upto: int | None = None,
            frozen: ForwardOutput | None = None) -> ForwardOutput:
    """Run the cascade on images [B, H, W] (or one [H, W] image) scaled to [0, 1].

    ``upto`` stops after that stage (no emotion head unless it is the last
    stage). ``frozen`` reuses the alignment transforms and stage inputs of an
    earlier output, holding the stop-gradient path fixed; used for finite
    difference checks.
    """
    cfg = params.config
    imgs = _as_batch(images)
    n = cfg.input_size
    if imgs.shape[1:] != (n, n):
        raise ModelError(f"expected {n}x{n} images; got {imgs.shape[1:]}")
    last = cfg.n_stages if upto is None else min(upto, cfg.n_stages)
    B = imgs.shape[0]
    canon = params.canonical

    feats = _trunk(params, 1, Tensor(imgs[:, None]))
    delta = dense(feats, params["s1.delta.w"], params["s1.delta.b"]).reshape(B, cfg.n_landmarks, 2)
    S = delta + canon  # stage-1 transform is the identity
    stage_shapes = [S]
    transforms, stage_inputs = [], []

    for stage in range(2, last + 1):
        k = stage - 2
        if frozen is not None:
            T, x = frozen.transforms[k], frozen.stage_inputs[k]
        else:
            cur = S.values
            if not np.all(np.isfinite(cur)):
                raise StageError(stage, "non-finite shape estimate from previous stage")
            try:
                T = geometry.estimate_similarity_batch(cur, np.broadcast_to(canon, cur.shape))
            except geometry.GeometryError as exc:
                raise StageError(stage, str(exc)) from exc
            warped = geometry.warp_images(imgs, T, (n, n))
            hm = geometry.rasterize_heatmaps(geometry.apply_params(T, cur), (n, n), cfg.heatmap_sigma)
            x = np.stack([warped, hm], axis=1)
        transforms.append(T)
        stage_inputs.append(x)
        feats = _trunk(params, stage, Tensor(x))
        p = f"s{stage}."
        delta = dense(feats, params[p + "delta.w"], params[p + "delta.b"]).reshape(B, cfg.n_landmarks, 2)
        S_canon = transform_points(S, T) + delta
        S = transform_points(S_canon, geometry.invert_params(T))
        stage_shapes.append(S)

    logits = E = None
    if last == cfg.n_stages:
        logits = dense(feats, params["emotion.w"], params["emotion.b"])
        E = softmax(logits.values)
    return ForwardOutput(S, stage_shapes, logits, E, transforms, stage_inputs)


@dataclass
class LossBreakdown:
    total: Tensor
    landmark_term: float
    emotion_term: float
    alpha: float
    beta: float


def joint_loss(out: ForwardOutput, gt_shapes, gt_labels, alpha: float, beta: float) -> LossBreakdown:
    """alpha * NME(S, S*) + beta * CE(logits, E*), batch-averaged.

    The inter-pupil normalizer depends only on ground truth and is constant.
    """
    gt = np.asarray(gt_shapes, dtype=np.float64)
    if gt.ndim == 2:
        gt = gt[None]
    try:
        d = geometry.interpupil_distances(gt)
    except geometry.GeometryError as exc:
        raise ModelError(f"ground truth rejected: {exc}") from exc
    lm = landmark_nme(out.S, gt, d)
    if out.logits is None:
        raise ModelError("joint_loss needs emotion logits (run all stages)")
    ce = softmax_ce(out.logits, np.asarray(gt_labels).reshape(-1))
    total = lm * alpha + ce * beta
    return LossBreakdown(total, float(lm.values), float(ce.values), float(alpha), float(beta))


def landmark_loss(out: ForwardOutput, gt_shapes, alpha: float) -> LossBreakdown:
    """Landmark-only objective on the deepest computed stage (used for stage-wise pretraining)."""
    gt = np.asarray(gt_shapes, dtype=np.float64)
    lm = landmark_nme(out.S, gt, geometry.interpupil_distances(gt))
    return LossBreakdown(lm * alpha, float(lm.values), float("nan"), float(alpha), 0.0)


def predict_batch(params: ModelParams, images):
    out = forward(params, images)
    # argmax returns the first maximum: ties go to the lowest class index
    return out.S.values, np.argmax(out.E, axis=1), out.E


def predict(params: ModelParams, image):
    """Return (shape, label, probabilities) for one [H, W] image."""
    shapes, labels, probs = predict_batch(params, _as_batch(image)[:1])
    return shapes[0], int(labels[0]), probs[0]
