"""Similarity transforms, image warping, landmark heatmaps and the NME metric.

Shapes are ``(68, 2)`` float arrays of ``(x, y)`` pixel coordinates; pixel
``(row i, col j)`` has its center at ``x = j, y = i``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

N_LANDMARKS = 68
RIGHT_EYE = slice(36, 42)
LEFT_EYE = slice(42, 48)
MIN_INTERPUPIL = 1e-6


class GeometryError(ValueError):
    pass


def as_shape(points) -> np.ndarray:
    s = np.asarray(points, dtype=np.float64)
    if s.shape != (N_LANDMARKS, 2):
        raise GeometryError(f"a shape has {N_LANDMARKS} (x, y) points; got array of shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise GeometryError("shape has non-finite coordinates")
    return s


@dataclass(frozen=True)
class SimilarityTransform:
    """p -> (a*x - b*y + tx, b*x + a*y + ty)."""

    a: float = 1.0
    b: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    @classmethod
    def from_params(cls, p) -> "SimilarityTransform":
        a, b, tx, ty = (float(v) for v in p)
        return cls(a, b, tx, ty)

    @property
    def params(self) -> np.ndarray:
        return np.array([self.a, self.b, self.tx, self.ty])

    @property
    def scale(self) -> float:
        return float(np.hypot(self.a, self.b))

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        x, y = p[..., 0], p[..., 1]
        return np.stack([self.a * x - self.b * y + self.tx, self.b * x + self.a * y + self.ty], axis=-1)

    def inverse(self) -> "SimilarityTransform":
        return invert_transform(self)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self ∘ other``: apply ``other`` first."""
        a = self.a * other.a - self.b * other.b
        b = self.a * other.b + self.b * other.a
        tx, ty = self.apply([other.tx, other.ty])
        return SimilarityTransform(a, b, float(tx), float(ty))


def estimate_similarity(src, dst) -> SimilarityTransform:
    """Least-squares similarity T minimizing sum ||T(src_i) - dst_i||^2."""
    params = estimate_similarity_batch(np.asarray(src, dtype=np.float64)[None],
                                       np.asarray(dst, dtype=np.float64)[None])
    return SimilarityTransform.from_params(params[0])


def estimate_similarity_batch(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Row-wise closed-form fit for point sets of shape [B, N, 2]; returns [B, 4] params."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 3 or src.shape[-1] != 2:
        raise GeometryError(f"point sets must both be [B, N, 2]; got {src.shape} and {dst.shape}")
    mu_s = src.mean(axis=1)
    mu_d = dst.mean(axis=1)
    s = src - mu_s[:, None]
    d = dst - mu_d[:, None]
    var = (s * s).sum(axis=(1, 2))
    bad = ~(var > 1e-12)
    if np.any(bad):
        raise GeometryError(f"degenerate source shape (zero variance) at batch index {int(np.argmax(bad))}")
    a = (s * d).sum(axis=(1, 2)) / var
    b = (s[..., 0] * d[..., 1] - s[..., 1] * d[..., 0]).sum(axis=1) / var
    tx = mu_d[:, 0] - (a * mu_s[:, 0] - b * mu_s[:, 1])
    ty = mu_d[:, 1] - (b * mu_s[:, 0] + a * mu_s[:, 1])
    return np.stack([a, b, tx, ty], axis=1)


def apply_transform(t: SimilarityTransform, shape) -> np.ndarray:
    return t.apply(shape)


def invert_transform(t: SimilarityTransform) -> SimilarityTransform:
    return SimilarityTransform.from_params(invert_params(t.params[None])[0])


def invert_params(params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    a, b, tx, ty = params.T
    r = a * a + b * b
    if np.any(~(r > 0)):
        raise GeometryError("similarity transform is not invertible (a^2 + b^2 == 0)")
    ia, ib = a / r, -b / r
    return np.stack([ia, ib, -(ia * tx - ib * ty), -(ib * tx + ia * ty)], axis=1)


def apply_params(params: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply per-row params [B, 4] to points [B, N, 2]."""
    a, b, tx, ty = (params[:, i, None] for i in range(4))
    x, y = points[..., 0], points[..., 1]
    return np.stack([a * x - b * y + tx, b * x + a * y + ty], axis=-1)


def warp_image(img, t: SimilarityTransform, out_size: tuple[int, int] | None = None) -> np.ndarray:
    """out(p) = img(T^-1(p)), bilinear, with zeros outside the source."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise GeometryError(f"warp_image expects a single-channel HxW image; got {img.shape}")
    h, w = out_size if out_size is not None else img.shape
    inv = invert_transform(t).params[None]
    return kernels.warp_bilinear(img[None], inv, h, w)[0]


def warp_images(imgs: np.ndarray, params: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    return kernels.warp_bilinear(imgs, invert_params(params), out_size[0], out_size[1])


def rasterize_heatmap(shape, size: tuple[int, int], sigma: float = 2.0) -> np.ndarray:
    """Pointwise max over landmarks of exp(-||p - s_i||^2 / (2 sigma^2))."""
    if not sigma > 0:
        raise GeometryError(f"heatmap sigma must be positive; got {sigma}")
    pts = np.asarray(shape, dtype=np.float64).reshape(1, -1, 2)
    return kernels.heatmap(pts, size[0], size[1], sigma)[0]


def rasterize_heatmaps(shapes: np.ndarray, size: tuple[int, int], sigma: float = 2.0) -> np.ndarray:
    if not sigma > 0:
        raise GeometryError(f"heatmap sigma must be positive; got {sigma}")
    return kernels.heatmap(shapes, size[0], size[1], sigma)


def eye_centers(shapes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    shapes = np.asarray(shapes, dtype=np.float64)
    return shapes[..., RIGHT_EYE, :].mean(axis=-2), shapes[..., LEFT_EYE, :].mean(axis=-2)


def interpupil_distances(shapes: np.ndarray) -> np.ndarray:
    right, left = eye_centers(shapes)
    d = np.linalg.norm(left - right, axis=-1)
    if np.any(~(d >= MIN_INTERPUPIL)):
        raise GeometryError(f"degenerate inter-pupil distance (< {MIN_INTERPUPIL} px)")
    return d


def interpupil_distance(shape) -> float:
    return float(interpupil_distances(as_shape(shape)[None])[0])


def normalized_landmark_error(pred, gt) -> float:
    """Mean point-to-point distance divided by the ground truth inter-pupil distance."""
    pred, gt = as_shape(pred), as_shape(gt)
    d = interpupil_distance(gt)
    return float(np.linalg.norm(pred - gt, axis=1).mean() / d)


def normalized_landmark_errors(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-sample NME for [B, 68, 2] arrays."""
    d = interpupil_distances(gt)
    return np.linalg.norm(pred - gt, axis=-1).mean(axis=-1) / d
