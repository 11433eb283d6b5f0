"""Finite-difference verification of every op and of the full joint loss.

Shared by the ``gradcheck`` command and the test suite. Each check returns the
worst relative error over sampled coordinates together with its tolerance.
Inputs to piecewise-linear ops are kept away from their kinks so central
differences are exact up to rounding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dataset import GenParams, stack, synthesize
from .model import ModelConfig, forward, init_params, joint_loss
from .numgrad import (
    Tensor,
    add,
    conv2d,
    frozen_routing,
    record_routing,
    dense,
    grad_check,
    landmark_nme,
    maxpool2,
    relu,
    reshape,
    scale,
    softmax_ce,
    transform_points,
)

TOL_NONLINEAR = 1e-4
TOL_LINEAR = 1e-6
OP_STEP = 1e-5
# Routing is frozen in the model check, so the step only trades truncation
# against rounding; 1e-4 keeps both below the tolerance for gradients ~1e-8.
MODEL_STEP = 1e-4


@dataclass
class CheckResult:
    seed: int
    target: str     # op or model
    tensor: str     # which input / parameter tensor
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def _coords(rng: np.random.Generator, size: int, k: int) -> list[int]:
    return sorted(rng.choice(size, size=min(k, size), replace=False).tolist())


def _project(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Reduce any tensor to a scalar through a fixed random linear map.

    Weights are unequal (a transposed or misplaced gradient shows up) but
    positive, so projected gradients do not cancel down to rounding level.
    """
    flat = reshape(out, (1, out.values.size))
    w = Tensor(rng.uniform(0.5, 1.5, size=(out.values.size, 1)))
    return dense(flat, w, Tensor(np.zeros(1)))


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(x >= 0, x + gap, x - gap)


def _distinct(rng, shape, gap=0.05):
    """All values distinct by ``gap``, so no 2x2 window has a tie."""
    return rng.permutation(int(np.prod(shape))).reshape(shape) * gap


def _op_cases(rng: np.random.Generator):
    """(op name, {input name: array}, fn(inputs) -> tensor, linear?)"""
    B = 3
    pts = rng.uniform(10, 50, size=(B, 68, 2))
    gt = pts + rng.normal(scale=2.0, size=pts.shape)
    norm = rng.uniform(15, 25, size=B)
    sim = np.column_stack([rng.uniform(0.8, 1.2, B), rng.uniform(-0.3, 0.3, B), rng.normal(size=(B, 2))])
    labels = rng.integers(0, 7, B)
    return [
        ("dense", {"x": rng.normal(size=(B, 6)), "w": rng.normal(size=(6, 4)), "b": rng.normal(size=4)},
         lambda t: dense(t["x"], t["w"], t["b"]), True),
        ("conv2d", {"x": rng.normal(size=(2, 2, 6, 6)), "k": rng.normal(size=(3, 2, 3, 3)),
                    "b": rng.normal(size=3)},
         lambda t: conv2d(t["x"], t["k"], t["b"]), True),
        ("maxpool2", {"x": _distinct(rng, (2, 2, 6, 6))}, lambda t: maxpool2(t["x"]), False),
        ("relu", {"x": _away_from_zero(rng, (4, 5))}, lambda t: relu(t["x"]), False),
        ("softmax_ce", {"logits": rng.normal(size=(B, 7))}, lambda t: softmax_ce(t["logits"], labels), False),
        ("add", {"x": rng.normal(size=(B, 4)), "y": rng.normal(size=4)}, lambda t: add(t["x"], t["y"]), True),
        ("scale", {"x": rng.normal(size=(B, 4))}, lambda t: scale(t["x"], -1.7), True),
        ("reshape", {"x": rng.normal(size=(B, 4))}, lambda t: reshape(t["x"], (2, 6)), True),
        ("transform_points", {"p": pts}, lambda t: transform_points(t["p"], sim), True),
        ("landmark_nme", {"pred": pts}, lambda t: landmark_nme(t["pred"], gt, norm), False),
    ]


def op_checks(seed: int, coords: int = 20) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for op, arrays, fn, linear in _op_cases(rng):
        for name in arrays:
            tensors = {k: Tensor(v.copy(), requires_grad=(k == name), name=k) for k, v in arrays.items()}
            w_seed = int(rng.integers(2**63))

            def f(_x, tensors=tensors, w_seed=w_seed):
                out = fn(tensors)
                return out if out.values.size == 1 else _project(out, np.random.default_rng(w_seed))

            x = tensors[name]
            err = float(grad_check(f, x, step=OP_STEP, coords=_coords(rng, x.values.size, coords)))
            results.append(CheckResult(seed, op, name, err, TOL_LINEAR if linear else TOL_NONLINEAR))
    return results


def model_checks(seed: int, coords: int = 20, batch: int = 2, alpha: float = 0.4,
                 beta: float = 0.6) -> list[CheckResult]:
    """Full joint loss against every parameter tensor.

    The stop-gradient path (alignment transforms, stage-2 inputs) and the
    relu/maxpool routing are held at their base-point values, so central
    differences see the smooth piece of the loss the analytic gradient
    describes.
    """
    rng = np.random.default_rng(seed)
    images, shapes, labels = stack(synthesize(GenParams(seed=seed, count=batch)))
    params = init_params(ModelConfig(alpha=alpha, beta=beta), seed, shapes)
    for name, t in params.tensors.items():
        if name.endswith(".b"):
            # small non-zero biases keep pre-activations off relu kinks
            t.values = rng.normal(scale=0.05, size=t.shape)
    with record_routing() as routing:
        frozen = forward(params, images)

    def loss(_x) -> Tensor:
        with frozen_routing(routing):
            out = forward(params, images, frozen=frozen)
        return joint_loss(out, shapes, labels, alpha, beta).total

    results = []
    for name in sorted(params.tensors):
        x = params[name]
        params.zero_grad()
        err = float(grad_check(loss, x, step=MODEL_STEP, coords=_coords(rng, x.values.size, coords)))
        results.append(CheckResult(seed, "joint_loss", name, err, TOL_NONLINEAR))
    return results


def run_suite(seeds=range(5), coords: int = 20,
              progress: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    results = []
    for seed in seeds:
        for r in op_checks(seed, coords) + model_checks(seed, coords):
            results.append(r)
            if progress:
                progress(r)
    return results
