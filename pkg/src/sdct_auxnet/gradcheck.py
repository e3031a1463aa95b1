"""Central-difference checks for every differentiable op and the full network.

Inputs are built so that no coordinate sits within 0.1 of a kink (ReLU at 0,
max-pool ties, ``|c|`` at 0 in the DCT layer).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .backbone import BackboneConfig, SdctNetModel, bilinear_pool, spectral_average
from .nn import Parameter, Tensor
from .sdct import dct_layer_forward, idct2, sd_forward

MARGIN = 0.1


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error < self.tol)


def _away_from_zero(rng, shape, margin=MARGIN) -> np.ndarray:
    u = rng.standard_normal(shape)
    return np.sign(u) * (margin + np.abs(u))


def _distinct(rng, shape, gap=2 * MARGIN) -> np.ndarray:
    n = int(np.prod(shape))
    return (rng.permutation(n) - n / 2.0).reshape(shape) * gap


def _op_cases(rng: np.random.Generator, side: int):
    t = lambda a: Tensor(np.asarray(a, dtype=np.float64))  # noqa: E731
    x = t(rng.standard_normal((2, 3, side, side)))
    w = Parameter(rng.standard_normal((4, 3, 3, 3)) * 0.3)
    b = Parameter(rng.standard_normal(4))
    yield "conv2d", lambda x, w, b: nn.conv2d(x, w, b, stride=2, padding=1), [x, w, b]

    xb = t(rng.standard_normal((4, 3, 6, 6)) * 2 + 1)
    gamma, beta = Parameter(rng.uniform(0.5, 1.5, 3)), Parameter(rng.standard_normal(3))
    rm, rv = np.zeros(3), np.ones(3)
    yield "batchnorm2d", lambda x, g, be: nn.batchnorm2d(x, g, be, rm, rv, training=True), [xb, gamma, beta]
    yield "batchnorm2d_eval", lambda x, g, be: nn.batchnorm2d(x, g, be, rm, rv, training=False), [
        t(rng.standard_normal((2, 3, 5, 5))), gamma, beta]

    yield "maxpool2d", lambda x: nn.maxpool2d(x), [t(_distinct(rng, (2, 3, 8, 9)))]
    yield "relu", nn.relu, [t(_away_from_zero(rng, (3, 4, 5)))]

    wl, bl = Parameter(rng.standard_normal((3, 7))), Parameter(rng.standard_normal(3))
    yield "linear", nn.linear, [t(rng.standard_normal((5, 7))), wl, bl]
    yield "log_softmax", nn.log_softmax, [t(rng.standard_normal((6, 2)) * 3)]
    targets = rng.integers(0, 2, 6)
    yield "nll_loss", lambda lp: nn.nll_loss(lp, targets), [t(rng.standard_normal((6, 2)))]
    weights = rng.standard_normal((4, 3))
    yield "weighted_sum", lambda x: nn.weighted_sum(x, weights), [t(rng.standard_normal((4, 3)))]

    od = t(rng.uniform(0, 2.4, (2, 3, side, side)))
    yield "sd_forward", sd_forward, [od, Parameter(np.eye(3) + 0.1 * rng.standard_normal((3, 3)))]
    coeffs = _away_from_zero(rng, (2, 3, side, side))
    yield "dct_layer", dct_layer_forward, [t(idct2(coeffs))]
    yield "bilinear_pool", bilinear_pool, [t(rng.standard_normal((2, 5, 3, 4)))]
    yield "spectral_average", spectral_average, [t(rng.standard_normal((2, 5, 3, 4)))]


def _composite(rng: np.random.Generator, side: int, batch: int = 4):
    """Loss of the whole network, w.r.t. every parameter tensor."""
    model = SdctNetModel(BackboneConfig(input_side=side), seed=int(rng.integers(2**31)))
    images = rng.uniform(0, 255, (batch, 3, side, side))
    labels = np.arange(batch) % 2
    names = list(model.params)

    def fn(*params):
        return nn.nll_loss(model.forward(images, training=True), labels)

    return fn, [model.params[n] for n in names]


def run_suite(tol: float = 1e-4, side: int = 32, composite_side: int = 40, max_coords: int = 200,
              composite_coords: int = 25, seed: int = 0) -> list[CheckResult]:
    """Max relative error per op, plus the SD -> DCT -> backbone -> bilinear ->
    linear -> log-softmax -> NLL composite.

    The backbone's four pools need an input side of at least 33, so the
    composite runs at ``composite_side``; the per-op checks use ``side``.
    """
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, inputs in _op_cases(rng, side):
        err = nn.grad_check(fn, inputs, max_coords=max_coords, seed=seed)
        results.append(CheckResult(name, err, tol))
    fn, inputs = _composite(rng, composite_side)
    err = nn.grad_check(fn, inputs, max_coords=composite_coords, seed=seed)
    results.append(CheckResult("composite", err, tol))
    return results
