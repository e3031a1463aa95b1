"""Minimal reverse-mode differentiation over numpy arrays.

Only the operations the network needs are provided. Each operation records
itself on the innermost active :class:`GradTape`; with no tape active the
operations run as plain numpy code and return tensors without history.

    with GradTape() as tape:
        loss = nll_loss(log_softmax(linear(x, w, b)), y)
    tape.backward(loss)
    sgd_step([w, b], lr=0.01)
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Parameter",
    "GradTape",
    "record",
    "conv2d",
    "batchnorm2d",
    "maxpool2d",
    "relu",
    "linear",
    "log_softmax",
    "nll_loss",
    "weighted_sum",
    "sgd_step",
    "grad_check",
]


class Tensor:
    """Dense float array plus an optional gradient slot."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape}, dtype={self.dtype})"


class Parameter(Tensor):
    """A learnable tensor. ``grad`` always exists and matches ``data`` in shape."""

    def __init__(self, data, trainable: bool = True, dtype=None):
        super().__init__(np.array(data, dtype=dtype), requires_grad=trainable)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        if self.grad is None or self.grad.shape != self.data.shape:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def assign(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ValueError(f"shape mismatch: {value.shape} vs {self.data.shape}")
        self.data = value.copy()
        self.zero_grad()


_ACTIVE_TAPES: list["GradTape"] = []


class GradTape:
    """Ordered record of differentiable operations executed inside a ``with`` block.

    A tape is replayed at most once; record a new forward pass for every
    backward pass.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._replayed = False

    def __enter__(self) -> "GradTape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        if self._replayed:
            raise RuntimeError("tape already replayed")
        self._records.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        if self._replayed:
            raise RuntimeError("tape already replayed; record a new forward pass")
        if loss.size != 1:
            raise ValueError("backward needs a scalar loss")
        self._replayed = True

        for out, inputs, _ in self._records:
            out.grad = None
            for t in inputs:
                if isinstance(t, Parameter):
                    t.zero_grad()
                elif t.requires_grad:
                    t.grad = None
        loss.grad = np.ones_like(loss.data)

        for out, inputs, backward in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            in_grads = backward(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = np.array(gi, dtype=t.data.dtype)
                else:
                    t.grad += gi
            # intermediate gradients are released once consumed
            out.grad = None


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out_data`` as a tensor and register ``backward`` on the active tape.

    ``backward(g)`` must return one gradient (or None) per input.
    """
    out = Tensor(out_data)
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPES[-1].record(out, tuple(inputs), backward)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, NCHW layout."""
    x = _as_tensor(x)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects x[N,C,H,W] and weight[F,C,kh,kw]")
    N, C, H, W = x.shape
    F, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ValueError(f"input has {C} channels but weight expects {Cw}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    # cols: (C*kh*kw, N*Ho*Wo)
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(C * kh * kw, N * Ho * Wo)
    out = weight.data.reshape(F, -1) @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(F, N, Ho, Wo).transpose(1, 0, 2, 3))

    cache = (cols, weight.data, x.shape, stride, padding)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        grads = _conv2d_backward(g, cache)
        return grads if bias is not None else grads[:2]

    return record(out, inputs, backward)


def _conv2d_backward(g: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cols, w, xshape, stride, padding = cache
    N, C, H, W = xshape
    F, _, kh, kw = w.shape
    Ho, Wo = g.shape[2], g.shape[3]
    gm = g.transpose(1, 0, 2, 3).reshape(F, N * Ho * Wo)
    dw = (gm @ cols.T).reshape(w.shape)
    db = gm.sum(axis=1)

    dcols = (w.transpose(2, 3, 1, 0).reshape(kh * kw * C, F) @ gm).reshape(kh, kw, C, N, Ho, Wo)
    dxp = np.zeros((C, N, H + 2 * padding, W + 2 * padding), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[i, j]
    dx = np.ascontiguousarray(dxp[:, :, padding:padding + H, padding:padding + W].transpose(1, 0, 2, 3))
    return dx, dw, db


# ---------------------------------------------------------------------------
# normalisation, pooling, activations


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    num_batches: np.ndarray | None = None,
) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch statistics are used and the running buffers are
    updated in place (running variance uses the unbiased batch variance).
    When a 0-d counter ``num_batches`` is passed, the first training batch
    overwrites the buffers instead of blending into their (0, 1) start values,
    and the counter is incremented in place.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    N, C, H, W = x.shape
    m = N * H * W
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        unbiased = var * m / (m - 1) if m > 1 else var
        rate = 1.0 if num_batches is not None and num_batches == 0 else momentum
        running_mean *= 1.0 - rate
        running_mean += rate * mean
        running_var *= 1.0 - rate
        running_var += rate * unbiased
        if num_batches is not None:
            num_batches += 1
    else:
        mean = np.asarray(running_mean, dtype=x.dtype)
        var = np.asarray(running_var, dtype=x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            dx = (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv[None, :, None, None]
        return dx, dgamma, dbeta

    return record(out, (x, gamma, beta), backward)


def maxpool2d(x: Tensor, size: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/columns are dropped (floor)."""
    if stride != size:
        raise NotImplementedError("only non-overlapping pooling (stride == size) is supported")
    N, C, H, W = x.shape
    if H < size or W < size:
        raise ValueError(f"input {H}x{W} smaller than pooling window {size}")
    Ho, Wo = H // size, W // size
    blocks = (
        x.data[:, :, : Ho * size, : Wo * size]
        .reshape(N, C, Ho, size, Wo, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(N, C, Ho, Wo, size * size)
    )
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((N, C, Ho, Wo, size * size), dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        dx = np.zeros(x.shape, dtype=g.dtype)
        dx[:, :, : Ho * size, : Wo * size] = (
            gb.reshape(N, C, Ho, Wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho * size, Wo * size)
        )
        return (dx,)

    return record(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return record(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x[N, d] and weight[out, d]."""
    x = _as_tensor(x)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"input dim {x.shape[-1]} does not match weight dim {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        grads = (g @ weight.data, g.T @ x.data)
        return grads + (g.sum(axis=0),) if bias is not None else grads

    return record(out, inputs, backward)


def log_softmax(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return record(out, (x,), backward)


def nll_loss(log_probs: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets."""
    targets = np.asarray(targets)
    N, K = log_probs.shape
    if targets.shape != (N,):
        raise ValueError("targets must be a length-N vector")
    if not np.issubdtype(targets.dtype, np.integer):
        if not np.all(np.equal(np.mod(targets, 1), 0)):
            raise ValueError("targets must be integer class indices")
        targets = targets.astype(np.int64)
    if targets.min() < 0 or targets.max() >= K:
        raise ValueError(f"target out of range [0, {K - 1}]")
    rows = np.arange(N)
    loss = -log_probs.data[rows, targets].mean()

    def backward(g):
        d = np.zeros_like(log_probs.data)
        d[rows, targets] = -g / N
        return (d,)

    return record(np.asarray(loss, dtype=log_probs.dtype), (log_probs,), backward)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(weights * x)``; used to reduce tensor outputs for checking."""
    weights = np.broadcast_to(np.asarray(weights, dtype=x.dtype), x.shape)
    return record(np.asarray((x.data * weights).sum()), (x,), lambda g: (g * weights,))


# ---------------------------------------------------------------------------
# optimisation and verification


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    """Plain gradient descent update followed by zeroing the gradients."""
    for p in params:
        if p.trainable:
            p.data -= lr * p.grad
        p.zero_grad()


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps the input tensors to a tensor; non-scalar outputs are reduced
    with a fixed random projection so that no gradient cancels by symmetry.
    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    With ``max_coords`` only a random subset of coordinates per input is
    perturbed.
    """
    rng = np.random.default_rng(seed)
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.data = np.ascontiguousarray(t.data)

    with GradTape() as tape:
        out = fn(*inputs)
        proj = rng.standard_normal(out.shape) if out.size > 1 else np.ones(out.shape)
        loss = weighted_sum(out, proj)
    tape.backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def value() -> float:
        return float((fn(*inputs).data * proj).sum())

    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + step
            fp = value()
            flat[k] = orig - step
            fm = value()
            flat[k] = orig
            num = (fp - fm) / (2 * step)
            a = ga.reshape(-1)[k]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst
