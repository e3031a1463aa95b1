"""Optical-density stain deconvolution and the log-magnitude DCT layer."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn import Parameter, Tensor, record

LOG10 = np.log(10.0)


def rgb_to_od(image, eps: float = 1.0) -> np.ndarray:
    """Beer-Lambert optical density ``-log10((p + eps) / (255 + eps))``.

    Works elementwise, so any array shape is accepted. Pixels must lie in
    [0, 255].
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    img = np.asarray(image, dtype=np.float64)
    if img.size and (img.min() < 0 or img.max() > 255 or not np.all(np.isfinite(img))):
        raise ValueError("pixel values must lie in [0, 255]")
    od = -np.log10((img + eps) / (255.0 + eps))
    # exact zero for fully transmitted light instead of -0.0
    return od + 0.0


def init_stain_weights(rng: np.random.Generator | None = None, sigma: float = 0.01, init=None) -> Parameter:
    """3x3 stain deconvolution matrix: identity plus small Gaussian noise,
    or a user-supplied 3x3 initialisation."""
    if init is not None:
        m = np.asarray(init, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError("stain matrix must be 3x3")
        return Parameter(m)
    rng = np.random.default_rng() if rng is None else rng
    return Parameter(np.eye(3) + sigma * rng.standard_normal((3, 3)))


def sd_forward(od: Tensor, w: Tensor) -> Tensor:
    """Per-pixel linear map ``out[j] = sum_c w[j, c] * od[c]``.

    Accepts a single image [3,H,W] or a batch [N,3,H,W].
    """
    od = od if isinstance(od, Tensor) else Tensor(od)
    if w.shape != (3, 3) or od.shape[-3] != 3:
        raise ValueError("expected a 3x3 stain matrix and 3-channel input")
    batched = od.ndim == 4
    x = od.data if batched else od.data[None]
    out = np.einsum("jc,nchw->njhw", w.data, x, optimize=True)

    def backward(g):
        gb = g if batched else g[None]
        dod = np.einsum("jc,njhw->nchw", w.data, gb, optimize=True)
        dw = np.einsum("njhw,nchw->jc", gb, x, optimize=True)
        return (dod if batched else dod[0]), dw

    return record(out if batched else out[0], (od, w), backward)


@lru_cache(maxsize=32)
def _dct_basis(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    basis = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    basis[0] /= np.sqrt(2.0)
    basis.setflags(write=False)
    return basis


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal type-II DCT matrix ``M`` so that ``M @ x`` transforms a column."""
    return _dct_basis(n)


def _separable(x: np.ndarray, left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """``left @ x @ right`` over the last two axes, as two large GEMMs."""
    *lead, H, W = x.shape
    B = int(np.prod(lead, dtype=np.int64))
    y = x.reshape(B * H, W) @ right
    y = y.reshape(B, H, -1).transpose(1, 0, 2).reshape(H, -1)
    y = left @ y
    return np.ascontiguousarray(y.reshape(left.shape[0], B, -1).transpose(1, 0, 2)).reshape(*lead, left.shape[0], -1)


def dct2(x) -> np.ndarray:
    """Orthonormal 2-D type-II DCT over the last two axes."""
    x = np.asarray(x, dtype=np.float64)
    return _separable(x, _dct_basis(x.shape[-2]), _dct_basis(x.shape[-1]).T)


def idct2(c) -> np.ndarray:
    """Inverse of :func:`dct2`."""
    c = np.asarray(c, dtype=np.float64)
    return _separable(c, _dct_basis(c.shape[-2]).T, _dct_basis(c.shape[-1]))


def dct_layer_forward(z: Tensor) -> Tensor:
    """``log10(1 + |DCT2(z)|)`` per channel; any leading axes are batch/channel axes.

    The derivative of ``log10(1 + |c|)`` is taken as 0 at ``c == 0``.
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    ch, cw = _dct_basis(z.shape[-2]).astype(z.dtype), _dct_basis(z.shape[-1]).astype(z.dtype)
    coeffs = _separable(z.data, ch, cw.T)
    mag = np.abs(coeffs)
    out = np.log10(1.0 + mag)

    def backward(g):
        gc = g * np.sign(coeffs) / ((1.0 + mag) * LOG10)
        return (_separable(gc, ch.T, cw),)

    return record(out, (z,), backward)


# ---------------------------------------------------------------------------
# sparsity statistics


def top_energy_fraction(coeffs, fraction: float = 0.05) -> float:
    """Share of total energy held by the largest ``fraction`` of coefficients."""
    e = np.sort(np.square(np.asarray(coeffs, dtype=np.float64)).ravel())[::-1]
    total = e.sum()
    if total == 0:
        return 1.0
    k = max(1, int(np.ceil(fraction * e.size)))
    return float(min(1.0, e[:k].sum() / total))


def gini(values) -> float:
    """Gini coefficient of non-negative values (0 = uniform, ->1 = one spike)."""
    v = np.sort(np.abs(np.asarray(values, dtype=np.float64)).ravel())
    n = v.size
    total = v.sum()
    if n == 0 or total == 0:
        return 0.0
    ranks = np.arange(1, n + 1)
    return float(np.clip((2.0 * (ranks * v).sum()) / (n * total) - (n + 1.0) / n, 0.0, 1.0))


@dataclass
class SparsityReport:
    image_ids: list
    labels: list
    top_energy: np.ndarray
    gini: np.ndarray
    top_fraction: float = 0.05
    by_class: dict = field(default_factory=dict)

    def class_mean(self, label, stat: str = "top_energy") -> float:
        return self.by_class[label][stat][0]

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            pct = round(self.top_fraction * 100)
            writer.writerow(["image_id", "label", f"top{pct}_energy_fraction", "gini"])
            for iid, lab, e, g in zip(self.image_ids, self.labels, self.top_energy, self.gini):
                writer.writerow([iid, lab, repr(float(e)), repr(float(g))])


def sparsity_stats(
    images: Sequence,
    labels: Sequence,
    top_fraction: float = 0.05,
    image_ids: Sequence | None = None,
) -> SparsityReport:
    """DCT-domain energy concentration and Gini coefficient per image, with
    per-class mean and standard deviation.

    Multi-channel images are transformed channel-wise and their coefficients
    pooled.
    """
    if len(images) == 0:
        raise ValueError("sparsity_stats needs at least one image")
    if len(images) != len(labels):
        raise ValueError("images and labels differ in length")
    energies, ginis = [], []
    for img in images:
        c = dct2(img.data if isinstance(img, Tensor) else img)
        energies.append(top_energy_fraction(c, top_fraction))
        ginis.append(gini(c))
    energies = np.array(energies)
    ginis = np.array(ginis)
    labels = list(labels)
    lab_arr = np.array(labels)
    by_class = {}
    for lab in sorted(set(labels)):
        m = lab_arr == lab
        by_class[lab] = {
            "top_energy": (float(energies[m].mean()), float(energies[m].std())),
            "gini": (float(ginis[m].mean()), float(ginis[m].std())),
        }
    ids = list(image_ids) if image_ids is not None else list(range(len(labels)))
    return SparsityReport(ids, labels, energies, ginis, top_fraction, by_class)
