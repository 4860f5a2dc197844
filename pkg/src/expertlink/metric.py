"""Interaction-based similarity metric.

Two instances are compared item-by-item: squared distances between unit
embeddings are mapped onto a bank of RBF kernels, log-pooled over rows
into per-kernel soft match counts, and reduced by a small MLP to a scalar
score in (-1, 1).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .encoder import xavier_uniform

POOL_FLOOR = 1e-30  # keeps the log finite when a kernel fully underflows

UNIT_NORM_TOL = 1e-6


@dataclass(frozen=True)
class KernelBank:
    mus: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        if self.mus.shape != self.sigmas.shape or self.mus.ndim != 1:
            raise ValueError("kernel means and widths must be equal-length vectors")
        if np.any(self.sigmas <= 0):
            raise ValueError("kernel widths must be positive")

    @property
    def size(self) -> int:
        return self.mus.shape[0]

    @classmethod
    def default(cls) -> "KernelBank":
        """21 kernels: an exact-match kernel at 0 plus means every 0.05."""
        mus = np.round(np.arange(21) * 0.05, 10)
        sigmas = np.full(21, 0.1)
        sigmas[0] = 1e-3
        return cls(mus=mus, sigmas=sigmas)


@dataclass
class MetricParams:
    """Kernel bank plus the scoring MLP tanh(W2^T leaky_relu(W1^T phi))."""

    bank: KernelBank
    w1: dc.Tensor  # (K, K)
    w2: dc.Tensor  # (K, 1)
    slope: float = 0.2

    @classmethod
    def init(cls, prefix: str, bank: KernelBank, rng: np.random.Generator) -> "MetricParams":
        k = bank.size
        # Pooled features reach O(100) magnitudes (log floor is 1e-30), so
        # the first layer starts small to keep pre-activations near O(1).
        w1 = xavier_uniform((k, k), rng, gain=0.01)
        w2 = xavier_uniform((k, 1), rng)
        return cls(bank=bank, w1=dc.param(f"{prefix}.w1", w1),
                   w2=dc.param(f"{prefix}.w2", w2))

    def parameters(self) -> list[dc.Tensor]:
        return [self.w1, self.w2]

    def clone(self, prefix: str) -> "MetricParams":
        return MetricParams(bank=self.bank,
                            w1=dc.param(f"{prefix}.w1", self.w1.data.copy()),
                            w2=dc.param(f"{prefix}.w2", self.w2.data.copy()),
                            slope=self.slope)


def similarity_matrix(embs_a: dc.Tensor, embs_b: dc.Tensor) -> dc.Tensor:
    """alpha[m, n] = ||a_m - b_n||^2 / 4 over unit rows, in [0, 1]."""
    for side, t in (("first", embs_a), ("second", embs_b)):
        if t.data.ndim != 2 or t.data.shape[0] == 0:
            raise ValueError(f"{side} embedding list must be a non-empty 2-D array")
        norms = np.linalg.norm(t.data, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise ValueError(f"{side} embeddings are not unit length (tol {UNIT_NORM_TOL})")
    diff = embs_a.data[:, None, :] - embs_b.data[None, :, :]
    alpha = np.sum(diff * diff, axis=2) / 4.0

    def back(g):
        da = np.einsum("mn,mnd->md", g, diff) / 2.0
        db = -np.einsum("mn,mnd->nd", g, diff) / 2.0
        return [(embs_a, da), (embs_b, db)]

    return _clip01(dc.custom(alpha, (embs_a, embs_b), back))


def _clip01(x: dc.Tensor) -> dc.Tensor:
    # Rounding can push alpha a few ulps outside [0, 1]; clip with
    # pass-through gradient.
    y = np.clip(x.data, 0.0, 1.0)
    return dc.custom(y, (x,), lambda g: [(x, g)])


def kernel_features(alpha: float, bank: KernelBank) -> np.ndarray:
    """Gaussian response of every kernel to one distance value."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return np.exp(-((alpha - bank.mus) ** 2) / (2.0 * bank.sigmas ** 2))


def pool(alpha: dc.Tensor, bank: KernelBank, floor: float = POOL_FLOOR) -> dc.Tensor:
    """Per-kernel log-pooled soft match counts: phi_k = sum_m log sum_n K_k.

    Row sums are floored before the log; floored entries contribute zero
    gradient.
    """
    a = alpha.data
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"pool expects a non-empty 2-D matrix, got shape {a.shape}")
    mus = bank.mus[:, None, None]
    sigmas = bank.sigmas[:, None, None]
    resp = np.exp(-((a[None, :, :] - mus) ** 2) / (2.0 * sigmas ** 2))  # (K, m, n)
    row_sums = resp.sum(axis=2)  # (K, m)
    clamped = row_sums <= floor
    safe = np.maximum(row_sums, floor)
    phi = np.log(safe).sum(axis=1)  # (K,)

    def back(g):
        # d phi_k / d a_mn = resp * (-(a - mu_k) / sigma_k^2) / row_sum, zero when floored.
        weights = np.where(clamped, 0.0, g[:, None] / safe)  # (K, m)
        dresp = resp * (-(a[None, :, :] - mus) / sigmas ** 2)  # (K, m, n)
        da = np.einsum("km,kmn->mn", weights, dresp)
        return [(alpha, da)]

    return dc.custom(phi, (alpha,), back)


def score(params: MetricParams, embs_a: dc.Tensor, embs_b: dc.Tensor) -> dc.Tensor:
    """Scalar similarity in (-1, 1); the first argument is the query/anchor
    side (pooling sums over its rows)."""
    phi = pool(similarity_matrix(embs_a, embs_b), params.bank)
    hidden = dc.leaky_relu(dc.linear(params.w1, phi), params.slope)
    out = dc.tanh(dc.linear(params.w2, hidden))
    return dc.tsum(out)
