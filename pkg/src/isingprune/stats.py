"""Activity and redundancy measures for prunable units."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionError, InputError, NumericalError

LEVELS = 256
DEFAULT_EPS = 1e-6


def _values(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def quantize_feature_map(fmap) -> np.ndarray:
    """Map non-negative activations to {0..255} by round(255 * f / max f).

    Ties round half away from zero. A map whose maximum is 0 quantizes to all
    zeros.
    """
    f = _values(fmap).reshape(-1)
    if f.size and f.min() < 0:
        raise InputError(f"feature map has negative value {f.min()}; expected post-ReLU input")
    if not f.size:
        return np.zeros(0, dtype=np.int64)
    top = f.max()
    if top == 0:
        return np.zeros(f.size, dtype=np.int64)
    return np.floor(255.0 * f / top + 0.5).astype(np.int64)


def pmf(q) -> np.ndarray:
    q = np.asarray(q).reshape(-1)
    if q.size == 0:
        raise InputError("pmf of an empty map")
    if q.min() < 0 or q.max() >= LEVELS:
        raise InputError("quantized values must lie in [0, 255]")
    return np.bincount(q, minlength=LEVELS) / q.size


def entropy_of_pmf(p) -> float:
    p = np.asarray(p)
    nz = p[p > 0]
    h = -np.sum(nz * np.log2(nz))
    return float(h) + 0.0  # turn -0.0 into 0.0


def entropy(fmap) -> float:
    """Shannon entropy (bits) of the 8-bit quantized feature map."""
    return entropy_of_pmf(pmf(quantize_feature_map(fmap)))


def channel_entropies(maps) -> np.ndarray:
    """Entropy per channel of a (B, C, H, W) batch, pooling batch and spatial axes."""
    m = _values(maps)
    if m.ndim != 4:
        raise DimensionError(f"expected (B, C, H, W) feature maps, got {m.shape}")
    if m.size and m.min() < 0:
        raise InputError("feature maps must be non-negative")
    B, C, H, W = m.shape
    per = m.transpose(1, 0, 2, 3).reshape(C, -1)
    top = per.max(axis=1, keepdims=True)
    safe = np.where(top > 0, top, 1.0)
    q = np.floor(255.0 * per / safe + 0.5).astype(np.int64)
    counts = np.bincount((q + LEVELS * np.arange(C)[:, None]).reshape(-1), minlength=LEVELS * C).reshape(C, LEVELS)
    p = counts / per.shape[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=1) + 0.0


@dataclass
class KernelDistribution:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    @property
    def K(self) -> int:
        return self.mean.size


def fit_kernel_distribution(kernel, eps: float = DEFAULT_EPS) -> KernelDistribution:
    """Gaussian over the K = K1*K2 spatial positions, one sample per input channel.

    The covariance is the biased (divide-by-N) estimate plus ``eps * I``.
    """
    w = _values(kernel)
    if w.ndim != 3:
        raise DimensionError(f"kernel must be (Cin, K1, K2), got {w.shape}")
    if w.shape[0] < 1:
        raise InputError("kernel needs at least one input channel")
    x = w.reshape(w.shape[0], -1)
    mu = x.mean(axis=0)
    d = x - mu
    cov = d.T @ d / x.shape[0] + eps * np.eye(x.shape[1])
    return KernelDistribution(mu, cov, x.shape[0])


def fit_layer_distributions(weights, eps: float = DEFAULT_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Means (Cout, K) and covariances (Cout, K, K) for every kernel of a conv layer."""
    w = _values(weights)
    Cout, Cin = w.shape[:2]
    x = w.reshape(Cout, Cin, -1)
    mu = x.mean(axis=1)
    d = x - mu[:, None, :]
    cov = np.einsum("onk,onj->okj", d, d) / Cin + eps * np.eye(x.shape[2])
    return mu, cov


def _cholesky(cov, which):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        cond = np.linalg.cond(cov)
        raise NumericalError(f"covariance of {which} is not positive definite (condition number {cond:.3e})") from None


def kl_divergence(ni: KernelDistribution, nj: KernelDistribution) -> float:
    """KL(N_i || N_j) for two K-dimensional Gaussians, via Cholesky factors."""
    if ni.K != nj.K:
        raise DimensionError(f"KL between distributions of dimension {ni.K} and {nj.K}")
    Li = _cholesky(ni.cov, "N_i")
    Lj = _cholesky(nj.cov, "N_j")
    A = solve_triangular(Lj, Li, lower=True)
    z = solve_triangular(Lj, nj.mean - ni.mean, lower=True)
    logdet = 2.0 * (np.log(np.diag(Lj)).sum() - np.log(np.diag(Li)).sum())
    kl = 0.5 * (np.sum(A * A) + z @ z - ni.K + logdet)
    return max(float(kl), 0.0)


def pairwise_kl(mu: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Matrix M with M[i, j] = KL(N_i || N_j) for a stack of Gaussians.

    The diagonal is 0.
    """
    n, K = mu.shape
    if n == 0:
        return np.zeros((0, 0))
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        cond = max(np.linalg.cond(c) for c in cov)
        raise NumericalError(f"kernel covariance is not positive definite (worst condition number {cond:.3e})") from None
    logdiag = np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
    # A[i, j] = Lj^{-1} Li ; z[i, j] = Lj^{-1} (mu_j - mu_i)
    Lj = np.broadcast_to(L[None, :, :, :], (n, n, K, K))
    Li = np.broadcast_to(L[:, None, :, :], (n, n, K, K))
    A = np.linalg.solve(Lj, Li)
    dm = mu[None, :, :] - mu[:, None, :]
    z = np.linalg.solve(Lj, dm[..., None])[..., 0]
    kl = 0.5 * ((A * A).sum(axis=(2, 3)) + (z * z).sum(axis=2) - K + 2.0 * (logdiag[None, :] - logdiag[:, None]))
    kl = np.maximum(kl, 0.0)
    np.fill_diagonal(kl, 0.0)
    return kl


def dense_activation_measure(a) -> np.ndarray | float:
    """tanh of the mean post-ReLU activation; dead units map to 0."""
    a = np.asarray(a, dtype=np.float64)
    if a.size and a.min() < 0:
        raise InputError("activation values must be non-negative")
    out = np.tanh(a)
    return float(out) if out.ndim == 0 else out
