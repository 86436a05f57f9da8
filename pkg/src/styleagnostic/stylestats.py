"""Per-channel feature statistics and the style/content randomization modules.

Style is the per-channel mean and standard deviation of a feature map;
content is the map once those statistics are normalized out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor

EPS_STATS = 1e-5


@dataclass
class StyleStats:
    """Per-sample channel statistics, ``mu`` and ``sigma`` shaped (N, D)."""

    mu: Tensor
    sigma: Tensor

    @property
    def channels(self) -> int:
        return self.mu.shape[-1]

    def maps(self) -> tuple[Tensor, Tensor]:
        n, d = self.mu.shape
        return nc.reshape(self.mu, (n, d, 1, 1)), nc.reshape(self.sigma, (n, d, 1, 1))


@dataclass
class RandomizedStyle:
    mu_hat: Tensor
    sigma_hat: Tensor
    alpha: np.ndarray

    def as_stats(self) -> StyleStats:
        return StyleStats(self.mu_hat, self.sigma_hat)


def _batched(z: Tensor) -> Tensor:
    if z.ndim == 3:
        return nc.reshape(z, (1,) + z.shape)
    if z.ndim != 4:
        raise ValueError(f"expected a (D,H,W) or (N,D,H,W) feature map, got shape {z.shape}")
    return z


def _moments(z: Tensor, eps: float) -> tuple[Tensor, Tensor]:
    # keepdims moments, shaped (N, D, 1, 1)
    if z.shape[2] * z.shape[3] == 0:
        raise ValueError("feature map has zero spatial extent")
    if eps <= 0:
        raise ValueError("eps_stats must be positive")
    mu = nc.mean(z, axis=(2, 3), keepdims=True)
    var = nc.mean(nc.square(z - mu), axis=(2, 3), keepdims=True)
    return mu, nc.sqrt(var + eps)


def channel_stats(z: Tensor, eps_stats: float = EPS_STATS) -> StyleStats:
    """Spatial mean and ``sqrt(spatial variance + eps)`` for every channel.

    A single (D, H, W) map is treated as a batch of one.
    """
    z = _batched(z)
    mu, sigma = _moments(z, eps_stats)
    n, d = z.shape[:2]
    return StyleStats(nc.reshape(mu, (n, d)), nc.reshape(sigma, (n, d)))


def adain(content: Tensor, target: StyleStats, eps_stats: float = EPS_STATS) -> Tensor:
    """Re-normalize ``content`` so each channel takes the target mean and std."""
    squeeze = content.ndim == 3
    z = _batched(content)
    if target.channels != z.shape[1]:
        raise ValueError(f"channel mismatch: content has {z.shape[1]}, target style has {target.channels}")
    if target.mu.shape[0] not in (1, z.shape[0]):
        raise ValueError(f"batch mismatch: content has {z.shape[0]}, target style has {target.mu.shape[0]}")
    mu, sigma = _moments(z, eps_stats)
    t_mu, t_sigma = target.maps()
    out = t_sigma * ((z - mu) / sigma) + t_mu
    return nc.reshape(out, content.shape) if squeeze else out


def _alpha_map(alpha, n: int, dtype) -> np.ndarray:
    a = np.asarray(alpha, dtype=dtype)
    if a.ndim == 0:
        a = np.full(n, a, dtype=dtype)
    if a.shape != (n,):
        raise ValueError(f"alpha must be a scalar or a length-{n} vector, got shape {a.shape}")
    if np.any(a < 0) or np.any(a > 1):
        raise ValueError("alpha must lie in [0, 1]")
    return a


def randomized_style(own: StyleStats, partner: StyleStats, alpha) -> RandomizedStyle:
    """Interpolate statistics: ``alpha * own + (1 - alpha) * partner``."""
    n = own.mu.shape[0]
    a = _alpha_map(alpha, n, own.mu.dtype)[:, None]
    mu_hat = own.mu * a + partner.mu * (1.0 - a)
    sigma_hat = own.sigma * a + partner.sigma * (1.0 - a)
    return RandomizedStyle(mu_hat, sigma_hat, a[:, 0])


def _check_pair(z: Tensor, z_prime: Tensor) -> None:
    if z.ndim != 4:
        raise ValueError(f"expected (N,D,H,W) feature maps, got shape {z.shape}")
    if z.shape != z_prime.shape:
        raise ValueError(f"shape mismatch: z {z.shape} vs z_prime {z_prime.shape}")


def style_randomize(z: Tensor, z_prime: Tensor, alpha, eps_stats: float = EPS_STATS) -> Tensor:
    """Keep the content of ``z`` and give it a style interpolated towards ``z_prime``.

    ``alpha`` holds one interpolation weight per sample (1 keeps the own style,
    0 takes the partner's).
    """
    _check_pair(z, z_prime)
    mu, sigma = _moments(z, eps_stats)
    mu_p, sigma_p = _moments(z_prime, eps_stats)
    a = _alpha_map(alpha, z.shape[0], z.dtype).reshape(-1, 1, 1, 1)
    mu_hat = mu * a + mu_p * (1.0 - a)
    sigma_hat = sigma * a + sigma_p * (1.0 - a)
    return sigma_hat * ((z - mu) / sigma) + mu_hat


def content_randomize(z: Tensor, z_prime: Tensor, eps_stats: float = EPS_STATS) -> Tensor:
    """Keep the style of ``z`` and swap in the normalized content of ``z_prime``."""
    _check_pair(z, z_prime)
    mu, sigma = _moments(z, eps_stats)
    mu_p, sigma_p = _moments(z_prime, eps_stats)
    return sigma * ((z_prime - mu_p) / sigma_p) + mu


def batch_shuffle(z: Tensor, rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    """Permute ``z`` uniformly at random along the batch axis.

    Fixed points are allowed. Returns the shuffled tensor and the permutation
    used, so ``z_prime[i] == z[perm[i]]``.
    """
    n = z.shape[0]
    if n < 1:
        raise ValueError("cannot shuffle an empty batch")
    perm = rng.permutation(n)
    return nc.take(z, perm, axis=0), perm
