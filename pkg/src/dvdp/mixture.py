"""Gaussian mixtures with diagonal covariances, used as data, oracle and density."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Weighted Gaussian components over level-0 tensors.

    ``means`` and ``variances`` have shape ``(m, *shape)``; each component's
    covariance is ``diag(variances[j])``.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        var = np.broadcast_to(np.asarray(self.variances, dtype=np.float64), mu.shape).copy()
        if w.ndim != 1 or mu.shape[0] != w.shape[0]:
            raise ValueError(f"{w.shape[0]} weights for {mu.shape[0]} component means")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be a probability vector, sum={w.sum()!r}")
        if np.any(var <= 0) or not np.all(np.isfinite(var)):
            raise ValueError("component variances must be positive and finite")
        for a in (w, mu, var):
            a.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @classmethod
    def isotropic(cls, weights, means, stds) -> "GaussianMixture":
        mu = np.asarray(means, dtype=np.float64)
        sd = np.asarray(stds, dtype=np.float64).reshape((-1,) + (1,) * (mu.ndim - 1))
        return cls(np.asarray(weights, dtype=np.float64), mu, np.broadcast_to(sd**2, mu.shape))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.means.shape[1:]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape))

    @property
    def is_isotropic(self) -> bool:
        flat = self.variances.reshape(self.n_components, -1)
        return bool(np.all(flat == flat[:, :1]))

    def iso_variances(self) -> np.ndarray:
        """Per-component scalar variance; only meaningful when :attr:`is_isotropic`."""
        return self.variances.reshape(self.n_components, -1)[:, 0]

    def sample(self, n: int, rng: np.random.Generator, *, return_labels: bool = False):
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n,) + self.shape)
        x = self.means[labels] + np.sqrt(self.variances[labels]) * z
        return (x, labels) if return_labels else x

    def mean(self) -> np.ndarray:
        return np.tensordot(self.weights, self.means, axes=1)

    def covariance(self) -> np.ndarray:
        """Full ``(d, d)`` covariance of the flattened mixture."""
        mu = self.means.reshape(self.n_components, -1)
        var = self.variances.reshape(self.n_components, -1)
        centre = mu - self.weights @ mu
        cov = np.diag(self.weights @ var)
        cov += (centre * self.weights[:, None]).T @ centre
        return cov

    def log_component(self, x: np.ndarray) -> np.ndarray:
        """``log w_j + log N(x; m_j, diag v_j)`` with shape ``(*batch, m)``."""
        nd = len(self.shape)
        x = np.asarray(x, dtype=np.float64)
        diff = x[..., None, :] if nd == 1 else np.expand_dims(x, axis=-nd - 1)
        diff = diff - self.means
        axes = tuple(range(-nd, 0))
        quad = np.sum(diff**2 / self.variances, axis=axes)
        logdet = np.sum(np.log(self.variances), axis=axes)
        return np.log(self.weights) - 0.5 * (quad + logdet + self.dim * np.log(2 * np.pi))

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        return logsumexp(self.log_component(x), axis=-1)

    def responsibilities(self, x: np.ndarray) -> np.ndarray:
        lc = self.log_component(x)
        return np.exp(lc - logsumexp(lc, axis=-1, keepdims=True))

    def clamp_to_ball(self, radius: float, n_std: float = 4.0) -> "GaussianMixture":
        """Shrink about the origin so each component's ``n_std``-sigma ball fits in ``radius``.

        Means and standard deviations are scaled by one common factor (never
        enlarged), so ``‖x‖ ≤ radius`` holds up to the Gaussian tail beyond
        ``n_std`` standard deviations per coordinate.
        """
        mu = self.means.reshape(self.n_components, -1)
        sd = np.sqrt(self.variances.reshape(self.n_components, -1))
        reach = np.linalg.norm(mu, axis=1) + n_std * np.linalg.norm(sd, axis=1)
        scale = min(1.0, radius / float(reach.max()))
        return GaussianMixture(self.weights, self.means * scale, self.variances * scale**2)
