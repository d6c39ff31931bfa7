"""The ε-prediction contract, the closed-form mixture denoiser, and the training loss."""

from __future__ import annotations

from typing import Protocol

import numpy as np
from scipy.special import logsumexp

from .cascade import EXPLICIT, LatentState, SubspaceCascade, apply_diag, dense_down, dense_operator, to_level
from .mixture import GaussianMixture
from .process import marginal_sample
from .schedule import DvdpSchedule


class Denoiser(Protocol):
    def evaluate(self, state: LatentState) -> np.ndarray:
        """Predicted standard-normal noise, same shape as ``state.data``."""
        ...


def _sum_trailing(x: np.ndarray, nd: int) -> np.ndarray:
    return x.reshape(x.shape[: x.ndim - nd] + (-1,)).sum(axis=-1)


def analytic_epsilon(
    gm: GaussianMixture,
    c: SubspaceCascade,
    s: DvdpSchedule,
    state: LatentState,
    *,
    dense: bool = False,
) -> np.ndarray:
    """``E[ε | x_t]`` when ``x_0 ~ gm`` and ``x_t = Λ̄ D̄_k x_0 + σ̄_t ε``.

    Isotropic mixtures stay isotropic under the row-orthonormal ``D̄_k``, so
    each component's marginal covariance ``c_j² Λ̄² + σ̄² I`` is diagonal in
    the ``U_k`` basis and everything runs on :func:`apply_diag`.  Other
    mixtures (or ``dense=True``) use dense matrices, explicit backend only.
    """
    k, t = state.level, state.time
    if t == 0 or s.sigma_bar[t] == 0.0:
        raise ValueError("the analytic denoiser is undefined at t = 0")
    x = c.check(k, state.data)
    lam = s.lambda_values(k, t)
    sig = s.sigma_bar[t]
    if dense or not gm.is_isotropic:
        if not dense and c.backend != EXPLICIT:
            raise ValueError("non-isotropic mixtures need the explicit-dense backend")
        x0_hat = _posterior_mean_dense(gm, c, k, lam, sig, x)
    else:
        x0_hat = _posterior_mean_iso(gm, c, k, lam, sig, x)
    return (x - apply_diag(c, k, lam, x0_hat)) / sig


def _posterior_mean_iso(gm, c, k, lam, sig, x):
    nd = len(c.shapes[k])
    means = to_level(c, k, gm.means)  # (m, *shape_k)
    var = gm.iso_variances()  # (m,)
    sizes = np.asarray(c.block_sizes[k], dtype=np.float64)
    # marginal variance per (component, block): c_j^2 λ_i^2 + σ̄^2
    mvar = var[:, None] * lam[None, :] ** 2 + sig**2  # (m, nblocks)
    xb = np.expand_dims(x, axis=-nd - 1)  # (*batch, 1, *shape)
    resid = xb - apply_diag(c, k, lam, means)
    inv = [1.0 / mvar[:, i] for i in range(len(lam))]
    quad = _sum_trailing(resid * apply_diag(c, k, inv, resid), nd)  # (*batch, m)
    logdet = np.log(mvar) @ sizes
    logp = np.log(gm.weights) - 0.5 * (quad + logdet)
    resp = np.exp(logp - logsumexp(logp, axis=-1, keepdims=True))
    gain = [var * lam[i] / mvar[:, i] for i in range(len(lam))]
    comp_mean = means + apply_diag(c, k, gain, resid)  # (*batch, m, *shape)
    return np.sum(comp_mean * resp.reshape(resp.shape + (1,) * nd), axis=-nd - 1)


def _posterior_mean_dense(gm, c, k, lam, sig, x):
    nd = len(c.shapes[k])
    batch = x.shape[: x.ndim - nd]
    d = c.dims[k]
    down = dense_down(c, k)  # (d_k, d_0)
    lam_mat = dense_operator(c, k, lam)
    xf = x.reshape(batch + (d,))
    m = gm.n_components
    means = gm.means.reshape(m, -1) @ down.T
    logp = np.empty(batch + (m,))
    comp = np.empty(batch + (m, d))
    for j in range(m):
        cov0 = down @ np.diag(gm.variances[j].ravel()) @ down.T
        cov = lam_mat @ cov0 @ lam_mat.T + sig**2 * np.eye(d)
        chol = np.linalg.cholesky(cov)
        resid = xf - lam_mat @ means[j]
        white = np.linalg.solve(chol, resid.reshape(-1, d).T).T.reshape(resid.shape)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        logp[..., j] = np.log(gm.weights[j]) - 0.5 * (np.sum(white**2, axis=-1) + logdet)
        gain = cov0 @ lam_mat.T @ np.linalg.inv(cov)
        comp[..., j, :] = means[j] + resid @ gain.T
    resp = np.exp(logp - logsumexp(logp, axis=-1, keepdims=True))
    out = np.sum(comp * resp[..., None], axis=-2)
    return out.reshape(batch + c.shapes[k])


class AnalyticDenoiser:
    """Bayes-optimal ε-predictor for Gaussian-mixture data."""

    def __init__(self, gm: GaussianMixture, cascade: SubspaceCascade, schedule: DvdpSchedule, *, dense: bool = False):
        if gm.shape != cascade.shapes[0]:
            raise ValueError(f"mixture shape {gm.shape} != cascade base shape {cascade.shapes[0]}")
        self.gm = gm
        self.cascade = cascade
        self.schedule = schedule
        self.dense = dense

    def evaluate(self, state: LatentState) -> np.ndarray:
        return analytic_epsilon(self.gm, self.cascade, self.schedule, state, dense=self.dense)


class ZeroDenoiser:
    def evaluate(self, state: LatentState) -> np.ndarray:
        return np.zeros_like(state.data)


def loss_term(
    d: Denoiser,
    c: SubspaceCascade,
    s: DvdpSchedule,
    x0: np.ndarray,
    k: int,
    t: int,
    eps: np.ndarray,
) -> np.ndarray:
    """``‖ε - ε_θ(x_t^k(D̄_k x_0, ε), t)‖²`` per item (sum over tensor entries).

    ``x0`` is a level-0 tensor (optionally batched); ``eps`` lives at level ``k``.
    """
    lo, hi = s.window(k)
    if not lo < t <= hi:
        raise ValueError(f"t={t} outside level-{k} window ({lo}, {hi}]")
    x0k = to_level(c, k, x0)
    eps = c.check(k, eps)
    if eps.shape != x0k.shape:
        raise ValueError(f"noise shape {eps.shape} != projected data shape {x0k.shape}")
    state = marginal_sample(c, s, x0k, k, t, eps)
    pred = d.evaluate(state)
    if pred.shape != eps.shape:
        raise ValueError(f"denoiser returned shape {pred.shape}, expected {eps.shape}")
    return _sum_trailing((eps - pred) ** 2, len(c.shapes[k]))
