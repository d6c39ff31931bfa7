"""Reverse process: ancestral sampling, noise-compensated upsampling and a DDIM variant.

Both samplers draw one standard-normal tensor per step (even where it is
multiplied by zero) so that equal seeds consume equal random streams.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .cascade import LatentState, SubspaceCascade, apply_diag, apply_diag_pair, upsample
from .denoiser import Denoiser
from .process import posterior
from .schedule import DvdpSchedule

ANCESTRAL = "ancestral"
DDIM = "ddim"

_LAMBDA_FLOOR = 1e-12


class SamplerError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    """Reverse-process settings.

    ``eta_window=None`` selects the default window around the first turning
    point (see :func:`default_eta_window`).  ``literal_alg2`` switches the
    ancestral update to ``x̂_0 + Σ_t ξ`` (variance, not std, times the noise);
    it exists only for side-by-side comparison.
    """

    mode: str = ANCESTRAL
    ddim_steps: Optional[int] = None
    eta_window: Optional[tuple[int, int]] = None
    sigma_choice: str = "posterior"
    seed: int = 0
    literal_alg2: bool = False

    def validate(self, s: DvdpSchedule) -> None:
        if self.mode not in (ANCESTRAL, DDIM):
            raise SamplerError(f"unknown sampler mode {self.mode!r}")
        if self.sigma_choice != "posterior":
            raise SamplerError(f"unsupported reverse covariance rule {self.sigma_choice!r}")
        if self.ddim_steps is not None and not 1 <= self.ddim_steps <= s.T:
            raise SamplerError(f"ddim_steps must lie in [1, {s.T}], got {self.ddim_steps}")
        if self.eta_window is not None:
            lo, hi = self.eta_window
            if not 0 <= lo <= hi <= s.T:
                raise SamplerError(f"eta window {self.eta_window} outside [0, {s.T}]")


def predict_x0(c: SubspaceCascade, s: DvdpSchedule, state: LatentState, eps_hat: np.ndarray) -> np.ndarray:
    """Invert the marginal: ``x̂_0 = Λ̄^{-1} x_t - Λ̄^{-1} σ̄_t ε̂``."""
    k, t = state.level, state.time
    lam = s.lambda_values(k, t)
    if np.any(lam < _LAMBDA_FLOOR):
        raise SamplerError(f"attenuation {lam.min():.3e} too small to invert at t={t}")
    eps_hat = c.check(k, eps_hat)
    if eps_hat.shape != state.data.shape:
        raise SamplerError(f"denoiser output {eps_hat.shape} != state {state.data.shape}")
    return apply_diag(c, k, 1.0 / lam, state.data) - apply_diag(c, k, s.sigma_bar[t] / lam, eps_hat)


def ancestral_step(
    c: SubspaceCascade,
    s: DvdpSchedule,
    state: LatentState,
    denoiser: Denoiser,
    rng: Optional[np.random.Generator] = None,
    *,
    noise: Optional[np.ndarray] = None,
    literal_alg2: bool = False,
) -> LatentState:
    """``x_{t-1} = μ̃(x_t, x̂_0) + Σ̃^{1/2} ξ`` with ``Σ̃`` the forward posterior variance.

    Pass ``noise`` to fix ``ξ``; otherwise it is drawn from ``rng``.  At
    ``t = 1`` the posterior variance is zero, so no noise enters.
    """
    if state.time < 1:
        raise SamplerError("cannot step below t = 0")
    if noise is None:
        noise = rng.standard_normal(state.data.shape)
    x0_hat = predict_x0(c, s, state, denoiser.evaluate(state))
    post = posterior(c, s, state, x0_hat)
    var = np.asarray(post.variances)
    k = state.level
    if literal_alg2:
        data = x0_hat + apply_diag(c, k, var, noise)
    else:
        data = post.mean + apply_diag(c, k, np.sqrt(var), noise)
    return LatentState(k, state.time - 1, data)


def turn_up(
    c: SubspaceCascade,
    s: DvdpSchedule,
    state: LatentState,
    rng: Optional[np.random.Generator] = None,
    *,
    noise: Optional[np.ndarray] = None,
) -> LatentState:
    """``x_{T_k}^{k-1} = D_k^T x_{T_k}^k + σ̄_{T_k} (I - D_k^T D_k) ξ``.

    The added noise lives entirely in the complement of the retained
    subspace, so downsampling the result gives back ``state`` exactly.
    """
    k = state.level
    if k < 1 or state.time != s.boundary(k):
        raise SamplerError(f"state (level {k}, t={state.time}) is not at a turning point")
    shape = state.data.shape[: state.data.ndim - len(c.shapes[k])] + c.shapes[k - 1]
    if noise is None:
        noise = rng.standard_normal(shape)
    up = upsample(c, k, state.data)
    comp = apply_diag_pair(c, k - 1, s.sigma_bar[state.time], 0.0, noise)
    return LatentState(k - 1, state.time, up + comp)


def initial_state(c: SubspaceCascade, s: DvdpSchedule, n: int, rng: np.random.Generator) -> LatentState:
    """``x_T^K ~ N(0, σ̄_T² I)``; the data term ``λ̄_K x_0`` is neglected against ``σ̄_T``."""
    K = c.levels
    return LatentState(K, s.T, s.sigma_bar[s.T] * rng.standard_normal((n,) + c.shapes[K]))


def _check_pair(c: SubspaceCascade, s: DvdpSchedule) -> None:
    if c.levels != s.levels:
        raise SamplerError(f"cascade has {c.levels} levels, schedule has {s.levels}")


def sample(
    c: SubspaceCascade,
    s: DvdpSchedule,
    denoiser: Denoiser,
    n: int,
    rng: np.random.Generator,
    *,
    cfg: SamplerConfig = SamplerConfig(),
    callback: Optional[Callable[[LatentState], None]] = None,
) -> np.ndarray:
    """Ancestral sampling from ``x_T^K`` down to ``x_0^0``; returns ``(n, *shapes[0])``."""
    _check_pair(c, s)
    cfg.validate(s)
    state = initial_state(c, s, n, rng)
    if callback:
        callback(state)
    for k in range(c.levels, -1, -1):
        lo, _ = s.window(k)
        while state.time > lo:
            state = ancestral_step(c, s, state, denoiser, rng, literal_alg2=cfg.literal_alg2)
            if callback:
                callback(state)
        if k > 0:
            state = turn_up(c, s, state, rng)
            if callback:
                callback(state)
    return state.data


def default_eta_window(s: DvdpSchedule) -> Optional[tuple[int, int]]:
    """``[T_1 - ⌊T_1/4⌋, T_1 + ⌈(T_2 - T_1)/2⌉]`` (``T_2 = T`` when there is one turning point)."""
    if s.levels == 0:
        return None
    t1, t2 = s.boundary(1), s.boundary(2)
    return t1 - t1 // 4, t1 + math.ceil((t2 - t1) / 2)


def ddim_timesteps(s: DvdpSchedule, steps: int) -> list[list[int]]:
    """Per-level decreasing timestep lists; each ends at its window's lower edge ``T_k``.

    ``steps`` jumps are shared among windows in proportion to their lengths
    and spread uniformly inside each one.
    """
    if not 1 <= steps <= s.T:
        raise SamplerError(f"ddim steps must lie in [1, {s.T}], got {steps}")
    K = s.levels
    lengths = [s.window(k)[1] - s.window(k)[0] for k in range(K + 1)]
    if steps < K + 1:
        raise SamplerError(f"need at least one step per level ({K + 1}), got {steps}")
    counts = [max(1, min(L, round(steps * L / s.T))) for L in lengths]
    while sum(counts) != steps:
        diff = steps - sum(counts)
        if diff > 0:
            j = max((k for k in range(K + 1) if counts[k] < lengths[k]), key=lambda k: lengths[k] - counts[k])
            counts[j] += 1
        else:
            j = max((k for k in range(K + 1) if counts[k] > 1), key=lambda k: counts[k])
            counts[j] -= 1
    out = []
    for k in range(K + 1):
        lo, _ = s.window(k)
        n, L = counts[k], lengths[k]
        ts = [lo + math.ceil(j * L / n) for j in range(n, 0, -1)]
        out.append(ts + [lo])
    return out


def ddim_step(
    c: SubspaceCascade,
    s: DvdpSchedule,
    state: LatentState,
    t_next: int,
    eta: float,
    denoiser: Denoiser,
    noise: np.ndarray,
) -> tuple[LatentState, np.ndarray]:
    """Jump ``x_t → x_{t_next}`` reusing ``x̂_0`` and ``ε̂``; returns the new state and ``x̂_0``.

    Per block with ``L² = σ̄_t² - (λ̄_t/λ̄_s)² σ̄_s²`` the injected std is
    ``η σ̄_s L / σ̄_t`` and the deterministic direction keeps the rest of
    ``σ̄_s``.  With ``η = 1`` this is exactly the ancestral posterior step.
    """
    k, t = state.level, state.time
    lo, _ = s.window(k)
    if not lo <= t_next < t:
        raise SamplerError(f"cannot jump from t={t} to {t_next} inside level {k}")
    eps_hat = denoiser.evaluate(state)
    x0_hat = predict_x0(c, s, state, eps_hat)
    lam_t, lam_s = s.lambda_values(k, t), s.lambda_values(k, t_next)
    sig_t, sig_s = s.sigma_bar[t], s.sigma_bar[t_next]
    l2 = np.maximum(sig_t**2 - (lam_t / lam_s) ** 2 * sig_s**2, 0.0)
    noise_var = eta**2 * l2 * sig_s**2 / sig_t**2
    direction = np.sqrt(np.maximum(sig_s**2 - noise_var, 0.0))
    data = (
        apply_diag(c, k, lam_s, x0_hat)
        + apply_diag(c, k, direction, eps_hat)
        + apply_diag(c, k, np.sqrt(noise_var), noise)
    )
    return LatentState(k, t_next, data), x0_hat


def ddim_sample(
    c: SubspaceCascade,
    s: DvdpSchedule,
    denoiser: Denoiser,
    n: int,
    rng: np.random.Generator,
    *,
    cfg: SamplerConfig = SamplerConfig(mode=DDIM),
    eta: Optional[Callable[[int], float]] = None,
    callback: Optional[Callable[[LatentState], None]] = None,
) -> np.ndarray:
    """DDIM-style sampler with full noise (``η_t = 1``) inside the η-window, none elsewhere.

    ``eta`` overrides the window rule with an arbitrary ``t → η_t`` map.
    """
    _check_pair(c, s)
    cfg.validate(s)
    steps = cfg.ddim_steps or s.T
    if eta is None:
        window = cfg.eta_window if cfg.eta_window is not None else default_eta_window(s)

        def eta(t):
            return 1.0 if window is not None and window[0] <= t <= window[1] else 0.0

    plan = ddim_timesteps(s, steps)
    state = initial_state(c, s, n, rng)
    if callback:
        callback(state)
    for k in range(c.levels, -1, -1):
        ts = plan[k]
        for t_next in ts[1:]:
            noise = rng.standard_normal(state.data.shape)
            state, _ = ddim_step(c, s, state, t_next, eta(state.time), denoiser, noise)
            if callback:
                callback(state)
        if k > 0:
            state = turn_up(c, s, state, rng)
            if callback:
                callback(state)
    return state.data


def run(c: SubspaceCascade, s: DvdpSchedule, denoiser: Denoiser, n: int, rng: np.random.Generator, cfg: SamplerConfig) -> np.ndarray:
    if cfg.mode == DDIM:
        return ddim_sample(c, s, denoiser, n, rng, cfg=cfg)
    return sample(c, s, denoiser, n, rng, cfg=cfg)


def item_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for item ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def sample_items(
    c: SubspaceCascade,
    s: DvdpSchedule,
    denoiser: Denoiser,
    count: int,
    cfg: SamplerConfig,
    *,
    threads: int = 1,
) -> np.ndarray:
    """Draw ``count`` samples, item ``i`` from its own stream ``(cfg.seed, i)``.

    Results do not depend on ``threads``: each item is sampled alone and the
    outputs are collected in index order.
    """

    def one(i):
        return run(c, s, denoiser, 1, item_rng(cfg.seed, i), cfg)[0]

    if threads <= 1:
        items = [one(i) for i in range(count)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            items = list(pool.map(one, range(count)))
    return np.stack(items) if items else np.zeros((0,) + c.shapes[0])
