"""Attenuation and noise tables for a cascade of attenuated diffusion processes.

``lambda_bar[i, t]`` is the cumulative attenuation of the data component in
``S_i / S_{i+1}`` at step ``t``; ``sigma_bar[t]`` is the cumulative noise
standard deviation, shared by every component.  Level ``k`` is active on the
window ``(T_k, T_{k+1}]`` with sentinels ``T_0 = 0`` and ``T_{K+1} = T``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_T = 1000
DEFAULT_LAMBDA_MIN = 0.01
DEFAULT_BETA_LO = 1e-4
DEFAULT_BETA_HI = 0.02


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DvdpSchedule:
    T: int
    turning_points: tuple[int, ...]
    lambda_bar: np.ndarray = field(repr=False)  # (K+1, T+1)
    sigma_bar: np.ndarray = field(repr=False)  # (T+1,)
    lambda_min: float

    def __post_init__(self):
        lam = np.asarray(self.lambda_bar, dtype=np.float64)
        sig = np.asarray(self.sigma_bar, dtype=np.float64)
        K = len(self.turning_points)
        if lam.shape != (K + 1, self.T + 1) or sig.shape != (self.T + 1,):
            raise ScheduleError(
                f"table shapes {lam.shape}, {sig.shape} do not match K={K}, T={self.T}"
            )
        _check_turning_points(self.T, self.turning_points)
        if not np.all(np.isfinite(lam)) or not np.all(np.isfinite(sig)):
            raise ScheduleError("schedule tables contain non-finite values")
        if np.any(lam[:, 0] != 1.0) or sig[0] != 0.0:
            raise ScheduleError("schedule must start at lambda_bar = 1, sigma_bar = 0")
        if np.any(lam <= 0.0) or np.any(lam > 1.0):
            raise ScheduleError("lambda_bar must lie in (0, 1]")
        if np.any(np.diff(lam, axis=1) > 0.0):
            raise ScheduleError("lambda_bar must be non-increasing in t")
        if np.any(lam[K] != 1.0):
            raise ScheduleError("the deepest level must not attenuate (lambda_bar_K = 1)")
        if np.any(np.diff(sig) <= 0.0):
            raise ScheduleError("sigma_bar must be strictly increasing")
        lam.setflags(write=False)
        sig.setflags(write=False)
        object.__setattr__(self, "lambda_bar", lam)
        object.__setattr__(self, "sigma_bar", sig)

    @property
    def levels(self) -> int:
        return len(self.turning_points)

    def boundary(self, k: int) -> int:
        """``T_k`` with ``T_0 = 0`` and ``T_{K+1} = T``."""
        if k <= 0:
            return 0
        if k > self.levels:
            return self.T
        return self.turning_points[k - 1]

    def window(self, k: int) -> tuple[int, int]:
        return self.boundary(k), self.boundary(k + 1)

    def level_of(self, t: int) -> int:
        """Level whose transition window ``(T_k, T_{k+1}]`` contains ``t`` (``t = 0`` → 0)."""
        if not 0 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [0, {self.T}]")
        return int(np.searchsorted(np.asarray(self.turning_points), t, side="left"))

    def lambda_values(self, k: int, t: int) -> np.ndarray:
        """``λ̄_{i,t}`` for ``i = k..K``: the diagonal of ``Λ̄_{k,t}`` block by block."""
        return self.lambda_bar[k:, t]

    def step_values(self, k: int, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-block one-step ratios ``λ_{i,t}`` and noise stds ``L_{i,t}`` at level ``k``."""
        if not 1 <= t <= self.T:
            raise ScheduleError(f"one-step coefficients need 1 <= t <= T, got {t}")
        ratio = self.lambda_bar[k:, t] / self.lambda_bar[k:, t - 1]
        l2 = self.sigma_bar[t] ** 2 - ratio**2 * self.sigma_bar[t - 1] ** 2
        if np.any(l2 < 0.0):
            raise ScheduleError(
                f"unrealizable step at level {k}, t={t}: L^2 = {l2.min():.3e} < 0"
            )
        return ratio, np.sqrt(l2)

    def step_coeffs(self, k: int, t: int) -> tuple[tuple[float, float], tuple[float, float]]:
        """Two-valued ``(Λ_{k,t}, L_{k,t})`` for a step inside level ``k``'s window.

        Returns ``((ratio, 1), (L_attenuated, L_rest))`` ready for
        :func:`dvdp.cascade.apply_diag_pair`.
        """
        lo, hi = self.window(k)
        if not lo < t <= hi:
            raise ScheduleError(f"t={t} outside level-{k} window ({lo}, {hi}]")
        ratio, l = self.step_values(k, t)
        rest = 1 if len(ratio) > 1 else 0
        return (float(ratio[0]), float(ratio[rest])), (float(l[0]), float(l[rest]))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.turning_points, dtype="<i8").tobytes())
        h.update(self.lambda_bar.astype("<f8").tobytes())
        h.update(self.sigma_bar.astype("<f8").tobytes())
        return h.hexdigest()[:16]


def _check_turning_points(T: int, turning_points: Sequence[int]) -> None:
    if T < 1:
        raise ScheduleError(f"T must be positive, got {T}")
    prev = 0
    for tp in turning_points:
        if not prev < tp < T:
            raise ScheduleError(
                f"turning points must satisfy 0 < T_1 < ... < T_K < T, got {tuple(turning_points)}"
            )
        prev = tp


def build_attenuation(T: int, turning_points: Sequence[int], lambda_min: float = DEFAULT_LAMBDA_MIN) -> np.ndarray:
    """Exponential attenuation table of shape ``(K+1, T+1)``.

    Component ``k < K`` stays at 1 up to ``T_k``, decays as
    ``lambda_min ** ((t - T_k) / (T_{k+1} - T_k))`` across its window and then
    holds at ``lambda_min``; the last component never attenuates.
    """
    turning_points = tuple(int(tp) for tp in turning_points)
    _check_turning_points(T, turning_points)
    if not 0.0 < lambda_min < 1.0:
        raise ScheduleError(f"lambda_min must lie in (0, 1), got {lambda_min}")
    K = len(turning_points)
    bounds = (0,) + turning_points + (T,)
    t = np.arange(T + 1)
    lam = np.ones((K + 1, T + 1))
    for k in range(K):
        lo, hi = bounds[k], bounds[k + 1]
        frac = np.clip((t - lo) / (hi - lo), 0.0, 1.0)
        lam[k] = lambda_min**frac
    return lam


def build_noise(
    T: int,
    turning_points: Sequence[int],
    factors: Sequence[float],
    beta_lo: float = DEFAULT_BETA_LO,
    beta_hi: float = DEFAULT_BETA_HI,
) -> np.ndarray:
    """Noise table ``σ̄_{0:T}`` from a linear β schedule, adapted at each turning point.

    Starting from ``σ̄ = sqrt(1/ᾱ - 1)``, the tail beyond each ``T_k`` is
    stretched by ``f_k`` about ``σ̄_{T_k - 1}`` so that the noise energy lost to
    downsampling is made up for.
    """
    turning_points = tuple(int(tp) for tp in turning_points)
    _check_turning_points(T, turning_points)
    if len(factors) != len(turning_points):
        raise ScheduleError(f"need one factor per turning point, got {len(factors)}")
    if not 0.0 < beta_lo < beta_hi < 1.0:
        raise ScheduleError(f"need 0 < beta_lo < beta_hi < 1, got {beta_lo}, {beta_hi}")
    betas = np.linspace(beta_lo, beta_hi, T)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    sigma = np.sqrt(1.0 / alpha_bar - 1.0)
    for tp, f in zip(turning_points, factors):
        anchor = sigma[tp - 1]
        sigma[tp:] = anchor + f * (sigma[tp:] - anchor)
    sigma[0] = 0.0
    if np.any(np.diff(sigma) <= 0.0):
        raise ScheduleError("adapted sigma_bar is not strictly increasing")
    return sigma


def build_schedule(
    T: int = DEFAULT_T,
    turning_points: Sequence[int] = (600,),
    factors: Sequence[float] | None = None,
    lambda_min: float = DEFAULT_LAMBDA_MIN,
    beta_lo: float = DEFAULT_BETA_LO,
    beta_hi: float = DEFAULT_BETA_HI,
) -> DvdpSchedule:
    """Full schedule; ``factors`` defaults to 4 per turning point (2×2 pooling)."""
    turning_points = tuple(int(tp) for tp in turning_points)
    if factors is None:
        factors = (4,) * len(turning_points)
    lam = build_attenuation(T, turning_points, lambda_min)
    sig = build_noise(T, turning_points, factors, beta_lo, beta_hi)
    return DvdpSchedule(T, turning_points, lam, sig, float(lambda_min))


def schedule_for(cascade, T: int = DEFAULT_T, turning_points: Sequence[int] = (600,), **kwargs) -> DvdpSchedule:
    """Schedule matched to ``cascade``: one turning point per level, its pooling factors."""
    if len(turning_points) != cascade.levels:
        raise ScheduleError(
            f"cascade has {cascade.levels} levels but {len(turning_points)} turning points given"
        )
    return build_schedule(T, turning_points, cascade.factors, **kwargs)


def subspace_mode(s: DvdpSchedule) -> DvdpSchedule:
    """The same noise table with no per-component attenuation (every ``λ̄`` is 1).

    This is the isotropic, attenuation-free cascade: plain subspace diffusion
    expressed in the same machinery.
    """
    return DvdpSchedule(s.T, s.turning_points, np.ones_like(s.lambda_bar), s.sigma_bar, s.lambda_min)
