"""Forward process: marginals, one-step transitions, posteriors and turning points.

All operators go through the two-value (or, for analysis times outside a
level's window, multi-value) diagonal fast path of :mod:`dvdp.cascade`; dense
matrices appear only in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cascade import LatentState, SubspaceCascade, apply_diag, downsample, project
from .schedule import DvdpSchedule


class ProcessError(ValueError):
    pass


@dataclass(frozen=True)
class ForwardPosterior:
    """Mean and block variances of ``q(x_{t-1} | x_t, x_0)`` at one level."""

    mean: np.ndarray
    variances: tuple[float, ...]

    @property
    def var_pair(self) -> tuple[float, float]:
        v = self.variances
        return v[0], v[1] if len(v) > 1 else v[0]


def _check_in_window(s: DvdpSchedule, k: int, t: int, *, lower_inclusive=True):
    lo, hi = s.window(k)
    ok = (lo <= t <= hi) if lower_inclusive else (lo < t <= hi)
    if not ok:
        raise ProcessError(f"(level {k}, t={t}) lies outside the level window [{lo}, {hi}]")


def marginal_sample(
    c: SubspaceCascade, s: DvdpSchedule, x0: np.ndarray, k: int, t: int, eps: np.ndarray
) -> LatentState:
    """``x_t^k = U Λ̄_{k,t} U^T x_0^k + σ̄_t ε`` for a level-``k`` clean tensor ``x0``.

    ``t`` may be any step in ``[0, T]``; outside the level's window the
    attenuation of deeper components simply follows the table.
    """
    x0 = c.check(k, x0)
    eps = c.check(k, eps)
    if eps.shape != x0.shape:
        raise ProcessError(f"noise shape {eps.shape} != data shape {x0.shape}")
    if not 0 <= t <= s.T:
        raise ProcessError(f"t={t} outside [0, {s.T}]")
    if t == 0:
        return LatentState(k, 0, x0.copy())
    return LatentState(k, t, apply_diag(c, k, s.lambda_values(k, t), x0) + s.sigma_bar[t] * eps)


def transition_sample(
    c: SubspaceCascade, s: DvdpSchedule, x_prev: LatentState, eps: np.ndarray
) -> LatentState:
    """One forward step ``x_{t-1}^k → x_t^k`` within level ``k``'s window."""
    k, t = x_prev.level, x_prev.time + 1
    _check_in_window(s, k, t, lower_inclusive=False)
    ratio, l = s.step_values(k, t)
    data = apply_diag(c, k, ratio, x_prev.data) + apply_diag(c, k, l, c.check(k, eps))
    return LatentState(k, t, data)


def posterior(c: SubspaceCascade, s: DvdpSchedule, x_t: LatentState, x0: np.ndarray) -> ForwardPosterior:
    """Gaussian posterior ``q(x_{t-1}^k | x_t^k, x_0^k)``, block by block.

    With ``r`` the one-step ratio and ``L`` the one-step noise of a block::

        mean = λ̄_{t-1} L² / σ̄_t² · x0 + r σ̄_{t-1}² / σ̄_t² · x_t
        var  = L² σ̄_{t-1}² / σ̄_t²
    """
    k, t = x_t.level, x_t.time
    if t == 0:
        raise ProcessError("posterior undefined at t = 0")
    _check_in_window(s, k, t, lower_inclusive=False)
    sig_t2 = s.sigma_bar[t] ** 2
    if sig_t2 == 0.0:
        raise ProcessError(f"sigma_bar is zero at t={t}")
    sig_p2 = s.sigma_bar[t - 1] ** 2
    ratio, l = s.step_values(k, t)
    l2 = l**2
    coef_x0 = s.lambda_values(k, t - 1) * l2 / sig_t2
    coef_xt = ratio * sig_p2 / sig_t2
    x0 = c.check(k, x0)
    mean = apply_diag(c, k, coef_x0, x0) + apply_diag(c, k, coef_xt, x_t.data)
    return ForwardPosterior(mean, tuple(float(v) for v in l2 * sig_p2 / sig_t2))


def turn_down(c: SubspaceCascade, s: DvdpSchedule, x: LatentState) -> LatentState:
    """Downsample ``x_{T_k}^{k-1}`` to ``x_{T_k}^k`` at a turning point."""
    k = x.level + 1
    if k > s.levels or x.time != s.boundary(k):
        raise ProcessError(f"state (level {x.level}, t={x.time}) is not at a turning point")
    return LatentState(k, x.time, downsample(c, k, x.data))


def lost_component(c: SubspaceCascade, x: LatentState) -> np.ndarray:
    """``x - D^T D x``: what a turning point discards from a level-``k`` state."""
    return x.data - project(c, x.level, x.data)


def forward_trajectory(
    c: SubspaceCascade, s: DvdpSchedule, x0: np.ndarray, rng: np.random.Generator
) -> list[LatentState]:
    """Run the whole chain ``x_0^0 → ... → x_{T_1}^0 → x_{T_1}^1 → ... → x_T^K``.

    Each turning point yields two states with the same time index, so the
    result has ``T + K + 1`` entries.
    """
    if c.levels != s.levels:
        raise ProcessError(f"cascade has {c.levels} levels, schedule {s.levels}")
    state = LatentState(0, 0, c.check(0, x0).copy())
    states = [state]
    for k in range(s.levels + 1):
        lo, hi = s.window(k)
        if k > 0:
            state = turn_down(c, s, state)
            states.append(state)
        for _ in range(lo, hi):
            state = transition_sample(c, s, state, rng.standard_normal(state.data.shape))
            states.append(state)
    return states
