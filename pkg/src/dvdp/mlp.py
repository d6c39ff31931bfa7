"""Small trainable ε-predictor with hand-written backpropagation.

One two-layer tanh network per cascade level (levels differ in width).  The
network sees a per-block normalised input ``x_t / sqrt(λ̄² + σ̄²)`` next to a
sinusoidal embedding of ``t`` and predicts a residual on top of the fixed
skip ``σ̄ x_t / (λ̄² + σ̄²)``, which is the exact answer for standard-normal
data.  Both rescalings are parameter-free.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Union

import numpy as np

from .cascade import LatentState, SubspaceCascade, apply_diag, to_level
from .mixture import GaussianMixture
from .schedule import DvdpSchedule

log = logging.getLogger(__name__)

EMBED_DIM = 16
UNIFORM_K = "uniform-k"
UNIFORM_T = "uniform-t"
_DIVERGED = 1e6


class TrainingDiverged(RuntimeError):
    pass


def time_embedding(t, T: int, dim: int = EMBED_DIM) -> np.ndarray:
    """Sinusoidal features of ``t`` with periods from about ``2T`` down to a few steps."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    args = t[:, None] * _freqs(T, dim // 2)[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@lru_cache(maxsize=8)
def _freqs(T: int, half: int) -> np.ndarray:
    out = np.pi / T * np.geomspace(1.0, T / 8.0, half)
    out.flags.writeable = False
    return out


class MlpDenoiser:
    """Per-level ``W2 tanh(W1 [u; emb(t)] + b1) + b2`` plus the fixed skip."""

    PARAM_NAMES = ("W1", "b1", "W2", "b2")

    def __init__(
        self,
        cascade: SubspaceCascade,
        schedule: DvdpSchedule,
        hidden: int = 64,
        rng: np.random.Generator | None = None,
    ):
        if cascade.levels != schedule.levels:
            raise ValueError("cascade and schedule disagree on the number of levels")
        self.cascade = cascade
        self.schedule = schedule
        self.hidden = hidden
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: dict[str, np.ndarray] = {}
        for k in range(cascade.levels + 1):
            d = cascade.dims[k]
            fan_in = d + EMBED_DIM
            self.params[f"level{k}.W1"] = rng.standard_normal((hidden, fan_in)) / np.sqrt(fan_in)
            self.params[f"level{k}.b1"] = np.zeros(hidden)
            self.params[f"level{k}.W2"] = 0.1 * rng.standard_normal((d, hidden)) / np.sqrt(hidden)
            self.params[f"level{k}.b2"] = np.zeros(d)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def get_vector(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in self.names()])

    def set_vector(self, theta: np.ndarray) -> None:
        i = 0
        for n in self.names():
            p = self.params[n]
            self.params[n] = np.asarray(theta[i:i + p.size], dtype=np.float64).reshape(p.shape).copy()
            i += p.size

    def names(self) -> list[str]:
        return [f"level{k}.{n}" for k in range(self.cascade.levels + 1) for n in self.PARAM_NAMES]

    def _scalings(self, k, t):
        lam = self.schedule.lambda_bar[k:, t]  # (nblocks, batch)
        sig = self.schedule.sigma_bar[t]
        denom = lam**2 + sig**2
        c_in = list(1.0 / np.sqrt(denom))
        skip = list(sig / denom)
        return c_in, skip

    def forward(self, k: int, t: np.ndarray, x: np.ndarray):
        """Batched forward pass; ``t`` holds one timestep per item. Returns ``(eps_hat, cache)``."""
        c = self.cascade
        x = c.check(k, x)
        batch = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (batch,))
        c_in, skip = self._scalings(k, t)
        u = apply_diag(c, k, c_in, x).reshape(batch, -1)
        z = np.concatenate([u, time_embedding(t, self.schedule.T)], axis=1)
        p = self.params
        h = np.tanh(z @ p[f"level{k}.W1"].T + p[f"level{k}.b1"])
        out = h @ p[f"level{k}.W2"].T + p[f"level{k}.b2"]
        eps_hat = apply_diag(c, k, skip, x) + out.reshape(x.shape)
        return eps_hat, (k, z, h)

    def backward(self, cache, d_eps: np.ndarray) -> dict[str, np.ndarray]:
        k, z, h = cache
        p = self.params
        do = d_eps.reshape(d_eps.shape[0], -1)
        grads = {
            f"level{k}.W2": do.T @ h,
            f"level{k}.b2": do.sum(axis=0),
        }
        da = (do @ p[f"level{k}.W2"]) * (1.0 - h**2)
        grads[f"level{k}.W1"] = da.T @ z
        grads[f"level{k}.b1"] = da.sum(axis=0)
        return grads

    def evaluate(self, state: LatentState) -> np.ndarray:
        k = state.level
        shape = self.cascade.shapes[k]
        x = state.data
        flat = x.reshape((-1,) + shape)
        eps_hat, _ = self.forward(k, np.full(flat.shape[0], state.time), flat)
        return eps_hat.reshape(x.shape)

    def loss_and_grad(self, x0: np.ndarray, k: int, t, eps: np.ndarray, *, scale: float = 1.0):
        """Mean over the batch of ``scale · ‖ε - ε_θ(x_t^k, t)‖²`` and its parameter gradients.

        ``x0`` is level-0 data, ``t`` one timestep per item (all in level
        ``k``'s window), ``eps`` level-``k`` noise.
        """
        c, s = self.cascade, self.schedule
        x0k = to_level(c, k, x0)
        batch = x0k.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (batch,))
        lo, hi = s.window(k)
        if np.any(t <= lo) or np.any(t > hi):
            raise ValueError(f"timesteps outside level-{k} window ({lo}, {hi}]")
        xt = apply_diag(c, k, list(s.lambda_bar[k:, t]), x0k) + _bcast(s.sigma_bar[t], eps) * eps
        eps_hat, cache = self.forward(k, t, xt)
        resid = eps - eps_hat
        per_item = (resid**2).reshape(batch, -1).sum(axis=1)
        loss = scale * per_item.mean()
        grads = self.backward(cache, -2.0 * scale * resid / batch)
        return loss, grads, per_item


def _bcast(v, x):
    return v.reshape(v.shape + (1,) * (x.ndim - v.ndim))


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 20000
    batch: int = 128
    lr: float = 2e-3
    seed: int = 0
    level_rule: str = UNIFORM_K
    lr_final: float = 1e-4  # cosine decay target

    def __post_init__(self):
        if self.iterations < 0 or self.batch < 1:
            raise ValueError("iterations must be >= 0 and batch >= 1")
        if self.lr < 0 or self.lr_final < 0:
            raise ValueError("learning rates must be non-negative")
        if self.level_rule not in (UNIFORM_K, UNIFORM_T):
            raise ValueError(f"unknown level rule {self.level_rule!r}")


def sample_levels_times(s: DvdpSchedule, n: int, rule: str, rng: np.random.Generator):
    """Draw ``(k, t)`` pairs: uniform level then uniform step in its window, or uniform step."""
    if rule == UNIFORM_K:
        k = rng.integers(0, s.levels + 1, size=n)
        lo = np.array([s.boundary(i) for i in range(s.levels + 2)])
        t = lo[k] + 1 + np.floor(rng.random(n) * (lo[k + 1] - lo[k])).astype(np.int64)
    elif rule == UNIFORM_T:
        t = rng.integers(1, s.T + 1, size=n)
        k = np.searchsorted(np.asarray(s.turning_points, dtype=np.int64), t, side="left")
    else:
        raise ValueError(f"unknown level rule {rule!r}")
    return k.astype(np.int64), t.astype(np.int64)


def _draw_data(data, n, rng):
    if isinstance(data, GaussianMixture):
        return data.sample(n, rng)
    data = np.asarray(data, dtype=np.float64)
    return data[rng.integers(0, data.shape[0], size=n)]


def _batch_loss_grad(model: MlpDenoiser, x0, k, t, rng_eps):
    """Loss and summed gradients for a mixed-level batch, grouped by level in fixed order."""
    c = model.cascade
    n = x0.shape[0]
    total = 0.0
    grads = {name: np.zeros_like(p) for name, p in model.params.items()}
    for level in range(c.levels + 1):
        idx = np.flatnonzero(k == level)
        if idx.size == 0:
            continue
        eps = rng_eps.standard_normal((idx.size,) + c.shapes[level])
        loss, g, _ = model.loss_and_grad(x0[idx], level, t[idx], eps, scale=idx.size / n)
        total += loss
        for name, v in g.items():
            grads[name] += v
    return total, grads


def train(
    model: MlpDenoiser,
    data: Union[GaussianMixture, np.ndarray],
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
):
    """Fit ``model`` in place with Adam on the ε-prediction loss; returns ``(model, loss_trace)``.

    Each iteration draws ``(k, t)`` per item by ``cfg.level_rule``, clean data
    from ``data`` (a mixture or an array of level-0 tensors), and fresh noise.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    s = model.schedule
    m = {n: np.zeros_like(p) for n, p in model.params.items()}
    v = {n: np.zeros_like(p) for n, p in model.params.items()}
    b1, b2, tiny = 0.9, 0.999, 1e-8
    trace = np.empty(cfg.iterations)
    for it in range(cfg.iterations):
        k, t = sample_levels_times(s, cfg.batch, cfg.level_rule, rng)
        x0 = _draw_data(data, cfg.batch, rng)
        loss, grads = _batch_loss_grad(model, x0, k, t, rng)
        if not np.isfinite(loss) or loss > _DIVERGED:
            raise TrainingDiverged(f"loss {loss:.3e} at iteration {it}; lower the learning rate")
        trace[it] = loss
        frac = it / max(cfg.iterations - 1, 1)
        lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + np.cos(np.pi * frac))
        if cfg.lr == 0.0:
            lr = 0.0
        for name, g in grads.items():
            m[name] = b1 * m[name] + (1 - b1) * g
            v[name] = b2 * v[name] + (1 - b2) * g**2
            mhat = m[name] / (1 - b1 ** (it + 1))
            vhat = v[name] / (1 - b2 ** (it + 1))
            model.params[name] = model.params[name] - lr * mhat / (np.sqrt(vhat) + tiny)
        if it % 1000 == 0:
            log.debug("iteration %d loss %.5f lr %.2e", it, loss, lr)
    return model, trace


def evaluation_loss(model, data, n: int, rule: str, rng: np.random.Generator) -> tuple[float, float]:
    """Mean and standard error of the per-item ε loss on ``n`` fresh draws."""
    s, c = model.schedule, model.cascade
    k, t = sample_levels_times(s, n, rule, rng)
    x0 = _draw_data(data, n, rng)
    losses = np.empty(n)
    for level in range(c.levels + 1):
        idx = np.flatnonzero(k == level)
        if idx.size == 0:
            continue
        eps = rng.standard_normal((idx.size,) + c.shapes[level])
        x0k = to_level(c, level, x0[idx])
        xt = apply_diag(c, level, list(s.lambda_bar[level:, t[idx]]), x0k) + _bcast(s.sigma_bar[t[idx]], eps) * eps
        losses[idx] = _per_item_loss(model, level, t[idx], xt, eps)
    return float(losses.mean()), float(losses.std(ddof=1) / np.sqrt(n))


def _per_item_loss(model, level, t, xt, eps):
    if isinstance(model, MlpDenoiser):
        pred, _ = model.forward(level, t, xt)
    else:
        # time-homogeneous denoisers are evaluated one timestep at a time
        pred = np.empty_like(xt)
        for tt in np.unique(t):
            sel = t == tt
            pred[sel] = model.evaluate(LatentState(level, int(tt), xt[sel]))
    return ((eps - pred) ** 2).reshape(eps.shape[0], -1).sum(axis=1)


def grad_check(model: MlpDenoiser, probe, *, h: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference parameter gradients.

    ``probe = (x0, k, t, eps)`` for one item (or a small batch).  The
    denominator is floored at 1e-6 so parameters with vanishing gradients do
    not amplify rounding noise.  Only level ``k``'s network is perturbed: the
    loss never reads the other levels, whose analytic gradient must be absent.
    """
    x0, k, t, eps = probe
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.ndim == len(model.cascade.shapes[0]):
        x0, eps = x0[None], eps[None]
    _, grads, _ = model.loss_and_grad(x0, k, t, eps)
    own = [n for n in model.names() if n.startswith(f"level{k}.")]
    if set(grads) != set(own):
        return float("inf")
    analytic = np.concatenate([grads[n].ravel() for n in own])
    numeric = []
    for name in own:
        flat = model.params[name].reshape(-1)  # view: edits land in the model
        g = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, _, _ = model.loss_and_grad(x0, k, t, eps)
            flat[i] = orig - h
            lm, _, _ = model.loss_and_grad(x0, k, t, eps)
            flat[i] = orig
            g[i] = (lp - lm) / (2 * h)
        numeric.append(g)
    numeric = np.concatenate(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))
