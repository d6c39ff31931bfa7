"""Subspace ladder and the linear operators that move between its levels.

Level ``k`` of a cascade holds tensors of shape ``shapes[k]`` (``d̄_k`` entries).
``downsample`` maps level ``k-1`` to level ``k`` with the ×2-scaled 2×2 average
pool, which is row-orthonormal, so ``upsample`` (its transpose) is an exact right
inverse and ``upsample ∘ downsample`` is the orthogonal projection onto the
retained subspace.

Every operator accepts arbitrary leading batch dimensions: a tensor for level
``k`` has shape ``(*batch, *shapes[k])``.  Scalars passed to the diagonal
operators may instead be arrays of shape ``batch`` (one value per item).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

IMPLICIT = "implicit-pooling"
EXPLICIT = "explicit-dense"
BACKENDS = (IMPLICIT, EXPLICIT)

# Orthonormality tolerance for the dense backend's stored matrices.
_ORTHO_TOL = 1e-12


class CascadeError(ValueError):
    """Raised for invalid cascade construction or mismatched tensor shapes."""


@dataclass(frozen=True)
class LatentState:
    """A (possibly batched) tensor tagged with its cascade level and timestep."""

    level: int
    time: int
    data: np.ndarray

    def __post_init__(self):
        if self.level < 0 or self.time < 0:
            raise CascadeError(f"negative level/time ({self.level}, {self.time})")
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(
                f"non-finite entries in state at level {self.level}, t={self.time}"
            )

    def replace(self, data: np.ndarray, *, level: int | None = None, time: int | None = None):
        return LatentState(
            self.level if level is None else level,
            self.time if time is None else time,
            data,
        )


@dataclass(frozen=True, eq=False)
class SubspaceCascade:
    """The dimension ladder ``d̄_0 > d̄_1 > ... > d̄_K`` and its operators.

    ``down_matrices[k-1]`` and ``bases[k]`` are only populated for the
    explicit-dense backend; ``bases[k]`` is the orthogonal ``U_k`` whose
    columns are grouped into blocks of sizes ``block_sizes[k]`` (one block per
    quotient subspace ``S_i / S_{i+1}``, ``i = k..K``).
    """

    shapes: tuple[tuple[int, ...], ...]
    dims: tuple[int, ...]
    factors: tuple[int, ...]
    backend: str
    down_matrices: tuple[np.ndarray, ...] = field(default=(), repr=False)
    bases: tuple[np.ndarray, ...] = field(default=(), repr=False)

    @property
    def levels(self) -> int:
        return len(self.dims) - 1

    @property
    def block_sizes(self) -> tuple[tuple[int, ...], ...]:
        out = []
        for k in range(self.levels + 1):
            sizes = [self.dims[i] - self.dims[i + 1] for i in range(k, self.levels)]
            sizes.append(self.dims[self.levels])
            out.append(tuple(sizes))
        return tuple(out)

    def check(self, k: int, x: np.ndarray) -> np.ndarray:
        """Validate that ``x`` carries level-``k`` trailing shape; return it as float64."""
        if not 0 <= k <= self.levels:
            raise CascadeError(f"level {k} outside [0, {self.levels}]")
        x = np.asarray(x, dtype=np.float64)
        shape = self.shapes[k]
        if x.shape[x.ndim - len(shape):] != shape or x.ndim < len(shape):
            raise CascadeError(
                f"tensor of shape {x.shape} does not end with level-{k} shape {shape}"
            )
        return x

    def batch_shape(self, k: int, x: np.ndarray) -> tuple[int, ...]:
        return x.shape[: x.ndim - len(self.shapes[k])]


def build_cascade(
    base_shape: Sequence[int], K: int, backend: str = IMPLICIT, *, factor: int = 2
) -> SubspaceCascade:
    """Build a ``K``-level cascade over tensors of shape ``base_shape``.

    Image shapes ``(C, H, W)`` (or ``(H, W)``, treated as one channel) pool
    2×2 blocks at every level.  A flat shape ``(d,)`` is only accepted by the
    explicit backend and pools consecutive groups of ``factor`` entries with
    weight ``1/sqrt(factor)``, the same row-orthonormal construction.
    """
    if backend not in BACKENDS:
        raise CascadeError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
    if K < 0:
        raise CascadeError(f"K must be non-negative, got {K}")
    base_shape = tuple(int(s) for s in base_shape)
    if any(s <= 0 for s in base_shape):
        raise CascadeError(f"shape entries must be positive: {base_shape}")
    if len(base_shape) == 2:
        base_shape = (1,) + base_shape

    if len(base_shape) == 3:
        c, h, w = base_shape
        step = 2**K
        if h % step or w % step:
            raise CascadeError(
                f"height/width {h}x{w} not divisible by 2^K = {step} (K={K} too large "
                "or shape not divisible)"
            )
        shapes = tuple((c, h >> k, w >> k) for k in range(K + 1))
        factors = (4,) * K
    elif len(base_shape) == 1:
        if backend != EXPLICIT:
            raise CascadeError("flat base shapes require the explicit-dense backend")
        if factor < 2:
            raise CascadeError(f"flat pooling factor must be >= 2, got {factor}")
        (d,) = base_shape
        if d % factor**K:
            raise CascadeError(f"length {d} not divisible by {factor}^{K}")
        shapes = tuple((d // factor**k,) for k in range(K + 1))
        factors = (factor,) * K
    else:
        raise CascadeError(f"expected (C, H, W), (H, W) or (d,) shape, got {base_shape}")

    dims = tuple(int(np.prod(s)) for s in shapes)
    if backend == IMPLICIT:
        return SubspaceCascade(shapes, dims, factors, backend)

    downs = []
    for k in range(1, K + 1):
        if len(shapes[k]) == 3:
            downs.append(_pool_matrix_2x2(shapes[k - 1]))
        else:
            downs.append(_pool_matrix_flat(dims[k - 1], factor))
    bases = _nested_bases(downs, dims)
    for dmat in downs:
        err = np.max(np.abs(dmat @ dmat.T - np.eye(dmat.shape[0])))
        if err > _ORTHO_TOL:
            raise CascadeError(f"downsampling matrix not row-orthonormal (err {err:.2e})")
    for u in bases:
        u.setflags(write=False)
    for dmat in downs:
        dmat.setflags(write=False)
    return SubspaceCascade(shapes, dims, factors, backend, tuple(downs), tuple(bases))


def _pool_matrix_2x2(shape: tuple[int, int, int]) -> np.ndarray:
    c, h, w = shape
    ho, wo = h // 2, w // 2
    mat = np.zeros((c * ho * wo, c * h * w))
    for ch in range(c):
        for i in range(ho):
            for j in range(wo):
                row = (ch * ho + i) * wo + j
                for a in (0, 1):
                    for b in (0, 1):
                        mat[row, (ch * h + 2 * i + a) * w + 2 * j + b] = 0.5
    return mat


def _pool_matrix_flat(d: int, factor: int) -> np.ndarray:
    mat = np.zeros((d // factor, d))
    for row in range(d // factor):
        mat[row, row * factor:(row + 1) * factor] = 1.0 / np.sqrt(factor)
    return mat


def _null_space_basis(dmat: np.ndarray) -> np.ndarray:
    """Orthonormal basis of ``ker(dmat)`` by Gram-Schmidt over the unit vectors e_0, e_1, ..."""
    n = dmat.shape[1]
    need = n - dmat.shape[0]
    basis = [row for row in dmat]  # rows are already orthonormal
    found = []
    for i in range(n):
        if len(found) == need:
            break
        v = np.zeros(n)
        v[i] = 1.0
        for _ in range(2):  # re-orthogonalise once for stability
            for q in basis:
                v -= (q @ v) * q
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            v /= norm
            basis.append(v)
            found.append(v)
    if len(found) != need:
        raise CascadeError("failed to complete an orthonormal basis")
    return np.stack(found, axis=1) if found else np.zeros((n, 0))


def _nested_bases(downs: list[np.ndarray], dims: tuple[int, ...]) -> list[np.ndarray]:
    # U_K = I; U_k = [N_k, D_{k+1}^T U_{k+1}] so that D_{k+1} [N_k, B_k] = [0, U_{k+1}].
    K = len(downs)
    bases = [None] * (K + 1)
    bases[K] = np.eye(dims[K])
    for k in range(K - 1, -1, -1):
        dmat = downs[k]
        bases[k] = np.concatenate([_null_space_basis(dmat), dmat.T @ bases[k + 1]], axis=1)
    return bases


def _expand(value, ndim: int) -> np.ndarray:
    """Broadcast a scalar or per-item array over ``ndim`` trailing tensor axes."""
    v = np.asarray(value, dtype=np.float64)
    return v.reshape(v.shape + (1,) * ndim)


def downsample(c: SubspaceCascade, k: int, x: np.ndarray) -> np.ndarray:
    """Apply ``D_k`` (level ``k-1`` → level ``k``): 2 × the mean of each 2×2 block."""
    if not 1 <= k <= c.levels:
        raise CascadeError(f"downsample level {k} outside [1, {c.levels}]")
    x = c.check(k - 1, x)
    batch = c.batch_shape(k - 1, x)
    if c.backend == EXPLICIT:
        flat = x.reshape(batch + (c.dims[k - 1],))
        return (flat @ c.down_matrices[k - 1].T).reshape(batch + c.shapes[k])
    ch, h, w = c.shapes[k - 1]
    blocks = x.reshape(batch + (ch, h // 2, 2, w // 2, 2))
    return 0.5 * blocks.sum(axis=(-3, -1))


def upsample(c: SubspaceCascade, k: int, y: np.ndarray) -> np.ndarray:
    """Apply ``D_k^T`` (level ``k`` → level ``k-1``): replicate each value into a 2×2 block, halved."""
    if not 1 <= k <= c.levels:
        raise CascadeError(f"upsample level {k} outside [1, {c.levels}]")
    y = c.check(k, y)
    batch = c.batch_shape(k, y)
    if c.backend == EXPLICIT:
        flat = y.reshape(batch + (c.dims[k],))
        return (flat @ c.down_matrices[k - 1]).reshape(batch + c.shapes[k - 1])
    ch, h, w = c.shapes[k]
    half = 0.5 * y
    out = np.broadcast_to(half[..., :, None, :, None], batch + (ch, h, 2, w, 2))
    return out.reshape(batch + (ch, 2 * h, 2 * w))


def project(c: SubspaceCascade, k: int, x: np.ndarray) -> np.ndarray:
    """Orthogonal projection ``D_{k+1}^T D_{k+1}`` at level ``k`` onto the retained subspace."""
    return upsample(c, k + 1, downsample(c, k + 1, x))


def to_level(c: SubspaceCascade, k: int, x0: np.ndarray) -> np.ndarray:
    """``D̄_k x`` = D_k ... D_1 x: carry a level-0 tensor down to level ``k``."""
    for i in range(1, k + 1):
        x0 = downsample(c, i, x0)
    return c.check(k, x0)


def from_level(c: SubspaceCascade, k: int, y: np.ndarray) -> np.ndarray:
    """``D̄_k^T y``: embed a level-``k`` tensor back into level 0."""
    y = c.check(k, y)
    for i in range(k, 0, -1):
        y = upsample(c, i, y)
    return y


def apply_diag(c: SubspaceCascade, k: int, values: Sequence, x: np.ndarray) -> np.ndarray:
    """Apply ``U_k diag(v_k I, v_{k+1} I, ..., v_K I) U_k^T`` to ``x`` without forming ``U_k``.

    ``values`` holds one entry per quotient subspace ``S_i/S_{i+1}`` for
    ``i = k..K``; each entry may be a scalar or a per-item array.  Uses the
    recursion ``f_i(y) = v_i y + D^T (f_{i+1}(D y) - v_i D y)``.
    """
    x = c.check(k, x)
    if len(values) != c.levels - k + 1:
        raise CascadeError(
            f"level {k} needs {c.levels - k + 1} diagonal values, got {len(values)}"
        )
    for v in values:
        if not np.all(np.isfinite(v)):
            raise CascadeError(f"non-finite diagonal value {v!r}")
    return _apply_diag_rec(c, k, list(values), x)


def _apply_diag_rec(c, k, values, x):
    nd = len(c.shapes[k])
    head = _expand(values[0], nd)
    if k == c.levels or len(values) == 1:
        return head * x
    down = downsample(c, k + 1, x)
    inner = _apply_diag_rec(c, k + 1, values[1:], down)
    return head * x + upsample(c, k + 1, inner - _expand(values[0], len(c.shapes[k + 1])) * down)


def apply_diag_pair(c: SubspaceCascade, k: int, a, b, x: np.ndarray) -> np.ndarray:
    """``a·x + (b - a)·D_{k+1}^T D_{k+1} x``: value ``a`` on ``S_k/S_{k+1}``, ``b`` on ``S_{k+1}``.

    At the deepest level there is no retained subspace, so ``b`` is ignored.
    """
    x = c.check(k, x)
    for v in (a, b):
        if not np.all(np.isfinite(v)):
            raise CascadeError(f"non-finite diagonal value {v!r}")
    nd = len(c.shapes[k])
    a_ = _expand(a, nd)
    if k == c.levels:
        return a_ * x
    return a_ * x + (_expand(b, nd) - a_) * project(c, k, x)


def apply_diag_dense(c: SubspaceCascade, k: int, values: Sequence, x: np.ndarray) -> np.ndarray:
    """Same operator as :func:`apply_diag`, computed as an explicit ``U diag U^T`` product.

    Only available on the explicit backend; values must be scalars.
    """
    if c.backend != EXPLICIT:
        raise CascadeError("dense diagonal operator requires the explicit-dense backend")
    x = c.check(k, x)
    batch = c.batch_shape(k, x)
    u = c.bases[k]
    diag = np.repeat(np.asarray(values, dtype=np.float64), c.block_sizes[k])
    flat = x.reshape(batch + (c.dims[k],))
    out = ((flat @ u) * diag) @ u.T
    return out.reshape(batch + c.shapes[k])


def dense_operator(c: SubspaceCascade, k: int, values: Sequence) -> np.ndarray:
    """Materialise the level-``k`` diagonal operator as a ``d̄_k × d̄_k`` matrix (any backend)."""
    eye = np.eye(c.dims[k]).reshape((c.dims[k],) + c.shapes[k])
    cols = apply_diag(c, k, values, eye).reshape(c.dims[k], c.dims[k])
    return cols.T


def dense_down(c: SubspaceCascade, k: int) -> np.ndarray:
    """``D̄_k`` (level 0 → level ``k``) as a dense matrix."""
    eye = np.eye(c.dims[0]).reshape((c.dims[0],) + c.shapes[0])
    return to_level(c, k, eye).reshape(c.dims[0], c.dims[k]).T
