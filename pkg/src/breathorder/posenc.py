"""Absolute position tables and learned Lie-group rotations (LieRE).

A LieRE position ``p = (x, y, t)`` maps to a block-diagonal rotation
``R(p) = exp(x A_x + y A_y + t A_t)`` with skew-symmetric generators
``A_a = U_a - U_a^T``; queries and keys are rotated by ``R`` of their own
token position before the attention dot product.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as tc
from .tensor import Tensor

AXES = ("x", "y", "t")


def skew(U: Tensor) -> Tensor:
    """``U - U^T`` over the last two axes; exactly antisymmetric."""
    if U.ndim < 2 or U.shape[-1] != U.shape[-2]:
        raise ValueError(f"skew needs square blocks, got shape {U.shape}")
    return U - tc.swapaxes(U, -1, -2)


def _squarings_for(A: np.ndarray) -> int:
    norm1 = float(np.abs(A).sum(axis=-2).max()) if A.size else 0.0
    if not math.isfinite(norm1):
        raise tc.NumericError("non-finite generator entries in matrix exponential")
    if norm1 <= 0.5:
        return 0
    return int(math.ceil(math.log2(norm1 / 0.5)))


def expm_skew(A: Tensor, num_terms: int = 12, squarings: int | None = None) -> Tensor:
    """Matrix exponential of (a batch of) skew-symmetric blocks.

    Scaling and squaring: ``A`` is scaled by ``2**-s`` so its 1-norm is at
    most 0.5, the Taylor series is summed in Horner form with ``num_terms``
    terms, and the result is squared ``s`` times.  Differentiable.
    """
    A = tc.as_tensor(A)
    s = _squarings_for(A.data) if squarings is None else squarings
    X = A * (0.5 ** s) if s else A
    eye = np.broadcast_to(np.eye(A.shape[-1], dtype=A.dtype), A.shape)
    E = Tensor(eye.copy())
    for k in range(num_terms, 0, -1):
        E = tc.matmul(X, E) * (1.0 / k) + eye
    for _ in range(s):
        E = tc.matmul(E, E)
    return E


class LieREGenerators:
    """Per-axis generator parameters, ``n_blocks`` blocks of size ``block``."""

    def __init__(self, head_dim: int, block: int = 8, n_axes: int = 3,
                 rng: np.random.Generator | None = None, init_std: float = 0.2, dtype=np.float64):
        if head_dim % block:
            raise ValueError(f"head dim {head_dim} not divisible by block size {block}")
        self.block = block
        self.n_blocks = head_dim // block
        rng = rng or np.random.default_rng(0)
        self.U = tc.parameter(rng.normal(0.0, init_std, size=(n_axes, self.n_blocks, block, block)), dtype)

    @property
    def head_dim(self) -> int:
        return self.n_blocks * self.block

    def generators(self) -> Tensor:
        return skew(self.U)


def rotation_for_position(U: Tensor, coords, num_terms: int = 12) -> Tensor:
    """Rotations for ``coords`` of shape (P, n_axes): returns (P, n_blocks, b, b)."""
    coords = np.asarray(coords, dtype=U.dtype)
    if coords.ndim == 1:
        coords = coords[None]
    n_axes, nb, b, _ = U.shape
    if coords.shape[-1] != n_axes:
        raise ValueError(f"coords have {coords.shape[-1]} axes, generators {n_axes}")
    A = skew(U).reshape(n_axes, nb * b * b)
    M = tc.matmul(Tensor(coords), A).reshape(coords.shape[0], nb, b, b)
    return expm_skew(M, num_terms)


def with_identity(R: Tensor, n_identity: int = 1) -> Tensor:
    """Prepend identity rotations (for CLS tokens) along the token axis (-4)."""
    shape = list(R.shape)
    shape[-4] = n_identity
    eye = np.broadcast_to(np.eye(R.shape[-1], dtype=R.dtype), shape).copy()
    return tc.concat([Tensor(eye), R], axis=-4)


def apply_rotation(x: Tensor, R: Tensor) -> Tensor:
    """Rotate head vectors ``x`` (..., N, d_h) by per-token block rotations
    ``R`` (N, n_blocks, b, b); ``R`` may carry extra leading axes that
    broadcast against ``x``'s leading axes."""
    *lead, N, dh = x.shape
    nb, b = R.shape[-3], R.shape[-1]
    if R.shape[-4] != N:
        raise ValueError(f"{N} tokens but {R.shape[-4]} rotations")
    if nb * b != dh:
        raise ValueError(f"rotation blocks cover {nb * b} dims, heads have {dh}")
    xr = x.reshape(*lead, N, nb, b, 1)
    return tc.matmul(R, xr).reshape(*lead, N, dh)


def rotate_qk(q: Tensor, k: Tensor, R_q: Tensor, R_k: Tensor | None = None) -> tuple[Tensor, Tensor]:
    return apply_rotation(q, R_q), apply_rotation(k, R_q if R_k is None else R_k)


# -- coordinates ---------------------------------------------------------------

def patch_centers(grid: int) -> np.ndarray:
    """(grid*grid, 2) normalized (x, y) centers in row-major patch order."""
    c = (np.arange(grid) + 0.5) / grid
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def frame_times(T: int) -> np.ndarray:
    return np.zeros(1) if T == 1 else np.arange(T) / (T - 1)


def spatial_coords(grid: int, T: int) -> np.ndarray:
    """(T, grid*grid, 3): patch (x, y) with the frame's t held constant."""
    xy = patch_centers(grid)
    t = frame_times(T)
    out = np.empty((T, xy.shape[0], 3))
    out[:, :, :2] = xy
    out[:, :, 2] = t[:, None]
    return out


def temporal_coords(T: int) -> np.ndarray:
    """(T, 3): frames sit at the image center, t in [0, 1]."""
    out = np.full((T, 3), 0.5)
    out[:, 2] = frame_times(T)
    return out


# -- absolute embeddings -------------------------------------------------------

def ape_lookup(table: Tensor, slots) -> Tensor:
    return tc.take_rows(table, slots)
