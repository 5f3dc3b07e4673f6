"""Dense-array helpers and the small linear-algebra kernels used across the package.

Tensors are plain ``numpy.ndarray`` objects in float64.  ``as_tensor`` is the
single entry point that enforces the finiteness invariant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

_JACOBI_MAX_SWEEPS = 80


def as_tensor(values, name="tensor"):
    """Convert ``values`` to a float64 array, rejecting NaN/Inf."""
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return arr


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class SvdResult:
    singular_values: np.ndarray

    def __len__(self):
        return len(self.singular_values)

    def count_above(self, epsilon):
        return int(np.count_nonzero(self.singular_values > epsilon))


def batched_singular_values(stack):
    """Singular values of every matrix in ``stack`` (shape ``[..., h, w]``).

    One-sided Jacobi (Hestenes) applied to all matrices at once: each cyclic
    sweep rotates column pairs until they are mutually orthogonal, after which
    the column norms are the singular values.  Returns ``[..., min(h, w)]``
    sorted descending.
    """
    a = as_tensor(stack, "matrix stack")
    if a.ndim < 2:
        raise InvalidArgumentError("expected at least a 2-D array")
    h, w = a.shape[-2:]
    if h == 0 or w == 0:
        raise InvalidArgumentError("empty matrix has no singular values")
    lead = a.shape[:-2]
    a = a.reshape((-1, h, w))
    # rows of `cols` are the columns being orthogonalized; keep their count = min(h, w)
    cols = a.transpose(0, 2, 1).copy() if w <= h else a.copy()
    n = cols.shape[1]
    tol = 8 * np.finfo(np.float64).eps
    for _ in range(_JACOBI_MAX_SWEEPS):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                ci = cols[:, i, :]
                cj = cols[:, j, :]
                alpha = np.einsum("bk,bk->b", ci, ci)
                beta = np.einsum("bk,bk->b", cj, cj)
                gamma = np.einsum("bk,bk->b", ci, cj)
                active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
                if not active.any():
                    continue
                rotated = True
                g = np.where(active, gamma, 1.0)
                with np.errstate(over="ignore"):  # huge zeta means a vanishing angle
                    zeta = (beta - alpha) / (2.0 * g)
                    t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                c = np.where(active, c, 1.0)[:, None]
                s = np.where(active, s, 0.0)[:, None]
                new_i = c * ci - s * cj
                new_j = s * ci + c * cj
                cols[:, i, :] = new_i
                cols[:, j, :] = new_j
        if not rotated:
            break
    sv = np.sqrt(np.einsum("bnk,bnk->bn", cols, cols))
    sv = -np.sort(-sv, axis=1)
    return sv.reshape(lead + (n,))


def svd_values(m) -> SvdResult:
    """Singular values of a single 2-D matrix, descending."""
    m = as_tensor(m, "matrix")
    if m.ndim != 2:
        raise InvalidArgumentError(f"svd_values expects a 2-D matrix, got shape {m.shape}")
    if m.size == 0:
        raise InvalidArgumentError("empty matrix has no singular values")
    return SvdResult(batched_singular_values(m[None])[0])


def percentile(values, x):
    """Linear-interpolation percentile of ``values`` at fraction ``x`` in (0, 1)."""
    v = as_tensor(values, "values").ravel()
    if v.size == 0:
        raise InvalidArgumentError("percentile of an empty tensor")
    if not 0.0 < x < 1.0:
        raise InvalidArgumentError(f"percentile fraction must lie in (0, 1), got {x}")
    return float(np.quantile(v, x, method="linear"))


def l1_mean(t):
    """Mean absolute value: ``sum(|t|) / t.size``."""
    t = as_tensor(t)
    if t.size == 0:
        raise InvalidArgumentError("l1_mean of an empty tensor")
    return float(np.abs(t).sum() / t.size)
