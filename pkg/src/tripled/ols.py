"""Weighted least squares through a column-pivoted QR decomposition."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from tripled.errors import DimensionMismatch, RankDeficient


@dataclass(frozen=True)
class OLSResult:
    coefficients: np.ndarray
    residuals: np.ndarray
    rank: int
    condition: float  # |R_00| / |R_kk| of the pivoted triangular factor


def ols_solve(
    design: np.ndarray,
    response: np.ndarray,
    weights: np.ndarray | None = None,
    names: Sequence[str] | None = None,
) -> OLSResult:
    """Minimise ``sum_i w_i (y_i - x_i' b)^2``.

    Rank deficiency raises :class:`RankDeficient` naming the columns the
    pivoted QR could not identify; no minimum-norm fallback is attempted.
    Residuals are returned on the original (unweighted) scale.
    """
    X = np.asarray(design, dtype=np.float64)
    y = np.asarray(response, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, k = X.shape
    if y.shape != (n,):
        raise DimensionMismatch(f"design has {n} rows but response has shape {y.shape}")
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,):
            raise DimensionMismatch(f"weights shape {w.shape} does not match {n} rows")
        if np.any(w < 0) or not np.any(w > 0):
            raise ValueError("weights must be non-negative and not all zero")
        sw = np.sqrt(w)
        Xw, yw = X * sw[:, None], y * sw
    else:
        Xw, yw = X, y
    if k == 0:
        return OLSResult(np.zeros(0), y.copy(), 0, 1.0)

    q, r, piv = scipy.linalg.qr(Xw, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(n, k) * np.finfo(np.float64).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < k or diag[0] == 0.0:
        bad = sorted(int(j) for j in piv[rank:])
        labels = [names[j] for j in bad] if names is not None else bad
        raise RankDeficient(
            f"design matrix has rank {rank} < {k}; unidentified column(s): {labels}",
            rank=rank,
            columns=labels,
        )
    z = scipy.linalg.solve_triangular(r, q.T @ yw)
    beta = np.empty(k)
    beta[piv] = z
    return OLSResult(
        coefficients=beta,
        residuals=y - X @ beta,
        rank=rank,
        condition=float(diag[0] / diag[rank - 1]),
    )
