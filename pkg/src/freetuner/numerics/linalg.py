"""Principal-component projection used by the diagnostics."""
from __future__ import annotations

import numpy as np

from ..errors import InvalidArgument
from .tensor import Tensor, as_tensor


def pca_components(rows: np.ndarray, k: int) -> np.ndarray:
    """Top-``k`` principal axes (D x k) of the centred rows.

    Each axis is signed so that its largest-magnitude loading is positive.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise InvalidArgument("pca expects an N x D matrix")
    n, d = rows.shape
    if k < 1 or k > min(n, d):
        raise InvalidArgument(f"k={k} must lie in [1, min(N, D)={min(n, d)}]")
    centred = rows - rows.mean(axis=0)
    cov = centred.T @ centred / n
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals, kind="stable")[::-1][:k]
    comps = vecs[:, order]
    lead = np.argmax(np.abs(comps), axis=0)
    signs = np.sign(comps[lead, np.arange(k)])
    signs[signs == 0] = 1.0
    return comps * signs


def pca_project(rows, k: int) -> Tensor:
    """Project centred ``rows`` (N x D) onto their top-``k`` principal axes."""
    x = as_tensor(rows).data
    comps = pca_components(x, k)
    return Tensor((x - x.mean(axis=0)) @ comps)
