"""Small numeric helpers: deterministic reductions, finite differences, local interpolation."""

from __future__ import annotations

import numpy as np


def tree_sum(values: np.ndarray, partitions: int = 1) -> float:
    """Sum an array with a fixed-topology pairwise tree.

    The array is split into ``partitions`` contiguous chunks; each chunk is
    summed with numpy's (deterministic, single-threaded) pairwise reduction and
    the partial sums are combined pairwise.  The result is bit-reproducible for
    a given partition count.
    """
    flat = np.asarray(values, dtype=np.float64).ravel()
    if partitions <= 1:
        return float(np.sum(flat))
    chunks = np.array_split(flat, partitions)
    partials = [np.sum(c) for c in chunks]
    while len(partials) > 1:
        nxt = []
        for i in range(0, len(partials) - 1, 2):
            nxt.append(partials[i] + partials[i + 1])
        if len(partials) % 2:
            nxt.append(partials[-1])
        partials = nxt
    return float(partials[0])


def fd4(fn, x: float, h: float) -> float:
    """Fourth-order central difference of a scalar function of one variable."""
    return (-fn(x + 2 * h) + 8 * fn(x + h) - 8 * fn(x - h) + fn(x - 2 * h)) / (12 * h)


def fd4_array(fn, x: float, h: float):
    """fd4 for array-valued fn (any shape)."""
    return (-fn(x + 2 * h) + 8 * fn(x + h) - 8 * fn(x - h) + fn(x - 2 * h)) / (12 * h)


def fd2_second(fn, x: float, h: float):
    """Second-order central second derivative of array-valued fn."""
    return (fn(x + h) - 2 * fn(x) + fn(x - h)) / (h * h)


def lagrange4_weights(frac: np.ndarray) -> np.ndarray:
    """Cubic Lagrange weights on the stencil (-1, 0, 1, 2) at offset frac in [0, 1).

    Returns shape frac.shape + (4,); the weights sum to one and reproduce
    cubics exactly on uniformly spaced data.
    """
    f = np.asarray(frac)
    w0 = -f * (f - 1.0) * (f - 2.0) / 6.0
    w1 = (f * f - 1.0) * (f - 2.0) / 2.0
    w2 = -f * (f + 1.0) * (f - 2.0) / 2.0
    w3 = f * (f * f - 1.0) / 6.0
    return np.stack([w0, w1, w2, w3], axis=-1)


def lagrange_nonuniform(xs: np.ndarray, ys: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Polynomial interpolation through k nodes at arbitrary abscissae.

    ``xs``: (..., k) node positions, ``ys``: (..., k) values (or (..., k, m) for
    vector values), ``x``: (...,) query.  Uses the Lagrange form; k is small
    (typically 4) so stability is not a concern.
    """
    xs = np.asarray(xs)
    ys = np.asarray(ys)
    x = np.asarray(x)
    k = xs.shape[-1]
    vec = ys.ndim == xs.ndim + 1
    acc = np.zeros(ys.shape[:-2] + ys.shape[-1:]) if vec else np.zeros(xs.shape[:-1])
    for i in range(k):
        w = np.ones(xs.shape[:-1])
        xi = xs[..., i]
        for j in range(k):
            if j == i:
                continue
            w = w * (x - xs[..., j]) / (xi - xs[..., j])
        acc = acc + (w[..., None] * ys[..., i, :] if vec else w * ys[..., i])
    return acc


def grid_gradient(arr: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Second-order central differences along one axis, one-sided at the ends."""
    return np.gradient(arr, h, axis=axis, edge_order=2)


def batched_eigvalsh_range(mats: np.ndarray) -> tuple[float, float]:
    """(global min, global max) eigenvalue over a batch of symmetric matrices."""
    ev = np.linalg.eigvalsh(mats)
    return float(ev.min()), float(ev.max())


def inv3x3_sym(g: np.ndarray) -> np.ndarray:
    """Adjugate inverse of batched symmetric 3x3 matrices (much faster than linalg.inv)."""
    a = g[..., 0, 0]
    b = g[..., 0, 1]
    c = g[..., 0, 2]
    d = g[..., 1, 1]
    e = g[..., 1, 2]
    f = g[..., 2, 2]
    A = d * f - e * e
    B = c * e - b * f
    C = b * e - c * d
    det = a * A + b * B + c * C
    inv = np.empty_like(g)
    inv[..., 0, 0] = A / det
    inv[..., 0, 1] = inv[..., 1, 0] = B / det
    inv[..., 0, 2] = inv[..., 2, 0] = C / det
    inv[..., 1, 1] = (a * f - c * c) / det
    inv[..., 1, 2] = inv[..., 2, 1] = (b * c - a * e) / det
    inv[..., 2, 2] = (a * d - b * b) / det
    return inv


def det3x3(g: np.ndarray) -> np.ndarray:
    a = g[..., 0, 0]
    b = g[..., 0, 1]
    c = g[..., 0, 2]
    d = g[..., 1, 1]
    e = g[..., 1, 2]
    f = g[..., 2, 2]
    return a * (d * f - e * e) + b * (c * e - b * f) + c * (b * e - c * d)
