"""Hot per-example kernels for Linear layers.

Each kernel has a numpy implementation (``*_np``) and a loop implementation
(``*_nb``) compiled with numba when it is available. The public names
``ghost_sq_2d`` and ``ghost_sq_seq`` bind to the numba variant unless
``GROUPCLIP_DISABLE_NUMBA`` is set; ``materialize`` always uses numpy. Both variants are always importable
so tests and benchmarks can compare them.

Shapes: ``a`` is the layer input (B, in) or (B, T, in); ``e`` is the gradient
of the summed loss w.r.t. the layer output, (B, out) or (B, T, out).
"""

from __future__ import annotations

import numpy as np

from ._accel import HAVE_NUMBA, njit


def ghost_sq_2d_np(a: np.ndarray, e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    e_sq = np.einsum("bo,bo->b", e, e)
    return np.einsum("bi,bi->b", a, a) * e_sq, e_sq


def ghost_sq_seq_np(a: np.ndarray, e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # <a a^T, e e^T>_F over the sequence axis; never forms the (out, in) gradient
    gram_a = np.matmul(a, a.transpose(0, 2, 1))
    gram_e = np.matmul(e, e.transpose(0, 2, 1))
    w_sq = np.einsum("bts,bts->b", gram_a, gram_e)
    e_sum = e.sum(axis=1)
    return w_sq, np.einsum("bo,bo->b", e_sum, e_sum)


def materialize_np(a: np.ndarray, e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if a.ndim == 2:
        return np.einsum("bo,bi->boi", e, a), e.copy()
    return np.einsum("bto,bti->boi", e, a), e.sum(axis=1)


@njit
def _ghost_sq_2d_loop(a, e):
    n = a.shape[0]
    w_sq = np.empty(n)
    b_sq = np.empty(n)
    for i in range(n):
        se = np.dot(e[i], e[i])
        w_sq[i] = np.dot(a[i], a[i]) * se
        b_sq[i] = se
    return w_sq, b_sq


@njit
def _ghost_sq_seq_loop(a, e):
    n, steps = a.shape[0], a.shape[1]
    w_sq = np.empty(n)
    b_sq = np.empty(n)
    for i in range(n):
        # per-example Gram matrices go through BLAS; the Frobenius product is a plain loop
        gram_a = a[i] @ a[i].T
        gram_e = e[i] @ e[i].T
        acc = 0.0
        for t in range(steps):
            for s in range(steps):
                acc += gram_a[t, s] * gram_e[t, s]
        w_sq[i] = acc
        bs = 0.0
        for o in range(e.shape[2]):
            col = 0.0
            for t in range(steps):
                col += e[i, t, o]
            bs += col * col
        b_sq[i] = bs
    return w_sq, b_sq


@njit
def _materialize_2d_loop(a, e):
    n, d_in, d_out = a.shape[0], a.shape[1], e.shape[1]
    g = np.empty((n, d_out, d_in))
    for i in range(n):
        for o in range(d_out):
            eo = e[i, o]
            for p in range(d_in):
                g[i, o, p] = eo * a[i, p]
    return g, e.copy()


@njit
def _materialize_seq_loop(a, e):
    n, steps, d_in, d_out = a.shape[0], a.shape[1], a.shape[2], e.shape[2]
    g = np.zeros((n, d_out, d_in))
    gb = np.zeros((n, d_out))
    for i in range(n):
        for t in range(steps):
            for o in range(d_out):
                eo = e[i, t, o]
                gb[i, o] += eo
                for p in range(d_in):
                    g[i, o, p] += eo * a[i, t, p]
    return g, gb


def _c(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def ghost_sq_2d_nb(a, e):
    return _ghost_sq_2d_loop(_c(a), _c(e))


def ghost_sq_seq_nb(a, e):
    return _ghost_sq_seq_loop(_c(a), _c(e))


def materialize_nb(a, e):
    if a.ndim == 2:
        return _materialize_2d_loop(_c(a), _c(e))
    return _materialize_seq_loop(_c(a), _c(e))


# Materialization is a pure memory-bound outer product where numpy's einsum
# already wins (see benchmarks/bench_kernels.py), so it stays on numpy.
materialize = materialize_np
if HAVE_NUMBA:
    ghost_sq_2d, ghost_sq_seq = ghost_sq_2d_nb, ghost_sq_seq_nb
else:
    ghost_sq_2d, ghost_sq_seq = ghost_sq_2d_np, ghost_sq_seq_np
