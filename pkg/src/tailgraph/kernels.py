"""Hot numeric kernels for corpus scoring.

Scoring one query against a corpus runs the same inner loop thousands of
times: pad two edge-embedding matrices, build an L1 affinity, run log-domain
Sinkhorn normalization, and sum the hinged residual. These kernels implement
that loop twice — once in pure numpy and once compiled with numba ``@njit``.

The numba path is used when numba imports cleanly; set ``TAILGRAPH_NO_NUMBA=1``
to force the numpy fallback. ``benchmarks/bench_kernels.py`` compares both.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "NUMBA_ENABLED",
    "sinkhorn_log",
    "pairwise_l1",
    "alignment_distance",
    "sinkhorn_log_numpy",
    "pairwise_l1_numpy",
    "alignment_distance_numpy",
]


# ----------------------------------------------------------------------
# pure-numpy reference implementations
# ----------------------------------------------------------------------
def sinkhorn_log_numpy(log_alpha: np.ndarray, n_iter: int) -> np.ndarray:
    """Alternating column/row normalization in log space; returns exp.

    Each sweep ends on the row normalization so the rows are exactly
    stochastic, matching the differentiable operator.
    """
    la = log_alpha.copy()
    for _ in range(n_iter):
        m = la.max(axis=0, keepdims=True)
        la -= m + np.log(np.exp(la - m).sum(axis=0, keepdims=True))
        m = la.max(axis=1, keepdims=True)
        la -= m + np.log(np.exp(la - m).sum(axis=1, keepdims=True))
    return np.exp(la)


def pairwise_l1_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix of L1 distances between rows of ``a`` and rows of ``b``."""
    return np.abs(a[:, None, :] - b[None, :, :]).sum(axis=2)


def alignment_distance_numpy(
    rq: np.ndarray, rc: np.ndarray, n_iter: int, temp: float
) -> float:
    """Hinged residual of aligning query edge embeddings onto corpus ones.

    Pads both matrices with zero rows to the common edge count, computes the
    negative-L1 affinity, relaxes the edge permutation by Sinkhorn iteration,
    and sums max(0, rq - P @ rc). Asymmetric in (rq, rc) by construction.
    """
    m, n = rq.shape[0], rc.shape[0]
    d = rq.shape[1]
    p = max(m, n)
    q = np.zeros((p, d))
    c = np.zeros((p, d))
    q[:m] = rq
    c[:n] = rc
    aff = -pairwise_l1_numpy(q, c)
    perm = sinkhorn_log_numpy(aff / temp, n_iter)
    resid = q - perm @ c
    return float(np.where(resid > 0, resid, 0.0).sum())


# ----------------------------------------------------------------------
# numba implementations (same semantics, loop form)
# ----------------------------------------------------------------------
_disabled = os.environ.get("TAILGRAPH_NO_NUMBA", "") not in ("", "0")
NUMBA_ENABLED = False

if not _disabled:
    try:
        from numba import njit

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ENABLED = False

if NUMBA_ENABLED:

    @njit(cache=True)
    def _sinkhorn_log_nb(log_alpha, n_iter):
        p = log_alpha.shape[0]
        la = log_alpha.copy()
        for _ in range(n_iter):
            for j in range(p):
                m = la[0, j]
                for i in range(1, p):
                    if la[i, j] > m:
                        m = la[i, j]
                s = 0.0
                for i in range(p):
                    s += np.exp(la[i, j] - m)
                lse = m + np.log(s)
                for i in range(p):
                    la[i, j] -= lse
            for i in range(p):
                m = la[i, 0]
                for j in range(1, p):
                    if la[i, j] > m:
                        m = la[i, j]
                s = 0.0
                for j in range(p):
                    s += np.exp(la[i, j] - m)
                lse = m + np.log(s)
                for j in range(p):
                    la[i, j] -= lse
        return np.exp(la)

    @njit(cache=True)
    def _pairwise_l1_nb(a, b):
        n_a, d = a.shape
        n_b = b.shape[0]
        out = np.empty((n_a, n_b))
        for i in range(n_a):
            for j in range(n_b):
                s = 0.0
                for k in range(d):
                    s += abs(a[i, k] - b[j, k])
                out[i, j] = s
        return out

    @njit(cache=True)
    def _alignment_distance_nb(rq, rc, n_iter, temp):
        m, d = rq.shape
        n = rc.shape[0]
        p = m if m > n else n
        q = np.zeros((p, d))
        c = np.zeros((p, d))
        q[:m] = rq
        c[:n] = rc
        aff = -_pairwise_l1_nb(q, c) / temp
        perm = _sinkhorn_log_nb(aff, n_iter)
        resid = q - perm @ c
        total = 0.0
        for i in range(p):
            for k in range(d):
                if resid[i, k] > 0.0:
                    total += resid[i, k]
        return total

    def sinkhorn_log(log_alpha, n_iter):
        return _sinkhorn_log_nb(np.ascontiguousarray(log_alpha, dtype=np.float64), n_iter)

    def pairwise_l1(a, b):
        return _pairwise_l1_nb(
            np.ascontiguousarray(a, dtype=np.float64),
            np.ascontiguousarray(b, dtype=np.float64),
        )

    def alignment_distance(rq, rc, n_iter, temp):
        return float(
            _alignment_distance_nb(
                np.ascontiguousarray(rq, dtype=np.float64),
                np.ascontiguousarray(rc, dtype=np.float64),
                n_iter,
                temp,
            )
        )

else:
    sinkhorn_log = sinkhorn_log_numpy
    pairwise_l1 = pairwise_l1_numpy
    alignment_distance = alignment_distance_numpy
