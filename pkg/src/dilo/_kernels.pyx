# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Signatures and results match ``_kernels_py`` exactly."""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


def chi2_conjugate(const double[::1] y):
    """Return (conjugate, derivative) of the nonnegative-ratio chi-square conjugate."""
    cdef Py_ssize_t n = y.shape[0], k
    out = np.empty(n, dtype=np.float64)
    der = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double[::1] d = der
    cdef double w, x
    with nogil:
        for k in range(n):
            x = y[k]
            w = 0.5 * x + 1.0
            if w < 0.0:
                w = 0.0
            o[k] = w * x - (w - 1.0) * (w - 1.0)
            d[k] = w
    return out, der


def gather_pairs(const double[:, ::1] table, const long[::1] i, const long[::1] j):
    cdef Py_ssize_t n = i.shape[0], k
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for k in range(n):
            o[k] = table[i[k], j[k]]
    return out


def scatter_add_pairs(double[:, ::1] table, const long[::1] i, const long[::1] j,
                      const double[::1] vals):
    cdef Py_ssize_t n = i.shape[0], k
    with nogil:
        for k in range(n):
            table[i[k], j[k]] += vals[k]


def pair_value_iteration(const double[:, :, ::1] P, const double[:, :, ::1] reward,
                         double gamma, double tol, long max_iter):
    """Optimal values over (s, s') pair states; action a at (s, s') moves to (s', s'')."""
    cdef Py_ssize_t S = P.shape[0], A = P.shape[1]
    cdef Py_ssize_t s, t, u, a, best
    cdef long it = 0
    cdef double q, qbest, delta, cont
    V_arr = np.zeros((S, S), dtype=np.float64)
    Vn_arr = np.zeros((S, S), dtype=np.float64)
    C_arr = np.zeros((S, A), dtype=np.float64)
    act_arr = np.zeros((S, S), dtype=np.int64)
    cdef double[:, ::1] V = V_arr
    cdef double[:, ::1] Vn = Vn_arr
    cdef double[:, ::1] C = C_arr
    cdef long[:, ::1] act = act_arr
    with nogil:
        while it < max_iter:
            it += 1
            for t in range(S):
                for a in range(A):
                    cont = 0.0
                    for u in range(S):
                        cont = cont + P[t, a, u] * V[t, u]
                    C[t, a] = cont
            delta = 0.0
            for s in range(S):
                for t in range(S):
                    qbest = reward[s, t, 0] + gamma * C[t, 0]
                    best = 0
                    for a in range(1, A):
                        q = reward[s, t, a] + gamma * C[t, a]
                        if q > qbest:
                            qbest = q
                            best = a
                    Vn[s, t] = qbest
                    act[s, t] = best
                    if fabs(qbest - V[s, t]) > delta:
                        delta = fabs(qbest - V[s, t])
            for s in range(S):
                for t in range(S):
                    V[s, t] = Vn[s, t]
            if delta <= tol:
                break
    return V_arr, act_arr, it
