"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def chi2_conjugate(y):
    w = np.maximum(0.5 * y + 1.0, 0.0)
    return w * y - (w - 1.0) ** 2, w


def gather_pairs(table, i, j):
    return table[i, j]


def scatter_add_pairs(table, i, j, vals):
    np.add.at(table, (i, j), vals)


def pair_value_iteration(P, reward, gamma, tol, max_iter):
    S = P.shape[0]
    V = np.zeros((S, S))
    act = np.zeros((S, S), dtype=np.int64)
    it = 0
    while it < max_iter:
        it += 1
        cont = np.einsum("tau,tu->ta", P, V)
        q = reward + gamma * cont[None, :, :]
        act = np.argmax(q, axis=2)
        Vn = np.take_along_axis(q, act[..., None], axis=2)[..., 0]
        delta = np.max(np.abs(Vn - V))
        V = Vn
        if delta <= tol:
            break
    return V, act.astype(np.int64), it
