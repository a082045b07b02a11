# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Signatures and results mirror ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs, INFINITY

cnp.import_array()


def circle_w1_sorted(double[::1] pos, double[::1] mass):
    """W1 on the unit circle from sorted positions and signed masses."""
    cdef Py_ssize_t k = pos.shape[0]
    cdef Py_ssize_t i
    cdef double acc = 0.0
    cdef double half, cum, c, total
    if k == 0:
        return 0.0
    diff = np.empty(k, dtype=np.float64)
    length = np.empty(k, dtype=np.float64)
    cdef double[::1] d = diff
    cdef double[::1] ell = length
    for i in range(k):
        acc += mass[i]
        d[i] = acc
        if i + 1 < k:
            ell[i] = pos[i + 1] - pos[i]
        else:
            ell[i] = 1.0 + pos[0] - pos[k - 1]
    # the wrap interval carries the total signed mass, which is zero
    d[k - 1] = 0.0
    cdef cnp.intp_t[::1] order = np.argsort(diff, kind="stable")
    total = 0.0
    for i in range(k):
        total += ell[i]
    half = 0.5 * total
    cum = 0.0
    c = d[order[k - 1]]
    for i in range(k):
        cum += ell[order[i]]
        if cum >= half:
            c = d[order[i]]
            break
    acc = 0.0
    for i in range(k):
        acc += ell[i] * fabs(d[i] - c)
    return acc


def dp_backup(double[:, ::1] v_next, double[:, ::1] drift, double[:, ::1] cost,
              double[::1] mom, double dt, double b_step, double budget):
    """One backward Bellman step on the periodic state grid (x budget levels)."""
    cdef Py_ssize_t G = v_next.shape[0]
    cdef Py_ssize_t B = v_next.shape[1]
    cdef Py_ssize_t A = drift.shape[1]
    cdef Py_ssize_t g, l, a, i0, i1, j0, j1
    cdef double y, fx, yb, fb, q, best, xn, bn, v0, v1
    value = np.empty((G, B), dtype=np.float64)
    action = np.empty((G, B), dtype=np.intp)
    cdef double[:, ::1] out = value
    cdef cnp.intp_t[:, ::1] act = action
    for g in range(G):
        for l in range(B):
            best = INFINITY
            act[g, l] = -1
            for a in range(A):
                if B > 1:
                    bn = l * b_step + dt * mom[a]
                    if bn > budget * (1.0 + 1e-12) + 1e-12:
                        continue
                    yb = bn / b_step
                    j0 = <Py_ssize_t>floor(yb)
                    if j0 >= B - 1:
                        j0 = B - 1
                        j1 = B - 1
                        fb = 0.0
                    else:
                        j1 = j0 + 1
                        fb = yb - j0
                else:
                    j0 = 0
                    j1 = 0
                    fb = 0.0
                xn = <double>g / G + dt * drift[g, a]
                y = (xn - floor(xn)) * G
                i0 = <Py_ssize_t>floor(y)
                fx = y - i0
                i0 = i0 % G
                i1 = (i0 + 1) % G
                v0 = (1.0 - fx) * v_next[i0, j0] + fx * v_next[i1, j0]
                if fb > 0.0:
                    v1 = (1.0 - fx) * v_next[i0, j1] + fx * v_next[i1, j1]
                    v0 = (1.0 - fb) * v0 + fb * v1
                q = dt * cost[g, a] + v0
                if q < best:
                    best = q
                    act[g, l] = a
            out[g, l] = best
    return value, action


def project_simplex_rows(double[:, ::1] v):
    """Euclidean projection of each row onto the probability simplex."""
    cdef Py_ssize_t R = v.shape[0]
    cdef Py_ssize_t M = v.shape[1]
    cdef Py_ssize_t r, j, rho
    cdef double cum, theta, t
    out = np.empty((R, M), dtype=np.float64)
    cdef double[:, ::1] w = out
    srt = -np.sort(-np.asarray(v), axis=1)
    cdef double[:, ::1] s = srt
    for r in range(R):
        cum = 0.0
        rho = 0
        theta = s[r, 0] - 1.0
        for j in range(M):
            cum += s[r, j]
            t = (cum - 1.0) / (j + 1)
            if s[r, j] - t > 0.0:
                rho = j
                theta = t
        for j in range(M):
            t = v[r, j] - theta
            w[r, j] = t if t > 0.0 else 0.0
    return out
