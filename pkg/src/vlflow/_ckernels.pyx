# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the iterative kernels (see ``_kernels_py``)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def ipot_plan(cost, mu, nu, double beta, int outer, int inner):
    cdef double[:, ::1] c = np.ascontiguousarray(cost, dtype=np.float64)
    cdef double[::1] m = np.ascontiguousarray(mu, dtype=np.float64)
    cdef double[::1] n = np.ascontiguousarray(nu, dtype=np.float64)
    cdef Py_ssize_t rows = c.shape[0], cols = c.shape[1]
    cdef Py_ssize_t i, j
    cdef int t, s
    cdef double acc
    kernel_arr = np.empty((rows, cols))
    plan_arr = np.empty((rows, cols))
    q_arr = np.empty((rows, cols))
    cdef double[:, ::1] g = kernel_arr
    cdef double[:, ::1] p = plan_arr
    cdef double[:, ::1] q = q_arr
    cdef double[::1] a = np.ones(rows)
    cdef double[::1] b = np.ones(cols)
    for i in range(rows):
        for j in range(cols):
            g[i, j] = exp(-c[i, j] / beta)
            p[i, j] = m[i] * n[j]
    for t in range(outer):
        for i in range(rows):
            for j in range(cols):
                q[i, j] = g[i, j] * p[i, j]
        for s in range(inner):
            for i in range(rows):
                acc = 0.0
                for j in range(cols):
                    acc += q[i, j] * b[j]
                a[i] = m[i] / acc
            for j in range(cols):
                acc = 0.0
                for i in range(rows):
                    acc += q[i, j] * a[i]
                b[j] = n[j] / acc
        for i in range(rows):
            for j in range(cols):
                p[i, j] = a[i] * q[i, j] * b[j]
    return plan_arr


def imf_sums(flow, vision, language):
    cdef double[:, ::1] f = np.ascontiguousarray(flow, dtype=np.float64)
    cdef Py_ssize_t[::1] v = np.ascontiguousarray(vision, dtype=np.intp)
    cdef Py_ssize_t[::1] l = np.ascontiguousarray(language, dtype=np.intp)
    cdef Py_ssize_t x, y
    cdef double inter = 0.0, intra = 0.0
    for x in range(v.shape[0]):
        for y in range(v.shape[0]):
            intra += f[v[x], v[y]]
        for y in range(l.shape[0]):
            inter += f[v[x], l[y]]
    for x in range(l.shape[0]):
        for y in range(l.shape[0]):
            intra += f[l[x], l[y]]
        for y in range(v.shape[0]):
            inter += f[l[x], v[y]]
    return inter, intra


def lloyd(x, centroids, int max_iter):
    cdef double[:, ::1] X = np.ascontiguousarray(x, dtype=np.float64)
    cent_arr = np.array(centroids, dtype=np.float64, order="C")
    cdef double[:, ::1] C = cent_arr
    cdef Py_ssize_t n = X.shape[0], dim = X.shape[1], k = C.shape[0]
    labels_arr = np.full(n, -1, dtype=np.int64)
    new_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] labels = labels_arr
    cdef long long[::1] new = new_arr
    cdef double[::1] best = np.empty(n)
    cdef long long[::1] counts = np.zeros(k, dtype=np.int64)
    cdef Py_ssize_t i, j, d, far
    cdef double dist, diff, obj, farthest
    cdef bint changed
    cdef int it = 0
    objectives = []
    for it in range(1, max_iter + 1):
        for i in range(n):
            best[i] = -1.0
            for j in range(k):
                dist = 0.0
                for d in range(dim):
                    diff = X[i, d] - C[j, d]
                    dist += diff * diff
                if best[i] < 0.0 or dist < best[i]:
                    best[i] = dist
                    new[i] = j
        for j in range(k):
            counts[j] = 0
        for i in range(n):
            counts[new[i]] += 1
        for j in range(k):
            if counts[j] == 0:
                far = 0
                farthest = -1.0
                for i in range(n):
                    if best[i] > farthest:
                        farthest = best[i]
                        far = i
                counts[new[far]] -= 1
                new[far] = j
                counts[j] = 1
        changed = False
        for i in range(n):
            if new[i] != labels[i]:
                changed = True
            labels[i] = new[i]
        for j in range(k):
            for d in range(dim):
                C[j, d] = 0.0
        for i in range(n):
            for d in range(dim):
                C[labels[i], d] += X[i, d]
        for j in range(k):
            for d in range(dim):
                C[j, d] /= counts[j]
        obj = 0.0
        for i in range(n):
            for d in range(dim):
                diff = X[i, d] - C[labels[i], d]
                obj += diff * diff
        objectives.append(obj)
        if not changed:
            break
    return labels_arr, cent_arr, it, np.array(objectives)
