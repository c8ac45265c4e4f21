"""Pure-numpy versions of the iterative kernels.

Same signatures and results as the compiled ``_ckernels`` module; used when
the extension is not built or ``VLFLOW_PURE_PYTHON`` is set.
"""
from __future__ import annotations

import numpy as np


def ipot_plan(cost, mu, nu, beta, outer, inner):
    cost = np.asarray(cost, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    kernel = np.exp(-cost / beta)
    plan = np.outer(mu, nu)
    b = np.ones(cost.shape[1])
    for _ in range(outer):
        q = kernel * plan
        for _ in range(inner):
            a = mu / (q @ b)
            b = nu / (q.T @ a)
        plan = a[:, None] * q * b[None, :]
    return plan


def imf_sums(flow, vision, language):
    """(inter, intra) attention mass of ``flow`` over the two index sets."""
    flow = np.asarray(flow, dtype=np.float64)
    vision = np.asarray(vision, dtype=np.intp)
    language = np.asarray(language, dtype=np.intp)
    vv = flow[np.ix_(vision, vision)].sum()
    ll = flow[np.ix_(language, language)].sum()
    vl = flow[np.ix_(vision, language)].sum()
    lv = flow[np.ix_(language, vision)].sum()
    return float(vl + lv), float(vv + ll)


def _sq_dists(x, centroids):
    diff = x[:, None, :] - centroids[None, :, :]
    return (diff * diff).sum(axis=2)


def lloyd(x, centroids, max_iter):
    """Lloyd iterations from the given centroids.

    Returns ``(labels, centroids, iterations, objectives)``; ``objectives[t]``
    is the within-cluster sum of squares after iteration ``t``.  An emptied
    cluster is re-seeded at the point farthest from its assigned centroid.
    """
    x = np.asarray(x, dtype=np.float64)
    centroids = np.array(centroids, dtype=np.float64)
    k = centroids.shape[0]
    labels = np.full(x.shape[0], -1, dtype=np.int64)
    objectives = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centroids)
        new = d.argmin(axis=1).astype(np.int64)
        for j in range(k):
            if not (new == j).any():
                far = int(d[np.arange(x.shape[0]), new].argmax())
                new[far] = j
        changed = not np.array_equal(new, labels)
        labels = new
        for j in range(k):
            centroids[j] = x[labels == j].mean(axis=0)
        diff = x - centroids[labels]
        objectives.append(float((diff * diff).sum()))
        if not changed:
            break
    return labels, centroids, it, np.array(objectives)
