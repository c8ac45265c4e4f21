"""Independent reference solvers used by the tests."""
from itertools import combinations

import numpy as np


def transport_constraints(a, b):
    """Row-sum then column-sum equality matrix over the row-major flattened plan."""
    A = np.zeros((a + b, a * b))
    for i in range(a):
        A[i, i * b:(i + 1) * b] = 1.0
    for j in range(b):
        A[a + j, j::b] = 1.0
    return A


def exhaustive_ot(cost, mu, nu):
    """Exact OT optimum by enumerating every basic feasible solution.

    One equality is redundant, so a basis has a + b - 1 cells.  The
    constraint matrix is totally unimodular: a basis has determinant +-1 and
    every other column subset has determinant 0.
    """
    cost = np.asarray(cost, dtype=np.float64)
    a, b = cost.shape
    A = transport_constraints(a, b)[:-1]
    rhs = np.concatenate([np.asarray(mu, float), np.asarray(nu, float)])[:-1]
    r = a + b - 1
    subsets = np.array(list(combinations(range(a * b), r)))
    B = np.transpose(A[:, subsets], (1, 0, 2))
    keep = np.abs(np.linalg.det(B)) > 0.5
    subsets, B = subsets[keep], B[keep]
    x = np.linalg.solve(B, np.broadcast_to(rhs, (len(B), r))[..., None])[..., 0]
    feasible = (x >= -1e-12).all(axis=1)
    values = (x * cost.ravel()[subsets]).sum(axis=1)
    return float(values[feasible].min())


def linprog_ot(cost, mu, nu):
    from scipy.optimize import linprog

    a, b = np.shape(cost)
    res = linprog(np.ravel(cost), A_eq=transport_constraints(a, b), b_eq=np.concatenate([mu, nu]),
                  bounds=(0, None), method="highs")
    return float(res.fun)


def two_by_two_ot(cost, grid=20001):
    """Uniform 2x2 marginals: plans are [[t, .5-t], [.5-t, t]] for t in [0, .5]."""
    t = np.linspace(0.0, 0.5, grid)
    c = np.asarray(cost)
    vals = t * c[0, 0] + (0.5 - t) * c[0, 1] + (0.5 - t) * c[1, 0] + t * c[1, 1]
    return float(vals.min())


def contingency_nmi(a, b):
    """NMI from an explicit contingency table with plain Python loops."""
    import math

    n = len(a)
    la, lb = sorted(set(a)), sorted(set(b))
    table = [[sum(1 for x, y in zip(a, b) if x == p and y == q) for q in lb] for p in la]
    ra = [sum(row) for row in table]
    cb = [sum(table[i][j] for i in range(len(la))) for j in range(len(lb))]
    ha = -sum(r / n * math.log(r / n) for r in ra if r)
    hb = -sum(c / n * math.log(c / n) for c in cb if c)
    if ha == 0 or hb == 0:
        return 0.0
    mi = 0.0
    for i in range(len(la)):
        for j in range(len(lb)):
            if table[i][j]:
                pij = table[i][j] / n
                mi += pij * math.log(pij / (ra[i] / n * cb[j] / n))
    return mi / math.sqrt(ha * hb)


def best_two_partition(x):
    """Lowest within-cluster sum of squares over every 2-partition (n <= 12)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    best = np.inf
    for mask in range(1, 2 ** (n - 1)):
        sel = np.array([(mask >> i) & 1 for i in range(n)], dtype=bool)
        cost = 0.0
        for part in (x[sel], x[~sel]):
            cost += ((part - part.mean(axis=0)) ** 2).sum()
        best = min(best, cost)
    return best
