"""Reference implementations that share no code with the package."""

from __future__ import annotations

import itertools
import math

import numpy as np


def jacobi_singular_values(A: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100) -> np.ndarray:
    """Singular values by one-sided (Hestenes) Jacobi rotations, descending."""
    U = np.array(A, dtype=np.float64, copy=True)
    n = U.shape[1]
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = U[:, p] @ U[:, p]
                beta = U[:, q] @ U[:, q]
                gamma = U[:, p] @ U[:, q]
                if abs(gamma) <= tol * math.sqrt(alpha * beta) or abs(gamma) < 1e-200:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if abs(zeta) > 1e150:
                    t = 0.5 / zeta
                else:
                    t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                up, uq = U[:, p].copy(), U[:, q].copy()
                U[:, p] = c * up - s * uq
                U[:, q] = s * up + c * uq
        if not rotated:
            break
    return np.sort(np.linalg.norm(U, axis=0))[::-1]


def bisect_inverse_cdf(p: float) -> float:
    """Phi^{-1}(p) by bisection on 0.5 * erfc(-z / sqrt 2)."""
    lo, hi = -40.0, 40.0
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        if 0.5 * math.erfc(-mid / math.sqrt(2.0)) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def brute_force_genotype(n_nodes, mu_a, var_a, mu_b, var_b, zero_index):
    """Exhaustive pick of (predecessor pair, op per predecessor) for each node.

    Scores are ``E[beta] * E[alpha]`` written out from the log-normal mean.
    Among all choices the winner has the lexicographically largest sorted
    score pair; remaining ties go to the smallest predecessor pair.
    """
    rows = []
    e0 = 0
    for j in range(2, n_nodes):
        edges = list(range(e0, e0 + j))
        e0 += j
        best_key, best = None, None
        for i1, i2 in itertools.combinations(range(j), 2):
            op_choices = []
            for i in (i1, i2):
                e = edges[i]
                ops = [o for o in range(mu_a.shape[1]) if o != zero_index]
                op_choices.append([(math.exp(mu_b[e] + var_b[e] / 2 + mu_a[e, o] + var_a[e, o] / 2), o)
                                   for o in ops])
            for (s1, o1), (s2, o2) in itertools.product(*op_choices):
                key = (tuple(sorted((s1, s2), reverse=True)), (-i1, -i2), (-o1, -o2))
                if best_key is None or key > best_key:
                    best_key, best = key, ((i1, o1), (i2, o2))
        rows.append(best)
    return rows
