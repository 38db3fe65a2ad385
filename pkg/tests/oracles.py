"""Independent reference solutions used by the tests.

The mean and logit subproblems are re-stated directly in cvxpy and solved
with CLARABEL at tight tolerances; nothing from the package's solvers is
reused beyond the problem data.
"""

import warnings

import numpy as np

cp = None


def _cvxpy():
    global cp
    if cp is None:
        import cvxpy
        cp = cvxpy
    return cp


def _dense_diff(order, T):
    D = np.eye(T)
    for _ in range(order):
        D = np.diff(D, axis=0)
    return D


TIGHT = dict(tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)


def _solve(prob):
    # CLARABEL flags "inaccurate" when it stops just short of 1e-12 gaps
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        prob.solve(solver=_cvxpy().CLARABEL, **TIGHT)


def mean_oracle(gtk, S, sigma_inv, N, lam, l, r, const=0.0):
    """Minimize the one-cluster mean objective; returns ``(value, mu)``."""
    cvx = _cvxpy()
    T, d = S.shape
    mu = cvx.Variable((T, d))
    L = np.linalg.cholesky(sigma_inv)
    quad = sum(gtk[t] * cvx.sum_squares(L.T @ mu[t]) for t in range(T))
    lin = cvx.sum(cvx.multiply(S @ sigma_inv, mu))
    obj = const + (0.5 * quad - lin) / N
    if lam > 0:
        obj = obj + lam * cvx.sum(cvx.abs(_dense_diff(l + 1, T) @ mu))
    cons = []
    if np.isfinite(r):
        centre = cvx.sum(mu, axis=0) / T
        cons = [cvx.norm(mu[t] - centre) <= r for t in range(T)]
    prob = cvx.Problem(cvx.Minimize(obj), cons)
    _solve(prob)
    return prob.value, mu.value


def logit_oracle(gamma_tk, N, lam, l):
    """Minimize the pinned multinomial logit objective; returns ``(value, alpha)``."""
    cvx = _cvxpy()
    T, K = gamma_tk.shape
    a = cvx.Variable((K, T))
    lse = cvx.hstack([cvx.log_sum_exp(a[:, t]) for t in range(T)])
    obj = (gamma_tk.sum(axis=1) @ lse - cvx.sum(cvx.multiply(gamma_tk.T, a))) / N
    if lam > 0:
        obj = obj + lam * cvx.sum(cvx.abs(_dense_diff(l + 1, T) @ a.T))
    prob = cvx.Problem(cvx.Minimize(obj), [a[K - 1] == 0])
    _solve(prob)
    return prob.value, a.value


def kron_sylvester(A, B, E):
    """Dense solution of ``A X + X B + E = 0`` through ``vec``."""
    d, T = E.shape
    M = np.kron(np.eye(T), A) + np.kron(B.T, np.eye(d))
    return np.linalg.solve(M, -E.reshape(-1, order="F")).reshape((d, T), order="F")


def brute_rand(a, b):
    """Pairwise agreement fraction by direct enumeration."""
    a = np.asarray(a)
    b = np.asarray(b)
    n = a.size
    agree = 0
    for i in range(n):
        for j in range(i + 1, n):
            agree += (a[i] == a[j]) == (b[i] == b[j])
    return agree / (n * (n - 1) / 2)
