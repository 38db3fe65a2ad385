"""Numerical kernels shared by the mean and probability updates.

Discrete difference operators, the lasso basis for trend filtering, an exact
dynamic-programming fused lasso, a Bartels-Stewart Sylvester solver with
cached Schur factors, and an interior-point solver for weighted trend
filtering.
"""

import math

import numba
import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp


class DimensionError(ValueError):
    pass


class ConditioningError(np.linalg.LinAlgError):
    pass


def _first_diff(n):
    """(n-1) x n matrix with rows (-1, 1)."""
    if n < 1:
        raise DimensionError("need at least one column, got %d" % n)
    return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1],
                    shape=(n - 1, n), format="csr")


def diff_factor(l, T, times=None):
    """Right factor ``G`` such that ``D^(l+1) = D^(1) G``.

    ``G`` is the identity for ``l == 0``. With unit spacing ``G = D^(l)``;
    with explicit ``times`` it carries the diagonal rescaling
    ``l / (x_{i+l} - x_i)`` applied between composition steps.
    """
    l = int(l)
    if l < 0:
        raise DimensionError("order must be nonnegative")
    if l + 1 > T:
        raise DimensionError("order %d needs T >= %d, got T=%d" % (l, l + 1, T))
    if l == 0:
        return sp.identity(T, format="csr")
    D = diff_matrix(l, T, times)
    if times is None:
        return D
    x = np.asarray(times, dtype=float)
    scale = l / (x[l:] - x[:-l])
    return sp.diags(scale).dot(D).tocsr()


def diff_matrix(l, T, times=None):
    """Order-``l`` discrete difference matrix of shape ``(T - l, T)``.

    Built by the recursion ``D^(l+1) = D^(1) D^(l)`` from ``D^(0) = I``.
    Passing ``times`` (strictly increasing, length ``T``) switches to the
    unevenly spaced variant, which rescales by ``k / (x_{i+k} - x_i)``
    before each further differencing.
    """
    l = int(l)
    if l < 0:
        raise DimensionError("order must be nonnegative")
    if l > T or (l + 1 > T and l > 0):
        raise DimensionError("order %d needs T >= %d, got T=%d" % (l, l + 1, T))
    if times is not None:
        x = np.asarray(times, dtype=float)
        if x.shape != (T,):
            raise DimensionError("times must have length T")
        if np.any(np.diff(x) <= 0):
            raise ValueError("times must be strictly increasing")
    D = sp.identity(T, format="csr")
    for k in range(l):
        if k > 0 and times is not None:
            D = sp.diags(k / (x[k:] - x[:-k])).dot(D)
        D = _first_diff(T - k).dot(D)
    return D.tocsr()


def is_unit_spacing(times):
    if times is None:
        return True
    d = np.diff(np.asarray(times, dtype=float))
    return d.size == 0 or np.allclose(d, d[0], rtol=0, atol=1e-12 * max(1.0, abs(d[0])))


def tf_basis(k, T):
    """Lasso basis ``H`` (T x T) for order-``k`` trend filtering.

    Columns ``1..k+1`` are the polynomials ``i^(j-1) / T^(j-1)``; column
    ``j >= k+2`` is zero on rows ``i <= j-1`` and ``sigma^(k)_{i-j+1} k!/T^k``
    below, with ``sigma^(k)`` the k-th order cumulative sum of ones. Then
    ``D^(k+1) H = [0 | (k!/T^k) I]``.
    """
    k = int(k)
    if k < 0:
        raise DimensionError("order must be nonnegative")
    if k + 2 > T:
        raise DimensionError("basis of order %d needs T >= %d" % (k, k + 2))
    i = np.arange(1, T + 1, dtype=float)
    H = np.zeros((T, T))
    for j in range(1, k + 2):
        H[:, j - 1] = (i / T) ** (j - 1)
    sigma = np.ones(T)
    for _ in range(k):
        sigma = np.cumsum(sigma)
    scale = math.factorial(k) / float(T) ** k
    for j in range(k + 2, T + 1):
        H[j - 1:, j - 1] = sigma[:T - j + 1] * scale
    return H


def tf_basis_penalty_scale(k, T):
    """Factor ``k!/T^k`` relating ``||D^(k+1) H w||_1`` to ``||w_{k+2:}||_1``."""
    return math.factorial(k) / float(T) ** k


@numba.njit(cache=True)
def _tf_dp(y, lam):
    # Johnson (2013) O(n) dynamic program for
    #   min_b 1/2 ||y - b||^2 + lam * sum |b_{i+1} - b_i|
    n = y.shape[0]
    beta = np.empty(n)
    if n == 0:
        return beta
    if n == 1 or lam == 0.0:
        for i in range(n):
            beta[i] = y[i]
        return beta
    x = np.empty(2 * n)
    a = np.empty(2 * n)
    b = np.empty(2 * n)
    tm = np.empty(n - 1)
    tp = np.empty(n - 1)

    tm[0] = -lam + y[0]
    tp[0] = lam + y[0]
    l = n - 1
    r = n
    x[l] = tm[0]
    x[r] = tp[0]
    a[l] = 1.0
    b[l] = -y[0] + lam
    a[r] = -1.0
    b[r] = y[0] + lam
    afirst = 1.0
    bfirst = -lam - y[1]
    alast = -1.0
    blast = -lam + y[1]

    for k in range(1, n - 1):
        alo = afirst
        blo = bfirst
        lo = l
        while lo <= r:
            if alo * x[lo] + blo > -lam:
                break
            alo += a[lo]
            blo += b[lo]
            lo += 1
        ahi = alast
        bhi = blast
        hi = r
        while hi >= lo:
            if -ahi * x[hi] - bhi < lam:
                break
            ahi += a[hi]
            bhi += b[hi]
            hi -= 1
        tm[k] = (-lam - blo) / alo
        l = lo - 1
        x[l] = tm[k]
        tp[k] = (lam + bhi) / (-ahi)
        r = hi + 1
        x[r] = tp[k]
        a[l] = alo
        b[l] = blo + lam
        a[r] = ahi
        b[r] = bhi + lam
        afirst = 1.0
        bfirst = -lam - y[k + 1]
        alast = -1.0
        blast = -lam + y[k + 1]

    alo = afirst
    blo = bfirst
    lo = l
    while lo <= r:
        if alo * x[lo] + blo > 0:
            break
        alo += a[lo]
        blo += b[lo]
        lo += 1
    beta[n - 1] = -blo / alo
    for k in range(n - 2, -1, -1):
        if beta[k + 1] > tp[k]:
            beta[k] = tp[k]
        elif beta[k + 1] < tm[k]:
            beta[k] = tm[k]
        else:
            beta[k] = beta[k + 1]
    return beta


def fused_lasso_1d(xi, lam):
    """Exact minimizer of ``||xi - w||^2 + lam * ||D^(1) w||_1``."""
    if lam < 0:
        raise ValueError("lam must be nonnegative, got %r" % (lam,))
    xi = np.ascontiguousarray(xi, dtype=float)
    if xi.ndim != 1:
        raise DimensionError("xi must be a vector")
    if not np.all(np.isfinite(xi)):
        raise FloatingPointError("non-finite input to fused lasso")
    if lam == 0 or xi.size < 2:
        return xi.copy()
    dev = np.cumsum(xi - xi.mean())[:-1]
    if lam >= 2 * np.abs(dev).max():
        return np.full_like(xi, xi.mean())
    return _tf_dp(xi, 0.5 * float(lam))


class SylvesterSolver:
    """Solve ``A X + X Bp + Ep = 0`` for many right-hand sides.

    Schur factors of ``A`` and ``Bp`` are computed once; each :meth:`solve`
    costs a pair of unitary transforms plus ``d`` triangular solves of size
    ``T``. Not safe to share between threads while solving.
    """

    def __init__(self, A, Bp, check=True):
        A = np.asarray(A, dtype=float)
        Bp = np.asarray(Bp, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DimensionError("A must be square")
        if Bp.ndim != 2 or Bp.shape[0] != Bp.shape[1]:
            raise DimensionError("Bp must be square")
        self.shape = (A.shape[0], Bp.shape[0])
        if np.allclose(A, A.T, rtol=0, atol=1e-14 * max(1.0, np.abs(A).max())):
            lam, U = np.linalg.eigh(0.5 * (A + A.T))
            S = np.diag(lam.astype(complex))
            U = U.astype(complex)
        else:
            S, U = sla.schur(A, output="complex")
        R, Z = sla.schur(Bp, output="complex")
        self._S, self._U, self._R, self._Z = S, U, R, Z
        sep = np.abs(np.diag(S)[:, None] + np.diag(R)[None, :]).min()
        self.separation = sep
        scale = np.linalg.norm(A, 2) + np.linalg.norm(Bp, 2)
        if check and sep <= 1e-12 * max(scale, 1e-300):
            raise ConditioningError(
                "spectra of A and -Bp overlap (separation %.3g)" % sep)

    def solve(self, Ep):
        Ep = np.asarray(Ep, dtype=float)
        d, T = self.shape
        if Ep.shape != (d, T):
            raise DimensionError("Ep must be %d x %d" % (d, T))
        S, U, R, Z = self._S, self._U, self._R, self._Z
        F = -(U.conj().T @ Ep @ Z)
        Y = np.empty((d, T), dtype=complex)
        eye = np.eye(T)
        # rows bottom-up: y_i (R + s_ii I) = f_i - sum_{k>i} s_ik y_k
        for i in range(d - 1, -1, -1):
            rhs = F[i]
            if i + 1 < d:
                rhs = rhs - S[i, i + 1:] @ Y[i + 1:]
            M = R + S[i, i] * eye
            Y[i] = sla.solve_triangular(M, rhs, trans="T", lower=False,
                                        check_finite=False)
        X = U @ Y @ Z.conj().T
        return X.real


def solve_sylvester(A, Bp, Ep):
    """Solve ``A X + X Bp + Ep = 0`` by Bartels-Stewart."""
    return SylvesterSolver(A, Bp).solve(Ep)


class BandedSylvesterSolver:
    """Solve ``A X B + X C + E = 0`` for structured coefficients.

    ``A`` is symmetric (d x d), ``B = diag(b)`` and ``C = Cb - c 11'`` with
    ``Cb`` symmetric banded. After ``A = Q diag(lam) Q'`` each row of
    ``Q'X`` solves ``(lam_i B + C) x = -(Q'E)_i``, a banded system plus a
    rank-one correction. Requires every ``lam_i B + C`` positive definite.

    Parameters
    ----------
    A : (d, d) array
    b : (T,) array
    Cb_upper : (bw + 1, T) array
        Upper banded storage of ``Cb`` as used by ``scipy.linalg.solveh_banded``.
    c : float
    """

    def __init__(self, A, b, Cb_upper, c=0.0):
        A = np.asarray(A, dtype=float)
        lam, Q = np.linalg.eigh(0.5 * (A + A.T))
        self._Q = Q
        self._c = float(c)
        T = b.size
        ones = np.ones(T)
        self._chol, self._u, self._den = [], [], []
        for li in lam:
            ab = np.array(Cb_upper, dtype=float, copy=True)
            ab[-1] += li * b
            try:
                L = sla.cholesky_banded(ab, lower=False, check_finite=False)
            except np.linalg.LinAlgError:
                raise ConditioningError("shifted system is not positive definite")
            u = sla.cho_solve_banded((L, False), ones, check_finite=False)
            den = 1.0 - self._c * u.sum()
            if not den > 1e-14:
                raise ConditioningError("rank-one update makes the system singular")
            self._chol.append(L)
            self._u.append(u)
            self._den.append(den)
        self.shape = (A.shape[0], T)

    def solve(self, E):
        E = np.asarray(E, dtype=float)
        if E.shape != self.shape:
            raise DimensionError("E must be %d x %d" % self.shape)
        F = -(self._Q.T @ E)
        Y = np.empty_like(F)
        for i, (L, u, den) in enumerate(zip(self._chol, self._u, self._den)):
            v = sla.cho_solve_banded((L, False), F[i], check_finite=False)
            Y[i] = v + u * (self._c * v.sum() / den)
        return self._Q @ Y


def banded_upper_from_sparse(M, bw):
    """Upper banded storage ``(bw + 1, n)`` of a symmetric sparse or dense matrix."""
    M = M.toarray() if sp.issparse(M) else np.asarray(M)
    return _banded_upper(M, bw)


def _banded_upper(Q, bw):
    m = Q.shape[0]
    ab = np.zeros((bw + 1, m))
    for k in range(bw + 1):
        ab[bw - k, k:] = np.diagonal(Q, k)
    return ab


def weighted_trend_filter(z, weights, lam, D, tol=1e-12, max_iter=200):
    """Solve ``min_a 1/2 sum_t w_t (a_t - z_t)^2 + lam ||D a||_1``.

    Primal-dual interior point on the box-constrained dual
    ``min_u 1/2 u' D W^-1 D' u - u' D z, |u| <= lam``; banded Newton systems.
    Returns ``(a, u)``. ``D`` may be sparse.
    """
    z = np.asarray(z, dtype=float)
    w = np.asarray(weights, dtype=float)
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    D = sp.csr_matrix(D)
    m = D.shape[0]
    if lam == 0 or m == 0:
        return z.copy(), np.zeros(m)
    Winv = 1.0 / w
    DT = D.T.tocsr()
    Q = (D @ sp.diags(Winv) @ DT).tocsr()
    Qc = Q.tocoo()
    bw = int(np.max(np.abs(Qc.row - Qc.col))) if Qc.nnz else 0
    b = D @ z

    def primal(u):
        return z - Winv * (DT @ u)

    def pd_gap(u):
        a = primal(u)
        Da = D @ a
        return lam * np.abs(Da).sum() - u @ Da, a

    Qband = np.zeros((bw + 1, m))
    for k in range(bw + 1):
        Qband[bw - k, k:] = Q.diagonal(k)

    # unconstrained dual optimum may already be interior
    u0 = sla.solveh_banded(Qband, b, lower=False, check_finite=False)
    if np.abs(u0).max() < lam:
        return primal(u0), u0

    u = np.zeros(m)
    mu1 = np.ones(m)
    mu2 = np.ones(m)
    t = 1e-10
    scale = 0.5 * np.sum(w * z * z) + 1.0
    for _ in range(max_iter):
        f1 = u - lam
        f2 = -u - lam
        gap = -(mu1 @ f1 + mu2 @ f2)
        rdual = Q @ u - b + mu1 - mu2
        pgap, a = pd_gap(u)
        if pgap <= tol * scale and np.linalg.norm(rdual) <= 1e-8 * (np.linalg.norm(b) + lam):
            break
        if gap <= 1e-15 * scale:
            break
        t = max(2.0 * 2 * m / gap, t)
        rc1 = -mu1 * f1 - 1.0 / t
        rc2 = -mu2 * f2 - 1.0 / t
        diag = -mu1 / f1 - mu2 / f2
        ab = Qband.copy()
        ab[bw] += diag
        rhs = -rdual - rc1 / f1 + rc2 / f2
        du = sla.solveh_banded(ab, rhs, lower=False, check_finite=False)
        dmu1 = (rc1 - mu1 * du) / f1
        dmu2 = (rc2 + mu2 * du) / f2

        step = 1.0
        neg = dmu1 < 0
        if np.any(neg):
            step = min(step, 0.99 * np.min(-mu1[neg] / dmu1[neg]))
        neg = dmu2 < 0
        if np.any(neg):
            step = min(step, 0.99 * np.min(-mu2[neg] / dmu2[neg]))
        pos = du > 0
        if np.any(pos):
            step = min(step, 0.99 * np.min(-f1[pos] / du[pos]))
        neg = du < 0
        if np.any(neg):
            step = min(step, 0.99 * np.min(f2[neg] / du[neg]))

        res0 = np.sqrt(rdual @ rdual + rc1 @ rc1 + rc2 @ rc2)
        for _ in range(50):
            un = u + step * du
            m1 = mu1 + step * dmu1
            m2 = mu2 + step * dmu2
            g1 = un - lam
            g2 = -un - lam
            r1 = Q @ un - b + m1 - m2
            c1 = -m1 * g1 - 1.0 / t
            c2 = -m2 * g2 - 1.0 / t
            res = np.sqrt(r1 @ r1 + c1 @ c1 + c2 @ c2)
            if res <= (1 - 0.01 * step) * res0:
                break
            step *= 0.5
        u, mu1, mu2 = un, m1, m2
    u = np.clip(u, -lam, lam)
    return primal(u), u
