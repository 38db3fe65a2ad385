"""Trend-filtered update of the mixture logits.

Minimizes, over the ``K x T`` logits ``alpha``::

    1/N sum_t [ W_t log sum_k exp(alpha_kt) - sum_k g_tk alpha_kt ]
        + lam * sum_k ||D^(l+1) alpha_k||_1

with ``W_t = sum_k g_tk``. The last row is pinned at zero (reference
category), which makes the loss strictly convex in the free rows. The
problem is solved by block-cyclic proximal Newton over the free rows, each
Newton direction being a weighted trend filter.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .tflinalg import diff_matrix, tf_basis, tf_basis_penalty_scale, weighted_trend_filter

# smallest responsibility mass used inside log() for the unpenalized solution
TINY_MASS = 1e-300


class PiWarning(UserWarning):
    pass


@dataclass
class PiOptions:
    max_sweeps: int = 200
    tol: float = 1e-12
    hess_floor: float = 1e-8
    armijo: float = 1e-4


@dataclass
class PiProblem:
    """Aggregated responsibilities and penalty for the logit update.

    Attributes
    ----------
    gamma_tk : (T, K) array
        Weighted responsibilities summed within each time.
    N : float
        Total weight used to normalize the loss.
    lambda_pi, l_pi
        Penalty weight and trend-filter order.
    times : optional array
        Time coordinates for unevenly spaced differences.
    """

    gamma_tk: np.ndarray
    N: float
    lambda_pi: float
    l_pi: int
    times: np.ndarray = None

    def __post_init__(self):
        g = np.asarray(self.gamma_tk, dtype=float)
        if g.ndim != 2 or np.any(g < 0) or not np.all(np.isfinite(g)):
            raise ValueError("gamma_tk must be a finite nonnegative T x K array")
        self.gamma_tk = g
        self.penalized = self.lambda_pi > 0 and self.T >= self.l_pi + 2
        self.D = diff_matrix(self.l_pi + 1, self.T, self.times) if self.penalized else None

    @property
    def T(self):
        return self.gamma_tk.shape[0]

    @property
    def K(self):
        return self.gamma_tk.shape[1]

    @property
    def Wt(self):
        return self.gamma_tk.sum(axis=1)

    @property
    def basis_penalty(self):
        """Penalty weight on the free basis coefficients, ``l!/T^l * lam``."""
        return tf_basis_penalty_scale(self.l_pi, self.T) * self.lambda_pi

    def loss(self, alpha):
        lse = logsumexp(alpha, axis=0)
        return float((self.Wt @ lse - np.einsum("tk,kt->", self.gamma_tk, alpha)) / self.N)

    def penalty(self, alpha):
        if not self.penalized:
            return 0.0
        return self.lambda_pi * float(np.abs(self.D @ alpha.T).sum())

    def objective(self, alpha):
        return self.loss(alpha) + self.penalty(alpha)

    def basis_objective(self, omega):
        """Objective in basis coefficients: ``alpha_k = H omega_k``."""
        H = tf_basis(self.l_pi, self.T)
        alpha = omega @ H.T
        free = omega[:, self.l_pi + 1:]
        return self.loss(alpha) + self.basis_penalty * float(np.abs(free).sum())


def closed_form_alpha(gamma_tk):
    """Saturated multinomial logits ``log(g_tk / g_tK)`` as a K x T array."""
    g = np.log(np.maximum(gamma_tk, TINY_MASS))
    return (g - g[:, -1:]).T


def _block_newton(p, alpha, k, opts):
    """One proximal Newton step on row ``k``; returns the new alpha and objective."""
    pi = softmax(alpha, axis=0)
    Wt = p.Wt
    grad = (Wt * pi[k] - p.gamma_tk[:, k]) / p.N
    hess = Wt * pi[k] * (1.0 - pi[k]) / p.N
    hess = np.maximum(hess, opts.hess_floor * max(hess.max(), 1e-300))
    z = alpha[k] - grad / hess
    target, _ = weighted_trend_filter(z, hess, p.lambda_pi, p.D)
    step = target - alpha[k]
    pen0 = p.lambda_pi * np.abs(p.D @ alpha[k]).sum()
    pen1 = p.lambda_pi * np.abs(p.D @ target).sum()
    decr = grad @ step + pen1 - pen0
    f0 = p.objective(alpha)
    s = 1.0
    for _ in range(60):
        cand = alpha.copy()
        cand[k] = alpha[k] + s * step
        f = p.objective(cand)
        if f <= f0 + opts.armijo * s * min(decr, 0.0):
            return cand, f
        s *= 0.5
    return alpha, f0


def pi_update(p, opts=None, alpha0=None):
    """Solve the penalized logit problem; returns ``(alpha, pi, info)``.

    ``alpha0`` is the warm start; the returned objective never exceeds its
    objective.
    """
    opts = PiOptions() if opts is None else opts
    K, T = p.K, p.T
    info = {"sweeps": 0, "converged": True, "warning": None}
    if K == 1:
        alpha = np.zeros((1, T))
        info["objective"] = p.objective(alpha)
        return alpha, np.ones((1, T)), info
    if not p.penalized:
        alpha = closed_form_alpha(p.gamma_tk)
        info["objective"] = p.objective(alpha)
        return alpha, softmax(alpha, axis=0), info

    if alpha0 is None:
        # pooled log-odds, constant in t
        prop = np.log(np.maximum(p.gamma_tk.sum(axis=0), TINY_MASS))
        alpha0 = np.tile((prop - prop[-1])[:, None], (1, T))
    alpha0 = np.asarray(alpha0, dtype=float)
    if alpha0.shape != (K, T):
        raise ValueError("alpha0 must be %d x %d" % (K, T))
    alpha0 = pinned(alpha0)
    alpha = alpha0.copy()
    f = f0 = p.objective(alpha)
    for sweep in range(1, opts.max_sweeps + 1):
        f_prev = f
        for k in range(K - 1):
            alpha, f = _block_newton(p, alpha, k, opts)
        info["sweeps"] = sweep
        if f_prev - f <= opts.tol * (1.0 + abs(f)):
            break
    else:
        info["converged"] = False
        info["warning"] = "max_iter"
        warnings.warn("logit solver hit max_sweeps=%d" % opts.max_sweeps, PiWarning)
    if f > f0:
        alpha, f = alpha0, f0
    info["objective"] = f
    return alpha, softmax(alpha, axis=0), info


def pinned(alpha):
    """Logits relative to the last cluster (reference category)."""
    return alpha - alpha[-1:]


def polynomial_logits(gamma_tk, V, N):
    """Unpenalized pinned logits restricted to ``alpha_k = V c_k``; returns K x T."""
    T, K = gamma_tk.shape
    q = V.shape[1]
    Wt = gamma_tk.sum(axis=1)
    prop = np.log(np.maximum(gamma_tk.sum(axis=0), TINY_MASS))
    coef = np.zeros((K - 1, q))
    coef[:, :] = np.linalg.lstsq(V, np.ones(T), rcond=None)[0] * (prop[:-1] - prop[-1])[:, None]

    def alpha_of(c):
        return np.vstack([c @ V.T, np.zeros((1, T))])

    def loss(c):
        a = alpha_of(c)
        return float(Wt @ logsumexp(a, axis=0) - np.einsum("tk,kt->", gamma_tk, a)) / N

    f = loss(coef)
    for _ in range(100):
        pi = softmax(alpha_of(coef), axis=0)[:-1]
        grad = ((Wt * pi - gamma_tk[:, :-1].T) @ V / N).ravel()
        # Hessian blocks (k, j): V' diag(W (d_kj pi_k - pi_k pi_j)) V / N
        H = np.empty(((K - 1) * q, (K - 1) * q))
        for k in range(K - 1):
            for j in range(K - 1):
                wt = Wt * ((k == j) * pi[k] - pi[k] * pi[j]) / N
                H[k * q:(k + 1) * q, j * q:(j + 1) * q] = (V * wt[:, None]).T @ V
        step = -np.linalg.lstsq(H, grad, rcond=None)[0].reshape(K - 1, q)
        s = 1.0
        while s > 1e-12:
            fn = loss(coef + s * step)
            if fn <= f + 1e-4 * s * (grad @ step.ravel()):
                break
            s *= 0.5
        else:
            break
        coef, f_old, f = coef + s * step, f, fn
        if f_old - f <= 1e-15 * (1 + abs(f)):
            break
    return alpha_of(coef)


def lambda_max_pi(gamma_tk, l_pi, N, times=None):
    """Smallest ``lambda_pi`` at which every logit row is a degree-``l_pi`` polynomial.

    Computed from the dual certificate ``u = (D D')^-1 D grad`` at the
    unpenalized polynomial fit.
    """
    gamma_tk = np.asarray(gamma_tk, dtype=float)
    T, K = gamma_tk.shape
    if K == 1 or T < l_pi + 2:
        return 0.0
    D = diff_matrix(l_pi + 1, T, times).toarray()
    V = np.linalg.svd(D)[2][D.shape[0]:].T  # orthonormal basis of null(D)
    alpha = polynomial_logits(gamma_tk, V, N)
    pi = softmax(alpha, axis=0)
    g = (gamma_tk.sum(axis=1) * pi - gamma_tk.T) / N
    u = np.linalg.solve(D @ D.T, D @ g[:-1].T)
    return float(np.abs(u).max())
