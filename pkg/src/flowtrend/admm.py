"""ADMM for one cluster's trend-filtered, ball-constrained mean trajectory.

The problem solved for cluster ``k`` is::

    min_mu  1/(2N) sum_t sum_i C_i g_itk (y_i - mu_t)' S^-1 (y_i - mu_t)
            + lam * sum_j ||D^(l+1) mu_.j||_1
    s.t.    ||mu_t - mean(mu)||_2 <= r  for all t

with the splitting ``w = G mu`` (``D^(l+1) = D^(1) G``) and
``z_t = mu_t - mean(mu)``. The mean step is a Sylvester equation
``A eta + eta C B^-1 + E B^-1 = 0`` in ``eta = mu'``.
"""

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .tflinalg import (BandedSylvesterSolver, SylvesterSolver, banded_upper_from_sparse,
                       diff_factor, fused_lasso_1d)

# floor on per-time cluster weight before inverting B, relative to N
EPS_GAMMA = 1e-10


class AdmmWarning(UserWarning):
    pass


@dataclass
class AdmmOptions:
    rho: float = 1.0
    max_iter: int = 500
    tol_abs: float = 1e-6
    tol_rel: float = 1e-4
    adapt_rho: bool = False
    closed_form: bool = True
    # "banded": eigen-split of A with banded solves; "schur": Bartels-Stewart
    sylvester: str = "banded"


@dataclass
class AdmmState:
    eta: np.ndarray  # d x T
    w: np.ndarray  # (T - l) x d
    z: np.ndarray  # T x d
    u_w: np.ndarray  # (T - l) x d
    u_z: np.ndarray  # T x d
    rho: float
    iterations: int = 0
    r_norm: float = math.inf
    s_norm: float = math.inf


@dataclass
class MuProblem:
    """Sufficient statistics of one cluster's mean subproblem."""

    gtk: np.ndarray  # (T,) aggregated responsibilities
    S: np.ndarray  # (T, d) weighted sums of points
    const: float  # 1/(2N) sum C g y' Sinv y
    sigma_inv: np.ndarray
    N: float
    lam: float
    l: int
    r: float
    G: np.ndarray = None
    times: np.ndarray = None

    def __post_init__(self):
        T = self.gtk.size
        self.penalized = self.lam > 0 and T >= self.l + 2
        self.bw = 0
        if self.G is None and (self.penalized or not math.isinf(self.r)):
            l = self.l if T >= self.l + 2 else 0
            Gs = diff_factor(l, T, self.times)
            self.G = Gs.toarray()
            self.bw = l
        if self.G is not None:
            self.D = np.diff(self.G, axis=0)
            gtg = self.G.T @ self.G
            nz = np.nonzero(gtg)
            self.bw = int(np.abs(nz[0] - nz[1]).max()) if nz[0].size else 0
        else:
            gtg = np.zeros((T, T))
        # G'G + P = (G'G + I) - 11'/T, P the centering matrix
        self.gram_band = banded_upper_from_sparse(gtg + np.eye(T), self.bw)
        self._gtg = gtg

    @property
    def gram(self):
        return self._gtg + np.eye(self.T) - 1.0 / self.T

    @property
    def T(self):
        return self.gtk.size

    @property
    def d(self):
        return self.S.shape[1]

    @classmethod
    def from_data(cls, s, g, k, sigma_k, h, times=None, stacked=None):
        y, w, tidx = s.stacked() if stacked is None else stacked
        wk = w * g.gamma[:, k]
        S = np.zeros((s.T, s.d))
        np.add.at(S, tidx, wk[:, None] * y)
        sinv = np.linalg.inv(sigma_k)
        N = s.total_weight
        const = 0.5 * float(np.einsum("i,ij,jk,ik->", wk, y, sinv, y)) / N
        return cls(gtk=g.gamma_tk[:, k].copy(), S=S, const=const, sigma_inv=sinv,
                   N=N, lam=h.lambda_mu, l=h.l_mu, r=h.r, times=times)

    def objective(self, mu):
        """Value of the cluster objective (without the ball indicator)."""
        quad = np.einsum("t,ti,ij,tj->", self.gtk, mu, self.sigma_inv, mu)
        lin = np.einsum("ti,ij,tj->", self.S, self.sigma_inv, mu)
        val = self.const + (0.5 * quad - lin) / self.N
        if self.penalized:
            val += self.lam * np.abs(self.D @ mu).sum()
        return float(val)

    def weighted_means(self, fallback=None):
        b = self.gtk
        ok = b > EPS_GAMMA * self.N
        mu = np.zeros((self.T, self.d)) if fallback is None else np.array(fallback, dtype=float)
        mu[ok] = self.S[ok] / b[ok, None]
        return mu


@dataclass
class SylvesterSystem:
    A: np.ndarray
    B: np.ndarray  # diagonal of B, floored
    C: np.ndarray
    E: np.ndarray
    rho: float = 1.0
    solver: object = field(default=None, repr=False)


def center_rows(x):
    return x - x.mean(axis=0, keepdims=True)


def build_sylvester_system(prob, state, prev=None, method="banded"):
    """Assemble ``A, B, C, E`` for the current auxiliaries and duals.

    ``A = Sinv / N``, ``B = diag(g_tk)`` floored, ``C = rho (G'G + P)`` with
    ``P = I - 11'/T``, and ``E`` collects the terms free of ``eta``. Passing
    the previous system reuses its matrices and factorization when ``rho``
    is unchanged.
    """
    rho = state.rho
    if not rho > 0:
        raise ValueError("rho must be positive")
    E = -(prob.sigma_inv @ prob.S.T) / prob.N
    E = E + center_rows((state.u_z - rho * state.z)).T
    if prob.G is not None:
        E = E + (state.u_w - rho * state.w).T @ prob.G
    if prev is not None and prev.rho == rho:
        return replace(prev, E=E)
    A = prob.sigma_inv / prob.N
    B = np.maximum(prob.gtk, EPS_GAMMA * prob.N)
    C = rho * prob.gram
    if method == "banded":
        solver = BandedSylvesterSolver(A, B, rho * prob.gram_band, rho / prob.T)
    elif method == "schur":
        solver = SylvesterSolver(A, C / B[None, :])
    else:
        raise ValueError("unknown Sylvester method %r" % (method,))
    return SylvesterSystem(A=A, B=B, C=C, E=E, rho=rho, solver=solver)


def admm_eta_step(sys):
    """Solve ``A eta + eta C B^-1 + E B^-1 = 0``."""
    if isinstance(sys.solver, BandedSylvesterSolver):
        # equivalent form A eta B + eta C + E = 0
        return sys.solver.solve(sys.E)
    return sys.solver.solve(sys.E / sys.B[None, :])


def project_ball(v, r):
    """Project each row of ``v`` onto the Euclidean ball of radius ``r``."""
    if math.isinf(r):
        return v.copy()
    nrm = np.sqrt((v ** 2).sum(axis=1, keepdims=True))
    scale = np.where(nrm > r, r / np.where(nrm > 0, nrm, 1.0), 1.0)
    return v * scale


def admm_z_step(eta, u_z, rho, r):
    mu = eta.T
    v = mu - mu.mean(axis=0, keepdims=True) + u_z / rho
    return project_ball(v, r)


def admm_w_step(eta, u_w, rho, lambda_mu, G):
    xi = G @ eta.T + u_w / rho
    if lambda_mu == 0:
        return xi
    out = np.empty_like(xi)
    for j in range(xi.shape[1]):
        out[:, j] = fused_lasso_1d(xi[:, j], 2.0 * lambda_mu / rho)
    return out


def admm_dual_step(state, G=None):
    """Dual ascent on both constraint blocks; returns the updated state."""
    mu = state.eta.T
    state.u_z = state.u_z + state.rho * (center_rows(mu) - state.z)
    if G is not None:
        state.u_w = state.u_w + state.rho * (G @ mu - state.w)
    return state


def shrink_to_ball(mu, r):
    """Scale deviations from the time average uniformly so the largest has norm <= r."""
    if math.isinf(r):
        return mu
    dev = center_rows(mu)
    m = np.sqrt((dev ** 2).sum(axis=1)).max()
    if m <= r:
        return mu
    return mu.mean(axis=0, keepdims=True) + dev * (r / m)


def polynomial_solution(prob):
    """Best trajectory whose coordinates are degree-``l`` polynomials in time.

    Returns ``(mu, certified)``. ``certified`` is true when ``mu`` is the
    exact minimizer of the penalized problem: it lies in the ball and the
    dual certificate ``u = (D D')^-1 D grad`` satisfies ``|u| <= lam``.
    """
    T, d = prob.T, prob.d
    l = prob.G.shape[1] - prob.G.shape[0] if prob.G is not None else 0
    x = np.arange(T, dtype=float) if prob.times is None else np.asarray(prob.times, float)
    x = (x - x.mean()) / max(np.ptp(x), 1.0)
    V = np.linalg.qr(np.vander(x, l + 1, increasing=True))[0]
    b = np.maximum(prob.gtk, EPS_GAMMA * prob.N)
    coef = np.linalg.solve((V * b[:, None]).T @ V, V.T @ prob.S)
    mu = V @ coef
    if not prob.penalized:
        return mu, False
    dev = center_rows(mu)
    if not math.isinf(prob.r) and np.sqrt((dev ** 2).sum(axis=1)).max() > prob.r:
        return mu, False
    grad = (prob.gtk[:, None] * mu - prob.S) @ prob.sigma_inv / prob.N
    D = prob.D
    bw = l + 1
    DDt = D @ D.T
    band = np.zeros((bw + 1, D.shape[0]))
    for k in range(bw + 1):
        band[bw - k, k:] = np.diagonal(DDt, k)
    try:
        u = sla.solveh_banded(band, D @ grad, lower=False, check_finite=False)
    except np.linalg.LinAlgError:
        return mu, False
    return mu, bool(np.abs(u).max() <= prob.lam)


def init_state(prob, mu, rho):
    G = prob.G
    T, d = mu.shape
    z = project_ball(center_rows(mu), prob.r)
    if G is not None:
        w = G @ mu
        u_w = np.zeros_like(w)
    else:
        w = np.zeros((0, d))
        u_w = np.zeros((0, d))
    return AdmmState(eta=mu.T.copy(), w=w, z=z, u_w=u_w, u_z=np.zeros((T, d)), rho=rho)


def mu_update(s, g, k, sigma_k, h, opts=None, mu0=None, state=None, times=None):
    """Mean trajectory update for cluster ``k`` from data and responsibilities.

    Returns ``(mu, info, state)``; see :func:`solve_mu`.
    """
    prob = MuProblem.from_data(s, g, k, sigma_k, h, times=times)
    return solve_mu(prob, opts, mu0, state)


def solve_mu(prob, opts=None, mu0=None, state=None):
    """Minimize the cluster mean objective; returns ``(mu, info, state)``.

    ``mu0`` is the warm start (previous trajectory); the returned trajectory
    never has a larger objective than the feasible warm start.
    """
    opts = AdmmOptions() if opts is None else opts
    T, d = prob.T, prob.d
    info = {"iterations": 0, "converged": True, "warning": None, "rho": opts.rho}
    if mu0 is None:
        mu0 = prob.weighted_means(np.tile(prob.S.sum(0) / max(prob.gtk.sum(), 1e-300), (T, 1)))
    mu0 = shrink_to_ball(np.asarray(mu0, dtype=float), prob.r)
    f0 = prob.objective(mu0)

    if opts.closed_form and not prob.penalized and math.isinf(prob.r):
        mu = prob.weighted_means(mu0)
        f = prob.objective(mu)
        if f > f0:
            mu, f = mu0, f0
        info["objective"] = f
        return mu, info, state

    if prob.penalized:
        mu, certified = polynomial_solution(prob)
        if certified:
            info["objective"] = prob.objective(mu)
            info["polynomial"] = True
            return mu, info, state

    if state is None or state.eta.shape != (d, T) or (prob.G is not None and state.w.shape[0] != prob.G.shape[0]):
        state = init_state(prob, mu0, opts.rho)
    G = prob.G
    sys = None
    best_mu, best_f = mu0, f0
    p_dim = math.sqrt(((G.shape[0] if G is not None else 0) + T) * d)
    n_dim = math.sqrt(T * d)
    n_adapt = 0
    for it in range(1, opts.max_iter + 1):
        sys = build_sylvester_system(prob, state, sys, opts.sylvester)
        eta = admm_eta_step(sys)
        if not np.all(np.isfinite(eta)):
            raise FloatingPointError("non-finite iterate in mean ADMM")
        state.eta = eta
        mu = eta.T
        z_old, w_old = state.z, state.w
        state.z = admm_z_step(eta, state.u_z, state.rho, prob.r)
        if G is not None:
            state.w = admm_w_step(eta, state.u_w, state.rho, prob.lam if prob.penalized else 0.0, G)
        state = admm_dual_step(state, G)

        cm = center_rows(mu)
        rz = cm - state.z
        sz = center_rows(state.z - z_old)
        if G is not None:
            Gmu = G @ mu
            rw = Gmu - state.w
            r_norm = math.sqrt((rw ** 2).sum() + (rz ** 2).sum())
            s_vec = state.rho * (G.T @ (state.w - w_old) + sz)
            ax = math.sqrt((Gmu ** 2).sum() + (cm ** 2).sum())
            bz = math.sqrt((state.w ** 2).sum() + (state.z ** 2).sum())
            aty = np.linalg.norm(G.T @ state.u_w + center_rows(state.u_z))
        else:
            r_norm = math.sqrt((rz ** 2).sum())
            s_vec = state.rho * sz
            ax = np.linalg.norm(cm)
            bz = np.linalg.norm(state.z)
            aty = np.linalg.norm(center_rows(state.u_z))
        s_norm = float(np.linalg.norm(s_vec))
        state.r_norm, state.s_norm = r_norm, s_norm
        state.iterations += 1
        info["iterations"] = it

        cand = shrink_to_ball(mu, prob.r)
        f = prob.objective(cand)
        if f < best_f:
            best_mu, best_f = cand, f

        eps_pri = p_dim * opts.tol_abs + opts.tol_rel * max(ax, bz)
        eps_dual = n_dim * opts.tol_abs + opts.tol_rel * aty
        if r_norm <= eps_pri and s_norm <= eps_dual:
            break
        if opts.adapt_rho and it % 10 == 0 and n_adapt < 20:
            if r_norm > 10 * s_norm:
                state.rho *= 2.0
                n_adapt += 1
            elif s_norm > 10 * r_norm:
                state.rho /= 2.0
                n_adapt += 1
    else:
        info["converged"] = False
        info["warning"] = "max_iter"
        warnings.warn("mean ADMM hit max_iter=%d (r=%.2g, s=%.2g)"
                      % (opts.max_iter, state.r_norm, state.s_norm), AdmmWarning)
    info["objective"] = best_f
    info["rho"] = state.rho
    return best_mu, info, state
