"""Mixture parameters, penalized likelihood, E-step and covariance update."""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .tflinalg import diff_matrix

LOG2PI = math.log(2 * math.pi)

# degenerate-cluster threshold as a fraction of total weight
EPS_RESP = 1e-8
# ridge added to each covariance, relative to trace/d
EPS_RIDGE = 1e-6
FEAS_TOL = 1e-6


class ParameterError(ValueError):
    pass


class DegenerateClusterError(RuntimeError):
    def __init__(self, cluster, mass):
        super().__init__("cluster %d has total responsibility %.3g" % (cluster, mass))
        self.cluster = cluster
        self.mass = mass


@dataclass(frozen=True)
class Hyperparams:
    K: int
    lambda_mu: float = 0.0
    lambda_pi: float = 0.0
    l_mu: int = 0
    l_pi: int = 0
    r: float = math.inf

    def __post_init__(self):
        if int(self.K) < 1:
            raise ValueError("K must be >= 1")
        if self.lambda_mu < 0 or self.lambda_pi < 0:
            raise ValueError("penalties must be nonnegative")
        if int(self.l_mu) < 0 or int(self.l_pi) < 0:
            raise ValueError("trend orders must be nonnegative")
        r = math.inf if self.r is None else float(self.r)
        if not r > 0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "l_mu", int(self.l_mu))
        object.__setattr__(self, "l_pi", int(self.l_pi))


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Mean trajectories ``mu`` (K, T, d), covariances ``sigma`` (K, d, d)
    and logits ``alpha`` (K, T); ``pi`` is the softmax of ``alpha`` over K."""

    mu: np.ndarray
    sigma: np.ndarray
    alpha: np.ndarray
    times: np.ndarray = None

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float)
        if mu.ndim == 2:
            mu = mu[:, :, None]
        sigma = np.array(self.sigma, dtype=float)
        if sigma.ndim == 1:
            sigma = sigma[:, None, None]
        alpha = np.array(self.alpha, dtype=float)
        K, T, d = mu.shape
        if sigma.shape != (K, d, d) or alpha.shape != (K, T):
            raise ParameterError("inconsistent parameter shapes mu%s sigma%s alpha%s"
                                 % (mu.shape, sigma.shape, alpha.shape))
        times = np.arange(1.0, T + 1) if self.times is None else np.array(self.times, dtype=float)
        if times.shape != (T,):
            raise ParameterError("times must have length T")
        for a in (mu, sigma, alpha, times):
            a.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "times", times)

    @property
    def K(self):
        return self.mu.shape[0]

    @property
    def T(self):
        return self.mu.shape[1]

    @property
    def d(self):
        return self.mu.shape[2]

    @property
    def pi(self):
        return softmax(self.alpha, axis=0)

    @property
    def alpha_pinned(self):
        """Logits shifted so the last cluster's logit is zero."""
        return self.alpha - self.alpha[-1]

    def replace(self, **kw):
        d = dict(mu=self.mu, sigma=self.sigma, alpha=self.alpha, times=self.times)
        d.update(kw)
        return ModelParams(**d)


@dataclass(frozen=True, eq=False)
class Responsibilities:
    """Per-particle membership probabilities, stacked over time.

    ``gamma`` is (n_total, K) aligned with :meth:`CytogramSeries.stacked`;
    ``gamma_tk`` (T, K) holds the weighted aggregates ``sum_i C_i gamma_itk``.
    """

    gamma: np.ndarray
    tidx: np.ndarray
    gamma_tk: np.ndarray
    log_norm: np.ndarray = field(default=None, repr=False)

    @property
    def K(self):
        return self.gamma.shape[1]

    def per_time(self):
        bounds = np.flatnonzero(np.diff(self.tidx)) + 1
        return np.split(self.gamma, bounds)


def _chol(sigma_k):
    if not np.all(np.isfinite(sigma_k)):
        raise ParameterError("non-finite covariance")
    try:
        return np.linalg.cholesky(sigma_k)
    except np.linalg.LinAlgError:
        raise ParameterError("covariance is not positive definite")


def log_gauss(y, mean, sigma_k):
    """Log density of N(mean, sigma_k) at rows of ``y``; ``mean`` broadcasts."""
    L = _chol(sigma_k)
    diff = (y - mean).T
    z = np.linalg.solve(L, diff) if L.shape[0] > 1 else diff / L[0, 0]
    maha = np.einsum("ij,ij->j", z, z)
    return -0.5 * maha - np.log(np.diag(L)).sum() - 0.5 * y.shape[1] * LOG2PI


def log_joint(s, p, stacked=None):
    """``log pi_kt + log phi(y; mu_kt, Sigma_k)`` for every stacked particle."""
    y, w, tidx = s.stacked() if stacked is None else stacked
    if p.d != s.d or p.T != s.T:
        raise ParameterError("model (T=%d, d=%d) does not match data (T=%d, d=%d)"
                             % (p.T, p.d, s.T, s.d))
    if not (np.all(np.isfinite(p.mu)) and np.all(np.isfinite(p.alpha))):
        raise ParameterError("non-finite parameters")
    logpi = np.log(p.pi)
    out = np.empty((y.shape[0], p.K))
    for k in range(p.K):
        out[:, k] = logpi[k, tidx] + log_gauss(y, p.mu[k, tidx], p.sigma[k])
    return out


def trend_penalty(x, l, times=None):
    """``sum ||D^(l+1) x_k||_1`` over leading index ``k``; x is (K, T[, d])."""
    T = x.shape[1]
    if T < l + 2:
        return 0.0
    D = diff_matrix(l + 1, T, times)
    return float(sum(np.abs(D @ x[k]).sum() for k in range(x.shape[0])))


def ball_violation(mu):
    """Largest ``||mu_kt - mean_t mu_k||_2`` over clusters and times."""
    dev = mu - mu.mean(axis=1, keepdims=True)
    return float(np.sqrt((dev ** 2).sum(axis=2)).max())


def nll(s, p, stacked=None):
    """Weighted negative pseudo-log-likelihood ``-(1/N) sum C log sum pi phi``."""
    st = s.stacked() if stacked is None else stacked
    lj = log_joint(s, p, st)
    return float(-(st[1] * logsumexp(lj, axis=1)).sum() / s.total_weight)


def penalized_nll(s, p, h, times=None, stacked=None):
    """Penalized objective and ball-constraint feasibility flag.

    Returns ``(value, feasible)``; ``times`` selects unevenly spaced
    difference matrices for the penalties.
    """
    val = nll(s, p, stacked)
    if h.lambda_mu > 0:
        val += h.lambda_mu * trend_penalty(p.mu, h.l_mu, times)
    if h.lambda_pi > 0:
        val += h.lambda_pi * trend_penalty(p.alpha, h.l_pi, times)
    feasible = math.isinf(h.r) or ball_violation(p.mu) <= h.r + FEAS_TOL
    return val, feasible


def estep(s, p, stacked=None):
    st = s.stacked() if stacked is None else stacked
    lj = log_joint(s, p, st)
    lse = logsumexp(lj, axis=1)
    gamma = np.exp(lj - lse[:, None])
    gamma /= gamma.sum(axis=1, keepdims=True)
    gtk = np.zeros((s.T, p.K))
    np.add.at(gtk, st[2], st[1][:, None] * gamma)
    return Responsibilities(gamma=gamma, tidx=st[2], gamma_tk=gtk, log_norm=lse)


def weighted_sums(s, g, stacked=None):
    """``S[k, t] = sum_i C_i gamma_itk y_i`` with shape (K, T, d)."""
    y, w, tidx = s.stacked() if stacked is None else stacked
    K = g.K
    S = np.zeros((K, s.T, s.d))
    for k in range(K):
        np.add.at(S[k], tidx, (w * g.gamma[:, k])[:, None] * y)
    return S


def data_scale(s, stacked=None):
    """Average per-dimension weighted variance of all points (positive)."""
    y, w, _ = s.stacked() if stacked is None else stacked
    m = (w[:, None] * y).sum(0) / w.sum()
    v = float((w[:, None] * (y - m) ** 2).sum() / w.sum() / y.shape[1])
    return v if v > 0 else 1.0


def sigma_update(s, g, mu, stacked=None, scale=None):
    """Weighted empirical covariances around ``mu`` plus a small ridge.

    The ridge is ``EPS_RIDGE * trace/d``; it falls back to ``EPS_RIDGE``
    times the data variance when the estimate has zero trace.
    """
    y, w, tidx = s.stacked() if stacked is None else stacked
    if scale is None:
        scale = data_scale(s, (y, w, tidx))
    N = s.total_weight
    K, d = g.K, s.d
    out = np.empty((K, d, d))
    for k in range(K):
        wk = w * g.gamma[:, k]
        mass = wk.sum()
        if mass < EPS_RESP * N:
            raise DegenerateClusterError(k, mass)
        r = y - mu[k][tidx]
        S = (wk[:, None] * r).T @ r / mass
        S = 0.5 * (S + S.T)
        ridge = EPS_RIDGE * np.trace(S) / d
        if ridge <= 1e-12 * scale:
            ridge = EPS_RIDGE * scale
        out[k] = S + ridge * np.eye(d)
    return out


def init_sampling_weights(w, q=90):
    """Weights capped at their ``q``-th percentile."""
    w = np.asarray(w, dtype=float)
    return np.minimum(w, np.percentile(w, q))


def init_params(s, h, seed):
    """Time-constant means drawn from the capped-weight empirical distribution,
    uniform probabilities and identity covariances."""
    y, w, _ = s.stacked()
    if h.K > y.shape[0]:
        raise ValueError("K=%d exceeds the number of points %d" % (h.K, y.shape[0]))
    rng = np.random.default_rng(seed)
    pw = init_sampling_weights(w)
    idx = rng.choice(y.shape[0], size=h.K, replace=False, p=pw / pw.sum())
    mu = np.repeat(y[idx][:, None, :], s.T, axis=1)
    sigma = np.repeat(np.eye(s.d)[None], h.K, axis=0)
    return ModelParams(mu=mu, sigma=sigma, alpha=np.zeros((h.K, s.T)), times=s.times)


def _r_json(r):
    return None if math.isinf(r) else r


def params_to_dict(p, h, objective_trace=(), seed=None, **extra):
    out = {
        "K": p.K, "T": p.T, "d": p.d,
        "l_mu": h.l_mu, "l_pi": h.l_pi,
        "lambda_mu": h.lambda_mu, "lambda_pi": h.lambda_pi,
        "r": _r_json(h.r),
        "times": p.times.tolist(),
        "mu": p.mu.tolist(),
        "sigma": p.sigma.tolist(),
        "alpha": p.alpha.tolist(),
        "objective_trace": [float(v) for v in objective_trace],
        "seed": seed,
    }
    out.update(extra)
    return out


def params_from_dict(dct):
    h = Hyperparams(K=dct["K"], lambda_mu=dct["lambda_mu"], lambda_pi=dct["lambda_pi"],
                    l_mu=dct["l_mu"], l_pi=dct["l_pi"],
                    r=math.inf if dct.get("r") is None else dct["r"])
    p = ModelParams(mu=np.array(dct["mu"], dtype=float).reshape(dct["K"], dct["T"], dct["d"]),
                    sigma=np.array(dct["sigma"], dtype=float).reshape(dct["K"], dct["d"], dct["d"]),
                    alpha=np.array(dct["alpha"], dtype=float).reshape(dct["K"], dct["T"]),
                    times=dct.get("times"))
    return p, h


def save_model(path, p, h, objective_trace=(), seed=None, **extra):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params_to_dict(p, h, objective_trace, seed, **extra), fh, indent=1)
        fh.write("\n")


def load_model(path):
    """Return ``(params, hyperparams, raw_dict)``."""
    with open(path, encoding="utf-8") as fh:
        dct = json.load(fh)
    p, h = params_from_dict(dct)
    return p, h, dct
