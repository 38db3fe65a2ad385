"""Penalized EM: E-step, mean/logit/covariance M-steps and restarts."""

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .admm import AdmmOptions, MuProblem, solve_mu
from .model import (EPS_RESP, DegenerateClusterError, ModelParams, ball_violation,
                    data_scale, estep, init_params, log_gauss, params_to_dict,
                    penalized_nll, sigma_update, trend_penalty)
from .pisolver import PiOptions, PiProblem, pi_update

log = logging.getLogger(__name__)


class FitError(RuntimeError):
    pass


@dataclass
class FitOptions:
    """EM controls.

    ``uneven`` switches the difference operators to the actual time
    coordinates of the series; otherwise times are treated as unit spaced.
    """

    tol_em: float = 1e-6
    max_em_iter: int = 200
    n_restarts: int = 5
    seed: int = 0
    workers: int = 1
    tol_mono: float = 1e-7
    uneven: bool = False
    admm: AdmmOptions = field(default_factory=AdmmOptions)
    pi: PiOptions = field(default_factory=PiOptions)


@dataclass(eq=False)
class FitResult:
    params: ModelParams
    hyper: object
    objective_trace: list
    surrogate_trace: list
    converged: bool
    iterations: int
    seed: int
    warnings: list = field(default_factory=list)
    restarts: list = field(default_factory=list)

    @property
    def objective(self):
        return self.objective_trace[-1]

    def to_dict(self):
        return params_to_dict(self.params, self.hyper, self.objective_trace, self.seed,
                              surrogate_trace=[float(v) for v in self.surrogate_trace],
                              converged=bool(self.converged), iterations=int(self.iterations),
                              warnings=list(self.warnings), restarts=list(self.restarts))

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")


def restart_seeds(seed, n):
    """Independent 32-bit seeds for ``n`` restarts, derived from ``seed``."""
    ss = np.random.SeedSequence(int(seed))
    return [int(c.generate_state(1)[0]) for c in ss.spawn(n)]


def evaluate_surrogate(s, p, g, h, times=None, stacked=None):
    """EM surrogate at parameters ``p`` for fixed responsibilities ``g``.

    ``-1/N sum C gamma (log pi + log phi)`` plus both trend penalties.
    Returns ``inf`` when the ball constraint is violated by more than 1e-6.
    """
    y, w, tidx = s.stacked() if stacked is None else stacked
    if not math.isinf(h.r) and ball_violation(p.mu) > h.r + 1e-6:
        return math.inf
    logpi = np.log(p.pi)
    tot = 0.0
    for k in range(p.K):
        lj = logpi[k, tidx] + log_gauss(y, p.mu[k, tidx], p.sigma[k])
        tot += float((w * g.gamma[:, k] * lj).sum())
    val = -tot / s.total_weight
    if h.lambda_mu > 0:
        val += h.lambda_mu * trend_penalty(p.mu, h.l_mu, times)
    if h.lambda_pi > 0:
        val += h.lambda_pi * trend_penalty(p.alpha, h.l_pi, times)
    return val


def _em_run(s, h, opts, seed, init=None):
    times = s.times if opts.uneven else None
    st = s.stacked()
    y, w, tidx = st
    N = s.total_weight
    scale = data_scale(s, st)
    p = init_params(s, h, seed) if init is None else init
    f, _ = penalized_nll(s, p, h, times, st)
    trace, qtrace, warns = [f], [], []
    states = [None] * h.K
    converged = False
    it = 0
    for it in range(1, opts.max_em_iter + 1):
        g = estep(s, p, st)
        mass = g.gamma_tk.sum(axis=0)
        if np.any(mass < EPS_RESP * N):
            k = int(np.argmin(mass))
            raise DegenerateClusterError(k, float(mass[k]))
        mu = np.empty_like(p.mu)
        for k in range(h.K):
            wk = w * g.gamma[:, k]
            S = np.zeros((s.T, s.d))
            np.add.at(S, tidx, wk[:, None] * y)
            sinv = np.linalg.inv(p.sigma[k])
            const = 0.5 * float(np.einsum("i,ij,jk,ik->", wk, y, sinv, y)) / N
            prob = MuProblem(gtk=g.gamma_tk[:, k], S=S, const=const, sigma_inv=sinv, N=N,
                             lam=h.lambda_mu, l=h.l_mu, r=h.r, times=times)
            mu[k], info, states[k] = solve_mu(prob, opts.admm, p.mu[k], states[k])
            if info["warning"]:
                warns.append("iter %d: mean update %d %s" % (it, k, info["warning"]))
        pprob = PiProblem(g.gamma_tk, N, h.lambda_pi, h.l_pi, times)
        alpha, _, info = pi_update(pprob, opts.pi, p.alpha)
        if info["warning"]:
            warns.append("iter %d: logit update %s" % (it, info["warning"]))
        sigma = sigma_update(s, g, mu, st, scale)
        p = p.replace(mu=mu, alpha=alpha, sigma=sigma)
        qtrace.append(evaluate_surrogate(s, p, g, h, times, st))
        f_new, feasible = penalized_nll(s, p, h, times, st)
        if not feasible:
            warns.append("iter %d: infeasible mean trajectory" % it)
        if f_new > f + opts.tol_mono * (1 + abs(f)):
            warns.append("iter %d: objective increased by %.3g" % (it, f_new - f))
        trace.append(f_new)
        done = abs(f - f_new) <= opts.tol_em * (1 + abs(f_new))
        f = f_new
        if done:
            converged = True
            break
    if not converged:
        warns.append("max_em_iter")
    return FitResult(params=p, hyper=h, objective_trace=trace, surrogate_trace=qtrace,
                     converged=converged, iterations=it, seed=seed, warnings=warns)


def _restart_job(args):
    s, h, opts, seed, init = args
    try:
        return _em_run(s, h, opts, seed, init)
    except (DegenerateClusterError, np.linalg.LinAlgError, FloatingPointError) as e:
        return str(e)


def fit(s, h, opts=None, init=None):
    """Fit the penalized mixture, keeping the best of ``opts.n_restarts`` runs.

    Parameters
    ----------
    s : CytogramSeries
    h : Hyperparams
    opts : FitOptions, optional
    init : ModelParams, optional
        Starting point for a single run; restarts are skipped.

    Returns
    -------
    FitResult
        The run with the lowest final penalized objective (ties go to the
        earliest restart).
    """
    opts = FitOptions() if opts is None else opts
    if init is not None:
        jobs = [(s, h, opts, opts.seed, init)]
    else:
        jobs = [(s, h, opts, sd, None) for sd in restart_seeds(opts.seed, max(1, opts.n_restarts))]
    if opts.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=opts.workers) as ex:
            results = list(ex.map(_restart_job, jobs))
    else:
        results = [_restart_job(j) for j in jobs]
    summary, best = [], None
    for (_, _, _, sd, _), res in zip(jobs, results):
        if isinstance(res, str):
            log.warning("restart with seed %d aborted: %s", sd, res)
            summary.append({"seed": sd, "objective": None, "error": res})
            continue
        summary.append({"seed": sd, "objective": float(res.objective), "error": None})
        if best is None or res.objective < best.objective:
            best = res
    if best is None:
        raise FitError("all %d restarts aborted" % len(jobs))
    best.restarts = summary
    return best
