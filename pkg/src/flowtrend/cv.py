"""Time-series cross-validation over a two-dimensional penalty grid."""

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .em import FitOptions, fit
from .model import Hyperparams, ModelParams, estep, log_joint
from .pisolver import polynomial_logits
from .tflinalg import DimensionError, diff_matrix

log = logging.getLogger(__name__)


class CvError(RuntimeError):
    pass


@dataclass(frozen=True)
class FoldPlan:
    """``folds[m]`` holds the 0-based held-out time indices of fold ``m + 1``.

    Fold ``m`` (1-based) holds the 1-based interior times ``m + 1, m + 1 + M, ...``;
    the endpoints are never held out.
    """

    T: int
    M: int
    folds: tuple

    def train(self, m):
        held = set(self.folds[m].tolist())
        return np.array([t for t in range(self.T) if t not in held])

    def one_based(self):
        return [[int(i) + 1 for i in f] for f in self.folds]


def make_folds(T, M):
    if M < 2:
        raise DimensionError("need at least 2 folds, got %d" % M)
    if T < M + 2:
        raise DimensionError("T=%d is too short for %d folds (need T >= M + 2)" % (T, M))
    interior = np.arange(1, T - 1)
    return FoldPlan(T, M, tuple(interior[m::M] for m in range(M)))


def interpolation_weights(train_times, targets):
    """Neighbor indices ``(lo, hi)`` in ``train_times`` and the weight on ``hi``."""
    x = np.asarray(train_times, dtype=float)
    tg = np.asarray(targets, dtype=float)
    if np.any(tg < x[0]) or np.any(tg > x[-1]):
        raise CvError("interpolation target outside the training time range")
    hi = np.searchsorted(x, tg, side="left")
    exact = (hi < x.size) & (x[np.minimum(hi, x.size - 1)] == tg)
    lo = np.where(exact, hi, hi - 1)
    span = x[hi] - x[lo]
    wt = np.where(span > 0, (tg - x[lo]) / np.where(span > 0, span, 1.0), 0.0)
    return lo, hi, wt


def interpolate_pi(pi, lo, hi, wt):
    """Convex combination of neighbor probabilities, renormalized (K x n)."""
    out = (1 - wt) * pi[:, lo] + wt * pi[:, hi]
    return out / out.sum(axis=0, keepdims=True)


def interpolate_params(p, targets):
    """Parameters at ``targets`` by linear interpolation between fitted times.

    ``p.times`` are the training times. Means and probabilities are
    interpolated; covariances pass through.
    """
    lo, hi, wt = interpolation_weights(p.times, targets)
    mu = (1 - wt)[None, :, None] * p.mu[:, lo] + wt[None, :, None] * p.mu[:, hi]
    pi = interpolate_pi(p.pi, lo, hi, wt)
    alpha = np.log(np.maximum(pi, 1e-300))
    return ModelParams(mu=mu, sigma=p.sigma, alpha=alpha - alpha[-1], times=targets)


def slice_nll(s, p):
    """Per-time sums ``-sum_i C_i log sum_k pi phi`` and per-time weights."""
    st = s.stacked()
    lse = logsumexp(log_joint(s, p, st), axis=1)
    sums = np.zeros(s.T)
    np.add.at(sums, st[2], -st[1] * lse)
    return sums, s.time_weights


@dataclass
class CvOptions:
    M: int = 5
    n_lambda_mu: int = 10
    n_lambda_pi: int = 10
    min_ratio: float = 1e-4
    lambda_mu: list = None
    lambda_pi: list = None
    workers: int = 1
    fit: FitOptions = field(default_factory=FitOptions)


@dataclass(eq=False)
class CvReport:
    lambda_mu: list
    lambda_pi: list
    scores: np.ndarray  # (n_mu, n_pi), nan when invalid
    fold_scores: np.ndarray  # (M, n_mu, n_pi)
    fold_time_nll: dict  # (fold, i, j) -> (per-time sums, per-time weights)
    selected: tuple
    folds: FoldPlan
    diagnostics: list
    lambda_max: tuple = (None, None)
    refit: object = None

    def to_dict(self):
        def num(v):
            return None if not np.isfinite(v) else float(v)

        return {
            "M": self.folds.M,
            "folds": self.folds.one_based(),
            "lambda_mu": [float(v) for v in self.lambda_mu],
            "lambda_pi": [float(v) for v in self.lambda_pi],
            "lambda_max": [None if v is None else float(v) for v in self.lambda_max],
            "scores": [[num(v) for v in row] for row in self.scores],
            "fold_scores": [[[num(v) for v in row] for row in f] for f in self.fold_scores],
            "selected": {"lambda_mu": float(self.selected[0]), "lambda_pi": float(self.selected[1]),
                         "score": num(self.scores[self.selected_index])},
            "diagnostics": self.diagnostics,
        }

    @property
    def selected_index(self):
        return (list(self.lambda_mu).index(self.selected[0]),
                list(self.lambda_pi).index(self.selected[1]))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def write_surface(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["lambda_mu", "lambda_pi", "score", "valid"])
            for i, lm in enumerate(self.lambda_mu):
                for j, lp in enumerate(self.lambda_pi):
                    v = self.scores[i, j]
                    wr.writerow([repr(float(lm)), repr(float(lp)),
                                 repr(float(v)) if np.isfinite(v) else "", int(np.isfinite(v))])


def _fold_job(args):
    s, plan, m, h, opts, key = args
    tr = plan.train(m)
    te = plan.folds[m]
    try:
        res = fit(s.subset(tr), h, opts)
        p = interpolate_params(res.params, s.times[te])
        sums, wts = slice_nll(s.subset(te), p)
        diag = {"fold": m + 1, "cell": list(key), "converged": bool(res.converged),
                "iterations": int(res.iterations), "error": None}
        return key, m, sums, wts, diag
    except Exception as e:  # a failed fold invalidates its grid cell
        diag = {"fold": m + 1, "cell": list(key), "converged": False, "iterations": 0,
                "error": "%s: %s" % (type(e).__name__, e)}
        return key, m, None, None, diag


def cv_score(s, plan, h, opts=None):
    """Mean over folds of the held-out weighted NLL per unit weight."""
    opts = FitOptions() if opts is None else opts
    vals = []
    for m in range(plan.M):
        _, _, sums, wts, diag = _fold_job((s, plan, m, h, opts, (0, 0)))
        if sums is None:
            raise CvError("fold %d failed: %s" % (m + 1, diag["error"]))
        vals.append(sums.sum() / wts.sum())
    return float(np.mean(vals))


def lambda_max(s, h, opts=None):
    """Penalties above which the M-step returns degree-``l`` polynomials.

    Responsibilities come from an unpenalized pilot fit; the bounds are the
    sup-norms of the dual certificates ``(D D')^-1 D grad`` at the
    polynomial least-squares means and polynomial logits.
    """
    opts = FitOptions() if opts is None else opts
    times = s.times if opts.uneven else None
    pilot = fit(s, Hyperparams(K=h.K, l_mu=h.l_mu, l_pi=h.l_pi), opts)
    g = estep(s, pilot.params)
    y, w, tidx = s.stacked()
    N = s.total_weight
    out = []
    T = s.T
    lm = 0.0
    if T >= h.l_mu + 2:
        D = diff_matrix(h.l_mu + 1, T, times).toarray()
        V = np.linalg.svd(D)[2][D.shape[0]:].T
        DDt = D @ D.T
        for k in range(h.K):
            b = g.gamma_tk[:, k]
            S = np.zeros((T, s.d))
            np.add.at(S, tidx, (w * g.gamma[:, k])[:, None] * y)
            coef = np.linalg.lstsq((V * b[:, None]).T @ V, V.T @ S, rcond=None)[0]
            mu = V @ coef
            sinv = np.linalg.inv(pilot.params.sigma[k])
            grad = (b[:, None] * mu - S) @ sinv / N
            lm = max(lm, float(np.abs(np.linalg.solve(DDt, D @ grad)).max()))
    out.append(lm)
    lp = 0.0
    if T >= h.l_pi + 2 and h.K > 1:
        D = diff_matrix(h.l_pi + 1, T, times).toarray()
        V = np.linalg.svd(D)[2][D.shape[0]:].T
        alpha = polynomial_logits(g.gamma_tk, V, N)
        pi = np.exp(alpha - logsumexp(alpha, axis=0))
        grad = (g.gamma_tk.sum(axis=1) * pi - g.gamma_tk.T) / N
        lp = float(np.abs(np.linalg.solve(D @ D.T, D @ grad[:-1].T)).max())
    out.append(lp)
    return tuple(out)


def log_grid(lmax, n, min_ratio):
    """``n`` log-spaced values from ``lmax`` down to ``min_ratio * lmax``."""
    if n == 1:
        return [float(lmax)]
    return [float(v) for v in np.geomspace(lmax, lmax * min_ratio, n)]


def select_cell(scores, lambda_mu, lambda_pi):
    """Minimizer of ``scores``; ties go to the largest ``(lambda_mu, lambda_pi)``."""
    if not np.any(np.isfinite(scores)):
        raise CvError("every grid cell failed")
    best = np.nanmin(scores)
    cands = [(lambda_mu[i], lambda_pi[j]) for i, j in zip(*np.nonzero(scores == best))]
    return max(cands)


def grid_search(s, h, opts=None):
    """Cross-validate ``(lambda_mu, lambda_pi)`` over a grid and refit at the best cell.

    ``h`` supplies ``K``, the trend orders and the radius; its penalties are
    ignored. Results are keyed by ``(fold, cell)`` so the worker count never
    changes the report.
    """
    opts = CvOptions() if opts is None else opts
    plan = make_folds(s.T, opts.M)
    lmax = (None, None)
    if opts.lambda_mu is None or opts.lambda_pi is None:
        lmax = lambda_max(s, h, opts.fit)
    lmu = list(opts.lambda_mu) if opts.lambda_mu is not None else \
        log_grid(max(lmax[0], 1e-12), opts.n_lambda_mu, opts.min_ratio)
    lpi = list(opts.lambda_pi) if opts.lambda_pi is not None else \
        log_grid(max(lmax[1], 1e-12), opts.n_lambda_pi, opts.min_ratio)
    if not lmu or not lpi or min(lmu) < 0 or min(lpi) < 0:
        raise CvError("penalty grid must be nonempty and nonnegative")
    fopts = replace(opts.fit, workers=1)
    jobs = []
    for i, a in enumerate(lmu):
        for j, b in enumerate(lpi):
            hc = replace(h, lambda_mu=a, lambda_pi=b)
            for m in range(plan.M):
                jobs.append((s, plan, m, hc, fopts, (i, j)))
    if opts.workers > 1:
        with ProcessPoolExecutor(max_workers=opts.workers) as ex:
            results = list(ex.map(_fold_job, jobs, chunksize=1))
    else:
        results = [_fold_job(jb) for jb in jobs]
    fold_scores = np.full((plan.M, len(lmu), len(lpi)), np.nan)
    cache, diags = {}, []
    for key, m, sums, wts, diag in results:
        diags.append(diag)
        if sums is not None:
            cache[(m,) + tuple(key)] = (sums, wts)
            fold_scores[(m,) + tuple(key)] = sums.sum() / wts.sum()
    # a cell with any failed fold is invalid
    scores = np.where(np.all(np.isfinite(fold_scores), axis=0), fold_scores.mean(axis=0), np.nan)
    sel = select_cell(scores, lmu, lpi)
    report = CvReport(lambda_mu=lmu, lambda_pi=lpi, scores=scores, fold_scores=fold_scores,
                      fold_time_nll=cache, selected=sel, folds=plan, diagnostics=diags,
                      lambda_max=lmax)
    hsel = replace(h, lambda_mu=sel[0], lambda_pi=sel[1])
    report.refit = fit(s, hsel, replace(opts.fit, workers=opts.workers))
    return report
