"""Particle memberships from fitted models, Rand index scoring and baselines."""

import csv
import json
from dataclasses import dataclass, field, replace
from math import comb

import numpy as np
from scipy.optimize import linear_sum_assignment

from .cytodata import CytogramSeries
from .em import FitOptions, fit
from .model import Hyperparams, ModelParams, Responsibilities, estep
from .simgen import derive_seed


class GatingError(ValueError):
    pass


@dataclass(eq=False)
class GatingResult:
    """1-based cluster labels for every particle, one array per time."""

    labels: list
    mode: str
    seed: int = None
    source: str = ""

    def flat(self):
        return np.concatenate(self.labels)

    @property
    def sizes(self):
        return [lab.size for lab in self.labels]

    def write_csv(self, path, times=None):
        times = np.arange(1, len(self.labels) + 1) if times is None else times
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["time", "particle_index", "label", "mode", "seed"])
            seed = "" if self.seed is None else self.seed
            for t, lab in zip(times, self.labels):
                for i, v in enumerate(lab):
                    wr.writerow([repr(float(t)), i, int(v), self.mode, seed])


def read_labels(path):
    """Read a gating CSV back; returns ``(times, GatingResult)``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise GatingError("%s: no label rows" % path)
    times, labels = [], []
    for r in rows:
        t = float(r["time"])
        if not times or t != times[-1]:
            times.append(t)
            labels.append([])
        labels[-1].append(int(r["label"]))
    seed = rows[0].get("seed") or None
    return (np.array(times),
            GatingResult([np.array(l) for l in labels], rows[0]["mode"],
                         None if seed is None else int(seed), path))


def _split(g, flat):
    bounds = np.flatnonzero(np.diff(g.tidx)) + 1
    return np.split(flat, bounds)


def soft_gate(g, seed):
    """One categorical draw per particle from its responsibilities."""
    rng = np.random.default_rng(seed)
    u = rng.random(g.gamma.shape[0])
    cum = np.cumsum(g.gamma, axis=1)
    lab = np.minimum((u[:, None] >= cum).sum(axis=1), g.K - 1) + 1
    return GatingResult(_split(g, lab), "soft", int(seed))


def hard_gate(g):
    """Largest responsibility; ties go to the lowest cluster index."""
    return GatingResult(_split(g, np.argmax(g.gamma, axis=1) + 1), "hard")


def _pairs(counts):
    return sum(comb(int(c), 2) for c in counts)


def rand_index(a, b):
    """Standard Rand index between two labelings of the same particles.

    Uses the contingency table: agreeing pairs are
    ``C(N,2) + 2 sum C(n_ij,2) - sum C(a_i,2) - sum C(b_j,2)``.
    """
    la = a.flat() if isinstance(a, GatingResult) else np.asarray(a).ravel()
    lb = b.flat() if isinstance(b, GatingResult) else np.asarray(b).ravel()
    if la.shape != lb.shape:
        raise GatingError("labelings cover %d and %d particles" % (la.size, lb.size))
    n = la.size
    if n < 2:
        return 1.0
    _, ia = np.unique(la, return_inverse=True)
    _, ib = np.unique(lb, return_inverse=True)
    ia, ib = ia.ravel(), ib.ravel()
    nb = ib.max() + 1
    cont = np.bincount(ia * nb + ib)
    total = comb(n, 2)
    agree = total + 2 * _pairs(cont) - _pairs(np.bincount(ia)) - _pairs(np.bincount(ib))
    return agree / total


def per_time_rand(a, b):
    if a.sizes != b.sizes:
        raise GatingError("labelings have different per-time sizes")
    return [rand_index(x, y) for x, y in zip(a.labels, b.labels)]


def oracle_gate(truth, s, seed):
    """Soft gating with the data-generating parameters."""
    if truth.T != s.T or truth.d != s.d:
        raise GatingError("truth (T=%d, d=%d) does not match data (T=%d, d=%d)"
                          % (truth.T, truth.d, s.T, s.d))
    res = soft_gate(estep(s, truth), seed)
    res.source = "oracle"
    return res


def gaussian_kl(m1, S1, m2, S2):
    """``KL(N(m1, S1) || N(m2, S2))``."""
    m1, m2 = np.atleast_1d(m1), np.atleast_1d(m2)
    S1, S2 = np.atleast_2d(S1), np.atleast_2d(S2)
    d = m1.size
    L2 = np.linalg.cholesky(S2)
    diff = np.linalg.solve(L2, m2 - m1)
    tr = np.trace(np.linalg.solve(S2, S1))
    ld1 = np.linalg.slogdet(S1)[1]
    ld2 = 2 * np.log(np.diag(L2)).sum()
    return 0.5 * (tr + diff @ diff - d + ld2 - ld1)


def sym_kl(m1, S1, m2, S2):
    """Average of the two directed Gaussian KL divergences."""
    return 0.5 * (gaussian_kl(m1, S1, m2, S2) + gaussian_kl(m2, S2, m1, S1))


def match_labels(cost):
    """Permutation ``perm`` minimizing ``sum_i cost[i, perm[i]]``."""
    rows, cols = linear_sum_assignment(np.asarray(cost))
    perm = np.empty_like(cols)
    perm[rows] = cols
    return perm


@dataclass(eq=False)
class BaselineModel:
    """Oracle, per-slice (overfit) or pooled (underfit) comparison model.

    ``mu`` is (K, T, d); ``sigma`` is (K, T, d, d); ``pi`` is (K, T).
    ``perms[t]`` maps matched label order at ``t + 1`` to the raw slice fit.
    """

    kind: str
    mu: np.ndarray
    sigma: np.ndarray
    pi: np.ndarray
    perms: list = field(default_factory=list)

    @property
    def K(self):
        return self.mu.shape[0]

    def slice_params(self, t):
        alpha = np.log(np.maximum(self.pi[:, t:t + 1], 1e-300))
        return ModelParams(mu=self.mu[:, t:t + 1], sigma=self.sigma[:, t], alpha=alpha)

    def responsibilities(self, s):
        """E-step under the baseline's per-time parameters, stacked over time."""
        if s.T != self.mu.shape[1]:
            raise GatingError("baseline has T=%d, data T=%d" % (self.mu.shape[1], s.T))
        gam, gtk, lse = [], [], []
        for t in range(s.T):
            g = estep(s.subset([t]), self.slice_params(t))
            gam.append(g.gamma)
            gtk.append(g.gamma_tk)
            lse.append(g.log_norm)
        tidx = np.repeat(np.arange(s.T), s.n)
        return Responsibilities(gamma=np.concatenate(gam), tidx=tidx,
                                gamma_tk=np.concatenate(gtk), log_norm=np.concatenate(lse))


def _slice_opts(opts, seed):
    opts = FitOptions(n_restarts=3, max_em_iter=500) if opts is None else opts
    return replace(opts, seed=seed, workers=1, uneven=False)


def fit_overfit(s, K, seed, opts=None):
    """Independent weighted GMM per time, labels chained by symmetrized KL.

    Slice ``t + 1`` is permuted to minimize the total symmetrized KL cost
    against the already-matched slice ``t``.
    """
    h = Hyperparams(K=K)
    mus, sigmas, pis = [], [], []
    for t in range(s.T):
        try:
            res = fit(s.subset([t]), h, _slice_opts(opts, derive_seed(seed, t)))
        except Exception as e:
            raise GatingError("slice fit at time index %d failed: %s" % (t, e)) from e
        mus.append(res.params.mu[:, 0])
        sigmas.append(res.params.sigma)
        pis.append(res.params.pi[:, 0])
    perms = []
    for t in range(1, s.T):
        cost = np.array([[sym_kl(mus[t - 1][i], sigmas[t - 1][i], mus[t][j], sigmas[t][j])
                          for j in range(K)] for i in range(K)])
        perm = match_labels(cost)
        mus[t], sigmas[t], pis[t] = mus[t][perm], sigmas[t][perm], pis[t][perm]
        perms.append(perm)
    return BaselineModel("overfit", np.stack(mus, axis=1), np.stack(sigmas, axis=1),
                         np.stack(pis, axis=1), perms)


def fit_underfit(s, K, seed, opts=None):
    """One weighted GMM on all particles pooled over time."""
    y, w, _ = s.stacked()
    pooled = CytogramSeries(np.zeros(1), [y], [w])
    res = fit(pooled, Hyperparams(K=K), _slice_opts(opts, seed))
    p = res.params
    T = s.T
    return BaselineModel("underfit", np.repeat(p.mu, T, axis=1),
                         np.repeat(p.sigma[:, None], T, axis=1),
                         np.repeat(p.pi, T, axis=1))


def evaluation_dict(a, b):
    return {"rand_index": rand_index(a, b), "per_time_rand": per_time_rand(a, b)}


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
