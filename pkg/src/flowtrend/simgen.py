"""Two-cluster, one-dimensional synthetic benchmark with controllable separation.

Curves are specified by their starting polynomial coefficients and a sparse
list of knots, each knot adding a jump to the highest-order difference. Mean
curves are piecewise quadratic (jumps in the second difference) and the
logit curve is piecewise linear (jumps in the first difference).
"""

import json
from dataclasses import dataclass, replace

import numpy as np

from .cytodata import CytogramSeries
from .model import ModelParams

MEAN_ORDER = 2
LOGIT_ORDER = 1

DEFAULT_SPEC = {
    "T": 296,
    "sigma1": 0.0918,
    "sigma2": 0.114,
    "mean_knots": {
        # [value, first difference, second difference] at t = 1
        "mu1": {"start": [0.05, 0.0015, 0.0],
                "knots": [[60, -0.00006], [110, 0.00006],
                          # one daily cycle, 24 samples long
                          [170, 0.0025], [176, -0.005], [188, 0.005], [194, -0.0025],
                          [230, -0.00005], [270, 0.00005]]},
        "mu2": {"start": [0.9, 0.0008, 0.0],
                "knots": [[70, -0.00003], [150, 0.00001], [240, -0.00001]]},
    },
    # logit of cluster 2 against cluster 1; pi1 = 1 / (1 + exp(alpha1))
    "logit_knots": {"start": [-0.4, -0.02], "knots": [[100, 0.02], [200, 0.012], [260, -0.012]]},
}


class SimError(ValueError):
    pass


def curve_from_knots(T, start, knots):
    """Curve of order ``len(start) - 1`` with jumps of its top difference at knots.

    Parameters
    ----------
    T : int
    start : sequence
        ``[value, D1, ..., Dq]`` at the first time point.
    knots : sequence of (t, jump)
        1-based time index at which the ``q``-th difference changes by ``jump``.

    Returns
    -------
    (T,) array with ``D^(q+1) curve`` nonzero only at the knots.
    """
    q = len(start) - 1
    top = np.full(T - q, float(start[q]))
    jumps = np.zeros(T - q)
    for t, jump in knots:
        i = int(t) - 1
        if not 1 <= i < T - q:
            raise SimError("knot at %r outside the curve" % (t,))
        jumps[i] += float(jump)
    cur = top + np.cumsum(jumps)
    for j in range(q - 1, -1, -1):
        cur = float(start[j]) + np.concatenate([[0.0], np.cumsum(cur)])
    return cur


@dataclass(frozen=True, eq=False)
class SimTemplate:
    """Mean curves ``mu1, mu2``, logit ``alpha1`` and cluster standard deviations."""

    T: int
    mu1: np.ndarray
    mu2: np.ndarray
    alpha1: np.ndarray
    sigma1: float = 0.0918
    sigma2: float = 0.114
    spec: dict = None

    @property
    def pi1(self):
        return 1.0 / (1.0 + np.exp(self.alpha1))

    def truth(self):
        """Parameters of the data-generating model, ``K=2, d=1``."""
        mu = np.stack([self.mu1, self.mu2])[:, :, None]
        sigma = np.array([self.sigma1 ** 2, self.sigma2 ** 2])
        alpha = np.stack([-self.alpha1, np.zeros(self.T)])
        return ModelParams(mu=mu, sigma=sigma, alpha=alpha, times=np.arange(1.0, self.T + 1))


def build_template(spec=None, T=None):
    spec = DEFAULT_SPEC if spec is None else spec
    T = int(spec.get("T", 296) if T is None else T)
    mk = spec["mean_knots"]
    lk = spec["logit_knots"]
    for name, c, order in (("mu1", mk["mu1"], MEAN_ORDER), ("mu2", mk["mu2"], MEAN_ORDER),
                           ("logit", lk, LOGIT_ORDER)):
        if len(c["start"]) != order + 1:
            raise SimError("%s start needs %d coefficients" % (name, order + 1))
    return SimTemplate(
        T=T,
        mu1=curve_from_knots(T, mk["mu1"]["start"], mk["mu1"].get("knots", [])),
        mu2=curve_from_knots(T, mk["mu2"]["start"], mk["mu2"].get("knots", [])),
        alpha1=curve_from_knots(T, lk["start"], lk.get("knots", [])),
        sigma1=float(spec.get("sigma1", 0.0918)),
        sigma2=float(spec.get("sigma2", 0.114)),
        spec=dict(spec, T=T))


def load_template(path):
    with open(path, encoding="utf-8") as fh:
        return build_template(json.load(fh))


def apply_delta(tmpl, delta):
    """Shift ``mu2`` so its time average moves from ``mean(mu1)`` (0) to its own (12)."""
    if not 0 <= delta <= 12:
        raise SimError("delta must lie in [0, 12], got %r" % (delta,))
    gap = tmpl.mu2.mean() - tmpl.mu1.mean()
    return replace(tmpl, mu2=tmpl.mu2 - (1.0 - delta / 12.0) * gap)


def derive_seed(seed, *keys):
    """Child seed for ``(seed, keys...)`` via numpy's SeedSequence hashing."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1)[0])


def generate(tmpl, n_t, seed):
    """Draw ``n_t`` particles per time; returns ``(series, truth, labels)``.

    ``labels`` is a list of 1-based integer arrays, one per time.
    """
    if n_t < 1:
        raise SimError("n_t must be positive")
    rng = np.random.default_rng(seed)
    mus = np.stack([tmpl.mu1, tmpl.mu2])
    sds = np.array([tmpl.sigma1, tmpl.sigma2])
    pi1 = tmpl.pi1
    pts, wts, labels = [], [], []
    for t in range(tmpl.T):
        lab = np.where(rng.random(n_t) < pi1[t], 1, 2)
        y = mus[lab - 1, t] + sds[lab - 1] * rng.standard_normal(n_t)
        pts.append(y[:, None])
        wts.append(np.ones(n_t))
        labels.append(lab)
    s = CytogramSeries(np.arange(1.0, tmpl.T + 1), pts, wts)
    return s, tmpl.truth(), labels
