"""Figures written to files by the command-line report paths."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings in the image metadata
_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=110, bbox_inches="tight", metadata=_META)
    plt.close(fig)


def plot_fit(s, p, path, max_points=20000, seed=0):
    """Particles over time with fitted mean trajectories and probabilities.

    One row of panels per measurement dimension plus a bottom panel of
    cluster probabilities.
    """
    y, w, tidx = s.stacked()
    rng = np.random.default_rng(seed)
    keep = np.arange(y.shape[0])
    if keep.size > max_points:
        keep = np.sort(rng.choice(keep, max_points, replace=False))
    d = s.d
    fig, axes = plt.subplots(d + 1, 1, figsize=(9, 2.4 * (d + 1)), sharex=True)
    axes = np.atleast_1d(axes)
    x = s.times[tidx[keep]]
    size = 2 + 10 * w[keep] / w.max()
    colors = plt.cm.tab10(np.arange(p.K) % 10)
    for j in range(d):
        ax = axes[j]
        ax.scatter(x, y[keep, j], s=size, c="0.6", alpha=0.3, linewidths=0)
        for k in range(p.K):
            ax.plot(s.times, p.mu[k, :, j], color=colors[k], lw=1.6, label="cluster %d" % (k + 1))
        ax.set_ylabel("y%d" % (j + 1))
    axes[0].legend(loc="upper right", fontsize=7, ncol=min(p.K, 4))
    ax = axes[-1]
    for k in range(p.K):
        ax.plot(s.times, p.pi[k], color=colors[k], lw=1.4)
    ax.set_ylim(0, 1)
    ax.set_ylabel("probability")
    ax.set_xlabel("time")
    _save(fig, path)


def plot_trace(trace, path):
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(np.arange(len(trace)), trace, marker=".", lw=1)
    ax.set_xlabel("EM iteration")
    ax.set_ylabel("penalized objective")
    _save(fig, path)


def plot_cv_surface(report, path):
    """Heat map of the mean held-out score over the penalty grid."""
    sc = np.asarray(report.scores, dtype=float)
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    im = ax.imshow(np.ma.masked_invalid(sc), origin="lower", aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(report.lambda_pi)))
    ax.set_xticklabels(["%.2g" % v for v in report.lambda_pi], rotation=60, fontsize=7)
    ax.set_yticks(range(len(report.lambda_mu)))
    ax.set_yticklabels(["%.2g" % v for v in report.lambda_mu], fontsize=7)
    ax.set_xlabel("lambda_pi")
    ax.set_ylabel("lambda_mu")
    i, j = report.selected_index
    ax.plot(j, i, marker="*", color="red", ms=12)
    fig.colorbar(im, ax=ax, label="held-out NLL")
    _save(fig, path)


def plot_study(summary, path):
    """Mean Rand index and ratio to the oracle against separation."""
    models = []
    for r in summary:
        if r["model"] not in models:
            models.append(r["model"])
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.8))
    for m in models:
        rows = [r for r in summary if r["model"] == m]
        dl = [r["delta"] for r in rows]
        axes[0].plot(dl, [r["rand"] for r in rows], marker="o", label=m)
        if m != "oracle":
            axes[1].plot(dl, [r["rand_over_oracle"] for r in rows], marker="o", label=m)
    axes[0].set_ylabel("Rand index")
    axes[1].set_ylabel("Rand / oracle Rand")
    for ax in axes:
        ax.set_xlabel("delta")
        ax.legend(fontsize=8)
    _save(fig, path)


def plot_per_time_rand(values, times, path):
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(times, values, lw=1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("time")
    ax.set_ylabel("Rand index")
    _save(fig, path)
