import numpy as np
import pytest

from flowtrend.simgen import (DEFAULT_SPEC, SimError, apply_delta, build_template,
                              curve_from_knots, derive_seed, generate, load_template)
from flowtrend.tflinalg import diff_matrix


def short_spec(**kw):
    """Default starting coefficients without knots, usable at any T."""
    mk = DEFAULT_SPEC["mean_knots"]
    spec = dict(DEFAULT_SPEC,
                mean_knots={k: {"start": v["start"], "knots": []} for k, v in mk.items()},
                logit_knots={"start": DEFAULT_SPEC["logit_knots"]["start"], "knots": []})
    spec.update(kw)
    return spec


def test_default_noise_levels():
    t = build_template()
    assert (t.sigma1, t.sigma2) == (0.0918, 0.114)
    assert t.T == 296


def test_zero_knots_quadratic():
    c = curve_from_knots(50, [1.0, 0.2, 0.01], [])
    assert np.abs(np.diff(c, 3)).max() <= 1e-10
    assert np.allclose(c, 1.0 + 0.2 * np.arange(50) + 0.01 * np.arange(50) * np.arange(-1, 49) / 2)


def test_knot_sparsity():
    t = build_template()
    for curve, spec, order in ((t.mu1, DEFAULT_SPEC["mean_knots"]["mu1"], 2),
                               (t.mu2, DEFAULT_SPEC["mean_knots"]["mu2"], 2),
                               (t.alpha1, DEFAULT_SPEC["logit_knots"], 1)):
        dd = diff_matrix(order + 1, t.T) @ curve
        assert np.sum(np.abs(dd) > 1e-12) <= len(spec["knots"])


def test_daily_oscillation_window():
    t = build_template()
    dd = np.abs(diff_matrix(3, t.T) @ t.mu1) > 1e-12
    knots = np.flatnonzero(dd) + 1
    osc = knots[(knots >= 167) & (knots <= 196)]
    assert osc.max() - osc.min() == 24


def test_probabilities_in_range():
    p = build_template().pi1
    assert np.all((p > 0) & (p < 1))


def test_knot_outside():
    with pytest.raises(SimError):
        curve_from_knots(10, [0.0, 0.0], [[20, 1.0]])


def test_bad_start_length():
    spec = dict(DEFAULT_SPEC, logit_knots={"start": [0.0], "knots": []})
    with pytest.raises(SimError):
        build_template(spec)


def test_delta_endpoints():
    t = build_template()
    assert apply_delta(t, 0).mu2.mean() == pytest.approx(t.mu1.mean(), abs=1e-12)
    assert np.array_equal(apply_delta(t, 12).mu2, t.mu2)
    half = apply_delta(t, 6).mu2.mean() - t.mu1.mean()
    assert half == pytest.approx(0.5 * (t.mu2.mean() - t.mu1.mean()), abs=1e-12)


def test_delta_affine():
    t = build_template()
    a, b = apply_delta(t, 0).mu2, apply_delta(t, 12).mu2
    for d in (3, 7, 11):
        assert np.allclose(apply_delta(t, d).mu2, a + d / 12 * (b - a), atol=1e-14)


@pytest.mark.parametrize("delta", [-1, 13])
def test_delta_range(delta):
    with pytest.raises(SimError):
        apply_delta(build_template(), delta)


def test_generate_deterministic():
    t = build_template(short_spec(), T=20)
    a = generate(t, 10, 5)
    b = generate(t, 10, 5)
    assert all(np.array_equal(x, y) for x, y in zip(a[0].points, b[0].points))
    assert all(np.array_equal(x, y) for x, y in zip(a[2], b[2]))
    c = generate(t, 10, 6)
    assert not np.array_equal(a[0].points[0], c[0].points[0])


def test_noise_free_limit():
    t = build_template(short_spec(sigma1=1e-8, sigma2=1e-8), T=30)
    s, truth, labels = generate(t, 5, 0)
    for i, (y, lab) in enumerate(zip(s.points, labels)):
        assert np.allclose(y[:, 0], truth.mu[lab - 1, i, 0], atol=1e-6)


def test_label_frequency_binomial_band():
    t = build_template()
    s, truth, labels = generate(t, 500, 1)
    p = t.pi1
    freq = np.array([np.mean(lab == 1) for lab in labels])
    band = 3 * np.sqrt(p * (1 - p) / 500)
    assert np.mean(np.abs(freq - p) <= band) >= 0.95


def test_truth_parameters():
    t = build_template()
    truth = t.truth()
    assert np.allclose(truth.pi[0], t.pi1)
    assert np.allclose(truth.sigma[:, 0, 0], [0.0918 ** 2, 0.114 ** 2])


def test_sample_means_converge():
    t = build_template(short_spec(), T=40)
    errs = []
    for n in (50, 800):
        s, truth, labels = generate(t, n, 3)
        e = [abs(y[lab == 1, 0].mean() - truth.mu[0, i, 0]) for i, (y, lab)
             in enumerate(zip(s.points, labels)) if np.sum(lab == 1) > 1]
        errs.append(np.mean(e))
    # sqrt(16) = 4 times fewer per-cluster errors, allow slack
    assert errs[1] < errs[0] / 2.5


def test_derive_seed():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert derive_seed(1, 2, 3) != derive_seed(1, 3, 2)


def test_load_template(tmp_path):
    import json
    path = tmp_path / "t.json"
    path.write_text(json.dumps(short_spec(T=50)))
    assert load_template(path).T == 50
