import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from vaerobust.gaussmath import LV_MAX, LV_MIN, DiagGaussian, entropy, kl_diag, log_prob, sample, skl


def _mc_kl(p_mu, p_lv, q_mu, q_lv, n, rng):
    z = p_mu + np.exp(0.5 * p_lv) * rng.standard_normal((n, p_mu.size))
    lp = -0.5 * np.sum(p_lv + (z - p_mu) ** 2 * np.exp(-p_lv), axis=1)
    lq = -0.5 * np.sum(q_lv + (z - q_mu) ** 2 * np.exp(-q_lv), axis=1)
    d = lp - lq
    return d.mean(), d.std(ddof=1) / math.sqrt(n)


def test_kl_unit_shift_is_half():
    p = DiagGaussian([0.0], [0.0])
    q = DiagGaussian([1.0], [0.0])
    assert float(kl_diag(p, q)) == pytest.approx(0.5, abs=1e-15)
    assert float(skl(p, q)) == pytest.approx(0.5, abs=1e-15)


def test_kl_variance_ratio_against_hand_value():
    # KL(N(0,1) || N(0,4)) = 0.5 * (1/4 - 1 + ln 4)
    p, q = DiagGaussian([0.0], [0.0]), DiagGaussian([0.0], [math.log(4.0)])
    assert float(kl_diag(p, q)) == pytest.approx(0.5 * (0.25 - 1 + math.log(4)), abs=1e-14)
    # KL(N(0,4) || N(0,1)) = 0.5 * (4 - 1 - ln 4) = 0.806853
    assert float(kl_diag(q, p)) == pytest.approx(0.806853, abs=1e-6)


def test_log_prob_standard_at_origin():
    assert float(log_prob(DiagGaussian.standard(1), [0.0])) == pytest.approx(-0.918939, abs=1e-6)


def test_log_prob_matches_quadrature():
    # integral of exp(log_prob) over a wide grid is 1
    p = DiagGaussian([0.3], [math.log(0.7)])
    grid = np.linspace(-12, 12, 20001)
    dens = np.exp(log_prob(p, grid[:, None]).data)
    assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-9)


def test_entropy_matches_monte_carlo():
    rng = np.random.default_rng(3)
    p = DiagGaussian(rng.normal(size=3), rng.normal(size=3))
    eps = rng.standard_normal((200000, 3))
    zs = p.mean.data + np.sqrt(p.var) * eps
    mc = -np.mean(log_prob(p, zs).data)
    assert entropy(p) == pytest.approx(mc, abs=0.02)


def test_log_var_is_clamped():
    p = DiagGaussian([0.0, 0.0], [-50.0, 50.0])
    np.testing.assert_array_equal(p.log_var.data, [LV_MIN, LV_MAX])


def test_rejects_bad_parameters():
    with pytest.raises(ValueError):
        DiagGaussian([0.0, 1.0], [0.0])
    with pytest.raises(ValueError):
        DiagGaussian([np.nan], [0.0])
    with pytest.raises(ValueError):
        kl_diag(DiagGaussian.standard(2), DiagGaussian.standard(3))


def test_batched_kl_reduces_last_axis():
    rng = np.random.default_rng(0)
    mu, lv = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    batch = kl_diag(DiagGaussian(mu, lv), DiagGaussian.standard((5, 4))).data
    singles = [float(kl_diag(DiagGaussian(mu[i], lv[i]), DiagGaussian.standard(4))) for i in range(5)]
    np.testing.assert_allclose(batch, singles, rtol=1e-14)


def test_sample_checks_noise_shape():
    with pytest.raises(ValueError):
        sample(DiagGaussian.standard(3), np.zeros(2))


gauss = st.integers(1, 6).flatmap(lambda m: st.tuples(
    arrays(np.float64, m, elements=st.floats(-5, 5)),
    arrays(np.float64, m, elements=st.floats(-4, 4)),
    arrays(np.float64, m, elements=st.floats(-5, 5)),
    arrays(np.float64, m, elements=st.floats(-4, 4)),
))


@given(gauss)
def test_kl_nonnegative_and_zero_on_self(params):
    pm, pl, qm, ql = params
    p, q = DiagGaussian(pm, pl), DiagGaussian(qm, ql)
    assert float(kl_diag(p, q)) >= -1e-12
    assert abs(float(kl_diag(p, p))) < 1e-12


@given(gauss)
def test_skl_symmetric(params):
    pm, pl, qm, ql = params
    p, q = DiagGaussian(pm, pl), DiagGaussian(qm, ql)
    assert float(skl(p, q)) == float(skl(q, p))


@given(gauss, st.floats(-3, 3))
def test_kl_invariant_to_common_shift(params, c):
    pm, pl, qm, ql = params
    a = float(kl_diag(DiagGaussian(pm, pl), DiagGaussian(qm, ql)))
    b = float(kl_diag(DiagGaussian(pm + c, pl), DiagGaussian(qm + c, ql)))
    assert a == pytest.approx(b, rel=1e-9, abs=1e-9)


@given(gauss)
def test_kl_additive_over_dimensions(params):
    pm, pl, qm, ql = params
    whole = float(kl_diag(DiagGaussian(pm, pl), DiagGaussian(qm, ql)))
    parts = sum(float(kl_diag(DiagGaussian(pm[i:i + 1], pl[i:i + 1]), DiagGaussian(qm[i:i + 1], ql[i:i + 1])))
                for i in range(pm.size))
    assert whole == pytest.approx(parts, rel=1e-10, abs=1e-10)


def test_closed_form_matches_monte_carlo_single_pair():
    rng = np.random.default_rng(11)
    pm, qm, pl, ql = rng.normal(size=4), rng.normal(size=4), rng.uniform(-1, 1, 4), rng.uniform(-1, 1, 4)
    est, se = _mc_kl(pm, pl, qm, ql, 200000, rng)
    assert abs(est - float(kl_diag(DiagGaussian(pm, pl), DiagGaussian(qm, ql)))) < 3 * se
