import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nslsysid.errors import DomainError, InsufficientDataError, InvalidArgumentError
from nslsysid.nslfit import (
    PHI_MIN,
    EnvelopeSamples,
    FitResult,
    NSLParams,
    PiecewiseAffineGuess,
    auto_init,
    envelope_samples,
    eval_nsl,
    fit_nsl,
    format_formula,
    interpolation_grid,
    lower_envelope,
    margin,
    margin_and_grad,
    parse_formula,
)


def law_mp(alpha, beta, delta0, breaks, r):
    """Product form of the broken law in arbitrary precision."""
    r = mpmath.mpf(r)
    out = mpmath.mpf(beta) * r ** mpmath.mpf(delta0)
    for sig, phi, d in breaks:
        phi = max(mpmath.mpf(phi), mpmath.mpf(PHI_MIN))
        out *= (1 + (r / mpmath.mpf(sig)) ** (1 / phi)) ** (mpmath.mpf(d) * phi)
    return mpmath.mpf(alpha) + out


def brute_envelope(r, e, q):
    return np.array([min(ei for ri, ei in zip(r, e) if ri <= qq) for qq in q])


def noisy_samples(params, lo, hi, n=400, noise=0.01, seed=0):
    rng = np.random.default_rng(seed)
    r = 10 ** rng.uniform(lo, hi, n)
    r = np.concatenate([[10.0**lo, 10.0**hi], r])
    return r, eval_nsl(params, r) * np.exp(noise * rng.normal(size=r.size))


# ------------------------------------------------------------------ envelope

def test_lower_envelope_brute_force():
    rng = np.random.default_rng(1)
    mpmath.mp.dps = 30
    for _ in range(300):
        k = int(rng.integers(1, 30))
        r = rng.choice(np.arange(1, 50), size=k).astype(float)
        e = rng.uniform(0, 1, size=k)
        q = np.sort(rng.uniform(r.min(), 60, size=10))
        np.testing.assert_array_equal(lower_envelope(r, e, q), brute_envelope(r, e, q))


def test_lower_envelope_domain():
    with pytest.raises(DomainError):
        lower_envelope([2.0, 3.0], [1.0, 0.5], [1.0])
    assert lower_envelope([2.0, 3.0], [1.0, 0.5], 2.0) == 1.0


@given(st.floats(1e-3, 1e3), st.floats(1.01, 1e8), st.integers(2, 200))
def test_grid_is_geometric(r1, ratio, K):
    g = interpolation_grid(r1, r1 * ratio, K)
    assert g.size == K + 1 and g[0] == r1 and g[-1] == r1 * ratio
    q = np.log(g[1:] / g[:-1])
    assert np.max(np.abs(q - q.mean())) <= 1e-12 * max(1.0, abs(q.mean()))


def test_envelope_samples_and_csv(tmp_path):
    env = envelope_samples([10.0, 1.0, 100.0], [0.5, 1.0, 0.7], K=4)
    assert env.r_tilde[0] == 1.0 and env.r_tilde[-1] == 100.0
    np.testing.assert_array_equal(env.e_tilde, [1.0, 1.0, 0.5, 0.5, 0.5])
    lines = env.to_csv(tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "k,r_tilde,e_tilde" and lines[1] == "0,1.0,1.0"


# ------------------------------------------------------------------ law

BALL_COMPUTE_LAW = NSLParams.from_natural(0.0, 0.74, -0.039, [(1.2e6, 0.2, -1.1), (3.8e6, 0.2, 0.71)])


def test_eval_matches_high_precision():
    mpmath.mp.dps = 40
    cs = np.logspace(6, 12, 100)
    got = eval_nsl(BALL_COMPUTE_LAW, cs)
    ref = [float(law_mp(0, 0.74, -0.039, [(1.2e6, 0.2, -1.1), (3.8e6, 0.2, 0.71)], c)) for c in cs]
    np.testing.assert_allclose(got, ref, rtol=1e-10)


def test_eval_with_alpha_and_domain():
    p = NSLParams.from_natural(0.3, 2.0, -0.5, [])
    assert eval_nsl(p, 4.0) == pytest.approx(0.3 + 2.0 * 4.0**-0.5, rel=1e-14)
    with pytest.raises(DomainError):
        eval_nsl(p, [1.0, 0.0])
    # huge resources do not overflow in log space
    assert np.isfinite(eval_nsl(BALL_COMPUTE_LAW, 1e300))


def test_phi_cap_is_exact():
    low = NSLParams.from_natural(0.0, 1.0, -0.1, [(1e3, 0.05, -0.5)])
    capped = NSLParams.from_natural(0.0, 1.0, -0.1, [(1e3, PHI_MIN, -0.5)])
    r = np.logspace(0, 6, 50)
    np.testing.assert_array_equal(eval_nsl(low, r), eval_nsl(capped, r))
    assert low.phi_eff[0] == PHI_MIN


def test_margin_independent_recomputation():
    rng = np.random.default_rng(3)
    r, e = 10 ** rng.uniform(0, 5, 200), rng.uniform(0.1, 1, 200)
    env = envelope_samples(r, e)
    p = NSLParams.from_natural(0.01, 0.8, -0.05, [(300.0, 0.4, -0.3)])
    ref = 0.0
    for rk, ek in zip(env.r_tilde[1:], env.e_tilde[1:]):
        lk = 0.01 + 0.8 * rk**-0.05 * (1 + (rk / 300.0) ** (1 / 0.4)) ** (-0.3 * 0.4)
        ref += (math.log(lk) - math.log(ek)) ** 2
    assert margin(p, env) == pytest.approx(ref / env.K, rel=1e-12, abs=1e-12)


def test_constraint_violations_reported():
    assert BALL_COMPUTE_LAW.constraint_violations() == ["delta_2=0.71 > 0"]
    assert NSLParams.from_natural(0.0, 1.0, -0.2).constraint_violations() == []


# ------------------------------------------------------------------ gradients

@pytest.mark.parametrize("fit_alpha", [False, True])
def test_margin_gradient_matches_finite_differences(fit_alpha):
    from nslsysid.nslfit import _pack, _unpack

    rng = np.random.default_rng(4)
    r, e = 10 ** rng.uniform(1, 7, 300), rng.uniform(0.01, 1, 300)
    env = envelope_samples(r, e)
    alpha = 0.02 if fit_alpha else 0.0
    p = NSLParams.from_natural(alpha, 1.3, -0.1, [(1e3, 0.35, -0.4), (1e5, 0.5, 0.2)])
    _, g = margin_and_grad(p, env, fit_alpha)
    vec = _pack(p, fit_alpha)
    h = 1e-5
    for j in range(vec.size):
        dv = np.zeros_like(vec)
        dv[j] = h
        fd = (margin(_unpack(vec + dv, 2, fit_alpha), env) - margin(_unpack(vec - dv, 2, fit_alpha), env)) / (2 * h)
        assert abs(fd - g[j]) <= 1e-4 * max(abs(g[j]), 1e-4)


# ------------------------------------------------------------------ init and fit

def test_auto_init_recovers_polyline():
    # exact kinks on grid points: slopes -0.1, -1.0, -0.3
    knots = [(1.0, 1.0), (1e2, 10**-0.2), (1e4, 10**-2.2), (1e6, 10**-2.8)]
    r = np.logspace(0, 6, 10001)
    e = np.exp(np.interp(np.log(r), np.log([k[0] for k in knots]), np.log([k[1] for k in knots])))
    env = envelope_samples(r, e, K=120)
    guess = auto_init(env, 2)
    np.testing.assert_allclose(guess.slopes, [-0.1, -1.0, -0.3], atol=1e-3)
    np.testing.assert_allclose(np.exp(guess.log_breaks), [1e2, 1e4], rtol=0.05)


def test_auto_init_insufficient():
    env = envelope_samples([1.0, 10.0], [1.0, 0.5], K=4)
    with pytest.raises(InsufficientDataError):
        auto_init(env, 3)
    with pytest.raises(InvalidArgumentError):
        auto_init(env, -1)


def test_fit_rejects_breaks_beyond_support():
    env = envelope_samples([1.0, 10.0, 100.0], [1.0, 0.5, 0.2])
    with pytest.raises(InsufficientDataError):
        fit_nsl(env, 2)


def test_fit_recovers_plain_power_law():
    true = NSLParams.from_natural(0.0, 3.0, -0.5)
    env = envelope_samples(*noisy_samples(true, 2, 7), K=100)
    res = fit_nsl(env, 0)
    assert abs(res.params.delta0 + 0.5) <= 0.05
    assert res.margin <= 1e-3
    assert np.all(np.diff(res.history) <= 0)


def test_fit_recovers_break_location():
    true = NSLParams.from_natural(0.0, 1.0, -0.1, [(1e4, 0.3, -0.6)])
    env = envelope_samples(*noisy_samples(true, 1, 7, seed=5), K=100)
    res = fit_nsl(env, 1)
    assert 1e4 / 1.5 <= res.params.sigma[0] <= 1e4 * 1.5
    assert res.margin <= 1e-3


def test_fit_with_user_guess_and_alpha(tmp_path):
    true = NSLParams.from_natural(0.05, 2.0, -0.7)
    env = envelope_samples(*noisy_samples(true, 0, 4, noise=0.0), K=60)
    path = tmp_path / "g.json"
    path.write_text(json.dumps({"slopes": [-0.5], "breaks": [], "intercept": 0.5, "alpha": 0.01}))
    guess = PiecewiseAffineGuess.from_json(path)
    res = fit_nsl(env, 0, guess, n_iter=3000)
    assert res.params.alpha > 0
    assert res.margin < 1e-3
    with pytest.raises(InvalidArgumentError):
        fit_nsl(env, 1, guess)


def test_vertices_guess_roundtrip():
    g = PiecewiseAffineGuess.from_vertices([(1.0, 1.0), (100.0, 0.1), (1e4, 0.05)])
    np.testing.assert_allclose(g.slopes, [-0.5, np.log10(0.5) / 2], rtol=1e-12)
    p = g.to_params()
    assert p.b == 1 and p.phi[0] == PHI_MIN
    assert p.delta[0] == pytest.approx(g.slopes[1] - g.slopes[0])


# ------------------------------------------------------------------ formulas

@given(
    beta=st.floats(1e-3, 1e3),
    d0=st.floats(-2, 0),
    sig=st.floats(1.0, 1e9),
    phi=st.floats(0.2, 2.0),
    d=st.floats(-3, 3),
    alpha=st.one_of(st.just(0.0), st.floats(1e-6, 1.0)),
)
def test_formula_roundtrip(beta, d0, sig, phi, d, alpha):
    p = NSLParams.from_natural(alpha, beta, d0, [(sig, phi, d), (sig * 10, phi, -d)])
    q = parse_formula(format_formula(p, "c"))
    r = np.logspace(0, 12, 25)
    np.testing.assert_allclose(eval_nsl(q, r), eval_nsl(p, r), rtol=1e-9)


def test_compact_formula_style():
    s = format_formula(BALL_COMPUTE_LAW, "c", digits=2)
    assert s == "L(c) = 0.74 c^{-0.039} [1 + (c/1.2e+06)^{1/0.2}]^{-1.1*0.2} [1 + (c/3.8e+06)^{1/0.2}]^{0.71*0.2}"
    with pytest.raises(InvalidArgumentError):
        parse_formula("y = 3x")


def test_fit_result_save_load(tmp_path):
    true = NSLParams.from_natural(0.0, 3.0, -0.5)
    env = envelope_samples(*noisy_samples(true, 2, 5), K=50)
    res = fit_nsl(env, 0, n_iter=200)
    path = res.save(tmp_path / "fit.json", var="d", system="ball")
    d = json.loads(path.read_text())
    assert d["formula"].startswith("L(d) = ") and d["system"] == "ball"
    back = FitResult.load(path)
    assert back.margin == res.margin
    np.testing.assert_allclose(eval_nsl(back.params, [10.0, 1e4]), eval_nsl(res.params, [10.0, 1e4]), rtol=1e-15)
