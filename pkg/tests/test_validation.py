import math

import numpy as np
import pytest

from sslv.grid import GridSpec
from sslv.model import heston_limit_params, reference_jump_spec, reference_params
from sslv.pricing import Contract, black_price, default_grid, evolve_density
from sslv.validation import (MCConfig, StepMonitor, heston_benchmark_price, mc_price, monitor_step,
                             richardson_ratio, sample_kou)


# ------------------------------------------------------------ Heston oracle
def test_heston_benchmark_value():
    assert heston_benchmark_price(heston_limit_params(), 65.0, 0.5) == pytest.approx(10.7564, abs=1e-3)


def test_heston_put_call_parity():
    p = heston_limit_params()
    for K in (50.0, 65.0, 80.0):
        c = heston_benchmark_price(p, K, 0.5)
        q = heston_benchmark_price(p, K, 0.5, call=False)
        fwd = p.S0 * math.exp(-p.r_f * 0.5) - K * math.exp(-p.r_d * 0.5)
        assert c - q == pytest.approx(fwd, abs=1e-8)


def test_heston_small_vol_of_vol_is_black():
    p = heston_limit_params(xi_v=1e-3)
    T, K = 0.5, 70.0
    kappa, theta, v0 = p.kappa_v, p.theta_v, p.v0
    # deterministic variance path v(t) = theta + (v0 - theta) e^{-kappa t}
    total = theta * T + (v0 - theta) * (1 - math.exp(-kappa * T)) / kappa
    F = p.S0 * math.exp((p.r_d - p.r_f) * T)
    ref = black_price(F, K, T, math.sqrt(total / T), math.exp(-p.r_d * T))
    assert heston_benchmark_price(p, K, T) == pytest.approx(ref, abs=2e-3)


def test_heston_tiny_strike_is_discounted_spot():
    p = heston_limit_params()
    K = 1e-6
    expected = p.S0 * math.exp(-p.r_f * 0.5) - K * math.exp(-p.r_d * 0.5)
    assert heston_benchmark_price(p, K, 0.5) == pytest.approx(expected, rel=1e-8)


@pytest.mark.parametrize("change", [dict(kappa_r=0.3), dict(rho_vr=0.4), dict(a=0.7),
                                    dict(local_vol=lambda S, t: 0.5 + 0 * S)])
def test_heston_rejects_other_models(change):
    p = heston_limit_params().with_(**change)
    with pytest.raises(ValueError):
        heston_benchmark_price(p, 65.0, 0.5)


# ------------------------------------------------------------ Monte Carlo
def test_kou_sampler_moments(rng):
    jumps = reference_jump_spec()
    for k in (jumps.idio_s, jumps.common):
        y = sample_kou(k, 400_000, rng)
        assert y.mean() == pytest.approx(k.mean_jump() / k.intensity, abs=4 * y.std() / math.sqrt(y.size))
        if k.y_max is not None:
            assert np.abs(y).max() <= k.y_max


def test_deterministic_paths_have_zero_error():
    p = reference_params(r_d=0.0, r_f=0.0, xi_v=0.0, local_vol=lambda S, t: 0.0 * S)
    price, se = mc_price(Contract("european_call", T=0.5, strike=60.0), p, cfg=MCConfig(paths=1000, dt=0.05,
                                                                                          substeps=1))
    assert price == pytest.approx(5.0, abs=1e-12) and se == 0.0


def test_mc_heston_limit():
    p = heston_limit_params()
    price, se = mc_price(Contract("european_call", T=0.5, strike=65.0), p,
                         cfg=MCConfig(paths=40_000, dt=0.01, substeps=2, seed=3))
    assert abs(price - 10.7564) < 4 * se + 0.02


def test_mc_error_shrinks_like_root_paths():
    p = reference_params()
    c = Contract("european_call", T=0.25, strike=65.0)
    se = [mc_price(c, p, cfg=MCConfig(paths=n, dt=0.05, substeps=1, seed=11))[1] for n in (4000, 16000)]
    assert se[1] / se[0] == pytest.approx(0.5, rel=0.15)


def test_mc_is_reproducible_and_batch_independent():
    p = reference_params()
    c = Contract("down_and_out_call", T=0.2, strike=65.0, lower=50.0, lower_slope=20.0)
    a = mc_price(c, p, reference_jump_spec(), MCConfig(paths=3000, dt=0.05, substeps=2, batch=1000))
    b = mc_price(c, p, reference_jump_spec(), MCConfig(paths=3000, dt=0.05, substeps=2, batch=1000))
    assert a == b


def test_mc_antithetic_runs():
    p = reference_params()
    price, se = mc_price(Contract("european_put", T=0.2, strike=65.0), p,
                         cfg=MCConfig(paths=4000, dt=0.05, substeps=1, antithetic=True, batch=2000))
    assert price > 0 and se > 0


def test_mc_config_checks():
    with pytest.raises(ValueError):
        MCConfig(paths=0)
    with pytest.raises(ValueError):
        MCConfig(antithetic=True, batch=3)


# ------------------------------------------------------------ monitors
def test_identity_step_has_no_drift(rng):
    x = rng.uniform(size=(4, 4, 4))
    r = monitor_step(x, x.copy())
    assert r.mass_drift == 0 and r.ok


def test_absorption_explains_drift(rng):
    x = rng.uniform(size=(5, 3, 3))
    y = x.copy()
    lost = y[:2].sum()
    y[:2] = 0
    r = monitor_step(x, y, absorbed=lost, mass_tol=1e-12)
    assert r.mass_drift == pytest.approx(-lost, abs=1e-12) and r.mass_ok


def test_negative_value_flagged():
    x = np.full((3, 3, 3), 1 / 27)
    y = x.copy()
    y[1, 1, 1] = -1e-6
    y[0, 0, 0] += 1e-6 + 1 / 27
    assert not monitor_step(x, y).positive


def test_monitor_matches_pricing_accounting():
    p = reference_params()
    c = Contract("double_no_touch", T=0.1, lower=55.0, upper=80.0)
    g = default_grid(p, c, GridSpec(n_s=21, n_v=11, n_r=11), c.T)
    mon = StepMonitor(positivity_tol=np.inf)
    d = evolve_density(p, None, g, c.T, 0.01, c.barriers, monitor=mon)
    assert sum(r.absorbed for r in mon.reports) == pytest.approx(d.absorbed, abs=1e-14)
    assert sum(r.mass_drift for r in mon.reports) == pytest.approx(d.mass - 1, abs=1e-12)


def test_richardson_ratio_of_second_order_sequence():
    f = lambda h: 1.0 + 3 * h * h
    assert richardson_ratio(f(0.4), f(0.2), f(0.1)) == pytest.approx(4.0)
