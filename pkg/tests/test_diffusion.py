import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffref3d.boxes import ConfigError
from diffref3d.diffusion import (
    DiffusionConfig,
    build_cosine_schedule,
    ddim_sigma,
    ddim_step,
    make_timestep_sequence,
    q_sample,
)

SCHED = build_cosine_schedule(1000, 0.008)
CFG = DiffusionConfig()


def f_cos(t, T=1000, s=0.008):
    return math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2


def test_alpha_bar_monotone_and_endpoints():
    ab = SCHED.alpha_bar
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    assert ab[-1] < 0.01
    assert ab[500] == pytest.approx(f_cos(500) / f_cos(0), rel=1e-12)


def test_beta_bounds():
    assert SCHED.beta[0] == 0.0
    assert np.all(SCHED.beta[1:] > 0)
    assert np.all(SCHED.beta <= 0.999)
    with pytest.raises(ValueError):
        SCHED.alpha_bar[3] = 0.5


def test_schedule_rejects_bad_parameters():
    with pytest.raises(ConfigError):
        build_cosine_schedule(0)
    with pytest.raises(ConfigError):
        DiffusionConfig(snr=0)


def test_q_sample_snr_scaling(rng):
    eps = rng.normal(size=(5, 7)) * 0.5
    x0 = np.zeros((5, 7))
    a = q_sample(x0, 400, eps, SCHED, DiffusionConfig(snr=1.0))
    b = q_sample(x0, 400, eps, SCHED, DiffusionConfig(snr=2.0))
    np.testing.assert_allclose(b, a / 2, rtol=1e-12)


def test_q_sample_clamps_and_checks_range(rng):
    big = q_sample(np.full((3, 7), 50.0), 1, np.zeros((3, 7)), SCHED, CFG)
    assert np.all(big == CFG.clamp_bound)
    with pytest.raises(IndexError):
        q_sample(np.zeros(7), 0, np.zeros(7), SCHED, CFG)
    with pytest.raises(IndexError):
        q_sample(np.zeros(7), 1001, np.zeros(7), SCHED, CFG)


def test_q_sample_per_row_timesteps(rng):
    x0 = rng.normal(size=(4, 7)) * 0.2
    eps = rng.normal(size=(4, 7))
    t = np.array([1, 10, 500, 1000])
    rows = q_sample(x0, t, eps, SCHED, CFG)
    for i in range(4):
        np.testing.assert_array_equal(rows[i], q_sample(x0[i], int(t[i]), eps[i], SCHED, CFG))


def test_ddim_step_matches_scalar_oracle():
    x_t, x0_hat, eps_new = 0.7, -0.2, 0.3
    t, tp = 1000, 500
    ab_t, ab_p = f_cos(t) / f_cos(0), f_cos(tp) / f_cos(0)
    eps_pred = (x_t - math.sqrt(ab_t) * x0_hat) / math.sqrt(1 - ab_t)
    sigma = math.sqrt((1 - ab_p) / (1 - ab_t)) * math.sqrt(1 - ab_t / ab_p)
    expected = math.sqrt(ab_p) * x0_hat + math.sqrt(1 - ab_p - sigma**2) * eps_pred + sigma * eps_new
    got = ddim_step(np.array([x_t]), np.array([x0_hat]), t, tp, np.array([eps_new]), SCHED)
    assert got[0] == pytest.approx(expected, rel=1e-10)
    assert ddim_sigma(t, tp, SCHED) == pytest.approx(sigma, rel=1e-10)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 1000), st.data())
def test_ddim_deterministic_path(t, data):
    tp = data.draw(st.integers(1, t - 1))
    x0 = np.linspace(-0.9, 0.9, 7)
    x_t = q_sample(x0, t, np.zeros(7), SCHED, CFG)
    stepped = ddim_step(x_t, x0, t, tp, np.zeros(7), SCHED)
    np.testing.assert_allclose(stepped, q_sample(x0, tp, np.zeros(7), SCHED, CFG), atol=1e-9)


def test_ddim_final_step_returns_prediction(rng):
    x_t = rng.normal(size=(6, 7))
    x0_hat = rng.normal(size=(6, 7))
    out = ddim_step(x_t, x0_hat, 200, 0, rng.normal(size=(6, 7)), SCHED)
    np.testing.assert_array_equal(out, x0_hat)


def test_ddim_step_rejects_bad_order():
    with pytest.raises(IndexError):
        ddim_step(np.zeros(7), np.zeros(7), 500, 500, np.zeros(7), SCHED)
    with pytest.raises(IndexError):
        ddim_step(np.zeros(7), np.zeros(7), 1001, 5, np.zeros(7), SCHED)


def test_timestep_sequences():
    assert make_timestep_sequence(1000, 3) == [1000, 500, 200]
    assert make_timestep_sequence(1000, 4) == [1000, 750, 500, 250]
    assert make_timestep_sequence(1000, 1) == [1000]
    assert make_timestep_sequence(1000, 5) == [1000, 800, 600, 400, 200]
    with pytest.raises(ConfigError):
        make_timestep_sequence(1000, 0)
    with pytest.raises(ConfigError):
        make_timestep_sequence(10, 11)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.data())
def test_timestep_sequence_strictly_decreasing(T, data):
    steps = data.draw(st.integers(1, T))
    seq = make_timestep_sequence(T, steps)
    assert len(seq) == steps
    assert seq[0] == T
    assert all(a > b for a, b in zip(seq, seq[1:]))
    assert seq[-1] >= 1
