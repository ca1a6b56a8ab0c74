import numpy as np
import pytest

from services.diffusion import (
    DdimPlan,
    ddim_sample,
    ddpm_sample,
    ddpm_step,
    make_plan,
    make_schedule,
    q_sample,
    schedule_from_beta,
    x0_to_eps,
)
from services.errors import InvalidArgument, NonFiniteValue, ShapeMismatch


def test_alpha_bar_of_small_table():
    sched = schedule_from_beta([0.1, 0.2])
    np.testing.assert_allclose(sched.alpha_bar, [0.9, 0.72], rtol=0, atol=1e-15)
    assert sched.alpha_bar_at(0) == 1.0
    assert sched.T == 2


@pytest.mark.parametrize("kind", ["cosine", "linear"])
def test_schedule_shape(kind):
    sched = make_schedule(1000, kind)
    assert sched.T == 1000
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert sched.beta.max() <= 0.999 and sched.beta.min() > 0
    assert sched.alpha_bar[-1] < 0.01


def test_linear_endpoints():
    sched = make_schedule(1000, "linear")
    assert sched.beta[0] == pytest.approx(1e-4)
    assert sched.beta[-1] == pytest.approx(2e-2)


def test_invalid_schedules():
    with pytest.raises(InvalidArgument):
        make_schedule(0)
    with pytest.raises(InvalidArgument):
        make_schedule(10, "quadratic")
    with pytest.raises(InvalidArgument):
        schedule_from_beta([0.1, 1.0])


@pytest.mark.parametrize("kind", ["cosine", "linear"])
def test_recursive_noising_matches_closed_form(kind, rng):
    sched = make_schedule(200, kind)
    x0 = rng.normal(size=(4, 6))
    x = x0.copy()
    mean_coef, var = 1.0, 0.0
    for t in range(1, sched.T + 1):
        beta = sched.beta[t - 1]
        x = np.sqrt(1 - beta) * x + np.sqrt(beta) * rng.normal(size=x0.shape)
        mean_coef *= np.sqrt(1 - beta)
        var = (1 - beta) * var + beta
        ab = sched.alpha_bar_at(t)
        assert abs(mean_coef - np.sqrt(ab)) < 1e-9
        assert abs(var - (1 - ab)) < 1e-9
    # the accumulated noise, renormalized, reproduces x through q_sample
    ab = sched.alpha_bar_at(sched.T)
    eps = (x - np.sqrt(ab) * x0) / np.sqrt(1 - ab)
    np.testing.assert_allclose(q_sample(x0, sched.T, eps, sched), x, atol=1e-9)


def test_q_sample_moments(rng):
    sched = make_schedule(1000, "cosine")
    t = 500
    ab = sched.alpha_bar_at(t)
    x0 = np.full(100_000, 2.0)
    xt = q_sample(x0, t, rng.standard_normal(x0.shape), sched)
    assert xt.mean() == pytest.approx(2.0 * np.sqrt(ab), rel=0.01)
    assert xt.std() == pytest.approx(np.sqrt(1 - ab), rel=0.01)


def test_q_sample_per_item_steps(rng):
    sched = make_schedule(100, "linear")
    x0 = rng.normal(size=(3, 5, 2))
    noise = rng.normal(size=x0.shape)
    t = np.array([1, 50, 100])
    batched = q_sample(x0, t, noise, sched)
    for i in range(3):
        np.testing.assert_allclose(batched[i], q_sample(x0[i], t[i], noise[i], sched))


def test_q_sample_guards(rng):
    sched = make_schedule(10)
    with pytest.raises(InvalidArgument):
        q_sample(np.zeros(3), 0, np.zeros(3), sched)
    with pytest.raises(InvalidArgument):
        q_sample(np.zeros(3), 11, np.zeros(3), sched)
    with pytest.raises(ShapeMismatch):
        q_sample(np.zeros(3), 1, np.zeros(4), sched)


def test_x0_to_eps_recovers_noise(rng):
    sched = make_schedule(1000, "cosine")
    x0, noise = rng.normal(size=(2, 8)), rng.normal(size=(2, 8))
    t = np.array([10, 700])
    xt = q_sample(x0, t, noise, sched)
    np.testing.assert_allclose(x0_to_eps(xt, x0, t, sched), noise, atol=1e-9)


def test_ddpm_step_last_step_is_noise_free(rng):
    sched = make_schedule(50, "linear")
    x0 = rng.normal(size=4)
    x1 = q_sample(x0, 1, rng.normal(size=4), sched)
    out = ddpm_step(x1, x0, 1, sched, noise=rng.normal(size=4))
    np.testing.assert_allclose(out, x0, atol=1e-9)


def test_ddpm_step_adds_scaled_noise(rng):
    sched = make_schedule(50, "linear")
    xt, x0 = rng.normal(size=4), rng.normal(size=4)
    z = rng.normal(size=4)
    mean = ddpm_step(xt, x0, 10, sched)
    np.testing.assert_allclose(ddpm_step(xt, x0, 10, sched, noise=z) - mean, np.sqrt(sched.beta[9]) * z)
    post = sched.beta[9] * (1 - sched.alpha_bar_at(9)) / (1 - sched.alpha_bar_at(10))
    np.testing.assert_allclose(
        ddpm_step(xt, x0, 10, sched, noise=z, variance="posterior") - mean, np.sqrt(post) * z
    )


def test_make_plan():
    assert make_plan(1000, 4).sub_steps == (1000, 750, 500, 250)
    assert make_plan(1000, 1).sub_steps == (1000,)
    assert make_plan(10, 10).sub_steps == tuple(range(10, 0, -1))
    with pytest.raises(InvalidArgument):
        make_plan(10, 0)
    with pytest.raises(InvalidArgument):
        make_plan(10, 11)
    with pytest.raises(InvalidArgument):
        DdimPlan(sub_steps=(5, 5, 1))
    assert make_plan(50, 5).T == 50
    with pytest.raises(InvalidArgument, match="beyond T"):
        DdimPlan(sub_steps=(60, 30), T=50)


def test_ddim_rejects_plan_longer_than_schedule(rng):
    sched = make_schedule(50)
    x0 = rng.normal(size=(1, 4, 3))
    with pytest.raises(InvalidArgument, match="T=50"):
        ddim_sample(oracle(x0), None, make_plan(100, 4), sched, rng.standard_normal(x0.shape))


def oracle(x0):
    return lambda x_t, t, cond: np.broadcast_to(x0, x_t.shape).copy()


@pytest.mark.parametrize("kind", ["cosine", "linear"])
def test_ddpm_chain_with_oracle_recovers_x0(kind, rng):
    sched = make_schedule(1000, kind)
    x0 = rng.normal(size=(1, 8, 6))
    out = ddpm_sample(oracle(x0), None, sched, rng.standard_normal(x0.shape), rng=rng)
    np.testing.assert_allclose(out, x0, atol=1e-5)


@pytest.mark.parametrize("kind", ["cosine", "linear"])
@pytest.mark.parametrize("steps", [1, 2, 4, 10])
def test_ddim_with_oracle_recovers_x0(kind, steps, rng):
    sched = make_schedule(1000, kind)
    x0 = rng.normal(size=(2, 8, 6))
    out = ddim_sample(oracle(x0), None, make_plan(1000, steps), sched, rng.standard_normal(x0.shape))
    np.testing.assert_allclose(out, x0, atol=1e-5)


def test_ddim_is_deterministic_without_eta(rng):
    sched = make_schedule(100, "cosine")
    denoise = lambda x, t, c: 0.5 * x + 0.1
    init = rng.standard_normal((1, 4, 3))
    a = ddim_sample(denoise, None, make_plan(100, 5), sched, init)
    b = ddim_sample(denoise, None, make_plan(100, 5), sched, init)
    np.testing.assert_array_equal(a, b)


def test_ddim_eta_one_matches_posterior_ddpm_chain():
    sched = make_schedule(20, "linear")
    denoise = lambda x, t, c: 0.5 * x + 0.1
    init = np.random.default_rng(3).standard_normal((1, 4, 3))
    ddim = ddim_sample(denoise, None, make_plan(20, 20, eta=1.0), sched, init, rng=np.random.default_rng(8))
    ddpm = ddpm_sample(denoise, None, sched, init, rng=np.random.default_rng(8), variance="posterior")
    np.testing.assert_allclose(ddim, ddpm, atol=1e-9)


def test_ddim_eta_needs_generator(rng):
    sched = make_schedule(20, "linear")
    with pytest.raises(InvalidArgument):
        ddim_sample(lambda x, t, c: x, None, make_plan(20, 4, eta=0.5), sched, rng.standard_normal((1, 3)))


def test_sampler_rejects_non_finite_denoiser(rng):
    sched = make_schedule(20, "linear")
    with pytest.raises(NonFiniteValue):
        ddim_sample(lambda x, t, c: x * np.nan, None, make_plan(20, 2), sched, rng.standard_normal((1, 3)))
