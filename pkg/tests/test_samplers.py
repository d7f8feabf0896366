import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from mscm.denoiser import FunctionDenoiser, GmmOracle, GmmSpec, gmm_posterior, x_var_table
from mscm.evaluate import w1_to_gmm
from mscm.rng import splitmix64, stream
from mscm.samplers import (
    BLOCK_SIZE,
    SampleRun,
    addim_step,
    ancestral_step,
    ddim_step,
    heun_step,
    inv_ddim,
    multistep_cm_sample,
    noisy_ddim_step,
    posterior_coefs,
    teacher_sample,
)
from mscm.schedule import NoiseSchedule, SegmentGrid

SCHED = NoiseSchedule()
TWO = GmmSpec.two_modes()
ORACLE = GmmOracle(TWO, SCHED)


def test_splitmix64_reference_values():
    # first outputs of the reference SplitMix64 generator seeded with 0
    assert splitmix64(0, 0) == 0xE220A8397B1DCDAF
    assert splitmix64(0, 1) == 0x6E789E6AA1B965F4
    assert splitmix64(0, 2) == 0x06C45D188009454F


def test_streams_are_independent_of_each_other():
    assert stream(3, 0).random() != stream(3, 1).random()
    assert stream(3, 5).random() == stream(3, 5).random()


def test_ddim_identity_and_endpoint():
    z = np.array([[0.3], [-1.2]])
    np.testing.assert_array_equal(ddim_step(SCHED, np.zeros_like(z), z, 0.4, 0.4), z)
    x = np.array([[0.7], [2.0]])
    np.testing.assert_array_equal(ddim_step(SCHED, x, z, 1.0, 0.0), x)


def test_ddim_scalar_value():
    out = ddim_step(SCHED, np.array([1.0]), np.array([1.41421356]), 0.5, 0.25)
    alpha_t, sigma_t = math.cos(math.pi / 4), math.sin(math.pi / 4)
    alpha_s, sigma_s = math.cos(math.pi / 8), math.sin(math.pi / 8)
    expected = alpha_s + sigma_s / sigma_t * (1.41421356 - alpha_t)
    assert out[0] == pytest.approx(expected, rel=1e-14)
    assert out[0] == pytest.approx(1.30656, abs=1e-5)


def test_ddim_errors():
    with pytest.raises(ValueError):
        ddim_step(SCHED, np.zeros(1), np.zeros(1), 0.0, 0.0)
    with pytest.raises(ValueError):
        ddim_step(SCHED, np.zeros(1), np.zeros(1), 0.3, 0.5)


def test_inv_ddim_endpoint_and_error():
    z0, z1 = np.array([0.4]), np.array([-0.9])
    np.testing.assert_array_equal(inv_ddim(SCHED, z0, z1, 1.0, 0.0), z0)
    with pytest.raises(ValueError):
        inv_ddim(SCHED, z0, z1, 0.5, 0.5)


def test_inv_ddim_round_trip():
    rng = np.random.default_rng(0)
    n = 10_000
    t = rng.uniform(1e-3, 1.0, n)
    s = t * rng.uniform(0.0, 0.999, n)
    x = rng.standard_normal((n, 3))
    z = rng.standard_normal((n, 3))
    back = inv_ddim(SCHED, ddim_step(SCHED, x, z, t, s), z, t, s)
    assert np.max(np.abs(back - x) / np.maximum(np.abs(x), 1.0)) < 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_inv_ddim_matches_root_find(seed):
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.1, 1.0)
    s = rng.uniform(0.0, t - 0.05)
    z_t, z_s = rng.standard_normal(), rng.standard_normal()
    root = brentq(lambda x: ddim_step(SCHED, np.array([x]), np.array([z_t]), t, s)[0] - z_s, -1e3, 1e3, xtol=1e-14)
    assert inv_ddim(SCHED, np.array([z_s]), np.array([z_t]), t, s)[0] == pytest.approx(root, rel=1e-9, abs=1e-10)


def test_posterior_coefs_against_direct_formula():
    t, s = 0.7, 0.3
    a_t, s_t = math.cos(math.pi * t / 2), math.sin(math.pi * t / 2)
    a_s, s_s = math.cos(math.pi * s / 2), math.sin(math.pi * s / 2)
    a_ts = a_t / a_s
    v_ts = s_t**2 - a_ts**2 * s_s**2
    # standard DDPM form: mean = (a_ts s_s^2 / s_t^2) z + (a_s v_ts / s_t^2) x, var = v_ts s_s^2 / s_t^2
    w_z, w_x, std = posterior_coefs(SCHED, t, s)
    assert w_z == pytest.approx(a_ts * s_s**2 / s_t**2, rel=1e-12)
    assert w_x == pytest.approx(a_s * v_ts / s_t**2, rel=1e-12)
    assert std**2 == pytest.approx(v_ts * s_s**2 / s_t**2, rel=1e-12)


def test_ancestral_noise_zero_is_mean_and_variance():
    z, x = np.array([[0.5]]), np.array([[0.9]])
    w_z, w_x, std = posterior_coefs(SCHED, 0.6, 0.4)
    mean = ancestral_step(SCHED, x, z, 0.6, 0.4, np.zeros((1, 1)))
    assert mean[0, 0] == pytest.approx(w_z * 0.5 + w_x * 0.9, rel=1e-14)
    noise = np.random.default_rng(1).standard_normal((100_000, 1))
    draws = ancestral_step(SCHED, np.full_like(noise, 0.9), np.full_like(noise, 0.5), 0.6, 0.4, noise)
    assert draws.var() == pytest.approx(std**2, rel=0.02)


def test_ancestral_limit_and_errors():
    z, x = np.array([[0.5]]), np.array([[0.9]])
    near = ancestral_step(SCHED, x, z, 0.6, 0.6 - 1e-6, np.zeros((1, 1)))
    assert abs(near[0, 0] - 0.5) < 1e-4
    with pytest.raises(ValueError):
        ancestral_step(SCHED, x, z, 0.6, 0.0, np.zeros((1, 1)))
    with pytest.raises(ValueError):
        ancestral_step(SCHED, x, z, 0.6, 0.6, np.zeros((1, 1)))


def test_addim_zero_variance_is_ddim():
    rng = np.random.default_rng(2)
    x, z = rng.standard_normal((50, 2)), rng.standard_normal((50, 2))
    np.testing.assert_array_equal(addim_step(SCHED, x, z, 0.8, 0.3, 0.0), ddim_step(SCHED, x, z, 0.8, 0.3))


def test_addim_limit_near_t():
    rng = np.random.default_rng(3)
    x, z = rng.standard_normal((50, 2)), rng.standard_normal((50, 2))
    t = 0.5
    gap = addim_step(SCHED, x, z, t, t - 1e-6, 0.3) - ddim_step(SCHED, x, z, t, t - 1e-6)
    assert np.max(np.linalg.norm(gap, axis=1) / np.linalg.norm(z, axis=1)) < 1e-8


def test_addim_zero_eps_falls_back():
    alpha, sigma = SCHED.alpha_sigma(0.5)
    x = np.array([[0.8]])
    z = alpha * x
    np.testing.assert_array_equal(addim_step(SCHED, x, z, 0.5, 0.2, 0.1), ddim_step(SCHED, x, z, 0.5, 0.2))


def test_addim_inflates_norm_by_booked_variance():
    rng = np.random.default_rng(4)
    x, z = rng.standard_normal((20, 3)), rng.standard_normal((20, 3))
    t, s, x_var = 0.7, 0.4, 0.05
    alpha_t, sigma_t = SCHED.alpha_sigma(t)
    alpha_s, sigma_s = SCHED.alpha_sigma(s)
    eps = (z - alpha_t * x) / sigma_t
    coef = alpha_s - alpha_t * sigma_s / sigma_t
    out = addim_step(SCHED, x, z, t, s, x_var)
    noise_part = out - alpha_s * x
    # the eps-direction component carries sigma_s^2 ||eps||^2 + d z_var
    np.testing.assert_allclose((noise_part**2).sum(1), sigma_s**2 * (eps**2).sum(1) + 3 * coef**2 * x_var, rtol=1e-12)


def test_addim_norm_matches_perfect_sampler():
    spec = GmmSpec.two_modes(std=0.3, dim=4)
    oracle = GmmOracle(spec, SCHED)
    rng = np.random.default_rng(5)
    t, s = 0.6, 0.45
    x = spec.sample(100_000, rng)
    alpha_t, sigma_t = SCHED.alpha_sigma(t)
    _, sigma_s = SCHED.alpha_sigma(s)
    z = alpha_t * x + sigma_t * rng.standard_normal(x.shape)
    post = oracle.posterior(z, t)
    z_star = SCHED.x_coef(t, s) * post.sample(rng) + sigma_s / sigma_t * z
    z_a = addim_step(SCHED, post.mean, z, t, s, post.var_trace_per_dim)
    assert (z_a**2).sum(1).mean() == pytest.approx((z_star**2).sum(1).mean(), rel=0.02)


def test_noisy_ddim_reductions_and_norm():
    rng = np.random.default_rng(6)
    x, z = rng.standard_normal((10, 2)), rng.standard_normal((10, 2))
    noise = rng.standard_normal((10, 2))
    base = ddim_step(SCHED, x, z, 0.6, 0.2)
    np.testing.assert_array_equal(noisy_ddim_step(SCHED, x, z, 0.6, 0.2, 0.0, noise), base)
    np.testing.assert_array_equal(noisy_ddim_step(SCHED, x, z, 0.6, 0.2, 0.3, np.zeros_like(noise)), base)
    n, x_var = 200_000, 0.04
    xb, zb = np.full((n, 2), 0.5), np.full((n, 2), -0.3)
    out = noisy_ddim_step(SCHED, xb, zb, 0.6, 0.2, x_var, rng.standard_normal((n, 2)))
    excess = (out**2).sum(1).mean() - (ddim_step(SCHED, xb, zb, 0.6, 0.2) ** 2).sum(1).mean()
    assert excess == pytest.approx(SCHED.x_coef(0.6, 0.2) ** 2 * x_var * 2, rel=0.02)


def test_heun_constant_model_is_ddim():
    model = FunctionDenoiser.constant([0.3], SCHED, 1)
    z = np.random.default_rng(7).standard_normal((30, 1))
    np.testing.assert_array_equal(heun_step(SCHED, model, z, 0.8, 0.5), ddim_step(SCHED, np.full_like(z, 0.3), z, 0.8, 0.5))
    np.testing.assert_array_equal(heun_step(SCHED, model, z, 0.5, 0.5), z)


def test_heun_beats_ddim_on_karras_grid_at_16_steps():
    sched = NoiseSchedule("karras_sigma_ramp")
    oracle = GmmOracle(TWO, sched)
    z_1 = stream(0, 0).standard_normal((10_000, 1))
    ddim = teacher_sample(oracle, sched, 16, "ddim", z_1=z_1, record=False).final
    heun = teacher_sample(oracle, sched, 16, "heun", z_1=z_1, record=False).final
    assert w1_to_gmm(heun, TWO) <= w1_to_gmm(ddim, TWO)


def test_heun_second_order_convergence_on_cosine_grid():
    z_1 = stream(1, 0).standard_normal((2000, 1))
    ref = teacher_sample(ORACLE, SCHED, 4096, "ddim", z_1=z_1, record=False).final
    errs = {}
    for kind in ("ddim", "heun"):
        errs[kind] = [np.abs(teacher_sample(ORACLE, SCHED, n, kind, z_1=z_1, record=False).final - ref).mean() for n in (64, 128)]
    assert errs["heun"][1] < errs["ddim"][1]
    assert errs["heun"][0] / errs["heun"][1] > errs["ddim"][0] / errs["ddim"][1]


def test_multistep_one_step_and_many_step():
    z_1 = np.random.default_rng(8).standard_normal((100, 1))
    one = multistep_cm_sample(ORACLE, SCHED, SegmentGrid(1), z_1)
    assert one.steps == 1
    np.testing.assert_array_equal(one.final, ORACLE.predict(z_1, 1.0).x_hat)
    many = multistep_cm_sample(ORACLE, SCHED, SegmentGrid(512), z_1)
    teacher = teacher_sample(ORACLE, SCHED, 512, "ddim", z_1=z_1)
    assert many.n_evals == 512
    np.testing.assert_array_equal(many.final, teacher.final)
    assert many.times == teacher.times


def test_multistep_rejects_non_finite():
    with pytest.raises(ValueError):
        multistep_cm_sample(ORACLE, SCHED, SegmentGrid(2), np.array([[np.nan]]))


def test_teacher_sample_one_step_and_errors():
    run = teacher_sample(ORACLE, SCHED, 1, "ddim", n=50, seed=3)
    assert run.steps == 1 and run.n_evals == 1
    with pytest.raises(ValueError):
        teacher_sample(ORACLE, SCHED, 4, "euler")
    with pytest.raises(ValueError):
        teacher_sample(ORACLE, SCHED, 0, "ddim")


def test_addim_with_zero_source_equals_ddim():
    a = teacher_sample(ORACLE, SCHED, 16, "addim", x_var="zero", seed=1, n=500)
    b = teacher_sample(ORACLE, SCHED, 16, "ddim", seed=1, n=500)
    np.testing.assert_array_equal(a.final, b.final)


def test_stochastic_kernels_are_seed_reproducible():
    for kind in ("ancestral", "noisy_ddim", "addim"):
        a = teacher_sample(ORACLE, SCHED, 8, kind, x_var="analytic", seed=4, n=300)
        b = teacher_sample(ORACLE, SCHED, 8, kind, x_var="analytic", seed=4, n=300)
        assert a.final.tobytes() == b.final.tobytes()
    c = teacher_sample(ORACLE, SCHED, 8, "ancestral", seed=5, n=300)
    assert c.final.tobytes() != a.final.tobytes()


def test_full_blocks_are_reproduced_inside_larger_runs():
    one = teacher_sample(ORACLE, SCHED, 4, "ancestral", seed=2, n=BLOCK_SIZE, record=False)
    more = teacher_sample(ORACLE, SCHED, 4, "ancestral", seed=2, n=BLOCK_SIZE + 10, record=False)
    np.testing.assert_array_equal(one.final, more.final[:BLOCK_SIZE])


def test_ancestral_256_steps_close_to_mixture():
    run = teacher_sample(ORACLE, SCHED, 256, "ancestral", seed=0, n=10_000, record=False)
    assert w1_to_gmm(run.final, TWO) < 0.02


def test_ddim_grid_refinement():
    z_1 = stream(0, 0).standard_normal((10_000, 1))
    w1 = [w1_to_gmm(teacher_sample(ORACLE, SCHED, n, "ddim", z_1=z_1, record=False).final, TWO) for n in (8, 16, 32, 64)]
    assert all(b <= 1.1 * a for a, b in zip(w1, w1[1:]))


def test_addim_with_table_runs():
    times = SCHED.time_grid(16)[:-1]
    table = x_var_table(ORACLE, TWO, SCHED, times, 0.75, 2000, 0)
    run = teacher_sample(ORACLE, SCHED, 16, "addim", x_var=table, n=2000)
    assert np.all(np.isfinite(run.final))


def test_trajectory_csv(tmp_path):
    run = teacher_sample(ORACLE, SCHED, 16, "addim", x_var="analytic", seed=0, n=5)
    path = tmp_path / "traj.csv"
    run.write_csv(path, header_comment="mscm test")
    lines = path.read_text().splitlines()
    assert lines[0] == "# mscm test"
    rows = list(csv.DictReader(lines[1:]))
    assert list(rows[0]) == ["sampler", "seed", "step", "t", "dim0"]
    assert len(rows) == 5 * 16
    first = [r for r in rows[:16]]
    assert [int(r["step"]) for r in first] == list(range(1, 17))
    assert float(first[-1]["t"]) == 0.0
    assert float(first[-1]["dim0"]) == run.final[0, 0]


def test_final_only_csv_from_unrecorded_run(tmp_path):
    run = teacher_sample(ORACLE, SCHED, 4, "ddim", n=7, record=False)
    run.write_csv(tmp_path / "f.csv", final_only=True)
    assert len((tmp_path / "f.csv").read_text().splitlines()) == 8
    with pytest.raises(ValueError):
        run.write_csv(tmp_path / "g.csv")


@settings(max_examples=100, deadline=None)
@given(
    t=st.floats(0.01, 1.0),
    frac=st.floats(0.0, 0.99),
    x=st.floats(-5, 5),
    z=st.floats(-5, 5),
)
def test_inverse_pair_property(t, frac, x, z):
    s = t * frac
    z_s = ddim_step(SCHED, np.array([x]), np.array([z]), t, s)
    assert inv_ddim(SCHED, z_s, np.array([z]), t, s)[0] == pytest.approx(x, rel=1e-9, abs=1e-9)


def test_sample_run_records_are_copies():
    run = SampleRun("x", 0)
    z = np.zeros((2, 1))
    run.record(1.0, z)
    z += 1
    assert run.states[0][0, 0] == 0.0
