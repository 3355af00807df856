import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nofas import autodiff as ad
from nofas.autodiff import Tensor, tape
from nofas.models import (
    BoxTransform,
    DomainError,
    NoiseRecipe,
    closed_form_eval,
    get_model,
    latent_transform,
    make_observations,
)
from nofas.models.circuits import (
    DISTAL_PRESSURE_MMHG,
    MMHG,
    IntegrationError,
    RCCircuit,
    RCRCircuit,
    Waveform,
    load_waveform,
    rk4_integrate,
)
from nofas.models.sobol import (
    MIX,
    RIDGE_DIRECTION,
    SOBOL_Z_STAR,
    ridge_curve,
    ridge_interval,
    sobol_eval,
    sobol_eval_tensor,
    sobol_g,
    sobol_ridge,
)

from oracles import central_diff


@pytest.fixture(scope="module")
def waveform():
    return load_waveform()


# --- closed form ----------------------------------------------------------------

def test_closed_form_true_output():
    x = closed_form_eval([3.0, 5.0])
    np.testing.assert_allclose(x, [7.99, -2.59], atol=5e-3)
    np.testing.assert_allclose(x, [2.7 + np.exp(5 / 3), 2.7 - np.exp(5 / 3)], rtol=1e-15)


def test_closed_form_small_cases():
    np.testing.assert_allclose(closed_form_eval([0.0, 0.0]), [1.0, -1.0])
    np.testing.assert_allclose(closed_form_eval([1.0, 3.0]), [0.1 + np.e, 0.1 - np.e], rtol=1e-14)
    np.testing.assert_allclose(closed_form_eval([1.0, 3.0]), [2.8183, -2.6183], atol=1e-4)


@pytest.mark.parametrize("name", ["closed_form", "sobol"])
def test_tensor_models_match_numpy_and_differentiate(name):
    model = get_model(name)
    rng = np.random.default_rng(4)
    z = rng.uniform(-1, 3, size=(6, model.dim))
    weights = rng.normal(size=(6, model.out_dim))
    leaf = Tensor(z, requires_grad=True)
    with tape():
        out = model.evaluate_tensor(leaf)
        root = (out * weights).sum()
    np.testing.assert_allclose(out.data, model.evaluate(z), rtol=1e-14)
    grad = ad.backward(root)[leaf].data
    num = central_diff(lambda v: float(np.sum(model.evaluate(v) * weights)), z)
    np.testing.assert_allclose(grad, num, rtol=1e-6, atol=1e-8)


def test_circuit_models_are_not_differentiable():
    with pytest.raises(TypeError):
        get_model("rc").evaluate_tensor(Tensor(np.zeros((1, 2))))


def test_unknown_model_rejected():
    with pytest.raises(ValueError, match="unknown model"):
        get_model("rlc")


# --- observations ------------------------------------------------------------------

def test_zero_noise_recipe_repeats_truth():
    obs = make_observations([1.0, -2.0], NoiseRecipe(0.0), 7, seed=0)
    np.testing.assert_array_equal(obs, np.tile([1.0, -2.0], (7, 1)))


def test_closed_form_noise_level():
    x_star = closed_form_eval([3.0, 5.0])
    obs = make_observations(x_star, "closed_form", 50, seed=11)
    ratio = obs.std(axis=0, ddof=1) / (0.05 * np.abs(x_star))
    assert np.all((ratio > 0.7) & (ratio < 1.3))


def test_rcr_recipe_matches_stated_covariance():
    x_star = np.array([100.96, 148.02, 116.50])
    std = get_model("rcr").recipe.std(x_star)
    np.testing.assert_allclose(std, [5.05, 7.40, 5.83], atol=6e-3)
    obs = make_observations(x_star, "rcr", 200, seed=5)
    assert np.all(np.abs(obs.mean(axis=0) - x_star) < 3 * std / np.sqrt(200))


def test_observations_deterministic_and_validated():
    a = make_observations([1.0, 2.0], "rc", 5, seed=3)
    b = make_observations([1.0, 2.0], "rc", 5, seed=3)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError, match="unknown noise recipe"):
        make_observations([1.0], "lognormal", 5)
    with pytest.raises(ValueError):
        make_observations([1.0], "rc", 0)


# --- RK4 ------------------------------------------------------------------------------

def test_rk4_zero_rhs_is_constant():
    t, y = rk4_integrate(lambda t, y: np.zeros_like(y), [1.5, -2.0], 0.0, 1.0, 0.1)
    np.testing.assert_array_equal(y, np.tile([1.5, -2.0], (len(t), 1)))


def test_rk4_single_step_is_quartic_taylor():
    h = 0.3
    _, y = rk4_integrate(lambda t, y: y, 1.0, 0.0, h, h)
    assert y[-1] == pytest.approx(1 + h + h**2 / 2 + h**3 / 6 + h**4 / 24, rel=1e-15)


def test_rk4_fourth_order_convergence():
    errs = []
    for dt in (0.1, 0.05, 0.025):
        _, y = rk4_integrate(lambda t, y: y, 1.0, 0.0, 1.0, dt)
        errs.append(abs(y[-1] - np.e))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios > 14) & (ratios < 18))


def test_rk4_last_step_lands_on_end_time():
    t, y = rk4_integrate(lambda t, y: np.ones_like(y), 0.0, 0.0, 1.0, 0.3)
    np.testing.assert_allclose(t, [0.0, 0.3, 0.6, 0.9, 1.0])
    assert y[-1] == pytest.approx(1.0, rel=1e-14)


def test_rk4_errors():
    with pytest.raises(ValueError):
        rk4_integrate(lambda t, y: y, 1.0, 0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        rk4_integrate(lambda t, y: y, 1.0, 1.0, 0.5, 0.1)
    with pytest.raises(IntegrationError, match="t="), np.errstate(over="ignore"):
        rk4_integrate(lambda t, y: y * y, 1.0, 0.0, 5.0, 0.1)


# --- waveform -----------------------------------------------------------------------------

def test_bundled_waveform_shape(waveform):
    assert waveform.period == pytest.approx(1.07)
    assert np.all(np.diff(waveform.times) > 0)
    t = np.linspace(0, 1.07, 37)
    np.testing.assert_allclose(waveform(t + 1.07), waveform(t), rtol=1e-12)
    np.testing.assert_allclose(waveform(t + 5 * 1.07), waveform(t), rtol=1e-12)


def test_waveform_csv_header_required(tmp_path):
    p = tmp_path / "w.csv"
    p.write_text("t,q\n0,1\n1,1\n")
    with pytest.raises(ValueError, match="header"):
        load_waveform(p)
    p.write_text("time_s,flow_ml_s\n0,1\n0.5,3\n1,1\n")
    w = load_waveform(p)
    assert w.period == 1.0 and w.mean_flow() == pytest.approx(2.0, rel=1e-3)


def test_waveform_rejects_unsorted_times():
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, 0.5, 0.4]), np.ones(3), 1.0)


# --- circuits -----------------------------------------------------------------------------

def _lattice(*axes):
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


R_AXIS = np.linspace(100, 1500, 5)
C_AXIS = np.geomspace(1e-5, 1e-2, 5)


def test_rc_mean_pressure_identity(waveform):
    params = _lattice(R_AXIS, C_AXIS)
    out = RCCircuit(waveform)(params)
    lhs = (out[:, 2] - DISTAL_PRESSURE_MMHG) * MMHG
    rhs = params[:, 0] * waveform.mean_flow()
    np.testing.assert_allclose(lhs, rhs, rtol=5e-3)


def test_rcr_mean_pressure_identity(waveform):
    params = _lattice(R_AXIS, R_AXIS, C_AXIS)
    out = RCRCircuit(waveform)(params)
    lhs = (out[:, 2] - DISTAL_PRESSURE_MMHG) * MMHG
    rhs = (params[:, 0] + params[:, 1]) * waveform.mean_flow()
    np.testing.assert_allclose(lhs, rhs, rtol=5e-3)


def test_rcr_swap_resistances_keeps_mean(waveform):
    out = RCRCircuit(waveform)([[300.0, 1200.0, 1e-4], [1200.0, 300.0, 1e-4]])
    assert out[0, 2] == pytest.approx(out[1, 2], rel=5e-3)
    assert abs(out[0, 1] - out[1, 1]) > 1.0


def test_large_capacitance_flattens_pulse(waveform):
    out = RCCircuit(waveform)([[1000.0, 1e-5], [1000.0, 1e-2]])
    pulse = out[:, 1] - out[:, 0]
    assert pulse[1] < 0.05 * pulse[0]
    assert pulse[1] < 0.5


def test_true_parameters_give_plausible_pressures():
    # the bundled waveform is a stand-in, so only closeness to the reference triplets is checked
    np.testing.assert_allclose(get_model("rc").x_star, [78.28, 101.12, 85.75], atol=0.5)
    np.testing.assert_allclose(get_model("rcr").x_star, [100.96, 148.02, 116.50], atol=0.5)


def test_circuit_bounds_enforced(waveform):
    with pytest.raises(ValueError, match="R outside"):
        RCCircuit(waveform)([[50.0, 1e-4]])
    with pytest.raises(ValueError, match="C outside"):
        RCRCircuit(waveform)([[500.0, 500.0, 0.1]])


def test_circuit_evaluation_deterministic(waveform):
    p = [[700.0, 2e-4], [1400.0, 3e-3]]
    a = RCCircuit(waveform)(p)
    b = RCCircuit(waveform)(p)
    assert a.tobytes() == b.tobytes()


# --- sobol ----------------------------------------------------------------------------------

def test_sobol_true_output():
    np.testing.assert_allclose(sobol_eval(SOBOL_Z_STAR), [1.4910, 1.6650, 1.8715, 1.7011], atol=2e-3)


def test_sobol_g_at_unit_ratio():
    assert sobol_g(np.ones(5))[0] == pytest.approx(1.332, abs=1e-12)


def test_sobol_saturates_for_large_inputs():
    np.testing.assert_allclose(sobol_eval(np.full(5, 40.0)), MIX @ np.ones(5), rtol=1e-12)


def test_ridge_direction_spans_null_space():
    np.testing.assert_allclose(MIX @ RIDGE_DIRECTION, 0.0, atol=1e-15)


def test_ridge_interval_matches_reference_bounds():
    lo, hi = ridge_interval()
    assert lo == pytest.approx(-0.0153, abs=1e-3)
    assert hi == pytest.approx(0.0686, abs=1e-3)


def test_ridge_is_a_level_set():
    lo, hi = ridge_interval()
    t = np.linspace(lo, hi, 102)[1:-1]
    z = sobol_ridge(t)
    assert np.max(np.abs(sobol_eval(z) - sobol_eval(SOBOL_Z_STAR))) < 1e-10
    np.testing.assert_allclose(sobol_ridge(0.0), SOBOL_Z_STAR, atol=1e-12)


def test_ridge_rejects_inadmissible_t():
    lo, hi = ridge_interval()
    with pytest.raises(ValueError):
        sobol_ridge(hi + 1e-3)
    with pytest.raises(ValueError):
        sobol_ridge(lo)


def test_ridge_curve_by_second_coordinate():
    z2 = np.linspace(-8, 8, 33)
    pts = ridge_curve(z2)
    np.testing.assert_allclose(pts[:, 1], z2, atol=1e-9)
    assert np.max(np.abs(sobol_eval(pts) - sobol_eval(SOBOL_Z_STAR))) < 1e-10


# --- latent transform -------------------------------------------------------------------------

def test_latent_center_and_ends():
    rc = get_model("rc")
    np.testing.assert_allclose(latent_transform(rc, [0.0, 0.0]), [800.0, np.sqrt(1e-5 * 1e-2)])
    np.testing.assert_allclose(rc.to_physical([[-3.0, -3.0], [3.0, 3.0]]), [[100.0, 1e-5], [1500.0, 1e-2]])


def test_latent_clamps_then_fails():
    rc = get_model("rc")
    np.testing.assert_allclose(rc.to_physical([4.0, -4.5]), [1500.0, 1e-5])
    with pytest.raises(DomainError):
        rc.to_physical([5.5, 0.0])


def test_identity_transforms():
    z = np.array([[1.0, -7.0]])
    np.testing.assert_array_equal(get_model("closed_form").to_physical(z), z)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_latent_round_trip(u):
    tr = get_model("rcr").transform
    u = np.array(u)
    np.testing.assert_allclose(tr.to_latent(tr.to_physical(u)), u, atol=1e-12)


def test_true_parameters_inside_latent_box():
    for name in ("closed_form", "rc", "rcr", "sobol"):
        m = get_model(name)
        assert np.all((m.z_star > m.box[:, 0]) & (m.z_star < m.box[:, 1]))


def test_box_transform_linear_coordinates():
    tr = BoxTransform((0.0,), (6.0,), (False,))
    np.testing.assert_allclose(tr.to_physical([[-3.0], [0.0], [1.5]]), [[0.0], [3.0], [4.5]])
