import numpy as np
import pytest

from tsdlab.adapters import (
    DashTerm,
    AdapterState,
    ab_delta,
    current_delta,
    dash_delta,
    effective_delta,
    enter_dash_phase,
    load_state,
    lora_random_init,
    make_dash_term,
    merged_weight,
    new_state,
    parameters,
    save_state,
    tsd_init_split,
)
from tsdlab.errors import InvalidArgument, InvalidState
from tsdlab.spectral import change_rates, svd, top_k


@pytest.fixture
def weight():
    return np.random.default_rng(42).standard_normal((6, 8))


def test_lora_random_init(weight):
    core = lora_random_init(6, 8, 3, alpha=3.0, seed=1)
    assert core.a.shape == (6, 3)
    assert core.b.shape == (3, 8)
    assert np.all(core.b == 0)
    assert np.all(np.abs(core.a) <= np.sqrt(6.0 / 6))
    np.testing.assert_array_equal(core.a, lora_random_init(6, 8, 3, 3.0, seed=1).a)
    assert core.scaling == 1.0


@pytest.mark.parametrize("r", [0, 7])
def test_lora_rank_range(r):
    with pytest.raises(InvalidArgument):
        lora_random_init(6, 8, r, alpha=1.0, seed=0)


def test_fresh_states_leave_w_unchanged(weight):
    for method in ("lora", "dash", "tsd", "init"):
        state = new_state(method, weight, rank=2, seed=3)
        np.testing.assert_array_equal(merged_weight(state), weight)
        assert np.all(current_delta(state) == 0)


def test_phase_of_new_states(weight):
    assert new_state("lora", weight, 2).phase == "dash"
    assert new_state("dash", weight, 2).phase == "prelaunch"
    assert new_state("tsd", weight, 2).phase == "prelaunch"
    assert new_state("init", weight, 2).phase == "prelaunch"
    f = svd(weight)
    assert new_state("init", weight, 2, f=f, init_indices=[0, 1]).phase == "dash"


def test_state_invariants(weight):
    core = lora_random_init(6, 8, 2, 2.0, 0)
    f = svd(weight)
    dash = make_dash_term(f, [0, 1])
    with pytest.raises(InvalidState):
        AdapterState("lora", weight, core, dash=dash)
    with pytest.raises(InvalidState):
        AdapterState("dash", weight, core, dash=dash, phase="prelaunch")
    with pytest.raises(InvalidState):
        AdapterState("tsd", weight, core, dash=None, phase="dash")
    with pytest.raises(InvalidArgument):
        AdapterState("vera", weight, core)


def test_effective_delta_composition(weight):
    f = svd(weight)
    rng = np.random.default_rng(0)
    core = lora_random_init(6, 8, 2, alpha=4.0, seed=0)
    core.b[:] = rng.standard_normal(core.b.shape)
    dash = make_dash_term(f, [1, 3])
    dash.dsigma[:] = [0.5, -0.25]
    state = AdapterState("dash", weight, core, dash=dash, phase="dash")

    expected_ab = 2.0 * core.a @ core.b
    expected_dash = 0.5 * f.core_basis(1) - 0.25 * f.core_basis(3)
    np.testing.assert_allclose(ab_delta(state), expected_ab, atol=1e-12)
    np.testing.assert_allclose(dash_delta(state), expected_dash, atol=1e-12)
    np.testing.assert_allclose(effective_delta(state), expected_ab + expected_dash, atol=1e-12)
    np.testing.assert_allclose(merged_weight(state), weight + expected_ab + expected_dash, atol=1e-12)


def test_dash_moves_only_its_coordinates(weight):
    f = svd(weight)
    dash = make_dash_term(f, [2])
    dash.dsigma[:] = [0.7]
    core = lora_random_init(6, 8, 1, 1.0, 0)
    state = AdapterState("dash", weight, core, dash=dash, phase="dash")
    cr = change_rates(f, current_delta(state))
    assert cr.delta[2] == pytest.approx(0.7 / (f.sigma[2] + 1e-6), rel=1e-10)
    assert np.all(np.delete(cr.delta, 2) < 1e-12)


def test_tsd_init_split_reconstructs(weight):
    f = svd(weight)
    for idx in ([0], [5, 2], [1, 3, 4]):
        split = tsd_init_split(weight, f, idx)
        rebuilt = split.w_res + split.a0 @ split.b0
        assert np.linalg.norm(rebuilt - weight) <= 1e-10 * np.linalg.norm(weight)
        expected = sum(f.sigma[i] * f.core_basis(i) for i in idx)
        np.testing.assert_allclose(split.a0 @ split.b0, expected, atol=1e-12)


@pytest.mark.parametrize("idx", [[], [1, 1], [6]])
def test_tsd_init_split_rejects_bad_indices(weight, idx):
    with pytest.raises(InvalidArgument):
        tsd_init_split(weight, svd(weight), idx)


def test_init_merged_equals_w_at_step_zero(weight):
    f = svd(weight)
    state = new_state("init", weight, 3, f=f, init_indices=[0, 2, 4])
    assert np.linalg.norm(merged_weight(state) - weight) <= 1e-10 * np.linalg.norm(weight)
    assert state.init_indices == [0, 2, 4]
    np.testing.assert_array_equal(state.pretrained, weight)


def test_enter_dash_phase_keeps_merged_weight_for_dash(weight):
    f = svd(weight)
    state = new_state("dash", weight, 2, seed=1)
    state.core.b[:] = np.random.default_rng(2).standard_normal(state.core.b.shape)
    before = merged_weight(state)
    cr = change_rates(f, current_delta(state))
    after = enter_dash_phase(state, f, cr, s_count=3)
    assert after.phase == "dash"
    assert after.dash.indices == top_k(cr, 3)
    assert np.all(after.dash.dsigma == 0)
    np.testing.assert_array_equal(merged_weight(after), before)
    assert state.phase == "prelaunch"


def test_enter_dash_phase_for_tsd_discards_prelaunch_update(weight):
    f = svd(weight)
    state = new_state("tsd", weight, 2, seed=1)
    state.core.b[:] = np.random.default_rng(3).standard_normal(state.core.b.shape)
    cr = change_rates(f, current_delta(state))
    after = enter_dash_phase(state, f, cr, s_count=4)
    assert after.init_indices == top_k(cr, 2)
    assert after.dash.indices == top_k(cr, 4)
    assert np.linalg.norm(merged_weight(after) - weight) <= 1e-10 * np.linalg.norm(weight)


def test_enter_dash_phase_with_explicit_indices(weight):
    f = svd(weight)
    state = new_state("tsd", weight, 2)
    cr = change_rates(f, current_delta(state))
    after = enter_dash_phase(state, f, cr, 2, dash_indices=[5, 4], init_indices=[0, 1])
    assert after.dash.indices == [5, 4]
    assert after.init_indices == [0, 1]


def test_pending_init_split_at_phase_switch(weight):
    f = svd(weight)
    state = new_state("init", weight, 2)
    cr = change_rates(f, current_delta(state))
    after = enter_dash_phase(state, f, cr)
    assert after.dash is None
    assert after.init_indices == [0, 1]


def test_enter_dash_phase_errors(weight):
    f = svd(weight)
    lora = new_state("lora", weight, 2)
    cr = change_rates(f, current_delta(lora))
    with pytest.raises(InvalidState):
        enter_dash_phase(lora, f, cr)
    dash = new_state("dash", weight, 2)
    with pytest.raises(InvalidArgument):
        enter_dash_phase(dash, f, cr, s_count=0)
    with pytest.raises(InvalidArgument):
        enter_dash_phase(dash, f, cr, s_count=7)
    launched = enter_dash_phase(dash, f, cr, s_count=2)
    with pytest.raises(InvalidState):
        enter_dash_phase(launched, f, cr)


def test_parameters_exclude_frozen_arrays(weight):
    f = svd(weight)
    state = new_state("dash", weight, 2)
    assert set(parameters(state)) == {"a", "b"}
    launched = enter_dash_phase(state, f, change_rates(f, current_delta(state)), 2)
    params = parameters(launched)
    assert set(params) == {"a", "b", "dsigma"}
    assert params["dsigma"] is launched.dash.dsigma
    assert not launched.base.flags.writeable
    assert not launched.dash.u_bar.flags.writeable
    assert not launched.dash.v_bar.flags.writeable


def test_copy_is_independent(weight):
    f = svd(weight)
    state = new_state("dash", weight, 2)
    launched = enter_dash_phase(state, f, change_rates(f, current_delta(state)), 2)
    clone = launched.copy()
    clone.core.a[0, 0] += 1.0
    clone.dash.dsigma[0] += 1.0
    assert launched.core.a[0, 0] != clone.core.a[0, 0]
    assert launched.dash.dsigma[0] == 0.0


@pytest.mark.parametrize("method", ["lora", "dash", "init", "tsd"])
def test_state_directory_round_trip(tmp_path, weight, method):
    f = svd(weight)
    state = new_state(method, weight, 2, alpha=3.0, seed=5)
    rng = np.random.default_rng(6)
    state.core.b[:] = rng.standard_normal(state.core.b.shape)
    if method != "lora":
        state = enter_dash_phase(state, f, change_rates(f, current_delta(state)), 3)
    if state.dash is not None:
        state.dash.dsigma[:] = rng.standard_normal(3)

    save_state(state, str(tmp_path / "state"))
    loaded = load_state(str(tmp_path / "state"))
    assert loaded.method == state.method
    assert loaded.phase == state.phase
    assert loaded.init_indices == state.init_indices
    assert loaded.core.alpha == 3.0
    np.testing.assert_array_equal(merged_weight(loaded), merged_weight(state))
    np.testing.assert_array_equal(loaded.pretrained, state.pretrained)
    if state.dash is not None:
        assert loaded.dash.indices == state.dash.indices
        np.testing.assert_array_equal(loaded.dash.dsigma, state.dash.dsigma)
    assert (tmp_path / "state" / "pretrained.tsdw").exists() == (method in ("init", "tsd"))


def test_dash_term_copy_shares_frozen_directions(weight):
    term = make_dash_term(svd(weight), [0, 1])
    clone = term.copy()
    assert isinstance(clone, DashTerm)
    assert clone.u_bar is term.u_bar
    assert clone.dsigma is not term.dsigma


def _delta_along(state, name, value):
    params = {"a": state.core.a, "b": state.core.b}
    if state.dash is not None:
        params["dsigma"] = state.dash.dsigma
    params[name][...] = value
    return effective_delta(state)


@pytest.mark.parametrize("name", ["a", "b", "dsigma"])
def test_effective_delta_is_linear_in_each_parameter(weight, name):
    f = svd(weight)
    rng = np.random.default_rng(7)
    core = lora_random_init(6, 8, 2, alpha=3.0, seed=1)
    core.b[:] = rng.standard_normal(core.b.shape)
    dash = make_dash_term(f, [0, 2, 5])
    dash.dsigma[:] = rng.standard_normal(3)
    state = AdapterState("dash", weight, core, dash=dash, phase="dash")
    shape = {"a": core.a.shape, "b": core.b.shape, "dsigma": dash.dsigma.shape}[name]

    zero = _delta_along(state, name, np.zeros(shape))
    for _ in range(20):
        p, q = rng.standard_normal(shape), rng.standard_normal(shape)
        x, y = rng.standard_normal(2)
        combined = _delta_along(state, name, x * p + y * q) - zero
        separate = x * (_delta_along(state, name, p) - zero) + y * (_delta_along(state, name, q) - zero)
        np.testing.assert_allclose(combined, separate, atol=1e-12 * max(1.0, np.linalg.norm(separate)))
