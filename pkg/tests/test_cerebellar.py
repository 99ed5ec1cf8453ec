import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from neuromotor import autodiff as ad
from neuromotor.cerebellar import (
    CerebellarModule,
    FilmModulator,
    GruEstimator,
    HistoryNotWarm,
    ReflexArc,
    ReflexConfig,
    StateHistory,
    StateVector,
    estimate_context,
    film,
    modulate,
    refine,
    reflex_check,
)
from neuromotor.plant import N_JOINTS, STATE_DIM


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def randomise(params, rng, scale=0.5):
    for p in params.values():
        p.value[...] = rng.normal(0, scale, p.shape)


def wrench_history(fx_values, window=20):
    hist = StateHistory(horizon=2, wrench_capacity=window + 1)
    hist.push(np.zeros(STATE_DIM))
    for fx in fx_values:
        hist.wrench.append(np.array([fx, 0, 0, 0, 0, 0], dtype=float))
    return hist


# ------------------------------------------------------------------ GRU


def test_zero_history_zero_context():
    gru = GruEstimator(d_in=4, d_hidden=3)
    assert not gru.fold(gru.input_projection(ad.constant(np.zeros((5, 4))))).value.any()


def test_scalar_gru_hand_evaluation():
    gru = GruEstimator(d_in=1, d_hidden=1)
    gru.params["gru.w_x"].value[...] = [[0.5, -0.3, 0.8]]  # z, r, candidate
    gru.params["gru.u_zr"].value[...] = [[0.2, 0.7]]
    gru.params["gru.u_c"].value[...] = [[-0.4]]
    gru.params["gru.b"].value[...] = [0.1, 0.0, -0.2]
    x1, x2 = 1.5, -0.7
    # first sample, zero initial state
    z = sig(0.5 * x1 + 0.1)
    h1 = z * math.tanh(0.8 * x1 - 0.2)
    got1 = gru.fold(gru.input_projection(ad.constant([[x1]]))).value[0]
    assert got1 == pytest.approx(h1, rel=1e-12)
    # second sample exercises the reset gate
    z = sig(0.5 * x2 + 0.1 + 0.2 * h1)
    r = sig(-0.3 * x2 + 0.7 * h1)
    c = math.tanh(0.8 * x2 - 0.2 + (r * h1) * -0.4)
    h2 = (1 - z) * h1 + z * c
    got2 = gru.fold(gru.input_projection(ad.constant([[x1], [x2]]))).value[0]
    assert got2 == pytest.approx(h2, rel=1e-12)


def test_history_order_matters():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        gru = GruEstimator(d_in=5, d_hidden=4, seed=seed)
        x = rng.normal(size=(6, 5))
        a = gru.fold(gru.input_projection(ad.constant(x))).value
        b = gru.fold(gru.input_projection(ad.constant(x[rng.permutation(6)[::-1].copy()]))).value
        if not np.array_equal(x, x[::-1]):
            assert not np.allclose(a, b)


def test_cold_history():
    cereb = CerebellarModule(K=2, D=4, d_hidden=8)
    hist = StateHistory(horizon=3)
    hist.push(np.zeros(STATE_DIM))
    with pytest.raises(HistoryNotWarm):
        estimate_context(cereb, hist)


def test_history_ring_buffer_order():
    hist = StateHistory(horizon=3)
    for k in range(5):
        hist.push(np.full(STATE_DIM, float(k)))
    assert hist.window()[:, 0].tolist() == [2.0, 3.0, 4.0]
    with pytest.raises(ad.DimensionError):
        hist.push(np.zeros(3))


def test_state_vector_contract():
    with pytest.raises(ValueError):
        StateVector(np.zeros(2), np.zeros(2), np.zeros(6), 1.5)
    v = StateVector(np.zeros(2), np.ones(2), np.arange(6.0), 0.5).as_array()
    assert v.shape == (11,) and v[-1] == 0.5


# ------------------------------------------------------------------ FiLM


def test_film_hand_example():
    assert film([2.0, 4.0], [0.5, 0.5], [1.0, 0.0], [1.0, -1.0]).value.tolist() == [3.0, 1.0]


def test_film_suppression():
    z = np.random.default_rng(0).normal(size=(3, 4))
    beta = np.array([0.1, -0.2, 0.3, 0.0])
    out = film(z, np.full(4, 0.7), np.full(4, -1.0), beta)
    np.testing.assert_array_equal(out.value, np.tile(beta, (3, 1)))


def test_film_identity():
    z = np.random.default_rng(1).normal(size=(2, 5))
    np.testing.assert_array_equal(film(z, np.ones(5), np.zeros(5), np.zeros(5)).value, z)


def test_safe_start_identity():
    mod = FilmModulator(d_hidden=6, D=4, gate_mode="open")
    z = np.random.default_rng(2).normal(size=(3, 4))
    h = ad.constant(np.random.default_rng(3).normal(size=6))
    np.testing.assert_array_equal(modulate(mod, z, h).value, z)


def test_scalar_gate_shape():
    mod = FilmModulator(d_hidden=6, D=4, gate_mode="scalar")
    assert mod.gate(ad.constant(np.ones(6))).shape == (1,)
    with pytest.raises(ad.ContractError):
        FilmModulator(gate_mode="vector")


def test_modulate_width_mismatch():
    with pytest.raises(ad.DimensionError):
        modulate(FilmModulator(d_hidden=6, D=4), np.ones((2, 5)), ad.constant(np.ones(6)))


@given(arrays(np.float64, (3, 6), elements=st.floats(-1e6, 1e6)), st.integers(0, 1000))
def test_gate_bounded(h, seed):
    mod = FilmModulator(d_hidden=6, D=4, seed=seed)
    randomise(mod.params, np.random.default_rng(seed), scale=3.0)
    g = mod.gate(ad.constant(h)).value
    assert ((g > 0) & (g < 1)).all()


# ---------------------------------------------------------------- refine


def _module_and_inputs(seed, randomised=True):
    cereb = CerebellarModule(K=2, D=4, d_hidden=8, proj_dim=4, seed=seed)
    rng = np.random.default_rng(seed)
    if randomised:
        randomise(cereb.params, rng, 0.3)
    window = ad.constant(rng.normal(size=(5, STATE_DIM)))
    z_sem = rng.normal(size=(2, 4))
    return cereb, window, z_sem


def test_refine_single_cycle_is_modulate():
    cereb, window, z = _module_and_inputs(0)
    ident = lambda h, zm, last: last  # noqa: E731
    got = refine(cereb, z, window, K=1, forward_model=ident).z_mod.value
    want = modulate(cereb.film, z, estimate_context(cereb, window)).value
    np.testing.assert_array_equal(got, want)


def test_refine_zero_heads_fixed_point():
    cereb, window, z = _module_and_inputs(1, randomised=False)
    cereb.gru.params["gru.w_x"].value[...] = np.random.default_rng(1).normal(size=cereb.gru.params["gru.w_x"].shape)
    k1 = refine(cereb, z, window, K=1).z_mod.value
    k2 = refine(cereb, z, window, K=2).z_mod.value
    np.testing.assert_array_equal(k1, k2)


def test_refine_cycles_change_output():
    for seed in range(10):
        cereb, window, z = _module_and_inputs(seed)
        k1 = refine(cereb, z, window, K=1).z_mod.value
        res = refine(cereb, z, window, K=2)
        assert not np.allclose(k1, res.z_mod.value)
        assert res.predicted_state.shape == (STATE_DIM,)


def test_refine_needs_a_cycle():
    cereb, window, z = _module_and_inputs(0)
    with pytest.raises(ad.ContractError):
        refine(cereb, z, window, K=0)


def test_refine_batched():
    cereb, _, _ = _module_and_inputs(3)
    rng = np.random.default_rng(3)
    windows, zs = rng.normal(size=(4, 5, STATE_DIM)), rng.normal(size=(4, 2, 4))
    batched = refine(cereb, zs, ad.constant(windows)).z_mod.value
    for i in range(4):
        np.testing.assert_allclose(batched[i], refine(cereb, zs[i], ad.constant(windows[i])).z_mod.value, rtol=1e-12)


def test_increment_encoding_rest_is_zero():
    cereb = CerebellarModule(K=2, D=4, d_hidden=8, window_encoding="increment")
    window = np.tile(np.r_[np.full(STATE_DIM - 1, 0.3), 1.0], (4, 1))
    window[:, N_JOINTS : 2 * N_JOINTS + 6] = 0.0  # velocities and wrench at rest
    assert not cereb.normalise(window).any()


# ---------------------------------------------------------------- reflex


def test_reflex_quiet_on_constant_wrench():
    assert reflex_check(wrench_history([-3.0] * 21)) is None


def test_reflex_collision_example():
    cmd = reflex_check(wrench_history([0.0] * 20 + [-37.02]))
    assert cmd is not None
    # the measured force is the wall's push on the arm, so retraction follows it
    np.testing.assert_allclose(cmd[:3], [-0.01, 0, 0])
    assert not cmd[3:6].any()


def test_reflex_threshold_arithmetic():
    cfg = ReflexConfig(zscore_k=4.0, floor=0.5)
    past = [1.0, -1.0] * 10  # mean 0, population std 1
    assert reflex_check(wrench_history(past + [3.9]), cfg) is None
    assert reflex_check(wrench_history(past + [4.6]), cfg) is not None


def test_reflex_keeps_gripper_aperture():
    hist = wrench_history([0.0] * 20 + [30.0])
    hist.states[-1][-1] = 0.25
    assert reflex_check(hist)[6] == 0.25


def test_reflex_config_contract():
    for kw in ({"zscore_k": 0.0}, {"retraction_ticks": 0}):
        with pytest.raises(ad.ContractError):
            ReflexConfig(**kw)


def test_reflex_arc_holds_for_retraction_ticks():
    arc = ReflexArc(ReflexConfig(retraction_ticks=3))
    hist = wrench_history([0.0] * 20 + [30.0])
    cmds = [arc(hist, new_samples=n) for n in (1, 0, 0, 0)]
    assert [c is not None for c in cmds] == [True, True, True, False]


def test_reflex_arc_scans_every_new_sample():
    # a spike in the middle of a burst must not be masked by later samples
    arc = ReflexArc()
    hist = wrench_history([0.0] * 20 + [30.0] + [30.0] * 4, window=30)
    assert arc(hist, new_samples=5) is not None
