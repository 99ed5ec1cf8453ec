import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from neuromotor import autodiff as ad
from neuromotor.lif import LifConfig
from neuromotor.spinal import (
    ACTION_SIZE,
    ActivityTrace,
    StepActivity,
    SpinalNet,
    dominant_dims,
    firing_rate_report,
    neuron_kinematic_map,
    spinal_forward,
)


def dyadic_net(seed, d_in=6, n_hidden=5, n_blocks=2):
    """Network whose weights are multiples of 1/8 so float sums are exact."""
    net = SpinalNet(d_in=d_in, n_hidden=n_hidden, n_blocks=n_blocks, seed=seed)
    rng = np.random.default_rng(seed)
    for p in net.params.values():
        p.value[...] = rng.integers(-8, 9, p.shape) / 8.0
    return net


def scalar_spinal(net, z_steps, beta, theta, T):
    """Neuron-by-neuron reference forward of the stateful residual decoder."""
    P = {k: v.value.tolist() for k, v in net.params.items()}
    H, L = net.n_hidden, net.n_layers
    u = [[0.0] * H for _ in range(L)]
    s = [[0.0] * H for _ in range(L)]
    actions = []
    for z in z_steps:
        flat = [x for row in z for x in row]
        cur = [sum(flat[i] * P["spinal.w_in"][i][j] for i in range(net.d_in)) for j in range(H)]
        out = [0.0] * ACTION_SIZE
        for _ in range(T):
            drives = [cur]
            x = None
            for layer in range(L):
                if layer > 0:
                    w, b = P[f"spinal.block{layer - 1}.w"], P[f"spinal.block{layer - 1}.b"]
                    drives.append([sum(x[i] * w[i][j] for i in range(H)) + b[j] for j in range(H)])
                for j in range(H):
                    u[layer][j] = u[layer][j] * beta + drives[layer][j] - s[layer][j] * theta
                    s[layer][j] = 1.0 if u[layer][j] >= theta else 0.0
                x = list(s[layer]) if layer == 0 else [x[j] + s[layer][j] for j in range(H)]
            for k in range(ACTION_SIZE):
                out[k] = out[k] + sum(x[i] * P["spinal.w_out"][i][k] for i in range(H))
        actions.append([out[k] / T + P["spinal.b_out"][k] for k in range(ACTION_SIZE)])
    return actions


def test_zero_weights_silence():
    net = SpinalNet(d_in=8, n_hidden=6)
    for p in net.params.values():
        p.value[...] = 0.0
    a, act = spinal_forward(net, np.ones((2, 4)), LifConfig())
    assert not a.value.any() and not act.spikes.any()


def test_residual_identity_with_zero_block():
    net = SpinalNet(d_in=4, n_hidden=6, n_blocks=1, seed=3)
    net.params["spinal.block0.w"].value[...] = 0.0
    z = np.random.default_rng(0).normal(size=(2, 2)) * 3
    a, act = spinal_forward(net, z, LifConfig())
    assert not act.spikes[1].any()
    first = act.spikes[0].sum(axis=0)  # [n] spikes of the projection path
    want = first @ net.params["spinal.w_out"].value / 4 + net.params["spinal.b_out"].value
    np.testing.assert_allclose(a.value, want)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_matches_scalar_oracle_exactly(seed):
    net = dyadic_net(seed)
    rng = np.random.default_rng(100 + seed)
    zs = [rng.integers(-16, 17, (2, 3)) / 8.0 for _ in range(4)]
    cfg = LifConfig(beta=0.5, theta=1.0, window=4)
    got = [spinal_forward(net, z, cfg)[0].value.tolist() for z in zs]
    assert got == scalar_spinal(net, zs, 0.5, 1.0, 4)


def test_dimension_contract():
    with pytest.raises(ad.ContractError):
        spinal_forward(SpinalNet(d_in=8, n_hidden=4), np.ones((3, 3)), LifConfig())
    with pytest.raises(ad.ContractError):
        SpinalNet(readout="max")


def test_mean_readout_averages_integrator():
    net = SpinalNet(d_in=4, n_hidden=6, readout="mean", seed=1)
    a, act = spinal_forward(net, np.ones((2, 2)) * 2, LifConfig(window=2))
    x = act.spikes.sum(axis=0)  # residual stream [T, n]
    w = net.params["spinal.w_out"].value
    u1, u2 = x[0] @ w, x[0] @ w + x[1] @ w
    np.testing.assert_allclose(a.value, (u1 + u2) / 2 / 2)


def test_batched_forward_matches_single():
    z = np.random.default_rng(0).normal(size=(3, 2, 4))
    net_b, net_s = SpinalNet(d_in=8, n_hidden=6, seed=5), SpinalNet(d_in=8, n_hidden=6, seed=5)
    ab, _ = spinal_forward(net_b, z, LifConfig())
    for i in range(3):
        net_s.reset()
        a, _ = spinal_forward(net_s, z[i], LifConfig())
        np.testing.assert_allclose(ab.value[i], a.value)


def _trace(spike_blocks):
    tr = ActivityTrace()
    for sp in spike_blocks:
        sp = np.asarray(sp, dtype=float)
        tr.append(StepActivity(sp, np.zeros((sp.shape[1], 1)), np.zeros(ACTION_SIZE)))
    return tr


def _rate_block(rate, layers=1, T=10, n=4):
    sp = np.zeros((layers, T, n))
    sp[:, : int(round(rate * T)), :] = 1.0
    return sp


def test_firing_rate_report_zero_trace():
    rep = firing_rate_report(_trace([_rate_block(0.0)] * 2), ["static_hold", "dynamic"])
    assert all(v == 0.0 for v in rep.selectivity.values())
    assert rep.layer_means["dynamic"].tolist() == [0.0]


def test_firing_rate_selectivity_example():
    tr = _trace([_rate_block(0.4), _rate_block(0.1), _rate_block(0.4)])
    rep = firing_rate_report(tr, ["dynamic", "static_hold", "dynamic"])
    assert rep.selectivity["layer0"] == pytest.approx(0.6)


def test_firing_rate_phase_means():
    blocks = [_rate_block(r, layers=2) for r in (0.2, 0.6, 0.3, 0.5)]
    rep = firing_rate_report(_trace(blocks), ["a", "b", "a", "b"])
    np.testing.assert_allclose(rep.layer_means["a"], [0.25, 0.25])
    np.testing.assert_allclose(rep.layer_means["b"], [0.55, 0.55])
    with pytest.raises(ad.ContractError):
        firing_rate_report(_trace(blocks), ["a"])


def test_kinematic_map_fixture():
    actions = np.zeros((6, ACTION_SIZE))
    actions[[0, 2, 4], 6] = 1.0  # gripper steps
    actions[[1, 3, 5], 0] = 0.5  # translation steps
    blocks = []
    for t in range(6):
        sp = np.zeros((1, 4, 3))
        if t % 2 == 0:
            sp[0, :, 0] = 1.0
        else:
            sp[0, :, 1] = 1.0
        blocks.append(sp)
    km = neuron_kinematic_map(_trace(blocks), actions)
    assert km.rates[6].tolist() == [1.0, 0.0, 0.0]
    assert km.rates[0].tolist() == [0.0, 1.0, 0.0]
    assert km.defined.tolist() == [True, False, False, False, False, False, True]
    assert km.rows()[0] == [0, 0, 0.0]


def test_kinematic_map_degenerate():
    km = neuron_kinematic_map(_trace([_rate_block(0.5)] * 3), np.zeros((3, ACTION_SIZE)))
    assert not km.defined.any() and np.isfinite(km.rates).all()
    with pytest.raises(ad.ContractError):
        neuron_kinematic_map(ActivityTrace(), [])


def test_dominance_argmax():
    step = np.zeros(ACTION_SIZE)
    step[2] = 1.0
    assert dominant_dims([step]).tolist() == [2]


@given(st.integers(0, 10_000), st.integers(2, 6))
def test_integrator_is_smoother_than_raw_readout(seed, T):
    rng = np.random.default_rng(seed)
    net = SpinalNet(d_in=8, n_hidden=16, seed=seed)
    actions, raw = [], []
    for _ in range(12):
        a, act = spinal_forward(net, rng.normal(0, 2, (2, 4)), LifConfig(window=T))
        actions.append(a.value)
        raw.append(act.readout_raw)
    d_act = np.abs(np.diff(actions, axis=0)).mean()
    d_raw = np.abs(np.diff(raw, axis=0)).mean()
    if d_raw > 0:
        assert d_act < d_raw


def test_temporal_memory():
    cfg = LifConfig()
    memory = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        z_prev_a, z_prev_b, z_now = rng.normal(0, 1, (3, 2, 4))
        outs, outs_reset = [], []
        for z_prev in (z_prev_a, z_prev_b):
            net = SpinalNet(d_in=8, n_hidden=16, seed=seed)
            spinal_forward(net, z_prev, cfg)
            outs.append(spinal_forward(net, z_now, cfg)[0].value)
            net = SpinalNet(d_in=8, n_hidden=16, seed=seed)
            spinal_forward(net, z_prev, cfg)
            net.reset()
            outs_reset.append(spinal_forward(net, z_now, cfg)[0].value)
        memory += not np.array_equal(outs[0], outs[1])
        np.testing.assert_array_equal(outs_reset[0], outs_reset[1])
    assert memory >= 1


def test_trace_rates_in_unit_interval():
    net = SpinalNet(d_in=8, n_hidden=16, seed=0)
    tr = ActivityTrace()
    rng = np.random.default_rng(0)
    for _ in range(5):
        tr.append(spinal_forward(net, rng.normal(0, 3, (2, 4)), LifConfig())[1])
    assert tr.layer_rates.shape == (5, 3)
    assert ((tr.layer_rates >= 0) & (tr.layer_rates <= 1)).all()
    assert len(tr.rows()) == 15
