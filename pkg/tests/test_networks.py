import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import stylerl.networks as networks
from stylerl.agent import AgentParams
from stylerl.errors import DimensionError, FormatError, ParameterError
from stylerl.networks import (
    ACTION_BOUND,
    Actor,
    Builder,
    Critic,
    State,
    StyleSignals,
    actor_forward,
    builder_forward,
    count_params,
    critic_forward,
    ema_update,
    make_target,
    policy_mode,
    squashed_gaussian_log_prob,
)
from stylerl.nn import Conv2d, Linear, Module
from stylerl.tensor import GradientTape, Tensor, channel_stats, precision


@pytest.fixture(scope="module")
def nets():
    rng = np.random.default_rng(0)
    return Actor(rng), Builder(rng), Critic(rng)


@pytest.fixture
def state(rng):
    return State(Tensor(rng.uniform(size=(1, 3, 16, 16))), Tensor(rng.uniform(size=(1, 3, 16, 16))))


def test_count_params_examples():
    rng = np.random.default_rng(0)
    assert count_params(Linear(10, 5, rng)) == (55, 220)
    assert count_params(Conv2d(16, 32, 3, rng)) == (4640, 4 * 4640)


def test_actor_builder_budget(nets):
    actor, builder, _ = nets
    count, nbytes = count_params(actor.parameters() + builder.parameters())
    assert count <= 500_000
    assert nbytes == 4 * count


def test_actor_output_shapes(nets, state):
    actor = nets[0]
    out = actor_forward(actor, state, rng=np.random.default_rng(1))
    assert out.mean.shape == out.log_std.shape == out.action.shape == (1, 16, 4, 4)
    assert out.log_prob.shape == (1,)
    assert out.signals.shallow_mean.shape == (1, 32)
    assert out.signals.deep_std.shape == (1, 64)
    assert (out.signals.shallow_std.data >= 0).all() and (out.signals.deep_std.data >= 0).all()
    assert (out.log_std.data >= -10).all() and (out.log_std.data <= 2).all()


def test_actor_rejects_indivisible_size(nets):
    s = State(Tensor(np.zeros((1, 3, 10, 10))), Tensor(np.zeros((1, 3, 10, 10))))
    with pytest.raises(DimensionError):
        actor_forward(nets[0], s)


def test_state_requires_matching_sizes():
    with pytest.raises(DimensionError):
        State(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((1, 3, 12, 12))))


def test_zero_noise_gives_tanh_mean(nets, state):
    out = actor_forward(nets[0], state, noise=np.zeros((1, 16, 4, 4)))
    np.testing.assert_allclose(out.action.data, np.tanh(out.mean.data), rtol=1e-6)


def test_same_state_same_noise_identical(nets, state):
    noise = np.random.default_rng(2).standard_normal((1, 16, 4, 4))
    a = actor_forward(nets[0], state, noise=noise)
    b = actor_forward(nets[0], state, noise=noise)
    for name in ("mean", "log_std", "action", "log_prob"):
        assert np.array_equal(getattr(a, name).data, getattr(b, name).data)


def test_noise_shape_mismatch(nets, state):
    with pytest.raises(DimensionError):
        actor_forward(nets[0], state, noise=np.zeros((1, 16, 2, 2)))


def test_encoder_weights_shared_between_images(nets, state):
    """The moving and style paths read the very same parameter tensors."""
    actor = nets[0]
    out = actor_forward(actor, state, rng=np.random.default_rng(0))
    tape = GradientTape(out.log_prob.sum() + out.signals.deep_mean.sum())
    enc_weight = actor.enc_in.weight
    conv_inputs = [n for n in tape.nodes if n.op == "conv2d" and n._parents[1] is enc_weight]
    assert len(conv_inputs) == 2
    moving_src, style_src = conv_inputs[0]._parents[0], conv_inputs[1]._parents[0]
    assert {id(moving_src), id(style_src)} == {id(state.moving), id(state.style)}
    assert conv_inputs[0]._parents[1] is conv_inputs[1]._parents[1]


def test_log_prob_standard_normal_at_mode():
    with precision(np.float64):
        z = Tensor(np.zeros((1, 1)))
        _, lp = squashed_gaussian_log_prob(z, z, np.zeros((1, 1)))
    half_log_2pi = 0.5 * math.log(2 * math.pi)
    # the squash correction keeps its 1e-6 guard even at tanh(0) = 0
    assert lp.item() == pytest.approx(-half_log_2pi - math.log1p(1e-6), rel=1e-12)
    assert lp.item() == pytest.approx(-half_log_2pi, abs=1e-5)


@given(seed=st.integers(0, 2**31 - 1))
def test_log_prob_matches_density_formula(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        mean = rng.normal(0, 2, size=(1, 2, 3, 3))
        log_std = rng.uniform(-10, 2, size=mean.shape)
        noise = rng.standard_normal(mean.shape)
        action, lp = squashed_gaussian_log_prob(Tensor(mean), Tensor(log_std), noise)
    pre = mean + np.exp(log_std) * noise
    std = np.exp(log_std)
    gauss = -0.5 * ((pre - mean) / std) ** 2 - np.log(std) - 0.5 * np.log(2 * np.pi)
    expect = np.sum(gauss - np.log(1 - action.data ** 2 + 1e-6))
    assert lp.item() == pytest.approx(expect, abs=1e-5)
    assert (np.abs(action.data) < 1).all()


def test_builder_output_range_and_determinism(nets, state):
    actor, builder, _ = nets
    out = actor_forward(actor, state, rng=np.random.default_rng(0))
    img = builder_forward(builder, out.content_features, out.action, out.signals)
    again = builder_forward(builder, out.content_features, out.action, out.signals)
    assert img.shape == (1, 3, 16, 16)
    assert (img.data >= 0).all() and (img.data <= 1).all()
    assert np.array_equal(img.data, again.data)


def test_builder_signal_width_mismatch(nets, state):
    actor, builder, _ = nets
    out = actor_forward(actor, state, rng=np.random.default_rng(0))
    out.signals.deep_mean = out.signals.shallow_mean  # 32 wide, stage expects 64
    with pytest.raises(DimensionError):
        builder_forward(builder, out.content_features, out.action, out.signals)


def test_critic_scalar_per_sample_and_grads(nets, state):
    critic = nets[2]
    action = Tensor(np.zeros((1, 16, 4, 4)), requires_grad=True)
    q = critic_forward(critic, state, action)
    assert q.shape == (1,)
    assert np.array_equal(q.data, critic_forward(critic, state, action).data)
    critic.zero_grad()
    q.sum().backward()
    assert action.grad is not None
    assert all(p.grad is not None for p in critic.parameters())
    assert state.moving.grad is None and state.style.grad is None
    critic.zero_grad()


def test_critic_action_shape_mismatch(nets, state):
    with pytest.raises(DimensionError):
        critic_forward(nets[2], state, Tensor(np.zeros((1, 16, 8, 8))))


def test_target_starts_equal_and_frozen(nets):
    critic = nets[2]
    target = make_target(critic)
    for (n1, p), (n2, t) in zip(critic.named_parameters(), target.named_parameters()):
        assert n1 == n2 and np.array_equal(p.data, t.data) and p is not t
        assert not t.requires_grad


class _Pair(Module):
    def __init__(self, value):
        self.w = Tensor(np.full((3,), value, dtype=np.float64), dtype=np.float64)


def test_ema_examples():
    src, tgt = _Pair(2.0), _Pair(0.0)
    ema_update(src, tgt, 0.5)
    np.testing.assert_array_equal(tgt.w.data, [1.0, 1.0, 1.0])
    before = tgt.w.data.copy()
    ema_update(src, tgt, 0.0)
    assert np.array_equal(tgt.w.data, before)
    ema_update(src, tgt, 1.0)
    assert np.array_equal(tgt.w.data, src.w.data)


@pytest.mark.parametrize("omega", [-0.1, 1.5])
def test_ema_rejects_out_of_range(omega):
    with pytest.raises(ParameterError):
        ema_update(_Pair(1.0), _Pair(0.0), omega)


@given(omega=st.sampled_from([0.0, 0.005, 0.25, 0.5, 0.9, 1.0]), seed=st.integers(0, 1000))
def test_ema_contracts_by_one_minus_omega(omega, seed):
    rng = np.random.default_rng(seed)
    src, tgt = _Pair(0.0), _Pair(0.0)
    src.w.data = rng.normal(size=3)
    tgt.w.data = rng.normal(size=3)
    before = np.abs(tgt.w.data - src.w.data)
    ema_update(src, tgt, omega)
    after = np.abs(tgt.w.data - src.w.data)
    np.testing.assert_allclose(after, (1 - omega) * before, rtol=1e-12, atol=1e-15)


def test_policy_mode_is_deterministic(nets, state):
    a = policy_mode(nets[0], state)
    b = policy_mode(nets[0], state)
    assert np.array_equal(a.action.data, b.action.data)
    assert not np.any(a.noise)
    assert not a.action.requires_grad


def test_agent_arrays_roundtrip():
    a = AgentParams.initialize(3)
    b = AgentParams.initialize(4)
    b.load_arrays(a.named_arrays())
    for k, v in a.named_arrays().items():
        assert np.array_equal(v, b.named_arrays()[k]), k
    assert a.alpha == pytest.approx(0.01)


def test_agent_load_missing_key():
    arrays = AgentParams.initialize(0).named_arrays()
    del arrays["builder.out.weight"]
    with pytest.raises(FormatError, match="builder.out.weight"):
        AgentParams.initialize(0).load_arrays(arrays)


def test_sampled_actions_strictly_bounded(nets, state):
    rng = np.random.default_rng(5)
    out = actor_forward(nets[0], state, noise=rng.standard_normal((1, 16, 4, 4)) * 50)
    assert (np.abs(out.action.data) <= ACTION_BOUND).all()


def test_repeated_styles_match_per_sample_encoding(monkeypatch):
    rng = np.random.default_rng(8)
    with precision(np.float64):
        actor = Actor(np.random.default_rng(1))
        for p in actor.parameters():
            p.data = p.data.astype(np.float64)
        styles = rng.uniform(size=(2, 3, 16, 16))
        state = State(Tensor(rng.uniform(size=(5, 3, 16, 16))), Tensor(styles[[0, 1, 0, 0, 1]]))
        noise = rng.standard_normal((5, 16, 4, 4))

        def run():
            actor.zero_grad()
            out = actor_forward(actor, state, noise=noise)
            (out.log_prob.sum() + out.action.sum() + out.signals.shallow_std.sum()).backward()
            return out.log_prob.data.copy(), {n: p.grad.copy() for n, p in actor.named_parameters()}

        shared_lp, shared_grads = run()
        def per_sample(actor, style):
            s_feat, d_feat = actor.style_spaces(*actor.encode(style))
            sm, ss = channel_stats(s_feat)
            dm, ds = channel_stats(d_feat)
            return d_feat, StyleSignals(sm, ss, dm, ds)

        monkeypatch.setattr(networks, "style_branch", per_sample)
        direct_lp, direct_grads = run()
    np.testing.assert_allclose(shared_lp, direct_lp, rtol=1e-12)
    for name, grad in direct_grads.items():
        np.testing.assert_allclose(shared_grads[name], grad, rtol=1e-9, atol=1e-14, err_msg=name)
