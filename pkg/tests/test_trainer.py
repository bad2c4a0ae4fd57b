import dataclasses
import itertools
import math

import numpy as np
import pytest

import stylerl.trainer as trainer_mod
from stylerl.agent import AgentParams
from stylerl.container import read_container, write_container
from stylerl.errors import ContractError, FormatError, NumericError, ParameterError
from stylerl.objectives import style_loss
from stylerl.tensor import Tensor
from stylerl.trainer import (
    LOG_FIELDS,
    TrainConfig,
    Trainer,
    derive_rng,
    generate_sequence,
    load_agent,
    train,
)

FAST = TrainConfig(image_size=16, warmup=2, replay_batch=2, horizon=3, pool_capacity=20,
                   total_env_steps=8, checkpoint_interval=0)


def counting_clock():
    ticks = itertools.count()
    return lambda: float(next(ticks))


def make_trainer(corpus, cfg=FAST, **kw):
    contents, styles = corpus
    return Trainer(cfg, contents, styles, clock=counting_clock(), **kw)


def arrays_equal(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.env_batch, cfg.replay_batch) == (2e-4, 1, 8)
    assert (cfg.gamma, cfg.omega, cfg.horizon, cfg.pool_capacity, cfg.warmup) == (0.9, 0.005, 10, 5000, 64)
    assert cfg.target_entropy == -0.5 * 16 * 16 * 16


@pytest.mark.parametrize("field,value", [("learning_rate", 0.0), ("replay_batch", 1), ("image_size", 10)])
def test_invalid_config_rejected(field, value):
    with pytest.raises(ParameterError):
        dataclasses.replace(FAST, **{field: value}).validate()


def test_dataset_preconditions(small_corpus):
    contents, styles = small_corpus
    with pytest.raises(ContractError):
        Trainer(FAST, [], styles)
    with pytest.raises(ContractError):
        Trainer(FAST, contents, styles[:1])


def test_zero_steps_returns_initial_params(small_corpus):
    cfg = dataclasses.replace(FAST, total_env_steps=0)
    agent, log = train(cfg, *small_corpus)
    assert len(log) == 0
    init = AgentParams.initialize(int(derive_rng(cfg.seed, "init").integers(2**31)), cfg.init_alpha)
    assert arrays_equal(agent.named_arrays(), init.named_arrays())


@pytest.fixture(scope="module")
def ran(small_corpus):
    tr = make_trainer(small_corpus)
    tr.run()
    return tr


def test_one_control_and_one_generative_round_per_warm_step(ran):
    warm_steps = FAST.total_env_steps - (FAST.warmup - 1)
    assert ran.control_rounds == ran.generative_rounds == len(ran.log) == warm_steps


def test_actor_receives_two_updates_per_iteration(ran):
    rounds = ran.control_rounds
    assert ran.actor_opt.t == ran.gen_opt.t == ran.critic_opt.t == ran.alpha_opt.t == rounds
    # the shared encoder and deep style space are moved by both the policy and the generative step
    for name in ("enc_in.weight", "enc_down2.weight", "res1.conv1.weight", "deep_style.weight"):
        assert ran.actor_opt.updates[name] == rounds
        assert ran.gen_opt.updates[f"actor.{name}"] == rounds
    # stored actions are replayed in the generative step, so the action head only gets the policy step
    assert ran.actor_opt.updates["head.weight"] == rounds
    assert ran.gen_opt.updates["actor.head.weight"] == 0
    # everything else is owned by exactly one optimizer
    critic_ids = {id(p) for p in ran.agent.critic.parameters()}
    builder_ids = {id(p) for p in ran.agent.builder.parameters()}
    actor_opt_ids = {id(p) for _, p in ran.actor_opt.params}
    gen_ids = {id(p) for _, p in ran.gen_opt.params}
    assert not critic_ids & (actor_opt_ids | gen_ids)
    assert builder_ids <= gen_ids and not builder_ids & actor_opt_ids
    assert all(ran.gen_opt.updates[f"builder.{n}"] == rounds for n, _ in ran.agent.builder.named_parameters())


def test_lambda_snapshot_is_exp_minus_s(ran):
    last = ran.log.records[-1]
    s = ran.agent.weights.s.data
    assert last["lambda_c"] == pytest.approx(math.exp(-s[0]), rel=1e-6)
    assert last["lambda_s"] == pytest.approx(math.exp(-s[1]), rel=1e-6)
    assert last["lambda_ct"] == pytest.approx(math.exp(-s[2]), rel=1e-6)


def test_log_records_monotone_and_complete(ran):
    updates = ran.log.column("update")
    assert np.all(np.diff(updates) > 0)
    assert np.all(np.diff(ran.log.column("step")) > 0)
    for rec in ran.log.records:
        assert set(LOG_FIELDS) <= set(rec)
        assert all(math.isfinite(rec[k]) for k in LOG_FIELDS)
        assert rec["l_co"] >= 0 and rec["l_st"] >= 0 and rec["l_ct"] >= 0


def test_episode_trajectory_contract(small_corpus):
    tr = make_trainer(small_corpus)
    for _ in range(FAST.horizon):
        tr.step()
    ep = tr.episode
    assert ep.finished and len(ep.trajectory) == FAST.horizon + 1
    assert any(np.array_equal(ep.trajectory[0].data, c.data) for c in tr.contents)
    assert ep.trajectory[0] is ep.content
    dones = [t.done for t in tr.pool]
    assert dones == [False] * (FAST.horizon - 1) + [True]
    assert all(t.next_state.style is t.state.style for t in tr.pool)


def test_rewards_are_negative_style_losses(small_corpus):
    tr = make_trainer(small_corpus)
    tr.step()
    t = tr.pool.records[0]
    assert t.reward == pytest.approx(-style_loss(tr.backbone, t.next_state.moving, t.state.style).item(), rel=1e-6)


def test_resume_reproduces_unbroken_log(small_corpus, tmp_path):
    full = make_trainer(small_corpus)
    full.run()
    half = make_trainer(small_corpus)
    half.run(steps=5)
    path = tmp_path / "mid.ckpt"
    half.save(path)
    resumed = make_trainer(small_corpus)
    resumed.load(path)
    resumed.run()
    assert resumed.log.records == full.log.records
    assert resumed.log.episode_rewards == full.log.episode_rewards
    assert arrays_equal(resumed.named_arrays(), full.named_arrays())


def test_checkpoint_roundtrip_bit_identical(ran, tmp_path):
    path = tmp_path / "final.ckpt"
    ran.save(path, with_state=False)
    agent = load_agent(path)
    assert arrays_equal(agent.named_arrays(), ran.agent.named_arrays())
    stored = read_container(path)
    assert {"log_alpha", "uncertainty.s"} <= stored.keys()
    assert any(k.startswith("target_critic.") for k in stored)


def test_checkpoint_mismatch_names_array(ran, tmp_path):
    path = tmp_path / "bad.ckpt"
    arrays = ran.agent.named_arrays()
    arrays["critic.c1.weight"] = np.zeros((2, 2), dtype=np.float32)
    write_container(path, arrays)
    with pytest.raises(FormatError, match="critic.c1.weight"):
        load_agent(path)


def test_non_finite_loss_aborts_with_last_good_checkpoint(small_corpus, tmp_path, monkeypatch):
    real_env_step = trainer_mod.env_step

    def poisoned(*args, **kw):
        action, _, nxt = real_env_step(*args, **kw)
        return action, float("nan"), nxt

    monkeypatch.setattr(trainer_mod, "env_step", poisoned)
    with pytest.raises(NumericError):
        train(FAST, *small_corpus, clock=counting_clock(), out_dir=tmp_path)
    saved = load_agent(tmp_path / "last_good.ckpt")
    fresh = make_trainer(small_corpus)
    # the first update aborted before any optimizer step, so the initial parameters are retained
    assert arrays_equal(saved.named_arrays(), fresh.agent.named_arrays())


def test_train_writes_outputs(small_corpus, tmp_path):
    cfg = dataclasses.replace(FAST, total_env_steps=4, checkpoint_interval=2)
    train(cfg, *small_corpus, clock=counting_clock(), out_dir=tmp_path)
    assert (tmp_path / "final.ckpt").is_file()
    assert (tmp_path / "step_000002.ckpt").is_file() and (tmp_path / "step_000004.ckpt").is_file()
    lines = (tmp_path / "train_log.csv").read_text().splitlines()
    assert lines[0].split(",") == list(LOG_FIELDS)
    assert len(lines) == 1 + 3


def test_train_creates_missing_output_directory(small_corpus, tmp_path):
    out = tmp_path / "nested" / "run"
    train(dataclasses.replace(FAST, total_env_steps=2), *small_corpus, clock=counting_clock(), out_dir=out)
    assert (out / "train_log.csv").is_file() and (out / "final.ckpt").is_file()


def test_generate_sequence_contract(ran, small_corpus):
    content, style = small_corpus[0][0], small_corpus[1][0]
    seq = generate_sequence(ran.agent, content, style, 3)
    assert len(seq) == 3
    assert all(img.shape == (1, 3, 16, 16) and img.data.min() >= 0 and img.data.max() <= 1 for img in seq)
    again = generate_sequence(ran.agent, content, style, 3)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(seq, again))
    with pytest.raises(ParameterError):
        generate_sequence(ran.agent, content, style, 0)


def test_generate_sequence_rejects_indivisible(ran):
    img = np.zeros((3, 10, 10), dtype=np.float32)
    from stylerl.errors import DimensionError

    with pytest.raises(DimensionError):
        generate_sequence(ran.agent, img, img, 1)


def test_style_target_cache_matches_direct(ran):
    style = ran.styles[0]
    cached = ran.style_targets(style)
    assert ran.style_targets(Tensor(style.data.copy())) is cached
