"""Joint training loop: control learning then generative learning per warm env step."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
import pickle
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .agent import AgentParams
from .container import read_container, write_container
from .control import (
    Episode,
    ReplayPool,
    Transition,
    actor_update,
    alpha_update,
    critic_update,
    env_step,
    pool_sample,
    stack_states,
)
from .errors import ContractError, FormatError, NumericError, ParameterError
from .features import FeatureBackbone, load_backbone
from .networks import ACTION_CHANNELS, State, builder_forward, ema_update, policy_mode, style_branch, _check_divisible
from .objectives import contrastive_loss, final_loss, perceptual_losses, stack_targets, style_targets
from .optim import Adam
from .tensor import Tensor, concat, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    env_batch: int = 1
    replay_batch: int = 8
    total_env_steps: int = 2000
    horizon: int = 10
    gamma: float = 0.9
    omega: float = 0.005
    seed: int = 0
    image_size: int = 64
    content_dir: str = ""
    style_dir: str = ""
    checkpoint_interval: int = 500
    pool_capacity: int = 5000
    warmup: int = 64
    init_alpha: float = 0.01
    target_entropy_scale: float = 0.5
    backbone: str = "seed:0"

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be > 0")
        if self.replay_batch < 2:
            raise ParameterError("replay_batch must be >= 2 (contrastive loss needs negatives)")
        if self.env_batch != 1:
            raise ParameterError("only env_batch = 1 is supported")
        if self.horizon < 1 or self.total_env_steps < 0:
            raise ParameterError("horizon must be >= 1 and total_env_steps >= 0")
        if self.image_size % 4 or self.image_size < 8:
            raise ParameterError("image_size must be a multiple of 4 and >= 8")
        if not 0.0 <= self.omega <= 1.0:
            raise ParameterError("omega must lie in [0, 1]")
        if self.warmup < self.replay_batch:
            raise ParameterError("warmup must be >= replay_batch")
        if self.pool_capacity < self.warmup:
            raise ParameterError("pool_capacity must be >= warmup")
        if not self.init_alpha > 0:
            raise ParameterError("init_alpha must be > 0")

    @property
    def target_entropy(self) -> float:
        side = self.image_size // 4
        return -self.target_entropy_scale * ACTION_CHANNELS * side * side


LOG_FIELDS = (
    "step", "update", "j_q", "j_p", "l_co", "l_st", "l_ct", "l_final",
    "alpha", "lambda_c", "lambda_s", "lambda_ct", "reward", "wall_time",
)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    episode_rewards: list[float] = field(default_factory=list)

    def append(self, record: dict) -> None:
        if self.records and record["update"] <= self.records[-1]["update"]:
            raise ContractError("log records must have increasing update indices")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_FIELDS)
            for r in self.records:
                w.writerow([_fmt(r[k]) for k in LOG_FIELDS])

    def write_episodes(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("episode", "reward"))
            for i, r in enumerate(self.episode_rewards):
                w.writerow((i, _fmt(r)))


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def derive_rng(seed: int, label: str) -> np.random.Generator:
    """Independent stream per subsystem, keyed by a fixed label."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(label.encode())]))


def _image_tensor(img: np.ndarray | Tensor) -> Tensor:
    if isinstance(img, Tensor):
        data = img.data
    else:
        data = np.asarray(img, dtype=np.float32)
    if data.ndim == 3:
        data = data[None]
    return Tensor(data)


class Trainer:
    """Owns parameters, optimizers, replay pool and RNG streams for one run."""

    def __init__(
        self,
        config: TrainConfig,
        contents: Sequence[np.ndarray],
        styles: Sequence[np.ndarray],
        backbone: FeatureBackbone | None = None,
        clock: Callable[[], float] = time.perf_counter,
    ):
        config.validate()
        if len(contents) < 1:
            raise ContractError("content set is empty")
        if len(styles) < 2:
            raise ContractError("style set needs at least 2 images (contrastive negatives)")
        self.config = config
        self.contents = [_image_tensor(c) for c in contents]
        self.styles = [_image_tensor(s) for s in styles]
        for img in self.contents + self.styles:
            _check_divisible(img)
        self.backbone = backbone if backbone is not None else backbone_from_spec(config.backbone)
        self.clock = clock
        seed = config.seed
        self.agent = AgentParams.initialize(int(derive_rng(seed, "init").integers(2**31)), config.init_alpha)
        self.rngs = {label: derive_rng(seed, label) for label in ("episode", "policy", "replay", "update")}
        lr = config.learning_rate
        a = self.agent
        self.critic_opt = Adam(a.critic.named_parameters(), lr)
        self.actor_opt = Adam(a.actor.named_parameters(), lr)
        self.alpha_opt = Adam([("log_alpha", a.log_alpha)], lr)
        self.gen_opt = Adam(
            [(f"actor.{n}", p) for n, p in a.actor.named_parameters()]
            + [(f"builder.{n}", p) for n, p in a.builder.named_parameters()]
            + [("uncertainty.s", a.weights.s)],
            lr,
        )
        self.pool = ReplayPool(config.pool_capacity)
        self.log = TrainLog()
        self.episode: Episode | None = None
        self.episode_reward = 0.0
        self.env_steps = 0
        self.control_rounds = 0
        self.generative_rounds = 0
        self.elapsed = 0.0
        self._target_cache: dict[bytes, list] = {}

    def style_targets(self, style: Tensor) -> list:
        """Backbone statistics of one style image; cached since the backbone is frozen."""
        key = style.data.tobytes()
        if key not in self._target_cache:
            self._target_cache[key] = style_targets(self.backbone, style)
        return self._target_cache[key]

    # -- episodes ---------------------------------------------------------------

    def _start_episode(self) -> None:
        rng = self.rngs["episode"]
        c = self.contents[int(rng.integers(len(self.contents)))]
        s = self.styles[int(rng.integers(len(self.styles)))]
        self.episode = Episode(c, s, self.config.horizon)
        self.episode_reward = 0.0

    # -- update rounds ------------------------------------------------------------

    def control_round(self, batch: list[Transition]) -> dict:
        cfg, a = self.config, self.agent
        rng = self.rngs["update"]
        alpha = a.alpha
        j_q = critic_update(a, batch, cfg.gamma, alpha, self.critic_opt, rng)
        j_p, log_prob = actor_update(a, [tr.state for tr in batch], alpha, self.actor_opt, rng)
        new_alpha = alpha_update(a, log_prob, cfg.target_entropy, self.alpha_opt)
        ema_update(a.critic, a.target_critic, cfg.omega)
        self.control_rounds += 1
        return {"j_q": j_q, "j_p": j_p, "alpha": new_alpha}

    def generative_round(self, batch: list[Transition]) -> dict:
        a = self.agent
        state = stack_states([tr.state for tr in batch])
        action = Tensor(np.concatenate([tr.action.data for tr in batch]))
        targets = stack_targets([self.style_targets(tr.state.style) for tr in batch])
        parts = generative_losses(a, self.backbone, state, action, targets)
        br = final_loss(a.weights, *parts)
        self.gen_opt.zero_grad()
        br.weighted_total.backward()
        self.gen_opt.step()
        a.builder.zero_grad()
        self.generative_rounds += 1
        lam = a.weights.lambdas()
        return {
            "l_co": br.content, "l_st": br.style, "l_ct": br.contrastive, "l_final": br.total,
            "lambda_c": lam[0], "lambda_s": lam[1], "lambda_ct": lam[2],
        }

    # -- main loop ------------------------------------------------------------------

    def step(self) -> None:
        """One environment step, followed by one update of each kind once warm."""
        cfg = self.config
        t0 = self.clock()
        if self.episode is None or self.episode.finished:
            self._start_episode()
        ep = self.episode
        state = ep.state()
        action, r, next_state = env_step(self.agent, self.backbone, state, self.rngs["policy"],
                                          self.style_targets(state.style))
        done = ep.t + 1 == ep.horizon
        self.pool.push(Transition(state, action, r, next_state, done))
        ep.trajectory.append(next_state.moving)
        self.episode_reward += r
        if done:
            self.log.episode_rewards.append(self.episode_reward)
        self.env_steps += 1
        if len(self.pool) >= cfg.warmup:
            batch = pool_sample(self.pool, cfg.replay_batch, self.rngs["replay"])
            record = {"step": self.env_steps, "update": self.control_rounds + 1, "reward": r}
            record.update(self.control_round(batch))
            record.update(self.generative_round(batch))
            for key in ("j_q", "j_p", "l_final"):
                if not math.isfinite(record[key]):
                    raise NumericError(f"{key} became non-finite at env step {self.env_steps}")
            self.elapsed += self.clock() - t0
            record["wall_time"] = self.elapsed
            self.log.append(record)
        else:
            self.elapsed += self.clock() - t0

    def run(self, steps: int | None = None, checkpoint_dir: str | os.PathLike | None = None,
            log_path: str | os.PathLike | None = None) -> TrainLog:
        steps = self.config.total_env_steps - self.env_steps if steps is None else steps
        interval = self.config.checkpoint_interval
        writer = _CsvAppender(log_path) if log_path else None
        try:
            for _ in range(steps):
                n_before = len(self.log)
                self.step()
                if writer and len(self.log) > n_before:
                    writer.write(self.log.records[-1])
                if checkpoint_dir and interval and self.env_steps % interval == 0:
                    self.save(Path(checkpoint_dir) / f"step_{self.env_steps:06d}.ckpt")
        finally:
            if writer:
                writer.close()
        return self.log

    # -- persistence ------------------------------------------------------------------

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = self.agent.named_arrays()
        for prefix, opt in (("opt.critic", self.critic_opt), ("opt.actor", self.actor_opt),
                            ("opt.alpha", self.alpha_opt), ("opt.gen", self.gen_opt)):
            out.update(opt.state_arrays(prefix))
        return out

    def save(self, path: str | os.PathLike, with_state: bool = True) -> None:
        """Write the parameter container and, optionally, a resume sidecar."""
        arrays = self.named_arrays()
        checkpoint_save(arrays, path)
        if with_state:
            extra = {
                "arrays": arrays,  # exact copies: the container stores 32-bit floats
                "rng": {k: g.bit_generator.state for k, g in self.rngs.items()},
                "pool": list(self.pool.records),
                "episode": self.episode,
                "episode_reward": self.episode_reward,
                "log": self.log,
                "counters": (self.env_steps, self.control_rounds, self.generative_rounds, self.elapsed),
                "updates": {k: o.updates for k, o in self._opts().items()},
                "config": dataclasses.asdict(self.config),
            }
            with open(str(path) + ".state", "wb") as fh:
                pickle.dump(extra, fh)

    def load(self, path: str | os.PathLike, with_state: bool = True) -> None:
        extra = None
        arrays = checkpoint_load(path)
        if with_state:
            with open(str(path) + ".state", "rb") as fh:
                extra = pickle.load(fh)
            arrays = extra["arrays"]
        self.agent.load_arrays(arrays)
        for prefix, opt in self._prefixed_opts():
            opt.load_state_arrays(arrays, prefix)
        if extra is not None:
            for k, st in extra["rng"].items():
                self.rngs[k].bit_generator.state = st
            self.pool = ReplayPool(self.config.pool_capacity)
            for tr in extra["pool"]:
                self.pool.push(tr)
            self.episode = extra["episode"]
            self.episode_reward = extra["episode_reward"]
            self.log = extra["log"]
            self.env_steps, self.control_rounds, self.generative_rounds, self.elapsed = extra["counters"]
            for k, o in self._opts().items():
                o.updates = dict(extra["updates"][k])

    def _opts(self) -> dict[str, Adam]:
        return {"critic": self.critic_opt, "actor": self.actor_opt, "alpha": self.alpha_opt, "gen": self.gen_opt}

    def _prefixed_opts(self):
        return [(f"opt.{k}", o) for k, o in self._opts().items()]


class _CsvAppender:
    def __init__(self, path):
        self.fh = open(path, "w", newline="")
        self.w = csv.writer(self.fh)
        self.w.writerow(LOG_FIELDS)

    def write(self, record: dict) -> None:
        self.w.writerow([_fmt(record[k]) for k in LOG_FIELDS])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def generative_losses(agent: AgentParams, backbone: FeatureBackbone, state: State, action: Tensor,
                      targets=None):
    """Content, style and contrastive losses for regenerating the next moving images.

    The stored actions are fed to the builder; encoder features and style
    signals come from the current actor with gradients recorded.  ``targets``
    are optional precomputed backbone statistics of ``state.style``.
    """
    actor = agent.actor
    _, content = actor.encode(state.moving)
    _, signals = style_branch(actor, state.style)
    produced = builder_forward(agent.builder, content, action, signals)
    if targets is None:
        targets = style_targets(backbone, state.style)
    l_co, l_st = perceptual_losses(backbone, produced, state.moving, targets)
    f_style = [concat([signals.shallow_mean, signals.shallow_std], axis=1),
               concat([signals.deep_mean, signals.deep_std], axis=1)]
    f_moving = actor.style_statistics(produced)
    l_ct = contrastive_loss(f_moving, f_style)
    return l_co, l_st, l_ct


def backbone_from_spec(spec: str) -> FeatureBackbone:
    if spec.startswith("seed:"):
        return load_backbone(int(spec.split(":", 1)[1]))
    return load_backbone(spec)


def train(config: TrainConfig, contents, styles, backbone=None, clock=time.perf_counter,
          out_dir: str | os.PathLike | None = None) -> tuple[AgentParams, TrainLog]:
    """Run the full joint training loop and return the final parameters and log."""
    trainer = Trainer(config, contents, styles, backbone, clock)
    log_path = None
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        log_path = Path(out_dir) / "train_log.csv"
    try:
        trainer.run(checkpoint_dir=out_dir, log_path=log_path)
    except NumericError:
        # losses are checked before each optimizer step, so parameters are still the last good ones
        if out_dir:
            trainer.save(Path(out_dir) / "last_good.ckpt", with_state=False)
        raise
    if out_dir:
        trainer.save(Path(out_dir) / "final.ckpt", with_state=False)
        trainer.log.write_episodes(Path(out_dir) / "episodes.csv")
    return trainer.agent, trainer.log


def rollout_step(agent: AgentParams, moving: Tensor, style: Tensor) -> Tensor:
    """One deterministic (zero-noise) transition of the moving image."""
    with no_grad():
        pol = policy_mode(agent.actor, State(moving, style))
        return builder_forward(agent.builder, pol.content_features, pol.action, pol.signals)


def generate_sequence(agent: AgentParams, content, style, steps: int) -> list[Tensor]:
    """Deterministic rollout from the content image; returns moving images 1..steps."""
    if steps < 1:
        raise ParameterError("steps must be ≥ 1")
    moving = _image_tensor(content)
    style = _image_tensor(style)
    _check_divisible(moving)
    out = []
    for _ in range(steps):
        moving = rollout_step(agent, moving, style)
        out.append(moving)
    return out


def checkpoint_save(arrays: dict[str, np.ndarray], path: str | os.PathLike) -> None:
    write_container(path, arrays)


def checkpoint_load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return read_container(path)


def load_agent(path: str | os.PathLike) -> AgentParams:
    """Rebuild agent parameters from a checkpoint; a layout mismatch raises FormatError."""
    agent = AgentParams.initialize(0)
    agent.load_arrays(checkpoint_load(path))
    return agent
