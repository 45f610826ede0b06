"""PPO with GAE, KL-adaptive learning rate and concurrent estimator training."""

from __future__ import annotations

import csv
import logging
import math
import os
import pickle
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import dim as dimmod
from . import nn
from .dynamics import SimConfig
from .env import (COLLISION, CORE_DIM, LATENT_DIM, OBS_DIM, SIM_FAULT, EnvConfig, VecEnv,
                  dim_input, estimator_view, obs_scale, policy_view)
from .morphology import RobotSet, resample_fraction

log = logging.getLogger(__name__)

VARIANTS = ("pal", "moral")


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.9962
    gae_lambda: float = 0.95
    epochs: int = 4
    n_env: int = 450
    steps_per_iter: int = 140
    n_minibatches: int = 8
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    clip: float = 0.2
    bptt_window: int = 50
    resample_period: float = 25.0  # simulated seconds per env
    resample_fraction: float = 0.2
    lr: float = 1e-3
    critic_lr: float = 1e-3  # fixed; the KL rule only steers the policy step
    kl_target: float = 0.01
    lr_factor: float = 1.5
    lr_min: float = 1e-6
    lr_max: float = 1e-2
    max_grad_norm: float = 1.0
    action_std: float = 0.6
    learn_std: bool = False
    std_lr: float | None = None  # None: log-std follows the KL-adapted rate
    estimator_lr: float = 1e-3
    moral_lr: float = 1e-3
    seed: int = 0
    iterations: int = 1000
    iterations_per_round: int = 300
    dim_transitions: int = 20000
    dim_epochs: int = 10
    dim_lr: float = 1e-3
    checkpoint_every: int = 50
    zero_command_prob: float = 0.1
    max_episode_steps: int = 600

    @property
    def batch_size(self) -> int:
        return self.n_env * self.steps_per_iter

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PpoConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown PPO config keys: {sorted(bad)}")
        return cls(**d)

    def env_config(self) -> EnvConfig:
        return EnvConfig(sim=SimConfig(), max_steps=self.max_episode_steps,
                         zero_command_prob=self.zero_command_prob)


# ----------------------------------------------------------------------------
# Policy bundle


@dataclass
class RecurrentState:
    h: np.ndarray  # (N, 36) encoder hidden
    prev_latent: np.ndarray  # (N, 36) latent of the previous step (estimator input)


@dataclass
class ActResult:
    action: np.ndarray
    mean: np.ndarray
    logp: np.ndarray
    value: np.ndarray
    latent: np.ndarray
    v_hat: np.ndarray
    x_t: np.ndarray
    h_prev: np.ndarray
    h_new: np.ndarray
    s_e: np.ndarray
    actor_in: np.ndarray
    critic_in: np.ndarray
    moral_in: np.ndarray | None


_SCALE = obs_scale()


@dataclass
class PolicyBundle:
    """Control policy, critic, velocity estimator and dynamics encoder."""

    variant: str
    actor: nn.Mlp
    critic: nn.Mlp
    head: nn.GaussianHead
    estimator: nn.Mlp
    dim: dimmod.DimNet | None = None
    moral: nn.Mlp | None = None
    actor_norm: nn.RunningNorm = field(default_factory=lambda: nn.RunningNorm.identity(OBS_DIM))
    critic_norm: nn.RunningNorm = field(default_factory=lambda: nn.RunningNorm.identity(OBS_DIM))

    @classmethod
    def create(cls, variant: str, rng: np.random.Generator, action_std: float = 0.6,
               learn_std: bool = False) -> "PolicyBundle":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        actor = nn.init_mlp([OBS_DIM, 512, 512, 12], rng, final_scale=0.01)
        critic = nn.init_mlp([OBS_DIM, 512, 512, 1], rng)
        est = dimmod.init_estimator(rng)
        head = nn.GaussianHead.fixed(12, action_std, learn_std)
        if variant == "pal":
            return cls(variant, actor, critic, head, est, dim=dimmod.init_dim(rng))
        return cls(variant, actor, critic, head, est, moral=dimmod.init_moral(rng))

    def initial_state(self, n: int) -> RecurrentState:
        return RecurrentState(np.zeros((n, LATENT_DIM)), np.zeros((n, LATENT_DIM)))

    def act(self, core: np.ndarray, state: RecurrentState, rng: np.random.Generator | None,
            deterministic: bool = False) -> ActResult:
        n = core.shape[0]
        s_e = estimator_view(policy_view(core, state.prev_latent))
        v_hat, _ = dimmod.estimator_forward(self.estimator, s_e)
        x_t = dim_input(core, v_hat)
        moral_in = None
        if self.variant == "pal":
            latent, h_new, _ = dimmod.dim_forward(self.dim, x_t, state.h)
        else:
            moral_in = np.array(core)
            moral_in[:, 3:6] = v_hat
            latent, _, _, _ = dimmod.moral_forward(self.moral, moral_in)
            h_new = state.h
        actor_in = policy_view(core, latent, v_hat) * _SCALE
        critic_in = policy_view(core, latent) * _SCALE
        mean = self.actor(self.actor_norm(actor_in))
        value = self.critic(self.critic_norm(critic_in))[:, 0]
        if deterministic or rng is None:
            action = mean
        else:
            action = mean + self.head.std * rng.standard_normal((n, 12))
        logp = self.head.log_prob(mean, action)
        return ActResult(action, mean, logp, value, latent, v_hat, x_t, state.h, h_new, s_e,
                         actor_in, critic_in, moral_in)

    def advance(self, act: ActResult, done: np.ndarray) -> RecurrentState:
        keep = ~np.asarray(done, bool)[:, None]
        return RecurrentState(np.where(keep, act.h_new, 0.0), np.where(keep, act.latent, 0.0))

    def value_of(self, core: np.ndarray, latent: np.ndarray) -> np.ndarray:
        return self.critic(self.critic_norm(policy_view(core, latent) * _SCALE))[:, 0]

    def update_norms(self, batch: "TrajectoryBatch") -> None:
        """Fold a finished batch into the input statistics (used from the next rollout on)."""
        self.actor_norm.update(batch.actor_in)
        self.critic_norm.update(batch.critic_in)

    def modules(self) -> dict[str, list[np.ndarray]]:
        m = {"actor": self.actor.params(), "critic": self.critic.params(),
             "log_std": [self.head.log_std], "estimator": self.estimator.params(),
             "actor_norm": self.actor_norm.params(), "critic_norm": self.critic_norm.params()}
        if self.dim is not None:
            m["dim"] = self.dim.params()
        if self.moral is not None:
            m["moral"] = self.moral.params()
        return m

    @classmethod
    def from_modules(cls, variant: str, mods: dict, learn_std: bool = False) -> "PolicyBundle":
        rng = np.random.default_rng(0)
        b = cls.create(variant, rng, learn_std=learn_std)
        b.actor = b.actor.with_params(mods["actor"])
        b.critic = b.critic.with_params(mods["critic"])
        b.head = nn.GaussianHead(mods["log_std"][0], learn_std)
        b.estimator = b.estimator.with_params(mods["estimator"])
        b.actor_norm = nn.RunningNorm.from_params(mods["actor_norm"])
        b.critic_norm = nn.RunningNorm.from_params(mods["critic_norm"])
        if variant == "pal":
            b.dim = b.dim.with_params(mods["dim"])
        else:
            b.moral = b.moral.with_params(mods["moral"])
        return b


# ----------------------------------------------------------------------------
# Rollouts


@dataclass
class TrajectoryBatch:
    """Time-major (T, N, ...) rollout storage."""

    core: np.ndarray
    actor_in: np.ndarray
    critic_in: np.ndarray
    s_e: np.ndarray
    x_t: np.ndarray
    hidden: np.ndarray  # encoder hidden before each step
    latent: np.ndarray
    v_hat: np.ndarray
    actions: np.ndarray
    means: np.ndarray
    logp: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    truncated: np.ndarray
    trunc_values: np.ndarray  # V(final obs) where truncated, else 0
    causes: list  # T lists of N cause strings
    true_vel: np.ndarray
    labels: np.ndarray
    last_values: np.ndarray  # (N,) bootstrap after the last step
    moral_in: np.ndarray | None = None
    log_std: np.ndarray | None = None
    episode_returns: list = field(default_factory=list)
    episode_lengths: list = field(default_factory=list)
    episode_causes: list = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rewards.shape

    @property
    def n_transitions(self) -> int:
        return int(self.rewards.size)


def collect_rollouts(bundle: PolicyBundle, vec_env: VecEnv, core: np.ndarray,
                     state: RecurrentState, steps: int, rng: np.random.Generator
                     ) -> tuple[TrajectoryBatch, np.ndarray, RecurrentState]:
    """Run ``steps`` control steps on every env. Returns (batch, next core, next state)."""
    n = vec_env.n_env
    T = steps
    z = lambda *s: np.zeros((T, n) + s)  # noqa: E731
    b = TrajectoryBatch(
        core=z(CORE_DIM), actor_in=z(OBS_DIM), critic_in=z(OBS_DIM), s_e=z(OBS_DIM - 3),
        x_t=z(45), hidden=z(LATENT_DIM), latent=z(LATENT_DIM), v_hat=z(3), actions=z(12),
        means=z(12), logp=z(), values=z(), rewards=z(), dones=np.zeros((T, n), bool),
        truncated=np.zeros((T, n), bool), trunc_values=z(), causes=[], true_vel=z(3),
        labels=z(dimmod.LABEL_DIM), last_values=np.zeros(n),
        moral_in=z(CORE_DIM) if bundle.variant == "moral" else None,
        log_std=bundle.head.log_std.copy())
    label_cache: dict[int, np.ndarray] = {}

    def label_of(p):
        key = id(p)
        if key not in label_cache:
            label_cache[key] = dimmod.dynamics_label(p)
        return label_cache[key]

    for t in range(T):
        b.labels[t] = np.stack([label_of(p) for p in vec_env.robot_params()])
        a = bundle.act(core, state, rng)
        out = vec_env.step_all(a.action)
        b.core[t] = core
        b.actor_in[t] = a.actor_in
        b.critic_in[t] = a.critic_in
        b.s_e[t] = a.s_e
        b.x_t[t] = a.x_t
        b.hidden[t] = a.h_prev
        b.latent[t] = a.latent
        b.v_hat[t] = a.v_hat
        b.actions[t] = a.action
        b.means[t] = a.mean
        b.logp[t] = a.logp
        b.values[t] = a.value
        if b.moral_in is not None:
            b.moral_in[t] = a.moral_in
        b.rewards[t] = out.reward
        b.dones[t] = out.done
        b.truncated[t] = out.truncated
        b.causes.append(out.causes)
        b.true_vel[t] = out.true_lin_vel
        if out.truncated.any():
            idx = np.flatnonzero(out.truncated)
            b.trunc_values[t, idx] = bundle.value_of(out.final_core[idx], a.latent[idx])
        b.episode_returns += out.episode_returns
        b.episode_lengths += out.episode_lengths
        b.episode_causes += [c for c, d in zip(out.causes, out.done) if d]
        state = bundle.advance(a, out.done)
        core = out.core
    nxt = bundle.act(core, state, None, deterministic=True)
    b.last_values = nxt.value
    return b, core, state


# ----------------------------------------------------------------------------
# GAE


def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                last_values: np.ndarray, gamma: float, lam: float,
                truncated: np.ndarray | None = None, trunc_values: np.ndarray | None = None,
                normalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Advantages and returns over (T, N) streams.

    A done step bootstraps 0 on termination and ``trunc_values`` on a time
    limit; the last step of the window bootstraps ``last_values``. Returns
    are computed before advantage normalization.
    """
    rewards = np.asarray(rewards, float)
    T = rewards.shape[0]
    dones = np.asarray(dones, bool)
    truncated = np.zeros_like(dones) if truncated is None else np.asarray(truncated, bool)
    trunc_values = np.zeros_like(rewards) if trunc_values is None else trunc_values
    adv = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0])
    for t in range(T - 1, -1, -1):
        nxt = last_values if t == T - 1 else values[t + 1]
        nxt = np.where(dones[t], np.where(truncated[t], trunc_values[t], 0.0), nxt)
        delta = rewards[t] + gamma * nxt - values[t]
        running = delta + gamma * lam * np.where(dones[t], 0.0, running)
        adv[t] = running
    returns = adv + values
    if normalize:
        adv = normalize_advantages(adv)
    return adv, returns


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / (std if std > 0 else 1.0)


# ----------------------------------------------------------------------------
# Update


def adapt_lr(kl: float, lr: float, kl_target: float = 0.01, factor: float = 1.5,
             lo: float = 1e-6, hi: float = 1e-2) -> float:
    if kl > 2.0 * kl_target:
        lr = lr / factor
    elif kl < kl_target / 2.0:
        lr = lr * factor
    return min(hi, max(lo, lr))


def minibatch_indices(n_env: int, steps: int, n_minibatches: int, rng: np.random.Generator
                      ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Partition all (t, env) pairs into env-stream slices; each pair appears once."""
    envs = rng.permutation(n_env)
    flat_env = np.repeat(envs, steps)
    flat_t = np.tile(np.arange(steps), n_env)
    out = []
    for chunk in np.array_split(np.arange(n_env * steps), n_minibatches):
        if chunk.size:
            out.append((flat_t[chunk], flat_env[chunk]))
    return out


def gaussian_kl(mu_old, log_std_old, mu_new, log_std_new) -> np.ndarray:
    var_o = np.exp(2 * log_std_old)
    var_n = np.exp(2 * log_std_new)
    return np.sum(log_std_new - log_std_old + (var_o + (mu_old - mu_new) ** 2) / (2 * var_n) - 0.5,
                  axis=-1)


def clipped_surrogate(logp_new, logp_old, adv, clip):
    """Returns (loss, d loss / d logp_new) for the mean clipped objective."""
    ratio = np.exp(logp_new - logp_old)
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    unclipped_obj = ratio * adv
    obj = np.minimum(unclipped_obj, clipped * adv)
    active = unclipped_obj <= clipped * adv
    grad = -np.where(active, adv, 0.0) * ratio / adv.size
    return -float(obj.mean()), grad, ratio


def clipped_value_loss(v_new, v_old, returns, clip):
    """0.5 * mean(max(unclipped^2, clipped^2)) and its gradient."""
    v_clip = v_old + np.clip(v_new - v_old, -clip, clip)
    e1 = v_new - returns
    e2 = v_clip - returns
    use1 = e1 ** 2 >= e2 ** 2
    loss = 0.5 * float(np.mean(np.where(use1, e1 ** 2, e2 ** 2)))
    inside = np.abs(v_new - v_old) <= clip
    grad = np.where(use1, e1, np.where(inside, e2, 0.0)) / v_new.size
    return loss, grad


def _clip_grads(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    if max_norm <= 0:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        return [g * (max_norm / norm) for g in grads]
    return grads


@dataclass
class Optimizers:
    actor: nn.Adam = field(default_factory=nn.Adam)
    critic: nn.Adam = field(default_factory=nn.Adam)
    log_std: nn.Adam = field(default_factory=nn.Adam)
    estimator: nn.Adam = field(default_factory=nn.Adam)
    moral: nn.Adam = field(default_factory=nn.Adam)
    dim: nn.Adam = field(default_factory=nn.Adam)


@dataclass
class UpdateStats:
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    estimator_loss: float = 0.0
    moral_loss: float = 0.0
    kl: float = 0.0
    lr: float = 0.0
    clip_fraction: float = 0.0
    aborted: bool = False

    @property
    def total_loss(self) -> float:
        # entropy enters with coefficient 0 (kept for accounting)
        return self.policy_loss + 0.5 * self.value_loss + self.estimator_loss + self.moral_loss


def ppo_update(bundle: PolicyBundle, batch: TrajectoryBatch, config: PpoConfig, opts: Optimizers,
               lr: float, rng: np.random.Generator, advantages: np.ndarray | None = None,
               returns: np.ndarray | None = None) -> tuple[PolicyBundle, UpdateStats, float]:
    """Clipped PPO epochs plus the supervised estimator (and MorAL) steps."""
    if advantages is None or returns is None:
        advantages, returns = compute_gae(batch.rewards, batch.values, batch.dones,
                                          batch.last_values, config.gamma, config.gae_lambda,
                                          batch.truncated, batch.trunc_values)
    T, n = batch.shape
    snapshot = (bundle.actor, bundle.critic, bundle.head, bundle.estimator, bundle.moral)
    stats = UpdateStats()
    counts = 0
    old_log_std = batch.log_std if batch.log_std is not None else bundle.head.log_std
    for epoch in range(config.epochs):
        for ti, ei in minibatch_indices(n, T, config.n_minibatches, rng):
            obs_a = bundle.actor_norm(batch.actor_in[ti, ei])
            obs_c = bundle.critic_norm(batch.critic_in[ti, ei])
            adv = advantages[ti, ei]
            mean, cache_a = bundle.actor.forward(obs_a)
            kl = float(np.mean(gaussian_kl(batch.means[ti, ei], old_log_std, mean,
                                           bundle.head.log_std)))
            lr = adapt_lr(kl, lr, config.kl_target, config.lr_factor, config.lr_min, config.lr_max)
            logp = bundle.head.log_prob(mean, batch.actions[ti, ei])
            pl, g_logp, ratio = clipped_surrogate(logp, batch.logp[ti, ei], adv, config.clip)
            v, cache_c = bundle.critic.forward(obs_c)
            vl, g_v = clipped_value_loss(v[:, 0], batch.values[ti, ei], returns[ti, ei], config.clip)
            if not (np.isfinite(pl) and np.isfinite(vl)):
                log.error("non-finite PPO loss; restoring the pre-update snapshot")
                bundle.actor, bundle.critic, bundle.head, bundle.estimator, bundle.moral = snapshot
                stats.aborted = True
                return bundle, stats, lr
            d_mean, d_log_std = bundle.head.log_prob_grads(mean, batch.actions[ti, ei], g_logp)
            ga, _ = bundle.actor.backward(cache_a, d_mean)
            gc, _ = bundle.critic.backward(cache_c, config.value_coef * g_v[:, None])
            bundle.actor = bundle.actor.with_params(
                opts.actor.update(bundle.actor.params(), _clip_grads(ga, config.max_grad_norm), lr))
            bundle.critic = bundle.critic.with_params(
                opts.critic.update(bundle.critic.params(), _clip_grads(gc, config.max_grad_norm),
                                   config.critic_lr))
            if bundle.head.learn_std:
                d_ent = np.full_like(bundle.head.log_std, -config.entropy_coef)
                slr = lr if config.std_lr is None else config.std_lr
                new = opts.log_std.update([bundle.head.log_std], [d_log_std + d_ent], slr)[0]
                bundle.head = nn.GaussianHead(new, True)
            # supervised heads on the same slice
            bundle.estimator, el = dimmod.velocity_estimator_train_step(
                bundle.estimator, opts.estimator, batch.s_e[ti, ei], batch.true_vel[ti, ei],
                config.estimator_lr)
            ml = 0.0
            if bundle.moral is not None:
                bundle.moral, ml = dimmod.moral_train_step(
                    bundle.moral, opts.moral, batch.moral_in[ti, ei], batch.labels[ti, ei],
                    batch.true_vel[ti, ei], config.moral_lr)
            stats.policy_loss += pl
            stats.value_loss += vl
            stats.estimator_loss += el
            stats.moral_loss += ml
            stats.kl += kl
            stats.clip_fraction += float(np.mean(np.abs(ratio - 1.0) > config.clip))
            counts += 1
    for name in ("policy_loss", "value_loss", "estimator_loss", "moral_loss", "kl",
                 "clip_fraction"):
        setattr(stats, name, getattr(stats, name) / max(counts, 1))
    stats.entropy = bundle.head.entropy()
    stats.lr = lr
    return bundle, stats, lr


# ----------------------------------------------------------------------------
# Training driver

METRIC_COLUMNS = ("iteration", "sim_time", "mean_reward", "mean_episode_length",
                  "mean_episode_return", "success_proxy", "episodes", "policy_loss", "value_loss",
                  "entropy", "estimator_loss", "moral_loss", "total_loss", "kl", "lr",
                  "resampled")


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.10g}"
    return str(x)


class Trainer:
    """Owns envs, networks, optimizers and the metric stream of one run."""

    def __init__(self, config: PpoConfig, robot_set: RobotSet, variant: str = "pal",
                 out_dir: str | os.PathLike | None = None):
        self.config = config
        self.variant = variant
        self.robot_set = robot_set
        seq = np.random.SeedSequence(config.seed)
        init_seq, env_seq, act_seq, set_seq = seq.spawn(4)
        self.rng = np.random.default_rng(act_seq)
        self.set_rng = np.random.default_rng(set_seq)
        env_seed = int(env_seq.generate_state(1)[0])
        self.bundle = PolicyBundle.create(variant, np.random.default_rng(init_seq),
                                          config.action_std, config.learn_std)
        self.opts = Optimizers()
        self.lr = config.lr
        self.vec = VecEnv([r.build() for r in robot_set.robots], config.n_env, env_seed,
                          config.env_config())
        self.core = self.vec.reset_all()
        self.state = self.bundle.initial_state(config.n_env)
        self.iteration = 0
        self.sim_time = 0.0
        self.recent_lengths: deque = deque(maxlen=100)
        self.recent_returns: deque = deque(maxlen=100)
        self.recent_causes: deque = deque(maxlen=100)
        self.history: list[dict] = []
        self.dim_reports: list[tuple[str, dimmod.DimTrainReport]] = []
        self.dim_rounds = 0
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            # a fresh run owns its metric files; resume() goes through pickle instead
            for name in ("train.csv", "dim.csv", "timing.log"):
                (self.out_dir / name).unlink(missing_ok=True)

    # -- one PPO iteration --------------------------------------------------
    def step(self) -> dict:
        cfg = self.config
        t0 = time.perf_counter()
        batch, self.core, self.state = collect_rollouts(self.bundle, self.vec, self.core,
                                                        self.state, cfg.steps_per_iter, self.rng)
        self.bundle, stats, self.lr = ppo_update(self.bundle, batch, cfg, self.opts, self.lr,
                                                 self.rng)
        self.bundle.update_norms(batch)
        self.recent_lengths.extend(batch.episode_lengths)
        self.recent_returns.extend(batch.episode_returns)
        self.recent_causes.extend(batch.episode_causes)
        prev = self.sim_time
        self.sim_time += cfg.steps_per_iter * self.vec.config.dt
        n_res = self._maybe_resample(prev, self.sim_time)
        counted = [c for c in self.recent_causes if c != SIM_FAULT]
        row = {
            "iteration": self.iteration,
            "sim_time": self.sim_time,
            "mean_reward": float(batch.rewards.mean()),
            "mean_episode_length": float(np.mean(self.recent_lengths)) if self.recent_lengths
            else float(cfg.steps_per_iter),
            "mean_episode_return": float(np.mean(self.recent_returns)) if self.recent_returns
            else 0.0,
            "success_proxy": (1.0 - sum(c == COLLISION for c in counted) / len(counted))
            if counted else 1.0,
            "episodes": len(batch.episode_lengths),
            "policy_loss": stats.policy_loss,
            "value_loss": stats.value_loss,
            "entropy": stats.entropy,
            "estimator_loss": stats.estimator_loss,
            "moral_loss": stats.moral_loss,
            "total_loss": stats.total_loss,
            "kl": stats.kl,
            "lr": stats.lr,
            "resampled": n_res,
        }
        self.history.append(row)
        self._write_row(row, time.perf_counter() - t0)
        self.iteration += 1
        if self.out_dir is not None and cfg.checkpoint_every > 0 \
                and self.iteration % cfg.checkpoint_every == 0:
            self.save(self.out_dir / "checkpoints")
        return row

    def run(self, iterations: int, progress: Callable[[dict], None] | None = None) -> list[dict]:
        rows = []
        for _ in range(iterations):
            row = self.step()
            rows.append(row)
            if progress is not None:
                progress(row)
        return rows

    def run_schedule(self, total: int, progress: Callable[[dict], None] | None = None) -> None:
        """Train until ``total`` iterations; PAL refits the encoder before each round.

        Safe to call on a resumed trainer: finished rounds are not repeated.
        """
        per = max(1, self.config.iterations_per_round)
        while self.iteration < total:
            rnd = self.iteration // per
            if self.variant == "pal" and self.dim_rounds <= rnd:
                self.refit_dim("bootstrap" if rnd == 0 else f"round{rnd}")
                self.dim_rounds = rnd + 1
            k = min(total, (rnd + 1) * per) - self.iteration
            self.run(k, progress)
        self.finish()

    def _maybe_resample(self, t_old: float, t_new: float) -> int:
        p = self.config.resample_period
        if p <= 0 or math.floor(t_new / p + 1e-9) == math.floor(t_old / p + 1e-9):
            return 0
        self.robot_set, replaced = resample_fraction(self.robot_set, self.config.resample_fraction,
                                                     self.set_rng)
        if len(replaced):
            self.vec.set_models([r.build() for r in self.robot_set.robots])
        return len(replaced)

    def _write_row(self, row: dict, wall: float) -> None:
        if self.out_dir is None:
            return
        path = self.out_dir / "train.csv"
        new = not path.exists()
        with open(path, "a", newline="") as f:
            w = csv.writer(f)
            if new:
                w.writerow(METRIC_COLUMNS)
            w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
        # wall-clock time lives in a plain log so train.csv stays reproducible
        with open(self.out_dir / "timing.log", "a") as f:
            f.write(f"iteration {row['iteration']} wall_time_s {wall:.3f}\n")

    # -- encoder ---------------------------------------------------------------
    def refit_dim(self, tag: str = "") -> dimmod.DimTrainReport | None:
        """Collect encoder data under the current policy and refit offline."""
        if self.bundle.dim is None:
            return None
        cfg = self.config
        data_vec = VecEnv([r.build() for r in self.robot_set.robots], cfg.n_env,
                          int(self.rng.integers(2 ** 31)), cfg.env_config())
        data = dimmod.collect_dim_dataset(self.bundle, data_vec, cfg.dim_transitions, self.rng)
        train, test = data.split_streams(0.2)
        self.bundle.dim, rep = dimmod.dim_train_offline(self.bundle.dim, train, cfg.dim_epochs,
                                                        cfg.dim_lr, test, cfg.bptt_window,
                                                        self.opts.dim)
        self.dim_reports.append((tag, rep))
        if self.out_dir is not None:
            path = self.out_dir / "dim.csv"
            new = not path.exists()
            with open(path, "a", newline="") as f:
                w = csv.writer(f)
                if new:
                    w.writerow(["round", "epoch", "train_loss", "held_out_loss", "baseline_loss"])
                for e, (a, b) in enumerate(zip(rep.train_loss, rep.held_out_loss)):
                    w.writerow([tag, e, _fmt(a), _fmt(b), _fmt(rep.baseline_loss)])
        # fresh recurrent state: latent semantics changed
        self.state = self.bundle.initial_state(cfg.n_env)
        return rep

    # -- persistence -------------------------------------------------------------
    def __getstate__(self):
        # the output location is not run state; resume() reattaches it
        d = dict(self.__dict__)
        d["out_dir"] = None
        return d

    def save(self, directory: str | os.PathLike) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        nn.save_checkpoint(d / "policy.npz", self.bundle.modules(),
                           meta={"variant": self.variant, "iteration": self.iteration,
                                 "ref_ids": self.robot_set.ref_ids,
                                 "learn_std": self.bundle.head.learn_std,
                                 "config": self.config.to_dict()},
                           optimizers={k: getattr(self.opts, k) for k in
                                       ("actor", "critic", "estimator")})
        with open(d / "trainer_state.pkl", "wb") as f:
            pickle.dump(self, f)
        return d

    @staticmethod
    def load(directory: str | os.PathLike) -> "Trainer":
        with open(Path(directory) / "trainer_state.pkl", "rb") as f:
            return pickle.load(f)

    @classmethod
    def resume(cls, out_dir: str | os.PathLike) -> "Trainer":
        """Reload the last checkpoint and drop metric rows written after it."""
        out = Path(out_dir)
        tr = cls.load(out / "checkpoints")
        tr.out_dir = out
        path = out / "train.csv"
        if path.exists():
            lines = path.read_text().splitlines(keepends=True)
            keep = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < tr.iteration]
            path.write_text("".join(keep))
        return tr

    def finish(self) -> None:
        if self.out_dir is not None:
            self.save(self.out_dir / "checkpoints")


def load_policy(path: str | os.PathLike) -> PolicyBundle:
    """Load the network bundle from a ``policy.npz`` checkpoint."""
    mods, meta, _ = nn.load_checkpoint(path)
    return PolicyBundle.from_modules(meta["variant"], mods, meta.get("learn_std", False))


def train(config: PpoConfig, robot_set: RobotSet, variant: str = "pal", out_dir=None,
          progress=None) -> Trainer:
    """PAL: iterative encoder/policy schedule; MorAL: concurrent supervised estimator."""
    trainer = Trainer(config, robot_set, variant, out_dir)
    trainer.run_schedule(config.iterations, progress)
    return trainer
