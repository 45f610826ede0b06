"""Dynamics encoders and the base-velocity estimator.

* DIM: a GRU over the 45-dim proprioceptive input whose hidden state is the
  36-dim latent fed to the control policy, trained offline by regressing the
  normalized dynamics label through a linear readout with 50-step BPTT.
* MorAL baseline: an MLP regressing the label and base velocity from the
  latent-free observation; its 36-wide penultimate layer is the latent.
* Velocity estimator: MLP from the estimator view (165) to body-frame base
  linear velocity, trained by MSE next to PPO.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .env import CORE_DIM, DIM_INPUT, EST_DIM, LATENT_DIM, dim_input, obs_scale
from .morphology import SUPPORTED_IDS, MorphologyParams, load_reference, param_bounds

log = logging.getLogger(__name__)

LABEL_DIM = 13 + 36 + 4 + 3 + 4 + 1
BPTT_WINDOW = 50


# ----------------------------------------------------------------------------
# Labels


def _label_bounds() -> tuple[np.ndarray, np.ndarray]:
    """Union of the sampling bounds over all supported references."""
    lo = np.full(LABEL_DIM, np.inf)
    hi = np.full(LABEL_DIM, -np.inf)
    for rid in SUPPORTED_IDS:
        b = param_bounds(load_reference(rid), "A")
        l = np.concatenate([b["m_base"][0], b["link_masses"][0], b["joint_offsets"][0].ravel(),
                            b["foot_offsets"][0], b["kp"][0], b["kd"][0], b["tau_max"][0],
                            b["mu_f"][0], b["latency"][0]])
        h = np.concatenate([b["m_base"][1], b["link_masses"][1], b["joint_offsets"][1].ravel(),
                            b["foot_offsets"][1], b["kp"][1], b["kd"][1], b["tau_max"][1],
                            b["mu_f"][1], b["latency"][1]])
        lo = np.minimum(lo, l)
        hi = np.maximum(hi, h)
    return lo, hi


LABEL_LO, LABEL_HI = _label_bounds()


def raw_label(p: MorphologyParams) -> np.ndarray:
    return np.concatenate([[p.m_base], p.link_masses, np.asarray(p.joint_offsets).ravel(),
                           p.foot_offsets, [p.kp, p.kd, p.tau_max], p.mu_f, [p.latency]])


def normalize_label(raw: np.ndarray) -> np.ndarray:
    return 2.0 * (np.asarray(raw) - LABEL_LO) / (LABEL_HI - LABEL_LO) - 1.0


def denormalize_label(label: np.ndarray) -> np.ndarray:
    return LABEL_LO + (np.asarray(label) + 1.0) * 0.5 * (LABEL_HI - LABEL_LO)


def dynamics_label(p: MorphologyParams) -> np.ndarray:
    return normalize_label(raw_label(p))


# ----------------------------------------------------------------------------
# Networks

_X_SCALE = obs_scale()[:DIM_INPUT]


@dataclass
class DimNet:
    gru: nn.GruParams
    readout: nn.Mlp

    def params(self) -> list[np.ndarray]:
        return self.gru.params() + self.readout.params()

    def with_params(self, ps: Sequence[np.ndarray]) -> "DimNet":
        return DimNet(self.gru.with_params(ps[:9]), self.readout.with_params(ps[9:]))

    def copy(self) -> "DimNet":
        return self.with_params([p.copy() for p in self.params()])


def init_dim(rng: np.random.Generator) -> DimNet:
    return DimNet(nn.init_gru(DIM_INPUT, LATENT_DIM, rng), nn.init_mlp([LATENT_DIM, LABEL_DIM], rng))


def zero_dim() -> DimNet:
    z = lambda *s: np.zeros(s)  # noqa: E731
    g = nn.GruParams(*[z(DIM_INPUT, LATENT_DIM), z(LATENT_DIM, LATENT_DIM), z(LATENT_DIM)] * 3)
    return DimNet(g, nn.Mlp([z(LATENT_DIM, LABEL_DIM)], [z(LABEL_DIM)]))


def dim_forward(net: DimNet, x: np.ndarray, h: np.ndarray):
    """One encoder step: returns (latent, h', label prediction); latent is h'."""
    x = np.asarray(x, dtype=float)
    h_new, _ = nn.gru_step(net.gru, x * _X_SCALE, h)
    return h_new, h_new, net.readout(h_new)


MORAL_SIZES = (CORE_DIM, 512, 256, LATENT_DIM, LABEL_DIM + 3)


def init_moral(rng: np.random.Generator) -> nn.Mlp:
    return nn.init_mlp(MORAL_SIZES, rng)


_CORE_SCALE = obs_scale()[:CORE_DIM]


def moral_forward(est: nn.Mlp, core: np.ndarray):
    """Returns (latent (N,36), label prediction, velocity prediction, cache)."""
    out, cache = est.forward(np.asarray(core) * _CORE_SCALE)
    latent = est.hidden(cache, -2)
    return latent, out[..., :LABEL_DIM], out[..., LABEL_DIM:], cache


def moral_train_step(est: nn.Mlp, opt: nn.Adam, core: np.ndarray, labels: np.ndarray,
                     lin_vel: np.ndarray, lr: float) -> tuple[nn.Mlp, float]:
    """Joint label + velocity MSE (weighted 1:1)."""
    _, pred_l, pred_v, cache = moral_forward(est, core)
    rl = pred_l - labels
    rv = pred_v - lin_vel
    loss = float(np.mean(rl ** 2) + np.mean(rv ** 2))
    g = np.concatenate([2.0 * rl / rl.size, 2.0 * rv / rv.size], axis=1)
    grads, _ = est.backward(cache, g)
    return est.with_params(opt.update(est.params(), grads, lr)), loss


EST_SIZES = (EST_DIM, 512, 256, 3)


def init_estimator(rng: np.random.Generator) -> nn.Mlp:
    return nn.init_mlp(EST_SIZES, rng)


def estimator_forward(est: nn.Mlp, s_e: np.ndarray):
    from .env import estimator_scale

    return est.forward(np.asarray(s_e) * estimator_scale())


def velocity_estimator_train_step(est: nn.Mlp, opt: nn.Adam, s_e: np.ndarray, v_true: np.ndarray,
                                  lr: float) -> tuple[nn.Mlp, float]:
    """One MSE step; the returned loss is the pre-update mean squared residual."""
    pred, cache = estimator_forward(est, s_e)
    r = pred - v_true
    loss = float(np.mean(r ** 2))
    grads, _ = est.backward(cache, 2.0 * r / r.size)
    return est.with_params(opt.update(est.params(), grads, lr)), loss


# ----------------------------------------------------------------------------
# Dataset


@dataclass
class DimDataset:
    """Time-major proprioceptive streams with per-step labels."""

    x: np.ndarray  # (T, N, 45)
    resets: np.ndarray  # (T, N) bool; hidden zeroed before step t
    labels: np.ndarray  # (T, N, LABEL_DIM)
    robot_ids: np.ndarray  # (T, N) index into the robot pool

    @property
    def n_transitions(self) -> int:
        return int(self.x.shape[0] * self.x.shape[1])

    def split_streams(self, held_out: float = 0.2) -> tuple["DimDataset", "DimDataset"]:
        n = self.x.shape[1]
        k = max(1, int(round(n * held_out))) if n > 1 else 0
        tr, te = slice(0, n - k), slice(n - k, n)
        pick = lambda s: DimDataset(self.x[:, s], self.resets[:, s], self.labels[:, s],  # noqa: E731
                                    self.robot_ids[:, s])
        return pick(tr), pick(te)

    def save(self, path) -> None:
        header = {"version": 1, "shape": list(self.x.shape), "label_dim": LABEL_DIM,
                  "window": BPTT_WINDOW}
        np.savez(path, header=np.frombuffer(json.dumps(header).encode(), np.uint8), x=self.x,
                 resets=self.resets, labels=self.labels, robot_ids=self.robot_ids)

    @classmethod
    def load(cls, path) -> "DimDataset":
        with np.load(path) as d:
            return cls(d["x"], d["resets"], d["labels"], d["robot_ids"])


def collect_dim_dataset(bundle, vec_env, n_transitions: int, rng: np.random.Generator
                        ) -> DimDataset:
    """Roll out ``bundle`` (a ppo.PolicyBundle) and record encoder inputs and labels."""
    n = vec_env.n_env
    T = max(1, -(-n_transitions // n))
    xs = np.empty((T, n, DIM_INPUT))
    resets = np.zeros((T, n), bool)
    labels = np.empty((T, n, LABEL_DIM))
    ids = np.empty((T, n), int)
    core = vec_env.reset_all()
    state = bundle.initial_state(n)
    resets[0] = True
    for t in range(T):
        labels[t] = np.stack([dynamics_label(p) for p in vec_env.robot_params()])
        ids[t] = vec_env.robot_index
        act = bundle.act(core, state, rng)
        xs[t] = act.x_t
        out = vec_env.step_all(act.action)
        state = bundle.advance(act, out.done)
        core = out.core
        if t + 1 < T:
            resets[t + 1] = out.done
    return DimDataset(xs, resets, labels, ids)


# ----------------------------------------------------------------------------
# Offline training


def _windows(T: int, window: int) -> list[slice]:
    return [slice(s, min(s + window, T)) for s in range(0, T, window)]


def dim_loss(net: DimNet, data: DimDataset, window: int = BPTT_WINDOW) -> float:
    """Mean squared readout error over the whole dataset (forward only)."""
    n = data.x.shape[1]
    h = np.zeros((n, LATENT_DIM))
    total = 0.0
    for sl in _windows(data.x.shape[0], window):
        win = nn.bptt_forward(net.gru, data.x[sl] * _X_SCALE, h, data.resets[sl], window)
        pred = win.hiddens @ net.readout.weights[0] + net.readout.biases[0]
        total += float(np.sum((pred - data.labels[sl]) ** 2))
        h = win.hiddens[-1]
    return total / data.labels.size


def constant_predictor_loss(train: DimDataset, test: DimDataset) -> float:
    mean = train.labels.reshape(-1, LABEL_DIM).mean(axis=0)
    return float(np.mean((test.labels - mean) ** 2))


@dataclass
class DimTrainReport:
    train_loss: list[float]
    held_out_loss: list[float]
    baseline_loss: float


def dim_train_offline(net: DimNet, data: DimDataset, epochs: int, lr: float = 1e-3,
                      held_out: DimDataset | None = None, window: int = BPTT_WINDOW,
                      opt: nn.Adam | None = None, rng: np.random.Generator | None = None
                      ) -> tuple[DimNet, DimTrainReport]:
    """Minimize readout MSE with truncated BPTT over consecutive windows.

    Hidden states carry across windows (without gradient) and reset at
    episode starts. Returns the trained net and per-epoch losses.
    """
    opt = opt or nn.Adam()
    train_hist, test_hist = [], []
    for epoch in range(epochs):
        n = data.x.shape[1]
        h = np.zeros((n, LATENT_DIM))
        tot, count = 0.0, 0
        for sl in _windows(data.x.shape[0], window):
            win = nn.bptt_forward(net.gru, data.x[sl] * _X_SCALE, h, data.resets[sl], window)
            hs = win.hiddens
            pred = hs @ net.readout.weights[0] + net.readout.biases[0]
            r = pred - data.labels[sl]
            loss = float(np.mean(r ** 2))
            if not np.isfinite(loss):
                raise FloatingPointError(f"DIM loss diverged at epoch {epoch}")
            g_pred = 2.0 * r / r.size
            g_w = hs.reshape(-1, LATENT_DIM).T @ g_pred.reshape(-1, LABEL_DIM)
            g_b = g_pred.reshape(-1, LABEL_DIM).sum(0)
            d_hs = g_pred @ net.readout.weights[0].T
            g_gru = nn.bptt_backward(net.gru, win, d_hs)
            net = net.with_params(opt.update(net.params(), g_gru + [g_w, g_b], lr))
            tot += loss * r.size
            count += r.size
            h = hs[-1]
        train_hist.append(tot / count)
        if held_out is not None:
            test_hist.append(dim_loss(net, held_out, window))
        log.info("DIM epoch %d: train %.5f held-out %s", epoch, train_hist[-1],
                 f"{test_hist[-1]:.5f}" if test_hist else "-")
    base = constant_predictor_loss(data, held_out) if held_out is not None else float("nan")
    return net, DimTrainReport(train_hist, test_hist, base)


def iterate_dim_cm(config, robot_set, rounds: int = 3, out_dir=None, progress=None):
    """Alternate PPO on the control policy (encoder frozen) with offline encoder fits.

    Round 0 bootstraps the encoder on rollouts of the randomly initialized
    policy. Returns the final ppo.Trainer.
    """
    from .ppo import Trainer

    trainer = Trainer(config, robot_set, "pal", out_dir=out_dir)
    trainer.refit_dim(tag="bootstrap")
    for r in range(rounds):
        trainer.run(config.iterations_per_round, progress=progress)
        trainer.refit_dim(tag=f"round{r}")
    trainer.finish()
    return trainer
