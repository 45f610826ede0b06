"""Small double-precision neural-network engine.

MLPs with leaky-relu hidden layers, a GRU cell with truncated
backpropagation through time, a diagonal Gaussian action head, Adam and
finite-difference gradient checking. Everything works on batched inputs of
shape (N, d); 1-D inputs are treated as a batch of one.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LEAK = 0.01
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


def _as_batch(x: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"expected input of width {dim}, got shape {x.shape}")
    return x, single


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ----------------------------------------------------------------------------
# MLP


@dataclass
class Mlp:
    weights: list[np.ndarray]  # (in, out)
    biases: list[np.ndarray]

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def with_params(self, params: Sequence[np.ndarray]) -> "Mlp":
        return Mlp(list(params[0::2]), list(params[1::2]))

    def copy(self) -> "Mlp":
        return self.with_params([p.copy() for p in self.params()])

    def forward(self, x: np.ndarray, return_hidden: bool = False):
        """Returns (output, cache); the cache holds pre-activations for backward."""
        x, single = _as_batch(x, self.in_dim)
        acts = [x]
        pres = []
        a = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            pres.append(z)
            a = z if i == last else np.where(z > 0, z, LEAK * z)
            acts.append(a)
        cache = (acts, pres, single)
        out = a[0] if single else a
        return out, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of sum(grad_out * output) w.r.t. params and input."""
        acts, pres, single = cache
        g = np.asarray(grad_out, dtype=float)
        if single:
            g = g[None, :]
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            if i != last:
                g = g * np.where(pres[i] > 0, 1.0, LEAK)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, (g[0] if single else g)

    def hidden(self, cache, layer: int = -2) -> np.ndarray:
        """Activation of a hidden layer from a forward cache (default: penultimate)."""
        acts, _, single = cache
        a = acts[layer]
        return a[0] if single else a


def mlp_forward(params: Mlp, x: np.ndarray):
    return params.forward(x)


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, final_scale: float = 1.0) -> Mlp:
    """Scaled-uniform fan-in init, zero biases; last layer optionally shrunk."""
    ws, bs = [], []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = math.sqrt(6.0 / a)  # He-uniform
        w = rng.uniform(-lim, lim, size=(a, b))
        if i == len(sizes) - 2:
            w *= final_scale
        ws.append(w)
        bs.append(np.zeros(b))
    return Mlp(ws, bs)


# ----------------------------------------------------------------------------
# GRU

_GRU_NAMES = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_n", "u_n", "b_n")


@dataclass
class GruParams:
    """h' = (1 - z) * h + z * n, with n = tanh(W_n x + U_n (r * h) + b_n)."""

    w_z: np.ndarray
    u_z: np.ndarray
    b_z: np.ndarray
    w_r: np.ndarray
    u_r: np.ndarray
    b_r: np.ndarray
    w_n: np.ndarray
    u_n: np.ndarray
    b_n: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.w_z.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.u_z.shape[0]

    def params(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in _GRU_NAMES]

    def with_params(self, params: Sequence[np.ndarray]) -> "GruParams":
        return GruParams(*params)

    def copy(self) -> "GruParams":
        return GruParams(*[p.copy() for p in self.params()])


def init_gru(in_dim: int, hidden: int, rng: np.random.Generator) -> GruParams:
    """Fan-in uniform input weights, orthogonal recurrent weights, zero biases."""
    lim = math.sqrt(3.0 / in_dim)

    def orth():
        q, r = np.linalg.qr(rng.normal(size=(hidden, hidden)))
        return q * np.sign(np.diag(r))

    ps = []
    for _ in range(3):
        ps += [rng.uniform(-lim, lim, size=(in_dim, hidden)), orth(), np.zeros(hidden)]
    return GruParams(*ps)


def gru_step(p: GruParams, x: np.ndarray, h: np.ndarray):
    """One GRU step on a batch. Returns (h', cache)."""
    x, single = _as_batch(x, p.in_dim)
    h, _ = _as_batch(h, p.hidden_dim)
    if h.shape[0] != x.shape[0]:
        raise ShapeError("batch sizes of x and h differ")
    z = sigmoid(x @ p.w_z + h @ p.u_z + p.b_z)
    r = sigmoid(x @ p.w_r + h @ p.u_r + p.b_r)
    n = np.tanh(x @ p.w_n + (r * h) @ p.u_n + p.b_n)
    h_new = (1.0 - z) * h + z * n
    cache = (x, h, z, r, n, single)
    return (h_new[0] if single else h_new), cache


def gru_step_backward(p: GruParams, cache, dh_new: np.ndarray):
    """Returns (param grads, dx, dh) for one cached step."""
    x, h, z, r, n, single = cache
    g = np.asarray(dh_new, dtype=float)
    if single:
        g = g[None, :]
    dz = g * (n - h) * z * (1.0 - z)
    dn = g * z * (1.0 - n * n)
    drh = dn @ p.u_n.T
    dr = drh * h * r * (1.0 - r)
    dh = g * (1.0 - z) + dz @ p.u_z.T + dr @ p.u_r.T + drh * r
    dx = dz @ p.w_z.T + dr @ p.w_r.T + dn @ p.w_n.T
    rh = r * h
    grads = [x.T @ dz, h.T @ dz, dz.sum(0), x.T @ dr, h.T @ dr, dr.sum(0),
             x.T @ dn, rh.T @ dn, dn.sum(0)]
    if single:
        return grads, dx[0], dh[0]
    return grads, dx, dh


@dataclass
class GruWindow:
    """Cached forward pass over one truncated window."""

    caches: list
    hiddens: np.ndarray  # (T, N, H), hidden after each step
    resets: np.ndarray  # (T, N) bool, hidden zeroed before step t
    max_len: int


def bptt_forward(p: GruParams, xs: np.ndarray, h0: np.ndarray, resets: np.ndarray | None = None,
                 max_len: int = 50) -> GruWindow:
    """Run a window of ``T <= max_len`` steps. ``resets[t]`` zeroes h before step t."""
    xs = np.asarray(xs, dtype=float)
    if xs.ndim != 3 or xs.shape[2] != p.in_dim:
        raise ShapeError(f"expected (T, N, {p.in_dim}) inputs, got {xs.shape}")
    T, N = xs.shape[:2]
    if T > max_len:
        raise StateError(f"window of {T} steps exceeds the truncation length {max_len}")
    resets = np.zeros((T, N), bool) if resets is None else np.asarray(resets, bool)
    h = np.array(h0, dtype=float).reshape(N, p.hidden_dim)
    caches = []
    hs = np.empty((T, N, p.hidden_dim))
    for t in range(T):
        h = np.where(resets[t][:, None], 0.0, h)
        h, c = gru_step(p, xs[t], h)
        caches.append(c)
        hs[t] = h
    return GruWindow(caches, hs, resets, max_len)


def bptt_backward(p: GruParams, window: GruWindow, dhs: np.ndarray) -> list[np.ndarray]:
    """Accumulate parameter gradients for upstream grads ``dhs`` (T, N, H).

    The hidden-state gradient is cut at the window start and at resets.
    """
    dhs = np.asarray(dhs, dtype=float)
    T = len(window.caches)
    if dhs.shape != window.hiddens.shape or T > window.max_len:
        raise StateError(f"upstream grads {dhs.shape} do not match the cached window "
                         f"{window.hiddens.shape}")
    grads = [np.zeros_like(q) for q in p.params()]
    carry = np.zeros_like(dhs[0])
    for t in range(T - 1, -1, -1):
        g, _, dh = gru_step_backward(p, window.caches[t], dhs[t] + carry)
        for acc, gi in zip(grads, g):
            acc += gi
        carry = np.where(window.resets[t][:, None], 0.0, dh)
    return grads


# ----------------------------------------------------------------------------
# Gaussian head


@dataclass
class GaussianHead:
    log_std: np.ndarray
    learn_std: bool = False

    @classmethod
    def fixed(cls, dim: int = 12, std: float = 0.6, learn_std: bool = False) -> "GaussianHead":
        return cls(np.full(dim, math.log(std)), learn_std)

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def log_prob(self, mean: np.ndarray, action: np.ndarray) -> np.ndarray:
        z = (np.asarray(action) - mean) / self.std
        return np.sum(-0.5 * z * z - self.log_std - 0.5 * math.log(2.0 * math.pi), axis=-1)

    def sample(self, mean: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        action = mean + self.std * rng.standard_normal(np.shape(mean))
        return action, self.log_prob(mean, action)

    def entropy(self) -> float:
        return float(np.sum(0.5 * math.log(2.0 * math.pi * math.e) + self.log_std))

    def log_prob_grads(self, mean: np.ndarray, action: np.ndarray, upstream: np.ndarray
                       ) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of sum(upstream * log_prob) w.r.t. mean (N, d) and log_std (d)."""
        var = self.std ** 2
        diff = np.asarray(action) - mean
        up = np.asarray(upstream)[..., None]
        d_mean = up * diff / var
        d_log_std = np.sum(up * (diff * diff / var - 1.0), axis=tuple(range(diff.ndim - 1)))
        return d_mean, d_log_std


def gaussian_logprob_and_sample(head: GaussianHead, mean: np.ndarray, rng: np.random.Generator):
    return head.sample(mean, rng)


# ----------------------------------------------------------------------------
# Adam


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def update(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float
               ) -> list[np.ndarray]:
        """Return updated copies of ``params``."""
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(self.m) != len(params):
            raise StateError("optimizer state does not match parameter list")
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            out.append(p - lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out

    def state(self) -> dict:
        return {"step_count": self.step_count, "m": self.m, "v": self.v}


def adam_update(params, grads, lr: float, opt: Adam) -> list[np.ndarray]:
    return opt.update(params, grads, lr)


@dataclass
class RunningNorm:
    """Streaming per-feature mean and variance for input standardization."""

    mean: np.ndarray
    var: np.ndarray
    count: float = 0.0
    min_std: float = 1e-2
    clip: float = 10.0

    @classmethod
    def identity(cls, dim: int) -> "RunningNorm":
        return cls(np.zeros(dim), np.ones(dim), 0.0)

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=float).reshape(-1, self.mean.shape[0])
        n = x.shape[0]
        if n == 0:
            return
        b_mean = x.mean(axis=0)
        b_var = x.var(axis=0)
        if self.count == 0:
            self.mean, self.var, self.count = b_mean, b_var, float(n)
            return
        tot = self.count + n
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_var * n + delta ** 2 * self.count * n / tot
        self.mean = self.mean + delta * n / tot
        self.var = m2 / tot
        self.count = tot

    def __call__(self, x: np.ndarray) -> np.ndarray:
        std = np.maximum(np.sqrt(self.var), self.min_std)
        return np.clip((x - self.mean) / std, -self.clip, self.clip)

    def params(self) -> list[np.ndarray]:
        return [self.mean.copy(), self.var.copy(), np.array([self.count])]

    @classmethod
    def from_params(cls, ps: Sequence[np.ndarray]) -> "RunningNorm":
        return cls(np.asarray(ps[0], float).copy(), np.asarray(ps[1], float).copy(),
                   float(np.asarray(ps[2]).ravel()[0]))


# ----------------------------------------------------------------------------
# Gradient checking


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)))


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5,
                 indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    idx = indices if indices is not None else list(np.ndindex(arr.shape))
    for i in idx:
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2.0 * h)
    return g


def gradcheck(f: Callable[[], float], params: Sequence[np.ndarray],
              analytic: Sequence[np.ndarray], h: float = 1e-5, max_entries: int | None = None,
              rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients."""
    worst = 0.0
    for p, g in zip(params, analytic):
        idx = list(np.ndindex(p.shape))
        if max_entries is not None and len(idx) > max_entries:
            pick = (rng or np.random.default_rng(0)).choice(len(idx), max_entries, replace=False)
            idx = [idx[i] for i in pick]
        num = numeric_grad(f, p, h, idx)
        sel = tuple(np.array(idx).T)
        worst = max(worst, relative_error(np.asarray(g)[sel], num[sel]))
    return worst


# ----------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, modules: dict[str, list[np.ndarray]], meta: dict | None = None,
                    optimizers: dict[str, Adam] | None = None) -> None:
    """Versioned npz container: JSON header plus flat parameter arrays."""
    arrays: dict[str, np.ndarray] = {}
    header = {"version": CHECKPOINT_VERSION, "modules": {}, "optimizers": {},
              "meta": meta or {}}
    for name, params in modules.items():
        header["modules"][name] = [list(p.shape) for p in params]
        for i, p in enumerate(params):
            arrays[f"{name}/{i}"] = np.asarray(p)
    for name, opt in (optimizers or {}).items():
        header["optimizers"][name] = {"step_count": opt.step_count, "n": len(opt.m),
                                      "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            arrays[f"opt/{name}/m{i}"] = m
            arrays[f"opt/{name}/v{i}"] = v
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, list[np.ndarray]], dict, dict[str, Adam]]:
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise StateError(f"unsupported checkpoint version {header.get('version')}")
        modules = {}
        for name, shapes in header["modules"].items():
            ps = [data[f"{name}/{i}"].copy() for i in range(len(shapes))]
            if [list(p.shape) for p in ps] != shapes:
                raise StateError(f"shape mismatch in checkpoint module {name}")
            modules[name] = ps
        opts = {}
        for name, o in header["optimizers"].items():
            opts[name] = Adam(o["beta1"], o["beta2"], o["eps"], o["step_count"],
                              [data[f"opt/{name}/m{i}"].copy() for i in range(o["n"])],
                              [data[f"opt/{name}/v{i}"].copy() for i in range(o["n"])])
    return modules, header["meta"], opts
