"""Categorical MLP and GRU policies with hand-written gradients.

Both networks share one batch interface used by the optimizer:

* ``forward(seqs)`` takes a list of per-episode observation arrays and returns
  logits for every step (episodes concatenated in order) plus a cache;
* ``backward(cache, dlogits)`` returns the flat parameter gradient;
* ``jvp(cache, v)`` returns the directional derivative of the logits along
  the flat parameter direction ``v``.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .core import Policy
from .errors import ConfigError, NumericError


class ParamBundle:
    """Ordered name -> array map; flattening follows insertion order."""

    def __init__(self, arrays=None) -> None:
        self.arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, arr in (arrays or {}).items():
            self.arrays[name] = np.array(arr, dtype=float)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value) -> None:
        self.arrays[name] = np.array(value, dtype=float)

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, v.shape) for k, v in self.arrays.items()]

    @property
    def total_dim(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def flatten(self) -> np.ndarray:
        if not self.arrays:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def unflatten(self, flat) -> "ParamBundle":
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.total_dim,):
            raise ConfigError(f"expected flat vector of length {self.total_dim}, got {flat.shape}")
        out = ParamBundle()
        i = 0
        for name, arr in self.arrays.items():
            out.arrays[name] = flat[i : i + arr.size].reshape(arr.shape).copy()
            i += arr.size
        return out

    def copy(self) -> "ParamBundle":
        return ParamBundle(self.arrays)


# --- distribution utilities -------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def kl_categorical(p, q) -> float | np.ndarray:
    """KL(p || q) along the last axis, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - np.log(np.where(p > 0, q, 1.0))), 0.0)
    out = np.sum(terms, axis=-1)
    return float(out) if out.ndim == 0 else out


def entropy(p) -> float | np.ndarray:
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    out = np.sum(terms, axis=-1)
    return float(out) if out.ndim == 0 else out


def sample_action(probs, rng: np.random.Generator) -> int:
    """Inverse-CDF draw over the fixed action order."""
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    idx = int(np.searchsorted(cdf, u, side="right"))
    return min(idx, len(cdf) - 1)


def _glorot(rng, fan_out, fan_in, scale=1.0):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_out, fan_in)) * scale


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --- networks ---------------------------------------------------------------


class _Net:
    obs_low: np.ndarray
    obs_high: np.ndarray
    params: ParamBundle
    kind: str
    recurrent: bool

    def _setup_norm(self, obs_low, obs_high, in_dim):
        if obs_low is None:
            obs_low = -np.ones(in_dim)
        if obs_high is None:
            obs_high = np.ones(in_dim)
        self.obs_low = np.asarray(obs_low, dtype=float)
        self.obs_high = np.asarray(obs_high, dtype=float)
        if self.obs_low.shape != (in_dim,) or self.obs_high.shape != (in_dim,):
            raise ConfigError("normalization ranges must match the input dimension")
        span = self.obs_high - self.obs_low
        if np.any(span <= 0):
            raise ConfigError("normalization ranges must have positive width")
        self._center = 0.5 * (self.obs_high + self.obs_low)
        self._halfspan = 0.5 * span

    def normalize(self, obs):
        obs = np.asarray(obs, dtype=float)
        if not np.all(np.isfinite(obs)):
            raise NumericError("non-finite observation")
        return (obs - self._center) / self._halfspan

    def get_flat(self) -> np.ndarray:
        return self.params.flatten()

    def set_flat(self, flat) -> None:
        self.params = self.params.unflatten(flat)
        self._bind()

    def _bind(self) -> None:
        pass

    @property
    def total_dim(self) -> int:
        return self.params.total_dim


class MLP(_Net):
    """tanh hidden layers, linear logits (softmax applied by the policy)."""

    kind = "mlp"
    recurrent = False

    def __init__(self, in_dim: int, out_dim: int, hidden=(32, 32), rng=None, obs_low=None, obs_high=None,
                 output_scale: float = 0.01):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self._setup_norm(obs_low, obs_high, self.in_dim)
        rng = np.random.default_rng(0) if rng is None else rng
        sizes = (self.in_dim,) + self.hidden + (self.out_dim,)
        self.params = ParamBundle()
        n_layers = len(sizes) - 1
        for i in range(n_layers):
            scale = output_scale if i == n_layers - 1 else 1.0
            self.params[f"W{i + 1}"] = _glorot(rng, sizes[i + 1], sizes[i], scale)
            self.params[f"b{i + 1}"] = np.zeros(sizes[i + 1])
        self._bind()

    def _bind(self):
        n = len(self.hidden) + 1
        self._layers = [(self.params[f"W{i + 1}"], self.params[f"b{i + 1}"]) for i in range(n)]

    def logits_single(self, obs) -> np.ndarray:
        a = self.normalize(obs)
        for W, b in self._layers[:-1]:
            a = np.tanh(W @ a + b)
        W, b = self._layers[-1]
        return W @ a + b

    def forward(self, seqs):
        x = self.normalize(np.concatenate([np.asarray(s, dtype=float).reshape(-1, self.in_dim) for s in seqs]))
        acts = [x]
        a = x
        for W, b in self._layers[:-1]:
            a = np.tanh(a @ W.T + b)
            acts.append(a)
        W, b = self._layers[-1]
        return a @ W.T + b, acts

    def backward(self, acts, dlogits) -> np.ndarray:
        grads = []
        delta = dlogits
        n = len(self._layers)
        for i in range(n - 1, -1, -1):
            W, _ = self._layers[i]
            a_in = acts[i]
            grads.append((delta.T @ a_in, delta.sum(axis=0)))
            if i > 0:
                delta = (delta @ W) * (1.0 - a_in * a_in)
        grads.reverse()
        return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])

    def jvp(self, acts, v) -> np.ndarray:
        tang = self.params.unflatten(v)
        n = len(self._layers)
        da = np.zeros_like(acts[0])
        for i in range(n):
            W, _ = self._layers[i]
            dW = tang[f"W{i + 1}"]
            db = tang[f"b{i + 1}"]
            dz = acts[i] @ dW.T + da @ W.T + db
            if i < n - 1:
                a_out = acts[i + 1]
                da = dz * (1.0 - a_out * a_out)
            else:
                return dz
        raise AssertionError("unreachable")


class GRU(_Net):
    """Single-layer GRU over observations with a linear readout to logits."""

    kind = "gru"
    recurrent = True

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 32, rng=None, obs_low=None, obs_high=None,
                 output_scale: float = 0.01):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.hidden_dim = int(hidden)
        self._setup_norm(obs_low, obs_high, self.in_dim)
        rng = np.random.default_rng(0) if rng is None else rng
        H, D = self.hidden_dim, self.in_dim
        self.params = ParamBundle()
        for g in ("z", "r", "c"):
            self.params[f"W{g}"] = _glorot(rng, H, D + H)
            self.params[f"b{g}"] = np.zeros(H)
        self.params["Wo"] = _glorot(rng, self.out_dim, H, output_scale)
        self.params["bo"] = np.zeros(self.out_dim)
        self._bind()

    def _bind(self):
        p = self.params
        self._Wz, self._bz = p["Wz"], p["bz"]
        self._Wr, self._br = p["Wr"], p["br"]
        self._Wc, self._bc = p["Wc"], p["bc"]
        self._Wo, self._bo = p["Wo"], p["bo"]

    def initial_hidden(self) -> np.ndarray:
        return np.zeros(self.hidden_dim)

    def step(self, h, obs):
        """One GRU update; returns ``(h_new, logits)``."""
        x = self.normalize(obs)
        if not np.all(np.isfinite(h)):
            raise NumericError("non-finite hidden state")
        D = self.in_dim
        xh = np.concatenate([x, h])
        z = _sigmoid(self._Wz @ xh + self._bz)
        r = _sigmoid(self._Wr @ xh + self._br)
        c = np.tanh(self._Wc[:, :D] @ x + self._Wc[:, D:] @ (r * h) + self._bc)
        h_new = (1.0 - z) * h + z * c
        return h_new, self._Wo @ h_new + self._bo

    def forward(self, seqs):
        seqs = [np.asarray(s, dtype=float).reshape(-1, self.in_dim) for s in seqs]
        lengths = np.array([len(s) for s in seqs])
        B, T, D, H = len(seqs), int(lengths.max()), self.in_dim, self.hidden_dim
        X = np.zeros((T, B, D))
        for b, s in enumerate(seqs):
            X[: len(s), b] = self.normalize(s)
        mask = np.arange(T)[:, None] < lengths[None, :]
        hs = np.zeros((T + 1, B, H))
        Z = np.empty((T, B, H))
        R = np.empty((T, B, H))
        C = np.empty((T, B, H))
        Wzx, Wzh = self._Wz[:, :D], self._Wz[:, D:]
        Wrx, Wrh = self._Wr[:, :D], self._Wr[:, D:]
        Wcx, Wch = self._Wc[:, :D], self._Wc[:, D:]
        XZ = X @ Wzx.T + self._bz
        XR = X @ Wrx.T + self._br
        XC = X @ Wcx.T + self._bc
        for t in range(T):
            h = hs[t]
            z = _sigmoid(XZ[t] + h @ Wzh.T)
            r = _sigmoid(XR[t] + h @ Wrh.T)
            c = np.tanh(XC[t] + (r * h) @ Wch.T)
            Z[t], R[t], C[t] = z, r, c
            hs[t + 1] = (1.0 - z) * h + z * c
        logits_all = hs[1:] @ self._Wo.T + self._bo
        # episode-major order of the valid steps
        sel = mask.T
        logits = logits_all.transpose(1, 0, 2)[sel]
        cache = (X, hs, Z, R, C, sel, T, B)
        return logits, cache

    def _scatter(self, cache, flat_vals):
        X, hs, Z, R, C, sel, T, B = cache
        full = np.zeros((B, T, flat_vals.shape[-1]))
        full[sel] = flat_vals
        return full.transpose(1, 0, 2)

    def backward(self, cache, dlogits) -> np.ndarray:
        X, hs, Z, R, C, sel, T, B = cache
        D, H = self.in_dim, self.hidden_dim
        dL = self._scatter(cache, dlogits)  # (T, B, k)
        Wzh, Wrh, Wch = self._Wz[:, D:], self._Wr[:, D:], self._Wc[:, D:]
        dWo = np.einsum("tbk,tbh->kh", dL, hs[1:])
        dbo = dL.sum(axis=(0, 1))
        dH_out = dL @ self._Wo  # (T, B, H)
        dA_z = np.empty((T, B, H))
        dA_r = np.empty((T, B, H))
        dA_c = np.empty((T, B, H))
        dh = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            h = hs[t]
            z, r, c = Z[t], R[t], C[t]
            g = dh + dH_out[t]
            dz = g * (c - h)
            dc = g * z
            dh = g * (1.0 - z)
            dac = dc * (1.0 - c * c)
            drh = dac @ Wch
            dr = drh * h
            dh += drh * r
            daz = dz * z * (1.0 - z)
            dar = dr * r * (1.0 - r)
            dh += daz @ Wzh + dar @ Wrh
            dA_z[t], dA_r[t], dA_c[t] = daz, dar, dac
        XH = np.concatenate([X, hs[:-1]], axis=2)
        RH = np.concatenate([X, R * hs[:-1]], axis=2)
        dWz = np.einsum("tbh,tbi->hi", dA_z, XH)
        dWr = np.einsum("tbh,tbi->hi", dA_r, XH)
        dWc = np.einsum("tbh,tbi->hi", dA_c, RH)
        return np.concatenate([
            dWz.ravel(), dA_z.sum(axis=(0, 1)),
            dWr.ravel(), dA_r.sum(axis=(0, 1)),
            dWc.ravel(), dA_c.sum(axis=(0, 1)),
            dWo.ravel(), dbo,
        ])

    def jvp(self, cache, v) -> np.ndarray:
        X, hs, Z, R, C, sel, T, B = cache
        D, H = self.in_dim, self.hidden_dim
        tg = self.params.unflatten(v)
        Wzh, Wrh, Wch = self._Wz[:, D:], self._Wr[:, D:], self._Wc[:, D:]
        dWz, dWr, dWc = tg["Wz"], tg["Wr"], tg["Wc"]
        XH_z = X @ dWz[:, :D].T + tg["bz"]
        XH_r = X @ dWr[:, :D].T + tg["br"]
        XH_c = X @ dWc[:, :D].T + tg["bc"]
        dh = np.zeros((B, H))
        dHs = np.empty((T, B, H))
        for t in range(T):
            h = hs[t]
            z, r, c = Z[t], R[t], C[t]
            daz = XH_z[t] + h @ dWz[:, D:].T + dh @ Wzh.T
            dar = XH_r[t] + h @ dWr[:, D:].T + dh @ Wrh.T
            dz = z * (1.0 - z) * daz
            dr = r * (1.0 - r) * dar
            rh = r * h
            drh = dr * h + r * dh
            dac = XH_c[t] + rh @ dWc[:, D:].T + drh @ Wch.T
            dc = (1.0 - c * c) * dac
            dh = -dz * h + (1.0 - z) * dh + dz * c + z * dc
            dHs[t] = dh
        dlog = hs[1:] @ tg["Wo"].T + dHs @ self._Wo.T + tg["bo"]
        return dlog.transpose(1, 0, 2)[sel]


# --- policies ---------------------------------------------------------------


class NNPolicy(Policy):
    """Stochastic categorical policy around an MLP or GRU network."""

    def __init__(self, net: _Net) -> None:
        self.net = net
        self.kind = net.kind
        self.obs_dim = net.in_dim
        self.action_count = net.out_dim
        self.recurrent = net.recurrent

    def reset(self, rng):
        return self.net.initial_hidden() if self.recurrent else None

    def distribution(self, obs, memory=None):
        """Return ``(probs, new_memory)`` for one observation."""
        if self.recurrent:
            h = self.net.initial_hidden() if memory is None else memory
            h, logits = self.net.step(h, obs)
            return softmax(logits), h
        return softmax(self.net.logits_single(obs)), None

    def act(self, obs, memory, rng):
        probs, memory = self.distribution(obs, memory)
        return sample_action(probs, rng), memory


def make_policy(kind: str, in_dim: int, out_dim: int, rng=None, obs_low=None, obs_high=None,
                hidden=None) -> NNPolicy:
    if kind == "mlp":
        net = MLP(in_dim, out_dim, hidden=hidden or (32, 32), rng=rng, obs_low=obs_low, obs_high=obs_high)
    elif kind == "gru":
        net = GRU(in_dim, out_dim, hidden=hidden or 32, rng=rng, obs_low=obs_low, obs_high=obs_high)
    else:
        raise ConfigError(f"unknown network kind {kind!r}")
    return NNPolicy(net)


def policy_observations(trajectories) -> list[np.ndarray]:
    """Per-episode observations at which actions were taken (drops the final one)."""
    return [tr.observations[:-1] for tr in trajectories]


def episode_log_prob_grad(policy: NNPolicy, trajectories, weights) -> tuple[float, ParamBundle]:
    """``loss = -sum_t w_t log pi(a_t | history)`` and its exact flat gradient."""
    logits, cache = policy.net.forward(policy_observations(trajectories))
    actions = np.concatenate([np.asarray(tr.actions, dtype=np.int64) for tr in trajectories])
    weights = np.asarray(weights, dtype=float)
    logp = log_softmax(logits)
    chosen = logp[np.arange(len(actions)), actions]
    if not np.all(np.isfinite(chosen)):
        raise NumericError("selected action has zero probability")
    loss = -float(np.dot(weights, chosen))
    probs = np.exp(logp)
    dlogits = probs * weights[:, None]
    dlogits[np.arange(len(actions)), actions] -= weights
    return loss, policy.net.params.unflatten(policy.net.backward(cache, dlogits))
