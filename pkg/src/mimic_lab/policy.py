"""Tracking policies: soft mixture-of-experts teacher, critic, student.

The teacher actor is n expert MLPs plus a gating MLP over the same input
[o_t, e_t, g_t, z_t], where z_t is the conv-encoded future-motion window.
The combined action mean is the gating-probability-weighted sum of expert
means, with one shared diagonal-Gaussian noise head. The student swaps the
privileged e_t for a 21-frame proprioception history and owns its own window
encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import MimicLabError, SchemaError
from .motion import TrackingGoal, goal_features
from .nets import MLP, Module, ParamVector, WindowEncoder, load_params, restore_into, save_params

LOG2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class PolicyDims:
    """Input/output widths shared by teacher, critic, and student."""

    obs: int
    priv: int
    goal: int
    window_len: int
    action: int

    @property
    def window_feat(self):
        return self.goal


def _as_batch(x, width, name):
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise SchemaError(f"{name}: expected (B, {width}), got {x.shape}")
    return x


class MoEPolicy(Module):
    def __init__(self, dims, n_experts=4, hidden=(128, 128), z_dim=128,
                 enc_channels=(32, 32), enc_kernel=4, enc_stride=2,
                 log_std_init=-1.2, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dims = dims
        self.n_experts = n_experts
        self.z_dim = z_dim
        self.encoder = self.child(
            "encoder",
            WindowEncoder(dims.window_feat, dims.window_len, z_dim, enc_channels, enc_kernel, enc_stride, rng),
        )
        in_dim = dims.obs + dims.priv + dims.goal + z_dim
        self.in_dim = in_dim
        self.experts = [
            self.child(f"expert{i}", MLP(in_dim, hidden, dims.action, rng, out_scale=0.01))
            for i in range(n_experts)
        ]
        self.gating = self.child("gating", MLP(in_dim, hidden, n_experts, rng, out_scale=0.01))
        self.log_std = self.param("log_std", np.full(dims.action, log_std_init))

    def forward(self, o, e, g, window):
        """Returns (mean (B,J), gate probs (B,n), expert means (B,n,J), z (B,z))."""
        if not isinstance(o, Tensor):
            o, e, g, window = Tensor(o), Tensor(e), Tensor(g), Tensor(window)
        z = self.encoder(window)
        x = ad.concat([o, e, g, z], axis=1)
        if x.data.shape[1] != self.in_dim:
            raise SchemaError(f"policy input width {x.data.shape[1]} != expected {self.in_dim}")
        expert_means = ad.stack([net(x) for net in self.experts], axis=1)  # (B, n, J)
        probs = ad.softmax(self.gating(x), axis=-1)  # (B, n)
        b, n = probs.data.shape
        mean = (ad.reshape(probs, (b, n, 1)) * expert_means).sum(axis=1)
        return mean, probs, expert_means, z


class ValueNet(Module):
    """Privileged critic over the same concatenated input as the actor."""

    def __init__(self, dims, hidden=(128, 128), z_dim=128,
                 enc_channels=(32, 32), enc_kernel=4, enc_stride=2, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(1)
        self.dims = dims
        self.encoder = self.child(
            "encoder",
            WindowEncoder(dims.window_feat, dims.window_len, z_dim, enc_channels, enc_kernel, enc_stride, rng),
        )
        self.mlp = self.child("mlp", MLP(dims.obs + dims.priv + dims.goal + z_dim, hidden, 1, rng))

    def forward(self, o, e, g, window):
        if not isinstance(o, Tensor):
            o, e, g, window = Tensor(o), Tensor(e), Tensor(g), Tensor(window)
        z = self.encoder(window)
        x = ad.concat([o, e, g, z], axis=1)
        return ad.reshape(self.mlp(x), (-1,))


class StudentPolicy(Module):
    """Deployable policy: proprioception history + goal inputs, no e_t."""

    def __init__(self, dims, history_len=21, hidden=(256, 256), z_dim=128,
                 enc_channels=(32, 32), enc_kernel=4, enc_stride=2, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(2)
        self.dims = dims
        self.history_len = history_len
        self.z_dim = z_dim
        self.encoder = self.child(
            "encoder",
            WindowEncoder(dims.window_feat, dims.window_len, z_dim, enc_channels, enc_kernel, enc_stride, rng),
        )
        in_dim = history_len * dims.obs + dims.goal + z_dim
        self.trunk = self.child("trunk", MLP(in_dim, hidden, dims.action, rng, out_scale=0.01))

    def forward(self, obs_history, g, window):
        """obs_history: (B, history_len, obs). Never reads privileged e_t."""
        if not isinstance(g, Tensor):
            obs_history, g, window = Tensor(obs_history), Tensor(g), Tensor(window)
        b, h, d = obs_history.data.shape
        if h != self.history_len or d != self.dims.obs:
            raise SchemaError(
                f"history shape {(h, d)} != expected ({self.history_len}, {self.dims.obs})"
            )
        z = self.encoder(window)
        flat = ad.reshape(obs_history, (b, h * d))
        x = ad.concat([flat, g, z], axis=1)
        return self.trunk(x)


# -- spec-level operations ------------------------------------------------------


def _goal_arrays(goal, batch=1):
    if isinstance(goal, TrackingGoal):
        g, win = goal_features(goal)
        return np.tile(g, (batch, 1)), np.tile(win, (batch, 1, 1))
    raise SchemaError("expected a TrackingGoal")


def moe_forward(policy, o, e, goal):
    """Soft-MoE combination a = sum_i p_i a_i.

    `goal` may be a TrackingGoal or an (immediate, window) array pair.
    Returns (mean action, gating probs, per-expert actions, window latent)
    as numpy arrays without batch dims when the inputs were single.
    """
    single = np.asarray(o).ndim == 1
    o = _as_batch(o, policy.dims.obs, "o_t")
    e = _as_batch(e, policy.dims.priv, "e_t")
    if isinstance(goal, TrackingGoal):
        g, win = _goal_arrays(goal, batch=o.shape[0])
    else:
        g, win = goal
        g = _as_batch(g, policy.dims.goal, "goal")
        win = np.asarray(win)
        if win.ndim == 2:
            win = win[None]
    with ad.no_grad():
        mean, probs, experts, z = policy.forward(o, e, g, win)
    out = (mean.data, probs.data, experts.data, z.data)
    if single:
        out = tuple(a[0] for a in out)
    return out


def encode_window(encoder, window):
    """Latent vector for one window or a batch of windows."""
    window = np.asarray(window)
    single = window.ndim == 2
    if single:
        window = window[None]
    with ad.no_grad():
        z = encoder(Tensor(window))
    return z.data[0] if single else z.data


def student_forward(student, obs_history, goal):
    obs_history = np.asarray(obs_history)
    single = obs_history.ndim == 2
    if single:
        obs_history = obs_history[None]
    if isinstance(goal, TrackingGoal):
        g, win = _goal_arrays(goal, batch=obs_history.shape[0])
    else:
        g, win = goal
        if np.asarray(g).ndim == 1:
            g, win = np.asarray(g)[None], np.asarray(win)[None]
    with ad.no_grad():
        mean = student.forward(obs_history, g, win)
    return mean.data[0] if single else mean.data


def sample_action(policy, mean, rng):
    """Diagonal-Gaussian sample around the combined mean, with its log-density."""
    mean = np.asarray(mean, dtype=np.float64)
    if not np.all(np.isfinite(mean)):
        raise MimicLabError("non-finite action mean")
    log_std = policy.log_std.data.astype(np.float64)
    std = np.exp(log_std)
    noise = rng.standard_normal(mean.shape)
    action = mean + std * noise
    log_prob = gaussian_log_prob_np(mean, log_std, action)
    return action, log_prob


def gaussian_log_prob_np(mean, log_std, action):
    d = (action - mean) / np.exp(log_std)
    return -0.5 * np.sum(d * d, axis=-1) - np.sum(log_std) - 0.5 * mean.shape[-1] * LOG2PI


def gaussian_log_prob(mean, log_std, action):
    """Differentiable log-density of `action` (constant) under the policy head."""
    action = action if isinstance(action, Tensor) else Tensor(action)
    inv_std = ad.exp(-log_std)
    d = (action - mean) * inv_std
    j = mean.data.shape[-1]
    return (d * d).sum(axis=-1) * (-0.5) - log_std.sum() - 0.5 * j * LOG2PI


def gaussian_entropy(log_std):
    """Entropy of the diagonal-Gaussian head (differentiable scalar)."""
    j = log_std.data.shape[0]
    return log_std.sum() + 0.5 * j * (1.0 + LOG2PI)


# -- checkpoints ------------------------------------------------------------------


def _arch_meta(kind, dims, **extra):
    meta = {
        "kind": kind,
        "schema": 1,
        "obs": dims.obs,
        "priv": dims.priv,
        "goal": dims.goal,
        "window_len": dims.window_len,
        "action": dims.action,
    }
    meta.update(extra)
    return meta


def _meta_tuple(meta, key):
    return tuple(int(x) for x in meta[key].split(";"))


def save_teacher(path, policy, critic):
    meta = _arch_meta(
        "teacher",
        policy.dims,
        n_experts=policy.n_experts,
        z_dim=policy.z_dim,
        hidden=";".join(str(s) for s in policy.experts[0].sizes[1:-1]),
        enc_channels=";".join(str(c) for c in policy.encoder.channels),
        enc_kernel=policy.encoder.kernel,
        enc_stride=policy.encoder.stride,
    )
    pv = ParamVector(policy.named_parameters("actor.") + critic.named_parameters("critic."))
    save_params(path, meta, pv)


def load_teacher(path):
    meta, arrays = load_params(path)
    if meta.get("kind") != "teacher":
        raise SchemaError(f"{path}: not a teacher checkpoint (kind={meta.get('kind')!r})")
    dims = PolicyDims(
        obs=int(meta["obs"]), priv=int(meta["priv"]), goal=int(meta["goal"]),
        window_len=int(meta["window_len"]), action=int(meta["action"]),
    )
    kw = dict(
        hidden=_meta_tuple(meta, "hidden"),
        z_dim=int(meta["z_dim"]),
        enc_channels=_meta_tuple(meta, "enc_channels"),
        enc_kernel=int(meta["enc_kernel"]),
        enc_stride=int(meta["enc_stride"]),
    )
    policy = MoEPolicy(dims, n_experts=int(meta["n_experts"]), **kw)
    critic = ValueNet(dims, **{k: v for k, v in kw.items() if k != "z_dim"}, z_dim=int(meta["z_dim"]))
    pv = ParamVector(policy.named_parameters("actor.") + critic.named_parameters("critic."))
    restore_into(pv, arrays)
    return policy, critic, meta


def save_student(path, student):
    meta = _arch_meta(
        "student",
        student.dims,
        history_len=student.history_len,
        z_dim=student.z_dim,
        hidden=";".join(str(s) for s in student.trunk.sizes[1:-1]),
        enc_channels=";".join(str(c) for c in student.encoder.channels),
        enc_kernel=student.encoder.kernel,
        enc_stride=student.encoder.stride,
    )
    save_params(path, meta, ParamVector(student.named_parameters()))


def load_student(path):
    meta, arrays = load_params(path)
    if meta.get("kind") != "student":
        raise SchemaError(f"{path}: not a student checkpoint (kind={meta.get('kind')!r})")
    dims = PolicyDims(
        obs=int(meta["obs"]), priv=int(meta["priv"]), goal=int(meta["goal"]),
        window_len=int(meta["window_len"]), action=int(meta["action"]),
    )
    student = StudentPolicy(
        dims,
        history_len=int(meta["history_len"]),
        hidden=_meta_tuple(meta, "hidden"),
        z_dim=int(meta["z_dim"]),
        enc_channels=_meta_tuple(meta, "enc_channels"),
        enc_kernel=int(meta["enc_kernel"]),
        enc_stride=int(meta["enc_stride"]),
    )
    restore_into(ParamVector(student.named_parameters()), arrays)
    return student, meta


def load_any_policy(path):
    """Dispatch on the checkpoint kind; returns ('teacher'|'student', nets...)."""
    meta, _ = load_params(path)
    kind = meta.get("kind")
    if kind == "teacher":
        policy, critic, meta = load_teacher(path)
        return "teacher", policy, critic, meta
    if kind == "student":
        student, meta = load_student(path)
        return "student", student, None, meta
    raise SchemaError(f"{path}: unknown checkpoint kind {kind!r}")
