"""Teacher training: adaptive-sampler-driven rollouts, GAE, clipped PPO.

One iteration collects `steps_per_env` control steps from every parallel
environment, reports finished episodes to the sampler, estimates advantages
with GAE, then runs several epochs of minibatch updates on the clipped
surrogate plus value regression. Re-clipping swaps the active sub-clip set
periodically (in-flight episodes restart on the fresh clips). Everything is
seeded; identical seeds give byte-identical logs and checkpoints.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .character import CharacterModel
from .errors import MimicLabError, TrainingDiverged
from .motion import goal_feature_width
from .nets import Adam, ParamVector
from .policy import (
    MoEPolicy,
    PolicyDims,
    ValueNet,
    gaussian_entropy,
    gaussian_log_prob,
    gaussian_log_prob_np,
    save_teacher,
)
from .rollout import BatchEnv, ClipCache, child_rng
from .sampler import ClippedDataset, SamplerState, periodic_reclip, sample_clip
from .sim import obs_width, priv_width


def compute_gae(rewards, values, dones, gamma, lam, bootstrap=None):
    """Generalized advantage estimation over time-major arrays.

    rewards/values/dones: (T,) or (T, N); `bootstrap` is the value of the
    state after the last step (zeros when omitted); dones cut the recursion.
    Returns (advantages, returns) with returns = advantages + values.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if rewards.shape != values.shape or rewards.shape != dones.shape:
        raise MimicLabError("GAE inputs must share a shape")
    squeeze = rewards.ndim == 1
    if squeeze:
        rewards, values, dones = rewards[:, None], values[:, None], dones[:, None]
    t_len, n = rewards.shape
    next_value = np.zeros(n) if bootstrap is None else np.asarray(bootstrap, dtype=np.float64)
    adv = np.zeros_like(rewards)
    gae = np.zeros(n)
    for t in range(t_len - 1, -1, -1):
        not_done = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * not_done - values[t]
        gae = delta + gamma * lam * not_done * gae
        adv[t] = gae
        next_value = values[t]
    returns = adv + values
    if squeeze:
        return adv[:, 0], returns[:, 0]
    return adv, returns


@dataclass
class RolloutBatch:
    """Flattened on-policy batch plus per-episode records."""

    o: np.ndarray
    e: np.ndarray
    g: np.ndarray
    win: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    clip_ids: list
    advantages: np.ndarray = None
    returns: np.ndarray = None
    episodes: list = None

    @property
    def size(self):
        return self.o.shape[0] * self.o.shape[1]

    def flat(self, arr):
        return arr.reshape((-1,) + arr.shape[2:])


def ppo_loss(policy, critic, batch, cfg):
    """Clipped-surrogate + value + entropy loss over one minibatch.

    `batch` is a dict of arrays (o, e, g, win, actions, old_logp, adv,
    returns). Returns (scalar loss Tensor, diagnostics dict).
    """
    o, e, g, win = Tensor(batch["o"]), Tensor(batch["e"]), Tensor(batch["g"]), Tensor(batch["win"])
    mean, _, _, _ = policy.forward(o, e, g, win)
    new_logp = gaussian_log_prob(mean, policy.log_std, batch["actions"])
    ratio = ad.exp(new_logp - batch["old_logp"])
    adv = batch["adv"]
    surrogate = ad.minimum(ratio * adv, ad.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv)
    policy_loss = -surrogate.mean()
    values = critic.forward(o, e, g, win)
    value_err = values - batch["returns"]
    value_loss = (value_err * value_err).mean()
    entropy = gaussian_entropy(policy.log_std)
    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy

    if not np.isfinite(loss.data):
        raise MimicLabError(
            f"non-finite PPO loss (policy={policy_loss.data}, value={value_loss.data})"
        )
    r = ratio.data
    diags = {
        "clip_fraction": float(np.mean(np.abs(r - 1.0) > cfg.clip_eps)),
        "approx_kl": float(np.mean(batch["old_logp"] - new_logp.data)),
        "policy_loss": float(policy_loss.data),
        "value_loss": float(value_loss.data),
    }
    return loss, diags


def normalize_advantages(adv):
    mean = adv.mean()
    std = adv.std()
    return (adv - mean) / (std + 1e-8)


class TeacherTrainer:
    """Owns the policy, critic, optimizer, sampler, and environments."""

    def __init__(self, parents, env_cfg, cfg, seed, model=None):
        self.env_cfg = env_cfg
        self.cfg = cfg
        self.seed = seed
        self.model = model or CharacterModel()
        j, k = self.model.n_joints, self.model.n_keybodies
        self.dims = PolicyDims(
            obs=obs_width(j),
            priv=priv_width(j, k),
            goal=goal_feature_width(j, k),
            window_len=env_cfg.window_len,
            action=j,
        )
        arch = dict(
            hidden=cfg.hidden, z_dim=cfg.z_dim, enc_channels=cfg.enc_channels,
            enc_kernel=cfg.enc_kernel, enc_stride=cfg.enc_stride,
        )
        self.policy = MoEPolicy(self.dims, n_experts=cfg.n_experts,
                                log_std_init=cfg.log_std_init, rng=child_rng(seed, 2), **arch)
        self.critic = ValueNet(self.dims, rng=child_rng(seed, 3), **arch)
        self.params = ParamVector(
            self.policy.named_parameters("actor.") + self.critic.named_parameters("critic.")
        )
        self.opt = Adam(self.params.tensors, lr=cfg.lr)

        self.dataset = ClippedDataset.from_parents(
            parents, child_rng(seed, 1), cfg.clip_max_len, cfg.clip_max_offset
        )
        self.sampler = SamplerState.for_clips(self.dataset.clips, cfg.reclip_period)
        self.caches = {c.id: ClipCache(c, env_cfg) for c in self.dataset.clips}
        self.env = BatchEnv(self.model, env_cfg, cfg.n_envs, seed=seed)
        self.rng_sample = child_rng(seed, 4)
        self.rng_action = child_rng(seed, 5)
        self.rng_shuffle = child_rng(seed, 6)
        for i in range(cfg.n_envs):
            self._assign_clip(i)

    # -- sampler interaction -----------------------------------------------------

    def _pick_clip_id(self):
        if self.cfg.sampler_mode == "uniform":
            ids = list(self.sampler.entries)
            return ids[int(self.rng_sample.integers(len(ids)))]
        return sample_clip(self.sampler, self.rng_sample)

    def _threshold(self, clip_id):
        if self.cfg.sampler_mode == "uniform":
            return self.cfg.uniform_threshold
        return self.sampler.threshold_for(clip_id)

    def _assign_clip(self, i):
        cid = self._pick_clip_id()
        self.env.reset_env(i, self.caches[cid], self._threshold(cid))

    # -- rollout -------------------------------------------------------------------

    def collect(self):
        cfg, env = self.cfg, self.env
        t_len, n = cfg.steps_per_env, cfg.n_envs
        o_buf = np.empty((t_len, n, self.dims.obs), dtype=np.float32)
        e_buf = np.empty((t_len, n, self.dims.priv), dtype=np.float32)
        g_buf = np.empty((t_len, n, self.dims.goal), dtype=np.float32)
        w_buf = np.empty((t_len, n, self.dims.window_len, self.dims.goal), dtype=np.float32)
        a_buf = np.empty((t_len, n, self.dims.action), dtype=np.float32)
        lp_buf = np.empty((t_len, n))
        r_buf = np.empty((t_len, n))
        v_buf = np.empty((t_len, n))
        d_buf = np.zeros((t_len, n))
        episodes = []
        log_std = self.policy.log_std.data.astype(np.float64)
        std = np.exp(log_std)
        for t in range(t_len):
            o, e, g, win = env.get_obs()
            with ad.no_grad():
                mean, _, _, _ = self.policy.forward(o, e, g, win)
                values = self.critic.forward(o, e, g, win)
            mean = mean.data.astype(np.float64)
            noise = self.rng_action.standard_normal(mean.shape)
            actions = mean + std * noise
            o_buf[t], e_buf[t], g_buf[t], w_buf[t] = o, e, g, win
            a_buf[t] = actions.astype(np.float32)
            lp_buf[t] = gaussian_log_prob_np(mean, log_std, actions)
            v_buf[t] = values.data.astype(np.float64)
            rewards, dones, records = env.step(actions)
            r_buf[t] = rewards
            d_buf[t] = dones.astype(np.float64)
            for rec in records:
                self.sampler.update(rec.clip_id, rec.completed, rec.max_keybody_error)
                episodes.append(rec)
            for i in np.flatnonzero(dones):
                self._assign_clip(i)
        o, e, g, win = env.get_obs()
        with ad.no_grad():
            bootstrap = self.critic.forward(o, e, g, win).data.astype(np.float64)
        batch = RolloutBatch(
            o=o_buf, e=e_buf, g=g_buf, win=w_buf, actions=a_buf, log_probs=lp_buf,
            rewards=r_buf, values=v_buf, dones=d_buf, clip_ids=[], episodes=episodes,
        )
        adv, ret = compute_gae(
            cfg.reward_scale * r_buf, v_buf, d_buf, cfg.gamma, cfg.gae_lambda, bootstrap
        )
        batch.advantages, batch.returns = adv, ret
        return batch

    # -- optimization ----------------------------------------------------------------

    def update(self, batch):
        cfg = self.cfg
        total = batch.size
        flat = {
            "o": batch.flat(batch.o),
            "e": batch.flat(batch.e),
            "g": batch.flat(batch.g),
            "win": batch.flat(batch.win),
            "actions": batch.flat(batch.actions),
            "old_logp": batch.log_probs.reshape(-1),
            "returns": batch.returns.reshape(-1).astype(np.float32),
        }
        adv = normalize_advantages(batch.advantages.reshape(-1)).astype(np.float32)
        diags = None
        mb = min(cfg.minibatch_size, total)
        for _ in range(cfg.epochs):
            order = self.rng_shuffle.permutation(total)
            for start in range(0, total, mb):
                idx = order[start : start + mb]
                mini = {k: v[idx] for k, v in flat.items()}
                mini["adv"] = adv[idx]
                loss, diags = ppo_loss(self.policy, self.critic, mini, cfg)
                self.params.zero_grad()
                loss.backward()
                self.opt.step()
        return diags

    # -- re-clipping -------------------------------------------------------------------

    def reclip(self):
        self.dataset, self.sampler = periodic_reclip(
            self.sampler, self.dataset, self.rng_sample,
            max_len=self.cfg.clip_max_len, max_offset=self.cfg.clip_max_offset,
        )
        self.caches = {c.id: ClipCache(c, self.env_cfg) for c in self.dataset.clips}
        for i in range(self.cfg.n_envs):
            self._assign_clip(i)


def _fmt(x):
    return repr(float(x))


@dataclass
class TrainResult:
    checkpoints: list
    final_checkpoint: str
    log_path: str
    log_rows: list
    trainer: object


def train_teacher(parents, env_cfg, cfg, seed, out_dir, model=None, progress=None):
    """Full teacher run; writes checkpoints, sampler snapshots, and log.tsv."""
    os.makedirs(out_dir, exist_ok=True)
    trainer = TeacherTrainer(parents, env_cfg, cfg, seed, model=model)
    from .evaluate import nearest_rank_percentile  # local import: no cycle at module load

    header = "iteration\tmean_reward\tcompletion_rate\tmean_mpkpe\tp99_mpkpe\tclip_fraction\tapprox_kl"
    rows = []
    checkpoints = []
    last_ckpt = None
    for it in range(1, cfg.iterations + 1):
        batch = trainer.collect()
        try:
            diags = trainer.update(batch)
        except MimicLabError as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}", last_checkpoint=last_ckpt) from exc
        eps = batch.episodes
        n_comp = sum(1 for r in eps if r.completed)
        mpkpes = np.array([r.mean_mpkpe_mm for r in eps]) if eps else np.zeros(0)
        row = "\t".join(
            [
                str(it),
                _fmt(batch.rewards.mean()),
                _fmt(n_comp / len(eps) if eps else 0.0),
                _fmt(mpkpes.mean() if len(mpkpes) else 0.0),
                _fmt(nearest_rank_percentile(mpkpes, 99.0) if len(mpkpes) else 0.0),
                _fmt(diags["clip_fraction"]),
                _fmt(diags["approx_kl"]),
            ]
        )
        rows.append(row)
        trainer.sampler.iteration = it
        if cfg.reclip_period > 0 and it % cfg.reclip_period == 0 and it < cfg.iterations:
            trainer.reclip()
        if it % cfg.checkpoint_every == 0 or it == cfg.iterations:
            ckpt = os.path.join(out_dir, f"teacher_{it:05d}.ckpt")
            save_teacher(ckpt, trainer.policy, trainer.critic)
            from .sampler import save_sampler_state

            save_sampler_state(trainer.sampler, os.path.join(out_dir, f"sampler_{it:05d}.txt"))
            checkpoints.append(ckpt)
            last_ckpt = ckpt
        if progress is not None:
            progress(it, rows[-1])
    log_path = os.path.join(out_dir, "log.tsv")
    with open(log_path, "w") as f:
        f.write(header + "\n")
        f.write("\n".join(rows) + "\n")
    return TrainResult(
        checkpoints=checkpoints,
        final_checkpoint=checkpoints[-1],
        log_path=log_path,
        log_rows=rows,
        trainer=trainer,
    )
