"""Student training by DAgger: roll out under a beta-mixture of teacher and
student, label every visited state with the teacher's mean action, regress
the student on the aggregated dataset with an l2 loss.

beta anneals linearly from 1 (pure teacher rollouts) to 0 over the first
`beta_frac` fraction of rounds; afterwards the student drives and the
teacher only labels. Labels are noise-free teacher means.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .character import CharacterModel
from .errors import SchemaError
from .motion import goal_feature_width
from .nets import Adam, ParamVector
from .policy import PolicyDims, StudentPolicy, load_teacher, save_student
from .rollout import BatchEnv, ClipCache, child_rng
from .sampler import ClippedDataset, SamplerState, sample_clip
from .sim import obs_width, priv_width


def l2_loss(student, batch):
    """Mean squared L2 distance between student outputs and teacher labels.

    batch: dict with hist (B, H, obs), g, win, labels (B, J). Returns a
    differentiable scalar.
    """
    pred = student.forward(Tensor(batch["hist"]), Tensor(batch["g"]), Tensor(batch["win"]))
    d = pred - batch["labels"]
    return (d * d).sum(axis=-1).mean()


def action_gap_rms(pred, labels):
    """Root-mean-square per-joint action gap."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(labels, dtype=np.float64)
    return float(np.sqrt(np.mean(d * d)))


def beta_schedule(round_idx, rounds, beta_frac):
    """Linear 1 -> 0 over the first beta_frac of rounds, then 0."""
    anneal = max(1, int(np.ceil(beta_frac * rounds)))
    return max(0.0, 1.0 - round_idx / anneal)


class DaggerBuffer:
    """FIFO-capped aggregated dataset of (history, goal, window, label)."""

    def __init__(self, cap):
        self.cap = cap
        self.hist = None
        self.g = None
        self.win = None
        self.labels = None

    def add(self, hist, g, win, labels):
        def cat(old, new):
            out = new if old is None else np.concatenate([old, new])
            return out[-self.cap :] if out.shape[0] > self.cap else out

        self.hist = cat(self.hist, hist)
        self.g = cat(self.g, g)
        self.win = cat(self.win, win)
        self.labels = cat(self.labels, labels)

    @property
    def size(self):
        return 0 if self.hist is None else self.hist.shape[0]


def dagger_round(teacher, student, env, caches, sampler, dcfg, buffer, opt, params,
                 rng_sample, rng_mix, beta):
    """One DAgger round: collect with beta-mixing, aggregate, regress.

    Returns (gap_before, gap_after, n_samples) where the gaps are the RMS
    per-joint action difference on this round's freshly visited states,
    before and after the gradient steps.
    """
    if teacher.dims.action != student.dims.action or teacher.dims.obs != student.dims.obs:
        raise SchemaError("teacher/student schema mismatch")
    n, h = env.n, student.history_len
    hist = np.zeros((n, h, student.dims.obs), dtype=np.float32)
    new_hist, new_g, new_win, new_labels, new_pred = [], [], [], [], []

    for _ in range(dcfg.steps_per_env):
        o, e, g, win = env.get_obs()
        hist = np.roll(hist, -1, axis=1)
        hist[:, -1, :] = o
        with ad.no_grad():
            teacher_mean, _, _, _ = teacher.forward(o, e, g, win)
            student_mean = student.forward(hist, g, win)
        labels = teacher_mean.data.astype(np.float64)
        preds = student_mean.data.astype(np.float64)
        use_teacher = rng_mix.random(n) < beta
        actions = np.where(use_teacher[:, None], labels, preds)
        new_hist.append(hist.copy())
        new_g.append(g)
        new_win.append(win)
        new_labels.append(labels.astype(np.float32))
        new_pred.append(preds)
        _, dones, records = env.step(actions)
        for rec in records:
            sampler.update(rec.clip_id, rec.completed, rec.max_keybody_error)
        for i in np.flatnonzero(dones):
            cid = sample_clip(sampler, rng_sample)
            env.reset_env(i, caches[cid], dcfg.termination_threshold)
            hist[i] = 0.0

    fresh_hist = np.concatenate(new_hist)
    fresh_g = np.concatenate(new_g)
    fresh_win = np.concatenate(new_win)
    fresh_labels = np.concatenate(new_labels)
    gap_before = action_gap_rms(np.concatenate(new_pred), fresh_labels)
    buffer.add(fresh_hist, fresh_g, fresh_win, fresh_labels)

    total = buffer.size
    mb = min(dcfg.minibatch_size, total)
    rng_shuffle = rng_mix  # shared stream keeps the round fully seeded
    for _ in range(dcfg.epochs):
        order = rng_shuffle.permutation(total)
        for start in range(0, total, mb):
            idx = order[start : start + mb]
            batch = {
                "hist": buffer.hist[idx],
                "g": buffer.g[idx],
                "win": buffer.win[idx],
                "labels": buffer.labels[idx],
            }
            loss = l2_loss(student, batch)
            params.zero_grad()
            loss.backward()
            opt.step()

    with ad.no_grad():
        after = student.forward(fresh_hist, fresh_g, fresh_win).data
    gap_after = action_gap_rms(after, fresh_labels)
    return gap_before, gap_after, fresh_hist.shape[0]


@dataclass
class DistillResult:
    checkpoint: str
    log_path: str
    log_rows: list
    student: object


def train_student(teacher_ckpt, parents, env_cfg, dcfg, seed, out_dir, model=None, progress=None):
    """Full student run against a trained teacher checkpoint."""
    os.makedirs(out_dir, exist_ok=True)
    model = model or CharacterModel()
    if isinstance(teacher_ckpt, (str, os.PathLike)):
        teacher, _, _ = load_teacher(teacher_ckpt)
    else:
        teacher = teacher_ckpt
    j, k = model.n_joints, model.n_keybodies
    dims = PolicyDims(
        obs=obs_width(j), priv=priv_width(j, k), goal=goal_feature_width(j, k),
        window_len=env_cfg.window_len, action=j,
    )
    student = StudentPolicy(
        dims, history_len=dcfg.history_len, hidden=dcfg.hidden,
        z_dim=teacher.z_dim, enc_channels=teacher.encoder.channels,
        enc_kernel=teacher.encoder.kernel, enc_stride=teacher.encoder.stride,
        rng=child_rng(seed, 12),
    )
    params = ParamVector(student.named_parameters())
    opt = Adam(params.tensors, lr=dcfg.lr)

    dataset = ClippedDataset.from_parents(parents, child_rng(seed, 11))
    caches = {c.id: ClipCache(c, env_cfg) for c in dataset.clips}
    sampler = SamplerState.for_clips(dataset.clips)
    env = BatchEnv(model, env_cfg, dcfg.n_envs, seed=seed + 50_000)
    rng_sample = child_rng(seed, 13)
    rng_mix = child_rng(seed, 14)
    buffer = DaggerBuffer(dcfg.buffer_cap)
    for i in range(dcfg.n_envs):
        cid = sample_clip(sampler, rng_sample)
        env.reset_env(i, caches[cid], dcfg.termination_threshold)

    header = "round\tbeta\tbuffer_size\tmean_action_gap\tgap_after"
    rows = []
    for r in range(dcfg.rounds):
        beta = beta_schedule(r, dcfg.rounds, dcfg.beta_frac)
        gap_before, gap_after, _ = dagger_round(
            teacher, student, env, caches, sampler, dcfg, buffer, opt, params,
            rng_sample, rng_mix, beta,
        )
        rows.append(f"{r}\t{beta!r}\t{buffer.size}\t{gap_before!r}\t{gap_after!r}")
        if progress is not None:
            progress(r, rows[-1])
    ckpt = os.path.join(out_dir, "student_final.ckpt")
    save_student(ckpt, student)
    log_path = os.path.join(out_dir, "distill_log.tsv")
    with open(log_path, "w") as f:
        f.write(header + "\n")
        f.write("\n".join(rows) + "\n")
    return DistillResult(checkpoint=ckpt, log_path=log_path, log_rows=rows, student=student)
