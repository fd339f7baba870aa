"""Two-stage dataset curation.

Stage one is rule-based: reject clips whose frames pitch too far, whose root
height leaves the plausible band, or whose joints move impossibly fast.
Stage two rolls a preliminary policy on each surviving clip and drops clips
it cannot complete often enough (fixed evaluation threshold, decoupled from
any sampler state). Every rejection carries a machine-readable reason.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .character import CharacterModel
from .evaluate import actor_for
from .rollout import BatchEnv, ClipCache, child_rng


@dataclass(frozen=True)
class Rejection:
    clip_id: str
    rule: str
    frame: int
    detail: str
    completion_rate: float = float("nan")


def rule_filter(clips, cfg, model=None):
    """Returns (kept, rejections); first violated rule wins per clip."""
    model = model or CharacterModel()
    h_min = cfg.height_min_frac * model.nominal_root_height
    h_max = cfg.height_max_frac * model.nominal_root_height
    kept, rejected = [], []
    for clip in clips:
        arr = clip.as_array()
        j = clip.n_joints
        pitch = arr[:, j + 3]
        height = arr[:, j + 4]
        qd = np.abs(np.diff(arr[:, :j], axis=0)) * clip.fps
        verdict = None
        bad_pitch = np.flatnonzero(np.abs(pitch) > cfg.pitch_max)
        bad_height = np.flatnonzero((height < h_min) | (height > h_max))
        bad_qd = np.flatnonzero((qd > cfg.joint_vel_max).any(axis=1))
        candidates = []
        if bad_pitch.size:
            candidates.append((int(bad_pitch[0]), "pitch", f"|pitch|={abs(pitch[bad_pitch[0]]):.3f} > {cfg.pitch_max}"))
        if bad_height.size:
            candidates.append((int(bad_height[0]), "root_height", f"height={height[bad_height[0]]:.3f} outside [{h_min:.3f}, {h_max:.3f}]"))
        if bad_qd.size:
            candidates.append((int(bad_qd[0]), "joint_velocity", f"|qd|={qd[bad_qd[0]].max():.1f} > {cfg.joint_vel_max}"))
        if candidates:
            frame, rule, detail = min(candidates)
            verdict = Rejection(clip.id, rule, frame, detail)
        if verdict is None:
            kept.append(clip)
        else:
            rejected.append(verdict)
    return kept, rejected


def completion_rate(policy_spec, clip, env_cfg, cfg, model, seed=0):
    """Fraction of episodes the policy completes on one clip.

    One episode per environment instance; episodes differ through their
    per-episode randomization draws and reset noise. The termination
    threshold is fixed at the loose evaluation value.
    """
    cache = ClipCache(clip, env_cfg)
    n = cfg.episodes_per_clip
    env = BatchEnv(model, env_cfg, n, seed=seed, eval_mode=False, terminate=True)
    actor, _ = actor_for(policy_spec, n_envs=n)
    for i in range(n):
        env.reset_env(i, cache, cfg.completion_threshold)
        actor.reset(i, env)
    done_mask = np.zeros(n, dtype=bool)
    completed = np.zeros(n, dtype=bool)
    for _ in range(cache.n_steps):
        o, e, g, win = env.get_obs()
        actions = actor.act(env, o, e, g, win)
        _, dones, records = env.step(actions)
        # records align with flatnonzero(dones); harvest each instance once
        for rec, i in zip(records, np.flatnonzero(dones)):
            if not done_mask[i]:
                completed[i] = rec.completed
                done_mask[i] = True
        if done_mask.all():
            break
        for i in np.flatnonzero(dones):
            env.reset_env(i, cache, cfg.completion_threshold)
    return float(completed.sum()) / n


def completion_filter(clips, policy_spec, env_cfg, cfg, model=None, seed=0):
    """Returns (kept, rejections with completion rates)."""
    model = model or CharacterModel()
    kept, rejected = [], []
    for clip in clips:
        rate = completion_rate(policy_spec, clip, env_cfg, cfg, model, seed=seed)
        if rate >= cfg.min_completion_rate:
            kept.append(clip)
        else:
            rejected.append(
                Rejection(clip.id, "completion", -1,
                          f"completion {rate:.2f} < {cfg.min_completion_rate}", rate)
            )
    return kept, rejected


def write_report(kept, rejections, path):
    """Tabular curation report: clip_id, verdict, reason, completion_rate."""
    lines = ["clip_id\tverdict\treason\tcompletion_rate"]
    for clip in kept:
        lines.append(f"{clip.id}\tkept\t\t")
    for r in sorted(rejections, key=lambda x: x.clip_id):
        rate = "" if np.isnan(r.completion_rate) else repr(r.completion_rate)
        frame = f"@frame{r.frame}" if r.frame >= 0 else ""
        lines.append(f"{r.clip_id}\trejected\t{r.rule}{frame}:{r.detail}\t{rate}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
