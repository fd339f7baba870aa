"""Tracking metrics, percentile tables, gating traces, run comparison.

Evaluation rolls the deterministic mean action with randomization disabled
and no early termination, so reported numbers are reproducible. Keybody
errors are measured heading-local (each character relative to its own root),
which makes the position metric invariant to a shared rigid offset between
rollout and reference.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .character import CharacterModel
from .errors import MimicLabError, SchemaError
from .policy import load_any_policy
from .rollout import BatchEnv, ClipCache, PlaybackActor, StudentActor, TeacherActor, run_episode

METRIC_NAMES = ("mpkpe_mm", "mpjpe_rad", "vel_ms", "yaw_vel_rads")
PERCENTILES = (50.0, 90.0, 95.0, 99.0, 100.0)


def nearest_rank_percentile(values, p):
    """Smallest sample value strictly greater than p% of the sample
    (clamped to the maximum); on {1..100}, p99 -> 100."""
    values = np.sort(np.asarray(values, dtype=np.float64))
    if values.size == 0:
        raise MimicLabError("percentile of empty sample")
    idx = min(values.size - 1, int(np.floor(p / 100.0 * values.size)))
    return float(values[idx])


def tracking_metrics(traj, clip, cfg):
    """Four tracking errors of a recorded trajectory against its clip.

    mpkpe: mean heading-local keybody position error (mm); mpjpe: mean
    absolute joint error (rad); vel: mean planar base velocity error norm
    (m/s); yaw_vel: mean absolute pitch-rate error (rad/s, the planar
    heading-rate analog).
    """
    cache = clip if isinstance(clip, ClipCache) else ClipCache(clip, cfg)
    n = traj.q.shape[0]
    if n < 1 or n > cache.n_steps:
        raise MimicLabError(
            f"trajectory length {n} incompatible with clip of {cache.n_steps} control steps"
        )
    ref = slice(1, n + 1)
    kb_local_sim = traj.keybodies_world - traj.root_pos[:, None, :]
    kb_err = np.linalg.norm(kb_local_sim - cache.kb_local[ref], axis=2).mean()
    mpjpe = np.abs(traj.q - cache.q[ref]).mean()
    vel = np.linalg.norm(traj.root_vel - cache.lin_vel[ref], axis=1).mean()
    yaw_vel = np.abs(traj.pitch_rate - cache.ang_vel[ref]).mean()
    return {
        "mpkpe_mm": float(kb_err * 1000.0),
        "mpjpe_rad": float(mpjpe),
        "vel_ms": float(vel),
        "yaw_vel_rads": float(yaw_vel),
    }


def actor_for(policy_spec, n_envs=1):
    """Build an actor from a checkpoint path, a live policy object, or the
    reserved name 'playback'."""
    if policy_spec == "playback":
        return PlaybackActor(), "playback"
    if isinstance(policy_spec, (str, os.PathLike)):
        kind, net, _, _ = load_any_policy(policy_spec)
        if kind == "teacher":
            return TeacherActor(net), "teacher"
        return StudentActor(net, n_envs), "student"
    return policy_spec, type(policy_spec).__name__


def evaluate_policy(policy_spec, clips, model, cfg, seed=0):
    """Per-clip metric dicts for a policy over a clip list (deterministic)."""
    results = []
    for clip in clips:
        cache = ClipCache(clip, cfg)
        actor, _ = actor_for(policy_spec)
        traj = run_episode(actor, cache, model, cfg, seed=seed, terminate=False, eval_mode=True)
        m = tracking_metrics(traj, cache, cfg)
        m["clip_id"] = clip.id
        m["category"] = clip.category
        m["completed"] = traj.completed
        results.append(m)
    return results


def percentile_report(per_clip_metrics):
    """Percentile table plus per-category means.

    Input: list of per-clip metric dicts (as from evaluate_policy). Returns
    tab-separated text with one row per percentile and per category.
    """
    if not per_clip_metrics:
        raise MimicLabError("no clips to report")
    lines = ["statistic\t" + "\t".join(METRIC_NAMES)]
    for p in PERCENTILES:
        vals = [nearest_rank_percentile([m[k] for m in per_clip_metrics], p) for k in METRIC_NAMES]
        lines.append(f"p{p:g}\t" + "\t".join(repr(v) for v in vals))
    categories = sorted({m["category"] for m in per_clip_metrics})
    for cat in categories:
        sub = [m for m in per_clip_metrics if m["category"] == cat]
        vals = [float(np.mean([m[k] for m in sub])) for k in METRIC_NAMES]
        lines.append(f"category:{cat}(n={len(sub)})\t" + "\t".join(repr(v) for v in vals))
    return "\n".join(lines) + "\n"


def metrics_table(per_clip_metrics):
    """One row per clip, tab-separated."""
    lines = ["clip_id\tcategory\tcompleted\t" + "\t".join(METRIC_NAMES)]
    for m in per_clip_metrics:
        lines.append(
            f"{m['clip_id']}\t{m['category']}\t{int(m['completed'])}\t"
            + "\t".join(repr(float(m[k])) for k in METRIC_NAMES)
        )
    return "\n".join(lines) + "\n"


def gating_trace(policy_spec, clip, model, cfg, seed=0):
    """Per-control-step gating probabilities while rolling the clip.

    Errors out on non-MoE checkpoints. Returns (trace (T, n_experts), traj).
    """
    if isinstance(policy_spec, (str, os.PathLike)):
        kind, net, _, _ = load_any_policy(policy_spec)
        if kind != "teacher":
            raise SchemaError(f"gating trace needs an MoE teacher checkpoint, got {kind!r}")
        policy = net
    else:
        policy = policy_spec
    if not hasattr(policy, "gating"):
        raise SchemaError("gating trace needs a mixture-of-experts policy")
    cache = ClipCache(clip, cfg)
    traj = run_episode(
        TeacherActor(policy), cache, model, cfg, seed=seed,
        terminate=False, eval_mode=True, record_gating_policy=policy,
    )
    rows = traj.gating
    if not np.allclose(rows.sum(axis=1), 1.0, atol=1e-9):
        raise MimicLabError("gating rows do not sum to 1")
    return rows, traj


def write_gating_trace(rows, path):
    header = "\t".join(f"expert{i}" for i in range(rows.shape[1]))
    with open(path, "w") as f:
        f.write(header + "\n")
        for r in rows:
            f.write("\t".join(repr(float(x)) for x in r) + "\n")


@dataclass
class RunSpec:
    name: str
    checkpoints: list


def compare_runs(runs, clips, model, cfg, seed=0):
    """mean +/- std of each metric over a run's seed checkpoints.

    Each run contributes one row; per-seed values are the mean over clips.
    """
    lines = ["run\tn_seeds\t" + "\t".join(f"{k}_mean\t{k}_std" for k in METRIC_NAMES)]
    for run in runs:
        if not run.checkpoints:
            raise MimicLabError(f"run {run.name!r} lists no checkpoints")
        per_seed = {k: [] for k in METRIC_NAMES}
        for ckpt in run.checkpoints:
            if isinstance(ckpt, (str, os.PathLike)) and not os.path.exists(ckpt):
                raise MimicLabError(f"run {run.name!r}: missing checkpoint {ckpt}")
            results = evaluate_policy(ckpt, clips, model, cfg, seed=seed)
            for k in METRIC_NAMES:
                per_seed[k].append(float(np.mean([m[k] for m in results])))
        cells = []
        for k in METRIC_NAMES:
            vals = np.array(per_seed[k])
            std = float(vals.std()) if len(vals) > 1 else 0.0
            cells.append(f"{vals.mean()!r}\t{std!r}")
        lines.append(f"{run.name}\t{len(run.checkpoints)}\t" + "\t".join(cells))
    return "\n".join(lines) + "\n"
