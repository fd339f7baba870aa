"""Procedural motion families for desk-scale experiments.

Stands in for a mocap corpus: each family builds smooth sinusoid/pulse joint
trajectories, then derives a kinematically consistent root trajectory (the
lowest foot point rests exactly on the ground) and world keybody positions
through the character's forward kinematics. Difficulty is controlled by
amplitude/frequency; all randomness comes from the caller's rng.

All emitted values are rounded through float32 so clips survive the file
format bit-exactly.
"""

from __future__ import annotations

import numpy as np

from .character import CharacterModel, body_kinematics, keybody_positions, points_on_bodies, FOOT_BODIES
from .errors import MimicLabError
from .motion import MotionClip, MotionFrame, clip_from_arrays, integrate_root_x

CATEGORY_FAMILIES = ("stand", "sway", "walk", "crouch", "kick")

# (lo, hi) parameter ranges per family; difficulty in [0, 1] interpolates
_RANGES = {
    "stand": {"amp": (0.005, 0.02), "freq": (0.2, 0.35)},
    "sway": {"amp": (0.02, 0.06), "freq": (0.4, 0.8)},
    "walk": {"amp": (0.12, 0.22), "freq": (0.5, 0.85), "knee": (0.25, 0.45)},
    "crouch": {"amp": (0.5, 1.0), "freq": (0.25, 0.45)},
    "kick": {"amp": (0.7, 1.3), "dur": (0.9, 0.6)},
}


def _pick(rng, lo_hi, difficulty):
    lo, hi = lo_hi
    if difficulty is None:
        return rng.uniform(min(lo, hi), max(lo, hi))
    return lo + difficulty * (hi - lo)


def _pulse(t, t0, width):
    """C1-smooth sin^2 bump on [t0, t0+width], zero elsewhere."""
    phase = (t - t0) / width
    out = np.sin(np.pi * np.clip(phase, 0.0, 1.0)) ** 2
    out[(phase < 0) | (phase > 1)] = 0.0
    return out


def _joint_tracks(category, t, rng, difficulty):
    """Per-family joint trajectories (T, 6) plus nominal forward speed."""
    T = t.shape[0]
    q = np.zeros((T, 6))
    speed = 0.0
    r = _RANGES[category]
    # in-place poses keep the foot center under the body: knee = -2*hip and
    # ankle = -(hip+knee) leave the sole flat and the leg's reach unchanged
    if category == "stand":
        a = _pick(rng, r["amp"], difficulty)
        f = _pick(rng, r["freq"], difficulty)
        osc = a * np.sin(2 * np.pi * f * t)
        q[:, 0] = q[:, 3] = 0.03
        q[:, 1] = q[:, 4] = -0.06
        q[:, 2] = q[:, 5] = 0.03 + osc
    elif category == "sway":
        a = _pick(rng, r["amp"], difficulty)
        f = _pick(rng, r["freq"], difficulty)
        osc = a * np.sin(2 * np.pi * f * t)
        q[:, 0] = q[:, 3] = 0.04 - osc
        q[:, 1] = q[:, 4] = -0.08
        q[:, 2] = q[:, 5] = 0.04 + osc
    elif category == "walk":
        a = _pick(rng, r["amp"], difficulty)
        f = _pick(rng, r["freq"], difficulty)
        ak = _pick(rng, r["knee"], difficulty)
        ph = 2 * np.pi * f * t
        k0 = 0.05 + 0.5 * ak
        # hip bias = half the mean knee flexion keeps the feet under the body;
        # knee flexes while the hip swings forward (swing phase), extends in stance
        q[:, 0] = 0.5 * k0 + a * np.sin(ph)
        q[:, 3] = 0.5 * k0 + a * np.sin(ph + np.pi)
        q[:, 1] = -0.05 - 0.5 * ak * (1.0 + np.cos(ph))
        q[:, 4] = -0.05 - 0.5 * ak * (1.0 + np.cos(ph + np.pi))
        q[:, 2] = -(q[:, 0] + q[:, 1])
        q[:, 5] = -(q[:, 3] + q[:, 4])
        speed = None  # derived from the stance foot below
    elif category == "crouch":
        a = _pick(rng, r["amp"], difficulty)
        f = _pick(rng, r["freq"], difficulty)
        dip = a * (0.5 - 0.5 * np.cos(2 * np.pi * f * t)) + 0.06
        q[:, 0] = q[:, 3] = 0.5 * dip
        q[:, 1] = q[:, 4] = -dip
        q[:, 2] = q[:, 5] = 0.5 * dip
    elif category == "kick":
        a = _pick(rng, r["amp"], difficulty)
        width = _pick(rng, r["dur"], difficulty)
        t0 = 0.8 + 0.2 * (t[-1] - 2.0) * rng.uniform() if difficulty is None else 0.8
        bump = _pulse(t, t0, width)
        # left leg kicks; the right stance leg keeps its balanced base pose
        q[:, 0] = 0.03 + a * bump
        q[:, 1] = -0.06 - 0.5 * a * bump
        q[:, 2] = 0.03 - 0.25 * a * bump
        q[:, 3] = 0.03
        q[:, 4] = -0.06 - 0.10 * bump
        q[:, 5] = 0.03 + 0.08 * bump
    else:
        raise MimicLabError(f"unknown motion category {category!r}")
    return q, speed


def generate_clip(category, clip_id, rng, model=None, fps=50.0, duration=None, difficulty=None):
    """Build one clip of the given family, deterministic per rng state."""
    if category not in CATEGORY_FAMILIES:
        raise MimicLabError(f"unknown motion category {category!r}")
    model = model or CharacterModel()
    if duration is None:
        duration = rng.uniform(3.0, 4.0) if category == "kick" else rng.uniform(4.0, 8.0)
    n = int(round(duration * fps)) + 1
    t = np.arange(n) / fps

    q, speed = _joint_tracks(category, t, rng, difficulty)
    pitch = np.zeros(n)

    # root height: rest the lowest foot contact point exactly on the ground
    zeros = np.zeros((n, 2))
    org, ang = body_kinematics(model, zeros, pitch, q)
    cpl = model.contact_points_local()
    idx = np.repeat(np.array(FOOT_BODIES), 2)
    offs = np.concatenate([cpl, cpl])
    pts = points_on_bodies(org, ang, idx, offs)
    root_z = -pts[:, :, 1].min(axis=1)

    if speed is None:
        # instantaneous root velocity that keeps the stance (lower) foot
        # world-stationary; feet blend smoothly near stance switches
        z_left = pts[:, 0:2, 1].min(axis=1)
        z_right = pts[:, 2:4, 1].min(axis=1)
        v_left = -np.gradient(pts[:, 0:2, 0].mean(axis=1), 1.0 / fps)
        v_right = -np.gradient(pts[:, 2:4, 0].mean(axis=1), 1.0 / fps)
        w = 1.0 / (1.0 + np.exp((z_left - z_right) / 0.004))
        vx = w * v_left + (1.0 - w) * v_right
    else:
        vx = np.full(n, speed)
    # round velocities first so the stored track and the reconstructed
    # root-x integral agree bit-for-bit after a file round trip
    vx = vx.astype(np.float32).astype(np.float64)
    root_x = integrate_root_x(vx, fps)
    vz = np.gradient(root_z, 1.0 / fps)
    pitch_rate = np.gradient(pitch, 1.0 / fps)

    kb = keybody_positions(model, np.stack([root_x, root_z], axis=1), pitch, q)

    width = MotionFrame.row_width(6, model.n_keybodies)
    rows = np.empty((n, width))
    rows[:, :6] = q
    rows[:, 6] = vx
    rows[:, 7] = vz
    rows[:, 8] = pitch_rate
    rows[:, 9] = pitch
    rows[:, 10] = root_z
    rows[:, 11 : 11 + 2 * model.n_keybodies] = kb.reshape(n, -1)
    rows[:, -1] = 0.0
    rows = rows.astype(np.float32).astype(np.float64)
    return clip_from_arrays(clip_id, category, fps, rows, 6, model.n_keybodies)


def generate_synthetic_dataset(spec, n_clips, rng, model=None, fps=50.0, difficulty=None):
    """Generate `n_clips` clips matching the category proportions in `spec`.

    Counts use largest-remainder apportionment, so each category is within
    one clip of its exact share and the total is exact.
    """
    if not spec:
        raise MimicLabError("empty category spec")
    for cat in spec:
        if cat not in CATEGORY_FAMILIES:
            raise MimicLabError(f"unknown motion category {cat!r}")
    props = np.array([spec[c] for c in spec], dtype=np.float64)
    if np.any(props < 0) or abs(props.sum() - 1.0) > 1e-9:
        raise MimicLabError(f"category proportions must be non-negative and sum to 1, got {props.sum()}")
    model = model or CharacterModel()

    raw = props * n_clips
    counts = np.floor(raw).astype(int)
    remainder = n_clips - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    for i in range(remainder):
        counts[order[i]] += 1

    clips = []
    for cat, count in zip(spec, counts):
        for i in range(count):
            clips.append(generate_clip(cat, f"{cat}_{i:04d}", rng, model, fps, difficulty=difficulty))
    return clips
