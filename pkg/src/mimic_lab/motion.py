"""Motion clips, tracking goals, random clipping, and the clip file format.

A clip is an ordered sequence of per-frame tracking targets for the planar
character: joint angles, planar base velocities, pitch, root height, world
keybody positions, and a heading angle (identically zero for the default
planar character, kept so the heading-local transforms stay general).

The on-disk format stores no horizontal root position; the root x trajectory
is derived by trapezoidal integration of the stored base x-velocity, with
x = 0 at the first frame. `save_clip_file` shifts keybody x-coordinates so
that convention holds for sub-clips cut out of a longer parent.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ClipFormatError, MimicLabError, SchemaError

CLIP_FORMAT_VERSION = 1


def rot2d(angle):
    """Planar rotation matrix; rows act on (x, z) pairs."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class MotionFrame:
    """One tracking target frame. Keybody positions are world-frame (K, 2)."""

    joint_positions: np.ndarray
    base_lin_vel: np.ndarray
    base_ang_vel: float
    base_pitch: float
    root_height: float
    keybody_positions_world: np.ndarray
    heading: float = 0.0

    def __post_init__(self):
        q = np.asarray(self.joint_positions, dtype=np.float64)
        v = np.asarray(self.base_lin_vel, dtype=np.float64)
        kb = np.asarray(self.keybody_positions_world, dtype=np.float64)
        if v.shape != (2,):
            raise SchemaError(f"base_lin_vel must have shape (2,), got {v.shape}")
        if kb.ndim != 2 or kb.shape[1] != 2:
            raise SchemaError(f"keybody positions must have shape (K, 2), got {kb.shape}")
        vals = np.concatenate([q, v, kb.ravel(), [self.base_ang_vel, self.base_pitch, self.root_height, self.heading]])
        if not np.all(np.isfinite(vals)):
            raise MimicLabError("non-finite value in motion frame")
        if self.root_height <= 0:
            raise MimicLabError(f"root height must be positive, got {self.root_height}")
        for arr in (q, v, kb):
            arr.flags.writeable = False
        object.__setattr__(self, "joint_positions", q)
        object.__setattr__(self, "base_lin_vel", v)
        object.__setattr__(self, "keybody_positions_world", kb)

    @property
    def n_joints(self):
        return self.joint_positions.shape[0]

    @property
    def n_keybodies(self):
        return self.keybody_positions_world.shape[0]

    def to_row(self):
        """Flat row in file order: q, v_lin, v_ang, pitch, height, keybodies, heading."""
        return np.concatenate(
            [
                self.joint_positions,
                self.base_lin_vel,
                [self.base_ang_vel, self.base_pitch, self.root_height],
                self.keybody_positions_world.ravel(),
                [self.heading],
            ]
        )

    @staticmethod
    def row_width(n_joints, n_keybodies):
        return n_joints + 2 + 1 + 1 + 1 + 2 * n_keybodies + 1

    @classmethod
    def from_row(cls, row, n_joints, n_keybodies):
        j, k = n_joints, n_keybodies
        return cls(
            joint_positions=row[:j],
            base_lin_vel=row[j : j + 2],
            base_ang_vel=float(row[j + 2]),
            base_pitch=float(row[j + 3]),
            root_height=float(row[j + 4]),
            keybody_positions_world=row[j + 5 : j + 5 + 2 * k].reshape(k, 2),
            heading=float(row[j + 5 + 2 * k]),
        )


@dataclass(frozen=True)
class MotionClip:
    """Immutable timed sequence of`MotionFrame`s.

    `source_span` records (parent_id, start_time, end_time) for sub-clips
    produced by random clipping. `root_x_track` is the derived horizontal
    root trajectory; when absent it is integrated from the stored base
    velocities on first use.
    """

    id: str
    category: str
    fps: float
    frames: tuple
    source_span: tuple | None = None
    root_x_track: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.fps <= 0:
            raise MimicLabError(f"fps must be positive, got {self.fps}")
        if len(self.frames) == 0:
            raise MimicLabError("empty clip")
        object.__setattr__(self, "frames", tuple(self.frames))
        j0, k0 = self.frames[0].n_joints, self.frames[0].n_keybodies
        for f in self.frames:
            if f.n_joints != j0 or f.n_keybodies != k0:
                raise SchemaError("inconsistent frame dimensions within clip")
        if self.source_span is not None:
            _, t0, t1 = self.source_span
            if not (0 <= t0 < t1):
                raise MimicLabError(f"invalid source span {self.source_span}")

    @property
    def n_joints(self):
        return self.frames[0].n_joints

    @property
    def n_keybodies(self):
        return self.frames[0].n_keybodies

    @property
    def duration(self):
        return (len(self.frames) - 1) / self.fps

    def as_array(self):
        """(T, row_width) array of all frames in file order (cached)."""
        cached = getattr(self, "_array_cache", None)
        if cached is None:
            cached = np.stack([f.to_row() for f in self.frames])
            object.__setattr__(self, "_array_cache", cached)
        return cached

    def root_x(self):
        """Horizontal root position per frame, from trapezoidal integration
        of the base x-velocity (x = 0 at the first frame unless the clip was
        built with an explicit track)."""
        if self.root_x_track is not None:
            return self.root_x_track
        cached = getattr(self, "_root_x_cache", None)
        if cached is None:
            vx = np.array([f.base_lin_vel[0] for f in self.frames])
            cached = integrate_root_x(vx, self.fps)
            object.__setattr__(self, "_root_x_cache", cached)
        return cached

    def root_position(self, index):
        return np.array([self.root_x()[index], self.frames[index].root_height])


def integrate_root_x(vx, fps):
    dt = 1.0 / fps
    steps = dt * 0.5 * (vx[1:] + vx[:-1])
    return np.concatenate([[0.0], np.cumsum(steps)])


def clip_from_arrays(clip_id, category, fps, rows, n_joints, n_keybodies, source_span=None, root_x_track=None):
    frames = [MotionFrame.from_row(r, n_joints, n_keybodies) for r in np.asarray(rows, dtype=np.float64)]
    return MotionClip(clip_id, category, fps, tuple(frames), source_span, root_x_track)


# -- heading-local transforms ---------------------------------------------------


def to_heading_local(frame, root_position, heading):
    """Express a frame relative to (root_position, heading).

    Keybodies are translated by -root_position and rotated by -heading;
    base velocities are rotated the same way; joint angles, pitch, and root
    height are unchanged; the residual heading is frame.heading - heading.
    """
    root_position = np.asarray(root_position, dtype=np.float64)
    rot = rot2d(-heading)
    kb = (frame.keybody_positions_world - root_position) @ rot.T
    v = rot @ frame.base_lin_vel
    return MotionFrame(
        joint_positions=frame.joint_positions,
        base_lin_vel=v,
        base_ang_vel=frame.base_ang_vel,
        base_pitch=frame.base_pitch,
        root_height=frame.root_height,
        keybody_positions_world=kb,
        heading=frame.heading - heading,
    )


def heading_local_to_world(frame, root_position, heading):
    """Inverse of `to_heading_local`."""
    root_position = np.asarray(root_position, dtype=np.float64)
    rot = rot2d(heading)
    kb = frame.keybody_positions_world @ rot.T + root_position
    v = rot @ frame.base_lin_vel
    return MotionFrame(
        joint_positions=frame.joint_positions,
        base_lin_vel=v,
        base_ang_vel=frame.base_ang_vel,
        base_pitch=frame.base_pitch,
        root_height=frame.root_height,
        keybody_positions_world=kb,
        heading=frame.heading + heading,
    )


# -- random clipping -------------------------------------------------------------


def random_clip(clip, max_len=10.0, max_offset=2.0, rng=None):
    """Split a long clip into contiguous sub-clips of at most `max_len` seconds.

    Clips no longer than `max_len` are returned unchanged (single-element
    list). The first interior boundary sits at a uniform random offset in
    [0, max_offset], quantized to the frame grid; later boundaries advance by
    `max_len`. Spans partition the parent exactly; adjacent sub-clips share
    their boundary frame.
    """
    if len(clip.frames) < 2 or clip.duration <= 0:
        raise MimicLabError("empty clip")
    if clip.duration <= max_len:
        return [clip]
    if rng is None:
        raise MimicLabError("random_clip needs an rng for clips longer than max_len")
    fps = clip.fps
    last = len(clip.frames) - 1
    max_len_frames = int(np.floor(max_len * fps + 1e-9))
    if max_len_frames < 1:
        raise MimicLabError(f"max_len {max_len} shorter than one frame at {fps} fps")
    offset_frames = int(round(rng.uniform(0.0, max_offset) * fps))
    offset_frames = min(offset_frames, int(np.floor(max_offset * fps + 1e-9)), last - 1)

    bounds = [0]
    b = offset_frames
    while b < last:
        if b > 0:
            bounds.append(b)
        b += max_len_frames
    bounds.append(last)

    root_x = clip.root_x()
    pieces = []
    for i0, i1 in zip(bounds[:-1], bounds[1:]):
        t0, t1 = i0 / fps, i1 / fps
        piece_id = f"{clip.id}@{t0:.3f}-{t1:.3f}"
        pieces.append(
            MotionClip(
                id=piece_id,
                category=clip.category,
                fps=fps,
                frames=clip.frames[i0 : i1 + 1],
                source_span=(clip.id, t0, t1),
                root_x_track=root_x[i0 : i1 + 1],
            )
        )
    return pieces


# -- tracking goals ---------------------------------------------------------------


@dataclass(frozen=True)
class TrackingGoal:
    """Immediate heading-local target plus W future heading-local frames.

    Each window frame is expressed relative to its own root (position and
    heading); the window is zero-order-hold padded past the clip end.
    `ref_joint_vel` is derived from the clip by finite differences and rides
    along for the joint-velocity tracking reward; it is not part of the
    persisted schema.
    """

    immediate: MotionFrame
    future_window: tuple
    ref_joint_vel: np.ndarray | None = None

    @property
    def window_len(self):
        return len(self.future_window)


def goal_feature_width(n_joints, n_keybodies):
    """Features per goal frame: q, v_lin, v_ang, pitch, height, local keybodies."""
    return n_joints + 2 + 1 + 1 + 1 + 2 * n_keybodies


def frame_features(frame):
    """Flatten a heading-local frame into the goal feature layout."""
    return np.concatenate(
        [
            frame.joint_positions,
            frame.base_lin_vel,
            [frame.base_ang_vel, frame.base_pitch, frame.root_height],
            frame.keybody_positions_world.ravel(),
        ]
    )


def goal_features(goal):
    """(immediate (F,), window (W, F)) arrays for the networks."""
    imm = frame_features(goal.immediate)
    win = np.stack([frame_features(f) for f in goal.future_window])
    return imm, win


def _interp_frame(clip, t):
    """Linear interpolation of all frame fields at time t (clamped to clip)."""
    arr = clip.as_array()
    root_x = clip.root_x()
    tt = min(max(t, 0.0), clip.duration)
    pos = tt * clip.fps
    i0 = int(np.floor(pos))
    i0 = min(i0, len(clip.frames) - 1)
    i1 = min(i0 + 1, len(clip.frames) - 1)
    w = pos - i0
    row = (1.0 - w) * arr[i0] + w * arr[i1]
    x = (1.0 - w) * root_x[i0] + w * root_x[i1]
    frame = MotionFrame.from_row(row, clip.n_joints, clip.n_keybodies)
    return frame, np.array([x, frame.root_height])


def _joint_vel_at(clip, t):
    """Reference joint velocities at t by central finite differences."""
    h = 1.0 / clip.fps
    f_lo, _ = _interp_frame(clip, max(0.0, t - h))
    f_hi, _ = _interp_frame(clip, min(clip.duration, t + h))
    span = min(clip.duration, t + h) - max(0.0, t - h)
    if span <= 0:
        return np.zeros(clip.n_joints)
    return (f_hi.joint_positions - f_lo.joint_positions) / span


def goal_at(clip, t, goal_rate, window_len):
    """Tracking goal at time t: interpolated immediate frame plus a window of
    `window_len` frames sampled at `goal_rate`, zero-order-hold at clip end."""
    if not (0.0 <= t <= clip.duration + 1e-9):
        raise MimicLabError(f"goal time {t} outside clip [0, {clip.duration}]")
    if goal_rate <= 0 or window_len < 1:
        raise MimicLabError("goal_rate and window length must be positive")
    frames = []
    for k in range(window_len):
        f, root = _interp_frame(clip, t + k / goal_rate)
        frames.append(to_heading_local(f, root, f.heading))
    return TrackingGoal(
        immediate=frames[0],
        future_window=tuple(frames),
        ref_joint_vel=_joint_vel_at(clip, t),
    )


# -- clip files and datasets -------------------------------------------------------


def save_clip_file(clip, path):
    """Write the self-describing binary clip container.

    Keybody x-coordinates are shifted so the root starts at x = 0, keeping
    the stored world frame consistent with root-x reconstruction on load.
    """
    arr = clip.as_array().copy()
    j, k = clip.n_joints, clip.n_keybodies
    x0 = clip.root_x()[0]
    if x0 != 0.0:
        arr[:, j + 5 : j + 5 + 2 * k : 2] -= x0
    header = (
        f"version={CLIP_FORMAT_VERSION}\n"
        f"fps={clip.fps!r}\n"
        f"J={j}\n"
        f"K={k}\n"
        f"category={clip.category}\n"
        "\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(arr.astype("<f4").tobytes())


def load_clip_file(path, expect_joints=None, expect_keybodies=None):
    """Read a clip container; the clip id is the file stem."""
    with open(path, "rb") as f:
        raw = f.read()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise ClipFormatError(f"{path}: malformed header (no blank line)")
    fields = {}
    for line in raw[:sep].decode("ascii", errors="replace").split("\n"):
        if "=" not in line:
            raise ClipFormatError(f"{path}: malformed header line {line!r}")
        key, val = line.split("=", 1)
        fields[key] = val
    try:
        version = int(fields["version"])
        fps = float(fields["fps"])
        j = int(fields["J"])
        k = int(fields["K"])
        category = fields["category"]
    except (KeyError, ValueError) as exc:
        raise ClipFormatError(f"{path}: malformed header ({exc})") from exc
    if version != CLIP_FORMAT_VERSION:
        raise ClipFormatError(f"{path}: unsupported version {version}")
    if expect_joints is not None and j != expect_joints:
        raise SchemaError(f"{path}: clip has J={j}, configured skeleton has J={expect_joints}")
    if expect_keybodies is not None and k != expect_keybodies:
        raise SchemaError(f"{path}: clip has K={k}, configured skeleton has K={expect_keybodies}")
    width = MotionFrame.row_width(j, k)
    payload = raw[sep + 2 :]
    if len(payload) % (4 * width) != 0 or len(payload) == 0:
        raise ClipFormatError(f"{path}: unexpected end of data")
    rows = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(-1, width)
    if not np.all(np.isfinite(rows)):
        raise ClipFormatError(f"{path}: non-finite values in payload")
    clip_id = os.path.splitext(os.path.basename(path))[0]
    return clip_from_arrays(clip_id, category, fps, rows, j, k)


INDEX_FILE = "index.txt"


def save_dataset(clips, out_dir):
    """Write one .clip file per clip plus the index listing paths and categories."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for clip in clips:
        fname = clip.id.replace("/", "_") + ".clip"
        save_clip_file(clip, os.path.join(out_dir, fname))
        lines.append(f"{fname}\t{clip.category}")
    with open(os.path.join(out_dir, INDEX_FILE), "w") as f:
        f.write("\n".join(lines) + "\n")


def load_dataset(directory, expect_joints=None, expect_keybodies=None):
    """Load every clip listed in the directory index, in index order."""
    index_path = os.path.join(directory, INDEX_FILE)
    if not os.path.exists(index_path):
        raise ClipFormatError(f"no {INDEX_FILE} in {directory}")
    clips = []
    with open(index_path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rel = line.split("\t")[0]
            clips.append(load_clip_file(os.path.join(directory, rel), expect_joints, expect_keybodies))
    return clips


def write_index(clips, directory, src_dir_files=None):
    """Re-emit an index referencing existing clip files (used by curation)."""
    lines = [f"{clip.id}.clip\t{clip.category}" for clip in clips]
    with open(os.path.join(directory, INDEX_FILE), "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))
