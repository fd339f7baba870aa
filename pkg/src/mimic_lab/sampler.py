"""Adaptive clip sampling: per-clip completion levels, termination
thresholds, sampling probabilities, and periodic dataset re-clipping.

Each clip carries a completion level c in [1, 10]. c starts at 10, decays by
x0.99 on every completed episode, and floors at 1. The episode-termination
threshold loosens with c from 0.25 m (mastered) to 0.6 m (struggling); the
sampling level equals c while c > 1 and switches to an error-driven term
once a clip is mastered, so well-tracked clips fade out of the batch
without vanishing entirely.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import MimicLabError
from .motion import random_clip

log = logging.getLogger(__name__)

C_START = 10.0
C_MIN = 1.0
C_DECAY = 0.99
THRESHOLD_TIGHT = 0.25
THRESHOLD_LOOSE = 0.6
MASTERED_ERROR_SCALE = 0.15
MASTERED_EXPONENT = 5
ERROR_EMA_ALPHA = 0.2


@dataclass(frozen=True)
class SamplerEntry:
    """Learning statistics for one clip."""

    clip_id: str
    c: float = C_START
    error_ema: float = 0.0
    episodes_seen: int = 0

    def __post_init__(self):
        if not (C_MIN <= self.c <= C_START):
            log.warning("completion level %.4f for %s outside [1, 10]; clamping", self.c, self.clip_id)
            object.__setattr__(self, "c", float(np.clip(self.c, C_MIN, C_START)))
        if self.error_ema < 0:
            raise MimicLabError(f"negative error ema for {self.clip_id}")


def termination_threshold(c):
    """Episode termination threshold in metres for completion level c.

    0.25 * exp((c-1)/9 * ln(0.6/0.25)); clamps c into [1, 10] with a warning.
    """
    if not (C_MIN <= c <= C_START):
        log.warning("completion level %.4f outside [1, 10]; clamping", c)
        c = float(np.clip(c, C_MIN, C_START))
    return THRESHOLD_TIGHT * np.exp((c - C_MIN) / (C_START - C_MIN) * np.log(THRESHOLD_LOOSE / THRESHOLD_TIGHT))


def sampling_level(entry):
    """Unnormalized sampling weight: c while c > 1, error-driven once mastered."""
    if entry.c > C_MIN:
        return entry.c
    return min(entry.error_ema / MASTERED_ERROR_SCALE, 1.0) ** MASTERED_EXPONENT


def on_episode_end(entry, completed, episode_max_keybody_error):
    """Fold one finished episode into the entry.

    The error EMA updates on every finished episode (completed or
    terminated); c decays only on completion and never re-increases.
    """
    if episode_max_keybody_error < 0:
        raise MimicLabError("episode error must be non-negative")
    c = entry.c
    if completed:
        c = max(C_MIN, C_DECAY * c)
    if entry.episodes_seen == 0:
        ema = float(episode_max_keybody_error)
    else:
        ema = (1.0 - ERROR_EMA_ALPHA) * entry.error_ema + ERROR_EMA_ALPHA * float(episode_max_keybody_error)
    return replace(entry, c=c, error_ema=ema, episodes_seen=entry.episodes_seen + 1)


@dataclass
class SamplerState:
    """All per-clip entries plus the re-clip bookkeeping."""

    entries: dict = field(default_factory=dict)
    reclip_period: int = 500
    iteration: int = 0

    @classmethod
    def for_clips(cls, clips, reclip_period=500):
        return cls(entries={c.id: SamplerEntry(c.id) for c in clips}, reclip_period=reclip_period)

    def probabilities(self):
        """Normalized sampling distribution over entries, in insertion order.

        Falls back to uniform when every level is zero (all clips mastered
        with near-zero error).
        """
        if not self.entries:
            raise MimicLabError("sampler has no entries")
        ids = list(self.entries)
        levels = np.array([sampling_level(self.entries[i]) for i in ids])
        total = levels.sum()
        if total <= 0.0:
            probs = np.full(len(ids), 1.0 / len(ids))
        else:
            probs = levels / total
        return ids, probs

    def update(self, clip_id, completed, episode_max_keybody_error):
        entry = self.entries.get(clip_id)
        if entry is None:
            raise MimicLabError(f"unknown clip id {clip_id!r}")
        self.entries[clip_id] = on_episode_end(entry, completed, episode_max_keybody_error)
        return self.entries[clip_id]

    def threshold_for(self, clip_id):
        return termination_threshold(self.entries[clip_id].c)


def sample_clip(state, rng):
    """Draw a clip id with probability proportional to its sampling level."""
    ids, probs = state.probabilities()
    u = rng.random()
    return ids[int(np.searchsorted(np.cumsum(probs), u, side="right").clip(0, len(ids) - 1))]


def periodic_reclip(state, dataset, rng, max_len=10.0, max_offset=2.0):
    """Re-split every long parent with fresh offsets; each new sub-clip
    inherits the entry of the old sub-clip it overlaps most.

    `dataset` is a ClippedDataset; returns (new dataset, new state). Clips
    that were never split keep their entries untouched.
    """
    new_clips = []
    new_entries = {}
    old_spans = {}
    for clip in dataset.clips:
        span = clip.source_span or (clip.id, 0.0, clip.duration)
        old_spans.setdefault(span[0], []).append((span[1], span[2], clip.id))

    for parent in dataset.parents:
        pieces = random_clip(parent, max_len=max_len, max_offset=max_offset, rng=rng)
        for piece in pieces:
            new_clips.append(piece)
            if piece.id in state.entries:
                new_entries[piece.id] = state.entries[piece.id]
                continue
            span = piece.source_span or (piece.id, 0.0, piece.duration)
            best, best_overlap = None, -1.0
            for (s, e, cid) in old_spans.get(span[0], []):
                overlap = min(e, span[2]) - max(s, span[1])
                if overlap > best_overlap:
                    best, best_overlap = cid, overlap
            if best is None:
                new_entries[piece.id] = SamplerEntry(piece.id)
            else:
                prev = state.entries[best]
                new_entries[piece.id] = SamplerEntry(
                    piece.id, c=prev.c, error_ema=prev.error_ema, episodes_seen=prev.episodes_seen
                )
    new_state = SamplerState(entries=new_entries, reclip_period=state.reclip_period, iteration=state.iteration)
    return ClippedDataset(dataset.parents, new_clips), new_state


@dataclass
class ClippedDataset:
    """Original parent clips plus the currently active training sub-clips."""

    parents: list
    clips: list

    def __post_init__(self):
        self.by_id = {c.id: c for c in self.clips}

    @classmethod
    def from_parents(cls, parents, rng, max_len=10.0, max_offset=2.0):
        clips = []
        for p in parents:
            clips.extend(random_clip(p, max_len=max_len, max_offset=max_offset, rng=rng))
        return cls(list(parents), clips)

    @property
    def total_duration(self):
        return sum(c.duration for c in self.clips)


# -- checkpointing -----------------------------------------------------------------


def save_sampler_state(state, path):
    """Tabular text: clip_id, c, error_ema, episodes_seen. repr() keeps the
    floats bit-exact across a reload."""
    lines = ["clip_id,c,error_ema,episodes_seen", f"#reclip_period={state.reclip_period},iteration={state.iteration}"]
    for e in state.entries.values():
        lines.append(f"{e.clip_id},{e.c!r},{e.error_ema!r},{e.episodes_seen}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_sampler_state(path):
    with open(path) as f:
        lines = [line.rstrip("\n") for line in f if line.strip()]
    if not lines or lines[0] != "clip_id,c,error_ema,episodes_seen":
        raise MimicLabError(f"{path}: not a sampler checkpoint")
    reclip_period, iteration = 500, 0
    entries = {}
    for line in lines[1:]:
        if line.startswith("#"):
            for part in line[1:].split(","):
                k, v = part.split("=")
                if k == "reclip_period":
                    reclip_period = int(v)
                elif k == "iteration":
                    iteration = int(v)
            continue
        cid, c, ema, seen = line.rsplit(",", 3)
        entries[cid] = SamplerEntry(cid, c=float(c), error_ema=float(ema), episodes_seen=int(seen))
    return SamplerState(entries=entries, reclip_period=reclip_period, iteration=iteration)
