"""Configuration dataclasses and the key=value config file format.

Config files are flat `key=value` text; tuple fields are comma-separated.
CLI flags override file values, and every run manifest records the file
hash, so a config file plus a seed pins a run exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass
class EnvConfig:
    """Planar tracking environment: timing, randomization, contact, rewards."""

    physics_hz: int = 500
    control_hz: int = 50
    gravity: float = 9.81

    # domain randomization ranges (defaults follow the randomization table)
    terrain_height_range: tuple = (0.0, 0.02)
    gravity_frac_range: tuple = (-0.1, 0.1)
    friction_range: tuple = (0.1, 2.0)
    base_mass_delta_range: tuple = (-3.0, 3.0)
    base_com_offset_range: tuple = (-0.05, 0.05)
    push_velocity_range: tuple = (0.0, 1.0)
    motor_strength_range: tuple = (0.8, 1.2)
    action_delay_range: tuple = (0.0, 0.02)
    push_interval_mean: float = 4.0
    push_horizon: float = 40.0
    pushes_enabled: bool = True
    randomization_enabled: bool = True

    # penalty ground contact
    contact_kp: float = 4.0e4
    contact_kd: float = 250.0
    contact_kt: float = 200.0

    # reward weights
    w_joint_pos: float = 1.0
    w_joint_vel: float = 0.2
    w_root_pose: float = 1.0
    w_root_vel: float = 1.0
    w_keybody: float = 1.0
    w_alive: float = 0.5
    w_slip: float = 0.1
    w_qd_penalty: float = 1e-4
    w_qdd_penalty: float = 1e-7
    w_action_rate: float = 0.01

    n_joints: int = 6
    n_keybodies: int = 3
    fall_height_frac: float = 0.5
    reset_noise: float = 0.02
    # policy actions are offsets around the reference next-frame joints;
    # zero action reproduces reference playback (the PD targets the sim sees
    # stay absolute either way)
    residual_actions: bool = True

    # goal schema
    window_len: int = 100
    goal_rate: float = 50.0

    def __post_init__(self):
        if self.physics_hz % self.control_hz != 0:
            raise ConfigError(f"physics_hz {self.physics_hz} not a multiple of control_hz {self.control_hz}")
        if self.control_hz % self.goal_rate != 0:
            raise ConfigError(f"control_hz {self.control_hz} not a multiple of goal_rate {self.goal_rate}")
        for name in (
            "terrain_height_range", "gravity_frac_range", "friction_range", "base_mass_delta_range",
            "base_com_offset_range", "push_velocity_range", "motor_strength_range", "action_delay_range",
        ):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"inverted range {name}=({lo}, {hi})")

    @property
    def substeps(self):
        return self.physics_hz // self.control_hz

    @property
    def control_dt(self):
        return 1.0 / self.control_hz

    @property
    def physics_dt(self):
        return 1.0 / self.physics_hz

    @property
    def goal_stride(self):
        return int(self.control_hz // self.goal_rate)

    def reward_weights(self):
        return {
            "joint_pos": self.w_joint_pos,
            "joint_vel": self.w_joint_vel,
            "root_pose": self.w_root_pose,
            "root_vel": self.w_root_vel,
            "keybody": self.w_keybody,
            "alive": self.w_alive,
            "slip": self.w_slip,
            "qd_penalty": self.w_qd_penalty,
            "qdd_penalty": self.w_qdd_penalty,
            "action_rate": self.w_action_rate,
        }


@dataclass
class TrainConfig:
    """PPO teacher training plus the policy architecture."""

    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 5
    minibatch_size: int = 1600
    lr: float = 3e-4
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    reward_scale: float = 0.05  # conditions the value regression; advantages are normalized anyway
    n_envs: int = 64
    steps_per_env: int = 100
    iterations: int = 300

    # adaptive sampling
    sampler_mode: str = "adaptive"  # or "uniform"
    uniform_threshold: float = 0.6
    reclip_period: int = 500
    clip_max_len: float = 10.0
    clip_max_offset: float = 2.0

    checkpoint_every: int = 50

    # architecture
    n_experts: int = 4
    hidden: tuple = (128, 128)
    z_dim: int = 128
    enc_channels: tuple = (32, 32)
    enc_kernel: int = 4
    enc_stride: int = 2
    log_std_init: float = -2.0

    def __post_init__(self):
        if not (0 < self.gamma <= 1) or not (0 < self.gae_lambda <= 1):
            raise ConfigError("gamma and gae_lambda must lie in (0, 1]")
        if self.clip_eps <= 0:
            raise ConfigError("clip_eps must be positive")
        if self.sampler_mode not in ("adaptive", "uniform"):
            raise ConfigError(f"unknown sampler_mode {self.sampler_mode!r}")


@dataclass
class DistillConfig:
    """DAgger student training."""

    rounds: int = 30
    n_envs: int = 16
    steps_per_env: int = 200
    epochs: int = 4
    minibatch_size: int = 1024
    lr: float = 1e-3
    beta_frac: float = 0.25  # fraction of rounds over which beta anneals 1 -> 0
    history_len: int = 21
    hidden: tuple = (256, 256)
    buffer_cap: int = 200_000
    termination_threshold: float = 0.6


@dataclass
class CurationConfig:
    """Rule thresholds and completion-filter settings."""

    pitch_max: float = 1.2
    height_min_frac: float = 0.3
    height_max_frac: float = 1.5
    joint_vel_max: float = 25.0
    episodes_per_clip: int = 10
    min_completion_rate: float = 0.5
    completion_threshold: float = 0.6


def desk_env_config(**overrides):
    """Desk-scale environment: short goal window, mild randomization.

    The randomization table defaults are meant for full-scale robustness
    training; the desk experiments narrow them so reference playback remains
    a feasible starting point for the small sample budgets used here.
    """
    base = dict(
        window_len=20,
        goal_rate=10.0,
        terrain_height_range=(0.0, 0.005),
        gravity_frac_range=(-0.03, 0.03),
        friction_range=(0.6, 1.4),
        base_mass_delta_range=(-0.7, 0.7),
        base_com_offset_range=(-0.015, 0.015),
        push_velocity_range=(0.0, 0.25),
        motor_strength_range=(0.92, 1.08),
        action_delay_range=(0.0, 0.01),
        push_interval_mean=6.0,
    )
    base.update(overrides)
    return EnvConfig(**base)


def desk_train_config(**overrides):
    """Lean teacher-training setup sized for the desk experiments."""
    base = dict(
        n_envs=64,
        steps_per_env=100,
        iterations=220,
        epochs=4,
        minibatch_size=1600,
        hidden=(64, 64),
        z_dim=64,
        enc_channels=(16, 16),
        log_std_init=-2.6,
        checkpoint_every=110,
        reclip_period=100,
    )
    base.update(overrides)
    return TrainConfig(**base)


# -- key=value file handling ----------------------------------------------------


def _coerce(raw, example):
    if isinstance(example, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"expected boolean, got {raw!r}")
    if isinstance(example, int):
        return int(raw)
    if isinstance(example, float):
        return float(raw)
    if isinstance(example, tuple):
        parts = [p for p in raw.split(",") if p != ""]
        elem = example[0] if example else 0.0
        return tuple(int(p) if isinstance(elem, int) and not isinstance(elem, bool) else float(p) for p in parts)
    return raw


def parse_kv_file(path):
    out = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def config_from_file(cls, path=None, overrides=None):
    """Build a config dataclass from defaults, then file values, then overrides."""
    defaults = cls()
    values = {}
    raw = parse_kv_file(path) if path else {}
    if overrides:
        raw.update({k: str(v) for k, v in overrides.items()})
    names = {f.name for f in dataclasses.fields(cls)}
    for key, val in raw.items():
        if key not in names:
            raise ConfigError(f"unknown {cls.__name__} key {key!r}")
        values[key] = _coerce(val, getattr(defaults, key))
    return dataclasses.replace(defaults, **values)


def config_to_file(cfg, path):
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(x) for x in v)
        lines.append(f"{f.name}={v}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        h.update(f.read())
    return h.hexdigest()
