"""Planar sagittal biped: model parameters, topology, forward kinematics.

Seven rigid bodies (torso + two thigh/shank/foot chains) in the x-z plane,
six revolute joints (hip, knee, ankle per leg). Joint angle zero is legs
straight down with feet flat; positive angles rotate counter-clockwise in
the x-z plane (x forward, z up). Every body frame sits at the body's
proximal joint; the torso frame is the floating root.

Generalized coordinates are (root_x, root_z, pitch, q0..q5), in that order,
throughout the simulator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

N_JOINTS = 6
N_BODIES = 7
N_KEYBODIES = 3

# body indices
TORSO, L_THIGH, L_SHANK, L_FOOT, R_THIGH, R_SHANK, R_FOOT = range(7)
BODY_PARENT = np.array([-1, TORSO, L_THIGH, L_SHANK, TORSO, R_THIGH, R_SHANK])
# joint j attaches body j+1 to its parent
JOINT_NAMES = ("l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle")
FOOT_BODIES = (L_FOOT, R_FOOT)

# ancestor joint incidence: ANC[b, j] = 1 if joint j moves body b
ANC = np.zeros((N_BODIES, N_JOINTS))
for _b in range(1, N_BODIES):
    _j = _b - 1
    _cur = _b
    while _cur > 0:
        ANC[_b, _cur - 1] = 1.0
        _cur = BODY_PARENT[_cur]


@dataclass(frozen=True)
class CharacterModel:
    """Geometry, inertia, actuation, and keybody layout of the planar biped."""

    thigh_len: float = 0.30
    shank_len: float = 0.30
    torso_len: float = 0.48
    ankle_height: float = 0.06
    heel_x: float = -0.09
    toe_x: float = 0.09

    masses: np.ndarray = field(default_factory=lambda: np.array([10.0, 2.5, 1.5, 0.5, 2.5, 1.5, 0.5]))
    inertias: np.ndarray = field(default_factory=lambda: np.array([0.35, 0.025, 0.015, 0.002, 0.025, 0.015, 0.002]))

    kp: np.ndarray = field(default_factory=lambda: np.array([100.0, 100.0, 130.0, 100.0, 100.0, 130.0]))
    kd: np.ndarray = field(default_factory=lambda: np.array([5.0, 5.0, 4.0, 5.0, 5.0, 4.0]))
    torque_limit: np.ndarray = field(default_factory=lambda: np.array([90.0, 90.0, 70.0, 90.0, 90.0, 70.0]))
    gear_ratio: np.ndarray = field(default_factory=lambda: np.full(N_JOINTS, 10.0))
    rotor_inertia: np.ndarray = field(default_factory=lambda: np.full(N_JOINTS, 1e-4))

    def __post_init__(self):
        for name in ("masses", "inertias", "torque_limit", "gear_ratio"):
            if np.any(np.asarray(getattr(self, name)) <= 0):
                raise ConfigError(f"character model field {name} must be positive")
        for name in ("kp", "kd", "rotor_inertia"):
            if np.any(np.asarray(getattr(self, name)) < 0):
                raise ConfigError(f"character model field {name} must be non-negative")

    @property
    def n_joints(self):
        return N_JOINTS

    @property
    def n_keybodies(self):
        return N_KEYBODIES

    @property
    def nominal_root_height(self):
        return self.thigh_len + self.shank_len + self.ankle_height

    @property
    def total_mass(self):
        return float(np.sum(self.masses))

    def joint_anchor_local(self):
        """Joint anchor in the parent body frame, per joint (J, 2)."""
        hip = np.zeros(2)
        knee = np.array([0.0, -self.thigh_len])
        ankle = np.array([0.0, -self.shank_len])
        return np.stack([hip, knee, ankle, hip, knee, ankle])

    def com_local(self):
        """Center of mass in the body's own frame (7, 2)."""
        return np.array(
            [
                [0.0, 0.45 * self.torso_len],
                [0.0, -0.45 * self.thigh_len],
                [0.0, -0.45 * self.shank_len],
                [0.0, -0.5 * self.ankle_height],
                [0.0, -0.45 * self.thigh_len],
                [0.0, -0.45 * self.shank_len],
                [0.0, -0.5 * self.ankle_height],
            ]
        )

    def contact_points_local(self):
        """Heel and toe in the foot frame (2, 2); all contacts live on feet."""
        return np.array([[self.heel_x, -self.ankle_height], [self.toe_x, -self.ankle_height]])

    def keybody_attach(self):
        """(body index, offset in body frame) per keybody: feet soles + torso top."""
        sole_mid = np.array([0.5 * (self.heel_x + self.toe_x), -self.ankle_height])
        return (
            (L_FOOT, sole_mid),
            (R_FOOT, sole_mid),
            (TORSO, np.array([0.0, self.torso_len])),
        )


def effective_armature(gear_ratio, rotor_inertia):
    """Reflected rotor inertia added to the joint-space diagonal: k^2 * I."""
    gear_ratio = np.asarray(gear_ratio, dtype=np.float64)
    rotor_inertia = np.asarray(rotor_inertia, dtype=np.float64)
    if np.any(rotor_inertia < 0):
        raise ConfigError("rotor inertia must be non-negative")
    return gear_ratio**2 * rotor_inertia


def body_kinematics(model, root_pos, pitch, q):
    """Batched FK: body origins (N, 7, 2) and absolute angles (N, 7).

    root_pos (N, 2), pitch (N,), q (N, J).
    """
    root_pos = np.asarray(root_pos, dtype=np.float64)
    pitch = np.asarray(pitch, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    n = root_pos.shape[0]
    anchors = model.joint_anchor_local()
    ang = np.empty((n, N_BODIES))
    org = np.empty((n, N_BODIES, 2))
    ang[:, TORSO] = pitch
    org[:, TORSO] = root_pos
    for b in range(1, N_BODIES):
        p = BODY_PARENT[b]
        j = b - 1
        ang[:, b] = ang[:, p] + q[:, j]
        ca, sa = np.cos(ang[:, p]), np.sin(ang[:, p])
        ax, az = anchors[j]
        org[:, b, 0] = org[:, p, 0] + ca * ax - sa * az
        org[:, b, 1] = org[:, p, 1] + sa * ax + ca * az
    return org, ang


def points_on_bodies(org, ang, body_idx, offsets):
    """World positions of fixed body-frame points.

    org (N, 7, 2), ang (N, 7); body_idx (P,), offsets (P, 2) -> (N, P, 2).
    """
    a = ang[:, body_idx]
    ca, sa = np.cos(a), np.sin(a)
    ox, oz = offsets[:, 0], offsets[:, 1]
    out = np.empty((org.shape[0], len(body_idx), 2))
    out[:, :, 0] = org[:, body_idx, 0] + ca * ox - sa * oz
    out[:, :, 1] = org[:, body_idx, 1] + sa * ox + ca * oz
    return out


def keybody_positions(model, root_pos, pitch, q):
    """World keybody positions (N, K, 2) from generalized coordinates."""
    org, ang = body_kinematics(model, root_pos, pitch, q)
    attach = model.keybody_attach()
    idx = np.array([b for b, _ in attach])
    offs = np.stack([o for _, o in attach])
    return points_on_bodies(org, ang, idx, offs)
