"""Planar articulated-biped simulator with PD actuation and penalty contact.

Generalized coordinates are rho = (root_x, root_z, pitch, q0..q5). Each
control step runs `physics_hz / control_hz` sub-steps of semi-implicit Euler
on the full articulated dynamics: the 9x9 mass matrix is assembled from
per-body Jacobians, bias forces come from the zero-acceleration (centripetal)
terms, ground contact is a spring-damper normal force with a Coulomb-capped
viscous tangential force at the heel and toe of each foot, and reflected
rotor inertia (gear^2 * rotor) is added on the joint diagonal.

Everything is vectorized over a batch of environments; the single-instance
`step` used by the public API runs the same code on a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import character as ch
from .character import CharacterModel, effective_armature
from .errors import ConfigError, MimicLabError, SimulationDiverged
from .motion import rot2d, to_heading_local

N_GEN = 3 + ch.N_JOINTS  # root_x, root_z, pitch + joints


# -- domain randomization --------------------------------------------------------


@dataclass(frozen=True)
class RandomizationDraw:
    """One episode's worth of randomized physics parameters."""

    terrain_height: float = 0.0
    gravity_frac: float = 0.0
    friction: float = 1.0
    base_mass_delta: float = 0.0
    base_com_offset: np.ndarray = field(default_factory=lambda: np.zeros(2))
    motor_kp_scale: np.ndarray = field(default_factory=lambda: np.ones(ch.N_JOINTS))
    motor_kd_scale: np.ndarray = field(default_factory=lambda: np.ones(ch.N_JOINTS))
    action_delay: float = 0.0
    push_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    push_impulses: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def mass_params(self):
        """6-slot privileged layout: mass delta, com offset (2) + pad, friction, terrain."""
        return np.array(
            [
                self.base_mass_delta,
                self.base_com_offset[0],
                self.base_com_offset[1],
                0.0,
                self.friction,
                self.terrain_height,
            ]
        )

    def motor_strength(self):
        """2J vector: per-joint kp scales then kd scales."""
        return np.concatenate([self.motor_kp_scale, self.motor_kd_scale])


def neutral_draw(cfg):
    """Identity draw used for deterministic evaluation (no pushes, no delay)."""
    return RandomizationDraw()


def draw_randomization(cfg, rng):
    """Uniform draws per field; push times are Poisson-spaced with the
    configured mean interval. Field order is fixed for determinism."""
    for name in ("terrain_height_range", "gravity_frac_range", "friction_range",
                 "base_mass_delta_range", "base_com_offset_range",
                 "push_velocity_range", "motor_strength_range", "action_delay_range"):
        lo, hi = getattr(cfg, name)
        if lo > hi:
            raise ConfigError(f"inverted range {name}=({lo}, {hi})")
    if not cfg.randomization_enabled:
        return neutral_draw(cfg)
    terrain = rng.uniform(*cfg.terrain_height_range)
    gravity = rng.uniform(*cfg.gravity_frac_range)
    friction = rng.uniform(*cfg.friction_range)
    mass_delta = rng.uniform(*cfg.base_mass_delta_range)
    com = rng.uniform(*cfg.base_com_offset_range, size=2)
    kp_scale = rng.uniform(*cfg.motor_strength_range, size=ch.N_JOINTS)
    kd_scale = rng.uniform(*cfg.motor_strength_range, size=ch.N_JOINTS)
    delay = rng.uniform(*cfg.action_delay_range)
    times, impulses = [], []
    if cfg.pushes_enabled:
        t = 0.0
        while True:
            t += rng.exponential(cfg.push_interval_mean)
            if t >= cfg.push_horizon:
                break
            mag = rng.uniform(*cfg.push_velocity_range)
            sign = 1.0 if rng.random() < 0.5 else -1.0
            times.append(t)
            impulses.append((sign * mag, 0.0))
    return RandomizationDraw(
        terrain_height=terrain,
        gravity_frac=gravity,
        friction=friction,
        base_mass_delta=mass_delta,
        base_com_offset=com,
        motor_kp_scale=kp_scale,
        motor_kd_scale=kd_scale,
        action_delay=delay,
        push_times=np.array(times),
        push_impulses=np.array(impulses).reshape(-1, 2),
    )


def delay_substeps(delay, cfg):
    """Action delay quantized to physics sub-steps."""
    return int(round(delay * cfg.physics_hz))


# -- state -------------------------------------------------------------------------


@dataclass(frozen=True)
class CharacterState:
    """Full simulator state of one character instance.

    `last_action` plus the per-episode quantized delay form the delayed-action
    buffer: an action issued at a control boundary only reaches the PD loop
    after `delay_substeps` physics sub-steps, with the previous action applied
    until then.
    """

    root_pos: np.ndarray
    root_pitch: float
    root_vel: np.ndarray
    pitch_rate: float
    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray
    foot_contacts: np.ndarray
    last_action: np.ndarray
    time: float = 0.0

    @classmethod
    def nominal(cls, model):
        return cls(
            root_pos=np.array([0.0, model.nominal_root_height]),
            root_pitch=0.0,
            root_vel=np.zeros(2),
            pitch_rate=0.0,
            q=np.zeros(ch.N_JOINTS),
            qd=np.zeros(ch.N_JOINTS),
            qdd=np.zeros(ch.N_JOINTS),
            foot_contacts=np.zeros(2, dtype=bool),
            last_action=np.zeros(ch.N_JOINTS),
        )


class BatchState:
    """Struct-of-arrays state for N parallel instances."""

    __slots__ = ("root_pos", "pitch", "root_vel", "pitch_rate", "q", "qd", "qdd",
                 "contacts", "last_action", "time", "push_cursor")

    def __init__(self, n, model):
        self.root_pos = np.tile([0.0, model.nominal_root_height], (n, 1))
        self.pitch = np.zeros(n)
        self.root_vel = np.zeros((n, 2))
        self.pitch_rate = np.zeros(n)
        self.q = np.zeros((n, ch.N_JOINTS))
        self.qd = np.zeros((n, ch.N_JOINTS))
        self.qdd = np.zeros((n, ch.N_JOINTS))
        self.contacts = np.zeros((n, 2), dtype=bool)
        self.last_action = np.zeros((n, ch.N_JOINTS))
        self.time = np.zeros(n)
        self.push_cursor = np.zeros(n, dtype=int)

    @property
    def n(self):
        return self.root_pos.shape[0]

    def set_instance(self, i, state):
        self.root_pos[i] = state.root_pos
        self.pitch[i] = state.root_pitch
        self.root_vel[i] = state.root_vel
        self.pitch_rate[i] = state.pitch_rate
        self.q[i] = state.q
        self.qd[i] = state.qd
        self.qdd[i] = state.qdd
        self.contacts[i] = state.foot_contacts
        self.last_action[i] = state.last_action
        self.time[i] = state.time
        self.push_cursor[i] = 0

    def instance(self, i):
        return CharacterState(
            root_pos=self.root_pos[i].copy(),
            root_pitch=float(self.pitch[i]),
            root_vel=self.root_vel[i].copy(),
            pitch_rate=float(self.pitch_rate[i]),
            q=self.q[i].copy(),
            qd=self.qd[i].copy(),
            qdd=self.qdd[i].copy(),
            foot_contacts=self.contacts[i].copy(),
            last_action=self.last_action[i].copy(),
            time=float(self.time[i]),
        )


class BatchDraws:
    """Struct-of-arrays view over per-instance randomization draws."""

    def __init__(self, draws, cfg):
        self.draws = list(draws)
        self.terrain = np.array([d.terrain_height for d in draws])
        self.gravity = cfg.gravity * (1.0 + np.array([d.gravity_frac for d in draws]))
        self.friction = np.array([d.friction for d in draws])
        self.mass_delta = np.array([d.base_mass_delta for d in draws])
        self.com_offset = np.stack([d.base_com_offset for d in draws])
        self.kp_scale = np.stack([d.motor_kp_scale for d in draws])
        self.kd_scale = np.stack([d.motor_kd_scale for d in draws])
        self.delay_steps = np.array([delay_substeps(d.action_delay, cfg) for d in draws])

    def set_instance(self, i, draw, cfg):
        self.draws[i] = draw
        self.terrain[i] = draw.terrain_height
        self.gravity[i] = cfg.gravity * (1.0 + draw.gravity_frac)
        self.friction[i] = draw.friction
        self.mass_delta[i] = draw.base_mass_delta
        self.com_offset[i] = draw.base_com_offset
        self.kp_scale[i] = draw.motor_kp_scale
        self.kd_scale[i] = draw.motor_kd_scale
        self.delay_steps[i] = delay_substeps(draw.action_delay, cfg)


# -- actuation ----------------------------------------------------------------------


def pd_torque(q_target, q, qd, kp, kd, kp_scale, kd_scale, torque_limit):
    """Scaled PD joint torques, clamped to the actuator limits."""
    tau = kp_scale * kp * (q_target - q) - kd_scale * kd * qd
    return np.clip(tau, -torque_limit, torque_limit)


# -- dynamics core ------------------------------------------------------------------

_CONTACT_BODY = np.repeat(np.array(ch.FOOT_BODIES), 2)  # heel/toe per foot


def _contact_geometry(model):
    cpl = model.contact_points_local()
    return np.concatenate([cpl, cpl])  # (4, 2) offsets, bodies per _CONTACT_BODY


def _perp(v):
    """90-degree CCW rotation: (x, z) -> (-z, x), applied on the last axis."""
    out = np.empty_like(v)
    out[..., 0] = -v[..., 1]
    out[..., 1] = v[..., 0]
    return out


def _dynamics(model, cfg, S, D, tau):
    """One batched dynamics evaluation.

    Returns (acc (N, 9), contact normal forces (N, 4), contact flags (N, 2),
    body kinematics for reuse).
    """
    n = S.n
    org, ang = ch.body_kinematics(model, S.root_pos, S.pitch, S.q)
    omega = S.pitch_rate[:, None] + S.qd @ ch.ANC.T  # (N, 7)

    masses = np.broadcast_to(model.masses, (n, ch.N_BODIES)).copy()
    masses[:, ch.TORSO] += D.mass_delta
    inertias = np.broadcast_to(model.inertias, (n, ch.N_BODIES))

    com_local = np.broadcast_to(model.com_local(), (n, ch.N_BODIES, 2)).copy()
    com_local[:, ch.TORSO] += D.com_offset
    ca, sa = np.cos(ang), np.sin(ang)
    com_w = np.empty((n, ch.N_BODIES, 2))
    com_w[:, :, 0] = org[:, :, 0] + ca * com_local[:, :, 0] - sa * com_local[:, :, 1]
    com_w[:, :, 1] = org[:, :, 1] + sa * com_local[:, :, 0] + ca * com_local[:, :, 1]

    # origin velocities and zero-acceleration (centripetal) origin accelerations
    v_org = np.empty((n, ch.N_BODIES, 2))
    a_org = np.empty((n, ch.N_BODIES, 2))
    v_org[:, ch.TORSO] = S.root_vel
    a_org[:, ch.TORSO] = 0.0
    for b in range(1, ch.N_BODIES):
        p = ch.BODY_PARENT[b]
        rel = org[:, b] - org[:, p]
        v_org[:, b] = v_org[:, p] + omega[:, p, None] * _perp(rel)
        a_org[:, b] = a_org[:, p] - (omega[:, p] ** 2)[:, None] * rel
    rel_com = com_w - org
    v_com = v_org + omega[..., None] * _perp(rel_com)
    a_com = a_org - (omega**2)[..., None] * rel_com

    # per-body Jacobians J (N, 7, 3, 9); rows = (omega, vx, vz)
    J = np.zeros((n, ch.N_BODIES, 3, N_GEN))
    J[:, :, 0, 2] = 1.0
    J[:, :, 0, 3:] = ch.ANC
    J[:, :, 1, 0] = 1.0
    J[:, :, 2, 1] = 1.0
    rel_root = com_w - S.root_pos[:, None, :]
    J[:, :, 1, 2] = -rel_root[:, :, 1]
    J[:, :, 2, 2] = rel_root[:, :, 0]
    anchor_w = org[:, 1:, :]  # joint j anchor == origin of body j+1
    for j in range(ch.N_JOINTS):
        rel = com_w - anchor_w[:, j, None, :]
        J[:, :, 1, 3 + j] = -rel[:, :, 1] * ch.ANC[:, j]
        J[:, :, 2, 3 + j] = rel[:, :, 0] * ch.ANC[:, j]

    # mass matrix and generalized forces (flattened body*row axis for matmul)
    W = np.empty((n, ch.N_BODIES, 3))
    W[:, :, 0] = inertias
    W[:, :, 1] = masses
    W[:, :, 2] = masses
    Jf = J.reshape(n, 3 * ch.N_BODIES, N_GEN)
    Wf = W.reshape(n, 3 * ch.N_BODIES)
    H = np.matmul(Jf.transpose(0, 2, 1) * Wf[:, None, :], Jf)
    H[:, 3:, 3:][:, np.arange(ch.N_JOINTS), np.arange(ch.N_JOINTS)] += effective_armature(
        model.gear_ratio, model.rotor_inertia
    )

    rhs = np.zeros((n, N_GEN))
    rhs[:, 3:] += tau
    # gravity (z row) and centripetal bias (linear rows; no gyroscopic term in 2-d)
    load = np.zeros((n, ch.N_BODIES, 3))
    load[:, :, 1] = masses * a_com[:, :, 0]
    load[:, :, 2] = masses * (a_com[:, :, 1] + D.gravity[:, None])
    rhs -= np.matmul(Jf.transpose(0, 2, 1), load.reshape(n, 3 * ch.N_BODIES, 1))[..., 0]

    # penalty contact at heels and toes
    offs = _contact_geometry(model)
    pts = ch.points_on_bodies(org, ang, _CONTACT_BODY, offs)
    rel_pts = pts - org[:, _CONTACT_BODY, :]
    v_pts = v_org[:, _CONTACT_BODY, :] + omega[:, _CONTACT_BODY, None] * _perp(rel_pts)
    pen = D.terrain[:, None] - pts[:, :, 1]
    active = pen > 0.0
    fz = np.where(active, np.maximum(0.0, cfg.contact_kp * pen - cfg.contact_kd * v_pts[:, :, 1]), 0.0)
    cap = D.friction[:, None] * fz
    fx = np.clip(-cfg.contact_kt * v_pts[:, :, 0], -cap, cap)

    # generalized contact forces via point Jacobians (same column pattern)
    rel_root_p = pts - S.root_pos[:, None, :]
    anc_pts = ch.ANC[_CONTACT_BODY]  # (4, J)
    rhs[:, 0] += fx.sum(axis=1)
    rhs[:, 1] += fz.sum(axis=1)
    rhs[:, 2] += (-rel_root_p[:, :, 1] * fx + rel_root_p[:, :, 0] * fz).sum(axis=1)
    for j in range(ch.N_JOINTS):
        rel = pts - anchor_w[:, j, None, :]
        col = (-rel[:, :, 1] * fx + rel[:, :, 0] * fz) * anc_pts[:, j]
        rhs[:, 3 + j] += col.sum(axis=1)

    acc = np.linalg.solve(H, rhs[..., None])[..., 0]
    touching = fz > 0.0
    flags = np.stack([touching[:, 0] | touching[:, 1], touching[:, 2] | touching[:, 3]], axis=1)
    return acc, fz, flags


def batch_control_step(model, cfg, S, D, actions, pushes=None):
    """Advance every instance one control period (substeps x physics dt).

    `actions` are PD joint targets (N, J); the per-instance delay decides at
    which sub-step the new action replaces the previous one. `pushes` maps
    instance -> list of (substep, impulse) root-velocity kicks this period.
    Mutates S in place; returns mean contact normal force per instance.
    """
    n = S.n
    dt = cfg.physics_dt
    if not (np.all(np.isfinite(S.root_pos)) and np.all(np.isfinite(S.root_vel)) and np.all(np.isfinite(S.qd))):
        raise SimulationDiverged("simulation diverged (non-finite state)")
    qd_before = S.qd.copy()
    prev_action = S.last_action.copy()
    actions = np.asarray(actions, dtype=np.float64)
    delay = np.minimum(D.delay_steps, cfg.substeps)[:, None]

    for s in range(cfg.substeps):
        if pushes:
            for i, kicks in pushes.items():
                for sub, imp in kicks:
                    if sub == s:
                        S.root_vel[i] += imp
        applied = np.where(s < delay, prev_action, actions)
        tau = pd_torque(applied, S.q, S.qd, model.kp, model.kd, D.kp_scale, D.kd_scale, model.torque_limit)
        acc, fz, flags = _dynamics(model, cfg, S, D, tau)
        S.root_vel += dt * acc[:, 0:2]
        S.pitch_rate += dt * acc[:, 2]
        S.qd += dt * acc[:, 3:]
        S.root_pos += dt * S.root_vel
        S.pitch += dt * S.pitch_rate
        S.q += dt * S.qd
        S.contacts = flags

    S.qdd = (S.qd - qd_before) / cfg.control_dt
    S.last_action = actions.copy()
    S.time += cfg.control_dt
    if not (np.all(np.isfinite(S.root_pos)) and np.all(np.isfinite(S.q)) and np.all(np.isfinite(S.qd))):
        raise SimulationDiverged("simulation diverged (non-finite state)")
    return fz.mean(axis=1)


def _pushes_for_period(D, S, cfg):
    """Collect scheduled push impulses landing in the coming control period."""
    out = {}
    for i, d in enumerate(D.draws):
        times = d.push_times
        cur = S.push_cursor[i]
        if cur >= len(times):
            continue
        kicks = []
        t0 = S.time[i]
        while cur < len(times) and times[cur] < t0 + cfg.control_dt:
            sub = int((times[cur] - t0) / cfg.physics_dt)
            kicks.append((min(max(sub, 0), cfg.substeps - 1), d.push_impulses[cur]))
            cur += 1
        S.push_cursor[i] = cur
        if kicks:
            out[i] = kicks
    return out


def step(state, model, draw, action, cfg):
    """Single-instance control step; same math as the batched path.

    Returns (new state, info) where info carries contact flags and the mean
    normal force over the final sub-step.
    """
    S = BatchState(1, model)
    S.set_instance(0, state)
    D = BatchDraws([draw], cfg)
    pushes = _pushes_for_period(D, S, cfg)
    # single-step API: schedule cursor restarts from the state's own time
    mean_fz = batch_control_step(model, cfg, S, D, np.asarray(action)[None, :], pushes)
    new_state = S.instance(0)
    info = {"foot_contacts": new_state.foot_contacts.copy(), "mean_normal_force": float(mean_fz[0])}
    return new_state, info


# -- observations, reward, termination ----------------------------------------------


def obs_width(n_joints):
    return 2 + 3 * n_joints


def priv_width(n_joints, n_keybodies):
    return 2 + 1 + 3 * n_keybodies + 2 + 6 + 2 * n_joints


def sim_keybodies_world(model, state):
    return ch.keybody_positions(model, state.root_pos[None], np.array([state.root_pitch]), state.q[None])[0]


def assemble_observations(state, goal, draw, model):
    """Proprioceptive o_t and privileged e_t for one instance.

    o_t = [pitch rate, pitch, q, qd, last action]. e_t = [root lin vel, root
    height, heading-local keybodies padded to 3 dims each, contact mask,
    6-slot mass randomization params, motor strength (2J)]. The goal is fed
    to the policy separately and does not enter either vector.
    """
    o = np.concatenate([[state.pitch_rate, state.root_pitch], state.q, state.qd, state.last_action])
    kb_world = sim_keybodies_world(model, state)
    kb_local = (kb_world - state.root_pos) @ rot2d(0.0).T  # planar character: heading 0
    kb_padded = np.concatenate([kb_local, np.zeros((kb_local.shape[0], 1))], axis=1).ravel()
    e = np.concatenate(
        [
            state.root_vel,
            [state.root_pos[1]],
            kb_padded,
            state.foot_contacts.astype(np.float64),
            draw.mass_params(),
            draw.motor_strength(),
        ]
    )
    return o, e


@dataclass(frozen=True)
class StepRef:
    """Per-step tracking reference for reward and termination."""

    q: np.ndarray
    qd: np.ndarray
    pitch: float
    height: float
    lin_vel: np.ndarray
    ang_vel: float
    keybodies_local: np.ndarray
    keybodies_world: np.ndarray


def step_ref_from_goal(goal, keybodies_world=None):
    imm = goal.immediate
    qd = goal.ref_joint_vel if goal.ref_joint_vel is not None else np.zeros_like(imm.joint_positions)
    return StepRef(
        q=imm.joint_positions,
        qd=qd,
        pitch=imm.base_pitch,
        height=imm.root_height,
        lin_vel=imm.base_lin_vel,
        ang_vel=imm.base_ang_vel,
        keybodies_local=imm.keybody_positions_world,
        keybodies_world=keybodies_world if keybodies_world is not None else imm.keybody_positions_world,
    )


def foot_sole_velocities(model, state):
    """Planar velocity of each foot's sole midpoint (2, 2)."""
    org, ang = ch.body_kinematics(model, state.root_pos[None], np.array([state.root_pitch]), state.q[None])
    omega = state.pitch_rate + ch.ANC @ state.qd  # (7,)
    v_org = np.empty((ch.N_BODIES, 2))
    v_org[ch.TORSO] = state.root_vel
    for b in range(1, ch.N_BODIES):
        p = ch.BODY_PARENT[b]
        rel = org[0, b] - org[0, p]
        v_org[b] = v_org[p] + omega[p] * _perp(rel)
    sole = np.array([0.5 * (model.heel_x + model.toe_x), -model.ankle_height])
    out = np.empty((2, 2))
    for k, b in enumerate(ch.FOOT_BODIES):
        r = rot2d(ang[0, b]) @ sole
        out[k] = v_org[b] + omega[b] * _perp(r)
    return out


def compute_reward(state, next_state, action, prev_action, goal, model, weights):
    """Weighted sum of the ten tracking/regularization terms.

    Tracking terms are exponentials of negative squared errors against the
    goal's immediate frame (keybodies compared heading-local, relative to
    each character's own root); penalties are plain norms. Returns (total,
    per-term breakdown).
    """
    ref = goal if isinstance(goal, StepRef) else step_ref_from_goal(goal)
    s = next_state
    kb_world = sim_keybodies_world(model, s)
    kb_local = kb_world - s.root_pos  # heading identically zero for the planar character
    v3 = np.array([s.root_vel[0], s.root_vel[1], s.pitch_rate])
    v3_ref = np.array([ref.lin_vel[0], ref.lin_vel[1], ref.ang_vel])
    sole_v = foot_sole_velocities(model, s)
    slip = sole_v * s.foot_contacts[:, None]

    terms = {
        "joint_pos": np.exp(-np.sum((ref.q - s.q) ** 2)),
        "joint_vel": np.exp(-np.sum((ref.qd - s.qd) ** 2)),
        "root_pose": np.exp(-((ref.pitch - s.root_pitch) ** 2) - (ref.height - s.root_pos[1]) ** 2),
        "root_vel": np.exp(-np.sum((v3_ref - v3) ** 2)),
        "keybody": np.exp(-np.sum((ref.keybodies_local - kb_local) ** 2)),
        "alive": 1.0,
        "slip": -np.linalg.norm(slip),
        "qd_penalty": -np.linalg.norm(s.qd),
        "qdd_penalty": -np.linalg.norm(s.qdd),
        "action_rate": -np.linalg.norm(np.asarray(action) - np.asarray(prev_action)),
    }
    total = sum(weights[k] * v for k, v in terms.items())
    return float(total), {k: float(v) for k, v in terms.items()}


RUNNING, TERMINATED, COMPLETED = "running", "terminated", "completed"


def check_termination(state, ref_keybodies_world, clip_exhausted, threshold, model, cfg):
    """Episode status: tracking failure beats completion, which beats running.

    Termination uses the world-frame maximum keybody error (drift counts) or
    a root fall below `fall_height_frac` of the nominal height; completion
    means the clip time is exhausted.
    """
    kb = sim_keybodies_world(model, state)
    err = float(np.max(np.linalg.norm(kb - ref_keybodies_world, axis=1)))
    if err > threshold or state.root_pos[1] < cfg.fall_height_frac * model.nominal_root_height:
        return TERMINATED, err
    if clip_exhausted:
        return COMPLETED, err
    return RUNNING, err


def mechanical_energy(model, cfg, state, draw):
    """Kinetic + gravitational potential energy, including reflected rotor KE."""
    S = BatchState(1, model)
    S.set_instance(0, state)
    D = BatchDraws([draw], cfg)
    org, ang = ch.body_kinematics(model, S.root_pos, S.pitch, S.q)
    omega = S.pitch_rate[:, None] + S.qd @ ch.ANC.T
    masses = np.broadcast_to(model.masses, (1, ch.N_BODIES)).copy()
    masses[:, ch.TORSO] += D.mass_delta
    com_local = np.broadcast_to(model.com_local(), (1, ch.N_BODIES, 2)).copy()
    com_local[:, ch.TORSO] += D.com_offset
    ca, sa = np.cos(ang), np.sin(ang)
    com_w = np.empty((1, ch.N_BODIES, 2))
    com_w[:, :, 0] = org[:, :, 0] + ca * com_local[:, :, 0] - sa * com_local[:, :, 1]
    com_w[:, :, 1] = org[:, :, 1] + sa * com_local[:, :, 0] + ca * com_local[:, :, 1]
    v_org = np.empty((1, ch.N_BODIES, 2))
    v_org[:, ch.TORSO] = S.root_vel
    for b in range(1, ch.N_BODIES):
        p = ch.BODY_PARENT[b]
        rel = org[:, b] - org[:, p]
        v_org[:, b] = v_org[:, p] + omega[:, p, None] * _perp(rel)
    v_com = v_org + omega[..., None] * _perp(com_w - org)
    ke = 0.5 * np.sum(masses * np.sum(v_com**2, axis=2)) + 0.5 * np.sum(model.inertias * omega[0] ** 2)
    ke += 0.5 * np.sum(effective_armature(model.gear_ratio, model.rotor_inertia) * S.qd[0] ** 2)
    pe = np.sum(masses * D.gravity[:, None] * com_w[:, :, 1])
    return float(ke + pe)
