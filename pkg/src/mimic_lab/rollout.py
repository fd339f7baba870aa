"""Vectorized tracking environments and trajectory collection.

`ClipCache` resamples a clip onto the control-rate grid once (goal features,
reference joint velocities, world keybodies), so per-step goal assembly is
array indexing. `BatchEnv` steps N independent environment instances in one
batched physics call; episode bookkeeping (max keybody error, tracking error
sums, completion) feeds the adaptive sampler and the training log.

Actors are small adapters mapping the observation bundle to PD targets:
teacher (MoE mean), student (with its own history buffer), and a reference
playback oracle used by curation and CLI smoke checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import character as ch
from . import sim
from .character import CharacterModel, keybody_positions
from .errors import MimicLabError
from .motion import goal_feature_width
from .policy import student_forward


def child_rng(seed, *key):
    """Independent deterministic generator derived from (seed, key...)."""
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key)))


class ClipCache:
    """Control-rate tracks derived from one clip."""

    def __init__(self, clip, cfg):
        self.clip = clip
        self.clip_id = clip.id
        rate = cfg.control_hz
        arr = clip.as_array()
        j, k = clip.n_joints, clip.n_keybodies
        src_t = np.arange(len(clip.frames)) / clip.fps
        n = int(np.floor(clip.duration * rate + 1e-9)) + 1
        t = np.arange(n) / rate
        if abs(clip.fps - rate) < 1e-12:
            rows = arr.copy()
            root_x = clip.root_x().copy()
        else:
            rows = np.stack([np.interp(t, src_t, arr[:, c]) for c in range(arr.shape[1])], axis=1)
            root_x = np.interp(t, src_t, clip.root_x())

        self.times = t
        self.n_frames = n
        self.n_steps = max(n - 1, 1)
        self.q = rows[:, :j]
        self.lin_vel = rows[:, j : j + 2]
        self.ang_vel = rows[:, j + 2]
        self.pitch = rows[:, j + 3]
        self.height = rows[:, j + 4]
        self.kb_world = rows[:, j + 5 : j + 5 + 2 * k].reshape(n, k, 2)
        self.heading = rows[:, j + 5 + 2 * k]
        self.root = np.stack([root_x, self.height], axis=1)
        self.qd = np.gradient(self.q, 1.0 / rate, axis=0)

        # heading-local goal features per frame
        c, s = np.cos(self.heading), np.sin(self.heading)
        rel = self.kb_world - self.root[:, None, :]
        kb_local = np.empty_like(rel)
        kb_local[:, :, 0] = c[:, None] * rel[:, :, 0] + s[:, None] * rel[:, :, 1]
        kb_local[:, :, 1] = -s[:, None] * rel[:, :, 0] + c[:, None] * rel[:, :, 1]
        vl = np.empty_like(self.lin_vel)
        vl[:, 0] = c * self.lin_vel[:, 0] + s * self.lin_vel[:, 1]
        vl[:, 1] = -s * self.lin_vel[:, 0] + c * self.lin_vel[:, 1]
        self.kb_local = kb_local
        self.goal_track = np.concatenate(
            [self.q, vl, self.ang_vel[:, None], self.pitch[:, None], self.height[:, None], kb_local.reshape(n, -1)],
            axis=1,
        ).astype(np.float32)
        assert self.goal_track.shape[1] == goal_feature_width(j, k)

        stride = cfg.goal_stride
        w = cfg.window_len
        idx = np.arange(n)[:, None] + stride * np.arange(w)[None, :]
        self.window_idx = np.minimum(idx, n - 1)

    def goal_row(self, step_idx):
        """Index of the immediate next target frame from control step `step_idx`."""
        return min(step_idx + 1, self.n_frames - 1)


@dataclass
class EpisodeRecord:
    clip_id: str
    completed: bool
    max_keybody_error: float
    steps: int
    mean_mpkpe_mm: float
    mean_mpjpe_rad: float


class BatchEnv:
    """N parallel tracking environments over a pool of clip caches."""

    def __init__(self, model, cfg, n_envs, seed=0, eval_mode=False, terminate=True):
        self.model = model
        self.cfg = cfg
        self.n = n_envs
        self.eval_mode = eval_mode
        self.terminate = terminate
        self.S = sim.BatchState(n_envs, model)
        self.D = sim.BatchDraws([sim.neutral_draw(cfg)] * n_envs, cfg)
        self.rngs = [child_rng(seed, 1000 + i) for i in range(n_envs)]
        self.caches = [None] * n_envs
        self.step_idx = np.zeros(n_envs, dtype=int)
        self.thresholds = np.full(n_envs, 0.6)
        self.ep_max_err = np.zeros(n_envs)
        self.ep_kb_sum = np.zeros(n_envs)
        self.ep_jq_sum = np.zeros(n_envs)
        self.residual = getattr(cfg, "residual_actions", False)
        self.last_policy_action = np.zeros((n_envs, model.n_joints))
        self._kb_attach_idx = np.array([b for b, _ in model.keybody_attach()])
        self._kb_attach_off = np.stack([o for _, o in model.keybody_attach()])
        sole = np.array([0.5 * (model.heel_x + model.toe_x), -model.ankle_height])
        self._sole_idx = np.array(ch.FOOT_BODIES)
        self._sole_off = np.stack([sole, sole])

    # -- resets -------------------------------------------------------------------

    def reset_env(self, i, cache, threshold=0.6):
        """Reference-state initialization from the cache's first frame."""
        self.caches[i] = cache
        self.step_idx[i] = 0
        self.thresholds[i] = threshold
        self.ep_max_err[i] = 0.0
        self.ep_kb_sum[i] = 0.0
        self.ep_jq_sum[i] = 0.0
        self.last_policy_action[i] = 0.0
        rng = self.rngs[i]
        draw = sim.draw_randomization(self.cfg, rng) if not self.eval_mode else sim.neutral_draw(self.cfg)
        self.D.set_instance(i, draw, self.cfg)

        noise = 0.0 if self.eval_mode else self.cfg.reset_noise
        q = cache.q[0] + rng.uniform(-noise, noise, size=self.model.n_joints)
        pitch = cache.pitch[0] + rng.uniform(-noise, noise)
        qd = cache.qd[0] + rng.uniform(-noise, noise, size=self.model.n_joints)
        root_vel = cache.lin_vel[0] + rng.uniform(-noise, noise, size=2)
        pitch_rate = cache.ang_vel[0] + rng.uniform(-noise, noise)
        # keep the lowest contact point resting on the terrain despite noise
        org, ang = ch.body_kinematics(self.model, np.zeros((1, 2)), np.array([pitch]), q[None])
        cpl = self.model.contact_points_local()
        pts = ch.points_on_bodies(org, ang, np.repeat(np.array(ch.FOOT_BODIES), 2), np.concatenate([cpl, cpl]))
        root_z = draw.terrain_height - pts[0, :, 1].min() + 1e-3
        root_z = max(root_z, cache.height[0] - 0.05)

        self.S.set_instance(
            i,
            sim.CharacterState(
                root_pos=np.array([cache.root[0, 0], root_z]),
                root_pitch=pitch,
                root_vel=root_vel,
                pitch_rate=pitch_rate,
                q=q,
                qd=qd,
                qdd=np.zeros(self.model.n_joints),
                foot_contacts=np.zeros(2, dtype=bool),
                last_action=q.copy(),
            ),
        )

    # -- observations --------------------------------------------------------------

    def keybodies_world(self):
        return keybody_positions(self.model, self.S.root_pos, self.S.pitch, self.S.q)

    def get_obs(self):
        """(o, e, g, window) float32 batches for the current step.

        The last-action block carries the policy-level action (the residual
        in residual mode), so the policy always observes its own outputs.
        """
        S = self.S
        last = self.last_policy_action if self.residual else S.last_action
        o = np.concatenate(
            [S.pitch_rate[:, None], S.pitch[:, None], S.q, S.qd, last], axis=1
        ).astype(np.float32)
        kb = self.keybodies_world()
        kb_local = kb - S.root_pos[:, None, :]
        kb_padded = np.concatenate([kb_local, np.zeros((self.n, kb.shape[1], 1))], axis=2).reshape(self.n, -1)
        mass_params = np.stack([d.mass_params() for d in self.D.draws])
        e = np.concatenate(
            [
                S.root_vel,
                S.root_pos[:, 1:2],
                kb_padded,
                S.contacts.astype(np.float64),
                mass_params,
                self.D.kp_scale,
                self.D.kd_scale,
            ],
            axis=1,
        ).astype(np.float32)
        g = np.empty((self.n, self.caches[0].goal_track.shape[1]), dtype=np.float32)
        win = np.empty((self.n, self.cfg.window_len, g.shape[1]), dtype=np.float32)
        for i in range(self.n):
            cache = self.caches[i]
            row = cache.goal_row(self.step_idx[i])
            g[i] = cache.goal_track[row]
            win[i] = cache.goal_track[cache.window_idx[row]]
        return o, e, g, win

    # -- stepping -------------------------------------------------------------------

    def _batch_rewards(self, refs, actions, prev_actions):
        q_ref, qd_ref, pitch_ref, h_ref, lin_ref, ang_ref, kb_w_ref, kb_l_ref = refs
        S = self.S
        w = self.cfg.reward_weights()
        kb = self.keybodies_world()
        kb_local = kb - S.root_pos[:, None, :]
        v3_err = (
            (lin_ref[:, 0] - S.root_vel[:, 0]) ** 2
            + (lin_ref[:, 1] - S.root_vel[:, 1]) ** 2
            + (ang_ref - S.pitch_rate) ** 2
        )
        sole_v = self._sole_velocities()
        slip = np.linalg.norm((sole_v * S.contacts[:, :, None]).reshape(self.n, -1), axis=1)
        terms = {
            "joint_pos": np.exp(-np.sum((q_ref - S.q) ** 2, axis=1)),
            "joint_vel": np.exp(-np.sum((qd_ref - S.qd) ** 2, axis=1)),
            "root_pose": np.exp(-((pitch_ref - S.pitch) ** 2) - (h_ref - S.root_pos[:, 1]) ** 2),
            "root_vel": np.exp(-v3_err),
            "keybody": np.exp(-np.sum((kb_l_ref - kb_local) ** 2, axis=(1, 2))),
            "alive": np.ones(self.n),
            "slip": -slip,
            "qd_penalty": -np.linalg.norm(S.qd, axis=1),
            "qdd_penalty": -np.linalg.norm(S.qdd, axis=1),
            "action_rate": -np.linalg.norm(actions - prev_actions, axis=1),
        }
        total = sum(w[k] * v for k, v in terms.items())
        return total, terms, kb, kb_local

    def _sole_velocities(self):
        S = self.S
        org, ang = ch.body_kinematics(self.model, S.root_pos, S.pitch, S.q)
        omega = S.pitch_rate[:, None] + S.qd @ ch.ANC.T
        v_org = np.empty((self.n, ch.N_BODIES, 2))
        v_org[:, ch.TORSO] = S.root_vel
        for b in range(1, ch.N_BODIES):
            p = ch.BODY_PARENT[b]
            rel = org[:, b] - org[:, p]
            v_org[:, b] = v_org[:, p] + omega[:, p, None] * sim._perp(rel)
        pts = ch.points_on_bodies(org, ang, self._sole_idx, self._sole_off)
        rel = pts - org[:, self._sole_idx, :]
        return v_org[:, self._sole_idx, :] + omega[:, self._sole_idx, None] * sim._perp(rel)

    def step(self, actions):
        """Advance all instances one control step.

        Returns (rewards, dones, records) where `records` holds an
        EpisodeRecord per environment that finished this step (terminated or
        completed); those instances must be reset before the next call.
        """
        actions = np.asarray(actions, dtype=np.float64)
        prev_actions = self.last_policy_action.copy()
        if self.residual:
            targets = actions.copy()
            for i in range(self.n):
                c = self.caches[i]
                targets[i] += c.q[c.goal_row(self.step_idx[i])]
        else:
            targets = actions
        pushes = {} if self.eval_mode else sim._pushes_for_period(self.D, self.S, self.cfg)
        sim.batch_control_step(self.model, self.cfg, self.S, self.D, targets, pushes)
        self.step_idx += 1
        self.last_policy_action = actions.copy()

        refs = self._gather_refs()
        rewards, terms, kb, kb_local = self._batch_rewards(refs, actions, prev_actions)
        kb_w_ref, kb_l_ref = refs[6], refs[7]
        err_world = np.linalg.norm(kb - kb_w_ref, axis=2).max(axis=1)
        err_local_mean = np.linalg.norm(kb_local - kb_l_ref, axis=2).mean(axis=1)
        jq_err = np.abs(self.S.q - refs[0]).mean(axis=1)

        self.ep_max_err = np.maximum(self.ep_max_err, err_world)
        self.ep_kb_sum += err_local_mean
        self.ep_jq_sum += jq_err

        fallen = self.S.root_pos[:, 1] < self.cfg.fall_height_frac * self.model.nominal_root_height
        exceeded = err_world > self.thresholds
        terminated = (exceeded | fallen) if self.terminate else fallen
        exhausted = np.array([self.step_idx[i] >= self.caches[i].n_steps for i in range(self.n)])
        completed = exhausted & ~terminated
        dones = terminated | completed

        records = []
        for i in np.flatnonzero(dones):
            steps = int(self.step_idx[i])
            records.append(
                EpisodeRecord(
                    clip_id=self.caches[i].clip_id,
                    completed=bool(completed[i]),
                    max_keybody_error=float(self.ep_max_err[i]),
                    steps=steps,
                    mean_mpkpe_mm=float(self.ep_kb_sum[i] / steps * 1000.0),
                    mean_mpjpe_rad=float(self.ep_jq_sum[i] / steps),
                )
            )
        return rewards, dones, records

    def _gather_refs(self):
        """References at the frame just reached (step_idx already advanced)."""
        j, k = self.model.n_joints, self.model.n_keybodies
        q = np.empty((self.n, j))
        qd = np.empty((self.n, j))
        pitch = np.empty(self.n)
        height = np.empty(self.n)
        lin = np.empty((self.n, 2))
        ang = np.empty(self.n)
        kb_w = np.empty((self.n, k, 2))
        kb_l = np.empty((self.n, k, 2))
        for i in range(self.n):
            c = self.caches[i]
            r = min(self.step_idx[i], c.n_frames - 1)
            q[i] = c.q[r]
            qd[i] = c.qd[r]
            pitch[i] = c.pitch[r]
            height[i] = c.height[r]
            lin[i] = c.lin_vel[r]
            ang[i] = c.ang_vel[r]
            kb_w[i] = c.kb_world[r]
            kb_l[i] = c.kb_local[r]
        return q, qd, pitch, height, lin, ang, kb_w, kb_l


# -- actors ---------------------------------------------------------------------


class TeacherActor:
    """Deterministic MoE mean action."""

    def __init__(self, policy):
        self.policy = policy

    def reset(self, i, env):
        pass

    def act(self, env, o, e, g, win):
        from . import autodiff as ad

        with ad.no_grad():
            mean, _, _, _ = self.policy.forward(o, e, g, win)
        return mean.data.astype(np.float64)


class StudentActor:
    """Student mean action with an internal shifting history buffer."""

    def __init__(self, student, n_envs):
        self.student = student
        self.history = np.zeros((n_envs, student.history_len, student.dims.obs), dtype=np.float32)

    def reset(self, i, env):
        self.history[i] = 0.0

    def act(self, env, o, e, g, win):
        self.history = np.roll(self.history, -1, axis=1)
        self.history[:, -1, :] = o
        out = student_forward(self.student, self.history, (g, win))
        return out.astype(np.float64)


class PlaybackActor:
    """Oracle that outputs the reference joint targets (ignores observations).

    In residual mode that is the zero action by construction."""

    def reset(self, i, env):
        pass

    def act(self, env, o, e, g, win):
        j = env.model.n_joints
        if env.residual:
            return np.zeros((env.n, j))
        out = np.empty((env.n, j))
        for i in range(env.n):
            c = env.caches[i]
            out[i] = c.q[c.goal_row(env.step_idx[i])]
        return out


@dataclass
class Trajectory:
    """Recorded control-rate rollout of one clip."""

    clip_id: str
    times: np.ndarray
    q: np.ndarray
    root_pos: np.ndarray
    pitch: np.ndarray
    root_vel: np.ndarray
    pitch_rate: np.ndarray
    keybodies_world: np.ndarray
    gating: np.ndarray | None = None
    completed: bool = True
    steps: int = 0


def run_episode(actor, cache, model, cfg, seed=0, terminate=False, threshold=0.6,
                eval_mode=True, record_gating_policy=None):
    """Roll one clip to completion (or termination) and record the trajectory."""
    env = BatchEnv(model, cfg, 1, seed=seed, eval_mode=eval_mode, terminate=terminate)
    env.reset_env(0, cache, threshold)
    actor.reset(0, env)
    rows = []
    gating = []
    completed = True
    steps = 0
    for _ in range(cache.n_steps):
        o, e, g, win = env.get_obs()
        a = actor.act(env, o, e, g, win)
        if record_gating_policy is not None:
            _, probs, _, _ = _gate_probs(record_gating_policy, o, e, g, win)
            gating.append(probs[0])
        _, dones, recs = env.step(a)
        st = env.S
        kb = env.keybodies_world()
        rows.append(
            (
                st.time[0],
                st.q[0].copy(),
                st.root_pos[0].copy(),
                st.pitch[0],
                st.root_vel[0].copy(),
                st.pitch_rate[0],
                kb[0].copy(),
            )
        )
        steps += 1
        if dones[0]:
            completed = recs[0].completed
            break
    times = np.array([r[0] for r in rows])
    return Trajectory(
        clip_id=cache.clip_id,
        times=times,
        q=np.stack([r[1] for r in rows]),
        root_pos=np.stack([r[2] for r in rows]),
        pitch=np.array([r[3] for r in rows]),
        root_vel=np.stack([r[4] for r in rows]),
        pitch_rate=np.array([r[5] for r in rows]),
        keybodies_world=np.stack([r[6] for r in rows]),
        gating=np.stack(gating) if gating else None,
        completed=completed,
        steps=steps,
    )


def _gate_probs(policy, o, e, g, win):
    from . import autodiff as ad

    with ad.no_grad():
        return policy.forward(o, e, g, win)
