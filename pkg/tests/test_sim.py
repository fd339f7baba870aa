import dataclasses
import math

import numpy as np
import pytest

from mimic_lab import sim
from mimic_lab.character import CharacterModel, effective_armature, keybody_positions
from mimic_lab.config import EnvConfig
from mimic_lab.errors import ConfigError, SimulationDiverged
from mimic_lab.motion import MotionFrame, to_heading_local
from mimic_lab.sim import (
    CharacterState,
    RandomizationDraw,
    assemble_observations,
    check_termination,
    compute_reward,
    delay_substeps,
    draw_randomization,
    neutral_draw,
    pd_torque,
    step,
    step_ref_from_goal,
)


@pytest.fixture
def model():
    return CharacterModel()


@pytest.fixture
def cfg():
    return EnvConfig()


def passive_model(model):
    """Actuation effectively off (zero torque at the PD level)."""
    return dataclasses.replace(model, kp=np.full(6, 1e-12), kd=np.full(6, 1e-12))


def floating_state(z=3.0, vx=0.0, q=0.2):
    return CharacterState(
        root_pos=np.array([0.0, z]),
        root_pitch=0.1,
        root_vel=np.array([vx, 0.0]),
        pitch_rate=0.0,
        q=np.full(6, q),
        qd=np.zeros(6),
        qdd=np.zeros(6),
        foot_contacts=np.zeros(2, dtype=bool),
        last_action=np.zeros(6),
    )


class TestArmature:
    def test_formula(self):
        assert effective_armature(10.0, 0.001) == pytest.approx(0.1)
        assert effective_armature(1.0, 0.5) == pytest.approx(0.5)
        assert effective_armature(3.0, 0.0) == 0.0

    def test_negative_inertia_errors(self):
        with pytest.raises(ConfigError):
            effective_armature(2.0, -0.1)

    def test_monotone_joint_acceleration(self, model, cfg):
        # unit torque at one joint, gravity off, joints at rest: the direct
        # acceleration response never grows as reflected inertia is added
        zero_g = dataclasses.replace(neutral_draw(cfg), gravity_frac=-1.0)
        for j in range(6):
            prev = None
            for rotor in (0.0, 1e-4, 1e-3, 1e-2):
                m = dataclasses.replace(passive_model(model), rotor_inertia=np.full(6, rotor))
                S = sim.BatchState(1, m)
                S.set_instance(0, floating_state(q=0.15))
                D = sim.BatchDraws([zero_g], cfg)
                tau = np.zeros((1, 6))
                tau[0, j] = 1.0
                acc, _, _ = sim._dynamics(m, cfg, S, D, tau)
                mag = abs(acc[0, 3 + j])
                if prev is not None:
                    assert mag <= prev + 1e-12
                prev = mag


class TestPdTorque:
    def test_zero_error_zero_torque(self):
        tau = pd_torque(np.zeros(6), np.zeros(6), np.zeros(6), np.full(6, 50.0), np.full(6, 2.0), 1.0, 1.0, np.full(6, 100.0))
        np.testing.assert_array_equal(tau, np.zeros(6))

    def test_unit_error(self):
        tau = pd_torque(np.ones(1), np.zeros(1), np.zeros(1), np.array([50.0]), np.array([2.0]), 1.0, 1.0, np.array([100.0]))
        assert tau[0] == pytest.approx(50.0)

    def test_saturation(self):
        tau = pd_torque(np.array([100.0]), np.zeros(1), np.zeros(1), np.array([50.0]), np.array([2.0]), 1.0, 1.0, np.array([60.0]))
        assert tau[0] == 60.0
        tau = pd_torque(np.array([-100.0]), np.zeros(1), np.zeros(1), np.array([50.0]), np.array([2.0]), 1.0, 1.0, np.array([60.0]))
        assert tau[0] == -60.0


class TestFreeFall:
    def test_matches_discrete_projectile(self, model, cfg):
        # zero torque, no contact: root follows the closed-form solution of
        # semi-implicit Euler under constant gravity, and no spurious joint
        # motion appears (uniform gravity induces no internal accelerations)
        m = passive_model(model)
        draw = neutral_draw(cfg)
        st = floating_state(z=3.0, vx=0.5)
        steps = 5  # 0.1 s
        cur = st
        for _ in range(steps):
            cur, _ = step(cur, m, draw, np.zeros(6), cfg)
        dt = cfg.physics_dt
        v, z, x = 0.0, 3.0, 0.0
        for _ in range(steps * cfg.substeps):
            v -= cfg.gravity * dt
            z += v * dt
            x += 0.5 * dt
        assert abs(cur.root_pos[1] - z) < 1e-6
        assert abs(cur.root_pos[0] - x) < 1e-6
        assert np.abs(cur.q - st.q).max() < 1e-9
        assert abs(cur.pitch_rate) < 1e-9

    def test_energy_drift_below_one_percent(self, model, cfg):
        # unactuated, contact-free, joints swinging under gravity for 1 s
        m = passive_model(model)
        draw = neutral_draw(cfg)
        st = CharacterState(
            root_pos=np.array([0.0, 5.0]),
            root_pitch=0.2,
            root_vel=np.array([0.1, 1.5]),
            pitch_rate=0.3,
            q=np.array([0.3, -0.4, 0.2, -0.3, 0.5, -0.1]),
            qd=np.array([0.5, -0.5, 0.3, 0.4, -0.2, 0.1]),
            qdd=np.zeros(6),
            foot_contacts=np.zeros(2, dtype=bool),
            last_action=np.zeros(6),
        )
        e0 = sim.mechanical_energy(m, cfg, st, draw)
        cur = st
        for _ in range(cfg.control_hz):
            cur, _ = step(cur, m, draw, np.zeros(6), cfg)
        assert cur.root_pos[1] > 1.0, "must stay contact-free"
        e1 = sim.mechanical_energy(m, cfg, cur, draw)
        assert abs(e1 - e0) / abs(e0) < 0.01


class TestActionDelay:
    def test_quantization(self, cfg):
        assert delay_substeps(0.0, cfg) == 0
        assert delay_substeps(0.02, cfg) == 10
        assert delay_substeps(0.011, cfg) == 6  # round(5.5) banker's -> 6

    def test_changed_action_lands_on_expected_substep(self, model, cfg):
        # delay 0.02 s at 500 Hz = 10 substeps: the new action first drives
        # torques on the 11th physics sub-step after it was issued, i.e. the
        # whole first control period still runs on the previous action.
        m = passive_model(model)  # zero torque so delay is observable via q
        m = dataclasses.replace(m, kp=np.full(6, 40.0), kd=np.full(6, 0.0))
        draw = dataclasses.replace(neutral_draw(cfg), action_delay=0.02)
        st = floating_state(z=50.0, q=0.0)
        new_action = np.full(6, 0.3)
        after_one, _ = step(st, m, draw, new_action, cfg)
        # with the full-period delay the new target never acted during step 1
        baseline, _ = step(st, m, dataclasses.replace(draw, action_delay=0.0), np.zeros(6), cfg)
        np.testing.assert_allclose(after_one.q, baseline.q, atol=1e-12)
        # during step 2 the buffered action applies from the very first substep
        after_two, _ = step(after_one, m, draw, new_action, cfg)
        moved = np.abs(after_two.q - after_one.q).max()
        assert moved > 1e-4

    def test_half_period_delay(self, model, cfg):
        # delay 0.01 s = 5 substeps: action affects substeps 5..9 of its own period
        m = dataclasses.replace(passive_model(model), kp=np.full(6, 40.0), kd=np.full(6, 0.0))
        st = floating_state(z=50.0, q=0.0)
        tgt = np.full(6, 0.3)
        delayed, _ = step(st, m, dataclasses.replace(neutral_draw(cfg), action_delay=0.01), tgt, cfg)
        immediate, _ = step(st, m, neutral_draw(cfg), tgt, cfg)
        zero, _ = step(st, m, neutral_draw(cfg), np.zeros(6), cfg)
        assert np.all(delayed.q > zero.q)
        assert np.all(delayed.q < immediate.q)


class TestDeterminism:
    def test_bit_identical_step(self, model, cfg):
        rng = np.random.default_rng(0)
        draw = draw_randomization(cfg, rng)
        st = floating_state(z=0.7, q=0.05)
        a = np.full(6, 0.1)
        s1, _ = step(st, model, draw, a, cfg)
        s2, _ = step(st, model, draw, a, cfg)
        np.testing.assert_array_equal(s1.root_pos, s2.root_pos)
        np.testing.assert_array_equal(s1.q, s2.q)
        np.testing.assert_array_equal(s1.qd, s2.qd)

    def test_divergence_raises(self, model, cfg):
        st = floating_state()
        bad = dataclasses.replace(st, root_vel=np.array([np.inf, 0.0]))
        with pytest.raises(SimulationDiverged):
            step(bad, model, neutral_draw(cfg), np.zeros(6), cfg)


class TestContact:
    def test_standing_penetration_below_5mm(self, model, cfg):
        st = CharacterState.nominal(model)
        draw = neutral_draw(cfg)
        for _ in range(100):
            st, _ = step(st, model, draw, np.zeros(6), cfg)
        kb = sim.sim_keybodies_world(model, st)
        # sole keybodies sit at the contact plane height when standing
        penetration = -(kb[:2, 1].min())
        assert penetration < 0.005
        assert st.foot_contacts.all()

    def test_stationary_settle(self, model, cfg):
        st = CharacterState.nominal(model)
        draw = neutral_draw(cfg)
        for _ in range(150):
            st, _ = step(st, model, draw, np.zeros(6), cfg)
        assert abs(st.root_pitch) < 0.02
        assert np.linalg.norm(st.root_vel) < 0.01


class TestRandomizationDraws:
    def test_draws_within_ranges(self, cfg):
        rng = np.random.default_rng(1)
        for _ in range(500):
            d = draw_randomization(cfg, rng)
            assert cfg.terrain_height_range[0] <= d.terrain_height <= cfg.terrain_height_range[1]
            assert cfg.gravity_frac_range[0] <= d.gravity_frac <= cfg.gravity_frac_range[1]
            assert cfg.friction_range[0] <= d.friction <= cfg.friction_range[1]
            assert cfg.base_mass_delta_range[0] <= d.base_mass_delta <= cfg.base_mass_delta_range[1]
            assert np.all((d.motor_kp_scale >= 0.8) & (d.motor_kp_scale <= 1.2))
            assert np.all((d.motor_kd_scale >= 0.8) & (d.motor_kd_scale <= 1.2))
            assert cfg.action_delay_range[0] <= d.action_delay <= cfg.action_delay_range[1]
            if d.push_times.size:
                assert np.all(np.linalg.norm(d.push_impulses, axis=1) <= cfg.push_velocity_range[1] + 1e-12)

    def test_zero_width_range_is_exact(self):
        cfg = EnvConfig(motor_strength_range=(1.0, 1.0))
        d = draw_randomization(cfg, np.random.default_rng(2))
        np.testing.assert_array_equal(d.motor_kp_scale, np.ones(6))

    def test_same_seed_same_draw(self, cfg):
        d1 = draw_randomization(cfg, np.random.default_rng(7))
        d2 = draw_randomization(cfg, np.random.default_rng(7))
        assert d1.terrain_height == d2.terrain_height
        np.testing.assert_array_equal(d1.push_times, d2.push_times)
        np.testing.assert_array_equal(d1.motor_kp_scale, d2.motor_kp_scale)

    def test_inverted_range_errors(self):
        with pytest.raises(ConfigError):
            EnvConfig(friction_range=(2.0, 0.1))


class TestObservations:
    def test_layout_lengths(self, model, cfg):
        st = CharacterState.nominal(model)
        o, e = assemble_observations(st, None, neutral_draw(cfg), model)
        assert o.shape[0] == 2 + 3 * 6 == sim.obs_width(6)
        assert e.shape[0] == 2 + 1 + 3 * 3 + 2 + 6 + 2 * 6 == sim.priv_width(6, 3)

    def test_stationary_qd_block_zero(self, model, cfg):
        st = CharacterState.nominal(model)
        o, _ = assemble_observations(st, None, neutral_draw(cfg), model)
        np.testing.assert_array_equal(o[8:14], np.zeros(6))

    def test_keybody_block_matches_heading_local_transform(self, model, cfg):
        st = dataclasses.replace(CharacterState.nominal(model), root_pitch=0.2, q=np.full(6, 0.1))
        _, e = assemble_observations(st, None, neutral_draw(cfg), model)
        kb_world = sim.sim_keybodies_world(model, st)
        frame = MotionFrame(st.q, st.root_vel, 0.0, st.root_pitch, st.root_pos[1], kb_world)
        local = to_heading_local(frame, st.root_pos, 0.0)
        block = e[3 : 3 + 9].reshape(3, 3)
        np.testing.assert_allclose(block[:, :2], local.keybody_positions_world, atol=1e-12)
        np.testing.assert_array_equal(block[:, 2], np.zeros(3))


def _perfect_goal(model, state):
    """StepRef that matches the state exactly."""
    kb_world = sim.sim_keybodies_world(model, state)
    return sim.StepRef(
        q=state.q.copy(),
        qd=state.qd.copy(),
        pitch=state.root_pitch,
        height=state.root_pos[1],
        lin_vel=state.root_vel.copy(),
        ang_vel=state.pitch_rate,
        keybodies_local=kb_world - state.root_pos,
        keybodies_world=kb_world,
    )


class TestReward:
    def test_perfect_tracking(self, model, cfg):
        st = CharacterState.nominal(model)
        ref = _perfect_goal(model, st)
        total, terms = compute_reward(st, st, np.zeros(6), np.zeros(6), ref, model, cfg.reward_weights())
        for k in ("joint_pos", "joint_vel", "root_pose", "root_vel", "keybody"):
            assert terms[k] == pytest.approx(1.0)
        assert terms["alive"] == 1.0
        for k in ("slip", "qd_penalty", "qdd_penalty", "action_rate"):
            assert terms[k] == 0.0

    def test_unit_joint_error(self, model, cfg):
        st = CharacterState.nominal(model)
        ref = _perfect_goal(model, st)
        ref = dataclasses.replace(ref, q=st.q + np.array([1.0, 0, 0, 0, 0, 0]))
        _, terms = compute_reward(st, st, np.zeros(6), np.zeros(6), ref, model, cfg.reward_weights())
        assert terms["joint_pos"] == pytest.approx(math.exp(-1.0), abs=1e-12)

    def test_slip_linear_in_speed(self, model, cfg):
        st = dataclasses.replace(
            CharacterState.nominal(model),
            root_vel=np.array([0.3, 0.0]),
            foot_contacts=np.array([True, False]),
        )
        ref = _perfect_goal(model, st)
        _, terms = compute_reward(st, st, np.zeros(6), np.zeros(6), ref, model, cfg.reward_weights())
        assert terms["slip"] == pytest.approx(-0.3)

    def test_all_terms_match_scalar_oracle(self, model, cfg):
        # independent scalar re-implementation on random states
        rng = np.random.default_rng(3)
        weights = cfg.reward_weights()
        for _ in range(100):
            st = CharacterState(
                root_pos=rng.normal(size=2) * 0.2 + np.array([0.0, 0.7]),
                root_pitch=rng.normal() * 0.2,
                root_vel=rng.normal(size=2) * 0.5,
                pitch_rate=rng.normal() * 0.5,
                q=rng.normal(size=6) * 0.4,
                qd=rng.normal(size=6) * 2.0,
                qdd=rng.normal(size=6) * 20.0,
                foot_contacts=rng.random(2) < 0.5,
                last_action=rng.normal(size=6) * 0.3,
            )
            ref = sim.StepRef(
                q=rng.normal(size=6) * 0.4,
                qd=rng.normal(size=6) * 2.0,
                pitch=rng.normal() * 0.2,
                height=0.6 + rng.random() * 0.2,
                lin_vel=rng.normal(size=2) * 0.5,
                ang_vel=rng.normal() * 0.5,
                keybodies_local=rng.normal(size=(3, 2)) * 0.3,
                keybodies_world=rng.normal(size=(3, 2)),
            )
            action = rng.normal(size=6) * 0.3
            prev = rng.normal(size=6) * 0.3
            total, terms = compute_reward(st, st, action, prev, ref, model, weights)

            kb = keybody_positions(model, st.root_pos[None], np.array([st.root_pitch]), st.q[None])[0]
            kb_local = kb - st.root_pos
            sole_v = sim.foot_sole_velocities(model, st)
            exp = math.exp
            oracle = {
                "joint_pos": exp(-sum((ref.q[i] - st.q[i]) ** 2 for i in range(6))),
                "joint_vel": exp(-sum((ref.qd[i] - st.qd[i]) ** 2 for i in range(6))),
                "root_pose": exp(-((ref.pitch - st.root_pitch) ** 2) - (ref.height - st.root_pos[1]) ** 2),
                "root_vel": exp(
                    -((ref.lin_vel[0] - st.root_vel[0]) ** 2)
                    - (ref.lin_vel[1] - st.root_vel[1]) ** 2
                    - (ref.ang_vel - st.pitch_rate) ** 2
                ),
                "keybody": exp(-sum((ref.keybodies_local[i, d] - kb_local[i, d]) ** 2 for i in range(3) for d in range(2))),
                "alive": 1.0,
                "slip": -math.sqrt(sum((sole_v[f, d] * float(st.foot_contacts[f])) ** 2 for f in range(2) for d in range(2))),
                "qd_penalty": -math.sqrt(sum(v * v for v in st.qd)),
                "qdd_penalty": -math.sqrt(sum(v * v for v in st.qdd)),
                "action_rate": -math.sqrt(sum((action[i] - prev[i]) ** 2 for i in range(6))),
            }
            for k, v in oracle.items():
                assert abs(terms[k] - v) < 1e-10, k
            assert abs(total - sum(weights[k] * v for k, v in oracle.items())) < 1e-10


class TestTermination:
    def test_exceeding_threshold_terminates(self, model, cfg):
        st = CharacterState.nominal(model)
        kb = sim.sim_keybodies_world(model, st)
        ref = kb.copy()
        ref[0] += np.array([0.61, 0.0])
        status, err = check_termination(st, ref, False, 0.6, model, cfg)
        assert status == sim.TERMINATED
        assert err == pytest.approx(0.61)

    def test_completion_at_clip_end(self, model, cfg):
        st = CharacterState.nominal(model)
        kb = sim.sim_keybodies_world(model, st)
        ref = kb + np.array([0.24, 0.0])
        status, _ = check_termination(st, ref, True, 0.25, model, cfg)
        assert status == sim.COMPLETED

    def test_error_exactly_threshold_keeps_running(self, model, cfg):
        st = CharacterState.nominal(model)
        kb = sim.sim_keybodies_world(model, st)
        ref = kb.copy()
        ref[1] += np.array([0.6, 0.0])
        status, err = check_termination(st, ref, False, 0.6, model, cfg)
        assert err == pytest.approx(0.6)
        assert status == sim.RUNNING

    def test_fall_terminates(self, model, cfg):
        st = dataclasses.replace(CharacterState.nominal(model), root_pos=np.array([0.0, 0.2]))
        kb = sim.sim_keybodies_world(model, st)
        status, _ = check_termination(st, kb, False, 0.6, model, cfg)
        assert status == sim.TERMINATED
