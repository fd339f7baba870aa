import numpy as np
import pytest

from mimic_lab.character import CharacterModel
from mimic_lab.config import EnvConfig, TrainConfig, desk_env_config, desk_train_config
from mimic_lab.errors import MimicLabError
from mimic_lab.nets import ParamVector
from mimic_lab.policy import MoEPolicy, PolicyDims, ValueNet, gaussian_log_prob_np
from mimic_lab.ppo import TeacherTrainer, compute_gae, normalize_advantages, ppo_loss, train_teacher
from mimic_lab.synthetic import generate_clip

DIMS = PolicyDims(obs=6, priv=8, goal=7, window_len=10, action=2)


def tiny_nets(seed=0):
    kw = dict(hidden=(8, 8), z_dim=4, enc_channels=(3,), enc_kernel=3, enc_stride=2)
    policy = MoEPolicy(DIMS, n_experts=2, rng=np.random.default_rng(seed), **kw)
    critic = ValueNet(DIMS, rng=np.random.default_rng(seed + 1), **kw)
    return policy, critic


def make_batch(rng, b=24):
    return {
        "o": rng.normal(size=(b, DIMS.obs)).astype(np.float32),
        "e": rng.normal(size=(b, DIMS.priv)).astype(np.float32),
        "g": rng.normal(size=(b, DIMS.goal)).astype(np.float32),
        "win": rng.normal(size=(b, DIMS.window_len, DIMS.goal)).astype(np.float32),
        "actions": rng.normal(size=(b, DIMS.action)).astype(np.float32) * 0.1,
        "adv": rng.normal(size=b).astype(np.float32),
        "returns": rng.normal(size=b).astype(np.float32),
    }


class TestGae:
    def test_single_terminal_step(self):
        adv, ret = compute_gae([1.0], [0.0], [1.0], gamma=1.0, lam=1.0)
        assert adv[0] == 1.0 and ret[0] == 1.0

    def test_all_zero(self):
        adv, ret = compute_gae(np.zeros(5), np.zeros(5), np.zeros(5), 0.9, 0.95)
        np.testing.assert_array_equal(adv, np.zeros(5))

    def test_three_step_hand_unrolled(self):
        # brute-force unroll of the recursion
        r = np.array([1.0, 1.0, 1.0])
        v = np.zeros(3)
        dones = np.array([0.0, 0.0, 1.0])
        gamma, lam = 0.9, 0.95
        d2 = r[2] + 0.0 - v[2]
        d1 = r[1] + gamma * v[2] - v[1]
        d0 = r[0] + gamma * v[1] - v[0]
        a2 = d2
        a1 = d1 + gamma * lam * a2
        a0 = d0 + gamma * lam * a1
        adv, ret = compute_gae(r, v, dones, gamma, lam)
        np.testing.assert_allclose(adv, [a0, a1, a2], atol=1e-12)
        np.testing.assert_allclose(ret, adv + v, atol=1e-12)

    def test_bootstrap_tail(self):
        adv, _ = compute_gae([0.0], [0.0], [0.0], 0.5, 1.0, bootstrap=np.array([2.0]))
        assert adv[0] == pytest.approx(1.0)

    def test_done_cuts_recursion(self):
        r = np.array([0.0, 5.0])
        v = np.zeros(2)
        adv_cut, _ = compute_gae(r, v, np.array([1.0, 1.0]), 0.9, 0.9)
        assert adv_cut[0] == 0.0  # reward after the boundary leaks nothing back

    def test_shape_mismatch_errors(self):
        with pytest.raises(MimicLabError):
            compute_gae(np.zeros(3), np.zeros(4), np.zeros(3), 0.9, 0.9)


class TestAdvantageNormalization:
    def test_moments(self):
        rng = np.random.default_rng(0)
        a = normalize_advantages(rng.normal(3.0, 7.0, size=5000))
        assert abs(a.mean()) < 1e-6
        assert abs(a.std() - 1.0) < 1e-6


class TestPpoLoss:
    def test_identical_policy_ratio_one(self):
        policy, critic = tiny_nets()
        rng = np.random.default_rng(1)
        batch = make_batch(rng)
        mean, _, _, _ = policy.forward(batch["o"], batch["e"], batch["g"], batch["win"])
        batch["old_logp"] = gaussian_log_prob_np(
            mean.data.astype(np.float64), policy.log_std.data.astype(np.float64),
            batch["actions"].astype(np.float64),
        )
        batch["adv"] = normalize_advantages(batch["adv"]).astype(np.float32)
        cfg = TrainConfig()
        loss, diags = ppo_loss(policy, critic, batch, cfg)
        assert diags["clip_fraction"] == 0.0
        assert abs(diags["approx_kl"]) < 1e-6
        # surrogate at ratio 1 is -mean(adv) ~ 0 for normalized advantages
        assert abs(diags["policy_loss"]) < 1e-5

    def test_clip_arithmetic(self):
        # ratio 1.5, eps 0.2, adv 1 -> min(1.5, 1.2) = 1.2
        ratio = 1.5
        adv = 1.0
        eps = 0.2
        surrogate = min(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)
        assert surrogate == pytest.approx(1.2)

    def test_surrogate_never_exceeds_clip_bound(self):
        policy, critic = tiny_nets(seed=3)
        rng = np.random.default_rng(4)
        cfg = TrainConfig()
        batch = make_batch(rng)
        batch["old_logp"] = gaussian_log_prob_np(
            np.zeros((24, DIMS.action)), policy.log_std.data.astype(np.float64),
            batch["actions"].astype(np.float64),
        )
        mean, _, _, _ = policy.forward(batch["o"], batch["e"], batch["g"], batch["win"])
        new_logp = gaussian_log_prob_np(
            mean.data.astype(np.float64), policy.log_std.data.astype(np.float64),
            batch["actions"].astype(np.float64),
        )
        ratio = np.exp(new_logp - batch["old_logp"])
        adv = batch["adv"].astype(np.float64)
        surrogate = np.minimum(ratio * adv, np.clip(ratio, 0.8, 1.2) * adv)
        assert np.all(surrogate <= (1 + cfg.clip_eps) * np.abs(adv) + 1e-12)

    def test_nonfinite_loss_errors(self):
        policy, critic = tiny_nets(seed=5)
        rng = np.random.default_rng(6)
        batch = make_batch(rng)
        batch["old_logp"] = gaussian_log_prob_np(
            np.zeros((24, DIMS.action)), policy.log_std.data.astype(np.float64),
            batch["actions"].astype(np.float64),
        )
        batch["adv"] = np.full(24, np.nan, dtype=np.float32)
        with pytest.raises(MimicLabError, match="non-finite"):
            ppo_loss(policy, critic, batch, TrainConfig())


def micro_setup(iterations=2, seed=0, **kw):
    model = CharacterModel()
    env_cfg = desk_env_config()
    cfg = desk_train_config(
        n_envs=4, steps_per_env=20, iterations=iterations, minibatch_size=40,
        epochs=2, hidden=(16, 16), z_dim=8, enc_channels=(4,), n_experts=2,
        checkpoint_every=max(iterations, 1), **kw,
    )
    rng = np.random.default_rng(9)
    clips = [generate_clip("stand", "s0", rng, model=model, duration=2.0, difficulty=0.1),
             generate_clip("sway", "s1", rng, model=model, duration=2.0, difficulty=0.1)]
    return model, env_cfg, cfg, clips


class TestTrainerLoop:
    def test_zero_lr_freezes_parameters(self):
        model, env_cfg, cfg, clips = micro_setup(lr=0.0)
        trainer = TeacherTrainer(clips, env_cfg, cfg, seed=3, model=model)
        before = trainer.params.to_flat()
        batch = trainer.collect()
        trainer.update(batch)
        np.testing.assert_array_equal(trainer.params.to_flat(), before)

    def test_episode_accounting_matches_dones(self):
        model, env_cfg, cfg, clips = micro_setup()
        trainer = TeacherTrainer(clips, env_cfg, cfg, seed=4, model=model)
        batch = trainer.collect()
        assert len(batch.episodes) == int(batch.dones.sum())
        seen = sum(e.episodes_seen for e in trainer.sampler.entries.values())
        assert seen == len(batch.episodes)

    def test_deterministic_logs(self, tmp_path):
        model, env_cfg, cfg, clips = micro_setup()
        r1 = train_teacher(clips, env_cfg, cfg, seed=5, out_dir=tmp_path / "a", model=model)
        r2 = train_teacher(clips, env_cfg, cfg, seed=5, out_dir=tmp_path / "b", model=model)
        assert r1.log_rows == r2.log_rows
        b1 = open(r1.final_checkpoint, "rb").read()
        b2 = open(r2.final_checkpoint, "rb").read()
        assert b1 == b2

    def test_sampler_probabilities_sum_to_one_in_trainer(self):
        model, env_cfg, cfg, clips = micro_setup()
        trainer = TeacherTrainer(clips, env_cfg, cfg, seed=6, model=model)
        trainer.collect()
        _, probs = trainer.sampler.probabilities()
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_reclip_rebuilds_caches(self):
        model, env_cfg, cfg, clips = micro_setup()
        rng = np.random.default_rng(10)
        long_clip = generate_clip("walk", "long", rng, model=model, duration=25.0, difficulty=0.0)
        trainer = TeacherTrainer(clips + [long_clip], env_cfg, cfg, seed=7, model=model)
        ids_before = set(trainer.caches)
        trainer.reclip()
        ids_after = set(trainer.caches)
        assert ids_before != ids_after
        assert set(trainer.sampler.entries) == ids_after
