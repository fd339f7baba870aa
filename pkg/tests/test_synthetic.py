import numpy as np
import pytest

from mimic_lab.character import CharacterModel, keybody_positions
from mimic_lab.errors import MimicLabError
from mimic_lab.synthetic import generate_clip, generate_synthetic_dataset


def test_single_category_counts():
    clips = generate_synthetic_dataset({"walk": 1.0}, 10, np.random.default_rng(0))
    assert len(clips) == 10
    assert all(c.category == "walk" for c in clips)


def test_exact_proportions():
    clips = generate_synthetic_dataset({"walk": 0.9, "kick": 0.1}, 100, np.random.default_rng(0))
    cats = [c.category for c in clips]
    assert cats.count("walk") == 90
    assert cats.count("kick") == 10


def test_remainder_apportionment_within_one():
    spec = {"walk": 1 / 3, "sway": 1 / 3, "kick": 1 / 3}
    clips = generate_synthetic_dataset(spec, 10, np.random.default_rng(0))
    counts = {c: sum(1 for x in clips if x.category == c) for c in spec}
    assert sum(counts.values()) == 10
    for c in spec:
        assert abs(counts[c] - 10 / 3) < 1.0


def test_deterministic_per_seed():
    a = generate_synthetic_dataset({"walk": 0.5, "crouch": 0.5}, 4, np.random.default_rng(42))
    b = generate_synthetic_dataset({"walk": 0.5, "crouch": 0.5}, 4, np.random.default_rng(42))
    for ca, cb in zip(a, b):
        assert ca.id == cb.id
        np.testing.assert_array_equal(ca.as_array(), cb.as_array())


def test_unknown_category_errors():
    with pytest.raises(MimicLabError, match="unknown motion category"):
        generate_synthetic_dataset({"backflip": 1.0}, 5, np.random.default_rng(0))
    with pytest.raises(MimicLabError):
        generate_clip("cartwheel", "x", np.random.default_rng(0))


def test_proportions_must_sum_to_one():
    with pytest.raises(MimicLabError):
        generate_synthetic_dataset({"walk": 0.5, "kick": 0.2}, 5, np.random.default_rng(0))


@pytest.mark.parametrize("category", ["stand", "sway", "walk", "crouch", "kick"])
def test_clips_are_smooth_and_grounded(category):
    model = CharacterModel()
    clip = generate_clip(category, "c", np.random.default_rng(3), model=model, duration=4.0)
    arr = clip.as_array()
    q = arr[:, :6]
    # frame-to-frame joint steps stay small at 50 Hz
    assert np.abs(np.diff(q, axis=0)).max() < 0.2
    # root stays above ground, below standing height
    assert np.all(arr[:, 10] > 0.2)
    assert np.all(arr[:, 10] < model.nominal_root_height + 0.05)


def test_keybodies_match_forward_kinematics():
    model = CharacterModel()
    clip = generate_clip("walk", "w", np.random.default_rng(9), model=model, duration=3.0)
    arr = clip.as_array()
    root = np.stack([clip.root_x(), arr[:, 10]], axis=1)
    kb = keybody_positions(model, root, arr[:, 9], arr[:, :6])
    np.testing.assert_allclose(arr[:, 11:17].reshape(-1, 3, 2), kb, atol=2e-5)


def test_lowest_foot_point_rests_on_ground():
    from mimic_lab.character import FOOT_BODIES, body_kinematics, points_on_bodies

    model = CharacterModel()
    clip = generate_clip("walk", "w", np.random.default_rng(11), model=model, duration=3.0)
    arr = clip.as_array()
    root = np.stack([clip.root_x(), arr[:, 10]], axis=1)
    org, ang = body_kinematics(model, root, arr[:, 9], arr[:, :6])
    cpl = model.contact_points_local()
    idx = np.repeat(np.array(FOOT_BODIES), 2)
    offs = np.concatenate([cpl, cpl])
    pts = points_on_bodies(org, ang, idx, offs)
    lowest = pts[:, :, 1].min(axis=1)
    np.testing.assert_allclose(lowest, 0.0, atol=2e-5)


def test_difficulty_scales_amplitude():
    easy = generate_clip("kick", "e", np.random.default_rng(1), duration=3.0, difficulty=0.0)
    hard = generate_clip("kick", "h", np.random.default_rng(1), duration=3.0, difficulty=1.0)
    assert np.abs(hard.as_array()[:, 0]).max() > np.abs(easy.as_array()[:, 0]).max()
