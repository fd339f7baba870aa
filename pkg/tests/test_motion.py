import numpy as np
import pytest

from mimic_lab import motion
from mimic_lab.errors import ClipFormatError, MimicLabError, SchemaError
from mimic_lab.motion import (
    MotionFrame,
    goal_at,
    heading_local_to_world,
    load_clip_file,
    load_dataset,
    random_clip,
    save_clip_file,
    save_dataset,
    to_heading_local,
)
from mimic_lab.synthetic import generate_clip


def make_clip(duration, fps=50.0, clip_id="test", vx=0.3):
    """Simple synthetic ramp clip with nonzero everything."""
    n = int(round(duration * fps)) + 1
    t = np.arange(n) / fps
    rows = np.zeros((n, MotionFrame.row_width(6, 3)))
    rows[:, :6] = 0.2 * np.sin(t)[:, None] + np.arange(6) * 0.01
    rows[:, 6] = vx
    rows[:, 7] = 0.01
    rows[:, 8] = 0.05
    rows[:, 9] = 0.1 * np.sin(t)
    rows[:, 10] = 0.66 + 0.01 * np.cos(t)
    rows[:, 11:17] = np.linspace(0, 1, n)[:, None] + np.arange(6) * 0.1
    rows[:, 17] = 0.0
    return motion.clip_from_arrays(clip_id, "walk", fps, rows, 6, 3)


class TestFrame:
    def test_rejects_nonfinite(self):
        with pytest.raises(MimicLabError):
            MotionFrame(np.full(6, np.nan), np.zeros(2), 0, 0, 0.6, np.zeros((3, 2)))

    def test_rejects_zero_height(self):
        with pytest.raises(MimicLabError):
            MotionFrame(np.zeros(6), np.zeros(2), 0, 0, 0.0, np.zeros((3, 2)))

    def test_row_round_trip(self):
        f = MotionFrame(np.arange(6.0), np.array([0.1, 0.2]), 0.3, 0.4, 0.5, np.arange(6.0).reshape(3, 2), 0.6)
        f2 = MotionFrame.from_row(f.to_row(), 6, 3)
        np.testing.assert_array_equal(f2.joint_positions, f.joint_positions)
        assert f2.heading == f.heading

    def test_frames_immutable(self):
        f = MotionFrame(np.zeros(6), np.zeros(2), 0, 0, 0.6, np.zeros((3, 2)))
        with pytest.raises(ValueError):
            f.joint_positions[0] = 1.0


class TestRandomClip:
    def test_short_clip_unchanged(self):
        clip = make_clip(8.0)
        out = random_clip(clip, rng=np.random.default_rng(0))
        assert out == [clip]

    def test_exactly_max_len_unchanged(self):
        clip = make_clip(10.0)
        assert random_clip(clip, rng=np.random.default_rng(0)) == [clip]

    def test_boundaries_follow_offset_rule(self):
        # 25 s clip, offset 1.3 s -> boundaries {0, 1.3, 11.3, 21.3, 25}
        clip = make_clip(25.0)

        class FixedRng:
            def uniform(self, lo, hi):
                return 1.3

        pieces = random_clip(clip, max_len=10.0, max_offset=2.0, rng=FixedRng())
        spans = [p.source_span for p in pieces]
        starts = [s[1] for s in spans]
        ends = [s[2] for s in spans]
        np.testing.assert_allclose(starts, [0.0, 1.3, 11.3, 21.3])
        np.testing.assert_allclose(ends, [1.3, 11.3, 21.3, 25.0])
        np.testing.assert_allclose([p.duration for p in pieces], [1.3, 10.0, 10.0, 3.7])

    def test_partition_property(self):
        rng = np.random.default_rng(7)
        clip = make_clip(33.4)
        pieces = random_clip(clip, rng=rng)
        spans = [p.source_span for p in pieces]
        assert spans[0][1] == 0.0
        assert spans[-1][2] == pytest.approx(clip.duration)
        for a, b in zip(spans[:-1], spans[1:]):
            assert a[2] == pytest.approx(b[1])
        for p in pieces:
            assert 0 < p.duration <= 10.0 + 1e-9

    def test_different_offsets_give_different_boundaries(self):
        clip = make_clip(25.0)
        b1 = [p.source_span[1] for p in random_clip(clip, rng=np.random.default_rng(1))]
        b2 = [p.source_span[1] for p in random_clip(clip, rng=np.random.default_rng(2))]
        assert b1 != b2

    def test_empty_clip_errors(self):
        clip = make_clip(8.0)
        single = motion.MotionClip("one", "walk", 50.0, clip.frames[:1])
        with pytest.raises(MimicLabError, match="empty clip"):
            random_clip(single, rng=np.random.default_rng(0))

    def test_subclip_root_x_continues_parent(self):
        clip = make_clip(25.0, vx=0.5)
        pieces = random_clip(clip, rng=np.random.default_rng(3))
        x_parent = clip.root_x()
        i0 = int(round(pieces[1].source_span[1] * clip.fps))
        np.testing.assert_allclose(pieces[1].root_x()[0], x_parent[i0])


class TestHeadingLocal:
    def test_identity_at_origin(self):
        f = MotionFrame(np.zeros(6), np.array([0.1, 0.0]), 0, 0, 0.6, np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))
        out = to_heading_local(f, np.zeros(2), 0.0)
        np.testing.assert_allclose(out.keybody_positions_world, f.keybody_positions_world)

    def test_quarter_turn(self):
        f = MotionFrame(np.zeros(6), np.zeros(2), 0, 0, 0.6, np.array([[1.0, 0.0]]))
        out = to_heading_local(f, np.zeros(2), np.pi / 2)
        np.testing.assert_allclose(out.keybody_positions_world, [[0.0, -1.0]], atol=1e-15)

    def test_round_trip(self):
        rng = np.random.default_rng(4)
        kb = rng.normal(size=(3, 2))
        f = MotionFrame(rng.normal(size=6), rng.normal(size=2), 0.3, 0.2, 0.7, kb, heading=0.4)
        root = rng.normal(size=2)
        back = heading_local_to_world(to_heading_local(f, root, 0.9), root, 0.9)
        np.testing.assert_allclose(back.keybody_positions_world, kb, atol=1e-12)
        np.testing.assert_allclose(back.base_lin_vel, f.base_lin_vel, atol=1e-12)
        assert back.heading == pytest.approx(f.heading, abs=1e-12)

    def test_preserves_pairwise_distances(self):
        rng = np.random.default_rng(5)
        kb = rng.normal(size=(3, 2))
        f = MotionFrame(np.zeros(6), np.zeros(2), 0, 0, 0.6, kb)
        out = to_heading_local(f, np.array([0.3, -0.2]), 1.1)
        d_in = np.linalg.norm(kb[:, None] - kb[None, :], axis=-1)
        d_out = np.linalg.norm(
            out.keybody_positions_world[:, None] - out.keybody_positions_world[None, :], axis=-1
        )
        np.testing.assert_allclose(d_in, d_out, atol=1e-12)


class TestGoalAt:
    def test_exact_frame_fields(self):
        clip = make_clip(4.0)
        g = goal_at(clip, 1.0, goal_rate=50.0, window_len=10)
        stored = clip.frames[50]
        np.testing.assert_allclose(g.immediate.joint_positions, stored.joint_positions, atol=1e-12)
        assert g.immediate.root_height == pytest.approx(stored.root_height)
        # keybodies are the stored frame localized at its own root
        local = to_heading_local(stored, clip.root_position(50), stored.heading)
        np.testing.assert_allclose(g.immediate.keybody_positions_world, local.keybody_positions_world, atol=1e-12)

    def test_hold_at_clip_end(self):
        clip = make_clip(4.0)
        g = goal_at(clip, clip.duration, goal_rate=50.0, window_len=7)
        assert g.window_len == 7
        for f in g.future_window:
            np.testing.assert_allclose(f.joint_positions, g.immediate.joint_positions, atol=1e-12)

    def test_linear_midpoint(self):
        rows = np.zeros((2, MotionFrame.row_width(1, 1)))
        rows[:, 0] = [0.2, 0.4]
        rows[:, 5] = 0.6  # root height
        clip = motion.clip_from_arrays("mid", "walk", 10.0, rows, 1, 1)
        g = goal_at(clip, 0.05, goal_rate=10.0, window_len=1)
        assert g.immediate.joint_positions[0] == pytest.approx(0.3)

    def test_window_length_constant(self):
        clip = make_clip(2.0)
        for t in [0.0, 0.7, 1.99, clip.duration]:
            assert goal_at(clip, t, 25.0, 13).window_len == 13

    def test_outside_clip_errors(self):
        clip = make_clip(2.0)
        with pytest.raises(MimicLabError):
            goal_at(clip, -0.1, 50.0, 5)
        with pytest.raises(MimicLabError):
            goal_at(clip, 2.5, 50.0, 5)


class TestClipFiles:
    def test_round_trip(self, tmp_path):
        clip = generate_clip("walk", "walk_0000", np.random.default_rng(0))
        path = tmp_path / "walk_0000.clip"
        save_clip_file(clip, path)
        loaded = load_clip_file(path)
        assert loaded.id == "walk_0000"
        assert loaded.category == "walk"
        assert loaded.fps == clip.fps
        np.testing.assert_array_equal(loaded.as_array(), clip.as_array())
        np.testing.assert_allclose(loaded.root_x(), clip.root_x(), atol=1e-12)

    def test_subclip_round_trip_keeps_root_consistency(self, tmp_path):
        rng = np.random.default_rng(1)
        parent = generate_clip("walk", "w", rng, duration=25.0)
        piece = random_clip(parent, rng=rng)[1]
        path = tmp_path / "piece.clip"
        save_clip_file(piece, path)
        loaded = load_clip_file(path)
        # stored world frame is shifted so root x starts at 0
        np.testing.assert_allclose(loaded.root_x(), piece.root_x() - piece.root_x()[0], atol=1e-6)
        kb_shift = piece.as_array()[:, 11] - loaded.as_array()[:, 11]
        np.testing.assert_allclose(kb_shift, np.float32(piece.root_x()[0]), atol=1e-6)

    def test_truncated_file_errors(self, tmp_path):
        clip = make_clip(1.0)
        path = tmp_path / "t.clip"
        save_clip_file(clip, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-7])
        with pytest.raises(ClipFormatError, match="unexpected end of data"):
            load_clip_file(path)

    def test_malformed_header_errors(self, tmp_path):
        path = tmp_path / "bad.clip"
        path.write_bytes(b"not a header at all")
        with pytest.raises(ClipFormatError):
            load_clip_file(path)

    def test_dimension_mismatch_names_both(self, tmp_path):
        clip = make_clip(1.0)
        path = tmp_path / "j.clip"
        save_clip_file(clip, path)
        with pytest.raises(SchemaError, match="J=6.*J=4"):
            load_clip_file(path, expect_joints=4)

    def test_nonfinite_payload_errors(self, tmp_path):
        clip = make_clip(1.0)
        path = tmp_path / "nan.clip"
        save_clip_file(clip, path)
        raw = bytearray(path.read_bytes())
        sep = raw.find(b"\n\n") + 2
        raw[sep : sep + 4] = np.array([np.nan], dtype="<f4").tobytes()
        path.write_bytes(bytes(raw))
        with pytest.raises(ClipFormatError, match="non-finite"):
            load_clip_file(path)

    def test_dataset_dir_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        clips = [generate_clip("sway", f"sway_{i:04d}", rng, duration=2.0) for i in range(3)]
        save_dataset(clips, tmp_path / "ds")
        loaded = load_dataset(tmp_path / "ds")
        assert [c.id for c in loaded] == [c.id for c in clips]
        for a, b in zip(loaded, clips):
            np.testing.assert_array_equal(a.as_array(), b.as_array())
