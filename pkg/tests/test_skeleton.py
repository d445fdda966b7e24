import json

import numpy as np
import pytest

from splatgcn.errors import DataError, DimensionError, ParseError
from splatgcn.skeleton import (
    NormalizationParams,
    SkeletonSequence,
    compute_velocity,
    load_sequence,
    normalize_sequence,
    save_sequence,
)


def write_file(tmp_path, payload, name="seq.json"):
    path = tmp_path / name
    with open(path, "w") as fh:
        if isinstance(payload, str):
            fh.write(payload)
        else:
            json.dump(payload, fh)
    return path


def minimal_payload():
    return {
        "T": 2,
        "V": 3,
        "C": 3,
        "frames": [
            [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            [[0.1, 0.0, 0.0], [1.0, 0.1, 0.0], [0.0, 1.0, 0.1]],
        ],
    }


class TestLoadSequence:
    def test_minimal_valid_file(self, tmp_path):
        seq = load_sequence(write_file(tmp_path, minimal_payload()))
        assert (seq.num_frames, seq.num_joints, seq.num_channels) == (2, 3, 3)
        assert seq.label is None

    def test_label_round_trip(self, tmp_path):
        payload = minimal_payload()
        payload["label"] = 4
        seq = load_sequence(write_file(tmp_path, payload))
        assert seq.label == 4

    def test_declared_frames_mismatch_is_dimension_error(self, tmp_path):
        payload = minimal_payload()
        payload["T"] = 4
        with pytest.raises(DimensionError):
            load_sequence(write_file(tmp_path, payload))

    def test_joint_count_mismatch_is_dimension_error(self, tmp_path):
        payload = minimal_payload()
        payload["frames"][1] = payload["frames"][1][:2]
        with pytest.raises(DimensionError):
            load_sequence(write_file(tmp_path, payload))

    def test_nan_coordinate_is_data_error(self, tmp_path):
        payload = minimal_payload()
        text = json.dumps(payload).replace("0.1", "NaN", 1)
        with pytest.raises(DataError):
            load_sequence(write_file(tmp_path, text))

    def test_malformed_json_names_line(self, tmp_path):
        with pytest.raises(ParseError, match="line"):
            load_sequence(write_file(tmp_path, '{"T": 2,\n  "V": '))

    def test_missing_field_named(self, tmp_path):
        payload = minimal_payload()
        del payload["frames"]
        with pytest.raises(ParseError, match="frames"):
            load_sequence(write_file(tmp_path, payload))

    def test_save_load_round_trip(self, tmp_path):
        seq = SkeletonSequence(np.random.default_rng(0).uniform(-1, 1, (4, 5, 2)), label=1)
        path = tmp_path / "round.json"
        save_sequence(seq, path)
        back = load_sequence(path)
        np.testing.assert_array_equal(back.positions, seq.positions)
        assert back.label == 1


class TestSequenceValidation:
    def test_single_frame_rejected(self):
        with pytest.raises(DimensionError):
            SkeletonSequence(np.zeros((1, 3, 3)))

    def test_bad_channel_count_rejected(self):
        with pytest.raises(DimensionError):
            SkeletonSequence(np.zeros((2, 3, 4)))

    def test_non_finite_rejected(self):
        arr = np.zeros((2, 3, 3))
        arr[1, 2, 0] = np.inf
        with pytest.raises(DataError):
            SkeletonSequence(arr)


class TestNormalize:
    def test_two_joint_frame_hand_computed(self):
        # center (1,0,0); radius 2; scale 0.8 / 2 = 0.4
        pos = np.array([[[-1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]] * 2)
        out = normalize_sequence(SkeletonSequence(pos))
        expected = np.array([[[-0.8, 0.0, 0.0], [0.8, 0.0, 0.0]]] * 2)
        np.testing.assert_allclose(out.positions, expected, atol=1e-15)

    def test_coincident_joints_collapse_to_origin(self):
        pos = np.full((2, 4, 3), 5.0)
        out = normalize_sequence(SkeletonSequence(pos))
        np.testing.assert_array_equal(out.positions, np.zeros((2, 4, 3)))

    def test_already_normalized_frame_is_fixed_point(self):
        pos = np.zeros((2, 2, 2))
        pos[:, 0] = (-0.8, 0.0)
        pos[:, 1] = (0.8, 0.0)
        out = normalize_sequence(SkeletonSequence(pos))
        np.testing.assert_allclose(out.positions, pos, atol=1e-15)

    def test_translation_invariance(self):
        rng = np.random.default_rng(1)
        pos = rng.uniform(-1, 1, (5, 6, 3))
        a = normalize_sequence(SkeletonSequence(pos))
        b = normalize_sequence(SkeletonSequence(pos + np.array([3.0, -2.0, 0.5])))
        np.testing.assert_allclose(a.positions, b.positions, atol=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(2)
        pos = rng.uniform(-1, 1, (5, 6, 3))
        a = normalize_sequence(SkeletonSequence(pos))
        b = normalize_sequence(SkeletonSequence(17.5 * pos))
        np.testing.assert_allclose(a.positions, b.positions, atol=1e-12)

    def test_content_within_target_extent(self):
        rng = np.random.default_rng(3)
        out = normalize_sequence(SkeletonSequence(rng.uniform(-9, 9, (8, 7, 3))))
        radii = np.linalg.norm(out.positions, axis=2)
        assert radii.max() <= 0.8 + 1e-12


class TestVelocity:
    def test_constant_positions_zero_velocity(self):
        kin = compute_velocity(SkeletonSequence(np.full((5, 3, 2), 0.25)))
        np.testing.assert_array_equal(kin.velocities, np.zeros((5, 3, 2)))

    def test_uniform_motion_including_last_frame(self):
        t = np.arange(4)
        pos = np.zeros((4, 1, 2))
        pos[:, 0, 0] = 0.1 * t
        kin = compute_velocity(SkeletonSequence(pos))
        expected = np.zeros((4, 1, 2))
        expected[:, 0, 0] = 0.1
        np.testing.assert_allclose(kin.velocities, expected, atol=1e-15)

    def test_only_moving_joint_has_velocity(self):
        pos = np.zeros((3, 4, 2))
        pos[:, 2, 1] = (0.0, 0.3, 0.5)
        kin = compute_velocity(SkeletonSequence(pos))
        assert np.all(kin.velocities[:, [0, 1, 3]] == 0)
        assert np.all(kin.velocities[:, 2, 1] != 0)

    def test_shape_matches_positions(self):
        rng = np.random.default_rng(4)
        seq = normalize_sequence(SkeletonSequence(rng.uniform(-1, 1, (6, 5, 3))))
        kin = compute_velocity(seq)
        assert kin.velocities.shape == kin.positions.shape == (6, 5, 3)

    def test_velocity_of_normalized_constant_sequence_is_zero(self):
        seq = normalize_sequence(SkeletonSequence(np.full((4, 3, 3), 2.0) + np.eye(3)))
        kin = compute_velocity(seq)
        np.testing.assert_array_equal(kin.velocities, np.zeros_like(kin.velocities))


class TestParams:
    def test_half_extent_range_enforced(self):
        from splatgcn.errors import ConfigError

        with pytest.raises(ConfigError):
            NormalizationParams(target_half_extent=1.5)
        with pytest.raises(ConfigError):
            NormalizationParams(target_half_extent=0.0)
