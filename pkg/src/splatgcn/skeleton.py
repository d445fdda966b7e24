"""Skeleton sequence loading, validation, normalization, and velocities.

A sequence is a (T, V, C) array of joint coordinates: T frames, V joints,
C spatial channels (2 or 3). The file schema is JSON with top-level keys
``T``, ``V``, ``C``, optional ``label``, and ``frames`` (T lists of V lists
of C reals). Key names are part of the contract.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DimensionError, ParseError


@dataclass
class NormalizationParams:
    """Per-frame centering and radius-scaling targets."""

    target_half_extent: float = 0.8
    epsilon_radius: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.target_half_extent <= 1.0:
            raise ConfigError(
                f"target_half_extent must be in (0, 1], got {self.target_half_extent}"
            )
        if self.epsilon_radius <= 0.0:
            raise ConfigError(f"epsilon_radius must be > 0, got {self.epsilon_radius}")


@dataclass
class SkeletonSequence:
    """Validated joint coordinates (T, V, C) with an optional class label."""

    positions: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 3:
            raise DimensionError(
                f"positions must be (T, V, C), got shape {self.positions.shape}"
            )
        t, _, c = self.positions.shape
        if c not in (2, 3):
            raise DimensionError(f"C must be 2 or 3, got {c}")
        if t < 2:
            raise DimensionError(f"T must be >= 2 (velocities need a difference), got {t}")
        if not np.all(np.isfinite(self.positions)):
            raise DataError("positions contain non-finite values")
        if self.label is not None and (not isinstance(self.label, int) or self.label < 0):
            raise DataError(f"label must be a non-negative integer, got {self.label!r}")

    @property
    def num_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def num_joints(self) -> int:
        return self.positions.shape[1]

    @property
    def num_channels(self) -> int:
        return self.positions.shape[2]


@dataclass
class KinematicSequence:
    """Normalized positions in [-1, 1] plus per-joint forward-difference velocities."""

    positions: np.ndarray   # (T, V, C)
    velocities: np.ndarray  # (T, V, C), units per frame

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        if self.positions.shape != self.velocities.shape:
            raise DimensionError(
                f"positions {self.positions.shape} and velocities "
                f"{self.velocities.shape} must share a shape"
            )
        if np.max(np.abs(self.positions), initial=0.0) > 1.0 + 1e-9:
            raise DataError("kinematic positions must lie within [-1, 1]")

    @property
    def num_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def num_joints(self) -> int:
        return self.positions.shape[1]

    @property
    def num_channels(self) -> int:
        return self.positions.shape[2]


def load_sequence(path) -> SkeletonSequence:
    """Read and validate one skeleton file.

    Raises ParseError for malformed JSON or missing keys, DimensionError when
    declared sizes disagree with the payload, DataError for non-finite values.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(payload, dict):
        raise ParseError(f"{path}: top level must be an object")
    for key in ("T", "V", "C", "frames"):
        if key not in payload:
            raise ParseError(f"{path}: missing required field '{key}'")
    t, v, c = payload["T"], payload["V"], payload["C"]
    for name, val in (("T", t), ("V", v), ("C", c)):
        if not isinstance(val, int) or val <= 0:
            raise ParseError(f"{path}: field '{name}' must be a positive integer")
    frames = payload["frames"]
    if not isinstance(frames, list) or len(frames) != t:
        raise DimensionError(
            f"{path}: declared T={t} but 'frames' holds {len(frames) if isinstance(frames, list) else 'non-list'} entries"
        )
    for ti, frame in enumerate(frames):
        if not isinstance(frame, list) or len(frame) != v:
            raise DimensionError(f"{path}: frame {ti} declares V={v} but holds {len(frame) if isinstance(frame, list) else 'non-list'} joints")
        for vi, joint in enumerate(frame):
            if not isinstance(joint, list) or len(joint) != c:
                raise DimensionError(f"{path}: frame {ti} joint {vi} declares C={c} but holds {len(joint) if isinstance(joint, list) else 'non-list'} values")
    try:
        arr = np.asarray(frames, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{path}: non-numeric coordinate in 'frames': {exc}") from exc
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise DataError(f"{path}: non-finite coordinate at frame {bad[0]}, joint {bad[1]}")
    label = payload.get("label")
    if label is not None and not isinstance(label, int):
        raise ParseError(f"{path}: field 'label' must be an integer")
    return SkeletonSequence(positions=arr, label=label)


def save_sequence(seq: SkeletonSequence, path) -> None:
    """Write a sequence in the skeleton file schema."""
    payload = {
        "T": seq.num_frames,
        "V": seq.num_joints,
        "C": seq.num_channels,
        "frames": seq.positions.tolist(),
    }
    if seq.label is not None:
        payload["label"] = seq.label
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def normalize_sequence(
    seq: SkeletonSequence, params: NormalizationParams | None = None
) -> SkeletonSequence:
    """Center each frame on its geometric mean and scale the farthest joint
    to ``target_half_extent``.

    Frames whose bounding radius is below ``epsilon_radius`` (all joints
    coincident) are centered and collapse to the origin.
    """
    params = params or NormalizationParams()
    pos = seq.positions
    centers = pos.mean(axis=1, keepdims=True)                    # (T, 1, C)
    centered = pos - centers
    radii = np.sqrt((centered ** 2).sum(axis=2)).max(axis=1)     # (T,)
    scale = np.where(
        radii < params.epsilon_radius, 0.0, params.target_half_extent / np.maximum(radii, params.epsilon_radius)
    )
    out = centered * scale[:, None, None]
    return SkeletonSequence(positions=out, label=seq.label)


def compute_velocity(seq: SkeletonSequence) -> KinematicSequence:
    """Forward-difference velocities; the final frame copies the one before it,
    keeping motion-blur continuity at the sequence end."""
    pos = seq.positions
    if pos.shape[0] < 2:
        raise DimensionError(f"T must be >= 2 to difference, got {pos.shape[0]}")
    vel = np.empty_like(pos)
    vel[:-1] = pos[1:] - pos[:-1]
    vel[-1] = vel[-2]
    return KinematicSequence(positions=pos.copy(), velocities=vel)
