"""Seeded synthetic skeleton tasks that isolate single model mechanisms.

speed_discrimination: one joint circles at a base or doubled angular rate
with a uniformly random starting phase, so per-frame positions carry no
class information and only the kinematics separates the classes.

correlation_topology: two joints travel as a rigid pair while a third moves
independently far away; the classes differ in which joint is the partner,
so the statistical adjacency is the natural cue.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .skeleton import SkeletonSequence, load_sequence, save_sequence

TASKS = ("speed_discrimination", "correlation_topology")

SPEED_OMEGA = 0.6          # base angular step (radians per frame); class 1 doubles it
CIRCLE_RADIUS = 0.5
RIGID_OFFSET = 0.12        # fixed spacing inside the rigid pair
PAIR_CENTER = np.array([-0.5, 0.0, 0.0])
FAR_CENTER = np.array([0.5, 0.0, 0.0])


@dataclass
class SyntheticTaskSpec:
    task: str
    num_joints: int = 5
    num_frames: int = 16
    samples_per_class: int = 100
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.num_frames < 2:
            raise ConfigError("num_frames must be >= 2")


def _sample_rng(spec: SyntheticTaskSpec, label: int, index: int):
    # per-sample derived seed so samples are independent and order-free
    return np.random.default_rng([spec.seed, label, index])


def _static_ring(num_joints: int) -> np.ndarray:
    """Fixed anchor layout shared by every sample: a ring below the motion plane."""
    angles = 2.0 * np.pi * np.arange(num_joints) / num_joints
    ring = np.stack([0.85 * np.cos(angles), 0.85 * np.sin(angles),
                     np.full(num_joints, -0.4)], axis=1)
    return ring


def generate_speed_task(spec: SyntheticTaskSpec) -> list[SkeletonSequence]:
    """Two classes distinguished solely by the angular rate of joint 0.

    The anchors are a fixed layout, so pooled per-frame statistics differ
    between classes only through the motion of joint 0, whose spatial
    marginal the random phase makes identical across classes.
    """
    if spec.task != "speed_discrimination":
        raise ConfigError(f"spec.task is {spec.task!r}, expected 'speed_discrimination'")
    if spec.num_joints < 2:
        raise ConfigError("speed task needs at least 2 joints")
    t = np.arange(spec.num_frames)
    anchors = _static_ring(spec.num_joints - 1)
    sequences = []
    for label in (0, 1):
        omega = SPEED_OMEGA * (label + 1)
        for s in range(spec.samples_per_class):
            rng = _sample_rng(spec, label, s)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            pos = np.zeros((spec.num_frames, spec.num_joints, 3))
            angles = phase + omega * t
            pos[:, 0, 0] = CIRCLE_RADIUS * np.cos(angles)
            pos[:, 0, 1] = CIRCLE_RADIUS * np.sin(angles)
            pos[:, 0, 2] = 0.3
            pos[:, 1:, :] = anchors[None, :, :]
            if spec.noise_std > 0:
                pos[:, 1:, :] += rng.normal(0.0, spec.noise_std,
                                            size=(spec.num_frames, spec.num_joints - 1, 3))
            sequences.append(SkeletonSequence(positions=np.clip(pos, -1.0, 1.0),
                                              label=label))
    return sequences


def _wander(rng, num_frames: int) -> np.ndarray:
    """Smooth bounded 3D trajectory from two random sinusoids per axis."""
    u = np.arange(num_frames) / num_frames
    out = np.zeros((num_frames, 3))
    for axis in range(3):
        for freq in (1, 2):
            amp = rng.uniform(0.05, 0.15)
            psi = rng.uniform(0.0, 2.0 * np.pi)
            out[:, axis] += amp * np.sin(2.0 * np.pi * freq * u + psi)
    return out


def generate_correlation_task(spec: SyntheticTaskSpec) -> list[SkeletonSequence]:
    """Classes differ in which of joints 2/3 is rigidly attached to joint 1."""
    if spec.task != "correlation_topology":
        raise ConfigError(f"spec.task is {spec.task!r}, expected 'correlation_topology'")
    if spec.num_joints < 4:
        raise ConfigError("correlation task needs at least 4 joints")
    sequences = []
    for label in (0, 1):
        partner = 2 if label == 0 else 3
        loner = 3 if label == 0 else 2
        for s in range(spec.samples_per_class):
            rng = _sample_rng(spec, label, s)
            pos = np.zeros((spec.num_frames, spec.num_joints, 3))
            shared = PAIR_CENTER + _wander(rng, spec.num_frames)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            pos[:, 1, :] = shared
            pos[:, partner, :] = shared + RIGID_OFFSET * direction
            pos[:, loner, :] = FAR_CENTER + _wander(rng, spec.num_frames)
            static = [j for j in range(spec.num_joints) if j not in (1, partner, loner)]
            if static:
                base = rng.uniform(-0.9, 0.9, size=(len(static), 3))
                pos[:, static, :] = base[None, :, :]
            if spec.noise_std > 0:
                pos += rng.normal(0.0, spec.noise_std, size=pos.shape)
            sequences.append(SkeletonSequence(positions=np.clip(pos, -1.0, 1.0),
                                              label=label))
    return sequences


def generate(spec: SyntheticTaskSpec) -> list[SkeletonSequence]:
    if spec.task == "speed_discrimination":
        return generate_speed_task(spec)
    return generate_correlation_task(spec)


def split_dataset(sequences, train_fraction: float, seed: int):
    """Seeded stratified split keeping per-class counts within one of exact."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    by_label: dict[int, list[int]] = {}
    for i, seq in enumerate(sequences):
        if seq.label is None:
            raise DataError(f"sequence {i} has no label")
        by_label.setdefault(seq.label, []).append(i)
    train_idx, test_idx = [], []
    for label in sorted(by_label):
        idx = np.array(by_label[label])
        if idx.size < 2:
            raise ConfigError(f"class {label} has {idx.size} sample(s); need at least 2")
        rng = np.random.default_rng([seed, label])
        idx = idx[rng.permutation(idx.size)]
        n_train = int(round(train_fraction * idx.size))
        n_train = min(max(n_train, 1), idx.size - 1)
        train_idx.extend(idx[:n_train].tolist())
        test_idx.extend(idx[n_train:].tolist())
    train_idx.sort()
    test_idx.sort()
    return [sequences[i] for i in train_idx], [sequences[i] for i in test_idx]


def write_dataset(sequences, out_dir, spec: SyntheticTaskSpec) -> Path:
    """Emit skeleton files plus a manifest listing paths, labels, and the spec."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    items = []
    counters: dict[int, int] = {}
    for seq in sequences:
        k = counters.get(seq.label, 0)
        counters[seq.label] = k + 1
        name = f"class{seq.label}_sample{k:04d}.json"
        save_sequence(seq, out / name)
        items.append({"path": name, "label": seq.label})
    manifest = {"spec": asdict(spec), "items": items}
    manifest_path = out / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest_path


def load_dataset(manifest_path) -> list[SkeletonSequence]:
    path = Path(manifest_path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if "items" not in manifest:
        raise ParseError(f"{path}: missing 'items'")
    sequences = []
    for item in manifest["items"]:
        seq = load_sequence(path.parent / item["path"])
        if seq.label is None:
            seq.label = int(item["label"])
        sequences.append(seq)
    return sequences
