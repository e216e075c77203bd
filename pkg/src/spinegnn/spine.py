"""Anatomical domain model: spine levels, synthetic spines, detection-noise augmentation.

Coordinates are millimeters. x is the sagittal axis (left pedicles sit at
positive x), z runs along the spine.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

N_LEVELS = 28

LEVEL_NAMES: tuple[str, ...] = tuple(
    [f"C{i}" for i in range(1, 8)]
    + [f"T{i}" for i in range(1, 14)]
    + [f"L{i}" for i in range(1, 7)]
    + [f"S{i}" for i in range(1, 3)]
)

_NAME_TO_LEVEL = {name: i for i, name in enumerate(LEVEL_NAMES)}


class Segment(IntEnum):
    CERVICAL = 0
    THORACIC = 1
    LUMBAR = 2
    SACRAL = 3


class KeypointType(IntEnum):
    BODY = 0
    LEFT_PEDICLE = 1
    RIGHT_PEDICLE = 2


def level_name(level: int) -> str:
    return LEVEL_NAMES[level]


def level_from_name(name: str) -> int:
    try:
        return _NAME_TO_LEVEL[name]
    except KeyError:
        raise ValueError(f"unknown spine level {name!r}") from None


def level_to_segment(level: int) -> Segment:
    if not 0 <= level < N_LEVELS:
        raise ValueError(f"level index {level} out of range")
    if level < 7:
        return Segment.CERVICAL
    if level < 20:
        return Segment.THORACIC
    if level < 26:
        return Segment.LUMBAR
    return Segment.SACRAL


@dataclass
class Keypoint:
    """One detected or synthetic landmark.

    `level` is the ground-truth vertebra level (index into LEVEL_NAMES) and is
    retained on illegitimate keypoints for diagnostics only; such keypoints
    never contribute level targets. `source_id` links an augmented keypoint to
    the index of its ancestor in the pre-augmentation list.
    """

    position: np.ndarray
    kind: KeypointType
    level: int | None = None
    legitimate: bool = True
    segment_probs: np.ndarray = field(default_factory=lambda: np.zeros(4))
    source_id: int | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.segment_probs = np.asarray(self.segment_probs, dtype=float)
        if self.position.shape != (3,):
            raise ValueError(f"position must be a 3-vector, got shape {self.position.shape}")
        if self.segment_probs.shape != (4,):
            raise ValueError("segment_probs must have 4 entries")

    def copy(self) -> "Keypoint":
        return replace(self, position=self.position.copy(), segment_probs=self.segment_probs.copy())


SPINE_VARIANTS: dict[str, tuple[int, ...]] = {
    "full": tuple(range(N_LEVELS)),
    "no_T13_L6_S2": tuple(
        i for i in range(N_LEVELS) if LEVEL_NAMES[i] not in ("T13", "L6", "S2")
    ),
    "no_T12_T13_L6_S2": tuple(
        i for i in range(N_LEVELS) if LEVEL_NAMES[i] not in ("T12", "T13", "L6", "S2")
    ),
}


@dataclass
class SyntheticSpineConfig:
    variant: str = "full"
    spacing: float = 30.0
    # left pedicle at +offset[0], right pedicle at -offset[0] relative to the body
    pedicle_offset: tuple[float, float, float] = (12.0, -15.0, 0.0)

    def __post_init__(self):
        if self.variant not in SPINE_VARIANTS:
            raise ValueError(f"unknown spine variant {self.variant!r}")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")


def generate_synthetic_spine(config: SyntheticSpineConfig, rng_seed: int = 0) -> list[Keypoint]:
    """Model spine: one body per included level on a straight line, two pedicles each.

    Bodies are spaced `config.spacing` mm apart along z. Body keypoints carry a
    one-hot segment pseudo-probability; pedicles carry zeros. The seed is
    accepted for interface uniformity; generation itself is deterministic.
    """
    del rng_seed  # geometry is deterministic
    offset = np.asarray(config.pedicle_offset, dtype=float)
    mirror = offset * np.array([-1.0, 1.0, 1.0])
    keypoints: list[Keypoint] = []
    for slot, level in enumerate(SPINE_VARIANTS[config.variant]):
        body_pos = np.array([0.0, 0.0, slot * config.spacing])
        probs = np.zeros(4)
        probs[level_to_segment(level)] = 1.0
        keypoints.append(
            Keypoint(body_pos, KeypointType.BODY, level=level, segment_probs=probs)
        )
        keypoints.append(Keypoint(body_pos + offset, KeypointType.LEFT_PEDICLE, level=level))
        keypoints.append(Keypoint(body_pos + mirror, KeypointType.RIGHT_PEDICLE, level=level))
    for i, kp in enumerate(keypoints):
        kp.source_id = i
    return keypoints


@dataclass
class AugmentationConfig:
    """Detection-noise model: probabilities in percent, lengths in mm, angles in degrees.

    Row order during augmentation: falsify, delete, clone near, clone far,
    mirror, scale, rotate, perturb. Mirror/scale/rotate act on the whole graph;
    the rest act independently per keypoint.
    """

    level: str = "none"
    falsify_segment_pct: float = 0.0
    delete_body_pct: float = 0.0
    delete_pedicle_pct: float = 0.0
    clone_near_body_pct: float = 0.0
    clone_near_pedicle_pct: float = 0.0
    clone_near_min_mm: float = 5.0
    clone_near_max_mm: float = 30.0
    clone_far_body_pct: float = 0.0
    clone_far_pedicle_pct: float = 0.0
    clone_far_min_mm: float = 200.0
    clone_far_max_mm: float = 500.0
    mirror_pct: float = 0.0
    scale_pct: float = 0.0
    scale_x_min: float = 0.8
    scale_x_max: float = 1.2
    scale_z_min: float = 0.5
    scale_z_max: float = 1.5
    rotate_pct: float = 0.0
    rotate_z_max_deg: float = 20.0
    rotate_y_max_deg: float = 20.0
    rotate_x_max_deg: float = 40.0
    perturb_pct: float = 0.0
    perturb_max_mm: float = 2.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if name.endswith("_pct") and not 0.0 <= value <= 100.0:
                raise ValueError(f"{name} must be a percentage in [0, 100], got {value}")

    @classmethod
    def preset(cls, level: str) -> "AugmentationConfig":
        if level not in _PRESETS:
            raise ValueError(f"unknown augmentation level {level!r}")
        return cls(level=level, **_PRESETS[level])

    def to_file(self, path: str | Path) -> None:
        lines = [f"{name} = {value}" for name, value in self.__dict__.items()]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_file(cls, path: str | Path) -> "AugmentationConfig":
        values: dict[str, object] = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = (part.strip() for part in line.partition("="))
            if key not in cls.__dataclass_fields__:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = val if key == "level" else float(val)
        return cls(**values)


_PRESETS: dict[str, dict[str, float]] = {
    "none": {},
    "light": dict(
        falsify_segment_pct=0.5,
        delete_body_pct=0.5,
        delete_pedicle_pct=2.0,
        clone_near_body_pct=5.0,
        clone_near_pedicle_pct=5.0,
        clone_far_body_pct=5.0,
        clone_far_pedicle_pct=5.0,
        mirror_pct=50.0,
        scale_pct=5.0,
        rotate_pct=5.0,
        perturb_pct=20.0,
        perturb_max_mm=1.0,
    ),
    "default": dict(
        falsify_segment_pct=1.0,
        delete_body_pct=2.0,
        delete_pedicle_pct=5.0,
        clone_near_body_pct=10.0,
        clone_near_pedicle_pct=10.0,
        clone_far_body_pct=10.0,
        clone_far_pedicle_pct=10.0,
        mirror_pct=50.0,
        scale_pct=10.0,
        rotate_pct=10.0,
        perturb_pct=50.0,
        perturb_max_mm=2.0,
    ),
    "heavy": dict(
        falsify_segment_pct=2.0,
        delete_body_pct=7.5,
        delete_pedicle_pct=15.0,
        clone_near_body_pct=15.0,
        clone_near_pedicle_pct=15.0,
        clone_far_body_pct=15.0,
        clone_far_pedicle_pct=15.0,
        mirror_pct=50.0,
        scale_pct=30.0,
        rotate_pct=30.0,
        perturb_pct=50.0,
        perturb_max_mm=4.0,
    ),
}

AUGMENTATION_LEVELS = tuple(_PRESETS)

_MIRROR_KIND = {
    KeypointType.BODY: KeypointType.BODY,
    KeypointType.LEFT_PEDICLE: KeypointType.RIGHT_PEDICLE,
    KeypointType.RIGHT_PEDICLE: KeypointType.LEFT_PEDICLE,
}


def _row_rng(seed: int, row: int) -> np.random.Generator:
    # one generator per augmentation row so rows can be toggled independently
    return np.random.default_rng(np.random.SeedSequence([int(seed), row]))


def _unit_vector(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        if n > 1e-12:
            return v / n


def _clone_pass(kps: list[Keypoint], body_pct: float, pedicle_pct: float,
                d_min: float, d_max: float, rng: np.random.Generator) -> list[Keypoint]:
    clones = []
    for kp in kps:
        pct = body_pct if kp.kind == KeypointType.BODY else pedicle_pct
        if rng.random() * 100.0 < pct:
            clone = kp.copy()
            clone.position = kp.position + rng.uniform(d_min, d_max) * _unit_vector(rng)
            clone.legitimate = False
            clones.append(clone)
    return kps + clones


def _rotation_matrix(theta_z: float, theta_y: float, theta_x: float) -> np.ndarray:
    """Rotation applied z-axis first, then y, then x; angles in radians."""
    cz, sz = math.cos(theta_z), math.sin(theta_z)
    cy, sy = math.cos(theta_y), math.sin(theta_y)
    cx, sx = math.cos(theta_x), math.sin(theta_x)
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    return rx @ ry @ rz


def augment(keypoints: list[Keypoint], config: AugmentationConfig, rng_seed: int) -> list[Keypoint]:
    """Emulate noisy detections of a labeled keypoint set.

    Returns a new list; the input is never modified. Clones are marked
    illegitimate and keep a source_id pointing at their ancestor's index in
    `keypoints`. Whole-graph transforms apply to clones as well.
    """
    if not keypoints:
        raise ValueError("cannot augment an empty keypoint list")

    kps = [kp.copy() for kp in keypoints]
    for i, kp in enumerate(kps):
        kp.source_id = i

    # 1. falsify segment input label (bodies carry the segment one-hot)
    rng = _row_rng(rng_seed, 0)
    for kp in kps:
        if kp.kind != KeypointType.BODY or kp.level is None:
            continue
        if rng.random() * 100.0 < config.falsify_segment_pct:
            true_seg = int(level_to_segment(kp.level))
            wrong = int(rng.integers(3))
            wrong += wrong >= true_seg
            kp.segment_probs = np.zeros(4)
            kp.segment_probs[wrong] = 1.0

    # 2. delete keypoints
    rng = _row_rng(rng_seed, 1)
    kept = []
    for kp in kps:
        pct = config.delete_body_pct if kp.kind == KeypointType.BODY else config.delete_pedicle_pct
        if not rng.random() * 100.0 < pct:
            kept.append(kp)
    kps = kept

    # 3./4. clone and displace (near, then far)
    kps = _clone_pass(kps, config.clone_near_body_pct, config.clone_near_pedicle_pct,
                      config.clone_near_min_mm, config.clone_near_max_mm, _row_rng(rng_seed, 2))
    kps = _clone_pass(kps, config.clone_far_body_pct, config.clone_far_pedicle_pct,
                      config.clone_far_min_mm, config.clone_far_max_mm, _row_rng(rng_seed, 3))

    # 5. mirror along the sagittal (x) axis, relabeling left/right pedicles
    rng = _row_rng(rng_seed, 4)
    if rng.random() * 100.0 < config.mirror_pct:
        for kp in kps:
            kp.position[0] = -kp.position[0]
            kp.kind = _MIRROR_KIND[kp.kind]

    # 6. anisotropic scaling along x and z
    rng = _row_rng(rng_seed, 5)
    if rng.random() * 100.0 < config.scale_pct:
        c_x = rng.uniform(config.scale_x_min, config.scale_x_max)
        c_z = rng.uniform(config.scale_z_min, config.scale_z_max)
        for kp in kps:
            kp.position[0] *= c_x
            kp.position[2] *= c_z

    # 7. rigid rotation about the centroid
    rng = _row_rng(rng_seed, 6)
    if rng.random() * 100.0 < config.rotate_pct:
        theta_z = math.radians(rng.uniform(-config.rotate_z_max_deg, config.rotate_z_max_deg))
        theta_y = math.radians(rng.uniform(-config.rotate_y_max_deg, config.rotate_y_max_deg))
        theta_x = math.radians(rng.uniform(-config.rotate_x_max_deg, config.rotate_x_max_deg))
        rot = _rotation_matrix(theta_z, theta_y, theta_x)
        center = np.mean([kp.position for kp in kps], axis=0)
        for kp in kps:
            kp.position = center + rot @ (kp.position - center)

    # 8. Gaussian perturbation, norm truncated by resampling
    rng = _row_rng(rng_seed, 7)
    sigma = config.perturb_max_mm / 3.0
    for kp in kps:
        if rng.random() * 100.0 < config.perturb_pct:
            while True:
                v = rng.normal(scale=sigma, size=3)
                if np.linalg.norm(v) <= config.perturb_max_mm:
                    break
            kp.position = kp.position + v

    return kps
