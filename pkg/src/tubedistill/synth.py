"""Synthetic multimodal video benchmark with a controllable source/target domain gap.

Each class is a sprite-motion pattern (trajectory shape, direction, speed). RGB
renders the sprite over a domain-dependent background; FLOW is the analytic
per-pixel displacement field of the rendered motion; POSE is a heatmap stack of
keypoints rigidly attached to the sprite. The domain gap is appearance-only
(background texture, brightness, pixel noise on RGB), so FLOW and POSE are
domain-invariant by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, EpisodeSamplingError
from .util import config_hash, derive_rng, read_csv, write_csv
from .validation import require

DOMAIN_SOURCE = "source"
DOMAIN_TARGET = "target"

N_KEYPOINTS = 21
SPRITE_SIZE = 10

_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
_SPEEDS = (1.0, 1.5, 2.0)
_TRAJECTORY_KINDS = ("line", "circle", "zigzag")


class Modality(str, Enum):
    RGB = "rgb"
    FLOW = "flow"
    POSE = "pose"


@dataclass(frozen=True)
class ModalitySpec:
    kind: Modality
    height: int
    width: int
    channels: int
    patch_size: int

    def __post_init__(self) -> None:
        if self.height % self.patch_size != 0 or self.width % self.patch_size != 0:
            raise ConfigurationError(
                f"{self.kind.value}: {self.height}x{self.width} not divisible by patch {self.patch_size}"
            )

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.height // self.patch_size, self.width // self.patch_size


def standard_modalities() -> dict[Modality, ModalitySpec]:
    """Toy geometry: RGB/FLOW at 32x32 patch 4 and POSE at 16x16 patch 2, so all
    modalities share the same 8x8 spatial token grid."""
    return {
        Modality.RGB: ModalitySpec(Modality.RGB, 32, 32, 3, 4),
        Modality.FLOW: ModalitySpec(Modality.FLOW, 32, 32, 2, 4),
        Modality.POSE: ModalitySpec(Modality.POSE, 16, 16, N_KEYPOINTS, 2),
    }


@dataclass(frozen=True)
class Clip:
    modality: ModalitySpec
    frames: np.ndarray  # (T, H, W, C) float64

    def __post_init__(self) -> None:
        t, h, w, c = self.frames.shape
        if (h, w, c) != (self.modality.height, self.modality.width, self.modality.channels):
            raise ConfigurationError(
                f"clip shape {self.frames.shape} does not match modality spec {self.modality}"
            )


@dataclass(frozen=True)
class MultimodalSample:
    sample_id: str
    clips: Mapping[Modality, Clip]
    label: int | None
    domain: str

    def __post_init__(self) -> None:
        lengths = {clip.frames.shape[0] for clip in self.clips.values()}
        if len(lengths) > 1:
            raise ConfigurationError(f"frame counts differ across modalities: {lengths}")
        if self.domain == DOMAIN_SOURCE and self.label is None:
            raise ConfigurationError("source samples must carry a label")


@dataclass(frozen=True)
class DatasetSpec:
    """Benchmark layout and domain-gap knobs.

    Each source class contributes `samples_per_class` labeled samples; each
    target class contributes `samples_per_class` unlabeled plus
    `samples_per_class` labeled samples (distinct renders).
    """

    n_source_classes: int = 8
    n_target_classes: int = 6
    samples_per_class: int = 20
    frames: int = 8
    modalities: Mapping[Modality, ModalitySpec] = field(default_factory=standard_modalities)
    background_source: int = 0
    background_target: int = 1
    brightness_shift: float = 0.25
    noise_level: float = 0.15
    heatmap_sigma: float = 3.0
    target_class_offset: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_source_classes < 1 or self.n_target_classes < 1 or self.samples_per_class < 1:
            raise ConfigurationError("class and sample counts must be positive")
        if self.frames < 2:
            raise ConfigurationError("need at least 2 frames for motion")
        if self.heatmap_sigma <= 0:
            raise ConfigurationError(f"heatmap_sigma must be > 0, got {self.heatmap_sigma}")
        if self.noise_level < 0:
            raise ConfigurationError("noise_level must be >= 0")
        grids = {spec.grid_hw for spec in self.modalities.values()}
        if len(grids) != 1:
            raise ConfigurationError(f"modalities disagree on spatial token grid: {grids}")
        if self.target_class_offset is not None and self.target_class_offset < self.n_source_classes:
            raise ConfigurationError(
                f"target_class_offset={self.target_class_offset} overlaps source class range "
                f"[0, {self.n_source_classes})"
            )

    @property
    def source_class_ids(self) -> tuple[int, ...]:
        return tuple(range(self.n_source_classes))

    @property
    def target_class_ids(self) -> tuple[int, ...]:
        offset = self.n_source_classes if self.target_class_offset is None else self.target_class_offset
        return tuple(range(offset, offset + self.n_target_classes))


@dataclass(frozen=True)
class MotionPattern:
    kind: str
    angle: float
    speed: float

    def __post_init__(self) -> None:
        if self.kind not in _TRAJECTORY_KINDS:
            raise ConfigurationError(f"unknown trajectory kind {self.kind!r}")


@dataclass(frozen=True)
class Episode:
    support: tuple[MultimodalSample, ...]
    query: tuple[MultimodalSample, ...]
    class_ids: tuple[int, ...]


def class_motion(class_id: int) -> MotionPattern:
    """Deterministic class-id -> motion pattern table.

    Golden-angle spacing guarantees no two classes share a direction; kind and
    speed cycle so nearby ids differ in trajectory shape.
    """
    kind = _TRAJECTORY_KINDS[class_id % len(_TRAJECTORY_KINDS)]
    speed = _SPEEDS[(class_id // len(_TRAJECTORY_KINDS)) % len(_SPEEDS)]
    angle = (class_id * _GOLDEN_ANGLE) % (2.0 * math.pi)
    return MotionPattern(kind=kind, angle=angle, speed=speed)


def _keypoint_template() -> np.ndarray:
    """21 fixed (x, y) offsets from the sprite centre, hand-skeleton style:
    a wrist point plus five 4-joint chains fanned over the sprite."""
    offsets = [(0.0, 3.5)]
    for finger in range(5):
        theta = math.pi * (0.25 + 0.125 * finger)
        for joint in range(1, 5):
            r = 1.1 * joint
            offsets.append((r * math.cos(theta), -r * math.sin(theta) + 1.0))
    return np.asarray(offsets, dtype=np.float64)


_KP_TEMPLATE = _keypoint_template()


def make_heatmap(
    keypoints: Sequence[tuple[float, float] | None],
    height: int,
    width: int,
    sigma: float,
) -> np.ndarray:
    """Per-keypoint Gaussian bumps, unnormalized (peak value 1); absent keypoints
    produce all-zero channels. Returns (height, width, len(keypoints))."""
    if sigma <= 0:
        raise ConfigurationError(f"sigma must be > 0, got {sigma}")
    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    out = np.zeros((height, width, len(keypoints)), dtype=np.float64)
    for j, kp in enumerate(keypoints):
        if kp is None:
            continue
        x, y = float(kp[0]), float(kp[1])
        require(0 <= x < width and 0 <= y < height, f"keypoint {j} at ({x}, {y}) outside {width}x{height}")
        out[:, :, j] = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2.0 * sigma * sigma))
    return out


def _trajectory(pattern: MotionPattern, frames: int, rng: np.random.Generator) -> np.ndarray:
    """Sprite centre track (frames, 2) as float (x, y), kept inside the canvas."""
    u = np.array([math.cos(pattern.angle), math.sin(pattern.angle)])
    v = np.array([-u[1], u[0]])
    t = np.arange(frames, dtype=np.float64) - (frames - 1) / 2.0
    centre = np.array([16.0, 16.0]) + rng.uniform(-1.5, 1.5, size=2)
    if pattern.kind == "line":
        track = centre[None, :] + t[:, None] * pattern.speed * u[None, :]
    elif pattern.kind == "zigzag":
        phase = rng.uniform(0.0, 2.0 * math.pi)
        wav = 2.5 * np.sin(2.0 * math.pi * np.arange(frames) / 4.0 + phase)
        track = centre[None, :] + t[:, None] * pattern.speed * u[None, :] + wav[:, None] * v[None, :]
    else:  # circle
        radius = 5.0
        omega = pattern.speed / radius
        phase = pattern.angle + rng.uniform(-0.3, 0.3)
        theta = omega * np.arange(frames) + phase
        track = centre[None, :] + radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    half = SPRITE_SIZE / 2.0
    return np.clip(track, half, 32.0 - half)


def _background(texture_id: int, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Static procedural background (height, width, 3); phase randomized per sample
    so the texture itself carries no class information."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    p1 = rng.uniform(0.0, 2.0 * math.pi)
    p2 = rng.uniform(0.0, 2.0 * math.pi)
    tid = texture_id % 4
    if tid == 0:
        pat = np.sin(2.0 * math.pi * xx / 8.0 + p1)
    elif tid == 1:
        pat = np.sin(2.0 * math.pi * (xx + yy) / 8.0 + p1)
    elif tid == 2:
        pat = np.sin(2.0 * math.pi * xx / 8.0 + p1) * np.sin(2.0 * math.pi * yy / 8.0 + p2)
    else:
        pat = np.sin(2.0 * math.pi * yy / 6.0 + p1)
    tints = ((1.0, 0.9, 0.8), (0.8, 1.0, 0.9), (0.9, 0.8, 1.0), (1.0, 1.0, 0.85))
    base = 0.45 + 0.25 * pat
    return base[:, :, None] * np.asarray(tints[tid], dtype=np.float64)[None, None, :]


def render_sample(
    pattern: MotionPattern,
    spec: DatasetSpec,
    *,
    sample_id: str,
    domain: str,
    label: int | None,
    rng: np.random.Generator,
) -> tuple[MultimodalSample, np.ndarray]:
    """Render one multimodal sample; also returns the ground-truth centre track.

    Target samples get the target background texture, a brightness shift, and
    pixel noise on RGB only; FLOW and POSE are rendered identically in both
    domains.
    """
    rgb_spec = spec.modalities[Modality.RGB]
    flow_spec = spec.modalities[Modality.FLOW]
    pose_spec = spec.modalities[Modality.POSE]
    frames = spec.frames
    track = _trajectory(pattern, frames, rng)

    if domain == DOMAIN_SOURCE:
        texture, shift, noise = spec.background_source, 0.0, 0.0
    else:
        texture, shift, noise = spec.background_target, spec.brightness_shift, spec.noise_level

    colour = rng.uniform(0.55, 0.95, size=3)
    background = _background(texture, rgb_spec.height, rgb_spec.width, rng)
    half = SPRITE_SIZE // 2

    rgb = np.empty((frames, rgb_spec.height, rgb_spec.width, 3), dtype=np.float64)
    flow = np.zeros((frames, flow_spec.height, flow_spec.width, 2), dtype=np.float64)
    pose = np.empty((frames, pose_spec.height, pose_spec.width, N_KEYPOINTS), dtype=np.float64)
    pose_scale = rgb_spec.height / pose_spec.height

    for t in range(frames):
        cx, cy = int(round(track[t, 0])), int(round(track[t, 1]))
        top, left = cy - half, cx - half
        frame = background + shift
        frame[top : top + SPRITE_SIZE, left : left + SPRITE_SIZE, :] = colour
        if noise > 0:
            frame = frame + rng.normal(0.0, noise, size=frame.shape)
        rgb[t] = np.clip(frame, 0.0, 1.0)

        if t + 1 < frames:
            # rigid motion: every sprite pixel carries the centre displacement
            flow[t, top : top + SPRITE_SIZE, left : left + SPRITE_SIZE, 0] = track[t + 1, 0] - track[t, 0]
            flow[t, top : top + SPRITE_SIZE, left : left + SPRITE_SIZE, 1] = track[t + 1, 1] - track[t, 1]

        keypoints: list[tuple[float, float] | None] = []
        for j in range(N_KEYPOINTS):
            kx = round((track[t, 0] + _KP_TEMPLATE[j, 0]) / pose_scale)
            ky = round((track[t, 1] + _KP_TEMPLATE[j, 1]) / pose_scale)
            if 0 <= kx < pose_spec.width and 0 <= ky < pose_spec.height:
                keypoints.append((float(kx), float(ky)))
            else:
                keypoints.append(None)
        pose[t] = make_heatmap(keypoints, pose_spec.height, pose_spec.width, spec.heatmap_sigma)

    sample = MultimodalSample(
        sample_id=sample_id,
        clips={
            Modality.RGB: Clip(rgb_spec, rgb),
            Modality.FLOW: Clip(flow_spec, flow),
            Modality.POSE: Clip(pose_spec, pose),
        },
        label=label,
        domain=domain,
    )
    return sample, track


def generate_dataset(
    spec: DatasetSpec,
) -> tuple[list[MultimodalSample], list[MultimodalSample], list[MultimodalSample]]:
    """Generate (source labeled, target unlabeled, target labeled) pools.

    Deterministic given spec.seed; every sample's RNG stream is keyed by
    (seed, pool, class, index) so pools are independent of generation order.
    """
    source: list[MultimodalSample] = []
    for class_id in spec.source_class_ids:
        for k in range(spec.samples_per_class):
            rng = derive_rng(spec.seed, "source", class_id, k)
            sample, _ = render_sample(
                class_motion(class_id), spec,
                sample_id=f"src-{class_id:03d}-{k:03d}", domain=DOMAIN_SOURCE, label=class_id, rng=rng,
            )
            source.append(sample)

    target_unlabeled: list[MultimodalSample] = []
    target_labeled: list[MultimodalSample] = []
    for class_id in spec.target_class_ids:
        for k in range(spec.samples_per_class):
            rng = derive_rng(spec.seed, "target-unlabeled", class_id, k)
            sample, _ = render_sample(
                class_motion(class_id), spec,
                sample_id=f"tgtu-{class_id:03d}-{k:03d}", domain=DOMAIN_TARGET, label=None, rng=rng,
            )
            target_unlabeled.append(sample)
        for k in range(spec.samples_per_class):
            rng = derive_rng(spec.seed, "target-labeled", class_id, k)
            sample, _ = render_sample(
                class_motion(class_id), spec,
                sample_id=f"tgtl-{class_id:03d}-{k:03d}", domain=DOMAIN_TARGET, label=class_id, rng=rng,
            )
            target_labeled.append(sample)
    return source, target_unlabeled, target_labeled


def sample_episode(
    pool: Sequence[MultimodalSample],
    n_way: int,
    k_shot: int,
    n_query: int,
    seed: int,
) -> Episode:
    """Draw an N-way K-shot episode without replacement, deterministic given seed."""
    by_class: dict[int, list[MultimodalSample]] = {}
    for sample in pool:
        if sample.label is None:
            raise EpisodeSamplingError(f"unlabeled sample {sample.sample_id} in episode pool")
        by_class.setdefault(sample.label, []).append(sample)
    classes = sorted(by_class)
    if len(classes) < n_way:
        raise EpisodeSamplingError(f"pool has {len(classes)} classes, need {n_way}")
    rng = derive_rng(seed, "episode")
    chosen = sorted(int(classes[i]) for i in rng.choice(len(classes), size=n_way, replace=False))
    support: list[MultimodalSample] = []
    query: list[MultimodalSample] = []
    for class_id in chosen:
        members = sorted(by_class[class_id], key=lambda s: s.sample_id)
        if len(members) < k_shot + n_query:
            raise EpisodeSamplingError(
                f"class {class_id} has {len(members)} samples, need {k_shot + n_query}"
            )
        order = rng.permutation(len(members))
        support.extend(members[i] for i in order[:k_shot])
        query.extend(members[i] for i in order[k_shot : k_shot + n_query])
    return Episode(support=tuple(support), query=tuple(query), class_ids=tuple(chosen))


def _spec_to_json(spec: DatasetSpec) -> dict:
    d = {
        "n_source_classes": spec.n_source_classes,
        "n_target_classes": spec.n_target_classes,
        "samples_per_class": spec.samples_per_class,
        "frames": spec.frames,
        "background_source": spec.background_source,
        "background_target": spec.background_target,
        "brightness_shift": spec.brightness_shift,
        "noise_level": spec.noise_level,
        "heatmap_sigma": spec.heatmap_sigma,
        "target_class_offset": spec.target_class_offset,
        "seed": spec.seed,
        "modalities": {
            m.value: [s.height, s.width, s.channels, s.patch_size] for m, s in spec.modalities.items()
        },
    }
    return d


def _spec_from_json(d: dict) -> DatasetSpec:
    modalities = {
        Modality(name): ModalitySpec(Modality(name), h, w, c, p)
        for name, (h, w, c, p) in d["modalities"].items()
    }
    return DatasetSpec(
        n_source_classes=d["n_source_classes"],
        n_target_classes=d["n_target_classes"],
        samples_per_class=d["samples_per_class"],
        frames=d["frames"],
        modalities=modalities,
        background_source=d["background_source"],
        background_target=d["background_target"],
        brightness_shift=d["brightness_shift"],
        noise_level=d["noise_level"],
        heatmap_sigma=d["heatmap_sigma"],
        target_class_offset=d["target_class_offset"],
        seed=d["seed"],
    )


def dataset_hash(spec: DatasetSpec) -> str:
    return config_hash({k: str(v) for k, v in _spec_to_json(spec).items()})


def save_dataset(
    root: str | Path,
    spec: DatasetSpec,
    source: Sequence[MultimodalSample],
    target_unlabeled: Sequence[MultimodalSample],
    target_labeled: Sequence[MultimodalSample],
) -> None:
    """Persist as one .npy tensor per sample per modality plus a manifest CSV."""
    root = Path(root)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    rows = []
    for sample in [*source, *target_unlabeled, *target_labeled]:
        paths = {}
        for modality, clip in sample.clips.items():
            rel = f"samples/{sample.sample_id}.{modality.value}.npy"
            np.save(root / rel, clip.frames)
            paths[modality] = rel
        rows.append(
            [
                sample.sample_id,
                sample.domain,
                sample.label,
                paths[Modality.RGB],
                paths[Modality.FLOW],
                paths[Modality.POSE],
            ]
        )
    write_csv(
        root / "manifest.csv",
        ["id", "domain", "label", "rgb_path", "flow_path", "pose_path"],
        rows,
        comment=f"config_hash={dataset_hash(spec)}",
    )
    (root / "dataset_spec.json").write_text(
        json.dumps(_spec_to_json(spec), indent=2, sort_keys=True), encoding="utf-8"
    )


def load_dataset(
    root: str | Path,
) -> tuple[DatasetSpec, list[MultimodalSample], list[MultimodalSample], list[MultimodalSample]]:
    root = Path(root)
    spec = _spec_from_json(json.loads((root / "dataset_spec.json").read_text(encoding="utf-8")))
    header, rows, _ = read_csv(root / "manifest.csv")
    if header != ["id", "domain", "label", "rgb_path", "flow_path", "pose_path"]:
        raise ConfigurationError(f"unexpected manifest header: {header}")
    source: list[MultimodalSample] = []
    target_unlabeled: list[MultimodalSample] = []
    target_labeled: list[MultimodalSample] = []
    for sample_id, domain, label, rgb_path, flow_path, pose_path in rows:
        clips = {
            Modality.RGB: Clip(spec.modalities[Modality.RGB], np.load(root / rgb_path)),
            Modality.FLOW: Clip(spec.modalities[Modality.FLOW], np.load(root / flow_path)),
            Modality.POSE: Clip(spec.modalities[Modality.POSE], np.load(root / pose_path)),
        }
        sample = MultimodalSample(
            sample_id=sample_id,
            clips=clips,
            label=None if label == "" else int(label),
            domain=domain,
        )
        if domain == DOMAIN_SOURCE:
            source.append(sample)
        elif sample.label is None:
            target_unlabeled.append(sample)
        else:
            target_labeled.append(sample)
    return spec, source, target_unlabeled, target_labeled
