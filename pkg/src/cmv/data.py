"""Synthetic motion videos, clip sampling, the temporal-shift view pair,
color augmentation, and the on-disk dataset format.

Each video shows a single soft sprite translating across a toroidal
canvas in a class-determined direction. Start position is uniform and the
sprite never changes shape, so any single frame carries no class signal;
only the frame ordering does. That forces temporal modeling.

Dataset file layout (little-endian), documented for external readers:

    magic    4 bytes  b"CMVD"
    version  u32      currently 1
    header   num_videos u32, num_classes u32, total_frames u32,
             channels u32, height u32, width u32,
             mean f32 * channels, std f32 * channels, seed u64
    videos   per video: label u32,
             pixels u8[total_frames * channels * height * width]
             (row-major (t, c, h, w), value = round(pixel * 255))
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CMVD"
FORMAT_VERSION = 1

_SPRITE_SIGMA_RANGE = (2.5, 5.0)
_SPRITE_AMPLITUDE_RANGE = (0.55, 1.0)
_BASE_SPEED = 1.8
_SPEED_JITTER = 0.25
_ANGLE_JITTER = 0.3  # fraction of half the class sector


@dataclass
class ShiftConfig:
    """Clip geometry: frames per clip, sampling stride, max disturbance."""

    frames: int = 8
    rate: int = 2
    max_disturbance: int = 3

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError(f"frames must be >= 1, got {self.frames}")
        if self.rate < 1:
            raise ValueError(f"rate must be >= 1, got {self.rate}")
        if self.max_disturbance < 0:
            raise ValueError(f"max_disturbance must be >= 0, got {self.max_disturbance}")

    @property
    def span(self) -> int:
        """Source frames covered by one clip, excluding disturbance."""
        return (self.frames - 1) * self.rate + 1


@dataclass
class VideoClip:
    pixels: np.ndarray  # float32 (T, C, H, W) in [0, 1]
    timestamps: np.ndarray  # int64 (T,), strictly increasing, constant stride


@dataclass
class VideoDataset:
    num_classes: int
    total_frames: int
    channels: int
    height: int
    width: int
    mean: np.ndarray  # float32 (C,)
    std: np.ndarray  # float32 (C,)
    seed: int
    labels: np.ndarray = field(repr=False)  # uint32 (V,)
    videos: np.ndarray = field(repr=False)  # uint8 (V, T_total, C, H, W)

    @property
    def num_videos(self) -> int:
        return len(self.labels)

    def frames_float(self, index: int) -> np.ndarray:
        """One video as float32 pixels in [0, 1]."""
        return self.videos[index].astype(np.float32) / 255.0


def _render_video(
    label: int,
    num_classes: int,
    total_frames: int,
    channels: int,
    height: int,
    width: int,
    noise_level: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Render one sprite video as uint8. All randomness comes from ``rng``.

    The sprite's appearance (size, brightness) varies per video but never
    with the class, and its start position is uniform on the torus, so a
    single frame in isolation carries no class information.
    """
    sector = 2.0 * np.pi / num_classes
    angle = label * sector + rng.uniform(-1.0, 1.0) * (sector / 2.0) * _ANGLE_JITTER
    speed = _BASE_SPEED * rng.uniform(1.0 - _SPEED_JITTER, 1.0 + _SPEED_JITTER)
    sigma = rng.uniform(*_SPRITE_SIGMA_RANGE)
    amplitude = rng.uniform(*_SPRITE_AMPLITUDE_RANGE)
    start = rng.uniform(0.0, [height, width])
    velocity = np.array([np.sin(angle), np.cos(angle)]) * speed

    t = np.arange(total_frames, dtype=np.float64)[:, None]
    centers = start[None, :] + t * velocity[None, :]  # (T, 2), wraps below

    ys = np.arange(height, dtype=np.float64)
    xs = np.arange(width, dtype=np.float64)
    # Toroidal distance keeps the sprite isotropic across the wrap seam.
    dy = ys[None, :] - centers[:, 0:1]
    dy = np.minimum(np.abs(dy) % height, height - np.abs(dy) % height)
    dx = xs[None, :] - centers[:, 1:2]
    dx = np.minimum(np.abs(dx) % width, width - np.abs(dx) % width)
    dist_sq = dy[:, :, None] ** 2 + dx[:, None, :] ** 2  # (T, H, W)
    sprite = amplitude * np.exp(-dist_sq / (2.0 * sigma**2))

    frames = np.repeat(sprite[:, None, :, :], channels, axis=1)
    if noise_level > 0:
        frames = frames + rng.normal(0.0, noise_level, frames.shape)
    frames = np.clip(frames, 0.0, 1.0)
    return np.round(frames * 255.0).astype(np.uint8)


def synthesize_dataset(
    num_videos: int,
    num_classes: int,
    total_frames: int,
    height: int,
    width: int,
    channels: int = 1,
    noise_level: float = 0.02,
    seed: int = 0,
) -> VideoDataset:
    """Build a balanced in-memory dataset, fully determined by ``seed``."""
    if num_classes not in (4, 8):
        raise ValueError(f"num_classes must be 4 or 8, got {num_classes}")
    if min(num_videos, total_frames, height, width, channels) < 1:
        raise ValueError("all dataset dimensions must be positive")

    labels = np.arange(num_videos, dtype=np.uint32) % num_classes
    videos = np.empty((num_videos, total_frames, channels, height, width), dtype=np.uint8)
    for i in range(num_videos):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        videos[i] = _render_video(
            int(labels[i]), num_classes, total_frames, channels, height, width, noise_level, rng
        )

    as_float = videos.astype(np.float64) / 255.0
    mean = as_float.mean(axis=(0, 1, 3, 4)).astype(np.float32)
    std = as_float.std(axis=(0, 1, 3, 4)).astype(np.float32)
    return VideoDataset(
        num_classes=num_classes,
        total_frames=total_frames,
        channels=channels,
        height=height,
        width=width,
        mean=mean,
        std=std,
        seed=seed,
        labels=labels,
        videos=videos,
    )


def write_dataset(dataset: VideoDataset, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(
            struct.pack(
                "<6I",
                dataset.num_videos,
                dataset.num_classes,
                dataset.total_frames,
                dataset.channels,
                dataset.height,
                dataset.width,
            )
        )
        fh.write(dataset.mean.astype("<f4").tobytes())
        fh.write(dataset.std.astype("<f4").tobytes())
        fh.write(struct.pack("<Q", dataset.seed))
        for label, video in zip(dataset.labels, dataset.videos):
            fh.write(struct.pack("<I", int(label)))
            fh.write(video.tobytes())
    return path


def read_dataset(path: str | Path) -> VideoDataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a dataset file (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        num_videos, num_classes, total_frames, channels, height, width = struct.unpack(
            "<6I", fh.read(24)
        )
        mean = np.frombuffer(fh.read(4 * channels), dtype="<f4").copy()
        std = np.frombuffer(fh.read(4 * channels), dtype="<f4").copy()
        (seed,) = struct.unpack("<Q", fh.read(8))
        frame_bytes = total_frames * channels * height * width
        labels = np.empty(num_videos, dtype=np.uint32)
        videos = np.empty((num_videos, total_frames, channels, height, width), dtype=np.uint8)
        for i in range(num_videos):
            (labels[i],) = struct.unpack("<I", fh.read(4))
            videos[i] = np.frombuffer(fh.read(frame_bytes), dtype=np.uint8).reshape(
                total_frames, channels, height, width
            )
    return VideoDataset(
        num_classes=num_classes,
        total_frames=total_frames,
        channels=channels,
        height=height,
        width=width,
        mean=mean,
        std=std,
        seed=seed,
        labels=labels,
        videos=videos,
    )


def generate_dataset(
    path: str | Path,
    num_videos: int,
    num_classes: int,
    total_frames: int,
    height: int,
    width: int,
    channels: int = 1,
    noise_level: float = 0.02,
    seed: int = 0,
) -> Path:
    """Synthesize and write a dataset file; byte-identical for identical args."""
    dataset = synthesize_dataset(
        num_videos, num_classes, total_frames, height, width, channels, noise_level, seed
    )
    return write_dataset(dataset, path)


# -- clip sampling -----------------------------------------------------------


def clip_timestamps(start: int, cfg: ShiftConfig, disturbance: int = 0) -> np.ndarray:
    """Timestamps {start + k*rate + disturbance} for k in [0, frames)."""
    return start + disturbance + np.arange(cfg.frames, dtype=np.int64) * cfg.rate


def max_clip_start(total_frames: int, cfg: ShiftConfig, with_shift: bool = False) -> int:
    """Largest valid start index; negative means the video is too short."""
    slack = cfg.max_disturbance if with_shift else 0
    return total_frames - cfg.span - slack


def sample_clip(frames: np.ndarray, start: int, cfg: ShiftConfig) -> VideoClip:
    """Extract the clip with timestamps {start, start+rate, ...}."""
    total = frames.shape[0]
    last = start + (cfg.frames - 1) * cfg.rate
    if start < 0 or last >= total:
        raise ValueError(
            f"clip start {start} out of range: needs frames [{start}, {last}] of {total}"
        )
    ts = clip_timestamps(start, cfg)
    return VideoClip(pixels=np.ascontiguousarray(frames[ts], dtype=np.float32), timestamps=ts)


def temporal_shift(
    frames: np.ndarray, start: int, cfg: ShiftConfig, rng: np.random.Generator
) -> tuple[VideoClip, VideoClip]:
    """Online/target view pair differing only by a random temporal offset.

    The online view samples {start + k*rate}; the target view adds a
    single disturbance drawn uniformly from the integers [0, p] to every
    timestamp. Range is validated before the draw so a rejected call
    consumes no randomness. No spatial offset is applied: with zero
    disturbance the two views are pixel-identical.
    """
    total = frames.shape[0]
    last = start + (cfg.frames - 1) * cfg.rate + cfg.max_disturbance
    if start < 0 or last >= total:
        raise ValueError(
            f"shifted clip start {start} out of range: needs frames "
            f"[{start}, {last}] of {total}"
        )
    delta = int(rng.integers(0, cfg.max_disturbance + 1))
    online = sample_clip(frames, start, cfg)
    target_ts = clip_timestamps(start, cfg, disturbance=delta)
    target = VideoClip(
        pixels=np.ascontiguousarray(frames[target_ts], dtype=np.float32), timestamps=target_ts
    )
    return online, target


def color_augment(clip: VideoClip, strength: float, rng: np.random.Generator) -> VideoClip:
    """Per-channel brightness/contrast jitter, constant across the clip.

    One (scale, shift) pair per channel is drawn for the whole clip so the
    temporal signal survives; output is clamped back to [0, 1].
    """
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength must be in [0, 1], got {strength}")
    channels = clip.pixels.shape[1]
    scale = rng.uniform(1.0 - strength, 1.0 + strength, channels).astype(np.float32)
    shift = rng.uniform(-strength / 2.0, strength / 2.0, channels).astype(np.float32)
    pixels = clip.pixels * scale[None, :, None, None] + shift[None, :, None, None]
    return VideoClip(pixels=np.clip(pixels, 0.0, 1.0), timestamps=clip.timestamps.copy())


def normalize(pixels: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """(pixel - mean_c) / std_c with the dataset-header constants."""
    return ((pixels - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)


def denormalize(pixels: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (pixels * std[None, :, None, None] + mean[None, :, None, None]).astype(np.float32)
