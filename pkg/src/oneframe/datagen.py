"""Synthetic motion dataset.

Clips show a bright Gaussian blob drifting over a static per-clip noise
background. The class is the motion direction (1=up, 2=down, 3=left,
4=right), so a single frame carries texture and position but not the class:
only the temporal structure separates the classes. Generation is a pure
function of (config, class, clip index).
"""

import struct
from dataclasses import dataclass, replace
from typing import BinaryIO

import numpy as np

from . import rng as rngmod
from .errors import FormatError
from .validation import PIXEL_MAX, PIXEL_MIN

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {TRAIN: "train", VAL: "val", TEST: "test"}

# Unit motion vectors (dy, dx) per 1-based class, image coordinates (y grows down).
DIRECTIONS = {1: (-1.0, 0.0), 2: (1.0, 0.0), 3: (0.0, -1.0), 4: (0.0, 1.0)}

_MAGIC = b"OFAD"
_VERSION = 1


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 4
    clips_per_class: int = 250
    clip_length: int = 32
    spatial_size: int = 32
    channels: int = 1
    speed_range: tuple = (0.45, 0.75)
    noise_amplitude: float = 32.0
    blob_peak: float = 210.0
    blob_sigma: float = 2.2
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(DIRECTIONS):
            raise ValueError(f"num_classes must be in [2, {len(DIRECTIONS)}]")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise ValueError(f"speeds must be positive and ordered, got {self.speed_range}")
        margin = self.margin
        travel = hi * (self.clip_length - 1)
        if travel > self.spatial_size - 1 - 2 * margin:
            raise ValueError(
                f"max speed {hi} travels {travel:.1f}px over {self.clip_length} frames; "
                f"the blob cannot stay clear of the borders of a {self.spatial_size}px frame"
            )

    @property
    def margin(self) -> float:
        return max(2.0, self.blob_sigma)


@dataclass(frozen=True)
class VideoClip:
    """A labeled clip: pixels (c, t, h, w) in [0, 255], 1-based class label."""

    data: np.ndarray
    label: int


@dataclass
class Dataset:
    """Clips (n, c, t, h, w), 1-based labels (n,), split tags (n,) in {0,1,2}."""

    clips: np.ndarray
    labels: np.ndarray
    splits: np.ndarray

    def __len__(self):
        return self.clips.shape[0]

    @property
    def clip_length(self) -> int:
        return self.clips.shape[2]

    def subset(self, *split_tags):
        mask = np.isin(self.splits, split_tags)
        return self.clips[mask], self.labels[mask]

    def class_histogram(self) -> dict:
        values, counts = np.unique(self.labels, return_counts=True)
        return dict(zip(values.tolist(), counts.tolist()))


def _reflect(pos, lo, hi):
    """Fold a coordinate back into [lo, hi] by mirror reflection."""
    span = hi - lo
    if span <= 0:
        return lo
    p = (pos - lo) % (2 * span)
    return lo + (span - abs(p - span))


def _render_frames(bg, centers, config):
    size = config.spatial_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    frames = np.empty((len(centers), size, size), dtype=np.float32)
    inv = np.float32(1.0 / (2.0 * config.blob_sigma ** 2))
    for t, (cy, cx) in enumerate(centers):
        blob = np.float32(config.blob_peak) * np.exp(
            -((yy - np.float32(cy)) ** 2 + (xx - np.float32(cx)) ** 2) * inv
        )
        frames[t] = bg + blob
    np.clip(frames, PIXEL_MIN, PIXEL_MAX, out=frames)
    return frames


def _trajectory(gen, config, class_id, length, start=None):
    """Blob centers for `length` frames; returns (centers, end_position)."""
    size = config.spatial_size
    margin = config.margin
    lo, hi = margin, size - 1 - margin
    speed = float(gen.uniform(*config.speed_range))
    dy, dx = DIRECTIONS[class_id]
    travel = speed * (length - 1)
    if start is None:
        # A start band that keeps the whole run inside [lo, hi].
        y0 = float(gen.uniform(lo + travel, hi)) if dy < 0 else (
            float(gen.uniform(lo, hi - travel)) if dy > 0 else float(gen.uniform(lo, hi)))
        x0 = float(gen.uniform(lo + travel, hi)) if dx < 0 else (
            float(gen.uniform(lo, hi - travel)) if dx > 0 else float(gen.uniform(lo, hi)))
    else:
        y0, x0 = start
    centers = []
    for t in range(length):
        cy = _reflect(y0 + dy * speed * t, lo, hi)
        cx = _reflect(x0 + dx * speed * t, lo, hi)
        centers.append((cy, cx))
    return centers, centers[-1]


def generate_clip(config: SyntheticConfig, class_id: int, clip_seed: int) -> VideoClip:
    """Deterministic clip for (config, class, seed); class needs >= 2 frames to identify."""
    if not 1 <= class_id <= config.num_classes:
        raise ValueError(f"class {class_id} outside [1, {config.num_classes}]")
    gen = rngmod.stream(config.seed, rngmod.CLIP, class_id, clip_seed)
    size = config.spatial_size
    bg = gen.uniform(0.0, config.noise_amplitude, size=(size, size)).astype(np.float32)
    centers, _ = _trajectory(gen, config, class_id, config.clip_length)
    frames = _render_frames(bg, centers, config)
    data = np.broadcast_to(frames[None], (config.channels,) + frames.shape).copy()
    return VideoClip(data=data, label=class_id)


def generate_dataset(config: SyntheticConfig) -> Dataset:
    """Balanced dataset with a deterministic 70/15/15 split by seeded shuffle."""
    clips, labels = [], []
    for class_id in range(1, config.num_classes + 1):
        for idx in range(config.clips_per_class):
            clip = generate_clip(config, class_id, idx)
            clips.append(clip.data)
            labels.append(clip.label)
    data = np.stack(clips)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    n_val = int(0.15 * n)
    n_test = int(0.15 * n)
    order = rngmod.stream(config.seed, rngmod.SPLIT).permutation(n)
    splits = np.empty(n, dtype=np.uint8)
    splits[order[: n - n_val - n_test]] = TRAIN
    splits[order[n - n_val - n_test: n - n_test]] = VAL
    splits[order[n - n_test:]] = TEST
    return Dataset(clips=data, labels=labels, splits=splits)


@dataclass(frozen=True)
class LabeledStream:
    """A long frame sequence (c, frames, h, w) built from same-class clips."""

    frames: np.ndarray
    label: int
    clip_length: int


def generate_stream(config: SyntheticConfig, class_id: int, length: int, stream_seed: int) -> LabeledStream:
    """Concatenate consecutive generated clips of one class into a stream."""
    if length % config.clip_length:
        raise ValueError(f"stream length {length} must be a multiple of clip length {config.clip_length}")
    pieces = []
    for k in range(length // config.clip_length):
        clip = generate_clip(config, class_id, (stream_seed << 16) + k)
        pieces.append(clip.data)
    return LabeledStream(
        frames=np.concatenate(pieces, axis=1), label=class_id, clip_length=config.clip_length
    )


def blob_centroid(frame: np.ndarray, threshold: float = 100.0):
    """Intensity centroid of above-threshold pixels; None when nothing is bright."""
    weights = np.maximum(frame - threshold, 0.0)
    total = weights.sum()
    if total <= 0:
        return None
    h, w = frame.shape
    yy, xx = np.mgrid[0:h, 0:w]
    return float((weights * yy).sum() / total), float((weights * xx).sum() / total)


def motion_direction_heuristic(clip_data: np.ndarray) -> int:
    """Classify by majority vote over consecutive-frame centroid displacements.

    Needs at least two frames; with fewer there are no displacement votes and
    the fallback prediction is class 1.
    """
    frames = clip_data[0]  # channels carry identical content
    votes = np.zeros(len(DIRECTIONS) + 1)
    prev = blob_centroid(frames[0])
    for t in range(1, frames.shape[0]):
        cur = blob_centroid(frames[t])
        if prev is not None and cur is not None:
            dy, dx = cur[0] - prev[0], cur[1] - prev[1]
            if abs(dy) >= abs(dx):
                votes[1 if dy < 0 else 2] += 1
            else:
                votes[3 if dx < 0 else 4] += 1
        prev = cur
    if votes.sum() == 0:
        return 1
    return int(votes.argmax())


def single_frame_heuristic(clip_data: np.ndarray, frame_index: int = 1) -> int:
    """The same heuristic restricted to one frame: no displacement is observable."""
    return motion_direction_heuristic(clip_data[:, frame_index - 1: frame_index])


def _read_exact(fh: BinaryIO, count: int, offset: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise FormatError(f"truncated while reading {what}", byte_offset=offset + len(buf))
    return buf


def save_dataset(path, dataset: Dataset) -> None:
    """Write the OFAD binary format (little-endian, float32 payload)."""
    n, c, t, h, w = dataset.clips.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HIHHHHH", _VERSION, n, int(dataset.labels.max(initial=0)), c, t, h, w))
        for i in range(n):
            fh.write(struct.pack("<HB", int(dataset.labels[i]), int(dataset.splits[i])))
            fh.write(np.ascontiguousarray(dataset.clips[i], dtype="<f4").tobytes())


def load_dataset(path) -> Dataset:
    """Read an OFAD file; malformed input raises FormatError with a byte offset."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, 0, "magic")
        if magic != _MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}", byte_offset=0)
        header = _read_exact(fh, struct.calcsize("<HIHHHHH"), 4, "header")
        version, n, _num_classes, c, t, h, w = struct.unpack("<HIHHHHH", header)
        if version != _VERSION:
            raise FormatError(f"unsupported version {version}", byte_offset=4)
        offset = 4 + len(header)
        clip_bytes = 4 * c * t * h * w
        clips = np.empty((n, c, t, h, w), dtype=np.float32)
        labels = np.empty(n, dtype=np.int64)
        splits = np.empty(n, dtype=np.uint8)
        for i in range(n):
            meta = _read_exact(fh, 3, offset, f"clip {i} header")
            labels[i], splits[i] = struct.unpack("<HB", meta)
            offset += 3
            payload = _read_exact(fh, clip_bytes, offset, f"clip {i} payload")
            clips[i] = np.frombuffer(payload, dtype="<f4").reshape(c, t, h, w)
            offset += clip_bytes
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after final clip", byte_offset=offset)
    return Dataset(clips=clips, labels=labels, splits=splits)


def expected_file_size(n, c, t, h, w) -> int:
    """Exact OFAD size: header plus per-clip metadata and payload."""
    return 4 + struct.calcsize("<HIHHHHH") + n * (3 + 4 * c * t * h * w)


def scaled(config: SyntheticConfig, **overrides) -> SyntheticConfig:
    """Copy of a config with fields replaced (convenience for tests/harness)."""
    return replace(config, **overrides)
