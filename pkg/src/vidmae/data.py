"""Synthetic moving-object video clips and raw clip file I/O.

Clips are a textured static background with one or more textured
rectangles translating in a fixed direction, wrapping at the borders, so
the per-frame support of every object (the motion mask) is known exactly.
Long videos are sequences of such clips grouped into contiguous phases,
each phase with its own motion direction and texture signature.

On-disk raw clip format (RAWCLIP, bit-exact):

    magic   4 bytes  b"RAWC"
    version 1 byte   0x01
    T,C,H,W u32 little-endian each
    payload T*C*H*W bytes, u8, frame-major then channel, row-major pixels

A long-video manifest is JSON lines, one object per clip:
``{"path": ..., "label": ..., "video_id": ..., "index": ...}`` with paths
relative to the manifest file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

MOTION_CLASSES = ("left", "right", "up", "down", "static")

_DIRECTIONS = {
    "left": (0, -1),
    "right": (0, 1),
    "up": (-1, 0),
    "down": (1, 0),
    "static": (0, 0),
}

_MAGIC = b"RAWC"
_VERSION = 1
_HEADER = struct.Struct("<4sB4I")


@dataclass
class VideoClip:
    """A clip as a (frames, 3, height, width) float grid in [0, 1]."""

    values: np.ndarray
    motion_mask: np.ndarray | None = None
    label: int | None = None

    @property
    def frames(self):
        return self.values.shape[0]

    @property
    def height(self):
        return self.values.shape[2]

    @property
    def width(self):
        return self.values.shape[3]

    def validate(self):
        if self.values.ndim != 4 or self.values.shape[1] != 3:
            raise ConfigError(f"clip values must be (T, 3, H, W), got {self.values.shape}")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ConfigError("clip values must lie in [0, 1]")
        if self.motion_mask is not None:
            expect = (self.frames, self.height, self.width)
            if self.motion_mask.shape != expect:
                raise ConfigError(f"motion_mask shape {self.motion_mask.shape} != {expect}")
        return self


@dataclass
class LongVideo:
    """An ordered clip sequence with one phase label per clip."""

    clips: list[VideoClip]
    labels: list[int]
    video_id: str = "video"

    def __post_init__(self):
        if len(self.clips) != len(self.labels):
            raise ConfigError("one label per clip required")

    def __len__(self):
        return len(self.clips)


def _check_geometry(frames, height, width, patch):
    pt, ph, pw = patch
    if frames % 2 != 0:
        raise ConfigError(f"frame count must be even, got {frames}")
    if frames % pt or height % ph or width % pw:
        raise ConfigError(
            f"geometry {frames}x{height}x{width} not divisible by patch {pt}x{ph}x{pw}"
        )


def _smooth_noise(rng, height, width, cell=8):
    """Coarse random grid, bilinearly upsampled: a low-frequency texture."""
    gh, gw = height // cell + 2, width // cell + 2
    grid = rng.uniform(0.25, 0.75, size=(gh, gw))
    ys = np.arange(height) / cell
    xs = np.arange(width) / cell
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    v = (
        grid[y0][:, x0] * (1 - fy) * (1 - fx)
        + grid[y0 + 1][:, x0] * fy * (1 - fx)
        + grid[y0][:, x0 + 1] * (1 - fy) * fx
        + grid[y0 + 1][:, x0 + 1] * fy * fx
    )
    return v


def gen_moving_clip(
    seed,
    frames=16,
    height=64,
    width=64,
    n_objects=1,
    motion_class="left",
    patch=(2, 8, 8),
    texture_seed=None,
    object_size=None,
    speed=None,
):
    """Generate one clip with known per-frame object support.

    Objects translate ``speed`` pixels per frame in the ``motion_class``
    direction (1..3 px when unspecified), wrapping at the borders so they
    never stall. The background is drawn from ``texture_seed`` (derived
    from ``seed`` when absent), which lets callers share scenery across
    clips. Deterministic in all arguments.
    """
    if motion_class not in MOTION_CLASSES:
        raise ConfigError(f"unknown motion class {motion_class!r}")
    _check_geometry(frames, height, width, patch)

    rng = np.random.default_rng([seed, 101])
    tex_rng = np.random.default_rng([seed, 202] if texture_seed is None else [texture_seed, 202])

    base = _smooth_noise(tex_rng, height, width)
    tint = tex_rng.uniform(0.85, 1.15, size=3)
    background = np.clip(base[None, :, :] * tint[:, None, None], 0.0, 1.0)

    values = np.broadcast_to(background, (frames, 3, height, width)).copy()
    mask = np.zeros((frames, height, width), dtype=bool)

    dy, dx = _DIRECTIONS[motion_class]
    for _ in range(n_objects):
        size = int(object_size) if object_size is not None else int(rng.integers(8, 13))
        px_per_frame = 0 if motion_class == "static" else (
            int(speed) if speed is not None else int(rng.integers(1, 4))
        )
        tile = rng.uniform(0.0, 1.0, size=(3, size, size))
        # push tile brightness away from the mid-range background
        tile = np.clip(tile * 0.5 + (0.5 if rng.random() < 0.5 else 0.0), 0.0, 1.0)
        y = int(rng.integers(0, height))
        x = int(rng.integers(0, width))
        for f in range(frames):
            rows = (y + dy * px_per_frame * f + np.arange(size)) % height
            cols = (x + dx * px_per_frame * f + np.arange(size)) % width
            values[f][:, rows[:, None], cols[None, :]] = tile
            mask[f][rows[:, None], cols[None, :]] = True

    return VideoClip(values=values, motion_mask=mask, label=MOTION_CLASSES.index(motion_class))


def gen_long_video(
    seed,
    n_phases,
    clips_per_phase_range=(3, 5),
    frames=16,
    height=64,
    width=64,
    n_objects=1,
    patch=(2, 8, 8),
    video_id=None,
):
    """Generate a phase-structured long video.

    Each phase maps to a distinct (motion direction, texture) signature
    and contributes a contiguous run of clips labeled with the phase id.
    """
    if n_phases < 2:
        raise ConfigError(f"need at least 2 phases, got {n_phases}")
    lo, hi = clips_per_phase_range
    if lo < 1 or hi < lo:
        raise ConfigError(f"bad clips_per_phase_range {clips_per_phase_range}")

    rng = np.random.default_rng([seed, 303])
    clips, labels = [], []
    for phase in range(n_phases):
        texture = int(rng.integers(2**31))
        motion = MOTION_CLASSES[phase % 4]  # cycle through the moving classes
        count = int(rng.integers(lo, hi + 1))
        for _ in range(count):
            clip = gen_moving_clip(
                int(rng.integers(2**31)),
                frames=frames,
                height=height,
                width=width,
                n_objects=n_objects,
                motion_class=motion,
                patch=patch,
                texture_seed=texture,
            )
            clip.label = phase
            clips.append(clip)
            labels.append(phase)
    return LongVideo(clips=clips, labels=labels, video_id=video_id or f"video-{seed}")


# -- RAWCLIP files ----------------------------------------------------------


def write_raw_clip(clip, path):
    """Write u8-quantized clip values; motion mask / label are not stored."""
    t, c, h, w = clip.values.shape
    payload = np.round(clip.values * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, t, c, h, w))
        fh.write(payload.tobytes())


def read_raw_clip(path):
    """Read a RAWCLIP file back to unit-interval floats."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header: expected {_HEADER.size} bytes, got {len(raw)} (at byte {len(raw)})")
    magic, version, t, c, h, w = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte 0")
    if version != _VERSION:
        raise FormatError(f"unsupported version {version} at byte 4")
    expected = t * c * h * w
    actual = len(raw) - _HEADER.size
    if actual != expected:
        raise FormatError(
            f"payload length mismatch: expected {expected} bytes, got {actual} (at byte {_HEADER.size})"
        )
    values = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).astype(np.float64) / 255.0
    return VideoClip(values=values.reshape(t, c, h, w))


# -- manifests ----------------------------------------------------------------


def write_manifest(videos, out_dir, clip_dir="clips"):
    """Write one RAWCLIP per clip plus a manifest.jsonl; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / clip_dir).mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for video in videos:
            for index, (clip, label) in enumerate(zip(video.clips, video.labels)):
                rel = f"{clip_dir}/{video.video_id}-{index:04d}.rawclip"
                write_raw_clip(clip, out_dir / rel)
                fh.write(
                    json.dumps(
                        {"path": rel, "label": int(label), "video_id": video.video_id, "index": index}
                    )
                    + "\n"
                )
    return manifest


def read_manifest(path):
    """Load a manifest back into LongVideo objects (clip values only)."""
    path = Path(path)
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as err:
                raise FormatError(f"bad manifest line {line_no + 1}: {err}") from err
            rows.append(row)
    videos = {}
    for row in rows:
        clip = read_raw_clip(path.parent / row["path"])
        clip.label = int(row["label"])
        videos.setdefault(row["video_id"], []).append((int(row["index"]), clip))
    out = []
    for vid in sorted(videos):
        entries = sorted(videos[vid], key=lambda e: e[0])
        clips = [c for _, c in entries]
        out.append(LongVideo(clips=clips, labels=[c.label for c in clips], video_id=vid))
    return out


def flat_clips(videos):
    """All clips of a list of LongVideos, in order."""
    return [clip for video in videos for clip in video.clips]
