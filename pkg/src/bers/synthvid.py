"""Deterministic synthetic action clips and the ``.bvds`` dataset container.

Motion classes are the direction a textured object travels (4 cardinal or 8
compass directions, at ``speed`` px/frame, wrapping around the frame).
Static classes are the object's shape with no motion at all.  Object colour,
texture, size, start position and background level are drawn per clip, so
in a motion dataset the only class-consistent signal is the motion itself.

Every clip is rendered from ``np.random.default_rng([seed, clip_id])`` and
stored as 8-bit intensities, which makes file roundtrips exact.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, IntegrityError, SpecError

KINDS = ("motion", "static", "mixed")
DIRECTIONS8 = ("east", "northeast", "north", "northwest", "west", "southwest", "south", "southeast")
STATIC_SHAPES = ("square", "disc", "diamond", "cross", "ring", "hbar", "vbar", "triangle")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "motion"
    num_classes: int = 8
    clips_per_class: int = 64
    frames: int = 8
    height: int = 32
    width: int = 32
    size_min: int = 8
    size_max: int = 12
    noise: float = 0.05
    speed: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.clips_per_class < 1:
            raise SpecError("clips_per_class must be >= 1")
        if self.frames < 2:
            raise SpecError("clips need at least 2 frames")
        if not 1 <= self.size_min <= self.size_max:
            raise SpecError("need 1 <= size_min <= size_max")
        if self.size_max > min(self.height, self.width):
            raise SpecError(f"object size {self.size_max} exceeds frame {self.height}x{self.width}")
        if not 0 <= self.noise < 0.5:
            raise SpecError("noise amplitude must lie in [0, 0.5)")
        if self.speed < 1:
            raise SpecError("speed must be >= 1 px/frame")
        km, ks = self.class_split
        if self.kind == "motion" and km not in (4, 8):
            raise SpecError("motion datasets need 4 or 8 classes")
        if not 0 <= ks <= len(STATIC_SHAPES) or (self.kind != "motion" and ks < 1):
            raise SpecError(f"static part needs 1..{len(STATIC_SHAPES)} classes, got {ks}")

    @property
    def class_split(self) -> tuple[int, int]:
        """(motion classes, static classes); motion labels come first."""
        if self.kind == "motion":
            return self.num_classes, 0
        if self.kind == "static":
            return 0, self.num_classes
        km = 8 if self.num_classes > 8 else 4
        return km, self.num_classes - km

    @property
    def num_clips(self) -> int:
        return self.num_classes * self.clips_per_class

    def class_names(self) -> list[str]:
        km, ks = self.class_split
        step = 8 // km if km else 1
        return [DIRECTIONS8[i * step] for i in range(km)] + list(STATIC_SHAPES[:ks])

    def velocity(self, label: int) -> tuple[float, float]:
        """(vx, vy) in px/frame, image y pointing down; zero for static classes."""
        km, _ = self.class_split
        if label >= km:
            return (0.0, 0.0)
        angle = 2 * np.pi * label / km
        return (self.speed * np.cos(angle), -self.speed * np.sin(angle))


@dataclass
class LabeledClip:
    frames: np.ndarray
    """``[T, H, W, 3]`` uint8."""
    label: int
    clip_id: int

    @property
    def clip(self) -> np.ndarray:
        """Float RGB clip in [0, 1]."""
        return self.frames.astype(np.float64) / 255.0


@dataclass
class Dataset:
    spec: DatasetSpec
    clips: list[LabeledClip]
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    """Split name -> indices into ``clips``."""

    def __len__(self) -> int:
        return len(self.clips)

    def subset(self, split: str) -> list[LabeledClip]:
        if split == "all":
            return list(self.clips)
        if split not in self.splits:
            raise DataError(f"unknown split {split!r}")
        return [self.clips[i] for i in self.splits[split]]

    def labels(self, split: str = "all") -> np.ndarray:
        return np.array([c.label for c in self.subset(split)], dtype=np.int64)

    def rgb_batch(self, clips: list[LabeledClip]) -> np.ndarray:
        """``[N, 3, T, H, W]`` float batch in the student's layout."""
        return np.stack([c.frames for c in clips]).transpose(0, 4, 1, 2, 3) / 255.0


# ------------------------------------------------------------------ render


def _wrap(d: np.ndarray, period: int) -> np.ndarray:
    return (d + period / 2) % period - period / 2


def _coverage(shape: str, dx: np.ndarray, dy: np.ndarray, size: float) -> np.ndarray:
    """Anti-aliased object coverage in [0, 1] at offsets (dx, dy) from its centre."""
    r = size / 2

    def edge(dist):
        return np.clip(r + 0.5 - dist, 0.0, 1.0)

    ax, ay = np.abs(dx), np.abs(dy)
    if shape == "square":
        return np.clip(r + 0.5 - ax, 0, 1) * np.clip(r + 0.5 - ay, 0, 1)
    if shape == "disc":
        return edge(np.hypot(dx, dy))
    if shape == "diamond":
        return edge(ax + ay)
    if shape == "cross":
        arm = r / 3
        bar_h = np.clip(r + 0.5 - ax, 0, 1) * np.clip(arm + 0.5 - ay, 0, 1)
        bar_v = np.clip(arm + 0.5 - ax, 0, 1) * np.clip(r + 0.5 - ay, 0, 1)
        return np.maximum(bar_h, bar_v)
    if shape == "ring":
        dist = np.hypot(dx, dy)
        return edge(dist) * np.clip(dist - r * 0.5 + 0.5, 0, 1)
    if shape == "hbar":
        return np.clip(r + 0.5 - ax, 0, 1) * np.clip(r / 2.5 + 0.5 - ay, 0, 1)
    if shape == "vbar":
        return np.clip(r / 2.5 + 0.5 - ax, 0, 1) * np.clip(r + 0.5 - ay, 0, 1)
    if shape == "triangle":
        # apex up; inside when below both slanted edges and above the base
        base = np.clip(r + 0.5 - dy, 0, 1)
        slant = np.clip((dy + r) * 0.5 + 0.5 - ax, 0, 1)
        return base * slant * np.clip(r + 0.5 + dy, 0, 1)
    raise SpecError(f"unknown shape {shape!r}")


@dataclass
class ClipLayout:
    """Per-clip random draws, enough to re-render the clip or its object mask."""

    shape: str
    size: float
    start: tuple[float, float]
    velocity: tuple[float, float]
    background: np.ndarray
    color: np.ndarray
    waves: np.ndarray
    """``[k, 4]`` rows of (kx, ky, phase, amplitude)."""


def _layout(spec: DatasetSpec, clip_id: int, label: int, rng: np.random.Generator) -> ClipLayout:
    km, _ = spec.class_split
    if label < km:
        shape = ("square", "disc")[int(rng.integers(2))]
    else:
        shape = STATIC_SHAPES[label - km]
    size = float(rng.integers(spec.size_min, spec.size_max + 1))
    start = (float(rng.uniform(0, spec.width)), float(rng.uniform(0, spec.height)))
    background = rng.uniform(0.25, 0.75, size=3)
    contrast = rng.uniform(0.2, 0.4) * (1 if rng.random() < 0.5 else -1)
    color = np.clip(background + contrast + rng.uniform(-0.05, 0.05, size=3), 0.05, 0.95)
    k = 3
    freqs = rng.uniform(2 * np.pi / 6, 2 * np.pi / 3, size=k)
    angles = rng.uniform(0, 2 * np.pi, size=k)
    waves = np.stack(
        [freqs * np.cos(angles), freqs * np.sin(angles), rng.uniform(0, 2 * np.pi, size=k), np.full(k, 0.12)],
        axis=1,
    )
    return ClipLayout(shape, size, start, spec.velocity(label), background, color, waves)


def _centre(spec: DatasetSpec, lay: ClipLayout, t: int) -> tuple[float, float]:
    return (lay.start[0] + lay.velocity[0] * t, lay.start[1] + lay.velocity[1] * t)


def _offsets(spec: DatasetSpec, lay: ClipLayout, t: int) -> tuple[np.ndarray, np.ndarray]:
    cx, cy = _centre(spec, lay, t)
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    return _wrap(xx - cx, spec.width), _wrap(yy - cy, spec.height)


def render_clip(spec: DatasetSpec, clip_id: int, label: int) -> np.ndarray:
    """``[T, H, W, 3]`` uint8 frames for one clip."""
    rng = np.random.default_rng([spec.seed, clip_id])
    lay = _layout(spec, clip_id, label, rng)
    levels = int(np.floor(spec.noise * 255))
    out = np.empty((spec.frames, spec.height, spec.width, 3), dtype=np.uint8)
    for t in range(spec.frames):
        dx, dy = _offsets(spec, lay, t)
        alpha = _coverage(lay.shape, dx, dy, lay.size)[..., None]
        pattern = sum(a * np.sin(kx * dx + ky * dy + ph) for kx, ky, ph, a in lay.waves)
        texture = np.clip(lay.color + pattern[..., None], 0, 1)
        clean = alpha * texture + (1 - alpha) * lay.background
        base = np.round(clean * 255).astype(np.int16)
        noise = rng.integers(-levels, levels + 1, size=base.shape, dtype=np.int16)
        out[t] = np.clip(base + noise, 0, 255).astype(np.uint8)
    return out


def object_masks(spec: DatasetSpec, clip_id: int, label: int) -> np.ndarray:
    """``[T, H, W]`` float object coverage, matching :func:`render_clip`."""
    lay = _layout(spec, clip_id, label, np.random.default_rng([spec.seed, clip_id]))
    return np.stack([_coverage(lay.shape, *_offsets(spec, lay, t), lay.size) for t in range(spec.frames)])


def motion_mask(spec: DatasetSpec, clip_id: int, label: int, threshold: float = 0.99) -> np.ndarray:
    """``[T-1, H, W]`` bool: interior object pixels whose displacement stays in frame.

    Where the object wraps around, its next-frame position is on the far side
    of the image and the true displacement is not a flow vector.
    """
    masks = object_masks(spec, clip_id, label)[:-1] > threshold
    vx, vy = spec.velocity(label)
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
    inside = (xx + vx >= 0) & (xx + vx <= spec.width - 1) & (yy + vy >= 0) & (yy + vy <= spec.height - 1)
    return masks & inside


def clip_layout(spec: DatasetSpec, clip_id: int, label: int) -> ClipLayout:
    return _layout(spec, clip_id, label, np.random.default_rng([spec.seed, clip_id]))


def assign_splits(spec: DatasetSpec, labels: np.ndarray) -> dict[str, np.ndarray]:
    """Stratified 70/15/15 split, shuffled per class by the dataset seed."""
    rng = np.random.default_rng([spec.seed, 0x5EED])
    parts: dict[str, list[int]] = {s: [] for s in SPLITS}
    for c in range(spec.num_classes):
        members = np.flatnonzero(labels == c)
        members = members[rng.permutation(len(members))]
        n = len(members)
        n_train = int(round(0.70 * n))
        n_val = int(round(0.15 * n))
        parts["train"].extend(members[:n_train])
        parts["val"].extend(members[n_train : n_train + n_val])
        parts["test"].extend(members[n_train + n_val :])
    return {s: np.array(sorted(v), dtype=np.int64) for s, v in parts.items()}


def generate(spec: DatasetSpec) -> Dataset:
    clips = []
    for label in range(spec.num_classes):
        for j in range(spec.clips_per_class):
            cid = label * spec.clips_per_class + j
            clips.append(LabeledClip(render_clip(spec, cid, label), label, cid))
    labels = np.array([c.label for c in clips])
    return Dataset(spec, clips, assign_splits(spec, labels))


def luminance(clip: np.ndarray) -> np.ndarray:
    """``[T, H, W, 3]`` RGB in [0, 1] to ``[T, H, W]`` grey frames."""
    from .flow import luminance as _lum

    return _lum(clip)


# ---------------------------------------------------------------- .bvds I/O

BVDS_MAGIC = b"BVDS"
BVDS_VERSION = 1
_SPEC = struct.Struct("<BHIHHHHHddq")
_CLIP_HEAD = struct.Struct("<IH")


def _pack_spec(spec: DatasetSpec) -> bytes:
    return _SPEC.pack(
        KINDS.index(spec.kind), spec.num_classes, spec.clips_per_class, spec.frames, spec.height,
        spec.width, spec.size_min, spec.size_max, spec.noise, spec.speed, spec.seed,
    )


def _unpack_spec(blob: bytes) -> DatasetSpec:
    kind, k, cpc, t, h, w, smin, smax, noise, speed, seed = _SPEC.unpack(blob)
    if kind >= len(KINDS):
        raise FormatError(f"unknown dataset kind code {kind}")
    return DatasetSpec(KINDS[kind], k, cpc, t, h, w, smin, smax, noise, speed, seed)


def encode_dataset(ds: Dataset) -> bytes:
    spec = ds.spec
    body = bytearray(struct.pack("<I", len(ds.clips)))
    for c in ds.clips:
        if c.frames.shape != (spec.frames, spec.height, spec.width, 3) or c.frames.dtype != np.uint8:
            raise DataError(f"clip {c.clip_id} does not match the dataset spec")
        body += _CLIP_HEAD.pack(c.clip_id, c.label)
        body += c.frames.tobytes()
    packed = _pack_spec(spec)
    # The checksum covers the spec block as well as the clips.
    crc = zlib.crc32(bytes(body), zlib.crc32(packed))
    return BVDS_MAGIC + bytes([BVDS_VERSION]) + packed + struct.pack("<I", crc) + bytes(body)


def decode_dataset(blob: bytes) -> Dataset:
    head = 5 + _SPEC.size + 4
    if len(blob) < head + 4:
        raise IntegrityError("truncated .bvds header")
    if blob[:4] != BVDS_MAGIC:
        raise FormatError(f"bad .bvds magic {blob[:4]!r}")
    if blob[4] != BVDS_VERSION:
        raise FormatError(f"unsupported .bvds version {blob[4]}")
    (crc,) = struct.unpack_from("<I", blob, 5 + _SPEC.size)
    body = blob[head:]
    if zlib.crc32(body, zlib.crc32(blob[5 : 5 + _SPEC.size])) != crc:
        raise IntegrityError(".bvds checksum mismatch (corrupt or truncated file)")
    spec = _unpack_spec(blob[5 : 5 + _SPEC.size])
    (count,) = struct.unpack_from("<I", body, 0)
    frame_bytes = spec.frames * spec.height * spec.width * 3
    if len(body) != 4 + count * (_CLIP_HEAD.size + frame_bytes):
        raise IntegrityError(".bvds body length does not match its clip count")
    clips, off = [], 4
    shape = (spec.frames, spec.height, spec.width, 3)
    for _ in range(count):
        cid, label = _CLIP_HEAD.unpack_from(body, off)
        off += _CLIP_HEAD.size
        frames = np.frombuffer(body, dtype=np.uint8, count=frame_bytes, offset=off).reshape(shape).copy()
        off += frame_bytes
        clips.append(LabeledClip(frames, label, cid))
    labels = np.array([c.label for c in clips])
    return Dataset(spec, clips, assign_splits(spec, labels))


def write_dataset(path, ds: Dataset) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def read_dataset(path) -> Dataset:
    return decode_dataset(Path(path).read_bytes())


def dataset_checksum(path) -> int:
    return zlib.crc32(Path(path).read_bytes())
