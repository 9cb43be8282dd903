"""Clip storage, preprocessing and the synthetic RGB-D task."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pnm import PNMError, read_pnm, write_pnm
from .rng import RngStream

CROP_MODES = ("random_per_frame", "same_region", "center")


class FormatError(ValueError):
    pass


@dataclass(eq=False)
class ClipPair:
    """Aligned RGB and depth frames.

    rgb: (n, H, W, 3) float64 in [0, 1]; depth: (n, H, W) in raw sensor units
    (uint16 when freshly read, float64 after resampling).
    """
    rgb: np.ndarray
    depth: np.ndarray
    label: int
    clip_id: str

    def __post_init__(self):
        if len(self.rgb) != len(self.depth):
            raise FormatError(f"clip {self.clip_id}: {len(self.rgb)} rgb frames vs {len(self.depth)} depth frames")
        if len(self.rgb) < 1:
            raise FormatError(f"clip {self.clip_id}: no frames")
        if self.rgb.shape[1:3] != self.depth.shape[1:3]:
            raise FormatError(f"clip {self.clip_id}: rgb frames {self.rgb.shape[1:3]} vs depth {self.depth.shape[1:3]}")

    def __len__(self) -> int:
        return len(self.rgb)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClipPair):
            return NotImplemented
        return (self.label == other.label and self.clip_id == other.clip_id
                and np.array_equal(self.rgb, other.rgb) and np.array_equal(self.depth, other.depth))


# ------------------------------------------------------------------ storage

def write_clip(clip: ClipPair, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, h, w = clip.depth.shape
    (path / "manifest.txt").write_text(
        f"id={clip.clip_id}\nlabel={clip.label}\nnum_frames={n}\nwidth={w}\nheight={h}\n")
    rgb8 = np.rint(np.clip(clip.rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    depth16 = np.asarray(clip.depth)
    if depth16.dtype != np.uint16:
        if not np.array_equal(depth16, np.rint(depth16)) or depth16.min() < 0 or depth16.max() > 65535:
            raise FormatError(f"clip {clip.clip_id}: depth values are not 16-bit integers")
        depth16 = depth16.astype(np.uint16)
    for i in range(n):
        write_pnm(path / f"rgb_{i:04d}.ppm", rgb8[i])
        write_pnm(path / f"depth_{i:04d}.pgm", depth16[i], maxval=65535)
    return path


def _parse_keyvalue(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"malformed line {line!r}")
        out[key.strip()] = value.strip()
    return out


def read_clip(path) -> ClipPair:
    path = Path(path)
    meta = _parse_keyvalue((path / "manifest.txt").read_text())
    fields = {}
    for key in ("id", "label", "num_frames", "width", "height"):
        if key not in meta:
            raise FormatError(f"{path}: manifest is missing field {key!r}")
        if key == "id":
            fields[key] = meta[key]
            continue
        try:
            fields[key] = int(meta[key])
        except ValueError:
            raise FormatError(f"{path}: field {key!r} is not an integer: {meta[key]!r}") from None
    n = fields["num_frames"]
    rgb_files = sorted(path.glob("rgb_*.ppm"))
    depth_files = sorted(path.glob("depth_*.pgm"))
    if len(rgb_files) != len(depth_files):
        raise FormatError(f"{path}: {len(rgb_files)} rgb files but {len(depth_files)} depth files")
    if len(rgb_files) != n:
        raise FormatError(f"{path}: num_frames={n} but found {len(rgb_files)} rgb files")
    rgb, depth = [], []
    shape = (fields["height"], fields["width"])
    for i in range(n):
        try:
            im = read_pnm(path / f"rgb_{i:04d}.ppm")
            dm = read_pnm(path / f"depth_{i:04d}.pgm")
        except (PNMError, FileNotFoundError) as exc:
            raise FormatError(f"{path}: frame {i}: {exc}") from None
        if im.ndim != 3 or dm.ndim != 2:
            raise FormatError(f"{path}: frame {i}: rgb must be P6 and depth P5")
        if im.shape[:2] != shape or dm.shape != shape:
            raise FormatError(f"{path}: frame {i}: size does not match width/height {shape[::-1]}")
        rgb.append(im.astype(np.float64) / 255.0)
        depth.append(dm.astype(np.uint16))
    return ClipPair(np.stack(rgb), np.stack(depth), fields["label"], fields["id"])


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: int
    split: str


def write_manifest(path, entries: list[ManifestEntry], comment: str | None = None) -> None:
    path = Path(path)
    lines = [f"# {comment}"] if comment else []
    for e in entries:
        rel = e.path.relative_to(path.parent) if e.path.is_absolute() else e.path
        lines.append(f"{rel.as_posix()}\t{e.label}\t{e.split}")
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected clip-path<TAB>label<TAB>split")
        try:
            label = int(parts[1])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: label {parts[1]!r} is not an integer") from None
        out.append(ManifestEntry(path.parent / parts[0], label, parts[2].strip()))
    return out


def manifest_num_classes(entries: list[ManifestEntry]) -> int:
    return max(e.label for e in entries) + 1


# ------------------------------------------------------------ preprocessing

def sample_indices(length: int, k: int) -> np.ndarray:
    """k indices spread evenly over [0, length-1], both ends included, rounded half up."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if length < 1:
        raise ValueError("cannot sample from an empty clip")
    if k == 1:
        return np.zeros(1, dtype=np.int64)
    pos = np.arange(k) * (length - 1) / (k - 1)
    return np.floor(pos + 0.5).astype(np.int64)


def sample_frames(clip: ClipPair, k: int) -> ClipPair:
    idx = sample_indices(len(clip), k)
    return ClipPair(clip.rgb[idx], clip.depth[idx], clip.label, clip.clip_id)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres; works on (H, W) or (H, W, C)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        x = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(x).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    y0, y1, wy = axis(h, out_h)
    x0, x1, wx = axis(w, out_w)
    extra = (None,) * (img.ndim - 2)
    wy = wy[(slice(None), None, *extra)]
    wx = wx[(None, slice(None), *extra)]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


@dataclass
class CropSpec:
    mode: str = "random_per_frame"
    resize_side: int = 64
    crop_side: int = 56

    def __post_init__(self):
        if self.mode not in CROP_MODES:
            raise ValueError(f"crop mode must be one of {CROP_MODES}, got {self.mode!r}")
        if self.crop_side > self.resize_side:
            raise ValueError(f"crop_side {self.crop_side} exceeds resize_side {self.resize_side}")


def resized_shape(h: int, w: int, side: int) -> tuple[int, int]:
    if h <= w:
        return side, max(side, int(round(w * side / h)))
    return max(side, int(round(h * side / w))), side


def crop_offsets(n: int, h: int, w: int, spec: CropSpec, rng: RngStream | None) -> np.ndarray:
    """(n, 2) array of (top, left) offsets for ``n`` frames of size h x w."""
    c = spec.crop_side
    if c > h or c > w:
        raise ValueError(f"crop side {c} exceeds frame extent {h}x{w}")
    if spec.mode == "center":
        return np.tile([(h - c) // 2, (w - c) // 2], (n, 1))
    if rng is None:
        raise ValueError(f"crop mode {spec.mode} needs an rng stream")
    draws = 1 if spec.mode == "same_region" else n
    tops = rng.integers(0, h - c + 1, size=draws)
    lefts = rng.integers(0, w - c + 1, size=draws)
    return np.broadcast_to(np.stack([tops, lefts], axis=1), (n, 2)).copy()


def crop(clip: ClipPair, spec: CropSpec, rng: RngStream | None = None) -> ClipPair:
    """Resize the shorter side to ``resize_side``, then cut a ``crop_side`` square per frame.

    Each RGB frame and its depth map get the same window.
    """
    n, h, w = clip.depth.shape
    rh, rw = resized_shape(h, w, spec.resize_side)
    offsets = crop_offsets(n, rh, rw, spec, rng)
    c = spec.crop_side
    rgb = np.empty((n, c, c, 3))
    depth = np.empty((n, c, c))
    for i, (top, left) in enumerate(offsets):
        window = (slice(top, top + c), slice(left, left + c))
        rgb[i] = resize_bilinear(clip.rgb[i], rh, rw)[window]
        depth[i] = resize_bilinear(clip.depth[i], rh, rw)[window]
    return ClipPair(rgb, depth, clip.label, clip.clip_id)


def preprocess_depth(frame: np.ndarray) -> np.ndarray:
    """Min-max normalize one depth map to [0, 1] and replicate it to (H, W, 3)."""
    d = np.asarray(frame, dtype=np.float64)
    lo, hi = d.min(), d.max()
    norm = np.zeros_like(d) if hi == lo else (d - lo) / (hi - lo)
    return np.repeat(norm[..., None], 3, axis=-1)


def to_model_inputs(clip: ClipPair) -> tuple[np.ndarray, np.ndarray]:
    """Channel-first (k, 3, H, W) arrays for the RGB and depth streams, rescaled to [-1, 1]."""
    rgb = clip.rgb.transpose(0, 3, 1, 2)
    depth = np.stack([preprocess_depth(d) for d in clip.depth]).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(2.0 * rgb - 1.0), np.ascontiguousarray(2.0 * depth - 1.0)


def prepare_clip(clip: ClipPair, k: int, spec: CropSpec, rng: RngStream | None = None):
    """sample -> crop -> depth normalization, returning model-ready arrays."""
    return to_model_inputs(crop(sample_frames(clip, k), spec, rng))


# ---------------------------------------------------------------- synthetic

@dataclass
class SynthConfig:
    textures: int = 2
    motions: int = 2
    clips_per_class: int = 10
    frames: int = 16
    side: int = 64
    test_fraction: float = 1 / 3
    seed: int = 0

    def __post_init__(self):
        for name in ("textures", "motions", "clips_per_class", "frames"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.side < 16:
            raise ValueError(f"side must be >= 16, got {self.side}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")

    @property
    def num_classes(self) -> int:
        return self.textures * self.motions


def class_label(texture: int, motion: int, motions: int) -> int:
    return texture * motions + motion


DEPTH_NEAR, DEPTH_FAR = 500.0, 3500.0
SUBJECT_LO, SUBJECT_HI = 1000.0, 3000.0


def _texture_patch(texture: int, textures: int, q: int) -> np.ndarray:
    hue = texture / textures
    light = np.array(colorsys.hsv_to_rgb(hue, 0.8, 0.9))
    dark = np.array(colorsys.hsv_to_rgb(hue, 0.8, 0.4))
    idx = np.arange(q) // 2 % 2
    stripes = idx[:, None] if texture % 2 == 0 else idx[None, :]
    stripes = np.broadcast_to(stripes, (q, q))
    return np.where(stripes[..., None] == 1, dark, light)


def render_clip(texture: int, motion: int, cfg: SynthConfig, rng: RngStream):
    """Render one clip of a textured square drifting in front of a wall.

    RGB shows the texture; the square's size never changes, so RGB is blind to
    how far away it is. Depth shows the square as a flat patch whose distance
    ramps within a band chosen by ``motion``. Every draw from ``rng`` happens in
    the same order whatever ``motion`` is, so clips that differ only in motion
    share their RGB frames exactly.
    """
    s, n = cfg.side, cfg.frames
    q = max(4, s // 4)
    start = rng.uniform(0, s - q, size=2)
    velocity = rng.uniform(-1.0, 1.0, size=2) * s / (2.0 * max(n - 1, 1))
    direction = 1.0 if rng.random() < 0.5 else -1.0
    rgb_noise = rng.normal(0.0, 0.03, size=(n, s, s, 3))
    depth_noise = rng.normal(0.0, 8.0, size=(n, s, s))

    span = s - q
    pos = start[None, :] + velocity[None, :] * np.arange(n)[:, None]
    # reflect off the borders
    pos = np.abs((pos + span) % (2 * span) - span) if span > 0 else np.zeros_like(pos)
    pos = np.rint(pos).astype(np.int64)

    patch = _texture_patch(texture, cfg.textures, q)
    rgb = np.full((n, s, s, 3), 0.35) + rgb_noise
    # far wall with a near floor strip along the bottom; the strip pins the
    # per-frame depth range so the subject's normalized depth is comparable
    scene = np.full((s, s), DEPTH_FAR)
    scene[s - max(2, s // 4):] = DEPTH_NEAR
    depth = scene[None] + depth_noise

    band = (SUBJECT_HI - SUBJECT_LO) / cfg.motions
    centre = SUBJECT_LO + band * (motion + 0.5)
    ramp = np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)
    subject_depth = centre + direction * 0.3 * band * ramp
    for f, (y, x) in enumerate(pos):
        rgb[f, y:y + q, x:x + q] = patch + rgb_noise[f, y:y + q, x:x + q]
        depth[f, y:y + q, x:x + q] = subject_depth[f] + depth_noise[f, y:y + q, x:x + q]

    rgb8 = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    depth16 = np.clip(np.rint(depth), 0, 65535).astype(np.uint16)
    return rgb8, depth16


def generate_synthetic_dataset(cfg: SynthConfig, out_dir) -> Path:
    """Write every clip plus ``manifest.tsv``; returns the manifest path.

    Labels enumerate (texture, motion) pairs. The last ``test_fraction`` of
    each class's clips form the test split.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_test = int(round(cfg.clips_per_class * cfg.test_fraction))
    entries = []
    for texture in range(cfg.textures):
        for motion in range(cfg.motions):
            label = class_label(texture, motion, cfg.motions)
            for j in range(cfg.clips_per_class):
                index = label * cfg.clips_per_class + j
                rgb8, depth16 = render_clip(texture, motion, cfg, RngStream(cfg.seed, f"synthetic/{index}"))
                clip_id = f"c{label:02d}_{j:04d}"
                clip = ClipPair(rgb8.astype(np.float64) / 255.0, depth16, label, clip_id)
                write_clip(clip, out / f"clip_{clip_id}")
                split = "test" if j >= cfg.clips_per_class - n_test else "train"
                entries.append(ManifestEntry(Path(f"clip_{clip_id}"), label, split))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, entries,
                   comment=f"classes={cfg.num_classes} textures={cfg.textures} motions={cfg.motions}")
    return manifest

