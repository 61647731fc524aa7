"""Frame ingestion, GoP segmentation, interpolation order and dataset splits."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".bmp", ".ppm", ".tif", ".tiff")
SPLITS = ("train", "val", "test")


@dataclass
class VideoSequence:
    """A clip as a bootstrap frame followed by whole GoPs.

    ``frames`` has shape ``(1 + T * N, H, W, 3)`` with float32 values in
    [0, 255]. GoP ``n`` owns ``frames[1 + n N : 1 + (n + 1) N]``; its last
    frame is the key frame and its reference is ``frames[n N]``.
    """

    frames: np.ndarray
    gop_size: int
    dropped: int = 0
    name: str = ""

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be (F, H, W, 3), got {self.frames.shape}")
        if (self.frames.shape[0] - 1) % self.gop_size:
            raise ValueError("frame count must be 1 + a multiple of the GoP size")

    @property
    def bootstrap_frame(self) -> np.ndarray:
        return self.frames[0]

    @property
    def num_gops(self) -> int:
        return (self.frames.shape[0] - 1) // self.gop_size

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def gop(self, n: int) -> np.ndarray:
        start = 1 + n * self.gop_size
        return self.frames[start : start + self.gop_size]

    @property
    def gops(self) -> list[np.ndarray]:
        return [self.gop(n) for n in range(self.num_gops)]

    def reference_index(self, n: int) -> int:
        """Global index of GoP ``n``'s reference frame (previous key, or the bootstrap)."""
        return n * self.gop_size

    def key_index(self, n: int) -> int:
        return (n + 1) * self.gop_size

    def window(self, start: int, gops: int) -> "VideoSequence":
        """Sub-clip of ``gops`` GoPs from GoP ``start``, led by that GoP's reference frame."""
        if not (0 <= start and gops > 0 and start + gops <= self.num_gops):
            raise ValueError(f"window of {gops} GoPs at {start} exceeds {self.num_gops} GoPs")
        n = self.gop_size
        return replace(self, frames=self.frames[start * n : (start + gops) * n + 1].copy())

    def crop(self, top: int, left: int, height: int, width: int) -> "VideoSequence":
        return replace(self, frames=self.frames[:, top : top + height, left : left + width].copy())

    def random_crop(self, hw: tuple[int, int], rng: np.random.Generator) -> "VideoSequence":
        h, w = self.shape
        ch, cw = hw
        if ch > h or cw > w:
            raise ValueError(f"crop {hw} larger than frame {(h, w)}")
        return self.crop(int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)), ch, cw)


def segment(frames: np.ndarray, gop_size: int, name: str = "") -> VideoSequence:
    """Keep the bootstrap frame plus as many whole GoPs as fit; drop the tail."""
    count = frames.shape[0]
    if count < gop_size + 1:
        raise ValueError(f"need at least {gop_size + 1} frames for GoP size {gop_size}, got {count}")
    gops = (count - 1) // gop_size
    keep = 1 + gops * gop_size
    return VideoSequence(frames[:keep], gop_size, dropped=count - keep, name=name)


def list_frame_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_clip(directory, gop_size: int = 4, entry: "ClipEntry | None" = None) -> VideoSequence:
    """Read a directory of same-sized frame images (lexicographic order)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"clip directory not found: {directory}")
    files = list_frame_files(directory)
    if entry is not None and entry.num_frames != len(files):
        logger.warning("manifest lists %d frames for %s, found %d", entry.num_frames, directory, len(files))
    arrays = []
    for f in files:
        with Image.open(f) as im:
            arrays.append(np.asarray(im.convert("RGB"), dtype=np.float32))
    if arrays and any(a.shape != arrays[0].shape for a in arrays):
        raise ValueError(f"inconsistent frame dimensions in {directory}")
    frames = np.stack(arrays) if arrays else np.zeros((0, 1, 1, 3), np.float32)
    return segment(frames, gop_size, name=directory.name)


def save_clip(frames: np.ndarray, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        Image.fromarray(np.clip(np.rint(f), 0, 255).astype(np.uint8)).save(directory / f"{i:05d}.png")
    return directory


def interpolation_schedule(gop_size: int) -> list[tuple[int, int]]:
    """Dyadic (frame index, offset) order; references are ``i - t`` and ``i + t``.

    Index 0 is the previous GoP's key frame and index ``gop_size`` is this
    GoP's key frame, both available before any interpolation.
    """
    n = gop_size
    if n < 1 or n & (n - 1):
        raise ValueError(f"GoP size must be a power of 2, got {gop_size}")
    order = []
    t = n // 2
    while t >= 1:
        order.extend((i, t) for i in range(t, n, 2 * t))
        t //= 2
    return order


@dataclass
class ClipEntry:
    path: str
    num_frames: int
    split: str = "none"


@dataclass
class DatasetManifest:
    clips: list[ClipEntry] = field(default_factory=list)
    split_seed: int | None = None

    def split(self, name: str) -> list[ClipEntry]:
        return [c for c in self.clips if c.split == name]

    def counts(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}


def read_manifest(path) -> DatasetManifest:
    """Parse ``<clip_dir> <num_frames> <split>`` lines; relative dirs resolve against the manifest."""
    path = Path(path)
    clips = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise ValueError(f"{path}:{lineno}: expected '<clip_dir> <num_frames> <split>'")
        clip = Path(parts[0])
        if not clip.is_absolute():
            clip = path.parent / clip
        clips.append(ClipEntry(str(clip), int(parts[1]), parts[2] if len(parts) == 3 else "none"))
    return DatasetManifest(clips)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    lines = []
    for c in manifest.clips:
        p = Path(c.path)
        try:
            p = p.relative_to(path.parent)
        except ValueError:
            pass
        lines.append(f"{p} {c.num_frames} {c.split}")
    path.write_text("\n".join(lines) + "\n")


def split_dataset(manifest: DatasetManifest, seed: int, ratios=(0.8, 0.1, 0.1)) -> DatasetManifest:
    """Assign train/val/test by clip count with a seeded shuffle."""
    n = len(manifest.clips)
    if n < 10:
        raise ValueError(f"need at least 10 clips to populate all splits, got {n}")
    n_train = round(ratios[0] * n)
    n_val = max(1, round(ratios[1] * n))
    order = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=object)
    labels[order[:n_train]] = "train"
    labels[order[n_train : n_train + n_val]] = "val"
    labels[order[n_train + n_val :]] = "test"
    clips = [replace(c, split=str(lab)) for c, lab in zip(manifest.clips, labels)]
    return DatasetManifest(clips, split_seed=seed)


def load_split(manifest: DatasetManifest, split: str, gop_size: int) -> list[VideoSequence]:
    return [load_clip(c.path, gop_size, c) for c in manifest.split(split)]
