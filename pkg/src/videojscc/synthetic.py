"""Procedural video clips for desk-scale experiments and tests.

Each clip is a smooth colored background under a slow global pan with a few
textured blobs moving on top, quantized to 8-bit values.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .video import ClipEntry, DatasetManifest, save_clip, write_manifest


def _smooth_field(rng: np.random.Generator, h: int, w: int, terms: int = 4, max_freq: float = 2.5):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((h, w, 3))
    for _ in range(terms):
        fy, fx = rng.uniform(-max_freq, max_freq, 2) / max(h, w)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(20, 50, 3) * rng.choice([-1, 1], 3)
        out += amp * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)[..., None]
    return out


def make_clip(num_frames: int, hw=(64, 64), rng: np.random.Generator | None = None, blobs: int = 3, max_speed: float = 1.5):
    """Return ``(num_frames, H, W, 3)`` float32 frames with integer values in [0, 255]."""
    rng = np.random.default_rng() if rng is None else rng
    h, w = hw
    margin = int(np.ceil(max_speed * num_frames)) + 2
    canvas = _smooth_field(rng, h + 2 * margin, w + 2 * margin) + rng.uniform(80, 170, 3)
    pan = rng.uniform(-max_speed, max_speed, 2) * 0.5
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    specs = []
    for _ in range(blobs):
        specs.append(
            dict(
                center=rng.uniform([0.2 * h, 0.2 * w], [0.8 * h, 0.8 * w]),
                vel=rng.uniform(-max_speed, max_speed, 2),
                radii=rng.uniform(0.08, 0.2, 2) * np.array([h, w]),
                color=rng.uniform(0, 255, 3),
                stripe=rng.uniform(0.15, 0.5),
                angle=rng.uniform(0, np.pi),
            )
        )

    frames = np.empty((num_frames, h, w, 3), np.float32)
    for f in range(num_frames):
        oy, ox = margin + pan * f
        iy, ix = int(np.floor(oy)), int(np.floor(ox))
        ty, tx = oy - iy, ox - ix
        # bilinear pan on the oversized canvas
        win = lambda dy, dx: canvas[iy + dy : iy + dy + h, ix + dx : ix + dx + w]
        img = (1 - ty) * ((1 - tx) * win(0, 0) + tx * win(0, 1)) + ty * ((1 - tx) * win(1, 0) + tx * win(1, 1))
        for b in specs:
            cy, cx = b["center"] + b["vel"] * f
            dy, dx = (yy - cy) / b["radii"][0], (xx - cx) / b["radii"][1]
            alpha = 1.0 / (1.0 + np.exp(8.0 * (np.sqrt(dy**2 + dx**2) - 1.0)))
            u = (xx - cx) * np.cos(b["angle"]) + (yy - cy) * np.sin(b["angle"])
            tex = b["color"] * (0.75 + 0.25 * np.sin(b["stripe"] * u))[..., None]
            img = img * (1 - alpha[..., None]) + tex * alpha[..., None]
        frames[f] = np.clip(np.rint(img), 0, 255)
    return frames


def make_corpus(root, num_clips: int, num_frames: int, hw=(64, 64), seed: int = 0) -> DatasetManifest:
    """Write ``num_clips`` clips as PNG directories plus an unsplit manifest."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    entries = []
    for c in range(num_clips):
        d = save_clip(make_clip(num_frames, hw, rng), root / f"clip_{c:03d}")
        entries.append(ClipEntry(str(d), num_frames))
    manifest = DatasetManifest(entries)
    write_manifest(manifest, root / "manifest.txt")
    return manifest
