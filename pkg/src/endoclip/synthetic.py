"""Seeded synthetic endoscopy-like dataset.

Real endoscopy data is not redistributable, so tests and demos run on small
generated images whose geometry depends on the class: disks for nasal
cavities (side-dependent placement), diagonal stripes for ear canals, a dark
wedge for open vocal cords, a bright midline seam for closed ones, and
concentric rings for the throat. Per-sample jitter keeps members of a class
distinct while leaving them far easier to separate than real anatomy.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .data import DatasetManifest, ingest_manifest
from .objectives import CLASS_NAMES

DESCRIPTIONS = {
    "nose-right": "right nasal cavity with a round turbinate shape",
    "nose-left": "left nasal cavity with a round turbinate shape",
    "ear-right": "right ear canal with diagonal ridge texture",
    "ear-left": "left ear canal with rising ridge texture",
    "vc-open": "vocal cords fully open forming a dark wedge",
    "vc-closed": "vocal cords closed along a bright midline seam",
    "throat": "throat with concentric ring folds",
}

_BASE_COLORS = {
    "nose-right": (0.85, 0.35, 0.30),
    "nose-left": (0.85, 0.55, 0.25),
    "ear-right": (0.80, 0.75, 0.30),
    "ear-left": (0.35, 0.75, 0.35),
    "vc-open": (0.30, 0.75, 0.80),
    "vc-closed": (0.30, 0.40, 0.85),
    "throat": (0.75, 0.35, 0.75),
}


def _grid(size: int):
    ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    return ys.astype(np.float64), xs.astype(np.float64)


def _motif(class_name: str, size: int, rng: np.random.Generator) -> np.ndarray:
    ys, xs = _grid(size)
    mid = size / 2.0
    jitter = lambda s: rng.uniform(-s, s)
    if class_name in ("nose-right", "nose-left"):
        cx = mid + (size / 4.0 if class_name == "nose-right" else -size / 4.0) + jitter(2.0)
        cy = mid + jitter(2.0)
        radius = size / 5.0 + jitter(1.5)
        return ((ys - cy) ** 2 + (xs - cx) ** 2 <= radius ** 2).astype(np.float64)
    if class_name in ("ear-right", "ear-left"):
        period = size / 4.0 + jitter(0.5)
        phase = rng.uniform(0, period)
        diag = xs + ys if class_name == "ear-right" else xs - ys
        return 0.5 * (1.0 + np.sin(2.0 * np.pi * (diag + phase) / period))
    if class_name == "vc-open":
        apex = mid + jitter(2.0)
        half_width = (ys + 2.0) * (0.35 + 0.1 * rng.random())
        return 1.0 - (np.abs(xs - apex) <= half_width).astype(np.float64)
    if class_name == "vc-closed":
        seam = mid + jitter(2.0)
        width = 1.5 + rng.random()
        return (np.abs(xs - seam) <= width).astype(np.float64)
    # throat: concentric rings
    cy, cx = mid + jitter(1.5), mid + jitter(1.5)
    radius = np.sqrt((ys - cy) ** 2 + (xs - cx) ** 2)
    period = size / 5.0 + jitter(0.5)
    return 0.5 * (1.0 + np.cos(2.0 * np.pi * radius / period))


def render_image(class_name: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """One (3, size, size) float image in [0, 1] for the given class."""
    motif = _motif(class_name, size, rng)
    color = np.array(_BASE_COLORS[class_name])[:, None, None]
    gain = rng.uniform(0.85, 1.15)
    image = 0.18 + gain * color * motif[None, :, :] * 0.8
    image += rng.normal(0.0, 0.02, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def make_synthetic_dataset(root, per_class: int = 20, image_size: int = 32,
                           seed: int = 0) -> DatasetManifest:
    """Write PNGs plus a manifest under `root` and return the parsed manifest."""
    root = Path(root)
    image_dir = root / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    manifest_path = root / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for class_name in CLASS_NAMES:
            for i in range(per_class):
                image = render_image(class_name, image_size, rng)
                as_bytes = (image.transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
                rel = f"images/{class_name}_{i:03d}.png"
                Image.fromarray(as_bytes).save(root / rel)
                fh.write(_record_json(rel, class_name) + "\n")
    return ingest_manifest(manifest_path)


def _record_json(rel_path: str, class_name: str) -> str:
    import json

    return json.dumps({
        "path": rel_path,
        "Classification": class_name,
        "Type": "normal",
        "Description": "anh noi soi tong hop",
        "DescriptionEN": DESCRIPTIONS[class_name],
    })
