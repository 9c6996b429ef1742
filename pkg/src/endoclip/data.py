"""Dataset manifests and image preprocessing.

A manifest is JSONL, one record per line, with fields path, Classification,
Type, Description, and optional DescriptionEN. Classification must match the
closed class set exactly (case-sensitive); any malformed record aborts
ingestion with its line number. Images load as float64 RGB in [0, 1], get
their black border cropped away, and are bilinearly resized to the configured
square size.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import ManifestError
from .objectives import class_id

BORDER_THRESHOLD = 10.0 / 255.0


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    classification: str
    type: str
    description: str
    description_en: Optional[str]
    line: int

    @property
    def label(self) -> int:
        return class_id(self.classification)


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    source: Optional[str] = None

    def __len__(self) -> int:
        return len(self.records)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                row = {"path": rec.path, "Classification": rec.classification,
                       "Type": rec.type, "Description": rec.description}
                if rec.description_en is not None:
                    row["DescriptionEN"] = rec.description_en
                fh.write(json.dumps(row) + "\n")


def ingest_manifest(path) -> DatasetManifest:
    """Parse and validate a JSONL manifest; any bad record aborts with its line."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest {path} does not exist")
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {line_no}: malformed JSON ({exc.msg})") from None
            if not isinstance(raw, dict):
                raise ManifestError(f"line {line_no}: record must be an object")
            for required in ("path", "Classification"):
                if required not in raw:
                    raise ManifestError(f"line {line_no}: missing field {required!r}")
            name = raw["Classification"]
            try:
                class_id(name)
            except Exception:
                raise ManifestError(
                    f"line {line_no}: unknown Classification {name!r}") from None
            image_path = (path.parent / raw["path"]).resolve()
            if not image_path.is_file():
                raise ManifestError(f"line {line_no}: image {raw['path']!r} not readable")
            records.append(ManifestRecord(
                path=raw["path"],
                classification=name,
                type=raw.get("Type", ""),
                description=raw.get("Description", ""),
                description_en=raw.get("DescriptionEN"),
                line=line_no,
            ))
    if not records:
        warnings.warn(f"manifest {path} holds no records")
    return DatasetManifest(records=records, source=str(path))


def crop_black_border(image: np.ndarray, threshold: float = BORDER_THRESHOLD) -> np.ndarray:
    """Crop to the maximal bounding box of pixels brighter than the threshold."""
    intensity = image.max(axis=0)
    mask = intensity > threshold
    if not mask.any():
        return image
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return image[:, rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channelwise bilinear resampling (half-pixel centers)."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bottom = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bottom * wy


def load_image_file(path, image_size: int) -> np.ndarray:
    """Read, border-crop, and resize an image file to (3, S, S) in [0, 1]."""
    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise ManifestError(f"cannot read image {str(path)!r}: {exc}") from None
    chw = rgb.transpose(2, 0, 1)
    cropped = crop_black_border(chw)
    return bilinear_resize(cropped, image_size, image_size)


def load_image(record: ManifestRecord, image_size: int,
               manifest_dir: Optional[str] = None) -> np.ndarray:
    """Preprocess one record's image; paths resolve relative to the manifest."""
    base = Path(manifest_dir) if manifest_dir else Path(".")
    try:
        return load_image_file(base / record.path, image_size)
    except ManifestError as exc:
        raise ManifestError(f"line {record.line}: {exc}") from None


def load_all_images(manifest: DatasetManifest, image_size: int) -> list[np.ndarray]:
    base = str(Path(manifest.source).parent) if manifest.source else "."
    return [load_image(rec, image_size, base) for rec in manifest.records]
