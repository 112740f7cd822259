"""Dataset ingestion, deterministic cropping and synthetic test images."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, DatasetError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
CACHE_ENV = "ICM_CACHE_DIR"


def load_image(path) -> np.ndarray:
    """Read an image file as an HxWx3 uint8 RGB array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def save_image(path, img: np.ndarray):
    """Write an HxWx3 image (uint8 or float in [0, 1]) losslessly."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, "RGB").save(path, format="PNG")


@dataclass
class DatasetIndex:
    root: str
    entries: list  # dicts: path (relative), width, height, sha256
    skipped: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def index_hash(self) -> str:
        blob = json.dumps(self.entries, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def eligible(self, crop: int) -> list:
        return [e for e in self.entries if e["width"] >= crop and e["height"] >= crop]

    def eligibility(self, crop: int) -> dict:
        ok = self.eligible(crop)
        return {"crop": crop, "eligible": len(ok), "total": len(self.entries)}

    def order(self, seed: int, checkpoint: int, crop: int) -> list:
        """Deterministic shuffle of eligible entries for one checkpoint."""
        ok = self.eligible(crop)
        perm = np.random.default_rng([int(seed), int(checkpoint)]).permutation(len(ok))
        return [ok[i] for i in perm]

    def absolute(self, entry) -> Path:
        return Path(self.root) / entry["path"]

    def to_dict(self) -> dict:
        return {"root": self.root, "entries": self.entries, "skipped": self.skipped, "hash": self.index_hash()}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DatasetIndex":
        d = json.loads(Path(path).read_text())
        return cls(d["root"], d["entries"], d.get("skipped", []))


def _cache_path(root: Path, cache_dir) -> Optional[Path]:
    cache_dir = cache_dir or os.environ.get(CACHE_ENV)
    if not cache_dir:
        return None
    key = hashlib.sha256(str(root.resolve()).encode()).hexdigest()[:16]
    return Path(cache_dir) / f"index_{key}.json"


def ingest_dataset(root, cache_dir=None) -> DatasetIndex:
    """Recursively index PNG/JPEG files under ``root``; unreadable files are skipped with a warning.

    The index is also written to ``cache_dir`` (or ``$ICM_CACHE_DIR``) when set.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    entries, skipped = [], []
    for path in sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES):
        rel = path.relative_to(root).as_posix()
        data = path.read_bytes()
        try:
            with Image.open(path) as im:
                im.load()
                width, height = im.size
        except Exception as exc:  # PIL raises a zoo of exception types
            log.warning("skipping unreadable image %s: %s", rel, exc)
            skipped.append(rel)
            continue
        entries.append({"path": rel, "width": width, "height": height, "sha256": hashlib.sha256(data).hexdigest()})
    if not entries:
        raise DatasetError(f"no readable images under {root}")
    index = DatasetIndex(str(root), entries, skipped)
    cache = _cache_path(root, cache_dir)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        index.save(cache)
    return index


def random_crop(img: np.ndarray, size: int, seed) -> np.ndarray:
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ConfigurationError(f"image {h}x{w} is smaller than crop size {size}")
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return img[top : top + size, left : left + size]


def to_batch(images: Sequence[np.ndarray]) -> torch.Tensor:
    arr = np.stack([np.asarray(im, dtype=np.float32) / (255.0 if im.dtype == np.uint8 else 1.0) for im in images])
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


class CropSampler:
    """Serves deterministic batches of random crops from an index or in-memory images.

    Batch ``step`` of checkpoint ``ck`` walks the per-checkpoint shuffle order and
    crops each image with the seed ``(seed, ck, step, slot)``.
    """

    def __init__(self, source, crop: int):
        self.crop = crop
        if isinstance(source, DatasetIndex):
            self.index = source
            self._cache = {}
            if not source.eligible(crop):
                raise DatasetError(f"no images of at least {crop}x{crop} in the index")
        else:
            images = [np.asarray(im) for im in source]
            self.index = None
            self.images = [im for im in images if min(im.shape[:2]) >= crop]
            if images and not self.images:
                raise DatasetError(f"no images of at least {crop}x{crop}")

    def __len__(self) -> int:
        return len(self.index.eligible(self.crop)) if self.index is not None else len(self.images)

    def _image(self, entry) -> np.ndarray:
        key = entry["path"]
        if key not in self._cache:
            self._cache[key] = load_image(self.index.absolute(entry))
        return self._cache[key]

    def _order(self, seed, ck):
        if self.index is not None:
            return [self._image(e) for e in self.index.order(seed, ck, self.crop)]
        perm = np.random.default_rng([int(seed), int(ck)]).permutation(len(self.images))
        return [self.images[i] for i in perm]

    def batch(self, seed: int, ck: int, step: int, batch_size: int, crop: Optional[int] = None) -> torch.Tensor:
        crop = crop or self.crop
        order = self._order(seed, ck)
        if not order:
            raise DatasetError("no eligible images")
        crops = []
        for slot in range(batch_size):
            img = order[(step * batch_size + slot) % len(order)]
            crops.append(random_crop(img, crop, [int(seed), int(ck), int(step), slot]))
        return to_batch(crops)


# ---------------------------------------------------------------------------
# synthetic images


def synthetic_image(height: int, width: int, seed) -> np.ndarray:
    """Natural-looking test image: smooth color field, hard-edged shapes and fine texture."""
    rng = np.random.default_rng(seed)
    img = np.zeros((height, width, 3))
    for sigma, amp in ((height / 6, 0.6), (height / 16, 0.25)):
        field_ = ndimage.gaussian_filter(rng.normal(size=(height, width, 3)), (sigma, sigma, 0), mode="wrap")
        field_ /= field_.std() + 1e-12
        img += amp * field_ * 0.15
    img += rng.uniform(0.3, 0.7, size=3)
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(int(rng.integers(2, 5))):
        color = rng.uniform(0.05, 0.95, size=3)
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        r = rng.uniform(0.1, 0.3) * min(height, width)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
        else:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.5, 1.5))
        img[mask] = 0.6 * color + 0.4 * img[mask]
    texture = ndimage.gaussian_filter(rng.normal(size=(height, width)), 0.8)
    img += 0.03 * texture[..., None]
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_synthetic_dataset(root, count: int, height: int = 96, width: int = 96, seed: int = 0) -> list:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        path = root / f"img_{i:04d}.png"
        save_image(path, synthetic_image(height, width, [seed, i]))
        paths.append(path)
    return paths
