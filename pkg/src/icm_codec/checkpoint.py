"""Checkpoint directories: ``manifest.json`` plus one little-endian float32 blob per array."""

from __future__ import annotations

import hashlib
import json
import os
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch
from torch import Tensor, nn

from .codec_core import Codec, CodecConfig, ParameterSet, partition_label
from .errors import ConfigurationError

FORMAT = "icm-checkpoint"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"


def array_bytes(t: Tensor) -> bytes:
    return t.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()


def tensor_hash(t: Tensor) -> str:
    return hashlib.sha256(array_bytes(t)).hexdigest()


def arrays_hash(arrays: Mapping[str, Tensor]) -> str:
    """Order-independent content hash of named arrays."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(b"\0")
        h.update(tensor_hash(arrays[name]).encode())
    return h.hexdigest()


def _blob_name(name: str) -> str:
    return name + ".f32"


def save_arrays(path, arrays: Mapping[str, Tensor], manifest: Optional[dict] = None) -> dict:
    """Write ``arrays`` and a manifest to directory ``path``; returns the manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = OrderedDict()
    for name, t in arrays.items():
        data = array_bytes(t)
        (path / _blob_name(name)).write_bytes(data)
        entries[name] = {
            "file": _blob_name(name),
            "shape": list(t.shape),
            "sha256": hashlib.sha256(data).hexdigest(),
        }
    full = dict(manifest or {})
    full.update(
        {
            "format": FORMAT,
            "format_version": FORMAT_VERSION,
            "dtype": "<f4",
            "entries": entries,
            "content_hash": arrays_hash(arrays),
        }
    )
    tmp = path / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(full, indent=2, sort_keys=True))
    os.replace(tmp, path / MANIFEST)
    return full


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"no checkpoint manifest in {path}") from exc
    if manifest.get("format") != FORMAT:
        raise ConfigurationError(f"{path} is not an {FORMAT} directory")
    return manifest


def load_arrays(path, verify: bool = True) -> tuple["OrderedDict[str, Tensor]", dict]:
    path = Path(path)
    manifest = read_manifest(path)
    arrays = OrderedDict()
    for name, entry in manifest["entries"].items():
        data = (path / entry["file"]).read_bytes()
        if verify and hashlib.sha256(data).hexdigest() != entry["sha256"]:
            raise ConfigurationError(f"hash mismatch for {name} in {path}")
        arr = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(entry["shape"])
        arrays[name] = torch.from_numpy(arr.copy())
    return arrays, manifest


def save_codec(
    path,
    codec: Codec,
    step: int = 0,
    discriminator: Optional[nn.Module] = None,
    extra: Optional[dict] = None,
) -> dict:
    ps = ParameterSet.from_modules(codec, discriminator)
    manifest = {
        "kind": "codec",
        "config": codec.cfg.to_dict(),
        "step": int(step),
        "partitions": dict(ps.labels),
    }
    if discriminator is not None:
        manifest["discriminator"] = getattr(discriminator, "describe", lambda: {})()
    if extra:
        manifest.update(extra)
    return save_arrays(path, OrderedDict(ps.entries), manifest)


def codec_state_hash(codec: Codec) -> str:
    return arrays_hash(OrderedDict(codec.named_parameters()))


def load_codec(path, with_discriminator: bool = False):
    """Load a codec (and, on request, its discriminator state dict) from ``path``.

    Returns ``(codec, manifest)`` or ``(codec, discriminator_state, manifest)``.
    """
    arrays, manifest = load_arrays(path)
    if manifest.get("kind") != "codec":
        raise ConfigurationError(f"{path} is not a codec checkpoint")
    cfg = CodecConfig(**manifest["config"])
    codec = Codec(cfg)
    codec_state = {k: v for k, v in arrays.items() if partition_label(k) != "discriminator"}
    codec.load_state_dict(codec_state, strict=True)
    if not with_discriminator:
        return codec, manifest
    disc_state = OrderedDict(
        (k[len("discriminator."):], v) for k, v in arrays.items() if k.startswith("discriminator.")
    )
    return codec, disc_state, manifest


def save_feature_extractor(path, fe) -> dict:
    manifest = {"kind": "feature_extractor", "extractor": fe.manifest()}
    return save_arrays(path, OrderedDict(fe.backbone.named_parameters()), manifest)


def load_feature_extractor(path):
    """Load exported backbone weights as an ``external_pretrained`` extractor."""
    from .losses import FeatureExtractor

    arrays, manifest = load_arrays(path)
    if manifest.get("kind") != "feature_extractor":
        raise ConfigurationError(f"{path} is not a feature extractor export")
    info = manifest["extractor"]
    norm = info.get("normalization", {})
    fe = FeatureExtractor(
        width=int(info["width"]),
        seed=int(info.get("seed", 0)),
        backend="external_pretrained",
        mean=tuple(norm.get("mean", (0.0, 0.0, 0.0))),
        std=tuple(norm.get("std", (1.0, 1.0, 1.0))),
    )
    fe.backbone.load_state_dict(arrays, strict=True)
    fe.requires_grad_(False)
    return fe
