"""Base codec training on the rate + MSE + feature-proxy objective."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .checkpoint import save_codec
from .codec_core import CodecConfig, build_codec, decode_forward, encode_forward, quantize
from .data import CropSampler, ingest_dataset
from .errors import ConfigurationError, TrainingDivergedError
from .losses import FeatureExtractor, LossWeights, total_loss

log = logging.getLogger(__name__)

PROFILE_DEFAULTS = {
    "paper": {
        "crop_size": 512,
        "images_per_checkpoint": 6000,
        "checkpoints": 200,
        "w_mse": 16.0,
        "learning_rate": 1e-4,
    },
    # desk-scale constants; w_mse and lr chosen so 8 images reach ~26 dB in ~1000 steps
    "tiny": {
        "crop_size": 64,
        "images_per_checkpoint": 64,
        "checkpoints": 20,
        "w_mse": 256.0,
        "learning_rate": 5e-4,
    },
}


@dataclass(frozen=True)
class RunConfig:
    profile: str = "tiny"
    crop_size: int = 64
    images_per_checkpoint: int = 64
    checkpoints: int = 20
    batch_size: int = 4
    w_rate: float = 1.0
    w_mse: float = 256.0
    w_task: float = 1.0
    optimizer: str = "adam"
    learning_rate: float = 5e-4
    seed: int = 0
    extractor_seed: int = 0
    dataset: Optional[str] = None
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.profile not in PROFILE_DEFAULTS:
            raise ConfigurationError(f"unknown profile {self.profile!r}")
        if self.crop_size % 16:
            raise ConfigurationError("crop size must be a multiple of 16")
        if min(self.images_per_checkpoint, self.checkpoints) < 0 or self.batch_size < 1:
            raise ConfigurationError("counts must be non-negative and batch_size positive")
        if self.optimizer != "adam":
            raise ConfigurationError("only the adam optimizer is supported")
        self.weights  # validates the loss weights

    @classmethod
    def from_profile(cls, profile: str, **overrides) -> "RunConfig":
        if profile not in PROFILE_DEFAULTS:
            raise ConfigurationError(f"unknown profile {profile!r}")
        return cls(**{"profile": profile, **PROFILE_DEFAULTS[profile], **overrides})

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_rate, self.w_mse, self.w_task)

    @property
    def codec_config(self) -> CodecConfig:
        return CodecConfig.from_profile(self.profile)

    @property
    def steps_per_checkpoint(self) -> int:
        return -(-self.images_per_checkpoint // self.batch_size)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def noise_generator(seed: int, checkpoint: int, step: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(np.random.SeedSequence([seed, checkpoint, step]).generate_state(1)[0]))
    return g


def training_step(codec, opt, images, weights: LossWeights, fe, generator) -> dict:
    """One optimizer step on the three-term objective with noisy quantization."""
    opt.zero_grad(set_to_none=True)
    y = encode_forward(codec, images)
    y_tilde = quantize(y, "noisy", generator)
    x_hat = decode_forward(codec, y_tilde, clamp=False)
    loss, terms = total_loss(images, x_hat, y_tilde, codec.probability_model, weights, fe)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite training loss: {terms}")
    loss.backward()
    opt.step()
    return terms


def _sampler(cfg: RunConfig, dataset):
    if dataset is None:
        if cfg.dataset is None:
            raise ConfigurationError("no dataset given")
        dataset = ingest_dataset(cfg.dataset)
    if isinstance(dataset, CropSampler):
        return dataset
    return CropSampler(dataset, cfg.crop_size)


def train_base(cfg: RunConfig, dataset=None, fe: Optional[FeatureExtractor] = None, out_dir=None, log_every: int = 0) -> list:
    """Train a codec from scratch; returns the checkpoint directories written.

    ``dataset`` may be a :class:`DatasetIndex`, a :class:`CropSampler` or a list
    of images; when omitted ``cfg.dataset`` is ingested. With
    ``cfg.checkpoints == 0`` only the initialized weights are saved.
    """
    out_dir = Path(out_dir or cfg.out_dir or "runs/base")
    out_dir.mkdir(parents=True, exist_ok=True)
    sampler = _sampler(cfg, dataset)
    if fe is None and cfg.w_task > 0:
        fe = FeatureExtractor(seed=cfg.extractor_seed)
    codec = build_codec(cfg.codec_config, seed=cfg.seed)
    codec.train()
    opt = torch.optim.Adam(codec.parameters(), lr=cfg.learning_rate)
    extra = {
        "run_config": cfg.to_dict(),
        "optimizer": {"algorithm": cfg.optimizer, "learning_rate": cfg.learning_rate},
        "loss_weights": cfg.weights.to_dict(),
    }
    if sampler.index is not None:
        extra["dataset"] = {"index_hash": sampler.index.index_hash(), **sampler.index.eligibility(cfg.crop_size)}
    if fe is not None:
        extra["feature_extractor"] = fe.manifest()

    if cfg.checkpoints == 0:
        path = out_dir / "ckpt_0000"
        save_codec(path, codec, step=0, extra=extra)
        return [path]

    logs, paths, step = [], [], 0
    for ck in range(1, cfg.checkpoints + 1):
        for s in range(cfg.steps_per_checkpoint):
            images = sampler.batch(cfg.seed, ck, s, cfg.batch_size, cfg.crop_size)
            try:
                terms = training_step(codec, opt, images, cfg.weights, fe, noise_generator(cfg.seed, ck, s))
            except TrainingDivergedError as exc:
                dump = out_dir / "divergence_dump.json"
                dump.write_text(json.dumps({"error": str(exc), "step": step, "recent_logs": logs[-20:]}, indent=2))
                exc.dump_path = dump
                raise
            step += 1
            logs.append({"step": step, **terms})
            if log_every and step % log_every == 0:
                log.info("base step %d: %s", step, terms)
        path = out_dir / f"ckpt_{ck:04d}"
        save_codec(path, codec, step=step, extra=extra)
        paths.append(path)
    (out_dir / "train_log.json").write_text(json.dumps(logs))
    return paths


def smoothed(values, window: int = 20) -> np.ndarray:
    """Trailing moving average."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    out = np.empty_like(v)
    for i in range(len(v)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out
