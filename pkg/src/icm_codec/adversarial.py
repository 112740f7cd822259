"""PatchGAN decoder finetuning.

Only the first two decoder layers and the discriminator are trained, so the
encoder, the probability model and therefore every bitstream stay unchanged.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .checkpoint import load_codec, save_codec
from .codec_core import (
    Codec,
    ParameterSet,
    decode_forward,
    encode_forward,
    partition_parameters,
    quantize,
)
from .errors import ConfigurationError, DatasetError, TrainingDivergedError
from .losses import mse_loss

log = logging.getLogger(__name__)

PATCH_SIZES = (32, 64, 128)
PATCH_COUNTS = (1, 3, 5)
LOGIT_CLAMP = 20.0
DEFAULT_TRAINABLE = ("decoder_head", "discriminator")


@dataclass(frozen=True)
class FinetuneConfig:
    patch_size: int = 64
    patches_per_image: int = 3
    learning_rate: float = 2e-5
    w_adv: float = 1e-3
    generator_loss_form: str = "non_saturating"
    # None -> same as learning_rate
    disc_learning_rate: Optional[float] = None
    batch_size: int = 4
    crop_size: int = 512
    # 6000 images per checkpoint at batch size 4
    steps_per_checkpoint: int = 1500
    checkpoints: int = 50
    eval_every: int = 10
    trainable: tuple = DEFAULT_TRAINABLE
    preset: str = "default"
    seed: int = 0

    def __post_init__(self):
        if self.patch_size not in PATCH_SIZES:
            raise ConfigurationError(f"patch_size must be one of {PATCH_SIZES}")
        if self.patches_per_image not in PATCH_COUNTS:
            raise ConfigurationError(f"patches_per_image must be one of {PATCH_COUNTS}")
        if self.patch_size > self.crop_size:
            raise ConfigurationError("patch_size exceeds crop_size")
        if self.generator_loss_form not in ("non_saturating", "literal_minimax"):
            raise ConfigurationError(f"unknown generator loss form {self.generator_loss_form!r}")
        if self.preset not in ("default", "li"):
            raise ConfigurationError(f"unknown preset {self.preset!r}")
        if self.preset == "li" and (self.w_adv != 1e-4 or self.learning_rate != 2e-9):
            raise ConfigurationError("the LI preset fixes w_adv=1e-4 and learning_rate=2e-9")
        if min(self.steps_per_checkpoint, self.checkpoints, self.batch_size) < 0 or self.batch_size == 0:
            raise ConfigurationError("counts must be non-negative and batch_size positive")
        if self.eval_every < 1:
            raise ConfigurationError("eval_every must be >= 1")
        object.__setattr__(self, "trainable", tuple(self.trainable))

    @classmethod
    def li_preset(cls, **overrides) -> "FinetuneConfig":
        """Low adversarial impact: w_adv 1e-4, learning rate 2e-9."""
        return cls(**{**overrides, "w_adv": 1e-4, "learning_rate": 2e-9, "preset": "li"})

    @property
    def d_lr(self) -> float:
        return self.learning_rate if self.disc_learning_rate is None else self.disc_learning_rate

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable"] = list(self.trainable)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        d = dict(d)
        if "trainable" in d:
            d["trainable"] = tuple(d["trainable"])
        return cls(**d)


class Discriminator(nn.Module):
    """Unconditional PatchGAN: 4x4 stride-2 convs 64 -> 128 -> 256 and a 1-channel logit map.

    Depth is 3 strided layers for patches of 64 and up, 2 for 32x32 patches.
    Instance norm follows every strided layer after the first.
    """

    def __init__(self, patch_size: int = 64, base_width: int = 64):
        super().__init__()
        self.patch_size = patch_size
        self.depth = 3 if patch_size >= 64 else 2
        layers = []
        cin = 3
        for i in range(self.depth):
            cout = base_width * 2 ** i
            layers.append(nn.Conv2d(cin, cout, 4, stride=2, padding=1))
            if i > 0:
                layers.append(nn.InstanceNorm2d(cout))
            layers.append(nn.LeakyReLU(0.2))
            cin = cout
        layers.append(nn.Conv2d(cin, 1, 4, stride=1, padding=1))
        self.net = nn.Sequential(*layers)
        self.base_width = base_width

    def describe(self) -> dict:
        return {"patch_size": self.patch_size, "depth": self.depth, "base_width": self.base_width}

    def forward(self, patches: Tensor) -> Tensor:
        return self.net(patches)


def build_discriminator(patch_size: int, seed: int = 0) -> Discriminator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        disc = Discriminator(patch_size)
        for m in disc.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, 0.0, 0.02)
                nn.init.zeros_(m.bias)
    return disc


@dataclass
class PatchBatch:
    patches: Tensor  # (N * k, 3, s, s)
    coords: list  # (image index, top, left) per patch
    origin: str  # "real" or "fake"


def patch_coordinates(height: int, width: int, size: int, count: int, rng: np.random.Generator):
    if size > min(height, width):
        raise ConfigurationError(f"patch size {size} does not fit a {height}x{width} image")
    tops = rng.integers(0, height - size + 1, size=count)
    lefts = rng.integers(0, width - size + 1, size=count)
    return list(zip(tops.tolist(), lefts.tolist()))


def sample_patches(x: Tensor, x_hat: Tensor, cfg: FinetuneConfig, seed) -> tuple[PatchBatch, PatchBatch]:
    """Crop ``cfg.patches_per_image`` squares per image at shared positions from ``x`` and ``x_hat``."""
    if x.shape != x_hat.shape:
        raise ConfigurationError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    n, _, h, w = x.shape
    s = cfg.patch_size
    rng = np.random.default_rng(seed)
    coords = []
    for i in range(n):
        coords += [(i, t, l) for t, l in patch_coordinates(h, w, s, cfg.patches_per_image, rng)]
    real = torch.stack([x[i, :, t : t + s, l : l + s] for i, t, l in coords])
    fake = torch.stack([x_hat[i, :, t : t + s, l : l + s] for i, t, l in coords])
    return PatchBatch(real, coords, "real"), PatchBatch(fake, list(coords), "fake")


def gan_loss(d_real_logits: Tensor, d_fake_logits: Tensor, form: str = "non_saturating"):
    """Vanilla GAN losses from discriminator logits.

    ``loss_D = -mean log D(real) - mean log(1 - D(fake))``. The generator loss is
    ``mean log(1 - D(fake))`` (literal minimax) or ``-mean log D(fake)``.
    """
    return discriminator_loss(d_real_logits, d_fake_logits), generator_loss(d_fake_logits, form)


def discriminator_loss(d_real_logits: Tensor, d_fake_logits: Tensor) -> Tensor:
    real = d_real_logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    fake = d_fake_logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    return -F.logsigmoid(real).mean() - F.logsigmoid(-fake).mean()


def generator_loss(d_fake_logits: Tensor, form: str = "non_saturating") -> Tensor:
    fake = d_fake_logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    if form == "non_saturating":
        return -F.logsigmoid(fake).mean()
    if form == "literal_minimax":
        return F.logsigmoid(-fake).mean()
    raise ConfigurationError(f"unknown generator loss form {form!r}")


def finetune_objective(
    x: Tensor, x_hat: Tensor, d_fake_logits: Tensor, w_adv: float, form: str = "non_saturating"
) -> Tensor:
    # squared error is averaged per element, not summed
    return mse_loss(x, x_hat) + w_adv * generator_loss(d_fake_logits, form)


def patch_accuracy(d_real_logits: Tensor, d_fake_logits: Tensor) -> float:
    """Fraction of logit cells on the correct side of zero (real > 0, fake < 0)."""
    correct = (d_real_logits > 0).sum() + (d_fake_logits < 0).sum()
    return float(correct) / (d_real_logits.numel() + d_fake_logits.numel())


def discriminator_step(disc: nn.Module, opt: torch.optim.Optimizer, real: Tensor, fake: Tensor):
    """One optimizer step on ``loss_D``; returns ``(loss_D, accuracy)`` measured before the step."""
    opt.zero_grad(set_to_none=True)
    d_real = disc(real)
    d_fake = disc(fake.detach())
    loss_d = discriminator_loss(d_real, d_fake)
    loss_d.backward()
    opt.step()
    return loss_d.detach(), patch_accuracy(d_real.detach(), d_fake.detach())


def _frozen_grad_max(params) -> float:
    worst = 0.0
    for p in params:
        if p.grad is not None:
            worst = max(worst, float(p.grad.detach().abs().max()))
    return worst


class Finetuner:
    """Holds the codec, discriminator and both optimizers for alternating updates."""

    def __init__(self, codec: Codec, disc: Discriminator, cfg: FinetuneConfig):
        self.codec = codec
        self.disc = disc
        self.cfg = cfg
        self.params = ParameterSet.from_modules(codec, disc)
        trainable, frozen = partition_parameters(self.params, cfg.trainable)
        self.frozen = frozen
        gen_params = [p for n, p in trainable.items() if not n.startswith("discriminator.")]
        disc_params = [p for n, p in trainable.items() if n.startswith("discriminator.")]
        self.opt_g = torch.optim.Adam(gen_params, lr=cfg.learning_rate) if gen_params else None
        self.opt_d = torch.optim.Adam(disc_params, lr=cfg.d_lr) if disc_params else None
        self.codec_params = [p for n, p in self.params if not n.startswith("discriminator.")]
        self.codec_frozen = [p for n, p in frozen.items() if not n.startswith("discriminator.")]
        self.step_count = 0

    def step(self, images: Tensor, seed) -> dict:
        """One discriminator update followed by one generator update on ``images`` (NCHW)."""
        return finetune_step(self, images, seed)


def finetune_step(ft: Finetuner, images: Tensor, seed) -> dict:
    codec, disc, cfg = ft.codec, ft.disc, ft.cfg
    with torch.no_grad():
        latent = quantize(encode_forward(codec, images), "round")
    x_hat = decode_forward(codec, latent)
    real, fake = sample_patches(images, x_hat, cfg, seed)

    # discriminator update; the decoded image is detached so no codec gradient
    for p in ft.codec_params:
        p.grad = None
    if ft.opt_d is not None:
        loss_d, acc = discriminator_step(disc, ft.opt_d, real.patches, fake.patches)
    else:
        with torch.no_grad():
            d_real, d_fake = disc(real.patches), disc(fake.patches)
            loss_d, acc = discriminator_loss(d_real, d_fake), patch_accuracy(d_real, d_fake)
    codec_grad_in_d_step = _frozen_grad_max(ft.codec_params)

    # generator update
    disc_flags = [p.requires_grad for p in disc.parameters()]
    disc.requires_grad_(False)
    try:
        if ft.opt_g is not None:
            ft.opt_g.zero_grad(set_to_none=True)
        d_fake = disc(fake.patches)
        loss_g = generator_loss(d_fake, cfg.generator_loss_form)
        l2 = mse_loss(images, x_hat)
        objective = l2 + cfg.w_adv * loss_g
        if not torch.isfinite(objective) or not torch.isfinite(loss_d):
            raise TrainingDivergedError(
                f"non-finite loss at finetune step {ft.step_count}: "
                f"objective={float(objective.detach())}, loss_D={float(loss_d)}"
            )
        if ft.opt_g is not None:
            objective.backward()
        frozen_grad = _frozen_grad_max(ft.codec_frozen)
        if ft.opt_g is not None:
            ft.opt_g.step()
    finally:
        for p, flag in zip(disc.parameters(), disc_flags):
            p.requires_grad_(flag)
    ft.step_count += 1
    return {
        "step": ft.step_count,
        "loss_D": float(loss_d),
        "loss_G": float(loss_g.detach()),
        "l2": float(l2.detach()),
        "objective": float(objective.detach()),
        "d_accuracy": acc,
        "frozen_grad_max": frozen_grad,
        "codec_grad_max_d_step": codec_grad_in_d_step,
    }


def step_seed(seed: int, checkpoint: int, step: int) -> list:
    return [int(seed), int(checkpoint), int(step)]


def _dump_state(out_dir: Path, ft: Finetuner, logs: list, exc: Exception) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "divergence_dump.json"
    stats = {
        n: {"min": float(p.detach().min()), "max": float(p.detach().max()), "finite": bool(torch.isfinite(p).all())}
        for n, p in ft.params
    }
    path.write_text(json.dumps({"error": str(exc), "step": ft.step_count, "recent_logs": logs[-20:], "params": stats}, indent=2))
    return path


def finetune_run(
    base_checkpoint,
    dataset,
    cfg: FinetuneConfig,
    out_dir,
    eval_images: Optional[Sequence[np.ndarray]] = None,
    fe=None,
    log_every: int = 0,
) -> list:
    """Finetune a base checkpoint and persist ``cfg.checkpoints`` checkpoint directories.

    ``dataset`` is anything with ``batch(seed, checkpoint, step, batch_size, crop)``
    returning an NCHW tensor (see :class:`icm_codec.data.CropSampler`). Feature
    fidelity on ``eval_images`` is snapshotted every ``cfg.eval_every``
    checkpoints and at the last one; the best snapshot is marked in
    ``finetune_manifest.json``. Returns the list of checkpoint paths.
    """
    from .evaluation import feature_fidelity_of_codec

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    codec, base_manifest = load_codec(base_checkpoint)
    base_hash = base_manifest["content_hash"]
    if cfg.checkpoints > 0 and len(dataset) == 0:
        raise DatasetError("finetuning dataset is empty")
    disc = build_discriminator(cfg.patch_size, seed=cfg.seed)
    ft = Finetuner(codec, disc, cfg)
    manifest = {
        "kind": "finetune_run",
        "config": cfg.to_dict(),
        "base_checkpoint": str(base_checkpoint),
        "base_checkpoint_hash": base_hash,
        "l2_normalization": "mean over elements",
        "checkpoints": [],
        "snapshots": [],
        "best_checkpoint": None,
    }
    paths = []
    extra = {"finetune": {"config": cfg.to_dict(), "base_checkpoint_hash": base_hash}}
    if cfg.checkpoints == 0:
        path = out_dir / "ckpt_0000"
        saved = save_codec(path, codec, step=0, extra=extra)
        manifest["checkpoints"].append({"index": 0, "step": 0, "path": path.name, "hash": saved["content_hash"]})
        manifest["best_checkpoint"] = path.name
        _write_manifest(out_dir, manifest)
        return [path]

    logs = []
    snapshots = set(snapshot_schedule(cfg.checkpoints, cfg.eval_every))
    for ck in range(1, cfg.checkpoints + 1):
        for s in range(cfg.steps_per_checkpoint):
            images = dataset.batch(cfg.seed, ck, s, cfg.batch_size, cfg.crop_size)
            try:
                entry = ft.step(images, step_seed(cfg.seed, ck, s))
            except TrainingDivergedError as exc:
                exc.dump_path = _dump_state(out_dir, ft, logs, exc)
                raise
            logs.append(entry)
            if log_every and ft.step_count % log_every == 0:
                log.info("finetune step %d: %s", ft.step_count, entry)
        path = out_dir / f"ckpt_{ck:04d}"
        saved = save_codec(path, codec, step=ft.step_count, discriminator=disc, extra=extra)
        record = {"index": ck, "step": ft.step_count, "path": path.name, "hash": saved["content_hash"]}
        if logs:
            record["last_log"] = logs[-1]
        manifest["checkpoints"].append(record)
        paths.append(path)
        if eval_images is not None and fe is not None and ck in snapshots:
            ff = feature_fidelity_of_codec(codec, eval_images, fe)
            manifest["snapshots"].append({"checkpoint": path.name, "step": ft.step_count, "feature_fidelity": ff})
    if manifest["snapshots"]:
        best = min(manifest["snapshots"], key=lambda r: r["feature_fidelity"])
        manifest["best_checkpoint"] = best["checkpoint"]
    else:
        manifest["best_checkpoint"] = paths[-1].name
    _write_manifest(out_dir, manifest)
    (out_dir / "finetune_log.json").write_text(json.dumps(logs))
    return paths


def _write_manifest(out_dir: Path, manifest: dict):
    (out_dir / "finetune_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def snapshot_schedule(checkpoints: int, eval_every: int) -> list[int]:
    """Checkpoint indices that receive a metric snapshot."""
    idx = [ck for ck in range(1, checkpoints + 1) if ck % eval_every == 0]
    if checkpoints and (not idx or idx[-1] != checkpoints):
        idx.append(checkpoints)
    return idx
