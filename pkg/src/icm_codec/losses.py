"""Training objective: rate, MSE and the FPN feature proxy for the task loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .codec_core import ProbabilityModel, latent_likelihood
from .errors import ConfigurationError

# Input stride of each exposed level.
LEVEL_STRIDES = {"c1": 2, "c2": 4, "c3": 8, "c4": 16, "c5": 32, "p2": 4, "p3": 8, "p4": 16, "p5": 32}
PROXY_LEVELS = ("p2", "p4")
# Post-activation outputs of the 2nd and 5th conv blocks; used for the
# perceptual metric in evaluation.
PERCEPTUAL_LEVELS = ("c2", "c5")


@dataclass(frozen=True)
class LossWeights:
    w_rate: float = 1.0
    w_mse: float = 16.0
    w_task: float = 1.0

    def __post_init__(self):
        values = (self.w_rate, self.w_mse, self.w_task)
        if any(v < 0 for v in values):
            raise ConfigurationError("loss weights must be non-negative")
        if not any(v > 0 for v in values):
            raise ConfigurationError("at least one loss weight must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class FPNBackbone(nn.Module):
    """Five-stage conv pyramid with an FPN top-down pathway.

    Stage ``k`` has stride ``2**k``. Outputs are the post-ReLU stage features
    ``c1..c5`` and the pyramid levels ``p2..p5``.
    """

    def __init__(self, width: int = 32):
        super().__init__()
        self.width = width
        chans = [3] + [width] * 5
        for k in range(1, 6):
            self.add_module(
                f"stage{k}",
                nn.Sequential(
                    nn.Conv2d(chans[k - 1], chans[k], 3, stride=2, padding=1),
                    nn.ReLU(),
                    nn.Conv2d(chans[k], chans[k], 3, padding=1),
                    nn.ReLU(),
                ),
            )
        for k in range(2, 6):
            self.add_module(f"lateral{k}", nn.Conv2d(width, width, 1))
            self.add_module(f"output{k}", nn.Conv2d(width, width, 3, padding=1))

    def forward(self, x: Tensor) -> dict[str, Tensor]:
        feats = {}
        for k in range(1, 6):
            x = getattr(self, f"stage{k}")(x)
            feats[f"c{k}"] = x
        top = None
        for k in range(5, 1, -1):
            lat = getattr(self, f"lateral{k}")(feats[f"c{k}"])
            if top is not None:
                lat = lat + F.interpolate(top, size=lat.shape[-2:], mode="nearest")
            top = lat
            feats[f"p{k}"] = getattr(self, f"output{k}")(lat)
        return feats


class FeatureExtractor(nn.Module):
    """Frozen feature extractor used by the proxy loss and the perceptual metric.

    ``builtin_random_fpn`` draws deterministic weights from ``seed``;
    ``external_pretrained`` loads exported weights with :func:`load_feature_extractor`.
    """

    def __init__(
        self,
        width: int = 32,
        seed: int = 0,
        backend: str = "builtin_random_fpn",
        mean: tuple[float, float, float] = (0.0, 0.0, 0.0),
        std: tuple[float, float, float] = (1.0, 1.0, 1.0),
    ):
        super().__init__()
        if backend not in ("builtin_random_fpn", "external_pretrained"):
            raise ConfigurationError(f"unknown feature extractor backend {backend!r}")
        self.backend = backend
        self.seed = seed
        self.width = width
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.backbone = FPNBackbone(width)
            for m in self.backbone.modules():
                if isinstance(m, nn.Conv2d):
                    nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                    nn.init.zeros_(m.bias)
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # always frozen, always in inference mode
        return super().train(False)

    def manifest(self) -> dict:
        return {
            "backend": self.backend,
            "seed": self.seed,
            "width": self.width,
            "level_strides": LEVEL_STRIDES,
            "normalization": {"mean": self.mean.flatten().tolist(), "std": self.std.flatten().tolist()},
        }

    def forward(self, x: Tensor, levels=None) -> dict[str, Tensor]:
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = self.backbone(x)
        if levels is None:
            return feats
        missing = [lv for lv in levels if lv not in feats]
        if missing:
            raise ConfigurationError(f"extractor does not expose levels {missing}")
        return {lv: feats[lv] for lv in levels}


def _check_same_shape(a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def mse_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    _check_same_shape(x, x_hat)
    return torch.mean((x - x_hat) ** 2)


def rate_loss(latent: Tensor, pm: ProbabilityModel, num_pixels: int) -> Tensor:
    """Estimated bits per pixel: ``sum(-log2 p) / num_pixels``.

    ``num_pixels`` counts every source pixel in the batch (pre-padding).
    """
    probs = latent_likelihood(latent, pm)
    return -torch.log2(probs).sum() / num_pixels


def feature_distance(x: Tensor, x_hat: Tensor, fe: FeatureExtractor, levels) -> Tensor:
    """Sum over ``levels`` of feature MSE; gradients reach ``x_hat`` only."""
    _check_same_shape(x, x_hat)
    with torch.no_grad():
        ref = fe(x, levels)
    out = fe(x_hat, levels)
    return sum(torch.mean((ref[lv] - out[lv]) ** 2) for lv in levels)


def proxy_loss(x: Tensor, x_hat: Tensor, fe: FeatureExtractor) -> Tensor:
    """MSE of P2 features plus MSE of P4 features."""
    h, w = x.shape[-2:]
    if h % 16 or w % 16:
        raise ConfigurationError(f"proxy loss needs sizes divisible by 16, got {h}x{w}")
    return feature_distance(x, x_hat, fe, PROXY_LEVELS)


def total_loss(
    x: Tensor,
    x_hat: Tensor,
    latent: Tensor,
    pm: ProbabilityModel,
    weights: LossWeights,
    fe: Optional[FeatureExtractor],
    num_pixels: Optional[int] = None,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of rate, MSE and proxy terms plus a float breakdown for logging."""
    if num_pixels is None:
        num_pixels = x.shape[0] * x.shape[-2] * x.shape[-1]
    rate = rate_loss(latent, pm, num_pixels)
    mse = mse_loss(x, x_hat)
    if weights.w_task > 0:
        if fe is None:
            raise ConfigurationError("w_task > 0 needs a feature extractor")
        task = proxy_loss(x, x_hat, fe)
    else:
        task = torch.zeros((), dtype=x.dtype)
    total = weights.w_rate * rate + weights.w_mse * mse + weights.w_task * task
    breakdown = {
        "total": float(total.detach()),
        "rate": float(rate.detach()),
        "mse": float(mse.detach()),
        "task": float(task.detach()),
    }
    return total, breakdown
