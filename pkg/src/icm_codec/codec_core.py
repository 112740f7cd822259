"""Encoder, decoder, quantizer and factorized probability model of the ICM codec.

Tensors are NCHW float tensors in [0, 1] for images and ``(N, C, h, w)`` for
latents. The public functions at the bottom of the module are thin, pure
wrappers around the :class:`Codec` submodules.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigurationError

STRIDE = 8
LIKELIHOOD_FLOOR = 2.0 ** -16

PARTITION_LABELS = (
    "encoder",
    "probability_model",
    "decoder_head",
    "decoder_tail",
    "discriminator",
)
# First B block and first U block of the decoder.
DECODER_HEAD_LAYERS = (0, 1)

ENCODER_LAYOUT = ("D", "B", "D", "B", "ConvS2")
DECODER_LAYOUT = ("B", "U", "B", "U", "B", "PSConv")


@dataclass(frozen=True)
class CodecConfig:
    width: int = 128
    latent_channels: int = 128
    profile: str = "paper"

    @classmethod
    def from_profile(cls, profile: str) -> "CodecConfig":
        if profile == "paper":
            return cls(128, 128, "paper")
        if profile == "tiny":
            return cls(32, 32, "tiny")
        raise ConfigurationError(f"unknown profile {profile!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    in_channels: int
    out_channels: int


def encoder_specs(cfg: CodecConfig) -> list[BlockSpec]:
    w = cfg.width
    return [
        BlockSpec("D", 3, w),
        BlockSpec("B", w, w),
        BlockSpec("D", w, w),
        BlockSpec("B", w, w),
        BlockSpec("ConvS2", w, cfg.latent_channels),
    ]


def decoder_specs(cfg: CodecConfig) -> list[BlockSpec]:
    w = cfg.width
    return [
        BlockSpec("B", cfg.latent_channels, w),
        BlockSpec("U", w, w),
        BlockSpec("B", w, w),
        BlockSpec("U", w, w),
        BlockSpec("B", w, w),
        BlockSpec("PSConv", w, 3),
    ]


class PSConv(nn.Sequential):
    """Convolution to ``4 * out`` channels followed by a 2x pixel shuffle."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__(
            nn.Conv2d(in_channels, out_channels * 4, kernel_size, padding=kernel_size // 2),
            nn.PixelShuffle(2),
        )


class ResidualBlock(nn.Module):
    """ResNet type-A basic block (no normalization) with PReLU activations.

    ``kind`` selects the resampling: ``B`` keeps resolution, ``D`` halves it with
    a stride-2 first conv and a 1x1 stride-2 shortcut, ``U`` doubles it with a
    pixel-shuffle conv in both the first conv and the shortcut.
    """

    def __init__(self, spec: BlockSpec):
        super().__init__()
        cin, cout = spec.in_channels, spec.out_channels
        if spec.kind == "B":
            self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
            self.shortcut = nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 1)
        elif spec.kind == "D":
            self.conv1 = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            self.shortcut = nn.Conv2d(cin, cout, 1, stride=2)
        elif spec.kind == "U":
            self.conv1 = PSConv(cin, cout, 3)
            self.shortcut = PSConv(cin, cout, 1)
        else:
            raise ConfigurationError(f"not a residual block kind: {spec.kind!r}")
        self.act1 = nn.PReLU(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.act2 = nn.PReLU(cout)

    def forward(self, x: Tensor) -> Tensor:
        out = self.conv2(self.act1(self.conv1(x)))
        return self.act2(out + self.shortcut(x))


def _make_layer(spec: BlockSpec) -> nn.Module:
    if spec.kind == "ConvS2":
        return nn.Conv2d(spec.in_channels, spec.out_channels, 3, stride=2, padding=1)
    if spec.kind == "PSConv":
        return PSConv(spec.in_channels, spec.out_channels, 3)
    return ResidualBlock(spec)


class _LayerStack(nn.Module):
    # Layers are registered as layer0, layer1, ... so parameter names read
    # ``decoder.layer0.conv1.weight``.
    def __init__(self, specs: list[BlockSpec]):
        super().__init__()
        self.specs = specs
        for i, spec in enumerate(specs):
            self.add_module(f"layer{i}", _make_layer(spec))

    def __len__(self) -> int:
        return len(self.specs)

    def layer(self, i: int) -> nn.Module:
        return getattr(self, f"layer{i}")

    def forward(self, x: Tensor) -> Tensor:
        for i in range(len(self.specs)):
            x = self.layer(i)(x)
        return x


class Encoder(_LayerStack):
    def __init__(self, cfg: CodecConfig):
        super().__init__(encoder_specs(cfg))
        self.cfg = cfg


class Decoder(_LayerStack):
    def __init__(self, cfg: CodecConfig):
        super().__init__(decoder_specs(cfg))
        self.cfg = cfg


class _LowerBound(torch.autograd.Function):
    # Passes gradients that would raise the value even when clamped.
    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return x.clamp_min(bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        pass_through = (x >= ctx.bound) | (grad < 0)
        return grad * pass_through.to(grad.dtype), None


def lower_bound(x: Tensor, bound: float) -> Tensor:
    return _LowerBound.apply(x, bound)


class ProbabilityModel(nn.Module):
    """Fully factorized prior: one learned monotone CDF per latent channel.

    The CDF is ``sigmoid(f(v))`` where ``f`` is a small MLP whose matrices are
    kept positive through softplus and whose nonlinearities ``v + tanh(a) tanh(v)``
    are monotone because ``tanh(a) > -1``.
    """

    def __init__(self, channels: int, filters: tuple[int, ...] = (3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        self.filters = tuple(filters)
        dims = (1,) + self.filters + (1,)
        scale = init_scale ** (1.0 / (len(self.filters) + 1))
        self.num_layers = len(dims) - 1
        for i in range(self.num_layers):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.register_parameter(
                f"matrix{i}", nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init))
            )
            bias = torch.empty(channels, dims[i + 1], 1).uniform_(-0.5, 0.5)
            self.register_parameter(f"bias{i}", nn.Parameter(bias))
            if i < self.num_layers - 1:
                self.register_parameter(f"factor{i}", nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits_cdf(self, values: Tensor) -> Tensor:
        """Map ``(C, 1, M)`` values to ``(C, 1, M)`` CDF logits."""
        logits = values
        for i in range(self.num_layers):
            matrix = getattr(self, f"matrix{i}")
            logits = torch.matmul(F.softplus(matrix).to(logits.dtype), logits)
            logits = logits + getattr(self, f"bias{i}").to(logits.dtype)
            if i < self.num_layers - 1:
                factor = getattr(self, f"factor{i}").to(logits.dtype)
                logits = logits + torch.tanh(factor) * torch.tanh(logits)
        return logits

    def cdf(self, values: Tensor) -> Tensor:
        """CDF per channel for ``(C, M)`` values."""
        return torch.sigmoid(self.logits_cdf(values.unsqueeze(1))).squeeze(1)

    def pmf(self, values: Tensor) -> Tensor:
        """``c(v + 0.5) - c(v - 0.5)`` for ``(C, M)`` values, computed without cancellation."""
        v = values.unsqueeze(1)
        lower = self.logits_cdf(v - 0.5)
        upper = self.logits_cdf(v + 0.5)
        sign = -torch.sign(lower + upper).detach()
        sign = torch.where(sign == 0, torch.ones_like(sign), sign)
        return torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower)).squeeze(1)

    def forward(self, latent: Tensor) -> Tensor:
        return latent_likelihood(latent, self)


class Codec(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.probability_model = ProbabilityModel(cfg.latent_channels)


def build_codec(cfg: CodecConfig, seed: int = 0) -> Codec:
    """Freshly initialized codec; initialization is a pure function of ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Codec(cfg)


# ---------------------------------------------------------------------------
# image helpers


def image_to_tensor(img: np.ndarray) -> Tensor:
    """HxWx3 array (uint8 or float in [0, 1]) to a 1x3xHxW float32 tensor."""
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ConfigurationError(f"expected HxWx3 image, got shape {arr.shape}")
    arr = np.clip(arr.astype(np.float32), 0.0, 1.0)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).unsqueeze(0)


def tensor_to_image(t: Tensor) -> np.ndarray:
    """1x3xHxW (or 3xHxW) tensor to an HxWx3 float array clamped to [0, 1]."""
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise ConfigurationError("tensor_to_image expects a single image")
        t = t[0]
    return t.detach().clamp(0.0, 1.0).permute(1, 2, 0).cpu().numpy()


def _reflect_indices(n: int, target: int) -> Tensor:
    idx = np.arange(target)
    if n == 1:
        return torch.zeros(target, dtype=torch.long)
    period = 2 * (n - 1)
    idx = idx % period
    idx = np.where(idx >= n, period - idx, idx)
    return torch.from_numpy(idx.astype(np.int64))


def padded_size(h: int, w: int, stride: int = STRIDE) -> tuple[int, int]:
    return -(-h // stride) * stride, -(-w // stride) * stride


def pad_to_stride(img: Tensor, stride: int = STRIDE) -> tuple[Tensor, tuple[int, int]]:
    """Reflection-pad the bottom/right edges up to the next multiple of ``stride``.

    Works for any size, including a single pixel (which pads to a constant).
    """
    h, w = img.shape[-2:]
    if h < 1 or w < 1:
        raise ConfigurationError("image must be at least 1x1")
    ph, pw = padded_size(h, w, stride)
    out = img
    if ph != h:
        out = out.index_select(-2, _reflect_indices(h, ph))
    if pw != w:
        out = out.index_select(-1, _reflect_indices(w, pw))
    return out, (h, w)


def crop_to(img: Tensor, size: tuple[int, int]) -> Tensor:
    return img[..., : size[0], : size[1]]


# ---------------------------------------------------------------------------
# forward passes


def encode_forward(codec: Codec, img: Tensor) -> Tensor:
    """Pre-quantization latent ``y`` of a stride-padded NCHW image."""
    if img.dim() != 4 or img.shape[1] != 3:
        raise ConfigurationError(f"expected Nx3xHxW image tensor, got {tuple(img.shape)}")
    h, w = img.shape[-2:]
    if h % STRIDE or w % STRIDE:
        raise ConfigurationError(f"image size {h}x{w} is not a multiple of {STRIDE}; pad first")
    return codec.encoder(img)


def quantize(y: Tensor, mode: str, generator: Optional[torch.Generator] = None) -> Tensor:
    """``noisy`` adds U(-0.5, 0.5) noise, ``round`` rounds half to even."""
    if mode == "round":
        return torch.round(y)
    if mode == "noisy":
        noise = torch.rand(y.shape, generator=generator, dtype=y.dtype, device=y.device) - 0.5
        return y + noise
    raise ConfigurationError(f"unknown quantization mode {mode!r}")


def decode_forward(codec: Codec, latent: Tensor, clamp: bool = True) -> Tensor:
    if latent.dim() != 4 or latent.shape[1] != codec.cfg.latent_channels:
        raise ConfigurationError(
            f"latent has shape {tuple(latent.shape)}, codec expects "
            f"{codec.cfg.latent_channels} channels"
        )
    out = codec.decoder(latent)
    return out.clamp(0.0, 1.0) if clamp else out


def latent_likelihood(latent: Tensor, pm: ProbabilityModel) -> Tensor:
    """Per-element probability of an ``(N, C, h, w)`` latent, floored at 2**-16."""
    n, c, h, w = latent.shape
    if c != pm.channels:
        raise ConfigurationError(f"latent has {c} channels, probability model has {pm.channels}")
    values = latent.permute(1, 0, 2, 3).reshape(c, -1)
    probs = pm.pmf(values)
    probs = lower_bound(probs, LIKELIHOOD_FLOOR)
    return probs.reshape(c, n, h, w).permute(1, 0, 2, 3)


# ---------------------------------------------------------------------------
# parameter partitioning


def partition_label(name: str) -> str:
    """Partition label of a hierarchical parameter name."""
    root, _, rest = name.partition(".")
    if root in ("encoder", "probability_model", "discriminator"):
        return root
    if root == "decoder":
        layer = rest.split(".", 1)[0]
        if not layer.startswith("layer"):
            raise ConfigurationError(f"cannot label decoder parameter {name!r}")
        return "decoder_head" if int(layer[5:]) in DECODER_HEAD_LAYERS else "decoder_tail"
    raise ConfigurationError(f"cannot label parameter {name!r}")


class ParameterSet:
    """Named learnable arrays of the codec (and optionally the discriminator)."""

    def __init__(self, entries: "OrderedDict[str, nn.Parameter]"):
        self.entries = entries
        self.labels = {name: partition_label(name) for name in entries}

    @classmethod
    def from_modules(cls, codec: Codec, discriminator: Optional[nn.Module] = None) -> "ParameterSet":
        entries = OrderedDict(codec.named_parameters())
        if discriminator is not None:
            for name, p in discriminator.named_parameters():
                entries[f"discriminator.{name}"] = p
        return cls(entries)

    def names(self, label: str) -> list[str]:
        return [n for n, lab in self.labels.items() if lab == label]

    def __iter__(self):
        return iter(self.entries.items())

    def __len__(self) -> int:
        return len(self.entries)

    def snapshot(self) -> dict[str, Tensor]:
        return {n: p.detach().clone() for n, p in self.entries.items()}


def partition_parameters(ps: ParameterSet, trainable: Iterable[str]):
    """Split ``ps`` into trainable and frozen arrays and set ``requires_grad`` to match.

    Returns two ordered dicts ``(trainable, frozen)``.
    """
    trainable = set(trainable)
    unknown = trainable - set(PARTITION_LABELS)
    if unknown:
        raise ConfigurationError(f"unknown partition labels: {sorted(unknown)}")
    train, frozen = OrderedDict(), OrderedDict()
    for name, p in ps:
        if ps.labels[name] in trainable:
            p.requires_grad_(True)
            train[name] = p
        else:
            p.requires_grad_(False)
            p.grad = None
            frozen[name] = p
    return train, frozen
