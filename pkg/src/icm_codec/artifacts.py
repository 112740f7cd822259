"""Differentiable checkerboard energy and controlled artifact injection into the decoder head.

Used to build an artifacted starting point when a desk-scale base codec is
too clean to show checkerboard patterns on its own.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import Tensor

from .codec_core import Codec, ParameterSet, decode_forward, encode_forward, quantize
from .evaluation import BT601, NYQUIST_BAND, checkerboard_energy, nyquist_mask


@torch.no_grad()
def median_checkerboard_energy(codec: Codec, images: Tensor) -> float:
    latent = quantize(encode_forward(codec, images), "round")
    x_hat = decode_forward(codec, latent)
    vals = [
        checkerboard_energy(x_hat[i].permute(1, 2, 0).numpy(), images[i].permute(1, 2, 0).numpy())
        for i in range(images.shape[0])
    ]
    return float(np.median(vals))


def nyquist_ratio(x_hat: Tensor, x: Tensor, band: float = NYQUIST_BAND) -> Tensor:
    """Per-image differentiable checkerboard energy, shape ``(N,)``."""
    w = torch.tensor(BT601, dtype=x.dtype).view(1, 3, 1, 1)
    residual = ((x_hat - x) * w).sum(1)
    power = torch.fft.fft2(residual).abs() ** 2
    mask = torch.from_numpy(nyquist_mask(*residual.shape[-2:], band))
    return power[:, mask].sum(-1) / power.flatten(1).sum(-1).clamp_min(1e-20)


def inject_checkerboard(
    codec: Codec,
    images: Tensor,
    target: float = 0.25,
    lr: float = 1e-3,
    max_steps: int = 500,
) -> dict:
    """Push the decoder head towards checkerboard output until the median
    checkerboard energy on ``images`` reaches ``target``.

    Runs Adam on the decoder-head parameters only, ascending the mean
    per-image Nyquist share of the residual. Modifies ``codec`` in place.
    """
    ps = ParameterSet.from_modules(codec)
    head = [p for n, p in ps if ps.labels[n] == "decoder_head"]
    flags = [p.requires_grad for p in codec.parameters()]
    original = [p.detach().clone() for p in head]
    with torch.no_grad():
        latent = quantize(encode_forward(codec, images), "round")
    codec.requires_grad_(False)
    for p in head:
        p.requires_grad_(True)
    opt = torch.optim.Adam(head, lr=lr)
    value = median_checkerboard_energy(codec, images)
    steps = 0
    try:
        while value < target and steps < max_steps:
            opt.zero_grad(set_to_none=True)
            loss = -nyquist_ratio(decode_forward(codec, latent), images).mean()
            loss.backward()
            opt.step()
            steps += 1
            value = median_checkerboard_energy(codec, images)
    finally:
        for p, flag in zip(codec.parameters(), flags):
            p.requires_grad_(flag)
            p.grad = None
    shift = max(float((p.detach() - p0).abs().max()) for p, p0 in zip(head, original))
    return {"steps": steps, "median_energy": value, "target": target, "max_param_change": shift}
