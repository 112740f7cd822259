"""Image quality metrics, checkerboard energy and per-checkpoint reports."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .codec_core import Codec, image_to_tensor, pad_to_stride
from .errors import ConfigurationError
from .losses import PERCEPTUAL_LEVELS, PROXY_LEVELS, FeatureExtractor, feature_distance

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
BT601 = np.array([0.299, 0.587, 0.114])
NYQUIST_BAND = 0.05

REPORT_NOTES = {
    "feature_fidelity": "feature-fidelity (mAP surrogate): P2+P4 feature MSE, lower is better",
    "perceptual_layers": "post-activation outputs of conv blocks 2 and 5 of the feature extractor",
    "bpp": "8 * payload bytes / source pixels of the actual bitstream",
    "luminance": "ITU-R BT.601",
}


def _as_float(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def _to_8bit(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64)
    return np.round(np.clip(arr.astype(np.float64), 0.0, 1.0) * 255.0)


def _check_shapes(x, x_hat):
    if np.shape(x) != np.shape(x_hat):
        raise ConfigurationError(f"shape mismatch: {np.shape(x)} vs {np.shape(x_hat)}")


def luminance(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) @ BT601


def psnr(x, x_hat) -> float:
    """PSNR in dB on 8-bit RGB; identical images report 99 dB."""
    _check_shapes(x, x_hat)
    mse = np.mean((_to_8bit(x) - _to_8bit(x_hat)) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(255.0 ** 2 / mse)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(x, x_hat, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM of the BT.601 luminance over all fully-covered window positions."""
    _check_shapes(x, x_hat)
    a = luminance(_to_8bit(x))
    b = luminance(_to_8bit(x_hat))
    if min(a.shape) < win_size:
        raise ConfigurationError(f"image {a.shape} is smaller than the {win_size}x{win_size} window")
    win = gaussian_window(win_size, sigma)
    c1, c2 = (k1 * 255) ** 2, (k2 * 255) ** 2

    def filt(img):
        return np.einsum("ijkl,kl->ij", sliding_window_view(img, win.shape), win)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _feature_input(img, stride: int = 16) -> torch.Tensor:
    t = image_to_tensor(img) if not isinstance(img, torch.Tensor) else img
    padded, _ = pad_to_stride(t, stride)
    return padded


@torch.no_grad()
def perceptual_distance(x, x_hat, fe: FeatureExtractor) -> float:
    """Feature MSE at the 2nd and 5th conv blocks of ``fe``, summed."""
    _check_shapes(x, x_hat)
    return float(feature_distance(_feature_input(x), _feature_input(x_hat), fe, PERCEPTUAL_LEVELS))


@torch.no_grad()
def feature_fidelity(x, x_hat, fe: FeatureExtractor) -> float:
    """Proxy-loss value (P2 + P4 feature MSE) between an image and its reconstruction."""
    _check_shapes(x, x_hat)
    return float(feature_distance(_feature_input(x), _feature_input(x_hat), fe, PROXY_LEVELS))


def nyquist_mask(h: int, w: int, band: float = NYQUIST_BAND) -> np.ndarray:
    fy = np.abs(np.fft.fftfreq(h))[:, None]
    fx = np.abs(np.fft.fftfreq(w))[None, :]
    return (fy >= 0.5 - band - 1e-12) | (fx >= 0.5 - band - 1e-12)


def checkerboard_energy(x_hat, x, band: float = NYQUIST_BAND) -> float:
    """Share of the luminance residual's spectral energy near the Nyquist frequency.

    Counts frequencies within ``band`` of 0.5 cycles/pixel along either axis
    (which includes the (0.5, 0.5) corner). Zero residual gives 0.
    """
    _check_shapes(x, x_hat)
    residual = luminance(_as_float(x_hat)) - luminance(_as_float(x))
    power = np.abs(np.fft.fft2(residual)) ** 2
    total = power.sum()
    if total <= 0:
        return 0.0
    return float(power[nyquist_mask(*residual.shape, band)].sum() / total)


def checkerboard_energy_map(x_hat, x, tile: int = 32, stride: int = 16) -> tuple[np.ndarray, list]:
    """Checkerboard energy of overlapping tiles; returns ``(values, [(top, left), ...])``."""
    h, w = np.shape(x)[:2]
    tile = min(tile, h, w)
    values, coords = [], []
    for top in range(0, h - tile + 1, stride):
        for left in range(0, w - tile + 1, stride):
            sl = (slice(top, top + tile), slice(left, left + tile))
            values.append(checkerboard_energy(np.asarray(x_hat)[sl], np.asarray(x)[sl]))
            coords.append((top, left))
    return np.array(values), coords


@torch.no_grad()
def feature_fidelity_of_codec(codec: Codec, images: Sequence[np.ndarray], fe: FeatureExtractor) -> float:
    """Mean feature fidelity of in-memory reconstructions (rounded latents, no entropy coding)."""
    from .pipeline import ImageCodec

    if not images:
        return 0.0
    runner = ImageCodec(codec)
    return float(np.mean([feature_fidelity(_as_float(im), runner.reconstruct(im), fe) for im in images]))


# ---------------------------------------------------------------------------
# reports

METRIC_KEYS = ("bpp", "psnr", "ssim", "perceptual", "feature_fidelity", "checkerboard_energy")


@dataclass
class MetricsReport:
    records: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    checkpoint_hash: str = ""
    config: dict = field(default_factory=dict)
    label: str = ""
    notes: dict = field(default_factory=lambda: dict(REPORT_NOTES))

    @property
    def aggregates(self) -> dict:
        if not self.records:
            return {}
        return {k: float(np.mean([r[k] for r in self.records])) for k in METRIC_KEYS}

    def medians(self) -> dict:
        if not self.records:
            return {}
        return {k: float(np.median([r[k] for r in self.records])) for k in METRIC_KEYS}

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "checkpoint_hash": self.checkpoint_hash,
            "config": self.config,
            "notes": self.notes,
            "records": self.records,
            "failures": self.failures,
            "aggregates": self.aggregates,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(
            records=d["records"],
            failures=d.get("failures", []),
            checkpoint_hash=d.get("checkpoint_hash", ""),
            config=d.get("config", {}),
            label=d.get("label", ""),
            notes=d.get("notes", {}),
        )

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / f"{stem}.json"
        json_path.write_text(self.to_json())
        csv_path = out_dir / f"{stem}.csv"
        write_table_csv([self], csv_path)
        return json_path, csv_path


TABLE_COLUMNS = (
    "configuration",
    "feature_fidelity_map_surrogate",
    "psnr",
    "ssim",
    "perceptual",
    "bpp",
    "checkerboard_energy",
)


def write_table_csv(reports: Sequence[MetricsReport], path):
    """One row per report, columns in the order configuration, mAP surrogate, PSNR, SSIM, perceptual."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TABLE_COLUMNS)
        for rep in reports:
            agg = rep.aggregates
            if not agg:
                writer.writerow([rep.label] + [""] * (len(TABLE_COLUMNS) - 1))
                continue
            writer.writerow(
                [
                    rep.label,
                    f"{agg['feature_fidelity']:.6f}",
                    f"{agg['psnr']:.3f}",
                    f"{agg['ssim']:.4f}",
                    f"{agg['perceptual']:.6f}",
                    f"{agg['bpp']:.4f}",
                    f"{agg['checkerboard_energy']:.4f}",
                ]
            )


def evaluate_image(runner, img: np.ndarray, fe: FeatureExtractor) -> dict:
    x = _as_float(img)
    x_hat, payload_bytes = runner.roundtrip(img)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    h, w = x.shape[:2]
    return {
        "bpp": 8.0 * payload_bytes / (h * w),
        "psnr": psnr(x, x_hat),
        "ssim": ssim(x, x_hat),
        "perceptual": perceptual_distance(x, x_hat, fe),
        "feature_fidelity": feature_fidelity(x, x_hat, fe),
        "checkerboard_energy": checkerboard_energy(x_hat, x),
    }


def evaluate_codec(runner, images, fe: FeatureExtractor, config: Optional[dict] = None, label: str = "") -> MetricsReport:
    """Evaluate ``runner`` (anything with ``roundtrip(img) -> (x_hat, payload_bytes)``).

    ``images`` is a sequence of ``(image_id, array)`` pairs. A failing image is
    recorded in ``failures`` and the batch continues.
    """
    report = MetricsReport(checkpoint_hash=getattr(runner, "checkpoint_hash", ""), config=dict(config or {}), label=label)
    report.notes = dict(REPORT_NOTES, feature_extractor=fe.manifest())
    for image_id, img in images:
        try:
            rec = evaluate_image(runner, img, fe)
        except Exception as exc:
            log.warning("evaluation failed for %s: %s", image_id, exc)
            report.failures.append({"image_id": str(image_id), "error": f"{type(exc).__name__}: {exc}"})
            continue
        report.records.append({"image_id": str(image_id), **rec})
    return report


def evaluate_checkpoint(checkpoint, images, fe: FeatureExtractor, label: str = "") -> MetricsReport:
    from .checkpoint import load_codec
    from .pipeline import ImageCodec

    codec, manifest = load_codec(checkpoint)
    runner = ImageCodec(codec, manifest["content_hash"])
    config = {"codec": manifest["config"], "checkpoint": str(checkpoint), "step": manifest.get("step", 0)}
    if "finetune" in manifest:
        config["finetune"] = manifest["finetune"]
    return evaluate_codec(runner, images, fe, config=config, label=label or Path(checkpoint).name)


# ---------------------------------------------------------------------------
# comparison panels


def comparison_grid(reference, decoded: Sequence[np.ndarray], tile: int = 32, zoom: int = 4, gap: int = 4) -> tuple[np.ndarray, tuple]:
    """Side-by-side zoomed crops of ``decoded`` images at the tile where the first one has the most checkerboard energy.

    Returns the uint8 grid and the ``(top, left, size)`` of the chosen region.
    """
    ref = _as_float(reference)
    values, coords = checkerboard_energy_map(decoded[0], ref, tile=tile, stride=max(1, tile // 2))
    top, left = coords[int(np.argmax(values))]
    size = min(tile, ref.shape[0], ref.shape[1])
    panels = []
    for img in decoded:
        crop = _as_float(img)[top : top + size, left : left + size]
        panels.append(np.kron(crop, np.ones((zoom, zoom, 1))))
    height = panels[0].shape[0]
    spacer = np.ones((height, gap, 3))
    row = [panels[0]]
    for p in panels[1:]:
        row += [spacer, p]
    grid = np.concatenate(row, axis=1)
    return np.round(np.clip(grid, 0, 1) * 255).astype(np.uint8), (top, left, size)
