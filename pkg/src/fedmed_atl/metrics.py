"""MAE, PSNR and whole-image SSIM, plus the evaluation harness.

All metrics work on intensities in [0, 1] with unit peak. SSIM uses global
image statistics with population (1/N) variances and the constants
``C1 = 0.01``, ``C2 = 0.03`` taken literally; ``SsimConstants.standard()``
gives the conventional squared form ``(0.01)^2, (0.03)^2`` instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .imaging import METRIC_RANGE, TRAIN_RANGE, Slice2D, normalize_array
from .mud import SamplePair


@dataclass(frozen=True)
class SsimConstants:
    c1: float = 0.01
    c2: float = 0.03

    def __post_init__(self):
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM constants must be positive")

    @classmethod
    def standard(cls, peak: float = 1.0) -> SsimConstants:
        return cls((0.01 * peak) ** 2, (0.03 * peak) ** 2)


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, Slice2D) else np.asarray(img, dtype=np.float64)


def _pair(truth, gen) -> tuple[np.ndarray, np.ndarray]:
    t, g = _pixels(truth), _pixels(gen)
    if t.shape != g.shape:
        raise ValueError(f"image shapes differ: {t.shape} vs {g.shape}")
    return t, g


def mae(truth, gen) -> float:
    t, g = _pair(truth, gen)
    return float(np.mean(np.abs(t - g)))


def psnr(truth, gen) -> float:
    """``-10 log10(MSE)``; identical images give ``math.inf``."""
    t, g = _pair(truth, gen)
    mse = float(np.mean((t - g) ** 2))
    return math.inf if mse == 0 else -10.0 * math.log10(mse)


def ssim(truth, gen, c: SsimConstants = SsimConstants()) -> float:
    t, g = _pair(truth, gen)
    mu_t, mu_g = t.mean(), g.mean()
    var_t = np.mean((t - mu_t) ** 2)
    var_g = np.mean((g - mu_g) ** 2)
    cov = np.mean((t - mu_t) * (g - mu_g))
    num = (2 * mu_t * mu_g + c.c1) * (2 * cov + c.c2)
    den = (mu_t ** 2 + mu_g ** 2 + c.c1) * (var_t + var_g + c.c2)
    return float(num / den)


@dataclass
class MetricsReport:
    """Means over per-image scores; images with infinite PSNR are left out of
    the PSNR mean and counted in ``n_psnr_infinite``."""

    mae: float
    psnr: float
    ssim: float
    n_images: int
    n_psnr_infinite: int = 0
    per_image: list[dict] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: list[dict]) -> MetricsReport:
        if not records:
            raise ValueError("cannot report on zero images")
        finite = [r["psnr"] for r in records if math.isfinite(r["psnr"])]
        return cls(
            mae=float(np.mean([r["mae"] for r in records])),
            psnr=float(np.mean(finite)) if finite else math.inf,
            ssim=float(np.mean([r["ssim"] for r in records])),
            n_images=len(records),
            n_psnr_infinite=len(records) - len(finite),
            per_image=records,
        )

    def beats(self, other: MetricsReport) -> bool:
        """Strictly better on all three metrics."""
        return self.mae < other.mae and self.psnr > other.psnr and self.ssim > other.ssim


def to_metric_range(arr: np.ndarray) -> np.ndarray:
    return normalize_array(arr, TRAIN_RANGE, METRIC_RANGE)


def score_images(truths: Sequence[np.ndarray], outputs: Sequence[np.ndarray],
                 c: SsimConstants = SsimConstants()) -> MetricsReport:
    """Score images already in [0, 1]."""
    records = [{"index": i, "mae": mae(t, o), "psnr": psnr(t, o), "ssim": ssim(t, o, c)}
               for i, (t, o) in enumerate(zip(truths, outputs))]
    return MetricsReport.from_records(records)


def translate_batch(generator: Callable, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Run a generator (torch module or array callable) over ``(N, H, W)`` images."""
    if isinstance(generator, torch.nn.Module):
        dtype = next(generator.parameters()).dtype
        outs = []
        with torch.no_grad():
            for s in range(0, len(images), batch_size):
                x = torch.as_tensor(images[s:s + batch_size], dtype=dtype).unsqueeze(1)
                outs.append(generator(x).squeeze(1).double().numpy())
        return np.concatenate(outs) if outs else np.empty_like(images)
    return np.asarray(generator(images), dtype=np.float64)


def evaluate(generator: Callable, test_pairs: Sequence[SamplePair],
             c: SsimConstants = SsimConstants()) -> MetricsReport:
    """Translate each ``img_a`` and score against ``img_b`` in [0, 1].

    ``generator`` is a torch module or any callable mapping an ``(N, H, W)``
    array in the training range to an array of the same shape.
    """
    if not test_pairs:
        raise ValueError("evaluation needs at least one test pair")
    a = np.stack([p.img_a.pixels for p in test_pairs])
    b = np.stack([p.img_b.pixels for p in test_pairs])
    out = translate_batch(generator, a)
    return score_images(to_metric_range(b), to_metric_range(np.clip(out, -1.0, 1.0)), c)


def identity_generator(images: np.ndarray) -> np.ndarray:
    return np.asarray(images, dtype=np.float64)
