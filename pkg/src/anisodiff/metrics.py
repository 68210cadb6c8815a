"""Similarity metrics: MSE, PSNR, per-slice SSIM, and a per-plane perceptual distance.

The perceptual distance follows the LPIPS construction (channel-normalised
multi-stage features, squared differences averaged spatially, summed over
stages). The default backbone is a fixed-seed random convolutional pyramid,
so scores are reported as "lpips-proxy" and are not comparable with
AlexNet-based LPIPS values.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .volume import ContractError, ShapeError, Volume, enface_projection

DATA_RANGE = 2.0
CSV_COLUMNS = (
    "method", "mse", "ssim", "psnr_db",
    "lpips_axi", "lpips_cor", "lpips_sag", "lpips_25d", "lpips_efproj",
)
METRIC_NAMES = CSV_COLUMNS[1:]


def _arrays(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = a.data if isinstance(a, Volume) else np.asarray(a)
    b = b.data if isinstance(b, Volume) else np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a.astype(np.float64), b.astype(np.float64)


def mse(a, b) -> float:
    x, y = _arrays(a, b)
    return float(np.mean((x - y) ** 2))


def psnr(a, b, data_range: float = DATA_RANGE) -> float:
    m = mse(a, b)
    if m == 0.0:
        return math.inf
    return float(10.0 * np.log10(data_range**2 / m))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the last two axes."""
    n = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=-2) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=-1) @ g


def ssim_map(
    a: np.ndarray, b: np.ndarray, data_range: float = DATA_RANGE,
    win: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
) -> np.ndarray:
    """SSIM map over the last two axes using a Gaussian window (valid region only)."""
    g = gaussian_window(win, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float = DATA_RANGE) -> float:
    """Mean over axial slices of 2-D Gaussian-window SSIM."""
    x, y = _arrays(a, b)
    if x.ndim == 2:
        x, y = x[None], y[None]
    if x.shape[-1] < 11 or x.shape[-2] < 11:
        raise ContractError(f"SSIM needs slices of at least 11x11, got {x.shape[-2:]}")
    per_slice = ssim_map(x, y, data_range).mean(axis=(-2, -1))
    return float(per_slice.mean())


# -- perceptual distance ---------------------------------------------------------


class FeatureExtractor(Protocol):
    def features(self, images: np.ndarray) -> list[np.ndarray]:
        """(N, h, w) or (h, w) images -> per-stage (N, C, h', w') channel-normalised maps."""
        ...


class RandomConvFeatures:
    """Fixed-seed 3-stage conv pyramid (stride 2 between stages, biased ReLU).

    The biases matter: without them a flat region near zero intensity gives
    near-zero activations, and channel normalisation then turns faint noise
    there into unit-length feature differences.
    """

    def __init__(
        self,
        seed: int = 0,
        channels: Sequence[int] = (16, 32, 64),
        weights=None,
        biases=None,
        bias_std: float = 0.5,
    ):
        rng = np.random.default_rng(seed)
        if weights is None:
            weights, cin = [], 1
            for c in channels:
                std = math.sqrt(2.0 / (cin * 9))
                weights.append(rng.normal(0.0, std, size=(c, cin, 3, 3)).astype(np.float32))
                cin = c
        if biases is None:
            biases = [rng.normal(0.0, bias_std, size=len(w)) for w in weights]
        self.weights = [torch.from_numpy(np.asarray(w, dtype=np.float32)) for w in weights]
        self.biases = [torch.from_numpy(np.asarray(b, dtype=np.float32)) for b in biases]

    def features(self, images: np.ndarray) -> list[np.ndarray]:
        x = np.asarray(images, dtype=np.float32)
        if x.ndim == 2:
            x = x[None]
        h = torch.from_numpy(np.ascontiguousarray(x))[:, None]
        out = []
        with torch.no_grad():
            for i, (w, b) in enumerate(zip(self.weights, self.biases)):
                h = F.relu(F.conv2d(h, w, b, stride=1 if i == 0 else 2, padding=1))
                norm = torch.sqrt(torch.sum(h * h, dim=1, keepdim=True))
                out.append((h / (norm + 1e-10)).numpy().astype(np.float64))
        return out


def perceptual_distance(a: np.ndarray, b: np.ndarray, fx: FeatureExtractor) -> np.ndarray:
    """Per-image distance for batches of 2-D images (N, h, w); returns shape (N,)."""
    fa, fb = fx.features(a), fx.features(b)
    d = np.zeros(len(fa[0]))
    for x, y in zip(fa, fb):
        d += np.sum((x - y) ** 2, axis=1).mean(axis=(-2, -1))
    return d


def plane_stacks(v: np.ndarray) -> dict[str, np.ndarray]:
    """Slices of a (z, y, x) array per plane family, each as a batch of 2-D images."""
    return {
        "axi": v,  # (D, H, W): B-scans
        "cor": np.transpose(v, (1, 0, 2)),  # (H, D, W): x-z planes at fixed depth
        "sag": np.transpose(v, (2, 0, 1)),  # (W, D, H): y-z planes at fixed x
    }


def lpips_planes(a, b, fx: FeatureExtractor) -> tuple[float, float, float, float]:
    x, y = _arrays(a, b)
    pa, pb = plane_stacks(x), plane_stacks(y)
    scores = [float(perceptual_distance(pa[k], pb[k], fx).mean()) for k in ("axi", "cor", "sag")]
    return scores[0], scores[1], scores[2], float(np.mean(scores))


def lpips_efproj(a, b, fx: FeatureExtractor) -> float:
    if not isinstance(a, Volume):
        a, b = Volume(a), Volume(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"shape mismatch {a.data.shape} vs {b.data.shape}")
    ea, eb = enface_projection(a).data, enface_projection(b).data
    return float(perceptual_distance(ea, eb, fx)[0])


# -- reports --------------------------------------------------------------------


def volume_metrics(reference, candidate, fx: FeatureExtractor) -> dict[str, float]:
    axi, cor, sag, avg = lpips_planes(reference, candidate, fx)
    return {
        "mse": mse(reference, candidate),
        "ssim": ssim(reference, candidate),
        "psnr_db": psnr(reference, candidate),
        "lpips_axi": axi,
        "lpips_cor": cor,
        "lpips_sag": sag,
        "lpips_25d": avg,
        "lpips_efproj": lpips_efproj(reference, candidate, fx),
    }


@dataclass
class MetricReport:
    method: str
    per_volume: list[dict[str, float]] = field(default_factory=list)

    def mean(self) -> dict[str, float]:
        return {k: float(np.mean([r[k] for r in self.per_volume])) for k in METRIC_NAMES}

    def std(self) -> dict[str, float]:
        # population convention (ddof = 0)
        out = {}
        for k in METRIC_NAMES:
            vals = np.array([r[k] for r in self.per_volume])
            out[k] = 0.0 if np.all(vals == vals[0]) else float(np.std(vals))
        return out


def evaluate(
    references: Volume | Sequence[Volume],
    candidates: Mapping[str, Volume | Sequence[Volume]],
    fx: FeatureExtractor | None = None,
) -> dict[str, MetricReport]:
    fx = fx or RandomConvFeatures()
    refs = [references] if isinstance(references, Volume) else list(references)
    reports = {}
    for name, cands in candidates.items():
        cands = [cands] if isinstance(cands, Volume) else list(cands)
        if len(cands) != len(refs):
            raise ShapeError(f"{name}: {len(cands)} candidates for {len(refs)} references")
        reports[name] = MetricReport(name, [volume_metrics(r, c, fx) for r, c in zip(refs, cands)])
    return reports


def report_rows(
    reports: Mapping[str, MetricReport], per_volume: bool = False, with_std: bool = True
) -> list[list]:
    """CSV rows (header first): '<method>' holds means, '<method>:std' population stds,
    '<method>:vol<i>' per-volume values."""
    rows: list[list] = [list(CSV_COLUMNS)]
    for name, rep in reports.items():
        m = rep.mean()
        rows.append([name] + [m[k] for k in METRIC_NAMES])
        if with_std:
            s = rep.std()
            rows.append([f"{name}:std"] + [s[k] for k in METRIC_NAMES])
        if per_volume:
            for i, r in enumerate(rep.per_volume):
                rows.append([f"{name}:vol{i}"] + [r[k] for k in METRIC_NAMES])
    return rows


def write_csv(path: str | Path, reports: Mapping[str, MetricReport], **kw) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in report_rows(reports, **kw):
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])
