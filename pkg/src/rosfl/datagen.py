"""Deterministic synthetic shards for restoration and segmentation.

Restoration pairs apply photon-count noise to soft-edged phantoms: the
clean image, scaled into an attenuation range, is treated as the line
integral p, the measurement is Poisson(I0*exp(-p)) plus Gaussian
electronic noise, and the noisy image is the re-normalized log
transform. Per-client photon counts I0 provide the heterogeneity.
Segmentation pairs are labeled shape masks rendered with client-specific
contrast/bias plus Gaussian noise.

Every sample is a pure function of (seed, client id, sample index);
train and test draws come from disjoint stream purposes and clients
occupy disjoint index blocks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .errors import ConfigurationError
from .nn.rng import stream

_CLIENT_INDEX_BLOCK = 1 << 20  # keeps per-client sample indices disjoint


@dataclass(frozen=True)
class NoiseConfig:
    photon_count: float  # I0
    electronic_variance: float = 10.0  # sigma_e^2

    def validate(self) -> None:
        if self.photon_count <= 0:
            raise ConfigurationError(f"photon count must be > 0, got {self.photon_count}")
        if self.electronic_variance < 0:
            raise ConfigurationError("electronic noise variance must be >= 0")


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 32
    shape_count: tuple[int, int] = (2, 5)
    intensity_range: tuple[float, float] = (0.35, 0.95)
    attenuation_scale: float = 8.0
    doses: tuple[float, ...] = (1e5, 1e6, 5e4, 1.25e5)
    electronic_variance: float = 10.0
    contrasts: tuple[float, ...] = (1.0, 0.9, 1.1, 0.95)
    biases: tuple[float, ...] = (0.0, 0.05, -0.05, 0.02)
    n_classes: int = 3
    seg_noise_sigma: float = 0.05

    def validate(self) -> None:
        if self.image_size < 4:
            raise ConfigurationError("image size too small")
        if self.shape_count[0] < 1 or self.shape_count[1] < self.shape_count[0]:
            raise ConfigurationError("bad shape-count range")
        lo, hi = self.intensity_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ConfigurationError("intensity range must sit inside [0, 1]")
        if self.attenuation_scale <= 0:
            raise ConfigurationError("attenuation scale must be > 0")
        if any(d <= 0 for d in self.doses):
            raise ConfigurationError("doses must be > 0")
        if self.n_classes < 2:
            raise ConfigurationError("need at least 2 segmentation classes")

    def dose_for(self, client_id: int) -> float:
        return self.doses[client_id % len(self.doses)]

    def contrast_for(self, client_id: int) -> float:
        return self.contrasts[client_id % len(self.contrasts)]

    def bias_for(self, client_id: int) -> float:
        return self.biases[client_id % len(self.biases)]


class LowDoseResult(NamedTuple):
    projection: np.ndarray
    clamp_rate: float


def simulate_low_dose(p_hat: np.ndarray, cfg: NoiseConfig, rng: np.random.Generator | None,
                      oracle_mode: bool = False) -> LowDoseResult:
    """Photon-count noise on attenuation data p_hat >= 0.

    p = ln(I0 / (Poisson(I0*exp(-p_hat)) + Normal(0, sigma_e^2))), with
    the denominator floored at one count-equivalent; the floored
    fraction is reported as clamp_rate. In oracle mode the Poisson draw
    is replaced by its mean and the electronic term dropped, which makes
    the transform the identity on p_hat.
    """
    cfg.validate()
    if np.any(p_hat < 0):
        raise ConfigurationError("attenuation values must be >= 0")
    lam = cfg.photon_count * np.exp(-p_hat)
    if oracle_mode:
        measured = lam
    else:
        if rng is None:
            raise ConfigurationError("rng required outside oracle mode")
        sigma = float(np.sqrt(cfg.electronic_variance))
        measured = rng.poisson(lam).astype(np.float64)
        if sigma > 0:
            measured += rng.normal(0.0, sigma, size=p_hat.shape)
    clamped = measured < 1.0
    clamp_rate = float(np.mean(clamped))
    measured = np.maximum(measured, 1.0)
    return LowDoseResult(np.log(cfg.photon_count / measured), clamp_rate)


def _soft_ellipse(size: int, rng: np.random.Generator, intensity_range) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    cy, cx = rng.uniform(0.2, 0.8, size=2)
    ry, rx = rng.uniform(0.1, 0.3, size=2)
    angle = rng.uniform(0, np.pi)
    ca, sa = np.cos(angle), np.sin(angle)
    u = (xx - cx) * ca + (yy - cy) * sa
    v = -(xx - cx) * sa + (yy - cy) * ca
    r = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    intensity = rng.uniform(*intensity_range)
    edge = 0.08
    return intensity / (1.0 + np.exp((r - 1.0) / edge))


def _clean_phantom(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    k = int(rng.integers(spec.shape_count[0], spec.shape_count[1] + 1))
    img = np.zeros((spec.image_size, spec.image_size))
    for _ in range(k):
        img += _soft_ellipse(spec.image_size, rng, spec.intensity_range)
    return np.clip(img, 0.0, 1.0)


def restoration_pair(spec: PhantomSpec, seed: int, client_id: int, index: int,
                     split: str = "train", oracle_mode: bool = False):
    """(noisy, clean) image pair, each shaped (1, H, W)."""
    spec.validate()
    rng = stream(seed, f"restoration-{split}", client_id * _CLIENT_INDEX_BLOCK + index)
    clean = _clean_phantom(spec, rng)
    noise_cfg = NoiseConfig(spec.dose_for(client_id), spec.electronic_variance)
    p_hat = spec.attenuation_scale * clean
    result = simulate_low_dose(p_hat, noise_cfg, rng, oracle_mode=oracle_mode)
    noisy = np.clip(result.projection / spec.attenuation_scale, 0.0, 1.0)
    return noisy[None], clean[None], result.clamp_rate


def gen_restoration_shard(spec: PhantomSpec, seed: int, client_id: int, count: int,
                          split: str = "train"):
    """List of (noisy, clean) pairs plus the mean clamp rate."""
    pairs = []
    clamp_rates = []
    for i in range(count):
        noisy, clean, rate = restoration_pair(spec, seed, client_id, i, split)
        pairs.append((noisy, clean))
        clamp_rates.append(rate)
    return pairs, float(np.mean(clamp_rates)) if clamp_rates else 0.0


def segmentation_pair(spec: PhantomSpec, seed: int, client_id: int, index: int,
                      split: str = "train"):
    """(image, mask) pair: image (1, H, W) float, mask (H, W) int."""
    spec.validate()
    rng = stream(seed, f"segmentation-{split}", client_id * _CLIENT_INDEX_BLOCK + index)
    size = spec.image_size
    mask = np.zeros((size, size), dtype=np.int64)
    k = int(rng.integers(spec.shape_count[0], spec.shape_count[1] + 1))
    for _ in range(k):
        cls = int(rng.integers(1, spec.n_classes))
        yy, xx = np.mgrid[0:size, 0:size] / size
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        ry, rx = rng.uniform(0.12, 0.3, size=2)
        inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        mask[inside] = cls
    levels = 0.1 + 0.7 * np.arange(spec.n_classes) / (spec.n_classes - 1)
    image = levels[mask]
    image = spec.contrast_for(client_id) * image + spec.bias_for(client_id)
    image = image + rng.normal(0.0, spec.seg_noise_sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0)[None], mask


def gen_segmentation_shard(spec: PhantomSpec, seed: int, client_id: int, count: int,
                           split: str = "train"):
    return [segmentation_pair(spec, seed, client_id, i, split) for i in range(count)]


def save_shard(directory, pairs, manifest: dict) -> None:
    """Export a shard as a tensor container plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for i, (inp, target) in enumerate(pairs):
        tensors[f"sample{i:05d}/input"] = np.asarray(inp, dtype=np.float64)
        tensors[f"sample{i:05d}/target"] = np.asarray(target, dtype=np.float64)
    save_tensors(directory / "shard.ckpt", tensors)
    manifest = dict(manifest, count=len(pairs))
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_shard(directory):
    """Inverse of save_shard; restores integer masks for segmentation."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    tensors = load_tensors(directory / "shard.ckpt")
    pairs = []
    for i in range(manifest["count"]):
        inp = tensors[f"sample{i:05d}/input"]
        target = tensors[f"sample{i:05d}/target"]
        if manifest.get("task") == "segmentation":
            target = target.astype(np.int64)
        pairs.append((inp, target))
    return pairs, manifest
