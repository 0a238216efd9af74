"""Synthetic paired patch/expression samples.

Each spot draws a latent ``z ~ N(0, I)``.  Expression counts are Poisson with
rate ``count_scale * exp(clip(W z + b))``; the patch is a fixed texture whose
per-tile channel means are an affine image of the same ``z``.  Conditional on
``z`` the two modalities are independent, so any image-to-expression signal a
model picks up has to go through the latent.  Gene loadings ``W``, offsets
``b`` and the image map are shared by all samples.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..rng import substream
from .dataset import SampleDataset, SpotRecord

TILES = 2  # tile grid is TILES x TILES
LOG_RATE_CLIP = (-6.0, 4.0)
PIXEL_GAIN = 0.12


@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 4
    spots_per_sample: int = 256
    d: int = 64
    latent_dim: int = 4
    patch_size: int = 64
    noise_sd: float = 0.02
    count_scale: float = 20.0
    marker_count: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1 or self.spots_per_sample < 1 or self.d < 1:
            raise ConfigError("n_samples, spots_per_sample and d must be >= 1")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if not 0 <= self.marker_count <= self.d:
            raise ConfigError("marker_count must lie in [0, d]")
        if self.noise_sd < 0 or self.count_scale <= 0:
            raise ConfigError("noise_sd must be >= 0 and count_scale > 0")
        if self.patch_size < TILES or self.patch_size % TILES:
            raise ConfigError(f"patch_size must be a positive multiple of {TILES}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class _World:
    W: np.ndarray  # d x L
    b: np.ndarray  # d
    A: np.ndarray  # (TILES*TILES*3) x L
    c: np.ndarray  # TILES*TILES*3
    texture: np.ndarray  # P x P


def _world(spec: SyntheticSpec) -> _World:
    rng = substream(spec.seed, "world")
    L = spec.latent_dim
    W = rng.standard_normal((spec.d, L)) / np.sqrt(L)
    b = rng.normal(0.0, 0.5, spec.d)
    common = rng.standard_normal(L)
    common /= max(np.linalg.norm(common), 1e-12)
    A = common[None, :] + 0.5 * rng.standard_normal((TILES * TILES * 3, L))
    c = 0.3 * rng.standard_normal(TILES * TILES * 3)
    # markers: the largest-norm loadings, oriented to brighten with intensity
    order = np.argsort(-np.linalg.norm(W, axis=1), kind="stable")
    W, b = W[order], b[order]
    sign = np.sign(W[: spec.marker_count] @ A.mean(axis=0))
    sign[sign == 0] = 1.0
    W[: spec.marker_count] *= sign[:, None]
    yy, xx = np.mgrid[0 : spec.patch_size, 0 : spec.patch_size]
    texture = 0.04 * np.sin(2 * np.pi * xx / 8.0) * np.cos(2 * np.pi * yy / 8.0)
    return _World(W, b, A, c, texture)


def render_patches(z: np.ndarray, world: _World, patch_size: int, noise_sd: float, rng) -> np.ndarray:
    n = len(z)
    tile = patch_size // TILES
    means = (z @ world.A.T + world.c).reshape(n, TILES, TILES, 3)
    img = np.repeat(np.repeat(means, tile, axis=1), tile, axis=2)
    img = 0.5 + PIXEL_GAIN * img + world.texture[None, :, :, None]
    if noise_sd > 0:
        img = img + rng.normal(0.0, noise_sd, img.shape)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def sample_counts(z: np.ndarray, world: _World, count_scale: float, rng) -> np.ndarray:
    log_rate = np.clip(z @ world.W.T + world.b, *LOG_RATE_CLIP)
    counts = rng.poisson(count_scale * np.exp(log_rate)).astype(np.float64)
    # an all-zero spot cannot be normalized; give it one read on its likeliest gene
    empty = np.flatnonzero(counts.sum(axis=1) == 0)
    counts[empty, np.argmax(log_rate[empty], axis=1)] = 1.0
    return counts


def generate_synthetic(spec: SyntheticSpec, return_latents: bool = False):
    world = _world(spec)
    names = [f"GENE{i:04d}" for i in range(spec.d)]
    flags = np.arange(spec.d) < spec.marker_count
    side = int(np.ceil(np.sqrt(spec.spots_per_sample)))
    out, latents = [], []
    for s in range(spec.n_samples):
        sample_id = f"S{s + 1:02d}"
        rng = substream(spec.seed, "sample", sample_id)
        z = rng.standard_normal((spec.spots_per_sample, spec.latent_dim))
        counts = sample_counts(z, world, spec.count_scale, rng)
        patches = render_patches(z, world, spec.patch_size, spec.noise_sd, rng)
        spots = [
            SpotRecord(f"{sample_id}_{i:05d}", i % side, i // side, i) for i in range(spec.spots_per_sample)
        ]
        out.append(
            SampleDataset(sample_id, spots, counts, list(names), flags.copy(), patches, meta={"synthetic": True})
        )
        latents.append(z)
    return (out, latents) if return_latents else out
