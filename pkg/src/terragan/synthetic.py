"""Deterministic synthetic data: toy image pools and a demo ROI on disk.

Everything here is a pure function of its seed, which keeps training
smoke-checks and dataset-digest comparisons stable across runs and machines.
"""

from __future__ import annotations

import os

import numpy as np

from .geodata import (GeoRaster, compute_stats, footprint_polygon, save_rgb8,
                      tile_raster, write_ascii_grid)
from .tensor import Rng
from .terrain import PerlinParams, perlin_heightfield

__all__ = [
    "gradient_blob_images", "luminance", "luminance_pairs", "grayscale_pairs",
    "demo_roi",
]

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def _gaussian_bump(size: int, cx: float, cy: float, sigma: float) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    d2 = (ii / size - cy) ** 2 + (jj / size - cx) ** 2
    return np.exp(-d2 / (2.0 * sigma ** 2))


def gradient_blob_images(n: int, size: int, rng: Rng,
                         channels: int = 3) -> np.ndarray:
    """[n, channels, size, size] pool of smooth gradients and blobs in (-1,1)."""
    out = np.zeros((n, channels, size, size), dtype=np.float64)
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    for k in range(n):
        for c in range(channels):
            if k % 2 == 0:
                theta = float(rng.uniform(1, 0, 2 * np.pi)[0])
                ramp = (np.cos(theta) * jj + np.sin(theta) * ii) / size
                img = ramp - ramp.mean()
            else:
                img = np.zeros((size, size))
                for _ in range(3):
                    cx, cy = rng.uniform(2, 0.15, 0.85)
                    sigma = float(rng.uniform(1, 0.08, 0.25)[0])
                    sign = 1.0 if int(rng.integers(1, 2)[0]) == 0 else -1.0
                    img += sign * _gaussian_bump(size, cx, cy, sigma)
            peak = np.abs(img).max()
            if peak > 0:
                img = img / peak * 0.9
            out[k, c] = img
    return out.astype(np.float32)


def luminance(rgb: np.ndarray) -> np.ndarray:
    """[..., 3, H, W] -> [..., 1, H, W] weighted gray (Rec. 601 weights)."""
    gray = np.einsum("c,...chw->...hw", LUMA_WEIGHTS, rgb)
    return np.expand_dims(gray, -3).astype(np.float32)


def luminance_pairs(n: int, size: int, rng: Rng,
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Paired pool for the forward toy task: target = luminance(condition)."""
    rgb = gradient_blob_images(n, size, rng, channels=3)
    return rgb, luminance(rgb)


def grayscale_pairs(n: int, size: int, rng: Rng,
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Paired pool for the inverse toy task: gray triplet from a heightfield."""
    dem = gradient_blob_images(n, size, rng, channels=1)
    rgb = np.repeat(dem, 3, axis=1)
    return dem, rgb


# ---------------------------------------------------------------------------
# Demo region of interest
# ---------------------------------------------------------------------------

_COLOR_STOPS = np.array([
    [0.00, 52, 102, 68],     # lowland green
    [0.45, 140, 118, 82],    # hillside brown
    [0.80, 196, 188, 176],   # rock
    [1.00, 245, 245, 245],   # snow
], dtype=np.float64)


def _elevation_colors(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Map meters onto a green-brown-white ramp, uint8 [H,W,3]."""
    t = np.clip((values - lo) / max(hi - lo, 1e-9), 0.0, 1.0)
    stops = _COLOR_STOPS[:, 0]
    rgb = np.zeros((*values.shape, 3), dtype=np.float64)
    for ch in range(3):
        rgb[..., ch] = np.interp(t, stops, _COLOR_STOPS[:, ch + 1])
    return np.rint(rgb).astype(np.uint8)


def demo_roi(directory, seed: int = 0, raster_size: int = 512,
             tile_size: int = 256, origin=(23.0, 38.5),
             cellsize: float = 0.001, base_elevation: float = 200.0,
             relief: float = 900.0) -> tuple[str, str]:
    """Write a synthetic georeferenced ROI: one ASCII-grid DEM + RGB fixtures.

    The elevation surface is seeded gradient noise lifted into meters; each
    tile footprint gets a fixture image keyed by its polygon digest, colored
    by an elevation ramp.  Returns (raster_path, fixture_dir).
    """
    directory = str(directory)
    os.makedirs(directory, exist_ok=True)
    fixture_dir = os.path.join(directory, "fixtures")
    os.makedirs(fixture_dir, exist_ok=True)

    field = perlin_heightfield(
        raster_size, PerlinParams(seed=seed, base_frequency=4, octaves=4))
    meters = (base_elevation + (field.values.astype(np.float64) + 1.0)
              * 0.5 * relief).astype(np.float32)
    raster = GeoRaster(
        width=raster_size, height=raster_size,
        geotransform=(origin[0], origin[1], cellsize, -cellsize),
        values=meters, nodata=-9999.0)
    raster_path = os.path.join(directory, "dem.asc")
    write_ascii_grid(raster_path, raster)

    stats = compute_stats([raster])
    tiling = tile_raster(raster, tile_size)
    for row, col, sub in tiling.tiles:
        poly = footprint_polygon(raster, row, col, tile_size)
        rgb8 = _elevation_colors(sub.values.astype(np.float64),
                                 stats.global_min, stats.global_max)
        save_rgb8(os.path.join(fixture_dir, poly.digest() + ".rgb"), rgb8)
    return raster_path, fixture_dir
