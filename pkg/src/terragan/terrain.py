"""Non-neural terrain utilities: gradient noise, latent sweeps, meshing.

The noise generator is the classic permutation-table construction: unit
gradients hashed onto an integer lattice, quintic-smoothstep interpolation
of the corner dot products, octaves summed with geometrically decaying
amplitudes and normalized by their sum.  Values vanish exactly at lattice
points and a single octave is bounded by sqrt(2)/2 in magnitude.

Meshing turns an N x N heightfield plus an RGB tile into one vertex per
pixel and two counter-clockwise triangles per grid cell, exportable as
ASCII PLY (with per-vertex uchar colors) or OBJ (vertex-color extension).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, ParseError
from .geodata import DatasetStats, denormalize_dem
from .tensor import Rng, Tensor

__all__ = [
    "PerlinParams", "HeightField", "PointCloud", "TriMesh",
    "perlin_heightfield", "interpolate_latents", "build_pointcloud",
    "build_mesh", "export_mesh", "load_ply", "colorize_perlin",
    "SINGLE_OCTAVE_BOUND",
]

# Max magnitude of one octave of 2-d unit-gradient lattice noise.
SINGLE_OCTAVE_BOUND = np.sqrt(2.0) / 2.0


@dataclass(frozen=True)
class PerlinParams:
    seed: int = 0
    base_frequency: int = 4   # lattice cells per tile edge
    octaves: int = 4
    persistence: float = 0.5
    lacunarity: float = 2.0

    def __post_init__(self):
        if self.base_frequency < 1:
            raise ContractError("base_frequency must be >= 1")
        if self.octaves < 1:
            raise ContractError("octaves must be >= 1")
        if not 0.0 < self.persistence <= 1.0:
            raise ContractError("persistence must lie in (0, 1]")
        if self.lacunarity < 1.0:
            raise ContractError("lacunarity must be >= 1")

    def amplitude_sum(self) -> float:
        return float(sum(self.persistence ** k for k in range(self.octaves)))


@dataclass
class HeightField:
    """Square elevation grid in [-1,1], optionally mappable to meters."""

    values: np.ndarray  # [N, N] float32
    stats: DatasetStats | None = None

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ContractError("heightfield must be square")

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def meters(self) -> np.ndarray:
        if self.stats is None:
            raise ContractError("no dataset stats attached to this field")
        return denormalize_dem(self.values, self.stats)


@dataclass
class PointCloud:
    points: np.ndarray   # [N*N, 3] float32, tile-local units
    colors: np.ndarray   # [N*N, 3] float32 in [0, 1]


@dataclass
class TriMesh:
    vertices: np.ndarray    # [M, 3] float32
    colors: np.ndarray      # [M, 3] float32 in [0, 1]
    triangles: np.ndarray   # [K, 3] int32, consistent CCW winding from +z


# ---------------------------------------------------------------------------
# Gradient noise
# ---------------------------------------------------------------------------

def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _octave(size: int, frequency: float, perm: np.ndarray,
            gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    step = frequency / size
    u = np.arange(size, dtype=np.float64) * step   # column coordinate
    v = np.arange(size, dtype=np.float64) * step   # row coordinate
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    tx = u - x0
    ty = v - y0

    def grad_hash(xi, yi):
        return perm[(perm[xi & 255] + (yi & 255)) & 255]

    xg, yg = np.meshgrid(x0, y0)   # [row, col]
    txg, tyg = np.meshgrid(tx, ty)
    h00 = grad_hash(xg, yg)
    h10 = grad_hash(xg + 1, yg)
    h01 = grad_hash(xg, yg + 1)
    h11 = grad_hash(xg + 1, yg + 1)
    n00 = gx[h00] * txg + gy[h00] * tyg
    n10 = gx[h10] * (txg - 1.0) + gy[h10] * tyg
    n01 = gx[h01] * txg + gy[h01] * (tyg - 1.0)
    n11 = gx[h11] * (txg - 1.0) + gy[h11] * (tyg - 1.0)
    sx = _fade(txg)
    sy = _fade(tyg)
    nx0 = n00 + sx * (n10 - n00)
    nx1 = n01 + sx * (n11 - n01)
    return nx0 + sy * (nx1 - nx0)


def perlin_heightfield(size: int, params: PerlinParams,
                       stats: DatasetStats | None = None) -> HeightField:
    """Classic lattice gradient noise over an N x N pixel grid.

    Pixel (i, j) samples world coordinate (j, i) * frequency / N, so with a
    frequency dividing N the lattice lands exactly on pixels.  Octave k uses
    frequency base * lacunarity^k and amplitude persistence^k; the sum is
    divided by the total amplitude and clamped to [-1, 1].
    """
    if size < 2:
        raise ContractError(f"heightfield size must be >= 2, got {size}")
    rng = Rng(params.seed)
    perm = rng.permutation(256).astype(np.int64)
    angles = np.arange(256, dtype=np.float64) * (2.0 * np.pi / 256.0)
    gx = np.cos(angles)
    gy = np.sin(angles)

    total = np.zeros((size, size), dtype=np.float64)
    amplitude = 1.0
    frequency = float(params.base_frequency)
    for _ in range(params.octaves):
        total += amplitude * _octave(size, frequency, perm, gx, gy)
        amplitude *= params.persistence
        frequency *= params.lacunarity
    total /= params.amplitude_sum()
    values = np.clip(total, -1.0, 1.0).astype(np.float32)
    return HeightField(values=values, stats=stats)


# ---------------------------------------------------------------------------
# Latent interpolation
# ---------------------------------------------------------------------------

def interpolate_latents(z0: Tensor, z1: Tensor, steps: int) -> list[Tensor]:
    """Evenly spaced points on the segment from z0 to z1, endpoints exact."""
    if steps < 2:
        raise ContractError(f"steps must be >= 2, got {steps}")
    if z0.shape != z1.shape:
        raise ContractError(
            f"latent shape mismatch: {list(z0.shape)} vs {list(z1.shape)}")
    out = []
    for k in range(steps):
        t = k / (steps - 1)
        out.append(Tensor((1.0 - t) * z0.data + t * z1.data))
    return out


# ---------------------------------------------------------------------------
# Meshing
# ---------------------------------------------------------------------------

def build_pointcloud(dem: HeightField, rgb, vertical_scale: float = 0.25,
                     ) -> PointCloud:
    """One colored point per pixel on the unit square, z = scale * height."""
    rgb_data = rgb.data if isinstance(rgb, Tensor) else np.asarray(rgb)
    n = dem.size
    if vertical_scale <= 0:
        raise ContractError("vertical_scale must be positive")
    if rgb_data.shape != (3, n, n):
        raise ContractError(
            f"rgb shape {rgb_data.shape} does not match heightfield {n}x{n}")
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    denom = n - 1
    points = np.stack([
        jj.reshape(-1) / denom,
        ii.reshape(-1) / denom,
        vertical_scale * dem.values.reshape(-1),
    ], axis=1).astype(np.float32)
    colors = ((rgb_data.transpose(1, 2, 0).reshape(-1, 3) + 1.0) * 0.5)
    return PointCloud(points=points, colors=np.clip(colors, 0.0, 1.0)
                      .astype(np.float32))


def build_mesh(dem: HeightField, rgb, vertical_scale: float = 0.25) -> TriMesh:
    """Grid mesh: N^2 vertices, 2(N-1)^2 triangles, CCW seen from +z."""
    cloud = build_pointcloud(dem, rgb, vertical_scale)
    n = dem.size
    idx = np.arange(n * n).reshape(n, n)
    v00 = idx[:-1, :-1].reshape(-1)
    v01 = idx[:-1, 1:].reshape(-1)
    v10 = idx[1:, :-1].reshape(-1)
    v11 = idx[1:, 1:].reshape(-1)
    tri_a = np.stack([v00, v01, v11], axis=1)
    tri_b = np.stack([v00, v11, v10], axis=1)
    triangles = np.concatenate([tri_a, tri_b]).astype(np.int32)
    return TriMesh(vertices=cloud.points, colors=cloud.colors,
                   triangles=triangles)


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------

def export_mesh(mesh: TriMesh, path, format: str = "ply_ascii"):
    if mesh.vertices.shape[0] == 0 or mesh.triangles.shape[0] == 0:
        raise ContractError("refusing to export an empty mesh")
    if format == "ply_ascii":
        _write_ply(mesh, path)
    elif format == "obj":
        _write_obj(mesh, path)
    else:
        raise ContractError(f"unknown mesh format {format!r}")


def _color_bytes(colors: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(colors, 0.0, 1.0) * 255.0).astype(np.uint8)


def _write_ply(mesh: TriMesh, path):
    nv = mesh.vertices.shape[0]
    nf = mesh.triangles.shape[0]
    rgb255 = _color_bytes(mesh.colors)
    with open(path, "w") as fh:
        fh.write("ply\n")
        fh.write("format ascii 1.0\n")
        fh.write("comment colored heightfield tile\n")
        fh.write(f"element vertex {nv}\n")
        fh.write("property float x\n")
        fh.write("property float y\n")
        fh.write("property float z\n")
        fh.write("property uchar red\n")
        fh.write("property uchar green\n")
        fh.write("property uchar blue\n")
        fh.write(f"element face {nf}\n")
        fh.write("property list uchar int vertex_indices\n")
        fh.write("end_header\n")
        for (x, y, z), (r, g, b) in zip(mesh.vertices, rgb255):
            fh.write(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}\n")
        for a, b_, c in mesh.triangles:
            fh.write(f"3 {a} {b_} {c}\n")


def _write_obj(mesh: TriMesh, path):
    with open(path, "w") as fh:
        fh.write("# colored heightfield tile\n")
        fh.write("# vertex lines extend 'v x y z' with 'r g b' in [0,1]\n")
        for (x, y, z), (r, g, b) in zip(mesh.vertices, mesh.colors):
            fh.write(f"v {x:.6f} {y:.6f} {z:.6f} {r:.6f} {g:.6f} {b:.6f}\n")
        for a, b_, c in mesh.triangles:
            fh.write(f"f {a + 1} {b_ + 1} {c + 1}\n")


def load_ply(path) -> TriMesh:
    """Minimal ASCII PLY reader for the exporter's own layout."""
    with open(path, "r") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != "ply":
        raise ParseError(f"{path}: not a PLY file")
    nv = nf = None
    body_at = None
    for i, line in enumerate(lines[1:], start=1):
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            nv = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            nf = int(parts[2])
        elif parts == ["end_header"]:
            body_at = i + 1
            break
        elif parts[:2] == ["format", "binary_little_endian"] \
                or parts[:2] == ["format", "binary_big_endian"]:
            raise ParseError(f"{path}: binary PLY not supported")
    if nv is None or nf is None or body_at is None:
        raise ParseError(f"{path}: incomplete PLY header")
    if len(lines) < body_at + nv + nf:
        raise ParseError(f"{path}: body shorter than declared counts")
    vertices = np.zeros((nv, 3), dtype=np.float32)
    colors = np.zeros((nv, 3), dtype=np.float32)
    for k in range(nv):
        parts = lines[body_at + k].split()
        if len(parts) != 6:
            raise ParseError(f"{path}:{body_at + k + 1}: bad vertex line")
        vertices[k] = [float(p) for p in parts[:3]]
        colors[k] = [int(p) / 255.0 for p in parts[3:]]
    triangles = np.zeros((nf, 3), dtype=np.int32)
    for k in range(nf):
        parts = lines[body_at + nv + k].split()
        if len(parts) != 4 or parts[0] != "3":
            raise ParseError(f"{path}:{body_at + nv + k + 1}: bad face line")
        triangles[k] = [int(p) for p in parts[1:]]
    return TriMesh(vertices=vertices, colors=colors, triangles=triangles)


# ---------------------------------------------------------------------------
# Inverse colorization
# ---------------------------------------------------------------------------

def colorize_perlin(dem: HeightField, inverse_model) -> tuple[Tensor, Tensor]:
    """Predict surface coloration for a noise-sampled heightfield.

    Returns the ([1,N,N] dem, [3,N,N] rgb) pair ready for build_mesh.
    """
    from .pix2pix import translate
    if inverse_model.direction != "dem_to_rgb":
        raise ContractError(
            f"colorize needs a dem_to_rgb model, got {inverse_model.direction}")
    resolution = inverse_model.unet.config.resolution
    if dem.size != resolution:
        raise ContractError(
            f"heightfield is {dem.size}px but the model expects {resolution}px")
    dem_tensor = Tensor(dem.values[None].astype(np.float32))
    rgb = translate(inverse_model, dem_tensor)
    return dem_tensor, rgb
