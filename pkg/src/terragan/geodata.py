"""Georeferenced rasters and paired (RGB, elevation) dataset construction.

The pipeline: load elevation rasters, cut them into fixed-size tiles
anchored at the north-west corner (edge remainders and nodata-touched tiles
are dropped), derive each tile's lon/lat footprint from the geotransform,
fetch the matching RGB image through a pluggable imagery client, scale both
bands to [-1, 1] (elevations by the dataset-wide min/max, RGB by 255), and
persist the pairs with a content digest so reruns are verifiable.

Geotransform convention: (origin_lon, origin_lat, pixel_size_lon,
pixel_size_lat), row-major from the north-west corner, pixel_size_lat
negative going south.  All coordinates are degrees in one geographic CRS;
reprojection is out of scope.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator, Sequence

import numpy as np

from .digests import canonical_json
from .errors import (ConfigError, ContractError, CorruptionError,
                     EmptyDataError, FetchError, MissingFixtureError,
                     ParseError)
from .tensor import Tensor, read_tensor, write_tensor

__all__ = [
    "GeoRaster", "GeoPolygon", "TilePair", "DatasetStats", "TilingResult",
    "ClampCounter", "ImageryClient", "MockFsClient", "HttpImageryClient",
    "load_raster", "save_raster", "write_ascii_grid",
    "compute_stats", "tile_raster", "footprint_polygon", "acquire_rgb",
    "normalize_dem", "denormalize_dem", "rgb8_to_unit", "unit_to_rgb8",
    "save_rgb8", "load_rgb8", "build_dataset", "write_dataset", "read_dataset",
    "DEFAULT_TILE_SIZE",
]

log = logging.getLogger(__name__)

DEFAULT_TILE_SIZE = 256

_RASTER_MAGIC = b"TFRA"
_DATASET_MAGIC = b"TFDS"
_DATASET_VERSION = 1


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------

@dataclass
class GeoRaster:
    """Single-band elevation raster with an affine pixel->lon/lat mapping."""

    width: int
    height: int
    geotransform: tuple[float, float, float, float]
    values: np.ndarray  # [height, width] float32 meters
    nodata: float | None = None

    def __post_init__(self):
        if self.values.shape != (self.height, self.width):
            raise ContractError(
                f"raster values {self.values.shape} do not match declared "
                f"{self.height}x{self.width}")
        if self.geotransform[2] == 0 or self.geotransform[3] == 0:
            raise ContractError("pixel sizes must be nonzero")

    def nodata_mask(self) -> np.ndarray:
        if self.nodata is None:
            return np.zeros_like(self.values, dtype=bool)
        return self.values == np.float32(self.nodata)


@dataclass(frozen=True)
class GeoPolygon:
    """Closed counter-clockwise ring of (lon, lat) vertices."""

    ring: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.ring) < 4:
            raise ContractError("polygon ring needs at least 4 vertices")
        if self.ring[0] != self.ring[-1]:
            raise ContractError("polygon ring must be closed")

    def to_geojson(self) -> dict:
        return {"type": "Polygon",
                "coordinates": [[[lon, lat] for lon, lat in self.ring]]}

    @classmethod
    def from_geojson(cls, obj: dict) -> "GeoPolygon":
        if obj.get("type") != "Polygon" or "coordinates" not in obj:
            raise ParseError(f"not a GeoJSON Polygon: {obj!r}")
        ring = obj["coordinates"][0]
        return cls(tuple((float(lon), float(lat)) for lon, lat in ring))

    def digest(self) -> str:
        """Key for fixture lookup: hash of the canonical coordinate list."""
        payload = canonical_json(self.to_geojson())
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class DatasetStats:
    """Dataset-wide elevation extremes used for [-1,1] scaling."""

    global_min: float
    global_max: float
    tile_count: int = 0

    def __post_init__(self):
        if not self.global_min < self.global_max:
            raise ConfigError(
                f"degenerate stats: min {self.global_min} !< max {self.global_max}")

    def to_dict(self) -> dict:
        return {"global_min": self.global_min, "global_max": self.global_max,
                "tile_count": self.tile_count}


@dataclass
class TilePair:
    """One training sample: normalized elevation + RGB over one footprint."""

    dem: Tensor          # [1, ts, ts] in [-1, 1]
    rgb: Tensor          # [3, ts, ts] in [-1, 1]
    footprint: GeoPolygon
    raster_index: int
    row: int
    col: int


@dataclass
class TilingResult:
    tiles: list[tuple[int, int, GeoRaster]] = field(default_factory=list)
    dropped_nodata: int = 0
    warning: str | None = None


@dataclass
class ClampCounter:
    """Telemetry for elevations outside the training range."""

    below: int = 0
    above: int = 0

    @property
    def total(self) -> int:
        return self.below + self.above


# ---------------------------------------------------------------------------
# Raster ingestion
# ---------------------------------------------------------------------------

_ASCII_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize",
               "nodata_value")


def load_raster(path, format: str = "ascii_grid") -> GeoRaster:
    if format == "ascii_grid":
        return _load_ascii_grid(path)
    if format == "raw_with_sidecar":
        return _load_raw(path)
    raise ConfigError(f"unknown raster format {format!r}")


def _load_ascii_grid(path) -> GeoRaster:
    header: dict[str, float] = {}
    with open(path, "r") as fh:
        lines = fh.read().split("\n")
    idx = 0
    for idx, line in enumerate(lines):
        parts = line.split()
        if len(parts) == 2 and parts[0].lower() in _ASCII_KEYS:
            try:
                header[parts[0].lower()] = float(parts[1])
            except ValueError as exc:
                raise ParseError(f"{path}:{idx + 1}: bad header value "
                                 f"{parts[1]!r}") from exc
        else:
            break
    else:
        idx += 1
    for key in _ASCII_KEYS[:5]:
        if key not in header:
            raise ParseError(f"{path}: missing header field {key!r}")
    width = int(header["ncols"])
    height = int(header["nrows"])
    if width < 1 or height < 1:
        raise ParseError(f"{path}: non-positive grid extents")
    body = " ".join(lines[idx:])
    try:
        flat = np.array(body.split(), dtype=np.float32)
    except ValueError as exc:
        raise ParseError(f"{path}: non-numeric cell data ({exc})") from exc
    if flat.size != width * height:
        raise ParseError(
            f"{path}: expected {width * height} cells "
            f"({width}x{height}), found {flat.size}")
    cellsize = header["cellsize"]
    origin_lat = header["yllcorner"] + height * cellsize
    geotransform = (header["xllcorner"], origin_lat, cellsize, -cellsize)
    nodata = header.get("nodata_value")
    return GeoRaster(width=width, height=height, geotransform=geotransform,
                     values=flat.reshape(height, width), nodata=nodata)


def write_ascii_grid(path, raster: GeoRaster):
    """Inverse of the ASCII-grid reader (north-to-south rows)."""
    lon0, lat0, ps_lon, ps_lat = raster.geotransform
    if abs(ps_lon) != abs(ps_lat):
        raise ContractError("ASCII grid requires square pixels")
    yll = lat0 + raster.height * ps_lat
    with open(path, "w") as fh:
        fh.write(f"ncols {raster.width}\n")
        fh.write(f"nrows {raster.height}\n")
        fh.write(f"xllcorner {lon0!r}\n")
        fh.write(f"yllcorner {yll!r}\n")
        fh.write(f"cellsize {ps_lon!r}\n")
        nodata = raster.nodata if raster.nodata is not None else -9999.0
        fh.write(f"NODATA_value {nodata!r}\n")
        for row in raster.values:
            fh.write(" ".join(repr(float(v)) for v in row))
            fh.write("\n")


def save_raster(path, raster: GeoRaster):
    """Raw binary raster plus a sidecar JSON mirroring the header."""
    with open(path, "wb") as fh:
        fh.write(_RASTER_MAGIC)
        fh.write(struct.pack("<II", raster.width, raster.height))
        fh.write(struct.pack("<4d", *raster.geotransform))
        fh.write(np.ascontiguousarray(raster.values, dtype="<f4").tobytes())
    sidecar = {
        "width": raster.width, "height": raster.height,
        "geotransform": list(raster.geotransform),
        "nodata": raster.nodata,
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_raw(path) -> GeoRaster:
    with open(path, "rb") as fh:
        if fh.read(4) != _RASTER_MAGIC:
            raise ParseError(f"{path}: bad raster magic")
        width, height = struct.unpack("<II", fh.read(8))
        geotransform = struct.unpack("<4d", fh.read(32))
        payload = fh.read(4 * width * height)
    if len(payload) != 4 * width * height:
        raise ParseError(f"{path}: truncated raster payload")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return GeoRaster(width=width, height=height,
                     geotransform=tuple(geotransform),
                     values=values.reshape(height, width), nodata=None)


# ---------------------------------------------------------------------------
# Stats, tiling, footprints
# ---------------------------------------------------------------------------

def compute_stats(rasters: Sequence[GeoRaster]) -> DatasetStats:
    """Min and max elevation over every non-nodata cell of every raster."""
    lo, hi = np.inf, -np.inf
    for raster in rasters:
        usable = raster.values[~raster.nodata_mask()]
        if usable.size == 0:
            continue
        lo = min(lo, float(usable.min()))
        hi = max(hi, float(usable.max()))
    if not np.isfinite(lo) or not np.isfinite(hi):
        raise EmptyDataError("no usable elevation cells in any raster")
    return DatasetStats(global_min=lo, global_max=hi)


def tile_raster(raster: GeoRaster, tile_size: int = DEFAULT_TILE_SIZE,
                ) -> TilingResult:
    """Disjoint tile grid anchored north-west; remainders and nodata dropped."""
    result = TilingResult()
    rows = raster.height // tile_size
    cols = raster.width // tile_size
    if rows == 0 or cols == 0:
        result.warning = (f"raster {raster.width}x{raster.height} smaller "
                          f"than one {tile_size}px tile")
        log.warning(result.warning)
        return result
    lon0, lat0, ps_lon, ps_lat = raster.geotransform
    nodata_mask = raster.nodata_mask()
    for row in range(rows):
        for col in range(cols):
            ys = slice(row * tile_size, (row + 1) * tile_size)
            xs = slice(col * tile_size, (col + 1) * tile_size)
            if nodata_mask[ys, xs].any():
                result.dropped_nodata += 1
                continue
            sub = GeoRaster(
                width=tile_size, height=tile_size,
                geotransform=(lon0 + col * tile_size * ps_lon,
                              lat0 + row * tile_size * ps_lat,
                              ps_lon, ps_lat),
                values=raster.values[ys, xs].copy(),
                nodata=raster.nodata)
            result.tiles.append((row, col, sub))
    return result


def footprint_polygon(raster: GeoRaster, row: int, col: int,
                      tile_size: int = DEFAULT_TILE_SIZE) -> GeoPolygon:
    """Closed CCW lon/lat rectangle covering one tile of the grid."""
    if row < 0 or col < 0 or (row + 1) * tile_size > raster.height \
            or (col + 1) * tile_size > raster.width:
        raise ContractError(
            f"tile ({row},{col}) out of range for "
            f"{raster.width}x{raster.height} raster")
    lon0, lat0, ps_lon, ps_lat = raster.geotransform
    lon_a = lon0 + col * tile_size * ps_lon
    lon_b = lon0 + (col + 1) * tile_size * ps_lon
    lat_a = lat0 + row * tile_size * ps_lat
    lat_b = lat0 + (row + 1) * tile_size * ps_lat
    lon_min, lon_max = min(lon_a, lon_b), max(lon_a, lon_b)
    lat_min, lat_max = min(lat_a, lat_b), max(lat_a, lat_b)
    return GeoPolygon(((lon_min, lat_min), (lon_max, lat_min),
                       (lon_max, lat_max), (lon_min, lat_max),
                       (lon_min, lat_min)))


# ---------------------------------------------------------------------------
# Imagery clients
# ---------------------------------------------------------------------------

class ImageryClient:
    """Source of RGB tiles for tile footprints.

    fetch() returns a uint8 array of shape [size, size, 3].
    """

    def fetch(self, polygon: GeoPolygon, size: int) -> np.ndarray:
        raise NotImplementedError


class MockFsClient(ImageryClient):
    """File-backed client: fixtures keyed by polygon digest.

    The fixture directory holds ``<digest>.rgb`` files of raw 8-bit RGB
    triplets, row-major, exactly size*size*3 bytes.
    """

    def __init__(self, fixture_dir):
        self.fixture_dir = str(fixture_dir)

    def fixture_path(self, polygon: GeoPolygon) -> str:
        return os.path.join(self.fixture_dir, polygon.digest() + ".rgb")

    def fetch(self, polygon: GeoPolygon, size: int) -> np.ndarray:
        path = self.fixture_path(polygon)
        if not os.path.exists(path):
            raise MissingFixtureError(
                f"no fixture {polygon.digest()}.rgb in {self.fixture_dir}")
        raw = open(path, "rb").read()
        if len(raw) != size * size * 3:
            raise FetchError(
                f"fixture {polygon.digest()} holds {len(raw)} bytes, "
                f"expected {size * size * 3}")
        return np.frombuffer(raw, dtype=np.uint8).reshape(size, size, 3)


class HttpImageryClient(ImageryClient):
    """Interface stub for a live tile service; not implemented here.

    Wire contract a real implementation must honor:
      request:  POST <endpoint>/rgb with JSON body
                {"footprint": <GeoJSON Polygon>, "size": <pixels>}
      response: 200 with exactly size*size*3 bytes of raw 8-bit RGB
                triplets, row-major north-to-south; any other status is a
                retryable failure.
    Credentials and live access sit outside this package's scope.
    """

    def __init__(self, endpoint: str, timeout_s: float = 30.0):
        self.endpoint = endpoint
        self.timeout_s = timeout_s

    def fetch(self, polygon: GeoPolygon, size: int) -> np.ndarray:
        raise NotImplementedError(
            "HttpImageryClient is an interface stub; use MockFsClient or "
            "provide a client implementing the documented wire contract")


def acquire_rgb(client: ImageryClient, polygon: GeoPolygon,
                size: int = DEFAULT_TILE_SIZE, retries: int = 3) -> np.ndarray:
    """Fetch with bounded retries; validates the returned extent."""
    last: Exception | None = None
    for _ in range(retries):
        try:
            tile = client.fetch(polygon, size)
        except MissingFixtureError:
            raise  # a missing fixture never heals on retry
        except FetchError as exc:
            last = exc
            continue
        if tile.shape != (size, size, 3):
            raise ContractError(
                f"client returned {tile.shape}, expected ({size},{size},3) "
                f"for footprint {polygon.digest()}")
        if tile.dtype != np.uint8:
            raise ContractError("client must return 8-bit channels")
        return tile
    raise FetchError(
        f"fetch failed after {retries} attempts for footprint "
        f"{polygon.digest()}: {last}")


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def normalize_dem(values: np.ndarray, stats: DatasetStats,
                  counter: ClampCounter | None = None) -> np.ndarray:
    """Affine map of meters onto [-1,1] by the global extremes, clamped.

    Out-of-range elevations (possible at inference, where the training
    min/max is fixed) are clamped; the counter records how many.
    """
    span = stats.global_max - stats.global_min
    scaled = 2.0 * (values.astype(np.float64) - stats.global_min) / span - 1.0
    if counter is not None:
        counter.below += int((scaled < -1.0).sum())
        counter.above += int((scaled > 1.0).sum())
    return np.clip(scaled, -1.0, 1.0).astype(np.float32)


def denormalize_dem(values: np.ndarray, stats: DatasetStats) -> np.ndarray:
    """Exact inverse of normalize_dem back to meters."""
    span = stats.global_max - stats.global_min
    return (stats.global_min
            + (values.astype(np.float64) + 1.0) * 0.5 * span)


def rgb8_to_unit(rgb8: np.ndarray) -> np.ndarray:
    """[H,W,3] uint8 -> [3,H,W] float32 in [-1,1]."""
    chw = rgb8.astype(np.float32).transpose(2, 0, 1)
    return chw / 127.5 - 1.0


def unit_to_rgb8(img: np.ndarray) -> np.ndarray:
    """[3,H,W] float in [-1,1] -> [H,W,3] uint8."""
    hwc = np.clip((img.astype(np.float64) + 1.0) * 127.5, 0, 255)
    return np.rint(hwc).astype(np.uint8).transpose(1, 2, 0)


def save_rgb8(path, rgb8: np.ndarray):
    if rgb8.dtype != np.uint8 or rgb8.ndim != 3 or rgb8.shape[2] != 3:
        raise ContractError("save_rgb8 expects [H,W,3] uint8")
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(rgb8).tobytes())


def load_rgb8(path, size: int) -> np.ndarray:
    raw = open(path, "rb").read()
    if len(raw) != size * size * 3:
        raise ParseError(f"{path}: {len(raw)} bytes, expected {size*size*3}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(size, size, 3)


# ---------------------------------------------------------------------------
# Dataset file: "TFDS" magic, manifest JSON, framed pairs, content digest
# ---------------------------------------------------------------------------

def build_dataset(rasters: Sequence[GeoRaster], client: ImageryClient,
                  output_path, tile_size: int = DEFAULT_TILE_SIZE,
                  stats: DatasetStats | None = None) -> dict:
    """Assemble all kept tiles into a paired dataset file.

    Per-tile fetch failures are logged and skipped, never silently folded
    into the output.  Returns the manifest (also embedded in the file).
    """
    if stats is None:
        stats = compute_stats(rasters)
    pairs: list[TilePair] = []
    dropped_nodata = 0
    skipped_fetch = 0
    for ri, raster in enumerate(rasters):
        tiling = tile_raster(raster, tile_size)
        dropped_nodata += tiling.dropped_nodata
        for row, col, sub in tiling.tiles:
            poly = footprint_polygon(raster, row, col, tile_size)
            try:
                rgb8 = acquire_rgb(client, poly, tile_size)
            except FetchError as exc:
                log.warning("skipping tile raster=%d row=%d col=%d: %s",
                            ri, row, col, exc)
                skipped_fetch += 1
                continue
            dem = normalize_dem(sub.values, stats)[None]
            rgb = rgb8_to_unit(rgb8)
            pairs.append(TilePair(dem=Tensor(dem), rgb=Tensor(rgb),
                                  footprint=poly, raster_index=ri,
                                  row=row, col=col))
    extra = {"dropped_nodata": dropped_nodata, "skipped_fetch": skipped_fetch,
             "tile_size": tile_size}
    return write_dataset(output_path, pairs, stats, extra)


def write_dataset(path, pairs: Sequence[TilePair], stats: DatasetStats,
                  extra: dict | None = None) -> dict:
    """Serialize pairs in (raster, row, col) order with a content digest."""
    ordered = sorted(pairs, key=lambda p: (p.raster_index, p.row, p.col))
    body = io.BytesIO()
    for pair in ordered:
        head = json.dumps({
            "raster_index": pair.raster_index,
            "row": pair.row, "col": pair.col,
            "footprint": pair.footprint.to_geojson(),
        }, sort_keys=True).encode("utf-8")
        body.write(struct.pack("<I", len(head)))
        body.write(head)
        write_tensor(body, pair.dem)
        write_tensor(body, pair.rgb)
    payload = body.getvalue()
    manifest = {
        "stats": {"global_min": stats.global_min,
                  "global_max": stats.global_max},
        "tile_count": len(ordered),
        "content_digest": hashlib.sha256(payload).hexdigest(),
    }
    if extra:
        manifest.update(extra)
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_DATASET_MAGIC)
        fh.write(struct.pack("<H", _DATASET_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)
    return manifest


def read_dataset(path) -> tuple[dict, Iterator[TilePair]]:
    """Manifest plus a lazy pair iterator; verifies the digest up front."""
    with open(path, "rb") as fh:
        manifest, body_offset = _read_dataset_header(fh)
        hasher = hashlib.sha256()
        while True:
            block = fh.read(1 << 20)
            if not block:
                break
            hasher.update(block)
    if hasher.hexdigest() != manifest["content_digest"]:
        raise CorruptionError(
            f"{path}: content digest mismatch "
            f"(manifest {manifest['content_digest'][:12]}..., "
            f"payload {hasher.hexdigest()[:12]}...)")

    def pair_iter() -> Iterator[TilePair]:
        with open(path, "rb") as fh:
            fh.seek(body_offset)
            for _ in range(manifest["tile_count"]):
                yield _read_pair(fh, path)

    return manifest, pair_iter()


def _read_dataset_header(fh: BinaryIO) -> tuple[dict, int]:
    if fh.read(4) != _DATASET_MAGIC:
        raise CorruptionError("bad dataset magic")
    (version,) = struct.unpack("<H", fh.read(2))
    if version != _DATASET_VERSION:
        raise CorruptionError(f"unsupported dataset version {version}")
    (mlen,) = struct.unpack("<I", fh.read(4))
    manifest = json.loads(fh.read(mlen).decode("utf-8"))
    return manifest, fh.tell()


def _read_pair(fh: BinaryIO, path) -> TilePair:
    raw_len = fh.read(4)
    if len(raw_len) != 4:
        raise CorruptionError(f"{path}: truncated pair frame")
    (hlen,) = struct.unpack("<I", raw_len)
    head = json.loads(fh.read(hlen).decode("utf-8"))
    dem = read_tensor(fh)
    rgb = read_tensor(fh)
    for name, t in (("dem", dem), ("rgb", rgb)):
        if np.abs(t.data).max() > 1.0:
            raise CorruptionError(
                f"{path}: {name} tile values escape [-1,1]")
    return TilePair(dem=dem, rgb=rgb,
                    footprint=GeoPolygon.from_geojson(head["footprint"]),
                    raster_index=head["raster_index"],
                    row=head["row"], col=head["col"])
