"""Raster ingestion, tiling, footprints, normalization, dataset files."""

import json

import numpy as np
import pytest

from terragan import geodata as geo
from terragan import synthetic
from terragan import tensor as T
from terragan.errors import (ConfigError, ContractError, CorruptionError,
                             EmptyDataError, FetchError, MissingFixtureError,
                             ParseError)


def make_raster(width=8, height=8, origin=(20.0, 40.0), cellsize=0.001,
                fill=None, nodata=None, seed=0):
    if fill is None:
        values = T.Rng(seed).uniform((height, width), 0.0, 2000.0) \
            .astype(np.float32)
    else:
        values = np.full((height, width), fill, dtype=np.float32)
    return geo.GeoRaster(width=width, height=height,
                         geotransform=(origin[0], origin[1], cellsize,
                                       -cellsize),
                         values=values, nodata=nodata)


class TestAsciiGrid:
    def test_pinned_header_mapping(self, tmp_path):
        # 2x2 grid whose north-west corner sits at (20.0, 40.0)
        path = tmp_path / "tiny.asc"
        path.write_text(
            "ncols 2\nnrows 2\nxllcorner 20.0\nyllcorner 39.998\n"
            "cellsize 0.001\nNODATA_value -9999\n"
            "10 20\n30 40\n")
        r = geo.load_raster(path, "ascii_grid")
        assert (r.width, r.height) == (2, 2)
        assert r.geotransform == (20.0, 40.0, 0.001, -0.001)
        np.testing.assert_array_equal(r.values, [[10, 20], [30, 40]])
        assert r.nodata == -9999

    def test_count_mismatch(self, tmp_path):
        path = tmp_path / "bad.asc"
        path.write_text(
            "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\n"
            "cellsize 1\nNODATA_value -9999\n1 2 3\n")
        with pytest.raises(ParseError, match="expected 4 cells"):
            geo.load_raster(path, "ascii_grid")

    def test_missing_header_field(self, tmp_path):
        path = tmp_path / "hdr.asc"
        path.write_text("ncols 2\nnrows 2\n1 2 3 4\n")
        with pytest.raises(ParseError, match="missing header"):
            geo.load_raster(path, "ascii_grid")

    def test_write_read_roundtrip(self, tmp_path):
        r = make_raster(width=5, height=3, nodata=-9999.0)
        path = tmp_path / "round.asc"
        geo.write_ascii_grid(path, r)
        back = geo.load_raster(path, "ascii_grid")
        assert back.geotransform == r.geotransform
        np.testing.assert_array_equal(back.values, r.values)

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ConfigError):
            geo.load_raster(tmp_path / "x", "geotiff")


class TestRawRaster:
    def test_roundtrip_bit_identical(self, tmp_path):
        r = make_raster(width=6, height=4, seed=3)
        path = tmp_path / "r.tfra"
        geo.save_raster(path, r)
        back = geo.load_raster(path, "raw_with_sidecar")
        assert back.geotransform == r.geotransform
        np.testing.assert_array_equal(back.values, r.values)
        sidecar = json.loads((tmp_path / "r.tfra.json").read_text())
        assert sidecar["width"] == 6 and sidecar["height"] == 4

    def test_truncation(self, tmp_path):
        r = make_raster()
        path = tmp_path / "r.tfra"
        geo.save_raster(path, r)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(ParseError, match="truncated"):
            geo.load_raster(path, "raw_with_sidecar")


class TestStats:
    def test_single_raster(self):
        r = make_raster(fill=0.0)
        r.values[0, 0] = 2000.0
        stats = geo.compute_stats([r])
        assert (stats.global_min, stats.global_max) == (0.0, 2000.0)

    def test_nodata_excluded(self):
        r = make_raster(fill=100.0, nodata=-9999.0)
        r.values[0, 0] = -9999.0
        r.values[1, 1] = 500.0
        stats = geo.compute_stats([r])
        assert stats.global_min == 100.0
        assert stats.global_max == 500.0

    def test_two_rasters_combine(self):
        a = make_raster(fill=10.0)
        a.values[0, 0] = 50.0
        b = make_raster(fill=20.0)
        b.values[0, 0] = 90.0
        stats = geo.compute_stats([a, b])
        assert (stats.global_min, stats.global_max) == (10.0, 90.0)

    def test_all_nodata_error(self):
        r = make_raster(fill=-9999.0, nodata=-9999.0)
        with pytest.raises(EmptyDataError):
            geo.compute_stats([r])

    def test_degenerate_rejected(self):
        with pytest.raises(ConfigError):
            geo.DatasetStats(global_min=5.0, global_max=5.0)


class TestTiling:
    def test_floor_grid_counts(self):
        r = make_raster(width=1000, height=700)
        result = geo.tile_raster(r, 256)
        assert len(result.tiles) == 2 * 3  # floor(700/256) x floor(1000/256)

    def test_exact_single_tile(self):
        r = make_raster(width=256, height=256)
        result = geo.tile_raster(r, 256)
        assert len(result.tiles) == 1
        row, col, sub = result.tiles[0]
        assert (row, col) == (0, 0)
        np.testing.assert_array_equal(sub.values, r.values)
        assert sub.geotransform == r.geotransform

    def test_too_small_returns_warning(self):
        r = make_raster(width=512, height=255)
        result = geo.tile_raster(r, 256)
        assert result.tiles == []
        assert result.warning is not None

    def test_nodata_tiles_dropped_and_counted(self):
        r = make_raster(width=512, height=512, fill=100.0, nodata=-9999.0)
        r.values[300, 300] = -9999.0  # poisons tile (1,1)
        result = geo.tile_raster(r, 256)
        assert len(result.tiles) == 3
        assert result.dropped_nodata == 1
        assert all((row, col) != (1, 1) for row, col, _ in result.tiles)

    def test_partition_property(self):
        # kept tiles are disjoint and cover each kept pixel exactly once
        r = make_raster(width=512, height=512, seed=4)
        result = geo.tile_raster(r, 256)
        coverage = np.zeros((512, 512), dtype=int)
        for row, col, sub in result.tiles:
            ys = slice(row * 256, (row + 1) * 256)
            xs = slice(col * 256, (col + 1) * 256)
            coverage[ys, xs] += 1
            np.testing.assert_array_equal(sub.values, r.values[ys, xs])
        assert np.all(coverage == 1)

    def test_subtile_geotransform_shift(self):
        r = make_raster(width=512, height=512)
        result = geo.tile_raster(r, 256)
        by_index = {(row, col): sub for row, col, sub in result.tiles}
        assert by_index[(0, 1)].geotransform[0] == pytest.approx(20.0 + 0.256)
        assert by_index[(1, 0)].geotransform[1] == pytest.approx(40.0 - 0.256)


class TestFootprints:
    def test_pinned_rectangle(self):
        r = make_raster(width=512, height=512)
        poly = geo.footprint_polygon(r, 0, 0, 256)
        lons = [p[0] for p in poly.ring]
        lats = [p[1] for p in poly.ring]
        assert min(lons) == pytest.approx(20.0)
        assert max(lons) == pytest.approx(20.256)
        assert min(lats) == pytest.approx(39.744)
        assert max(lats) == pytest.approx(40.0)

    def test_column_shift(self):
        r = make_raster(width=512, height=512)
        a = geo.footprint_polygon(r, 0, 0, 256)
        b = geo.footprint_polygon(r, 0, 1, 256)
        shift = [pb[0] - pa[0] for pa, pb in zip(a.ring, b.ring)]
        assert all(s == pytest.approx(0.256) for s in shift)

    def test_ccw_and_closed(self):
        r = make_raster(width=512, height=512)
        poly = geo.footprint_polygon(r, 1, 1, 256)
        ring = poly.ring
        assert ring[0] == ring[-1]
        area2 = sum(ring[i][0] * ring[i + 1][1] - ring[i + 1][0] * ring[i][1]
                    for i in range(len(ring) - 1))
        assert area2 > 0  # counter-clockwise

    def test_geojson_roundtrip(self):
        r = make_raster(width=512, height=512)
        poly = geo.footprint_polygon(r, 0, 1, 256)
        doc = json.dumps(poly.to_geojson())
        back = geo.GeoPolygon.from_geojson(json.loads(doc))
        assert back == poly
        assert back.digest() == poly.digest()

    def test_adjacent_tiles_share_an_edge(self):
        r = make_raster(width=512, height=512)
        left = geo.footprint_polygon(r, 0, 0, 256)
        right = geo.footprint_polygon(r, 0, 1, 256)
        left_max_lon = max(p[0] for p in left.ring)
        right_min_lon = min(p[0] for p in right.ring)
        assert left_max_lon == right_min_lon

    def test_out_of_range(self):
        r = make_raster(width=512, height=512)
        with pytest.raises(ContractError):
            geo.footprint_polygon(r, 2, 0, 256)


class TestClients:
    def test_mock_returns_fixture_bytes(self, tmp_path):
        r = make_raster(width=256, height=256)
        poly = geo.footprint_polygon(r, 0, 0, 256)
        blob = bytes(range(256)) * (256 * 256 * 3 // 256)
        (tmp_path / f"{poly.digest()}.rgb").write_bytes(blob)
        client = geo.MockFsClient(tmp_path)
        tile = client.fetch(poly, 256)
        assert tile.tobytes() == blob

    def test_missing_fixture_names_digest(self, tmp_path):
        r = make_raster(width=256, height=256)
        poly = geo.footprint_polygon(r, 0, 0, 256)
        client = geo.MockFsClient(tmp_path)
        with pytest.raises(MissingFixtureError, match=poly.digest()[:16]):
            client.fetch(poly, 256)

    def test_wrong_extent_rejected(self, tmp_path):
        r = make_raster(width=256, height=256)
        poly = geo.footprint_polygon(r, 0, 0, 256)
        (tmp_path / f"{poly.digest()}.rgb").write_bytes(b"\x00" * 300)
        client = geo.MockFsClient(tmp_path)
        with pytest.raises(FetchError):
            geo.acquire_rgb(client, poly, 256)

    def test_retry_then_success(self):
        poly = geo.GeoPolygon(((0, 0), (1, 0), (1, 1), (0, 1), (0, 0)))
        calls = {"n": 0}

        class Flaky(geo.ImageryClient):
            def fetch(self, polygon, size):
                calls["n"] += 1
                if calls["n"] < 3:
                    raise FetchError("transient")
                return np.zeros((size, size, 3), dtype=np.uint8)

        tile = geo.acquire_rgb(Flaky(), poly, 16, retries=3)
        assert tile.shape == (16, 16, 3)
        assert calls["n"] == 3

    def test_exhausted_retries(self):
        poly = geo.GeoPolygon(((0, 0), (1, 0), (1, 1), (0, 1), (0, 0)))

        class Dead(geo.ImageryClient):
            def fetch(self, polygon, size):
                raise FetchError("offline")

        with pytest.raises(FetchError, match="after 3 attempts"):
            geo.acquire_rgb(Dead(), poly, 16, retries=3)

    def test_http_stub_documents_not_implemented(self):
        client = geo.HttpImageryClient("https://example.invalid/tiles")
        poly = geo.GeoPolygon(((0, 0), (1, 0), (1, 1), (0, 1), (0, 0)))
        with pytest.raises(NotImplementedError):
            client.fetch(poly, 16)


class TestNormalization:
    STATS = geo.DatasetStats(global_min=0.0, global_max=2000.0)

    def test_affine_endpoints_and_midpoint(self):
        vals = np.array([0.0, 1000.0, 2000.0])
        out = geo.normalize_dem(vals, self.STATS)
        np.testing.assert_allclose(out, [-1.0, 0.0, 1.0], atol=1e-7)

    def test_roundtrip_within_tolerance(self):
        rng = T.Rng(5)
        vals = rng.uniform(10_000, 0.0, 2000.0)
        back = geo.denormalize_dem(geo.normalize_dem(vals, self.STATS),
                                   self.STATS)
        assert np.abs(back - vals).max() <= 1e-6 * 2000.0

    def test_out_of_range_clamped_and_counted(self):
        counter = geo.ClampCounter()
        out = geo.normalize_dem(np.array([-50.0, 500.0, 2600.0]), self.STATS,
                                counter)
        assert counter.below == 1 and counter.above == 1
        assert out.min() == -1.0 and out.max() == 1.0

    def test_rgb8_unit_roundtrip(self):
        rng = T.Rng(6)
        rgb8 = (rng.uniform((8, 8, 3), 0, 256).astype(np.uint8))
        unit = geo.rgb8_to_unit(rgb8)
        assert unit.shape == (3, 8, 8)
        assert np.all(np.abs(unit) <= 1.0)
        back = geo.unit_to_rgb8(unit)
        np.testing.assert_array_equal(back, rgb8)

    def test_rgb8_file_roundtrip(self, tmp_path):
        rng = T.Rng(7)
        rgb8 = rng.uniform((16, 16, 3), 0, 256).astype(np.uint8)
        geo.save_rgb8(tmp_path / "t.rgb", rgb8)
        back = geo.load_rgb8(tmp_path / "t.rgb", 16)
        np.testing.assert_array_equal(back, rgb8)


@pytest.fixture(scope="module")
def roi(tmp_path_factory):
    directory = tmp_path_factory.mktemp("roi")
    raster_path, fixture_dir = synthetic.demo_roi(directory, seed=99)
    return raster_path, fixture_dir


class TestBuildDataset:
    def test_fixture_roi_yields_four_pairs(self, roi, tmp_path):
        raster_path, fixture_dir = roi
        raster = geo.load_raster(raster_path, "ascii_grid")
        client = geo.MockFsClient(fixture_dir)
        manifest = geo.build_dataset([raster], client, tmp_path / "d.tfds")
        assert manifest["tile_count"] == 4
        assert manifest["skipped_fetch"] == 0

    def test_digest_stable_across_runs(self, roi, tmp_path):
        raster_path, fixture_dir = roi
        raster = geo.load_raster(raster_path, "ascii_grid")
        client = geo.MockFsClient(fixture_dir)
        m1 = geo.build_dataset([raster], client, tmp_path / "a.tfds")
        m2 = geo.build_dataset([raster], client, tmp_path / "b.tfds")
        assert m1["content_digest"] == m2["content_digest"]
        assert (tmp_path / "a.tfds").read_bytes() == (tmp_path / "b.tfds").read_bytes()

    def test_missing_fixture_skips_tile(self, roi, tmp_path):
        import os
        import shutil
        raster_path, fixture_dir = roi
        partial = tmp_path / "partial_fixtures"
        shutil.copytree(fixture_dir, partial)
        victim = sorted(os.listdir(partial))[0]
        os.remove(partial / victim)
        raster = geo.load_raster(raster_path, "ascii_grid")
        manifest = geo.build_dataset([raster], geo.MockFsClient(partial),
                                     tmp_path / "d.tfds")
        assert manifest["tile_count"] == 3
        assert manifest["skipped_fetch"] == 1

    def test_roundtrip_pairs(self, roi, tmp_path):
        raster_path, fixture_dir = roi
        raster = geo.load_raster(raster_path, "ascii_grid")
        client = geo.MockFsClient(fixture_dir)
        path = tmp_path / "d.tfds"
        manifest = geo.build_dataset([raster], client, path)
        back_manifest, pairs = geo.read_dataset(path)
        pairs = list(pairs)
        assert back_manifest["content_digest"] == manifest["content_digest"]
        assert len(pairs) == 4
        assert [(p.row, p.col) for p in pairs] == [(0, 0), (0, 1), (1, 0), (1, 1)]
        for p in pairs:
            assert p.dem.shape == (1, 256, 256)
            assert p.rgb.shape == (3, 256, 256)
            assert np.abs(p.dem.data).max() <= 1.0
            assert np.abs(p.rgb.data).max() <= 1.0

    def test_truncation_detected(self, roi, tmp_path):
        raster_path, fixture_dir = roi
        raster = geo.load_raster(raster_path, "ascii_grid")
        path = tmp_path / "d.tfds"
        geo.build_dataset([raster], geo.MockFsClient(fixture_dir), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-100])
        with pytest.raises(CorruptionError):
            geo.read_dataset(path)

    def test_tamper_detected(self, roi, tmp_path):
        raster_path, fixture_dir = roi
        raster = geo.load_raster(raster_path, "ascii_grid")
        path = tmp_path / "d.tfds"
        geo.build_dataset([raster], geo.MockFsClient(fixture_dir), path)
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptionError, match="digest mismatch"):
            geo.read_dataset(path)
