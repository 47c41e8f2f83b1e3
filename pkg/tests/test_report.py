import json
import struct
import zlib

import numpy as np
import pytest

from manifold_probe.report import (SEPARATOR_VALUE, OutputDir, csv_text, fmt, image_grid,
                                   json_text, pgm_bytes, png_bytes, quantize, read_pgm, sha256,
                                   svg_plot, verify_manifest)


def decode_png(data):
    assert data[:8] == b"\x89PNG\r\n\x1a\n"
    pos, chunks = 8, {}
    while pos < len(data):
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        tag = data[pos + 4:pos + 8]
        body = data[pos + 8:pos + 8 + length]
        (crc,) = struct.unpack(">I", data[pos + 8 + length:pos + 12 + length])
        assert crc == zlib.crc32(tag + body) & 0xFFFFFFFF
        chunks[tag] = chunks.get(tag, b"") + body
        pos += 12 + length
    w, h = struct.unpack(">II", chunks[b"IHDR"][:8])
    raw = zlib.decompress(chunks[b"IDAT"])
    rows = [raw[r * (w + 1):(r + 1) * (w + 1)] for r in range(h)]
    assert all(row[0] == 0 for row in rows)
    return np.frombuffer(b"".join(row[1:] for row in rows), dtype=np.uint8).reshape(h, w)


class TestFormatting:
    def test_fmt(self):
        assert fmt(0.1) == "0.1"
        assert fmt(np.float64(1e-300)) == "1e-300"
        assert fmt(None) == "" and fmt(True) == "1" and fmt(np.int64(3)) == "3"

    def test_csv_lf(self):
        text = csv_text(["a", "b"], [(1, 0.5), ("x,y", None)])
        assert text == 'a,b\n1,0.5\n"x,y",\n'

    def test_json_sorted_and_nan_null(self):
        text = json_text({"b": np.float64(np.nan), "a": np.arange(2)})
        assert text.index('"a"') < text.index('"b"')
        assert json.loads(text) == {"a": [0, 1], "b": None}
        assert text.endswith("\n")


class TestImages:
    def test_quantize_clamps_and_rounds_half_even(self):
        # 0.5/255 and 2.5/255 sit exactly on ties in x*255
        q = quantize([-1.0, 0.5 / 255, 1.5 / 255, 2.5 / 255, 2.0])
        np.testing.assert_array_equal(q, [0, 0, 2, 2, 255])
        assert q.dtype == np.uint8

    def test_grid_separators(self):
        tiles = np.zeros((2, 3, 4, 5), dtype=np.uint8)
        grid = image_grid(tiles)
        assert grid.shape == (2 * 5 - 1, 3 * 6 - 1)
        assert np.all(grid[4, :] == SEPARATOR_VALUE)
        assert np.all(grid[:, 5] == SEPARATOR_VALUE) and np.all(grid[:, 11] == SEPARATOR_VALUE)
        assert np.count_nonzero(grid == 0) == 2 * 3 * 4 * 5

    def test_pgm_round_trip(self, rng):
        img = rng.integers(0, 256, (7, 9), dtype=np.uint8)
        data = pgm_bytes(img)
        assert data.startswith(b"P5\n9 7\n255\n")
        np.testing.assert_array_equal(read_pgm(data), img)

    def test_png_round_trip(self, rng):
        img = rng.integers(0, 256, (6, 11), dtype=np.uint8)
        np.testing.assert_array_equal(decode_png(png_bytes(img)), img)

    def test_png_deterministic(self):
        img = np.arange(64, dtype=np.uint8).reshape(8, 8)
        assert png_bytes(img) == png_bytes(img.copy())


class TestSvg:
    def test_polyline_and_log_drop(self):
        svg = svg_plot({"s": ([1, 2, 3], [10.0, 0.0, 1000.0])}, "t", log_y=True)
        assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
        pts = svg.split('points="')[1].split('"')[0].split()
        assert len(pts) == 2

    def test_empty_series(self):
        assert "<svg" in svg_plot({"s": ([], [])})


class TestOutputDir:
    def test_write_once(self, tmp_path):
        d = OutputDir(tmp_path / "o")
        d.write_text("a.txt", "x")
        with pytest.raises(FileExistsError):
            OutputDir(tmp_path / "o")
        OutputDir(tmp_path / "o", force=True)

    def test_not_a_directory(self, tmp_path):
        (tmp_path / "f").write_text("x")
        with pytest.raises(FileExistsError):
            OutputDir(tmp_path / "f", force=True)

    def test_manifest(self, tmp_path):
        d = OutputDir(tmp_path / "o")
        d.write_text("b.csv", "1\n")
        d.write_bytes("sub/a.bin", b"\x00")
        man = d.manifest()
        assert [m["path"] for m in man] == ["b.csv", "sub/a.bin"]
        assert man[0]["sha256"] == sha256(b"1\n")
        assert verify_manifest(d.path, man) == []
        (d.path / "b.csv").write_text("2\n")
        (d.path / "sub" / "a.bin").unlink()
        assert verify_manifest(d.path, man) == ["b.csv", "sub/a.bin"]
