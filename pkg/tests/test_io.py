"""File format round trips and malformed-input errors."""

import struct

import numpy as np
import pytest

from pano4d.geometry import PerspectiveCamera, icosahedron_rig
from pano4d.io import (
    FLO_MAGIC,
    FormatError,
    read_flo,
    read_frame_png,
    read_mask_png,
    read_pfm,
    read_ply,
    read_rig_manifest,
    rgb_to_gray601,
    write_flo,
    write_frame_png,
    write_mask_png,
    write_pfm,
    write_ply,
    write_rig_manifest,
)


def test_gray601_weights():
    frame = np.zeros((2, 3, 3))
    frame[..., 0] = 1.0
    assert np.allclose(rgb_to_gray601(frame), 0.299 * 255.0)
    white = np.ones((1, 1, 3))
    assert np.allclose(rgb_to_gray601(white), 255.0)


def test_frame_png_round_trip(tmp_path, rng):
    frame = rng.random((12, 24, 3))
    path = tmp_path / "frame.png"
    write_frame_png(path, frame)
    back = read_frame_png(path)
    assert back.shape == frame.shape
    assert back.dtype == np.float32
    # 8-bit quantization error only
    assert np.max(np.abs(back - frame)) <= 0.5 / 255.0 + 1e-7


def test_frame_png_clips_out_of_range(tmp_path):
    frame = np.array([[[-0.5, 0.5, 1.5]]])
    path = tmp_path / "frame.png"
    write_frame_png(path, frame)
    back = read_frame_png(path)
    assert np.allclose(back[0, 0], (0.0, 0.5, 1.0), atol=0.5 / 255.0)


def test_mask_png_round_trip(tmp_path, rng):
    mask = rng.random((9, 17)) > 0.5
    path = tmp_path / "mask.png"
    write_mask_png(path, mask)
    back = read_mask_png(path)
    assert back.dtype == np.bool_
    assert np.array_equal(back, mask)


def test_pfm_round_trip(tmp_path, rng):
    depth = rng.random((7, 11)).astype(np.float32) * 50.0
    path = tmp_path / "d.pfm"
    write_pfm(path, depth)
    back = read_pfm(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, depth)


def test_pfm_byte_layout(tmp_path):
    depth = np.arange(6, dtype=np.float32).reshape(2, 3)
    path = tmp_path / "d.pfm"
    write_pfm(path, depth)
    data = path.read_bytes()
    assert data.startswith(b"Pf\n3 2\n-1.0\n")
    body = data[len(b"Pf\n3 2\n-1.0\n"):]
    # rows are stored bottom to top
    stored = np.frombuffer(body, "<f4").reshape(2, 3)
    assert np.array_equal(stored, depth[::-1])


def test_pfm_rejects_non_2d():
    with pytest.raises(ValueError):
        write_pfm("/dev/null", np.zeros((2, 3, 1), np.float32))


def test_pfm_bad_magic(tmp_path):
    path = tmp_path / "d.pfm"
    path.write_bytes(b"PF\n2 2\n-1.0\n" + b"\0" * 16)
    with pytest.raises(FormatError) as e:
        read_pfm(path)
    assert e.value.offset == 0


def test_pfm_truncated(tmp_path):
    path = tmp_path / "d.pfm"
    path.write_bytes(b"Pf\n4 4\n-1.0\n" + b"\0" * 8)
    with pytest.raises(FormatError):
        read_pfm(path)


def test_pfm_big_endian_scale(tmp_path):
    depth = np.array([[1.5, -2.0]], np.float32)
    path = tmp_path / "d.pfm"
    path.write_bytes(b"Pf\n2 1\n1.0\n" + depth[::-1].astype(">f4").tobytes())
    assert np.array_equal(read_pfm(path), depth)


def test_flo_round_trip(tmp_path, rng):
    flow = rng.normal(size=(5, 8, 2)).astype(np.float32)
    path = tmp_path / "f.flo"
    write_flo(path, flow)
    back = read_flo(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, flow)


def test_flo_header_layout(tmp_path):
    flow = np.zeros((2, 3, 2), np.float32)
    path = tmp_path / "f.flo"
    write_flo(path, flow)
    magic, w, h = struct.unpack_from("<fii", path.read_bytes(), 0)
    assert magic == np.float32(FLO_MAGIC)
    assert (w, h) == (3, 2)


def test_flo_bad_magic(tmp_path):
    path = tmp_path / "f.flo"
    path.write_bytes(struct.pack("<fii", 1.0, 2, 2) + b"\0" * 32)
    with pytest.raises(FormatError) as e:
        read_flo(path)
    assert e.value.offset == 0


def test_flo_truncated(tmp_path):
    path = tmp_path / "f.flo"
    path.write_bytes(struct.pack("<fii", FLO_MAGIC, 4, 4) + b"\0" * 10)
    with pytest.raises(FormatError):
        read_flo(path)


def test_flo_rejects_bad_shape():
    with pytest.raises(ValueError):
        write_flo("/dev/null", np.zeros((4, 4, 3), np.float32))


def test_ply_round_trip(tmp_path, rng):
    n = 40
    positions = rng.normal(size=(n, 3)).astype(np.float32)
    colors = rng.random((n, 3))
    times = rng.integers(0, 5, n).astype(np.float32)
    path = tmp_path / "c.ply"
    write_ply(path, positions, colors, times)
    pos, col, t = read_ply(path)
    assert np.array_equal(pos, positions)
    assert np.array_equal(t, times)
    assert np.max(np.abs(col - colors)) <= 0.5 / 255.0 + 1e-7


def test_ply_record_size(tmp_path):
    path = tmp_path / "c.ply"
    write_ply(path, np.zeros((3, 3)), np.zeros((3, 3)), np.zeros(3))
    data = path.read_bytes()
    header_end = data.index(b"end_header\n") + len(b"end_header\n")
    assert len(data) - header_end == 3 * 19


def test_ply_length_mismatch():
    with pytest.raises(ValueError):
        write_ply("/dev/null", np.zeros((2, 3)), np.zeros((3, 3)), np.zeros(2))


def test_ply_bad_property_list(tmp_path):
    path = tmp_path / "c.ply"
    write_ply(path, np.zeros((1, 3)), np.zeros((1, 3)), np.zeros(1))
    text = path.read_bytes().replace(b"property float t", b"property float w")
    path.write_bytes(text)
    with pytest.raises(FormatError):
        read_ply(path)


def test_ply_truncated(tmp_path):
    path = tmp_path / "c.ply"
    write_ply(path, np.zeros((4, 3)), np.zeros((4, 3)), np.zeros(4))
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(FormatError):
        read_ply(path)


def test_rig_manifest_round_trip(tmp_path):
    cams = icosahedron_rig(fov=75.0, width=96, height=96)
    cams.append(PerspectiveCamera(name="extra", yaw=12.5, pitch=-3.25,
                                  roll=1.0, fov=46.0, width=64, height=32,
                                  position=(0.1, -0.2, 0.3)))
    path = tmp_path / "rig.txt"
    write_rig_manifest(path, cams)
    back = read_rig_manifest(path)
    assert len(back) == len(cams)
    for a, b in zip(cams, back):
        assert a.name == b.name
        assert (a.width, a.height) == (b.width, b.height)
        # repr round trip is exact for floats
        assert (a.yaw, a.pitch, a.roll, a.fov) == (b.yaw, b.pitch, b.roll, b.fov)
        assert tuple(a.position) == tuple(b.position)


def test_rig_manifest_skips_comments(tmp_path):
    path = tmp_path / "rig.txt"
    path.write_text("# heading\n\ncam 0.0 0.0 0.0 90.0 8 8 0.0 0.0 0.0\n")
    cams = read_rig_manifest(path)
    assert len(cams) == 1
    assert cams[0].name == "cam"


def test_rig_manifest_field_count(tmp_path):
    path = tmp_path / "rig.txt"
    path.write_text("cam 0.0 0.0 0.0 90.0 8 8 0.0\n")
    with pytest.raises(FormatError):
        read_rig_manifest(path)


def test_rig_manifest_bad_number(tmp_path):
    path = tmp_path / "rig.txt"
    path.write_text("cam 0.0 oops 0.0 90.0 8 8 0.0 0.0 0.0\n")
    with pytest.raises(FormatError):
        read_rig_manifest(path)
