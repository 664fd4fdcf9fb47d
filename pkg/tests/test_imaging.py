import json
import struct

import cv2
import numpy as np
import pytest
from skimage.metrics import structural_similarity

from uwmvs.exceptions import DomainError, ParseError
from uwmvs.imaging import (
    central_crop_eval_region,
    psnr,
    read_image,
    read_manifest,
    read_pfm,
    srgb_decode,
    srgb_encode,
    ssim,
    ssim_map,
    write_depth,
    write_image,
    write_pfm,
)
from uwmvs.synthetic import generate_dataset


# -- PNG -------------------------------------------------------------------------
def test_png16_round_trip(tmp_path, rng):
    img = rng.random((13, 17, 3))
    back = read_image(write_image(tmp_path / "a.png", img))
    assert back.shape == img.shape and back.dtype == np.float32
    assert np.abs(back - img).max() <= 0.5 / 65535 + 1e-7


def test_png16_endpoints_exact(tmp_path):
    img = np.zeros((2, 2, 3))
    img[1] = 1.0
    back = read_image(write_image(tmp_path / "e.png", img))
    np.testing.assert_array_equal(back, img)


def test_png8_srgb_mid_grey(tmp_path):
    back = read_image(write_image(tmp_path / "g.png", np.full((4, 4, 3), 0.5), bit_depth=8))
    assert np.abs(back - 0.5).max() <= 1 / 255
    raw = cv2.imread(str(tmp_path / "g.png"), cv2.IMREAD_UNCHANGED)
    assert raw.dtype == np.uint8 and np.all(raw == np.round(srgb_encode(0.5) * 255))


def test_srgb_curve_inverse(rng):
    x = rng.random(1000)
    np.testing.assert_allclose(srgb_decode(srgb_encode(x)), x, atol=1e-12)


def test_png16_matches_cv2_reader(tmp_path, rng):
    img = rng.random((9, 11, 3))
    write_image(tmp_path / "c.png", img)
    bgr = cv2.imread(str(tmp_path / "c.png"), cv2.IMREAD_UNCHANGED)
    assert bgr.dtype == np.uint16
    np.testing.assert_array_equal(bgr[..., ::-1], np.round(img * 65535).astype(np.uint16))


@pytest.mark.parametrize("dtype, scale", [(np.uint8, 255), (np.uint16, 65535)])
def test_reads_cv2_written_png(tmp_path, rng, dtype, scale):
    # cv2 uses adaptive row filters, so this exercises the Sub/Up/Average/Paeth paths
    q = (rng.random((21, 19, 3)) * scale).astype(dtype)
    q[5:] = np.cumsum(q[5:].astype(np.int64), axis=1).astype(dtype)
    cv2.imwrite(str(tmp_path / "w.png"), q[..., ::-1])
    back = read_image(tmp_path / "w.png")
    expect = q / scale if dtype == np.uint16 else srgb_decode(q / 255.0)
    np.testing.assert_allclose(back, expect, atol=1e-6)


def test_png_greyscale(tmp_path, rng):
    img = rng.random((5, 6))
    assert read_image(write_image(tmp_path / "g.png", img)).shape == (5, 6)


def test_png_parse_errors(tmp_path, rng):
    p = write_image(tmp_path / "a.png", rng.random((4, 4, 3)))
    buf = p.read_bytes()
    (tmp_path / "sig.png").write_bytes(b"JUNK" + buf[4:])
    with pytest.raises(ParseError) as e:
        read_image(tmp_path / "sig.png")
    assert e.value.offset == 0
    bad = bytearray(buf)
    bad[20] ^= 0xFF  # inside IHDR data, breaks the CRC of the chunk at byte 8
    (tmp_path / "crc.png").write_bytes(bytes(bad))
    with pytest.raises(ParseError) as e:
        read_image(tmp_path / "crc.png")
    assert e.value.offset == 8
    (tmp_path / "short.png").write_bytes(buf[:40])
    with pytest.raises(ParseError) as e:
        read_image(tmp_path / "short.png")
    assert e.value.offset is not None and e.value.offset >= 8


def test_png_write_rejects_bad_input(tmp_path):
    with pytest.raises(DomainError):
        write_image(tmp_path / "x.png", np.full((2, 2, 3), np.nan))
    with pytest.raises(DomainError):
        write_image(tmp_path / "x.png", np.zeros((2, 2, 4)))
    with pytest.raises(DomainError):
        write_image(tmp_path / "x.png", np.zeros((2, 2, 3)), bit_depth=12)


# -- PFM -------------------------------------------------------------------------
def _independent_pfm(path):
    with open(path, "rb") as fh:
        tag = fh.readline().strip()
        w, h = map(int, fh.readline().split())
        scale = float(fh.readline())
        data = np.fromfile(fh, dtype="<f4" if scale < 0 else ">f4")
    shape = (h, w, 3) if tag == b"PF" else (h, w)
    return np.flipud(data.reshape(shape))


@pytest.mark.parametrize("shape", [(7, 5), (4, 6, 3)])
def test_pfm_bit_exact(tmp_path, rng, shape):
    a = (rng.normal(size=shape) * 100).astype(np.float32)
    a.flat[0] = np.float32(1e-40)  # subnormal survives
    p = write_pfm(tmp_path / "a.pfm", a)
    assert read_pfm(p).tobytes() == a.tobytes()
    assert _independent_pfm(p).tobytes() == a.tobytes()


def test_pfm_reads_big_endian(tmp_path, rng):
    a = rng.random((3, 4)).astype(np.float32)
    (tmp_path / "b.pfm").write_bytes(b"Pf\n4 3\n1.0\n" + np.flipud(a).astype(">f4").tobytes())
    np.testing.assert_array_equal(read_pfm(tmp_path / "b.pfm"), a)


def test_pfm_errors(tmp_path):
    (tmp_path / "t.pfm").write_bytes(b"PX\n2 2\n-1.0\n" + bytes(16))
    with pytest.raises(ParseError) as e:
        read_pfm(tmp_path / "t.pfm")
    assert e.value.offset == 0
    (tmp_path / "s.pfm").write_bytes(b"Pf\n2 2\n-1.0\n" + bytes(12))
    with pytest.raises(ParseError) as e:
        read_pfm(tmp_path / "s.pfm")
    assert e.value.offset == 12
    with pytest.raises(DomainError):
        write_depth(tmp_path / "d.pfm", np.array([[1.0, np.inf]]))


def test_depth_invalid_pixels_written_as_zero(tmp_path):
    p = write_depth(tmp_path / "d.pfm", np.array([[1.0, np.nan]]), valid=np.array([[True, False]]))
    np.testing.assert_array_equal(read_pfm(p), [[1.0, 0.0]])


# -- metrics -----------------------------------------------------------------------
def test_psnr_examples(rng):
    a = rng.random((20, 20, 3))
    assert psnr(a, a) == float("inf")
    assert psnr(np.zeros(10), np.full(10, 0.1)) == pytest.approx(20.0, abs=1e-12)
    assert psnr(np.zeros(10), np.full(10, 0.01)) == pytest.approx(40.0, abs=1e-12)
    vals = [psnr(a, a + s * rng.normal(size=a.shape)) for s in (0.01, 0.03, 0.1)]
    assert vals[0] > vals[1] > vals[2]
    with pytest.raises(DomainError):
        psnr(np.zeros(3), np.zeros(4))


def test_ssim_properties(rng):
    a = rng.random((24, 24, 3))
    b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
    assert ssim(a, b) < 1.0
    with pytest.raises(DomainError):
        ssim(np.zeros((10, 30)), np.zeros((10, 30)))


def test_ssim_interior_matches_skimage(rng):
    a = rng.random((32, 36, 3))
    b = np.clip(a + 0.15 * rng.normal(size=a.shape), 0, 1)
    ours = ssim_map(a, b)
    for c in range(3):
        _, ref = structural_similarity(
            a[..., c], b[..., c], data_range=1.0, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False, full=True,
        )  # fmt: skip
        np.testing.assert_allclose(ours[5:-5, 5:-5, c], ref[5:-5, 5:-5], atol=1e-5)


def test_central_crop_sizes():
    assert central_crop_eval_region(np.zeros((100, 100))).shape == (80, 80)
    assert central_crop_eval_region(np.zeros((96, 64, 3))).shape == (76, 51, 3)
    img = np.arange(100 * 100).reshape(100, 100)
    c = central_crop_eval_region(img)
    assert c[0, 0] == img[10, 10]
    cc = central_crop_eval_region(c)
    assert cc.shape == (64, 64) and cc[0, 0] == img[18, 18]
    with pytest.raises(DomainError):
        central_crop_eval_region(np.zeros((9, 40)))


# -- manifest ----------------------------------------------------------------------
def test_manifest_round_trip(tmp_path, default_spec, default_dataset):
    generate_dataset(default_spec, tmp_path / "d")
    m = read_manifest(tmp_path / "d" / "manifest.json")
    assert len(m.views) == 8 and m.near == default_dataset.near and m.far == default_dataset.far
    for rec, vp in zip(m.views, default_dataset.viewpoints):
        np.testing.assert_array_equal(rec.viewpoint.pose.R, vp.pose.R)
        assert rec.viewpoint.intrinsics == vp.intrinsics
    assert [v.split for v in m.views] == default_dataset.splits


def test_manifest_errors(tmp_path, default_spec):
    generate_dataset(default_spec, tmp_path / "d")
    path = tmp_path / "d" / "manifest.json"
    text = path.read_text()
    (tmp_path / "d" / "bad.json").write_text(text[:50])
    with pytest.raises(ParseError) as e:
        read_manifest(tmp_path / "d" / "bad.json")
    assert e.value.offset is not None
    doc = json.loads(text)
    doc["format"] = "other"
    (tmp_path / "d" / "fmt.json").write_text(json.dumps(doc))
    with pytest.raises(ParseError):
        read_manifest(tmp_path / "d" / "fmt.json")
    doc = json.loads(text)
    doc["views"][0]["image"] = "underwater/missing.png"
    (tmp_path / "d" / "miss.json").write_text(json.dumps(doc))
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path / "d" / "miss.json")
    assert read_manifest(tmp_path / "d" / "miss.json", check_files=False).views[0].image_path.endswith("missing.png")


def test_png_header_layout(tmp_path):
    p = write_image(tmp_path / "h.png", np.zeros((3, 5, 3)))
    w, h, depth, ctype = struct.unpack(">IIBB", p.read_bytes()[16:26])
    assert (w, h, depth, ctype) == (5, 3, 16, 2)
