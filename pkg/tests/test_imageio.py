import logging

import numpy as np
import pytest
from PIL import Image

from stylerl.imageio import crop_to_multiple, fit_to_size, load_dir, load_image, save_image, to_uint8


def test_png_roundtrip_lossless_for_8_bit(tmp_path, rng):
    pixels = rng.integers(0, 256, size=(12, 8, 3), dtype=np.uint8)
    src = tmp_path / "a.png"
    Image.fromarray(pixels, mode="RGB").save(src)
    img = load_image(src)
    assert img.shape == (3, 12, 8) and img.dtype == np.float32
    out = tmp_path / "b.png"
    save_image(img, out)
    assert np.array_equal(np.asarray(Image.open(out)), pixels)


def test_ppm_is_readable(tmp_path, rng):
    pixels = rng.integers(0, 256, size=(4, 4, 3), dtype=np.uint8)
    path = tmp_path / "a.ppm"
    Image.fromarray(pixels, mode="RGB").save(path)
    assert np.array_equal(to_uint8(load_image(path)), pixels)


def test_grayscale_is_channel_tripled(tmp_path):
    gray = np.arange(16, dtype=np.uint8).reshape(4, 4) * 10
    path = tmp_path / "g.png"
    Image.fromarray(gray, mode="L").save(path)
    img = load_image(path)
    assert img.shape == (3, 4, 4)
    assert np.array_equal(img[0], img[1]) and np.array_equal(img[1], img[2])


def test_to_uint8_rounds_and_clamps():
    img = np.array([-0.2, 0.5, 1.3, 0.2]).reshape(1, 1, 4) * np.ones((3, 1, 1))
    assert to_uint8(img)[0, :, 0].tolist() == [0, 128, 255, 51]


def test_crop_to_multiple_warns(caplog):
    img = np.zeros((3, 10, 13), dtype=np.float32)
    with caplog.at_level(logging.WARNING):
        out = crop_to_multiple(img, 4, "x.png")
    assert out.shape == (3, 8, 12)
    assert "x.png" in caplog.text


def test_fit_to_size_covers_and_crops(rng):
    img = rng.uniform(size=(3, 20, 10)).astype(np.float32)
    assert fit_to_size(img, 12, 16).shape == (3, 12, 16)


def test_load_dir_skips_unreadable(tmp_path, caplog):
    save_image(np.zeros((3, 8, 8)), tmp_path / "ok.png")
    (tmp_path / "bad.png").write_bytes(b"not an image")
    with caplog.at_level(logging.WARNING):
        paths, images = load_dir(tmp_path)
    assert [p.name for p in paths] == ["ok.png"]
    assert "bad.png" in caplog.text


def test_load_dir_resizes_to_square(tmp_path, rng):
    save_image(rng.uniform(size=(3, 20, 30)), tmp_path / "a.png")
    _, images = load_dir(tmp_path, 16)
    assert images[0].shape == (3, 16, 16)


def test_load_dir_missing_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dir(tmp_path / "missing")
