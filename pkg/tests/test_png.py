import io

import numpy as np
import pytest
from PIL import Image

from trafficctx.png import decode_png, encode_png, write_png_bytes


def _random_image(rng, h, w):
    return rng.integers(0, 256, size=(h, w, 4), dtype=np.uint8)


def test_pillow_reads_our_png(rng):
    for h, w in [(1, 1), (7, 13), (64, 48)]:
        px = _random_image(rng, h, w)
        im = Image.open(io.BytesIO(encode_png(px)))
        assert im.mode == "RGBA" and im.size == (w, h)
        assert np.array_equal(np.asarray(im), px)


def test_we_read_pillow_png(rng):
    # Pillow picks its own row filters, which exercises the decoder's unfiltering paths
    gradient = np.zeros((40, 50, 4), dtype=np.uint8)
    gradient[..., 0] = np.arange(50)[None, :] * 5
    gradient[..., 1] = np.arange(40)[:, None] * 6
    gradient[..., 3] = 255
    for px in (gradient, _random_image(rng, 33, 21)):
        buf = io.BytesIO()
        Image.fromarray(px, "RGBA").save(buf, format="PNG", optimize=True)
        assert np.array_equal(decode_png(buf.getvalue()), px)


def test_encoding_is_deterministic(rng):
    px = _random_image(rng, 20, 20)
    assert encode_png(px) == encode_png(px.copy())


def test_corrupt_crc_rejected(rng):
    data = bytearray(encode_png(_random_image(rng, 4, 4)))
    data[20] ^= 0xFF  # inside IHDR
    with pytest.raises(ValueError):
        decode_png(bytes(data))


def test_atomic_write(tmp_path, rng):
    p = tmp_path / "x.png"
    data = encode_png(_random_image(rng, 3, 3))
    write_png_bytes(data, p)
    assert p.read_bytes() == data
    assert [f.name for f in tmp_path.iterdir()] == ["x.png"]
