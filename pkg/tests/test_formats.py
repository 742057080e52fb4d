import math

import numpy as np
import pytest

from surfeltrace import cubemap
from surfeltrace.formats import (
    CHECKPOINT_MAGIC, FormatError, cube_to_equirect, encode_display, equirect_directions,
    load_container, load_env, load_image, load_pfm, load_scene, save_container, save_env,
    save_image, save_pfm, save_scene,
)
from surfeltrace.shading import EnvCubemap

from conftest import random_scene


def test_pfm_round_trip_is_bit_exact(tmp_path, rng):
    for shape in ((5, 7, 3), (4, 6)):
        img = rng.normal(size=shape).astype(np.float32)
        save_pfm(tmp_path / "a.pfm", img)
        back = load_pfm(tmp_path / "a.pfm")
        assert back.dtype == np.float32 and np.array_equal(back, img)


def test_pfm_orientation(tmp_path):
    img = np.zeros((3, 2), np.float32)
    img[0, 0] = 1.0  # top-left
    save_pfm(tmp_path / "a.pfm", img)
    raw = (tmp_path / "a.pfm").read_bytes()
    body = np.frombuffer(raw.split(b"\n", 3)[3], "<f4")
    assert body[-2] == 1.0  # stored bottom row first


def test_pfm_errors(tmp_path):
    (tmp_path / "bad.pfm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(FormatError):
        load_pfm(tmp_path / "bad.pfm")
    (tmp_path / "short.pfm").write_bytes(b"PF\n4 4\n-1.0\n\x00\x00")
    with pytest.raises(FormatError):
        load_pfm(tmp_path / "short.pfm")
    with pytest.raises(FormatError):
        save_pfm(tmp_path / "x.pfm", np.zeros((2, 2, 5)))


def test_gamma_encoding():
    assert encode_display(0.5) == 186
    assert encode_display(-3.0) == 0 and encode_display(7.0) == 255


def test_png_round_trip(tmp_path):
    img = np.linspace(0, 1, 48).reshape(4, 4, 3)
    save_image(tmp_path / "a.png", img)
    back = load_image(tmp_path / "a.png")
    assert back.shape == (4, 4, 3)
    assert np.abs(back ** (1 / 2.2) - img ** (1 / 2.2)).max() <= 0.5 / 255 + 1e-12
    raw = load_image(tmp_path / "a.png", linear=False)
    assert np.allclose(raw * 255, encode_display(img))


def test_unknown_extension(tmp_path):
    with pytest.raises(FormatError):
        save_image(tmp_path / "a.jpg", np.zeros((2, 2, 3)))
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(FormatError):
        load_image(tmp_path / "junk.png")


def test_scene_round_trip(tmp_path, rng):
    s = random_scene(rng, 12)
    save_scene(tmp_path / "s.json", s)
    back = load_scene(tmp_path / "s.json")
    for k, v in s.params().items():
        assert np.array_equal(v.detach().numpy(), back.params()[k].detach().numpy())


def test_scene_errors(tmp_path):
    (tmp_path / "a.json").write_text("{nope")
    with pytest.raises(FormatError):
        load_scene(tmp_path / "a.json")
    (tmp_path / "b.json").write_text('{"version": 99}')
    with pytest.raises(FormatError):
        load_scene(tmp_path / "b.json")


def test_container_round_trip(tmp_path, rng):
    arrays = {"b": rng.normal(size=(3, 4)), "a": np.arange(5, dtype=np.int64), "c": np.zeros((0, 3))}
    save_container(tmp_path / "c.bin", {"x": 1, "y": [1, 2]}, arrays)
    meta, back = load_container(tmp_path / "c.bin")
    assert meta == {"x": 1, "y": [1, 2]}
    for k in arrays:
        assert np.array_equal(arrays[k], back[k]) and back[k].shape == arrays[k].shape
    data = (tmp_path / "c.bin").read_bytes()
    assert data.startswith(CHECKPOINT_MAGIC)
    save_container(tmp_path / "d.bin", {"y": [1, 2], "x": 1}, dict(reversed(list(arrays.items()))))
    assert (tmp_path / "d.bin").read_bytes() == data


def test_container_rejects_foreign_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(FormatError):
        load_container(tmp_path / "x.bin")


def test_constant_equirect_gives_constant_cube(tmp_path):
    save_pfm(tmp_path / "e.pfm", np.full((16, 32, 3), 0.75, np.float32))
    env = load_env(tmp_path / "e.pfm", 8)
    assert np.allclose(env.numpy(), 0.75)


def test_equirect_cosine_lobe(tmp_path):
    d = equirect_directions(64, 128)
    img = np.repeat(np.maximum(0.0, d[..., 2:3]), 3, axis=2).astype(np.float32)
    save_pfm(tmp_path / "e.pfm", img)
    env = load_env(tmp_path / "e.pfm", 32)
    L = env.lookup([[0, 0, 1.0], [0, 0, -1.0]]).numpy()
    assert abs(L[0, 0] - 1.0) < 2e-2 and abs(L[1, 0]) < 2e-2


def test_env_round_trip_on_smooth_input(tmp_path):
    dirs = cubemap.texel_directions(16)
    rad = np.stack([1 + 0.5 * dirs[..., 0], 1 + 0.3 * dirs[..., 1] * dirs[..., 2], 1.5 - 0.5 * dirs[..., 2]], -1)
    save_env(tmp_path / "e.pfm", EnvCubemap.from_radiance(rad), height=64)
    back = load_env(tmp_path / "e.pfm", 16).numpy()
    assert np.abs(back - rad).max() < 5e-2


def test_env_resampling_is_deterministic(tmp_path, rng):
    save_pfm(tmp_path / "e.pfm", rng.random((8, 16, 3)).astype(np.float32))
    a = load_env(tmp_path / "e.pfm", 8).numpy()
    b = load_env(tmp_path / "e.pfm", 8).numpy()
    assert np.array_equal(a, b)


def test_env_format_errors(tmp_path):
    save_image(tmp_path / "e.png", np.ones((4, 8, 3)))
    with pytest.raises(FormatError):
        load_env(tmp_path / "e.png")
    img = np.ones((4, 8, 3), np.float32)
    img[0, 0, 0] = np.inf
    save_pfm(tmp_path / "inf.pfm", img)
    with pytest.raises(FormatError):
        load_env(tmp_path / "inf.pfm")


def test_cube_to_equirect_shape():
    out = cube_to_equirect(np.ones((6, 4, 4, 3)), 8, 16)
    assert out.shape == (8, 16, 3) and np.allclose(out, 1.0)
