import math

import numpy as np
import pytest
import torch

from surfeltrace.renderer import Camera, gbuffer_torch, pixel_ray, render_gbuffer, render_pbr
from surfeltrace.scene import Scene
from surfeltrace.shading import EnvCubemap
from surfeltrace.tracer import Tracer

from conftest import disk, random_scene


def front_camera(w=16, h=12, fov=60.0, dist=3.0):
    return Camera.look_at([0, 0, dist], [0, 0, 0], [0, 1, 0], w, h, fov)


def test_principal_point_ray_is_forward():
    cam = Camera(8, 8, 10.0, 10.0, 4.0, 4.0, np.eye(4))
    r = pixel_ray(cam, 4.0, 4.0)
    assert np.allclose(r.dir, [0, 0, 1]) and np.allclose(r.origin, 0.0)


def test_ray_at_one_focal_length_is_45_degrees():
    cam = Camera(64, 64, 20.0, 20.0, 16.0, 16.0, np.eye(4))
    r = pixel_ray(cam, 36.0, 16.0)
    assert np.allclose(r.dir, [math.sqrt(0.5), 0, math.sqrt(0.5)])


def test_pixel_outside_image_raises():
    cam = Camera(8, 8, 10.0, 10.0, 4.0, 4.0, np.eye(4))
    with pytest.raises(ValueError):
        pixel_ray(cam, 8.0, 0.0)


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(8, 8, -1.0, 1.0, 4, 4, np.eye(4))
    bad = np.eye(4)
    bad[0, 0] = 2.0
    with pytest.raises(ValueError):
        Camera(8, 8, 1.0, 1.0, 4, 4, bad)


def test_look_at_pose_is_orthonormal():
    cam = Camera.look_at([1, 2, 3], [0, 0, 0], [0, 0, 1], 10, 10, 45)
    R = cam.pose[:3, :3]
    assert np.allclose(R.T @ R, np.eye(3)) and np.linalg.det(R) == pytest.approx(1.0)
    assert np.allclose(R[:, 2], -np.array([1, 2, 3]) / math.sqrt(14))


def test_empty_scene_renders_background():
    gb = render_gbuffer(Scene.empty(), front_camera(), background=(0.2, 0.3, 0.4))
    assert np.all(gb.O == 0)
    assert np.allclose(gb.C, [0.2, 0.3, 0.4])
    assert np.all(gb.N == 0) and np.all(np.isnan(gb.X))


def test_opaque_fronto_parallel_disk():
    scene = Scene.from_gaussians([disk(scale=(5, 5), opacity=1 - 2.0**-52, albedo=(0.1, 0.6, 0.3))])
    cam = Camera(3, 3, 100.0, 100.0, 1.5, 1.5, np.diag([1.0, -1.0, -1.0, 1.0]) + np.diag([0, 0, 0, 0]))
    cam.pose[2, 3] = 2.0
    gb = render_gbuffer(scene, cam)
    o, d = cam.rays()
    c = 4  # center pixel
    assert gb.D.reshape(-1)[c] == pytest.approx(2.0 / abs(d[c, 2]), abs=1e-9)
    assert np.allclose(gb.N.reshape(-1, 3)[c], -d[c] * np.sign(-d[c, 2]) * 0 + [0, 0, 1], atol=1e-12)
    assert np.allclose(gb.A.reshape(-1, 3)[c], [0.1, 0.6, 0.3], atol=1e-9)


def test_two_stacked_disks_depth():
    scene = Scene.from_gaussians([disk(mu=(0, 0, -1), opacity=0.5, scale=(9, 9)),
                                  disk(mu=(0, 0, -2), opacity=0.5, scale=(9, 9))])
    cam = Camera(1, 1, 10.0, 10.0, 0.5, 0.5, np.diag([1.0, -1.0, -1.0, 1.0]))
    gb = render_gbuffer(scene, cam)
    assert gb.D[0, 0] == pytest.approx(4.0 / 3.0, abs=1e-12)
    assert gb.O[0, 0] == pytest.approx(0.75, abs=1e-12)


def test_blend_weights_are_normalized(rng):
    scene = random_scene(rng, 60)
    cam = front_camera(24, 24, fov=50)
    act = scene.activate()
    tr = Tracer(act.geom_array(), act.sh_array(), np.ones((60, 4)))
    gb = render_gbuffer(tr, cam)
    fg = gb.O > 0
    assert fg.any()
    assert np.allclose(gb.A[fg], 1.0, atol=1e-6) and np.allclose(gb.R[fg], 1.0, atol=1e-6)
    n = np.linalg.norm(gb.N[gb.O > 1e-4], axis=-1)
    assert np.allclose(n, 1.0, atol=1e-9)


def test_background_separation(rng):
    scene = random_scene(rng, 30, extent=0.4)
    gb = render_gbuffer(scene, front_camera(32, 32))
    empty = gb.O < 1e-4
    assert empty.any()
    assert np.all(gb.N[empty] == 0) and np.all(np.isnan(gb.X[empty]))


def test_position_from_blended_depth(rng):
    scene = random_scene(rng, 40, extent=0.5, opacity=(0.8, 0.99))
    cam = front_camera(24, 24)
    gb = render_gbuffer(scene, cam)
    o, d = cam.rays()
    fg = gb.foreground.reshape(-1)
    X = o + gb.D.reshape(-1)[:, None] * d
    assert np.allclose(gb.X.reshape(-1, 3)[fg], X[fg])


def test_resolution_equivariance():
    rng = np.random.default_rng(3)
    scene = random_scene(rng, 30, extent=0.5, scale=(0.4, 0.8), sh_degree=0)
    lo = render_gbuffer(scene, front_camera(16, 16, 50))
    hi = render_gbuffer(scene, front_camera(32, 32, 50))
    down = hi.C.reshape(16, 2, 16, 2, 3).mean((1, 3))
    assert np.abs(down - lo.C).mean() < 5e-2


def test_torch_gbuffer_matches_numpy(rng):
    scene = random_scene(rng, 40, extent=0.5)
    cam = front_camera(16, 16)
    gb = render_gbuffer(scene, cam, background=(1, 1, 1))
    o, d = cam.rays()
    with torch.no_grad():
        buf = gbuffer_torch(scene.activate(), o, d, background=(1, 1, 1))
    assert np.allclose(buf["C"].numpy(), gb.C.reshape(-1, 3), atol=1e-12)
    assert np.allclose(buf["O"].numpy(), gb.O.reshape(-1), atol=1e-12)
    fg = gb.O.reshape(-1) > 1e-4
    assert np.allclose(buf["N"].numpy()[fg], gb.N.reshape(-1, 3)[fg], atol=1e-9)
    assert np.allclose(buf["A"].numpy()[fg], gb.A.reshape(-1, 3)[fg], atol=1e-9)


def test_pbr_render_of_empty_scene_is_an_error():
    with pytest.raises(ValueError, match="no gaussians"):
        render_pbr(Scene.empty(), EnvCubemap.constant(1.0, 4), front_camera())


def test_pbr_render_maps(rng):
    scene = random_scene(rng, 20, extent=0.4, opacity=(0.6, 0.95))
    maps = render_pbr(scene, EnvCubemap.constant(1.0, 8), front_camera(12, 12), n_samples=16)
    for key in ("pbr", "L_dir", "L_ind", "L_i", "V", "C", "D", "N", "O", "A", "R"):
        assert key in maps
        assert np.all(np.isfinite(maps[key]))
    bg = maps["O"] < 1e-4
    assert np.all(maps["V"][bg] == 1.0)
    assert np.all((maps["V"] >= 0) & (maps["V"] <= 1))
