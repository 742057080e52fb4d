import math

import numpy as np
import pytest

from surfeltrace.scene import Gaussian2D, Scene, logit

# filled by the acceptance suite, echoed at the end of the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])


def disk(mu=(0.0, 0.0, 0.0), rot=(1.0, 0.0, 0.0, 0.0), scale=(1.0, 1.0), opacity=0.5,
         color=None, albedo=(0.5, 0.5, 0.5), roughness=0.5) -> Gaussian2D:
    """A surfel specified in activated units."""
    sh = np.zeros((9, 3))
    if color is not None:
        sh[0] = (np.asarray(color, dtype=np.float64) - 0.5) / 0.28209479177387814
    return Gaussian2D(
        mu=mu, rot=rot, scale_raw=np.log(scale), opacity_raw=float(logit(opacity)), sh=sh,
        albedo_raw=logit(np.asarray(albedo, dtype=np.float64)), roughness_raw=float(logit(roughness)),
    )


def random_scene(rng, n, extent=1.0, scale=(0.05, 0.3), opacity=(0.05, 0.99), sh_degree=2) -> Scene:
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    sh = np.zeros((n, 9, 3))
    k = (sh_degree + 1) ** 2
    sh[:, :k] = rng.normal(scale=0.4, size=(n, k, 3))
    return Scene(
        mu=rng.uniform(-extent, extent, size=(n, 3)),
        rot=q,
        scale_raw=np.log(rng.uniform(*scale, size=(n, 2))),
        opacity_raw=logit(rng.uniform(*opacity, size=n)),
        sh=sh,
        albedo_raw=rng.normal(size=(n, 3)),
        roughness_raw=rng.normal(size=n),
    )


def random_rays(rng, n, radius=3.0, target=0.8):
    """Rays from a sphere of ``radius`` aimed at points inside a small box."""
    o = rng.normal(size=(n, 3))
    o *= radius / np.linalg.norm(o, axis=1, keepdims=True)
    t = rng.uniform(-target, target, size=(n, 3))
    d = t - o
    return o, d / np.linalg.norm(d, axis=1, keepdims=True)


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def quat_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])
