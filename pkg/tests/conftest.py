import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("pkg", deadline=None, max_examples=60)
settings.load_profile("pkg")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_tangents(rng, n, max_angle=np.pi - 0.1, trans=1.0):
    """Tangent vectors with rotation angle uniform below ``max_angle``."""
    axis = rng.standard_normal((n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    ang = rng.uniform(0, max_angle, n)
    return np.concatenate([rng.uniform(-trans, trans, (n, 3)), axis * ang[:, None]], axis=1)


@pytest.fixture(scope="session")
def scene_setup():
    """A cluttered scene, its two-view kernel estimate and the network input."""
    from nbvgrasp.splatrep import Observation, fit_from_views, scene_input_from_estimate
    from nbvgrasp.world import gen_scene, render_depth_image, view_on_sphere

    world = gen_scene(0)
    views = [view_on_sphere(world.target.center, 0.4, a, np.pi / 4) for a in (0.0, np.pi)]
    est = fit_from_views([Observation(v, render_depth_image(world, v)) for v in views], steps=0)
    return world, est, scene_input_from_estimate(est)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import REPORT
    except ImportError:
        return
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for n in sorted(REPORT):
            terminalreporter.write_line(REPORT[n])
