import numpy as np
import pytest

from splatstego.camera import Camera
from splatstego.scene import GaussianCloud, logit


def identity_camera(size=16, f=20.0, near=0.1, far=100.0):
    return Camera(size, size, f, f, size // 2, size // 2, np.eye(4), near=near, far=far)


def random_cloud(seed, n=50, M=16, size=64, f=60.0, depth=(2.0, 6.0), scale=(-3.0, -1.5)):
    """Random feature-mode cloud placed in front of ``identity_camera(size, f)``."""
    rng = np.random.default_rng(seed)
    z = rng.uniform(*depth, n)
    half = (size / 2) / f
    xy = rng.uniform(-1.1 * half, 1.1 * half, (n, 2)) * z[:, None]
    return GaussianCloud(
        means=np.column_stack([xy, z]),
        quats=rng.normal(size=(n, 4)),
        log_scales=rng.uniform(*scale, (n, 3)),
        opacity_logits=logit(rng.uniform(0.05, 0.95, n)),
        features=rng.uniform(-1, 1, (n, M)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
