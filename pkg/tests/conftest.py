import numpy as np
import pytest

from aerialview.backends import ToyBackend
from aerialview.domain import ImageBuffer


def make_fixture_image(size: int = 64) -> ImageBuffer:
    """Smooth gradients plus a bright disc; structured enough that latents
    and metrics are non-trivial."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    r = np.hypot(xx - 0.35, yy - 0.4)
    disc = (r < 0.2).astype(float)
    img = np.stack([0.8 * xx + 0.2 * disc,
                    0.6 * yy + 0.3 * disc,
                    0.4 * (1 - xx) + 0.5 * disc], axis=2)
    return ImageBuffer(np.clip(img * 255, 0, 255).astype(np.uint8))


@pytest.fixture
def fixture_image():
    return make_fixture_image()


@pytest.fixture
def toy_backend():
    return ToyBackend(seed=0)
