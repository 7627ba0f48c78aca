import numpy as np
import pytest
import torch
from hypothesis import settings

from ehmavatar.geometry import DTYPE, Camera
from ehmavatar.model import make_toy_model

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture(scope="session")
def toy():
    return make_toy_model(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation(rng) -> torch.Tensor:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    from ehmavatar.geometry import quat_to_matrix

    return quat_to_matrix(torch.as_tensor(q, dtype=DTYPE))


def central_difference(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Gradient of a scalar function by central differences, one coordinate at a time."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = float(fn(x))
        flat[i] = old - h
        down = float(fn(x))
        flat[i] = old
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


def front_camera(size: int = 64, fx: float = 80.0) -> Camera:
    return Camera(fx, fx, (size - 1) / 2, (size - 1) / 2, size, size)
