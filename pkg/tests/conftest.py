import numpy as np
import pytest

from bevmotion.grid import GridSpec


@pytest.fixture
def default_spec() -> GridSpec:
    return GridSpec()


@pytest.fixture
def small_spec() -> GridSpec:
    """64x64 desk-scale grid used by most behavioral tests."""
    return GridSpec(
        x_range=(-16.0, 16.0),
        y_range=(-16.0, 16.0),
        z_range=(-1.4, 1.0),
        xy_resolution=0.5,
        z_resolution=0.4,
    )


def random_grid_spec(rng: np.random.Generator) -> GridSpec:
    """A random but valid GridSpec for oracle sweeps."""
    def rand_range(lo, hi):
        a = rng.uniform(lo, hi)
        b = a + rng.uniform(1.0, hi - lo)
        return (float(a), float(b))

    return GridSpec(
        x_range=rand_range(-40.0, 20.0),
        y_range=rand_range(-40.0, 20.0),
        z_range=rand_range(-5.0, 2.0),
        xy_resolution=float(rng.uniform(0.2, 1.5)),
        z_resolution=float(rng.uniform(0.2, 1.0)),
    )
