"""
Shared fixtures for the BM4D-PC test suite
"""
import numpy as np
import pytest

from bm4dpc.data.simulation import PhantomSpec, make_colored_kernel, make_phantom
from bm4dpc.models.types import DwiDataset, NoisePsd

SMALL_SHELLS = ((0.0, 2), (1000.0, 8), (2000.0, 8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def colored_kernel():
    return make_colored_kernel()


@pytest.fixture(scope="session")
def small_phantom():
    """16 x 16 x 8 phantom with 18 volumes"""
    return make_phantom(PhantomSpec(dims=(16, 16, 8), shells=SMALL_SHELLS, seed=3))


@pytest.fixture(scope="session")
def small_magnitude(small_phantom):
    """Real noise-free version of the small phantom"""
    dataset = small_phantom.dataset
    return DwiDataset(np.abs(dataset.data), dataset.bvals, dataset.bvecs)


def colored_noise(psd: NoisePsd, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """Real stationary noise with the given PSD, shape (n_draws,) + dims"""
    white = rng.standard_normal((n_draws,) + psd.dims)
    spectrum = np.fft.fftn(white, axes=(1, 2, 3)) * np.sqrt(psd.psi)
    return np.real(np.fft.ifftn(spectrum, axes=(1, 2, 3)))


def radial_profile(plane: np.ndarray) -> np.ndarray:
    """Mean of a 2D spectrum over rings of integer radius around zero frequency"""
    shifted = np.fft.fftshift(plane)
    m, n = shifted.shape
    x, y = np.meshgrid(np.arange(m) - m // 2, np.arange(n) - n // 2, indexing="ij")
    radius = np.rint(np.hypot(x, y)).astype(int)
    limit = min(m, n) // 2
    return np.array([shifted[radius == r].mean() for r in range(limit)])
