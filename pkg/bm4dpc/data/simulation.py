"""
In-silico DWI data: a nested-ellipsoid tensor phantom with smooth and global
phase, plus spatially varying white or colored complex Gaussian noise whose
noise map and PSD are known exactly
"""
import logging
from dataclasses import dataclass, field
from functools import partial
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import fft
from scipy.spatial.transform import Rotation

from bm4dpc.models.types import Dims, DwiDataset, NoiseMap, NoisePsd, SpatialKernel
from bm4dpc.utils.parallel import ordered_map

logger = logging.getLogger(__name__)

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))
NOISE_KINDS = ("white", "colored")
STANDARD_LEVELS = (0.01, 0.05, 0.10)


def tensor_from_eigs(eigenvalues: Sequence[float], direction: Sequence[float] = (1.0, 0.0, 0.0)) -> np.ndarray:
    """
    Diffusion tensor (mm^2/s) with the given eigenvalues, the first one
    along direction
    """
    axis = np.asarray(direction, dtype=float)
    axis = axis / np.linalg.norm(axis)
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    second = np.cross(axis, helper)
    second /= np.linalg.norm(second)
    third = np.cross(axis, second)
    frame = np.stack([axis, second, third], axis=1)
    return frame @ np.diag(np.asarray(eigenvalues, dtype=float)) @ frame.T


@dataclass(frozen=True)
class Ellipsoid:
    """
    One tissue compartment

    Args:
        center: center as fractions of the dims
        radii: semi-axes as fractions of the dims
        tensor: 3 x 3 diffusion tensor in mm^2/s
        s0: non-weighted signal
    """
    center: Tuple[float, float, float]
    radii: Tuple[float, float, float]
    tensor: np.ndarray
    s0: float

    def mask(self, dims: Dims) -> np.ndarray:
        grids = np.meshgrid(*[(np.arange(d) + 0.5) / d for d in dims], indexing="ij")
        distance = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, self.center, self.radii))
        return distance <= 1.0


def default_layout() -> Tuple[Ellipsoid, ...]:
    # drawn in order, later compartments overwrite earlier ones
    return (
        Ellipsoid((0.5, 0.5, 0.5), (0.45, 0.42, 0.45), tensor_from_eigs((0.8e-3, 0.8e-3, 0.8e-3)), 0.8),
        Ellipsoid((0.5, 0.4, 0.5), (0.32, 0.14, 0.36), tensor_from_eigs((1.7e-3, 0.3e-3, 0.3e-3), (1, 0, 0)), 1.0),
        Ellipsoid((0.4, 0.68, 0.5), (0.12, 0.2, 0.34), tensor_from_eigs((1.5e-3, 0.4e-3, 0.3e-3), (1, 1, 0)), 0.9),
        Ellipsoid((0.7, 0.7, 0.5), (0.09, 0.09, 0.2), tensor_from_eigs((3.0e-3, 3.0e-3, 3.0e-3)), 1.2),
    )


@dataclass(frozen=True)
class PhantomSpec:
    """
    Args:
        dims: phantom size
        shells: (b-value, number of volumes) pairs, in acquisition order
        ellipsoids: tissue compartments
        seed: seeds gradient directions and phase patterns
    """
    dims: Dims = (32, 32, 16)
    shells: Tuple[Tuple[float, int], ...] = ((0.0, 3), (1000.0, 15), (2000.0, 15))
    ellipsoids: Tuple[Ellipsoid, ...] = field(default_factory=default_layout)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "shells", tuple((float(b), int(c)) for b, c in self.shells))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"Phantom dims must be three positive ints, got {self.dims}")
        if any(b < 0 or c < 1 for b, c in self.shells):
            raise ValueError(f"Shells need b >= 0 and at least one volume, got {self.shells}")
        if not any(b == 0 for b, _ in self.shells):
            raise ValueError("The phantom needs at least one b=0 volume")
        if any(e.s0 <= 0 for e in self.ellipsoids):
            raise ValueError("Every compartment needs S0 > 0")

    @property
    def n_volumes(self) -> int:
        return sum(c for _, c in self.shells)


@dataclass(frozen=True)
class NoiseSpec:
    """
    Args:
        level: base noise std as a fraction of the maximum b=0 magnitude
        kind: "white" or "colored"
        kernel: coloring kernel, the default band-pass kernel when omitted
        gfactor_amplitude: height of the Gaussian bump of the g-factor map
        seed: seeds the noise draws
    """
    level: float = 0.05
    kind: str = "white"
    kernel: Optional[SpatialKernel] = None
    gfactor_amplitude: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.level < 0:
            raise ValueError(f"Noise level must be nonnegative, got {self.level}")
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"Unknown noise kind '{self.kind}', expected one of {NOISE_KINDS}")
        if self.gfactor_amplitude <= -1:
            raise ValueError("gfactor_amplitude must keep the g-factor map positive")
        if self.kind == "colored":
            kernel = self.kernel or make_colored_kernel()
            if not kernel.is_unit_norm:
                raise ValueError(f"Coloring kernel must have unit l2 norm, got {kernel.norm:.6f}")
            object.__setattr__(self, "kernel", kernel)


class Phantom(NamedTuple):
    dataset: DwiDataset
    tensors: np.ndarray
    mask: np.ndarray
    s0: np.ndarray


class NoisyData(NamedTuple):
    dataset: DwiDataset
    noise_map: NoiseMap
    psd: NoisePsd


def hemisphere_directions(count: int, rotation: Optional[Rotation] = None) -> np.ndarray:
    """Fibonacci points on the upper unit hemisphere, (count, 3)"""
    index = np.arange(count) + 0.5
    z = 1.0 - index / count
    radius = np.sqrt(1.0 - z ** 2)
    phi = GOLDEN_ANGLE * index
    points = np.stack([radius * np.cos(phi), radius * np.sin(phi), z], axis=1)
    if rotation is not None:
        points = rotation.apply(points)
    return points / np.linalg.norm(points, axis=1, keepdims=True)


def gradient_table(spec: PhantomSpec) -> Tuple[np.ndarray, np.ndarray]:
    bvals, bvecs = [], []
    for shell_index, (bval, count) in enumerate(spec.shells):
        bvals.extend([bval] * count)
        if bval == 0:
            bvecs.append(np.zeros((count, 3)))
        else:
            rng = np.random.default_rng([spec.seed, 0, shell_index])
            bvecs.append(hemisphere_directions(count, Rotation.random(None, rng)))
    return np.asarray(bvals), np.concatenate(bvecs, axis=0)


def smooth_phase(dims: Dims, rng: np.random.Generator, n_waves: int = 3) -> np.ndarray:
    """Sum of low-frequency in-plane sinusoids, the same on every slice"""
    m, n, o = dims
    x, y = np.meshgrid(np.arange(m) / m, np.arange(n) / n, indexing="ij")
    phase = np.zeros((m, n))
    for _ in range(n_waves):
        fx, fy = rng.uniform(-0.4, 0.4, size=2)
        amplitude = rng.uniform(0.1, 0.25) * np.pi
        offset = rng.uniform(0.0, 2.0 * np.pi)
        phase += amplitude * np.sin(2.0 * np.pi * (fx * x + fy * y) + offset)
    return np.repeat(phase[:, :, np.newaxis], o, axis=2)


def _check_spd(tensor: np.ndarray) -> None:
    tensor = np.asarray(tensor, dtype=float)
    if tensor.shape != (3, 3) or not np.allclose(tensor, tensor.T):
        raise ValueError("Diffusion tensors must be symmetric 3 x 3 matrices")
    if np.linalg.eigvalsh(tensor).min() <= 0:
        raise ValueError("Diffusion tensors must be positive definite")


def make_phantom(spec: Optional[PhantomSpec] = None) -> Phantom:
    """
    Noise-free complex DWI series of the nested-ellipsoid phantom

    Args:
        spec: phantom description, defaults to 32 x 32 x 16 with 33 volumes

    Returns:
        Phantom(dataset, tensors (m, n, o, 3, 3), support mask, S0 map)
    """
    spec = spec or PhantomSpec()
    for ellipsoid in spec.ellipsoids:
        _check_spd(ellipsoid.tensor)

    dims = spec.dims
    tensors = np.zeros(dims + (3, 3))
    s0 = np.zeros(dims)
    for ellipsoid in spec.ellipsoids:
        inside = ellipsoid.mask(dims)
        tensors[inside] = ellipsoid.tensor
        s0[inside] = ellipsoid.s0
    mask = s0 > 0

    bvals, bvecs = gradient_table(spec)
    exponent = np.einsum("...ij,vi,vj->...v", tensors, bvecs, bvecs)
    magnitude = s0[..., np.newaxis] * np.exp(-bvals * exponent)

    data = np.empty(magnitude.shape, dtype=np.complex128)
    for vol in range(spec.n_volumes):
        rng = np.random.default_rng([spec.seed, 1, vol])
        phase = smooth_phase(dims, rng) + rng.uniform(0.0, 2.0 * np.pi)
        data[..., vol] = magnitude[..., vol] * np.exp(1j * phase)

    logger.info(f"Phantom {dims} with {spec.n_volumes} volumes, {int(mask.sum())} support voxels")
    return Phantom(DwiDataset(data, bvals, bvecs), tensors, mask, s0)


def make_colored_kernel(sigma_inner: float = 0.8, sigma_outer: float = 2.0) -> SpatialKernel:
    """
    In-plane difference-of-Gaussians band-pass kernel of unit l2 norm

    Args:
        sigma_inner: std of the positive lobe, in voxels
        sigma_outer: std of the subtracted lobe, larger than sigma_inner

    Returns:
        Depth-1 SpatialKernel truncated at 4 * sigma_outer
    """
    if not 0 < sigma_inner < sigma_outer:
        raise ValueError(f"Need 0 < sigma_inner < sigma_outer, got {sigma_inner}, {sigma_outer}")
    radius = int(np.ceil(4.0 * sigma_outer))
    x, y = np.meshgrid(np.arange(-radius, radius + 1), np.arange(-radius, radius + 1), indexing="ij")
    r2 = x ** 2 + y ** 2

    def gaussian(sigma):
        return np.exp(-r2 / (2.0 * sigma ** 2)) / (2.0 * np.pi * sigma ** 2)

    dog = gaussian(sigma_inner) - gaussian(sigma_outer)
    return SpatialKernel(dog / np.linalg.norm(dog))


def _padded_kernel(kernel: SpatialKernel, dims: Dims) -> np.ndarray:
    if any(k > d for k, d in zip(kernel.g.shape, dims)):
        raise ValueError(f"Kernel of shape {kernel.g.shape} does not fit in dims {tuple(dims)}")
    padded = np.zeros(dims)
    padded[tuple(slice(0, k) for k in kernel.g.shape)] = kernel.g
    return np.roll(padded, [-c for c in kernel.center], axis=(0, 1, 2))


def kernel_to_psd(kernel: SpatialKernel, dims: Dims) -> NoisePsd:
    """
    PSD psi(f) = |DFT(g)|^2 of noise colored by the kernel; its grid mean is ||g||^2
    """
    dims = tuple(int(d) for d in dims)
    psi = np.abs(fft.fftn(_padded_kernel(kernel, dims))) ** 2
    return NoisePsd(psi, unit_variance=kernel.is_unit_norm)


def gfactor_map(dims: Dims, amplitude: float = 0.5, width: float = 0.25) -> np.ndarray:
    """1 + amplitude * centered 3D Gaussian bump, width as a fraction of the dims"""
    grids = np.meshgrid(*[(np.arange(d) + 0.5) / d - 0.5 for d in dims], indexing="ij")
    distance2 = sum(g ** 2 for g in grids) / width ** 2
    return 1.0 + amplitude * np.exp(-0.5 * distance2)


def _noise_volume(vol: int, dims: Dims, seed: int, transfer: Optional[np.ndarray]) -> np.ndarray:
    rng = np.random.default_rng([seed, 2, vol])
    white = rng.standard_normal(dims) + 1j * rng.standard_normal(dims)
    if transfer is None:
        return white
    return fft.ifftn(fft.fftn(white) * transfer)


def add_noise(dataset: DwiDataset, noise_spec: NoiseSpec, n_jobs: int = 1) -> NoisyData:
    """
    Add complex Gaussian noise sigma(x) * (v * g) to every volume

    Args:
        dataset: complex noise-free series with at least one b=0 volume
        noise_spec: level, kind and seed
        n_jobs: worker processes (one volume per work item)

    Returns:
        NoisyData(noisy dataset, true noise map, true PSD)
    """
    if not dataset.is_complex:
        raise ValueError("add_noise expects a complex dataset")
    b0 = dataset.bvals == 0
    if not np.any(b0):
        raise ValueError("add_noise needs a b=0 volume to set the noise level")

    dims = dataset.dims
    if noise_spec.kind == "colored":
        psd = kernel_to_psd(noise_spec.kernel, dims)
        transfer = fft.fftn(_padded_kernel(noise_spec.kernel, dims))
    else:
        psd = NoisePsd.flat(dims)
        transfer = None

    base = noise_spec.level * float(np.abs(dataset.data[..., b0]).max())
    sigma = base * gfactor_map(dims, noise_spec.gfactor_amplitude)
    if noise_spec.level == 0:
        return NoisyData(dataset, NoiseMap(sigma), psd)

    logger.info(f"Adding {noise_spec.kind} noise at level {noise_spec.level:g} (sigma_0 = {base:.4g})")
    worker = partial(_noise_volume, dims=dims, seed=noise_spec.seed, transfer=transfer)
    noisy = np.array(dataset.data, copy=True)
    volumes = ordered_map(worker, range(dataset.n_volumes), n_jobs=n_jobs, desc="noise")
    for vol, noise in enumerate(volumes):
        noisy[..., vol] += sigma * noise
    return NoisyData(dataset.with_data(noisy), NoiseMap(sigma), psd)


class SimulatedData(NamedTuple):
    ground_truth: DwiDataset
    noisy: DwiDataset
    noise_map: NoiseMap
    psd: NoisePsd
    mask: np.ndarray
    tensors: np.ndarray


def simulate(phantom_spec: Optional[PhantomSpec] = None,
             noise_spec: Optional[NoiseSpec] = None,
             n_jobs: int = 1) -> SimulatedData:
    """Phantom plus noise in one call"""
    phantom = make_phantom(phantom_spec)
    noisy = add_noise(phantom.dataset, noise_spec or NoiseSpec(), n_jobs=n_jobs)
    return SimulatedData(phantom.dataset, noisy.dataset, noisy.noise_map, noisy.psd,
                         phantom.mask, phantom.tensors)
