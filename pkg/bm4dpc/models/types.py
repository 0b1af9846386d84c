"""
Shared domain types for BM4D-PC and the 4D <-> matrix reshaping

Every array in this module follows one voxel ordering: the first spatial axis
varies fastest when a volume is flattened (NIfTI / Fortran order).
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

Dims = Tuple[int, int, int]


class NumericalError(ArithmeticError):
    """Raised when an intermediate result is not finite or a system is singular"""


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.flags.writeable = False
    return array


def _check_finite(array: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{name} contains non-finite samples")


@dataclass(frozen=True)
class Volume3:
    """
    A single volumetric image of shape (m, n, o), real or complex
    """
    samples: np.ndarray

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 3:
            raise ValueError(f"Volume3 needs 3 dimensions, got shape {samples.shape}")
        if min(samples.shape) < 1:
            raise ValueError(f"Volume3 dimensions must be positive, got {samples.shape}")
        _check_finite(samples, "Volume3")
        object.__setattr__(self, "samples", _frozen(samples))

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self.samples.shape)

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.samples)


@dataclass(frozen=True)
class DwiDataset:
    """
    A series of N diffusion-weighted volumes stored as one (m, n, o, N) array

    Args:
        data: 4D array, last axis indexes the volumes
        bvals: N nonnegative b-values in s/mm^2
        bvecs: optional (N, 3) gradient directions; unit norm except for b=0 rows
    """
    data: np.ndarray
    bvals: np.ndarray
    bvecs: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4:
            raise ValueError(f"DwiDataset needs a 4D array, got shape {data.shape}")
        n_volumes = data.shape[3]
        if n_volumes < 2:
            raise ValueError(f"DwiDataset needs at least 2 volumes, got {n_volumes}")
        _check_finite(data, "DwiDataset")

        bvals = np.asarray(self.bvals, dtype=float).reshape(-1)
        if bvals.size != n_volumes:
            raise ValueError(f"Got {bvals.size} b-values for {n_volumes} volumes")
        if np.any(bvals < 0) or not np.all(np.isfinite(bvals)):
            raise ValueError("b-values must be finite and nonnegative")

        bvecs = self.bvecs
        if bvecs is not None:
            bvecs = np.asarray(bvecs, dtype=float)
            if bvecs.shape != (n_volumes, 3):
                raise ValueError(f"bvecs must have shape ({n_volumes}, 3), got {bvecs.shape}")
            norms = np.linalg.norm(bvecs, axis=1)
            weighted = bvals > 0
            if np.any(np.abs(norms[weighted] - 1.0) > 1e-6):
                raise ValueError("Every diffusion-weighted bvec must have unit norm")
            bvecs = _frozen(bvecs)

        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "bvals", _frozen(bvals))
        object.__setattr__(self, "bvecs", bvecs)

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self.data.shape[:3])

    @property
    def n_volumes(self) -> int:
        return int(self.data.shape[3])

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    def volume(self, index: int) -> Volume3:
        return Volume3(self.data[..., index])

    @property
    def volumes(self) -> List[Volume3]:
        return [self.volume(i) for i in range(self.n_volumes)]

    def with_data(self, data: np.ndarray) -> "DwiDataset":
        """Same acquisition (b-values, directions), new samples"""
        return DwiDataset(data, self.bvals, self.bvecs)

    def subset(self, indices: Sequence[int]) -> "DwiDataset":
        indices = list(indices)
        bvecs = None if self.bvecs is None else self.bvecs[indices]
        return DwiDataset(self.data[..., indices], self.bvals[indices], bvecs)


@dataclass(frozen=True)
class NoiseMap:
    """Voxel-wise noise standard deviation, shared by all volumes"""
    sigma: np.ndarray

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.ndim != 3:
            raise ValueError(f"NoiseMap needs 3 dimensions, got shape {sigma.shape}")
        _check_finite(sigma, "NoiseMap")
        if np.any(sigma < 0):
            raise ValueError("NoiseMap values must be nonnegative")
        object.__setattr__(self, "sigma", _frozen(sigma))

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self.sigma.shape)


@dataclass(frozen=True)
class NoisePsd:
    """
    Power spectral density psi(f) of the stationary noise on the full grid

    With unit_variance set the grid mean of psi is 1, so white unit-variance
    noise has psi == 1 everywhere.
    """
    psi: np.ndarray
    unit_variance: bool = True

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=float)
        if psi.ndim != 3:
            raise ValueError(f"NoisePsd needs 3 dimensions, got shape {psi.shape}")
        _check_finite(psi, "NoisePsd")
        if np.any(psi < 0):
            raise ValueError("NoisePsd values must be nonnegative")
        if self.unit_variance and abs(psi.mean() - 1.0) > 1e-6:
            raise ValueError(f"Unit-variance PSD must have grid mean 1, got {psi.mean():.8f}")
        object.__setattr__(self, "psi", _frozen(psi))

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self.psi.shape)

    @property
    def mean_power(self) -> float:
        return float(self.psi.mean())

    @classmethod
    def flat(cls, dims: Dims) -> "NoisePsd":
        return cls(np.ones(dims))

    def normalized(self) -> "NoisePsd":
        power = self.mean_power
        if power <= 0:
            raise NumericalError("Cannot normalize a PSD with zero total power")
        return NoisePsd(self.psi / power, unit_variance=True)


@dataclass(frozen=True)
class SpatialKernel:
    """
    Convolution kernel g that colors white noise (eta = v * g)

    Args:
        g: dense 3D kernel, depth 1 for in-plane-only correlation
        center: index of the kernel origin, defaults to the middle sample
    """
    g: np.ndarray
    center: Optional[Tuple[int, int, int]] = field(default=None)

    def __post_init__(self):
        g = np.asarray(self.g, dtype=float)
        if g.ndim == 2:
            g = g[:, :, np.newaxis]
        if g.ndim != 3:
            raise ValueError(f"SpatialKernel needs 2 or 3 dimensions, got shape {g.shape}")
        _check_finite(g, "SpatialKernel")
        center = self.center
        if center is None:
            center = tuple(s // 2 for s in g.shape)
        object.__setattr__(self, "g", _frozen(g))
        object.__setattr__(self, "center", tuple(int(c) for c in center))

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.g))

    @property
    def is_unit_norm(self) -> bool:
        return abs(self.norm - 1.0) <= 1e-9


def vectorize(dataset: DwiDataset) -> np.ndarray:
    """
    Stack the volumes as columns of a W x N matrix, W = m*n*o

    Args:
        dataset: the DWI series

    Returns:
        Matrix whose column i is volume i flattened first-axis-fastest
    """
    n_voxels = int(np.prod(dataset.dims))
    if n_voxels < dataset.n_volumes:
        raise ValueError(
            f"Global PCA needs at least as many voxels as volumes ({n_voxels} < {dataset.n_volumes})"
        )
    return dataset.data.reshape((n_voxels, dataset.n_volumes), order="F")


def devectorize(matrix: np.ndarray, dims: Dims) -> np.ndarray:
    """
    Exact inverse of vectorize: reshape a W x N matrix into (m, n, o, N)
    """
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError(f"Expected a 2D matrix, got shape {matrix.shape}")
    if int(np.prod(dims)) != matrix.shape[0]:
        raise ValueError(f"dims {tuple(dims)} do not match {matrix.shape[0]} rows")
    return matrix.reshape(tuple(dims) + (matrix.shape[1],), order="F")
