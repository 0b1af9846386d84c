"""
Global PCA across the volume dimension

Q (W x N) is decomposed through the eigenvectors of the N x N Gram matrix
B = Q^H Q = V Lambda V^H, and A = Q V holds the principal components.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from bm4dpc.models.types import Dims, NumericalError, devectorize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PcStack:
    """
    Principal components of a DWI series

    Args:
        components: A = Q V, one PC per column (W x N)
        basis: V, orthonormal columns (N x N)
        eigenvalues: lambda_1 >= ... >= lambda_N >= 0
        dims: spatial dims used to reshape the columns into volumes
    """
    components: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray
    dims: Dims

    @property
    def n_components(self) -> int:
        return int(self.basis.shape[1])

    @property
    def pcs(self) -> np.ndarray:
        """The PCs as volumes, shape (m, n, o, N)"""
        return devectorize(self.components, self.dims)

    def pc_volume(self, index: int) -> np.ndarray:
        return self.pcs[..., index]


def _fix_signs(basis: np.ndarray) -> np.ndarray:
    # make the largest-magnitude entry of every column real and positive
    rows = np.argmax(np.abs(basis), axis=0)
    pivots = basis[rows, np.arange(basis.shape[1])]
    magnitude = np.abs(pivots)
    magnitude[magnitude == 0] = 1.0
    return basis * (np.conj(pivots) / magnitude)[np.newaxis, :]


def forward_pca(matrix: np.ndarray, dims: Dims = None) -> PcStack:
    """
    Decompose a W x N data matrix

    Args:
        matrix: Q, vectorized volumes as columns
        dims: spatial dims of the volumes (defaults to (W, 1, 1))

    Returns:
        PcStack with eigenvalues equal to the squared singular values of Q
    """
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError(f"Expected a W x N matrix, got shape {matrix.shape}")
    n_rows, n_cols = matrix.shape
    if n_rows < n_cols:
        raise ValueError(f"Global PCA needs W >= N, got W={n_rows}, N={n_cols}")
    if not np.all(np.isfinite(matrix)):
        raise ValueError("Global PCA input contains non-finite entries")
    if dims is None:
        dims = (n_rows, 1, 1)

    gram = matrix.conj().T @ matrix
    gram = 0.5 * (gram + gram.conj().T)
    eigenvalues, basis = linalg.eigh(gram)
    if not np.all(np.isfinite(eigenvalues)):
        raise NumericalError("Eigendecomposition of the Gram matrix produced non-finite values")

    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = np.clip(eigenvalues[order], 0.0, None)
    basis = _fix_signs(basis[:, order])
    components = matrix @ basis

    logger.debug(f"Global PCA of {n_rows} x {n_cols}: leading eigenvalue {eigenvalues[0]:.4g}, "
                 f"trailing {eigenvalues[-1]:.4g}")
    return PcStack(components=components, basis=basis, eigenvalues=eigenvalues, dims=tuple(dims))


def check_orthonormal(basis: np.ndarray, tolerance: float = 1e-8) -> float:
    """Return max |V^H V - I|, raising ValueError when it exceeds tolerance"""
    basis = np.asarray(basis)
    if basis.ndim != 2 or basis.shape[0] != basis.shape[1]:
        raise ValueError(f"PCA basis must be square, got shape {basis.shape}")
    deviation = float(np.max(np.abs(basis.conj().T @ basis - np.eye(basis.shape[1]))))
    if deviation > tolerance:
        raise ValueError(f"PCA basis is not orthonormal (max deviation {deviation:.3g})")
    return deviation


def inverse_pca(denoised_components: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """
    Reconstruct the data matrix D = S V^H

    Args:
        denoised_components: S_hat, W x N
        basis: V, N x N orthonormal

    Returns:
        W x N matrix
    """
    check_orthonormal(basis)
    denoised_components = np.asarray(denoised_components)
    if denoised_components.shape[1] != basis.shape[0]:
        raise ValueError(f"{denoised_components.shape[1]} components for a basis of size {basis.shape[0]}")
    return denoised_components @ basis.conj().T
