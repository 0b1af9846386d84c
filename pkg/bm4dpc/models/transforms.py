"""
Separable group transforms and exact transform-domain noise variances

A group of M blocks is transformed by an orthonormal 3D DCT-II applied to
every block followed by an orthonormal Haar transform across the M blocks.
Coefficient arrays use the layout (..., M, P) where P = b1*b2*b3 indexes the
3D DCT basis in C order.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence, Tuple

import numpy as np
from scipy import fft, signal

from bm4dpc.models.types import NoisePsd

logger = logging.getLogger(__name__)

Triple = Tuple[int, int, int]


def is_power_of_two(value: int) -> bool:
    return value >= 1 and (value & (value - 1)) == 0


def largest_power_of_two(value: int) -> int:
    """Largest power of two <= value (value >= 1)"""
    return 1 << (int(value).bit_length() - 1)


@lru_cache(maxsize=None)
def dct_matrix(size: int) -> np.ndarray:
    """Orthonormal DCT-II matrix D, D @ x == dct(x, norm='ortho')"""
    matrix = fft.dct(np.eye(size), norm="ortho", axis=0)
    matrix.flags.writeable = False
    return matrix


@lru_cache(maxsize=None)
def block_transform_matrix(block: Triple) -> np.ndarray:
    """Separable 3D DCT-II acting on C-order flattened blocks (P x P)"""
    d1, d2, d3 = (dct_matrix(int(b)) for b in block)
    matrix = np.kron(d1, np.kron(d2, d3))
    matrix.flags.writeable = False
    return matrix


@lru_cache(maxsize=None)
def haar_matrix(size: int) -> np.ndarray:
    """
    Orthonormal Haar matrix of a power-of-two size; row 0 is the group mean
    """
    if not is_power_of_two(size):
        raise ValueError(f"Haar transform size must be a power of two, got {size}")
    matrix = np.ones((1, 1))
    while matrix.shape[0] < size:
        n = matrix.shape[0]
        coarse = np.kron(matrix, [1.0, 1.0])
        detail = np.kron(np.eye(n), [1.0, -1.0])
        matrix = np.vstack([coarse, detail]) / np.sqrt(2.0)
    matrix.flags.writeable = False
    return matrix


@dataclass(frozen=True)
class BlockGroup:
    """
    Mutually similar blocks stacked for collaborative filtering

    Args:
        reference: corner of the reference block
        positions: (M, 3) block corners, the reference first
        blocks: (M, b1, b2, b3) block samples
    """
    reference: Triple
    positions: np.ndarray
    blocks: np.ndarray

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=int).reshape(-1, 3)
        blocks = np.asarray(self.blocks)
        if blocks.ndim != 4 or blocks.shape[0] != positions.shape[0]:
            raise ValueError(f"Expected {positions.shape[0]} blocks, got array of shape {blocks.shape}")
        if tuple(positions[0]) != tuple(self.reference):
            raise ValueError("The reference block must be member 0 of its group")
        if len({tuple(p) for p in positions}) != positions.shape[0]:
            raise ValueError("Group positions must be unique")
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "blocks", blocks)

    @property
    def size(self) -> int:
        return int(self.positions.shape[0])

    @property
    def block_shape(self) -> Triple:
        return tuple(int(b) for b in self.blocks.shape[1:])


def forward_group(blocks: np.ndarray) -> np.ndarray:
    """
    Args:
        blocks: (..., M, b1, b2, b3)

    Returns:
        Coefficients (..., M, P)
    """
    block = tuple(blocks.shape[-3:])
    size = blocks.shape[-4]
    flat = blocks.reshape(blocks.shape[:-3] + (-1,))
    return haar_matrix(size) @ flat @ block_transform_matrix(block).T


def inverse_group(coeffs: np.ndarray, block: Triple) -> np.ndarray:
    """
    Args:
        coeffs: (..., M, P)
        block: block shape

    Returns:
        Blocks (..., M, b1, b2, b3)
    """
    size = coeffs.shape[-2]
    flat = haar_matrix(size).T @ coeffs @ block_transform_matrix(tuple(block))
    return flat.reshape(coeffs.shape[:-1] + tuple(block))


def group_transform(group: BlockGroup) -> np.ndarray:
    """4D coefficients of a group, shape (M, b1, b2, b3)"""
    if not is_power_of_two(group.size):
        raise ValueError(f"Group size must be a power of two, got {group.size}")
    return forward_group(group.blocks).reshape(group.blocks.shape)


def inverse_group_transform(coeffs: np.ndarray) -> np.ndarray:
    """Inverse of group_transform"""
    block = tuple(coeffs.shape[1:])
    return inverse_group(coeffs.reshape(coeffs.shape[0], -1), block)


class CoeffVarianceModel:
    """
    Exact noise variances of group coefficients under a stationary PSD

    For basis p, the covariance between the coefficients of two blocks whose
    corners differ by d is C_p(d) = (A_p * r)(d), with r the noise
    autocorrelation (inverse DFT of psi) and A_p the autocorrelation of the
    p-th block basis function. A Haar row h_k then gives
    var(c_kp) = sum_j sum_l h_k[j] h_k[l] C_p(x_j - x_l), which equals the
    frequency-domain expression sum_f psi(f) |sum_j h_k[j] e^{-i2pi f.x_j} T_p(f)|^2 / |X|.
    C_p is tabulated once on the window of reachable corner differences.
    """
    def __init__(self, psd: NoisePsd, block: Triple, max_offset: Triple):
        """
        Args:
            psd: noise PSD on the full grid
            block: block shape
            max_offset: largest |corner difference| per axis that will be queried
        """
        self.block = tuple(int(b) for b in block)
        self.max_offset = tuple(int(m) for m in max_offset)
        autocorr = np.real(fft.ifftn(psd.psi))
        self.zero_lag_power = float(autocorr.flat[0])

        lags = [m + b - 1 for m, b in zip(self.max_offset, self.block)]
        index = [np.arange(-lag, lag + 1) % dim for lag, dim in zip(lags, psd.dims)]
        local = autocorr[np.ix_(*index)]

        transform = block_transform_matrix(self.block)
        n_basis = transform.shape[0]
        table_shape = tuple(2 * m + 1 for m in self.max_offset)
        self.table = np.empty((n_basis,) + table_shape)
        for p in range(n_basis):
            basis = transform[p].reshape(self.block)
            basis_autocorr = signal.correlate(basis, basis, mode="full", method="direct")
            self.table[p] = signal.fftconvolve(local, basis_autocorr, mode="valid")
        self.floor = max(self.zero_lag_power, np.finfo(float).tiny) * 1e-12

    def variances(self, positions: np.ndarray) -> np.ndarray:
        """
        Args:
            positions: (M, 3) block corners of one group, M a power of two

        Returns:
            (M, P) coefficient variances
        """
        positions = np.asarray(positions, dtype=int).reshape(-1, 3)
        size = positions.shape[0]
        diff = positions[:, np.newaxis, :] - positions[np.newaxis, :, :]
        limit = np.asarray(self.max_offset)
        if np.any(np.abs(diff) > limit):
            raise ValueError(f"Corner differences exceed the tabulated window {self.max_offset}")
        diff = diff + limit
        covariance = self.table[:, diff[..., 0], diff[..., 1], diff[..., 2]]
        haar = haar_matrix(size)
        projected = covariance @ haar.T
        variances = np.einsum("kj,pjk->kp", haar, projected)
        return np.maximum(variances, self.floor)


def coeff_variances(psd: NoisePsd,
                    positions: Sequence[Sequence[int]],
                    block: Triple = (4, 4, 4)) -> np.ndarray:
    """
    Exact transform-domain noise variances of one group geometry

    Args:
        psd: noise PSD (unit variance for normalized data)
        positions: (M, 3) block corners, M a power of two
        block: block shape

    Returns:
        Variances of shape (M, b1, b2, b3)
    """
    positions = np.asarray(positions, dtype=int).reshape(-1, 3)
    if not is_power_of_two(positions.shape[0]):
        raise ValueError(f"Group size must be a power of two, got {positions.shape[0]}")
    spread = positions.max(axis=0) - positions.min(axis=0)
    model = CoeffVarianceModel(psd, block, tuple(int(s) for s in spread))
    return model.variances(positions).reshape((positions.shape[0],) + tuple(block))
