"""
MPPCA baseline: local PCA denoising with the rank chosen from the
Marchenko-Pastur distribution of the patch eigenvalues
"""
import logging
from functools import partial
from typing import Optional

import numpy as np

from bm4dpc.models.bm4d import reference_corners
from bm4dpc.models.config import PhaseFilterParams
from bm4dpc.models.phase import stabilize_phase
from bm4dpc.models.types import DwiDataset
from bm4dpc.utils.parallel import ordered_map

logger = logging.getLogger(__name__)


def mp_signal_rank(eigenvalues: np.ndarray, n_samples: int) -> int:
    """
    Number of signal components of a patch

    Smallest p with lambda_{p+1} - lambda_N < 4 sqrt((N - p) / M) sigma2_p,
    sigma2_p being the mean of the N - p smallest eigenvalues.

    Args:
        eigenvalues: covariance eigenvalues, descending
        n_samples: M, voxels in the patch

    Returns:
        p in [0, N]
    """
    eigenvalues = np.asarray(eigenvalues, dtype=float)
    n_volumes = eigenvalues.size
    tail_means = np.cumsum(eigenvalues[::-1])[::-1] / np.arange(n_volumes, 0, -1)
    for p in range(n_volumes):
        edge = 4.0 * np.sqrt((n_volumes - p) / n_samples) * tail_means[p]
        if eigenvalues[p] - eigenvalues[-1] < edge:
            return p
    return n_volumes


def denoise_patch(patch: np.ndarray) -> np.ndarray:
    """Low-rank reconstruction of one (M, N) patch matrix"""
    n_samples = patch.shape[0]
    means = patch.mean(axis=0)
    centered = patch - means
    eigenvalues, vectors = np.linalg.eigh(centered.T @ centered / n_samples)
    eigenvalues, vectors = eigenvalues[::-1], vectors[:, ::-1]
    rank = mp_signal_rank(np.clip(eigenvalues, 0.0, None), n_samples)
    signal = vectors[:, :rank]
    return centered @ signal @ signal.T + means


def _denoise_slab(x: int, data: np.ndarray, kernel: int, y_corners, z_corners):
    n_volumes = data.shape[3]
    slab = data[x:x + kernel]
    total = np.zeros(slab.shape)
    counts = np.zeros(slab.shape[:3])
    for y in y_corners:
        for z in z_corners:
            window = (slice(None), slice(y, y + kernel), slice(z, z + kernel))
            patch = slab[window].reshape(-1, n_volumes)
            total[window] += denoise_patch(patch).reshape(slab[window].shape)
            counts[window] += 1.0
    return x, total, counts


def mppca_denoise(dataset: DwiDataset,
                  kernel: int = 5,
                  step: int = 3,
                  n_jobs: int = 1,
                  phase_params: Optional[PhaseFilterParams] = None) -> DwiDataset:
    """
    Sliding-patch MPPCA

    Args:
        dataset: DWI series; complex input is phase-stabilized first
        kernel: edge of the cubic patch
        step: stride between patch corners; the last corner of every axis is always included
        n_jobs: worker processes
        phase_params: low-pass used when the input is complex

    Returns:
        Real denoised series; overlapping patch estimates are averaged uniformly
    """
    if kernel < 1 or step < 1:
        raise ValueError(f"kernel and step must be positive, got {kernel}, {step}")
    if kernel ** 3 < dataset.n_volumes:
        raise ValueError(f"MPPCA needs kernel^3 >= N, got {kernel ** 3} < {dataset.n_volumes}")
    if dataset.is_complex:
        dataset = stabilize_phase(dataset, phase_params, n_jobs=n_jobs)

    data = np.asarray(dataset.data, dtype=np.float64)
    corners = [reference_corners(d, kernel, step) for d in dataset.dims]
    logger.info(f"MPPCA with {kernel}^3 patches, step {step}: "
                f"{corners[0].size * corners[1].size * corners[2].size} patches")

    total = np.zeros(data.shape)
    counts = np.zeros(dataset.dims)
    worker = partial(_denoise_slab, data=data, kernel=kernel, y_corners=corners[1], z_corners=corners[2])
    for x, slab_total, slab_counts in ordered_map(worker, corners[0], n_jobs=n_jobs, desc="mppca"):
        total[x:x + kernel] += slab_total
        counts[x:x + kernel] += slab_counts
    return dataset.with_data(total / counts[..., np.newaxis])
