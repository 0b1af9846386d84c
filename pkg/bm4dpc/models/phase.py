"""
Slice-by-slice phase stabilization of complex DWIs

The slowly varying phase of every slice is estimated from a Gaussian low-pass
of the complex image and rotated away; the real channel then carries the
signal plus zero-mean Gaussian noise and the imaginary channel is dropped.
"""
import logging
from functools import partial
from typing import Optional

import numpy as np
from scipy import ndimage

from bm4dpc.models.config import PhaseFilterParams
from bm4dpc.models.types import DwiDataset
from bm4dpc.utils.parallel import ordered_map

logger = logging.getLogger(__name__)


def estimate_slice_phase(volume: np.ndarray, lowpass_sigma: float) -> np.ndarray:
    """
    Phase of the 2D Gaussian low-pass of every slice of a complex volume

    Args:
        volume: complex array (m, n, o)
        lowpass_sigma: in-plane standard deviation, in voxels

    Returns:
        Real array (m, n, o) of angles in (-pi, pi]
    """
    sigma = (lowpass_sigma, lowpass_sigma, 0.0)
    smooth_real = ndimage.gaussian_filter(volume.real, sigma=sigma, mode="nearest")
    smooth_imag = ndimage.gaussian_filter(volume.imag, sigma=sigma, mode="nearest")
    return np.arctan2(smooth_imag, smooth_real)


def stabilize_volume(volume: np.ndarray, lowpass_sigma: float) -> np.ndarray:
    """Rotate each slice of one complex volume toward the real axis, keep the real part"""
    phase = estimate_slice_phase(volume, lowpass_sigma)
    return np.real(volume * np.exp(-1j * phase))


class PhaseStabilizer:
    """
    Converts a complex DWI series into a real one with Gaussian noise
    """
    def __init__(self, params: Optional[PhaseFilterParams] = None, n_jobs: int = 1):
        """
        Args:
            params: low-pass settings
            n_jobs: number of worker processes (one volume per work item)
        """
        self.params = params or PhaseFilterParams()
        self.n_jobs = n_jobs

    def stabilize(self, dataset: DwiDataset) -> DwiDataset:
        """
        Args:
            dataset: complex-valued DWI series

        Returns:
            Real-valued DWI series with the same dims and gradient table
        """
        if not dataset.is_complex:
            raise ValueError("Phase stabilization needs complex samples; skip it for real input")

        logger.info(f"Stabilizing phase of {dataset.n_volumes} volumes "
                    f"(low-pass sigma {self.params.lowpass_sigma} voxels)")
        worker = partial(stabilize_volume, lowpass_sigma=self.params.lowpass_sigma)
        volumes = [dataset.data[..., i] for i in range(dataset.n_volumes)]
        output = np.empty(dataset.data.shape, dtype=np.float64)
        for i, real_volume in enumerate(ordered_map(worker, volumes, n_jobs=self.n_jobs, desc="phase")):
            output[..., i] = real_volume
        return dataset.with_data(output)


def stabilize_phase(dataset: DwiDataset,
                    params: Optional[PhaseFilterParams] = None,
                    n_jobs: int = 1) -> DwiDataset:
    """Functional form of PhaseStabilizer.stabilize"""
    return PhaseStabilizer(params, n_jobs=n_jobs).stabilize(dataset)
