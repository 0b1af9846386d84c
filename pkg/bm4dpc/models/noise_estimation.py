"""
Noise map and noise PSD estimation from the tail principal components

The last principal components of the highest shell carry almost no signal.
Their local standard deviation gives the noise map, and their in-plane
periodograms, once normalized by that map, give the noise PSD.
"""
import logging
from functools import partial
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft, ndimage

from bm4dpc.data.ingestion import group_shells
from bm4dpc.models.config import SIGMA_CLAMP_FRACTION, NoiseEstParams
from bm4dpc.models.gpca import PcStack, forward_pca
from bm4dpc.models.types import DwiDataset, NoiseMap, NoisePsd, NumericalError, Volume3, vectorize
from bm4dpc.utils.parallel import ordered_map

logger = logging.getLogger(__name__)

VolumeLike = Union[Volume3, np.ndarray]


class NoiseEstimate(NamedTuple):
    noise_map: NoiseMap
    psd: NoisePsd


def _as_arrays(volumes: Sequence[VolumeLike]) -> list:
    arrays = [v.samples if isinstance(v, Volume3) else np.asarray(v) for v in volumes]
    if not arrays:
        raise ValueError("At least one tail principal component is required")
    for array in arrays:
        if array.ndim != 3 or array.shape != arrays[0].shape:
            raise ValueError(f"Tail PCs must be 3D volumes of equal dims, got {array.shape}")
        if np.iscomplexobj(array):
            raise ValueError("Noise estimation needs real-valued principal components")
    return [np.asarray(a, dtype=np.float64) for a in arrays]


def local_std(volume: np.ndarray, window: int) -> np.ndarray:
    """
    Sample standard deviation (divisor n-1) over a cubic window centered at
    every voxel; the window is cut at the volume borders
    """
    if window % 2 == 0 or window < 1:
        raise ValueError(f"Noise map window must be a positive odd integer, got {window}")
    if window > min(volume.shape):
        raise ValueError(f"Noise map window {window} is larger than the smallest dimension of {volume.shape}")

    scale = float(window ** 3)
    counts = np.rint(ndimage.uniform_filter(np.ones(volume.shape), size=window, mode="constant") * scale)
    sums = ndimage.uniform_filter(volume, size=window, mode="constant") * scale
    squares = ndimage.uniform_filter(volume ** 2, size=window, mode="constant") * scale
    deviations = squares - sums ** 2 / counts
    variance = np.clip(deviations, 0.0, None) / np.maximum(counts - 1.0, 1.0)
    return np.sqrt(variance)


def estimate_noise_map(tail_pcs: Sequence[VolumeLike], window: int = 5) -> NoiseMap:
    """
    Mean of the local standard deviation maps of the tail PCs

    Args:
        tail_pcs: one or more noise-dominated principal components
        window: odd edge of the cubic neighborhood

    Returns:
        NoiseMap with the dims of the PCs
    """
    arrays = _as_arrays(tail_pcs)
    maps = [local_std(a, window) for a in arrays]
    sigma = np.mean(maps, axis=0)
    logger.debug(f"Noise map from {len(arrays)} PCs: median {np.median(sigma):.4g}")
    return NoiseMap(sigma)


def clamp_noise_map(noise_map: NoiseMap, fraction: float = SIGMA_CLAMP_FRACTION) -> NoiseMap:
    """Floor the map at fraction * median of its positive values"""
    if not 0 < fraction < 1:
        raise ValueError(f"Clamp fraction must lie in (0, 1), got {fraction}")
    positive = noise_map.sigma[noise_map.sigma > 0]
    if positive.size == 0:
        raise NumericalError("Noise map has no positive value to normalize by")
    floor = fraction * float(np.median(positive))
    return NoiseMap(np.maximum(noise_map.sigma, floor))


def chunk_starts(n_slices: int, chunk_size: int, chunk_step: int) -> np.ndarray:
    if chunk_size > n_slices:
        raise ValueError(f"Chunks of {chunk_size} slices do not fit in {n_slices} slices")
    return np.arange(0, n_slices - chunk_size + 1, chunk_step)


def chunk_periodogram(slices: np.ndarray, window: int, step: int) -> np.ndarray:
    """
    Mean periodogram |DFT|^2 / window^2 of the mean-subtracted in-plane
    windows of a stack of slices (m, n, k)
    """
    windows = sliding_window_view(slices, (window, window), axis=(0, 1))[::step, ::step]
    # (a, b, k, w, w)
    windows = windows - windows.mean(axis=(-2, -1), keepdims=True)
    spectra = np.abs(fft.fft2(windows, axes=(-2, -1))) ** 2 / float(window * window)
    return spectra.reshape(-1, window, window).mean(axis=0)


def local_psd(volume: np.ndarray, params: NoiseEstParams) -> np.ndarray:
    """Element-wise minimum of the chunk periodograms of one volume (window x window)"""
    m, n, o = volume.shape
    window = params.psd_window
    if window > min(m, n):
        raise ValueError(f"PSD window {window} exceeds the slice dims {(m, n)}")
    estimates = [chunk_periodogram(volume[:, :, s:s + params.chunk_size], window, params.window_step)
                 for s in chunk_starts(o, params.chunk_size, params.chunk_step)]
    return np.min(estimates, axis=0)


def upsample_psd(psd2d: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """
    Resample a small 2D PSD onto an m x n frequency grid by zero-padding its
    autocorrelation; negative values are clipped
    """
    m, n = int(shape[0]), int(shape[1])
    w1, w2 = psd2d.shape
    autocorr = fft.fftshift(np.real(fft.ifft2(psd2d)))
    padded = np.zeros((m, n))
    r0, c0 = m // 2 - w1 // 2, n // 2 - w2 // 2
    padded[r0:r0 + w1, c0:c0 + w2] = autocorr
    spectrum = np.real(fft.fft2(fft.ifftshift(padded)))
    return np.clip(spectrum, 0.0, None)


def _normalize_unit(psi: np.ndarray) -> np.ndarray:
    power = float(psi.mean())
    if not np.isfinite(power) or power <= 0:
        raise NumericalError("Estimated PSD has no positive power")
    return psi / power


def volume_psd(volume: np.ndarray, params: NoiseEstParams) -> np.ndarray:
    """Full-grid unit-mean PSD of one normalized PC, constant along f_z"""
    m, n, o = volume.shape
    in_plane = upsample_psd(local_psd(volume, params), (m, n))
    return _normalize_unit(np.repeat(in_plane[:, :, np.newaxis], o, axis=2))


def estimate_psd(tail_pcs_normalized: Sequence[VolumeLike],
                 params: Optional[NoiseEstParams] = None,
                 n_jobs: int = 1) -> NoisePsd:
    """
    Estimate the noise PSD from noise-map-normalized tail PCs

    Args:
        tail_pcs_normalized: tail PCs divided voxel-wise by the clamped noise map
        params: windowing parameters
        n_jobs: worker processes (one PC per work item)

    Returns:
        Unit-variance NoisePsd on the full grid
    """
    params = params or NoiseEstParams()
    arrays = _as_arrays(tail_pcs_normalized)
    worker = partial(volume_psd, params=params)
    estimates = list(ordered_map(worker, arrays, n_jobs=n_jobs, desc="psd"))
    psi = _normalize_unit(np.mean(estimates, axis=0))
    return NoisePsd(psi)


def tail_components(stack: PcStack, tail_count: int) -> list:
    if stack.n_components <= tail_count:
        raise ValueError(f"Need more than {tail_count} PCs to take the last {tail_count}, "
                         f"got {stack.n_components}")
    pcs = stack.pcs
    return [Volume3(pcs[..., i]) for i in range(stack.n_components - tail_count, stack.n_components)]


class NoiseEstimator:
    """
    Estimates the noise map and PSD from the highest shell of a real DWI series
    """
    def __init__(self, params: Optional[NoiseEstParams] = None, n_jobs: int = 1):
        self.params = params or NoiseEstParams()
        self.n_jobs = n_jobs

    def highest_shell(self, dataset: DwiDataset) -> DwiDataset:
        shells = group_shells(dataset.bvals, self.params.shell_tolerance)
        center, members = shells.highest()
        if len(members) <= self.params.tail_count:
            raise ValueError(f"Highest shell (b={center:.0f}) has {len(members)} volumes; "
                             f"noise estimation needs more than {self.params.tail_count}")
        logger.info(f"Estimating noise from {len(members)} volumes of shell b={center:.0f}")
        return dataset.subset(members)

    def tail_pcs(self, dataset: DwiDataset) -> list:
        if dataset.is_complex:
            raise ValueError("Noise estimation needs real-valued (phase-stabilized) data")
        shell = self.highest_shell(dataset)
        stack = forward_pca(vectorize(shell), shell.dims)
        return tail_components(stack, self.params.tail_count)

    def estimate(self,
                 dataset: DwiDataset,
                 noise_map: Optional[NoiseMap] = None,
                 psd: Optional[NoisePsd] = None,
                 clamp_fraction: float = SIGMA_CLAMP_FRACTION) -> NoiseEstimate:
        """
        Args:
            dataset: real DWI series, not normalized
            noise_map: known noise map, only the PSD is estimated when given
            psd: known PSD, only the noise map is estimated when given
            clamp_fraction: floor used when normalizing the PCs by the map

        Returns:
            NoiseEstimate(noise_map, psd)
        """
        if noise_map is not None and psd is not None:
            return NoiseEstimate(noise_map, psd)
        tail = self.tail_pcs(dataset)

        if noise_map is None:
            noise_map = estimate_noise_map(tail, self.params.map_window)
        elif noise_map.dims != dataset.dims:
            raise ValueError(f"Noise map dims {noise_map.dims} do not match data dims {dataset.dims}")

        if psd is None:
            sigma = clamp_noise_map(noise_map, clamp_fraction).sigma
            normalized = [Volume3(pc.samples / sigma) for pc in tail]
            psd = estimate_psd(normalized, self.params, n_jobs=self.n_jobs)
        return NoiseEstimate(noise_map, psd)


def estimate_noise(dataset: DwiDataset,
                   params: Optional[NoiseEstParams] = None,
                   n_jobs: int = 1) -> NoiseEstimate:
    """Noise map and PSD of a real DWI series"""
    return NoiseEstimator(params, n_jobs=n_jobs).estimate(dataset)
