"""
End-to-end BM4D-PC denoising of a DWI series

phase stabilization -> noise map / PSD -> normalization -> global PCA ->
multichannel BM4D of the PCs -> inverse PCA -> rescaling by the noise map
"""
import logging
from typing import NamedTuple, Optional

import numpy as np

from bm4dpc.models.bm4d import Bm4dFilter
from bm4dpc.models.config import PipelineOptions
from bm4dpc.models.gpca import PcStack, forward_pca, inverse_pca
from bm4dpc.models.noise_estimation import NoiseEstimator, clamp_noise_map
from bm4dpc.models.phase import PhaseStabilizer
from bm4dpc.models.types import DwiDataset, NoiseMap, NoisePsd, NumericalError, devectorize, vectorize

logger = logging.getLogger(__name__)


class DenoiseResult(NamedTuple):
    denoised: DwiDataset
    noise_map: NoiseMap
    psd: NoisePsd


class Bm4dPcDenoiser:
    """
    BM4D-PC denoiser

    After denoise() the intermediates of the last run are kept on the
    instance: the real (stabilized) input, the clamped noise map and the
    global PCA of the normalized data.
    """
    def __init__(self, options: Optional[PipelineOptions] = None, progress: bool = False):
        self.options = options or PipelineOptions()
        self.progress = progress
        self.real_input: Optional[DwiDataset] = None
        self.clamped_map: Optional[NoiseMap] = None
        self.pc_stack: Optional[PcStack] = None

    def _real_samples(self, dataset: DwiDataset) -> DwiDataset:
        options = self.options
        if options.skip_phase_stabilization:
            if dataset.is_complex:
                raise ValueError("Phase stabilization was skipped but the input is complex")
            return dataset
        if not dataset.is_complex:
            raise ValueError("Complex input is required unless phase stabilization is skipped")
        return PhaseStabilizer(options.phase_params, n_jobs=options.n_jobs).stabilize(dataset)

    def _noise_priors(self, real: DwiDataset):
        options = self.options
        if options.provided_noise_map is not None and options.provided_psd is not None:
            logger.info("Using provided noise map and PSD; skipping noise estimation")
        estimator = NoiseEstimator(options.noise_est_params, n_jobs=options.n_jobs)
        noise_map, psd = estimator.estimate(real, options.provided_noise_map, options.provided_psd,
                                            clamp_fraction=options.sigma_clamp_fraction)
        if noise_map.dims != real.dims or psd.dims != real.dims:
            raise ValueError(f"Noise priors {noise_map.dims} / {psd.dims} do not match data dims {real.dims}")
        if not psd.unit_variance:
            logger.warning(f"PSD has mean power {psd.mean_power:.4g}; renormalizing to unit variance")
            psd = psd.normalized()
        return noise_map, psd

    def denoise(self, dataset: DwiDataset) -> DenoiseResult:
        """
        Args:
            dataset: complex DWI series (real when phase stabilization is skipped)

        Returns:
            DenoiseResult(denoised series, noise map used, PSD used)
        """
        options = self.options
        real = self._real_samples(dataset)
        self.real_input = real

        noise_map, psd = self._noise_priors(real)
        clamped = clamp_noise_map(noise_map, options.sigma_clamp_fraction)
        self.clamped_map = clamped
        sigma = clamped.sigma[..., np.newaxis]

        normalized = real.with_data(real.data / sigma)
        stack = forward_pca(vectorize(normalized), normalized.dims)
        self.pc_stack = stack
        logger.info(f"Global PCA: {stack.n_components} components, "
                    f"eigenvalues {stack.eigenvalues[0]:.4g} .. {stack.eigenvalues[-1]:.4g}")

        channels = np.moveaxis(stack.pcs, -1, 0)
        bm4d = Bm4dFilter(options.bm4d_profile, n_jobs=options.n_jobs, progress=self.progress)
        denoised_pcs = bm4d.denoise(channels, psd)

        components = np.moveaxis(denoised_pcs, 0, -1).reshape(stack.components.shape, order="F")
        matrix = inverse_pca(components, stack.basis)
        output = devectorize(matrix, real.dims) * sigma
        if not np.all(np.isfinite(output)):
            raise NumericalError("Denoised output contains non-finite samples")

        logger.info(f"Denoised {real.n_volumes} volumes of size {real.dims}")
        return DenoiseResult(dataset.with_data(output), noise_map, psd)


def denoise_bm4dpc(dataset: DwiDataset, options: Optional[PipelineOptions] = None) -> DenoiseResult:
    """Functional form of Bm4dPcDenoiser.denoise"""
    return Bm4dPcDenoiser(options).denoise(dataset)
