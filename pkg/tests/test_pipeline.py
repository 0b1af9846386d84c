import logging

import numpy as np
import pytest

from bm4dpc.data.simulation import NoiseSpec, PhantomSpec, add_noise, simulate
from bm4dpc.models.config import Bm4dProfile, PipelineOptions
from bm4dpc.models.pipeline import Bm4dPcDenoiser, denoise_bm4dpc
from bm4dpc.models.types import NoiseMap, NoisePsd

LOW_COMPLEXITY = Bm4dProfile.from_name("lc")


@pytest.fixture(scope="module")
def noisy_phantom(small_phantom):
    return add_noise(small_phantom.dataset, NoiseSpec(level=0.05, seed=11))


@pytest.fixture
def real_noisy(small_magnitude, rng):
    noise = 0.05 * rng.standard_normal(small_magnitude.data.shape)
    return small_magnitude.with_data(small_magnitude.data + noise)


def _rmse(a, b, mask):
    return float(np.sqrt(np.mean((a - b)[mask] ** 2)))


def test_denoising_with_known_priors_reduces_the_error(small_phantom, noisy_phantom):
    options = PipelineOptions(provided_noise_map=noisy_phantom.noise_map, provided_psd=noisy_phantom.psd,
                              bm4d_profile=LOW_COMPLEXITY)
    denoiser = Bm4dPcDenoiser(options)
    result = denoiser.denoise(noisy_phantom.dataset)

    truth = np.abs(small_phantom.dataset.data)
    mask = np.broadcast_to(small_phantom.mask[..., np.newaxis], truth.shape)
    before = _rmse(denoiser.real_input.data, truth, mask)
    after = _rmse(result.denoised.data, truth, mask)
    assert after < 0.75 * before
    assert not result.denoised.is_complex
    np.testing.assert_array_equal(result.denoised.bvals, noisy_phantom.dataset.bvals)
    assert result.noise_map is noisy_phantom.noise_map


def test_known_priors_skip_estimation(noisy_phantom, caplog):
    options = PipelineOptions(provided_noise_map=noisy_phantom.noise_map, provided_psd=noisy_phantom.psd,
                              bm4d_profile=LOW_COMPLEXITY)
    with caplog.at_level(logging.INFO, logger="bm4dpc"):
        denoise_bm4dpc(noisy_phantom.dataset, options)
    assert "skipping noise estimation" in caplog.text
    assert "Estimating noise" not in caplog.text


def test_estimated_priors_end_to_end(real_noisy):
    options = PipelineOptions(skip_phase_stabilization=True, bm4d_profile=LOW_COMPLEXITY)
    denoiser = Bm4dPcDenoiser(options)
    result = denoiser.denoise(real_noisy)
    assert result.denoised.dims == real_noisy.dims
    assert result.noise_map.dims == real_noisy.dims
    assert result.psd.mean_power == pytest.approx(1.0, abs=1e-9)
    assert np.all(np.isfinite(result.denoised.data))
    assert denoiser.pc_stack.n_components == real_noisy.n_volumes
    assert np.all(denoiser.clamped_map.sigma > 0)


def test_output_scales_with_the_input(real_noisy):
    dims = real_noisy.dims
    psd = NoisePsd.flat(dims)
    base_options = PipelineOptions(provided_noise_map=NoiseMap(np.full(dims, 0.05)), provided_psd=psd,
                                   skip_phase_stabilization=True, bm4d_profile=LOW_COMPLEXITY)
    scaled_options = PipelineOptions(provided_noise_map=NoiseMap(np.full(dims, 0.2)), provided_psd=psd,
                                     skip_phase_stabilization=True, bm4d_profile=LOW_COMPLEXITY)
    base = denoise_bm4dpc(real_noisy, base_options).denoised.data
    scaled = denoise_bm4dpc(real_noisy.with_data(4.0 * real_noisy.data), scaled_options).denoised.data
    np.testing.assert_allclose(scaled, 4.0 * base, rtol=1e-9, atol=1e-12)


def test_non_unit_psd_is_renormalized(real_noisy, caplog):
    dims = real_noisy.dims
    options = PipelineOptions(provided_noise_map=NoiseMap(np.full(dims, 0.05)),
                              provided_psd=NoisePsd(np.full(dims, 2.0), unit_variance=False),
                              skip_phase_stabilization=True, bm4d_profile=LOW_COMPLEXITY)
    with caplog.at_level(logging.WARNING, logger="bm4dpc"):
        result = denoise_bm4dpc(real_noisy, options)
    assert "renormalizing" in caplog.text
    assert result.psd.unit_variance
    np.testing.assert_allclose(result.psd.psi, 1.0)


def test_prior_dims_must_match(real_noisy):
    options = PipelineOptions(provided_noise_map=NoiseMap(np.ones((4, 4, 4))), provided_psd=NoisePsd.flat((4, 4, 4)),
                              skip_phase_stabilization=True)
    with pytest.raises(ValueError):
        denoise_bm4dpc(real_noisy, options)


def test_phase_stabilization_rules(noisy_phantom, real_noisy):
    with pytest.raises(ValueError):
        denoise_bm4dpc(real_noisy, PipelineOptions())
    with pytest.raises(ValueError):
        denoise_bm4dpc(noisy_phantom.dataset, PipelineOptions(skip_phase_stabilization=True))


def test_pipeline_options_validation():
    with pytest.raises(ValueError):
        PipelineOptions(sigma_clamp_fraction=0.0)
    with pytest.raises(ValueError):
        PipelineOptions(n_jobs=0)


def test_vanishing_noise_leaves_the_data_unchanged(small_magnitude):
    dims = small_magnitude.dims
    options = PipelineOptions(provided_noise_map=NoiseMap(np.full(dims, 1e-6)), provided_psd=NoisePsd.flat(dims),
                              skip_phase_stabilization=True, bm4d_profile=LOW_COMPLEXITY)
    denoised = denoise_bm4dpc(small_magnitude, options).denoised.data
    deviation = np.linalg.norm(denoised - small_magnitude.data) / np.linalg.norm(small_magnitude.data)
    assert deviation <= 1e-3


@pytest.mark.slow
def test_true_psd_beats_a_flat_psd_under_colored_noise():
    data = simulate(PhantomSpec(seed=5), NoiseSpec(level=0.05, kind="colored", seed=6), n_jobs=2)
    truth = np.abs(data.ground_truth.data)
    errors = {}
    for name, psd in (("true", data.psd), ("flat", NoisePsd.flat(data.psd.dims))):
        options = PipelineOptions(provided_noise_map=data.noise_map, provided_psd=psd, n_jobs=2)
        denoised = denoise_bm4dpc(data.noisy, options).denoised.data
        errors[name] = np.mean((denoised - truth) ** 2)
    assert errors["true"] <= errors["flat"]
