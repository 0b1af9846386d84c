import numpy as np
import pytest

from bm4dpc.models.bm4d import (
    Bm4dFilter,
    aggregate,
    as_channels,
    bm4d_multichannel,
    bm4d_stage,
    gather_blocks,
    hard_threshold,
    hard_threshold_weights,
    match_blocks,
    reference_corners,
    wiener_shrink,
)
from bm4dpc.models.config import Bm4dProfile, StageParams
from bm4dpc.models.gpca import forward_pca
from bm4dpc.models.types import NoisePsd, Volume3, vectorize
from bm4dpc.utils.metrics import psnr


@pytest.fixture
def cube_signal():
    signal = np.zeros((16, 16, 16))
    signal[4:12, 5:13, 3:11] = 5.0
    return signal


def test_reference_corners_include_the_last_block():
    np.testing.assert_array_equal(reference_corners(10, 4, 3), [0, 3, 6])
    np.testing.assert_array_equal(reference_corners(11, 4, 3), [0, 3, 6, 7])
    np.testing.assert_array_equal(reference_corners(4, 4, 3), [0])
    with pytest.raises(ValueError):
        reference_corners(3, 4, 1)


def test_match_blocks_breaks_ties_lexicographically():
    params = StageParams(block=(2, 2, 2), group_size=4, search_radius=(2, 2, 2))
    positions = match_blocks(np.ones((10, 10, 10)), (4, 4, 4), params)
    np.testing.assert_array_equal(positions, [[4, 4, 4], [2, 2, 2], [2, 2, 3], [2, 2, 4]])


def test_match_blocks_finds_a_copied_block(rng):
    guide = rng.standard_normal((12, 12, 12))
    guide[5:9, 0:4, 4:8] = guide[1:5, 2:6, 3:7]
    params = StageParams(block=(4, 4, 4), group_size=8, search_radius=(4, 4, 4))
    positions = match_blocks(Volume3(guide), (1, 2, 3), params)
    assert positions.shape == (8, 3)
    np.testing.assert_array_equal(positions[0], [1, 2, 3])
    np.testing.assert_array_equal(positions[1], [5, 0, 4])
    assert len({tuple(p) for p in positions}) == 8


def test_match_blocks_stays_in_the_search_window(rng):
    params = StageParams(block=(4, 4, 4), group_size=64, search_radius=(2, 3, 1))
    positions = match_blocks(rng.standard_normal((16, 16, 16)), (1, 12, 6), params)
    assert np.all(np.abs(positions - [1, 12, 6]) <= [2, 3, 1])
    assert np.all(positions >= 0) and np.all(positions <= 12)
    # 4 * 4 * 3 candidates, cut to a power of two
    assert positions.shape[0] == 32


def test_group_size_is_a_power_of_two(rng):
    guide = rng.standard_normal((8, 8, 8))
    assert match_blocks(guide, (0, 0, 0), StageParams(group_size=12)).shape[0] == 8
    assert match_blocks(np.ones((4, 4, 4)), (0, 0, 0), StageParams()).shape[0] == 1


def test_match_blocks_validation(rng):
    params = StageParams()
    with pytest.raises(ValueError):
        match_blocks(rng.standard_normal((8, 8, 8)) * 1j, (0, 0, 0), params)
    with pytest.raises(ValueError):
        match_blocks(rng.standard_normal((8, 8, 8)), (6, 0, 0), params)
    with pytest.raises(ValueError):
        match_blocks(rng.standard_normal((8, 8, 3)), (0, 0, 0), params)


def test_gather_blocks(rng):
    volumes = rng.standard_normal((2, 6, 6, 6))
    blocks = gather_blocks(volumes, np.array([[0, 1, 2], [2, 2, 2]]), (2, 3, 4))
    assert blocks.shape == (2, 2, 2, 3, 4)
    np.testing.assert_array_equal(blocks[1, 0], volumes[1, 0:2, 1:4, 2:6])
    np.testing.assert_array_equal(blocks[0, 1], volumes[0, 2:4, 2:5, 2:6])


def test_hard_threshold_keeps_the_group_mean():
    coeffs = np.array([[0.1, 3.0, -0.5], [2.0, -4.0, 1.0]])
    shrunk, retained = hard_threshold(coeffs, np.ones((2, 3)), 1.5)
    np.testing.assert_array_equal(shrunk, [[0.1, 3.0, 0.0], [2.0, -4.0, 0.0]])
    assert retained == 4


def test_hard_threshold_weights_use_retained_variances():
    coeffs = np.array([[[0.1, 3.0], [0.0, 0.2]], [[5.0, 0.0], [0.0, 0.0]]])
    variances = np.array([[2.0, 0.5], [1.0, 4.0]])
    shrunk, weights = hard_threshold_weights(coeffs, variances, 1.0)
    np.testing.assert_array_equal(shrunk[0], [[0.1, 3.0], [0.0, 0.0]])
    np.testing.assert_allclose(weights, [1.0 / 2.5, 1.0 / 2.0])


def test_wiener_gain():
    noisy = np.array([[2.0, 1.0, 3.0]])
    pilot = np.array([[1.0, 0.0, 0.0]])
    variances = np.array([[1.0, 1.0, 0.0]])
    shrunk, weight = wiener_shrink(noisy, pilot, variances)
    np.testing.assert_allclose(shrunk, [[1.0, 0.0, 3.0]])
    assert weight == pytest.approx(1.0 / 0.25)


def test_aggregate_averages_overlaps_with_weights():
    dims = (4, 2, 2)
    groups = [
        (np.array([[0, 0, 0]]), np.full((1, 2, 2, 2), 1.0), 1.0),
        (np.array([[1, 0, 0]]), np.full((1, 2, 2, 2), 4.0), 3.0),
    ]
    volume = aggregate(groups, dims, fallback=np.full(dims, -1.0))
    np.testing.assert_allclose(volume.samples[0], 1.0)
    np.testing.assert_allclose(volume.samples[1], (1.0 + 12.0) / 4.0)
    np.testing.assert_allclose(volume.samples[2], 4.0)
    np.testing.assert_allclose(volume.samples[3], -1.0)
    with pytest.raises(ValueError):
        aggregate([(np.array([[0, 0, 0]]), np.ones((1, 2, 2, 2)), 0.0)], dims)


def test_as_channels():
    assert as_channels(np.zeros((3, 3, 3))).shape == (1, 3, 3, 3)
    assert as_channels([Volume3(np.zeros((3, 3, 3))), np.ones((3, 3, 3))]).shape == (2, 3, 3, 3)
    with pytest.raises(ValueError):
        as_channels(np.zeros((2, 3, 3, 3), dtype=complex))


def test_hard_threshold_stage_preserves_constants():
    channels = np.full((2, 10, 10, 10), 3.0)
    output = bm4d_stage(channels, NoisePsd.flat((10, 10, 10)), Bm4dProfile.from_name("lc"), "ht")
    np.testing.assert_allclose(output, 3.0, atol=1e-10)


def test_matching_positions_are_shared_across_channels(rng, cube_signal):
    noisy = cube_signal + rng.standard_normal(cube_signal.shape)
    output = bm4d_stage(np.stack([noisy, noisy]), NoisePsd.flat(noisy.shape), Bm4dProfile.from_name("lc"), "ht")
    np.testing.assert_allclose(output[0], output[1], rtol=1e-12, atol=1e-12)


def test_two_stage_filter_reduces_white_noise(rng, cube_signal):
    noisy = cube_signal + rng.standard_normal(cube_signal.shape)
    denoised = bm4d_multichannel(noisy, NoisePsd.flat(noisy.shape), Bm4dProfile.from_name("lc"))
    assert denoised.shape == (1,) + cube_signal.shape
    noisy_rmse = np.sqrt(np.mean((noisy - cube_signal) ** 2))
    denoised_rmse = np.sqrt(np.mean((denoised[0] - cube_signal) ** 2))
    assert denoised_rmse < 0.5 * noisy_rmse


def test_worker_count_does_not_change_the_result(rng, cube_signal):
    channels = np.stack([cube_signal + rng.standard_normal(cube_signal.shape) for _ in range(2)])
    psd = NoisePsd.flat(cube_signal.shape)
    profile = Bm4dProfile.from_name("lc")
    serial = Bm4dFilter(profile, n_jobs=1).denoise(channels, psd)
    parallel = Bm4dFilter(profile, n_jobs=2).denoise(channels, psd)
    np.testing.assert_array_equal(serial, parallel)


def test_stage_validation(rng):
    channels = rng.standard_normal((1, 8, 8, 8))
    profile = Bm4dProfile()
    with pytest.raises(ValueError):
        bm4d_stage(channels, NoisePsd.flat((8, 8, 4)), profile, "ht")
    with pytest.raises(ValueError):
        bm4d_stage(channels, NoisePsd.flat((8, 8, 8)), profile, "soft")
    with pytest.raises(ValueError):
        bm4d_stage(channels, NoisePsd.flat((8, 8, 8)), profile, "wiener")
    with pytest.raises(ValueError):
        bm4d_stage(channels, NoisePsd.flat((8, 8, 8)), profile, "wiener", pilot_channels=channels[:, :4])


def test_hard_threshold_rule():
    shrunk, retained = hard_threshold(np.array([[3.0, 1.0]]), np.ones((1, 2)), 2.7)
    np.testing.assert_array_equal(shrunk, [[3.0, 0.0]])
    assert retained == 1


def test_hard_threshold_without_threshold_keeps_everything(rng):
    coeffs = rng.standard_normal((2, 8, 64))
    shrunk, retained = hard_threshold(coeffs, np.ones((8, 64)), 0.0)
    np.testing.assert_array_equal(shrunk, coeffs)
    np.testing.assert_array_equal(retained, [512, 512])


def test_hard_threshold_is_idempotent(rng):
    coeffs = 2.0 * rng.standard_normal((8, 64))
    variances = rng.uniform(0.5, 2.0, size=(8, 64))
    once, _ = hard_threshold(coeffs, variances, 2.7)
    twice, _ = hard_threshold(once, variances, 2.7)
    np.testing.assert_array_equal(once, twice)


def test_wiener_gain_is_one_half_when_pilot_power_equals_the_variance(rng):
    variances = rng.uniform(0.5, 2.0, size=(4, 8))
    noisy = rng.standard_normal((4, 8))
    shrunk, weight = wiener_shrink(noisy, np.sqrt(variances), variances)
    np.testing.assert_allclose(shrunk, 0.5 * noisy)
    assert weight == pytest.approx(1.0 / (0.25 * variances.sum()))
    zero, _ = wiener_shrink(noisy, np.zeros_like(noisy), variances)
    np.testing.assert_array_equal(zero, 0.0)


def test_zero_threshold_stage_is_the_identity(rng):
    volume = rng.standard_normal((16, 16, 16))
    profile = Bm4dProfile.from_name("np", ht_threshold=0.0)
    output = bm4d_stage(volume, NoisePsd.flat(volume.shape), profile, "ht")
    np.testing.assert_allclose(output[0], volume, atol=1e-6)


def test_match_threshold_drops_distant_blocks():
    guide = np.zeros((12, 12, 12))
    guide[6:, :, :] = 10.0
    params = StageParams(block=(4, 4, 4), group_size=64, search_radius=(4, 2, 2), match_threshold=4.0)
    positions = match_blocks(guide, (0, 0, 0), params)
    # 27 candidates lie entirely in the zero half
    assert positions.shape[0] == 16
    assert np.all(positions[:, 0] <= 2)
    # a larger noise power admits every candidate
    assert match_blocks(guide, (0, 0, 0), params, noise_power=100.0).shape[0] == 32


def test_stage_one_reduces_the_error_of_every_pc(small_magnitude, rng):
    stack = forward_pca(vectorize(small_magnitude), small_magnitude.dims)
    clean = np.moveaxis(stack.pcs[..., :4], -1, 0)
    clean = clean * (6.0 / np.abs(clean[0]).max())
    noisy = clean + rng.standard_normal(clean.shape)
    basic = Bm4dFilter(Bm4dProfile()).basic_estimate(noisy, NoisePsd.flat(clean.shape[1:]))
    for channel in range(clean.shape[0]):
        assert np.mean((basic[channel] - clean[channel]) ** 2) < np.mean((noisy[channel] - clean[channel]) ** 2)


def test_wiener_stage_improves_the_guide_channel(small_magnitude, rng):
    stack = forward_pca(vectorize(small_magnitude), small_magnitude.dims)
    clean = np.moveaxis(stack.pcs[..., :4], -1, 0)
    clean = clean * (6.0 / np.abs(clean[0]).max())
    noisy = clean + rng.standard_normal(clean.shape)
    psd = NoisePsd.flat(clean.shape[1:])
    bm4d = Bm4dFilter(Bm4dProfile())
    basic = bm4d.basic_estimate(noisy, psd)
    final = bm4d.final_estimate(noisy, psd, basic)
    assert psnr(clean[0], final[0]) > psnr(clean[0], basic[0])
