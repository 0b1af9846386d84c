import numpy as np
import pytest

from bm4dpc.models.types import (
    DwiDataset,
    NoiseMap,
    NoisePsd,
    SpatialKernel,
    Volume3,
    devectorize,
    vectorize,
)


def test_vectorize_stacks_volumes_as_columns():
    data = np.zeros((2, 1, 1, 2))
    data[:, 0, 0, 0] = [1.0, 2.0]
    data[:, 0, 0, 1] = [3.0, 4.0]
    matrix = vectorize(DwiDataset(data, [0, 0]))
    np.testing.assert_array_equal(matrix, [[1.0, 3.0], [2.0, 4.0]])


def test_vectorize_is_first_axis_fastest():
    data = np.arange(2 * 3 * 4 * 2, dtype=float).reshape(2, 3, 4, 2)
    matrix = vectorize(DwiDataset(data, [0, 0]))
    assert matrix[1, 0] == data[1, 0, 0, 0]
    assert matrix[2, 0] == data[0, 1, 0, 0]
    assert matrix[6, 1] == data[0, 0, 1, 1]


def test_vectorize_rejects_fewer_voxels_than_volumes():
    with pytest.raises(ValueError):
        vectorize(DwiDataset(np.ones((3, 1, 1, 4)), np.zeros(4)))


def test_devectorize_round_trip(rng):
    matrix = rng.standard_normal((24, 5))
    restored = vectorize(DwiDataset(devectorize(matrix, (2, 3, 4)), np.zeros(5)))
    np.testing.assert_array_equal(restored, matrix)


def test_devectorize_rejects_mismatched_dims(rng):
    with pytest.raises(ValueError):
        devectorize(rng.standard_normal((24, 5)), (2, 3, 5))


def test_dataset_is_read_only(rng):
    dataset = DwiDataset(rng.standard_normal((2, 2, 2, 3)), [0, 1000, 1000])
    with pytest.raises(ValueError):
        dataset.data[0, 0, 0, 0] = 1.0


def test_dataset_validation(rng):
    data = rng.standard_normal((2, 2, 2, 3))
    with pytest.raises(ValueError):
        DwiDataset(data[..., :1], [0])
    with pytest.raises(ValueError):
        DwiDataset(data, [0, 1000])
    with pytest.raises(ValueError):
        DwiDataset(data, [0, -5, 1000])
    bad = data.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        DwiDataset(bad, [0, 1000, 1000])


def test_bvecs_must_be_unit_except_for_b0(rng):
    data = rng.standard_normal((2, 2, 2, 3))
    bvecs = np.array([[0.3, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    dataset = DwiDataset(data, [0, 1000, 1000], bvecs)
    assert dataset.n_volumes == 3
    bvecs[1] = [0.5, 0.5, 0.0]
    with pytest.raises(ValueError):
        DwiDataset(data, [0, 1000, 1000], bvecs)


def test_dataset_subset_and_volumes(rng):
    dataset = DwiDataset(rng.standard_normal((2, 3, 4, 4)), [0, 1000, 1000, 2000])
    subset = dataset.subset([1, 3])
    assert subset.n_volumes == 2
    np.testing.assert_array_equal(subset.bvals, [1000, 2000])
    assert dataset.volume(2).dims == (2, 3, 4)
    assert len(dataset.volumes) == 4


def test_volume3_rejects_wrong_rank():
    with pytest.raises(ValueError):
        Volume3(np.zeros((4, 4)))


def test_noise_map_rejects_negative_values():
    with pytest.raises(ValueError):
        NoiseMap(-np.ones((2, 2, 2)))


def test_unit_variance_psd_must_have_mean_one():
    assert NoisePsd.flat((4, 4, 2)).mean_power == 1.0
    with pytest.raises(ValueError):
        NoisePsd(2.0 * np.ones((4, 4, 2)))
    scaled = NoisePsd(2.0 * np.ones((4, 4, 2)), unit_variance=False)
    assert scaled.normalized().mean_power == pytest.approx(1.0, abs=1e-12)


def test_spatial_kernel_is_promoted_to_3d():
    kernel = SpatialKernel(np.array([[0.0, 0.6], [0.8, 0.0]]))
    assert kernel.g.shape == (2, 2, 1)
    assert kernel.center == (1, 1, 0)
    assert kernel.is_unit_norm
