import numpy as np
import pytest

from bm4dpc.models.gpca import check_orthonormal, forward_pca, inverse_pca
from bm4dpc.models.types import DwiDataset, vectorize


def test_eigenvalues_are_squared_singular_values(rng):
    matrix = rng.standard_normal((200, 6))
    stack = forward_pca(matrix)
    singular = np.linalg.svd(matrix, compute_uv=False)
    np.testing.assert_allclose(stack.eigenvalues, singular ** 2, rtol=1e-10)
    assert np.all(np.diff(stack.eigenvalues) <= 0)


def test_reconstruction_is_exact(rng):
    matrix = rng.standard_normal((120, 5)) + 1j * rng.standard_normal((120, 5))
    stack = forward_pca(matrix)
    np.testing.assert_allclose(inverse_pca(stack.components, stack.basis), matrix, atol=1e-10)


def test_components_are_orthogonal(rng):
    stack = forward_pca(rng.standard_normal((150, 4)))
    gram = stack.components.T @ stack.components
    np.testing.assert_allclose(gram, np.diag(stack.eigenvalues), atol=1e-8)


def test_largest_entry_of_each_basis_vector_is_real_positive(rng):
    matrix = rng.standard_normal((80, 5)) + 1j * rng.standard_normal((80, 5))
    basis = forward_pca(matrix).basis
    pivots = basis[np.argmax(np.abs(basis), axis=0), np.arange(5)]
    np.testing.assert_allclose(pivots.imag, 0.0, atol=1e-12)
    assert np.all(pivots.real > 0)


def test_sign_convention_makes_the_basis_unique(rng):
    matrix = rng.standard_normal((100, 4))
    first = forward_pca(matrix).basis
    second = forward_pca(-matrix).basis
    np.testing.assert_allclose(first, second, atol=1e-10)


def test_rank_deficient_input_clips_eigenvalues(rng):
    column = rng.standard_normal((50, 1))
    stack = forward_pca(np.hstack([column, 2.0 * column, -column]))
    assert np.all(stack.eigenvalues >= 0)
    assert stack.eigenvalues[1] == pytest.approx(0.0, abs=1e-8)


def test_pcs_are_volumes_in_voxel_order(rng):
    dataset = DwiDataset(rng.standard_normal((4, 3, 2, 5)), np.zeros(5))
    stack = forward_pca(vectorize(dataset), dataset.dims)
    assert stack.pcs.shape == (4, 3, 2, 5)
    np.testing.assert_array_equal(stack.pc_volume(0).reshape(-1, order="F"), stack.components[:, 0])


def test_needs_more_rows_than_columns(rng):
    with pytest.raises(ValueError):
        forward_pca(rng.standard_normal((3, 4)))


def test_non_finite_input_is_rejected():
    matrix = np.ones((10, 2))
    matrix[3, 1] = np.inf
    with pytest.raises(ValueError):
        forward_pca(matrix)


def test_check_orthonormal():
    assert check_orthonormal(np.eye(3)) == 0.0
    with pytest.raises(ValueError):
        check_orthonormal(np.array([[1.0, 0.1], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        check_orthonormal(np.ones((2, 3)))


def test_inverse_checks_component_count(rng):
    with pytest.raises(ValueError):
        inverse_pca(rng.standard_normal((10, 3)), np.eye(4))


def test_pure_noise_components_keep_unit_variance(rng):
    stack = forward_pca(rng.standard_normal((4096, 16)))
    variances = np.mean(stack.components ** 2, axis=0)
    assert np.all((variances >= 0.85) & (variances <= 1.15))
