"""
Weighted least-squares diffusion tensor fit and the FA / MD maps
"""
import logging
from typing import NamedTuple, Optional

import numpy as np

from bm4dpc.models.types import DwiDataset, NumericalError, Volume3

logger = logging.getLogger(__name__)

N_PARAMS = 7
DEFAULT_MAX_BVAL = 1000.0
SIGNAL_FLOOR = 1e-10


class DtiMaps(NamedTuple):
    fa: Volume3
    md: Volume3


def design_matrix(bvals: np.ndarray, bvecs: np.ndarray) -> np.ndarray:
    """
    Rows [1, -b gx^2, -b gy^2, -b gz^2, -2b gx gy, -2b gx gz, -2b gy gz]
    for the log-signal model ln S = ln S0 - b g^T D g
    """
    b = np.asarray(bvals, dtype=float)
    gx, gy, gz = np.asarray(bvecs, dtype=float).T
    return np.stack([np.ones_like(b),
                     -b * gx ** 2, -b * gy ** 2, -b * gz ** 2,
                     -2 * b * gx * gy, -2 * b * gx * gz, -2 * b * gy * gz], axis=1)


def select_volumes(dataset: DwiDataset, max_bval: Optional[float] = DEFAULT_MAX_BVAL,
                   tolerance: float = 50.0) -> DwiDataset:
    """Volumes with b <= max_bval + tolerance (all volumes when max_bval is None)"""
    if max_bval is None:
        return dataset
    keep = np.flatnonzero(dataset.bvals <= max_bval + tolerance)
    return dataset.subset(keep)


def fit_tensors(dataset: DwiDataset, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Voxel-wise WLS fit with weights S^2

    Args:
        dataset: DWI series with gradient directions; magnitudes are fitted
        mask: voxels to fit, all voxels when omitted

    Returns:
        (m, n, o, 3, 3) tensors, zero outside the mask
    """
    if dataset.bvecs is None:
        raise ValueError("DTI fitting needs gradient directions")
    if dataset.n_volumes < N_PARAMS:
        raise ValueError(f"DTI fitting needs at least {N_PARAMS} volumes, got {dataset.n_volumes}")
    if not np.any(dataset.bvals == 0):
        raise ValueError("DTI fitting needs a b=0 volume")

    design = design_matrix(dataset.bvals, dataset.bvecs)
    if np.linalg.matrix_rank(design) < N_PARAMS:
        raise NumericalError("DTI design matrix is rank deficient; directions do not span 6 tensor elements")

    mask = np.ones(dataset.dims, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != dataset.dims:
        raise ValueError(f"Mask dims {mask.shape} do not match data dims {dataset.dims}")

    signals = np.abs(dataset.data[mask])
    scale = max(float(signals.max(initial=0.0)), 1.0)
    signals = np.maximum(signals, SIGNAL_FLOOR * scale)
    weights = signals ** 2
    log_signals = np.log(signals)

    normal = np.einsum("vk,ki,kj->vij", weights, design, design)
    rhs = np.einsum("vk,ki,vk->vi", weights, design, log_signals)
    params = np.linalg.solve(normal, rhs[..., np.newaxis])[..., 0]
    if not np.all(np.isfinite(params)):
        raise NumericalError("DTI fit produced non-finite parameters")

    dxx, dyy, dzz, dxy, dxz, dyz = params[:, 1:].T
    fitted = np.stack([np.stack([dxx, dxy, dxz], axis=-1),
                       np.stack([dxy, dyy, dyz], axis=-1),
                       np.stack([dxz, dyz, dzz], axis=-1)], axis=-2)
    tensors = np.zeros(dataset.dims + (3, 3))
    tensors[mask] = fitted
    return tensors


def tensor_scalars(tensors: np.ndarray):
    """FA and MD of tensors (..., 3, 3), eigenvalues clipped at 0"""
    eigenvalues = np.clip(np.linalg.eigvalsh(tensors), 0.0, None)
    md = eigenvalues.mean(axis=-1)
    total = np.sum(eigenvalues ** 2, axis=-1)
    spread = np.sum((eigenvalues - md[..., np.newaxis]) ** 2, axis=-1)
    fa = np.zeros_like(md)
    nonzero = total > 0
    fa[nonzero] = np.sqrt(1.5 * spread[nonzero] / total[nonzero])
    return np.clip(fa, 0.0, 1.0), md


def fit_dti(dataset: DwiDataset,
            mask: Optional[np.ndarray] = None,
            max_bval: Optional[float] = DEFAULT_MAX_BVAL) -> DtiMaps:
    """
    FA and MD maps of a DWI series, fitted on the b <= max_bval volumes

    Args:
        dataset: DWI series with gradient directions
        mask: voxels to fit; FA and MD are 0 elsewhere
        max_bval: highest shell used, None for all volumes

    Returns:
        DtiMaps(fa, md)
    """
    subset = select_volumes(dataset, max_bval)
    logger.debug(f"Fitting DTI on {subset.n_volumes} of {dataset.n_volumes} volumes")
    fa, md = tensor_scalars(fit_tensors(subset, mask))
    return DtiMaps(Volume3(fa), Volume3(md))
