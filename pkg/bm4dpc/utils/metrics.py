"""
Image quality metrics and per-shell metric reports
"""
import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from bm4dpc.data.ingestion import group_shells
from bm4dpc.models.dti import fit_dti
from bm4dpc.models.types import DwiDataset, Volume3
from bm4dpc.utils.parallel import ordered_map

logger = logging.getLogger(__name__)

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_RADIUS = 3
MASK_FRACTION = 0.05

VolumeLike = Union[Volume3, np.ndarray]


def _as_real(volume: VolumeLike) -> np.ndarray:
    array = volume.samples if isinstance(volume, Volume3) else np.asarray(volume)
    if np.iscomplexobj(array):
        array = np.abs(array)
    return np.asarray(array, dtype=np.float64)


def _pair(gt: VolumeLike, test: VolumeLike) -> Tuple[np.ndarray, np.ndarray]:
    gt, test = _as_real(gt), _as_real(test)
    if gt.shape != test.shape:
        raise ValueError(f"Dims mismatch: reference {gt.shape}, test {test.shape}")
    return gt, test


def psnr(gt: VolumeLike, test: VolumeLike) -> float:
    """
    10 log10(max(gt)^2 / MSE) in dB; +inf when the volumes are equal

    Complex volumes are compared by magnitude.
    """
    gt, test = _pair(gt, test)
    if not np.any(gt):
        raise ValueError("PSNR is undefined for an all-zero reference")
    mse = float(np.mean((gt - test) ** 2))
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(float(gt.max()) ** 2 / mse))


def ssim(gt: VolumeLike, test: VolumeLike, data_range: Optional[float] = None) -> float:
    """
    3D SSIM with a 7 x 7 x 7 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03,
    averaged over the window centers that keep the window inside the volume

    Args:
        gt: reference volume
        test: volume under test
        data_range: L, max(gt) - min(gt) by default

    Returns:
        Mean SSIM
    """
    gt, test = _pair(gt, test)
    if min(gt.shape) < 2 * SSIM_RADIUS + 1:
        raise ValueError(f"SSIM needs every dimension >= {2 * SSIM_RADIUS + 1}, got {gt.shape}")
    if data_range is None:
        data_range = float(gt.max() - gt.min())
    if data_range <= 0:
        raise ValueError("SSIM is undefined for a reference with zero dynamic range")

    blur = partial(ndimage.gaussian_filter, sigma=SSIM_SIGMA, truncate=SSIM_RADIUS / SSIM_SIGMA,
                   mode="nearest")
    mu_x, mu_y = blur(gt), blur(test)
    var_x = blur(gt * gt) - mu_x ** 2
    var_y = blur(test * test) - mu_y ** 2
    cov = blur(gt * test) - mu_x * mu_y

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    index = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
    r = SSIM_RADIUS
    return float(index[r:-r, r:-r, r:-r].mean())


def rmse_map(gt_map: VolumeLike, test_map: VolumeLike, mask: np.ndarray) -> float:
    """Root mean squared difference over the mask"""
    gt, test = _pair(gt_map, test_map)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != gt.shape:
        raise ValueError(f"Mask dims {mask.shape} do not match map dims {gt.shape}")
    if not mask.any():
        raise ValueError("RMSE needs a non-empty mask")
    return float(np.sqrt(np.mean((gt[mask] - test[mask]) ** 2)))


def default_mask(reference: DwiDataset, fraction: float = MASK_FRACTION) -> np.ndarray:
    """Voxels whose mean b=0 magnitude exceeds fraction of its maximum"""
    b0 = reference.bvals == reference.bvals.min()
    mean_b0 = np.abs(reference.data[..., b0]).mean(axis=-1)
    return mean_b0 > fraction * mean_b0.max()


def shell_label(center: float) -> str:
    return f"b{center:.0f}"


@dataclass
class MetricReport:
    """
    Quality of a test series against its noise-free reference

    Args:
        psnr: mean per-volume PSNR of every shell, dB
        ssim: mean per-volume SSIM of every shell
        rmse: FA / MD RMSE over the mask, when a DTI fit was requested
        volume_counts: volumes per shell
        mask_voxels: voxels in the evaluation mask
    """
    psnr: Dict[str, float] = field(default_factory=dict)
    ssim: Dict[str, float] = field(default_factory=dict)
    rmse: Dict[str, float] = field(default_factory=dict)
    volume_counts: Dict[str, int] = field(default_factory=dict)
    mask_voxels: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def rows(self):
        for metric in ("psnr", "ssim", "rmse", "volume_counts"):
            for key, value in sorted(getattr(self, metric).items()):
                yield metric, key, value
        yield "mask_voxels", "all", self.mask_voxels

    def write(self, json_path: str) -> str:
        """Write the JSON report and a CSV next to it; returns the CSV path"""
        with open(json_path, "w") as fileobj:
            json.dump(self.to_dict(), fileobj, indent=2, sort_keys=True)
            fileobj.write("\n")
        csv_path = os.path.splitext(json_path)[0] + ".csv"
        with open(csv_path, "w", newline="") as fileobj:
            writer = csv.writer(fileobj)
            writer.writerow(["metric", "key", "value"])
            writer.writerows(self.rows())
        logger.info(f"Wrote metric report {json_path} and {csv_path}")
        return csv_path


def _volume_scores(index: int, gt: np.ndarray, test: np.ndarray) -> Tuple[float, float]:
    return psnr(gt[..., index], test[..., index]), ssim(gt[..., index], test[..., index])


def evaluate(reference: DwiDataset,
             test: DwiDataset,
             mask: Optional[np.ndarray] = None,
             with_dti: bool = False,
             shell_tolerance: float = 50.0,
             n_jobs: int = 1) -> MetricReport:
    """
    Per-shell PSNR / SSIM and, optionally, FA / MD RMSE

    Args:
        reference: noise-free series
        test: series under test with the same dims and volume count
        mask: evaluation mask for the diffusion maps, default_mask(reference) when omitted
        with_dti: fit DTI on b <= 1000 of both series and report FA / MD RMSE
        shell_tolerance: b-value clustering tolerance
        n_jobs: worker processes (one volume per work item)

    Returns:
        MetricReport keyed by shell label ("b0", "b1000", ...)
    """
    if reference.data.shape != test.data.shape:
        raise ValueError(f"Dims mismatch: reference {reference.data.shape}, test {test.data.shape}")
    mask = default_mask(reference) if mask is None else np.asarray(mask, dtype=bool)

    gt = np.abs(reference.data) if reference.is_complex else reference.data
    tested = np.abs(test.data) if test.is_complex else test.data
    worker = partial(_volume_scores, gt=gt, test=tested)
    scores = list(ordered_map(worker, range(reference.n_volumes), n_jobs=n_jobs, desc="metrics"))

    report = MetricReport(mask_voxels=int(mask.sum()))
    shells = group_shells(reference.bvals, shell_tolerance)
    for center, members in zip(shells.centers, shells.members):
        label = shell_label(center)
        report.psnr[label] = float(np.mean([scores[i][0] for i in members]))
        report.ssim[label] = float(np.mean([scores[i][1] for i in members]))
        report.volume_counts[label] = len(members)

    if with_dti:
        if test.bvecs is None:
            test = DwiDataset(test.data, reference.bvals, reference.bvecs)
        ref_maps = fit_dti(reference, mask)
        test_maps = fit_dti(test, mask)
        report.rmse["fa"] = rmse_map(ref_maps.fa, test_maps.fa, mask)
        report.rmse["md"] = rmse_map(ref_maps.md, test_maps.md, mask)
    return report
