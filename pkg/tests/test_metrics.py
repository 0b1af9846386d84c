import csv
import json
import math

import numpy as np
import pytest

from bm4dpc.models.types import DwiDataset, Volume3
from bm4dpc.utils.metrics import MetricReport, default_mask, evaluate, psnr, rmse_map, shell_label, ssim


def _ssim_direct(gt, test, data_range):
    """SSIM over explicit 7 x 7 x 7 Gaussian windows"""
    taps = np.exp(-0.5 * (np.arange(-3, 4) / 1.5) ** 2)
    taps /= taps.sum()
    weights = taps[:, None, None] * taps[None, :, None] * taps[None, None, :]
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    scores = []
    for i in range(3, gt.shape[0] - 3):
        for j in range(3, gt.shape[1] - 3):
            for k in range(3, gt.shape[2] - 3):
                x = gt[i - 3:i + 4, j - 3:j + 4, k - 3:k + 4]
                y = test[i - 3:i + 4, j - 3:j + 4, k - 3:k + 4]
                mx, my = np.sum(weights * x), np.sum(weights * y)
                vx = np.sum(weights * x * x) - mx ** 2
                vy = np.sum(weights * y * y) - my ** 2
                cxy = np.sum(weights * x * y) - mx * my
                scores.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(scores))


def test_psnr_known_value():
    gt = np.full((4, 4, 4), 2.0)
    assert psnr(gt, gt + 0.1) == pytest.approx(10.0 * math.log10(4.0 / 0.01))
    assert psnr(gt, gt) == float("inf")


def test_psnr_compares_complex_volumes_by_magnitude():
    gt = np.full((4, 4, 4), 2.0)
    assert psnr(gt * np.exp(1j * 0.3), Volume3(gt + 0.1)) == pytest.approx(psnr(gt, gt + 0.1))


def test_psnr_checks():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 4)), np.ones((4, 4, 4)))
    with pytest.raises(ValueError):
        psnr(np.ones((4, 4, 4)), np.ones((4, 4, 3)))


def test_ssim_matches_direct_windows(rng):
    gt = rng.uniform(0.0, 1.0, (9, 8, 10))
    test = gt + 0.2 * rng.standard_normal(gt.shape)
    expected = _ssim_direct(gt, test, float(gt.max() - gt.min()))
    assert ssim(gt, test) == pytest.approx(expected, rel=1e-9)
    assert ssim(gt, test, data_range=2.0) == pytest.approx(_ssim_direct(gt, test, 2.0), rel=1e-9)


def test_ssim_of_identical_volumes_is_one(rng):
    gt = rng.uniform(0.0, 1.0, (8, 8, 8))
    assert ssim(gt, gt) == pytest.approx(1.0)
    assert ssim(gt, gt + 0.3 * rng.standard_normal(gt.shape)) < 1.0


def test_ssim_checks():
    with pytest.raises(ValueError):
        ssim(np.ones((8, 8, 6)), np.ones((8, 8, 6)))
    with pytest.raises(ValueError):
        ssim(np.ones((8, 8, 8)), np.zeros((8, 8, 8)))


def test_rmse_map():
    mask = np.zeros((2, 2, 2), dtype=bool)
    mask[0] = True
    gt = np.zeros((2, 2, 2))
    test = np.zeros((2, 2, 2))
    test[0] = 3.0
    test[1] = 100.0
    assert rmse_map(gt, test, mask) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        rmse_map(gt, test, np.zeros((2, 2, 2), dtype=bool))
    with pytest.raises(ValueError):
        rmse_map(gt, test, np.ones((2, 2), dtype=bool))


def test_default_mask_uses_the_b0_volumes():
    data = np.zeros((4, 4, 4, 3))
    data[1:3, 1:3, 1:3, 0] = 10.0
    data[..., 1:] = 5.0
    mask = default_mask(DwiDataset(data, [0, 1000, 1000]))
    assert mask.sum() == 8
    assert mask[1, 1, 1] and not mask[0, 0, 0]


def test_shell_label():
    assert shell_label(0.0) == "b0"
    assert shell_label(1003.3) == "b1003"


def test_evaluate_reports_every_shell(small_phantom, rng):
    reference = small_phantom.dataset
    noisy = reference.with_data(reference.data + 0.02 * rng.standard_normal(reference.data.shape))
    report = evaluate(reference, noisy, small_phantom.mask)
    assert set(report.psnr) == {"b0", "b1000", "b2000"}
    assert report.volume_counts == {"b0": 2, "b1000": 8, "b2000": 8}
    assert report.mask_voxels == int(small_phantom.mask.sum())
    assert all(np.isfinite(v) for v in report.psnr.values())
    assert all(0.0 < v < 1.0 for v in report.ssim.values())
    assert report.rmse == {}


def test_evaluate_with_dti(small_phantom):
    reference = small_phantom.dataset
    test = DwiDataset(np.abs(reference.data), reference.bvals)
    report = evaluate(reference, test, small_phantom.mask, with_dti=True)
    assert report.rmse["fa"] == pytest.approx(0.0, abs=1e-6)
    assert report.rmse["md"] == pytest.approx(0.0, abs=1e-9)
    assert report.psnr["b0"] == float("inf")


def test_evaluate_checks_dims(small_phantom):
    with pytest.raises(ValueError):
        evaluate(small_phantom.dataset, small_phantom.dataset.subset(range(10)))


def test_report_files(tmp_path):
    report = MetricReport(psnr={"b0": 30.5}, ssim={"b0": 0.9}, rmse={"fa": 0.01},
                          volume_counts={"b0": 3}, mask_voxels=120)
    json_path = str(tmp_path / "metrics.json")
    csv_path = report.write(json_path)
    with open(json_path) as fileobj:
        assert json.load(fileobj) == report.to_dict()
    with open(csv_path, newline="") as fileobj:
        rows = list(csv.reader(fileobj))
    assert rows[0] == ["metric", "key", "value"]
    assert ["psnr", "b0", "30.5"] in rows
    assert rows[-1] == ["mask_voxels", "all", "120"]
