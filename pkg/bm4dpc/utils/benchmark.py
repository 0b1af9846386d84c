"""
In-silico benchmark: noisy input, MPPCA and BM4D-PC scored against the
phantom at several noise levels and noise kinds
"""
import csv
import json
import logging
import os
from typing import Dict, Optional, Sequence

from bm4dpc.data.simulation import NOISE_KINDS, STANDARD_LEVELS, NoiseSpec, PhantomSpec, simulate
from bm4dpc.models.config import Bm4dProfile, PipelineOptions
from bm4dpc.models.mppca import mppca_denoise
from bm4dpc.models.pipeline import Bm4dPcDenoiser
from bm4dpc.utils.metrics import MetricReport, evaluate

logger = logging.getLogger(__name__)

METHODS = ("noisy", "mppca", "bm4dpc")

BenchmarkResults = Dict[str, Dict[str, Dict[str, MetricReport]]]


def run_benchmark(phantom_spec: Optional[PhantomSpec] = None,
                  levels: Sequence[float] = STANDARD_LEVELS,
                  kinds: Sequence[str] = NOISE_KINDS,
                  profile: Optional[Bm4dProfile] = None,
                  seed: int = 0,
                  n_jobs: int = 1) -> BenchmarkResults:
    """
    Args:
        phantom_spec: phantom to corrupt, the default phantom when omitted
        levels: noise levels as fractions of the maximum b=0 magnitude
        kinds: "white" and/or "colored"
        profile: BM4D profile of the BM4D-PC runs
        seed: noise seed
        n_jobs: worker processes

    Returns:
        results[kind][level][method] -> MetricReport, levels formatted with %g
    """
    phantom_spec = phantom_spec or PhantomSpec(seed=seed)
    results: BenchmarkResults = {}
    for kind in kinds:
        results[kind] = {}
        for level in levels:
            logger.info(f"Benchmark: {kind} noise at level {level:g}")
            data = simulate(phantom_spec, NoiseSpec(level=level, kind=kind, seed=seed), n_jobs=n_jobs)
            options = PipelineOptions(bm4d_profile=profile or Bm4dProfile(), n_jobs=n_jobs)
            outputs = {
                "noisy": data.noisy,
                "mppca": mppca_denoise(data.noisy, n_jobs=n_jobs),
                "bm4dpc": Bm4dPcDenoiser(options).denoise(data.noisy).denoised,
            }
            results[kind][f"{level:g}"] = {
                method: evaluate(data.ground_truth, outputs[method], data.mask, with_dti=True, n_jobs=n_jobs)
                for method in METHODS
            }
    return results


def write_benchmark(results: BenchmarkResults, json_path: str) -> str:
    """Write the nested JSON report and a flat CSV next to it; returns the CSV path"""
    nested = {kind: {level: {method: report.to_dict() for method, report in methods.items()}
                     for level, methods in levels.items()}
              for kind, levels in results.items()}
    with open(json_path, "w") as fileobj:
        json.dump(nested, fileobj, indent=2, sort_keys=True)
        fileobj.write("\n")

    csv_path = os.path.splitext(json_path)[0] + ".csv"
    with open(csv_path, "w", newline="") as fileobj:
        writer = csv.writer(fileobj)
        writer.writerow(["noise", "level", "method", "metric", "key", "value"])
        for kind in sorted(results):
            for level in sorted(results[kind], key=float):
                for method in METHODS:
                    for row in results[kind][level][method].rows():
                        writer.writerow([kind, level, method, *row])
    logger.info(f"Wrote benchmark report {json_path} and {csv_path}")
    return csv_path
