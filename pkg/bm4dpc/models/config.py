"""
Configuration for the BM4D-PC models
"""
import os
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Optional, Tuple

from dotenv import find_dotenv, load_dotenv

from bm4dpc.models.types import NoiseMap, NoisePsd

logger = logging.getLogger(__name__)

Triple = Tuple[int, int, int]

THREADS_ENV = "BM4DPC_THREADS"
SIGMA_CLAMP_FRACTION = 0.01


@dataclass(frozen=True)
class PhaseFilterParams:
    """
    Low-pass used to estimate the slowly varying phase of each slice

    Args:
        lowpass_sigma: standard deviation of the 2D Gaussian, in voxels
    """
    lowpass_sigma: float = 4.0

    def __post_init__(self):
        if not self.lowpass_sigma > 0:
            raise ValueError(f"lowpass_sigma must be positive, got {self.lowpass_sigma}")


@dataclass(frozen=True)
class NoiseEstParams:
    """
    Parameters of the noise map / noise PSD estimation from tail PCs

    Args:
        tail_count: number of last principal components used
        map_window: edge of the cubic neighborhood of the local std estimator (odd)
        psd_window: edge of the in-plane periodogram window
        chunk_size: consecutive slices per chunk
        chunk_step: stride between chunks
        window_step: in-plane stride of the periodogram windows
        shell_tolerance: b-value tolerance used to find the highest shell
    """
    tail_count: int = 3
    map_window: int = 5
    psd_window: int = 16
    chunk_size: int = 5
    chunk_step: int = 3
    window_step: int = 8
    shell_tolerance: float = 50.0

    def __post_init__(self):
        for name in ("tail_count", "map_window", "psd_window", "chunk_size", "chunk_step", "window_step"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value}")
        if self.map_window % 2 == 0:
            raise ValueError(f"map_window must be odd, got {self.map_window}")
        if self.shell_tolerance < 0:
            raise ValueError("shell_tolerance must be nonnegative")


@dataclass(frozen=True)
class StageParams:
    """
    Block-matching and filtering parameters of one BM4D stage

    Args:
        block: block size N1 along each axis
        group_size: maximum number of similar blocks N2
        search_radius: search window radius Ns along each axis
        step: stride Nstep between reference blocks
        threshold: hard-threshold multiplier (ignored by the Wiener stage)
        match_threshold: largest matching distance, in units of the noise variance;
            None keeps every candidate in the search window
    """
    block: Triple = (4, 4, 4)
    group_size: int = 16
    search_radius: Triple = (5, 5, 5)
    step: int = 3
    threshold: float = 2.7
    match_threshold: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "block", tuple(int(b) for b in self.block))
        object.__setattr__(self, "search_radius", tuple(int(r) for r in self.search_radius))
        if len(self.block) != 3 or min(self.block) < 2:
            raise ValueError(f"block edges must be >= 2, got {self.block}")
        if len(self.search_radius) != 3 or min(self.search_radius) < 0:
            raise ValueError(f"search_radius must be three nonnegative ints, got {self.search_radius}")
        if self.group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {self.group_size}")
        if self.step < 1:
            raise ValueError(f"step must be >= 1, got {self.step}")
        if self.threshold < 0:
            raise ValueError(f"threshold must be nonnegative, got {self.threshold}")
        if self.match_threshold is not None and not self.match_threshold > 0:
            raise ValueError(f"match_threshold must be positive, got {self.match_threshold}")


_PROFILES: Dict[str, Dict[str, StageParams]] = {
    # normal profile
    "np": {
        "ht": StageParams(block=(4, 4, 4), group_size=16, search_radius=(5, 5, 5), step=3, threshold=2.7),
        "wiener": StageParams(block=(4, 4, 4), group_size=32, search_radius=(5, 5, 5), step=3, match_threshold=4.0),
    },
    # low complexity
    "lc": {
        "ht": StageParams(block=(4, 4, 4), group_size=8, search_radius=(4, 4, 4), step=4, threshold=2.7),
        "wiener": StageParams(block=(4, 4, 4), group_size=16, search_radius=(4, 4, 4), step=4, match_threshold=4.0),
    },
    # modified profile
    "mp": {
        "ht": StageParams(block=(4, 4, 4), group_size=32, search_radius=(6, 6, 6), step=2, threshold=3.0),
        "wiener": StageParams(block=(4, 4, 4), group_size=64, search_radius=(6, 6, 6), step=2, match_threshold=4.0),
    },
}


@dataclass(frozen=True)
class Bm4dProfile:
    """
    All BM4D filter parameters: one StageParams for each of the two stages
    """
    ht: StageParams = field(default_factory=lambda: _PROFILES["np"]["ht"])
    wiener: StageParams = field(default_factory=lambda: _PROFILES["np"]["wiener"])
    name: str = "np"

    @classmethod
    def from_name(cls, name: str = "np", **overrides: Any) -> "Bm4dProfile":
        """
        Build a named profile, optionally overriding stage parameters

        Args:
            name: "np" (normal), "lc" (low complexity) or "mp" (modified)
            **overrides: keys of the form ht_<field> or wiener_<field>

        Returns:
            The profile
        """
        if name not in _PROFILES:
            raise ValueError(f"Unknown BM4D profile '{name}', expected one of {sorted(_PROFILES)}")
        stages = dict(_PROFILES[name])
        for key, value in overrides.items():
            stage, _, attr = key.partition("_")
            if stage not in stages or not attr:
                raise ValueError(f"Unknown profile override '{key}'")
            stages[stage] = replace(stages[stage], **{attr: value})
        return cls(ht=stages["ht"], wiener=stages["wiener"], name=name)

    @staticmethod
    def list_profiles():
        return sorted(_PROFILES)


@dataclass(frozen=True)
class PipelineOptions:
    """
    Options of the end-to-end BM4D-PC denoiser

    Supplying both noise priors skips estimation; supplying one of them
    estimates only the other.
    """
    provided_noise_map: Optional[NoiseMap] = None
    provided_psd: Optional[NoisePsd] = None
    noise_est_params: NoiseEstParams = field(default_factory=NoiseEstParams)
    bm4d_profile: Bm4dProfile = field(default_factory=Bm4dProfile)
    phase_params: PhaseFilterParams = field(default_factory=PhaseFilterParams)
    sigma_clamp_fraction: float = SIGMA_CLAMP_FRACTION
    skip_phase_stabilization: bool = False
    n_jobs: int = 1

    def __post_init__(self):
        if not 0 < self.sigma_clamp_fraction < 1:
            raise ValueError(f"sigma_clamp_fraction must lie in (0, 1), got {self.sigma_clamp_fraction}")
        if self.n_jobs < 1:
            raise ValueError(f"n_jobs must be >= 1, got {self.n_jobs}")


@dataclass(frozen=True)
class RuntimeConfig:
    """
    Process-wide settings shared by every CLI command
    """
    threads: int = 1
    seed: int = 0
    verbose: bool = False

    @classmethod
    def from_env(cls, threads: Optional[int] = None, seed: int = 0, verbose: bool = False) -> "RuntimeConfig":
        """
        Resolve the thread count from the flag, then BM4DPC_THREADS (environment
        or a .env file found from the working directory), then the CPU count
        """
        load_dotenv(find_dotenv(usecwd=True))
        if threads is None:
            env_value = os.environ.get(THREADS_ENV)
            if env_value:
                try:
                    threads = int(env_value)
                except ValueError:
                    raise ValueError(f"{THREADS_ENV} must be an integer, got '{env_value}'")
            else:
                threads = os.cpu_count() or 1
        if threads < 1:
            raise ValueError(f"Thread count must be >= 1, got {threads}")
        logger.debug(f"Runtime configuration: threads={threads}, seed={seed}")
        return cls(threads=threads, seed=seed, verbose=verbose)
