"""
Correlated-noise BM4D: block matching, shrinkage, aggregation and the
multichannel two-stage driver

Channels are handled as one (C, m, n, o) array. Block matching runs on
channel 0 only and the matched positions are reused for every channel.
The noise of every channel is described by the same PSD, whose grid mean is
the noise variance (1 for normalized principal components).
"""
import logging
from functools import partial
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from bm4dpc.models.config import Bm4dProfile, StageParams
from bm4dpc.models.transforms import (
    CoeffVarianceModel,
    forward_group,
    inverse_group,
    largest_power_of_two,
)
from bm4dpc.models.types import NoisePsd, NumericalError, Volume3
from bm4dpc.utils.parallel import ordered_map

logger = logging.getLogger(__name__)

Triple = Tuple[int, int, int]
WEIGHT_FLOOR = 1e-12
STAGES = ("ht", "wiener")

ChannelInput = Union[np.ndarray, Volume3, Sequence[Union[np.ndarray, Volume3]]]


def as_channels(channels: ChannelInput) -> np.ndarray:
    """Stack Volume3s / 3D arrays into a real (C, m, n, o) array"""
    if isinstance(channels, Volume3):
        stacked = channels.samples[np.newaxis]
    elif isinstance(channels, np.ndarray):
        stacked = channels[np.newaxis] if channels.ndim == 3 else channels
    else:
        stacked = np.stack([c.samples if isinstance(c, Volume3) else np.asarray(c) for c in channels])
    if stacked.ndim != 4 or stacked.shape[0] < 1:
        raise ValueError(f"Expected one or more 3D channels, got shape {stacked.shape}")
    if np.iscomplexobj(stacked):
        raise ValueError("BM4D channels must be real-valued")
    return np.asarray(stacked, dtype=np.float64)


def reference_corners(length: int, block: int, step: int) -> np.ndarray:
    """Corners along one axis with stride step, always including the last one"""
    if length < block:
        raise ValueError(f"Axis of length {length} is smaller than the block edge {block}")
    corners = list(range(0, length - block + 1, step))
    if corners[-1] != length - block:
        corners.append(length - block)
    return np.asarray(corners, dtype=int)


def match_blocks(guide: Union[np.ndarray, Volume3],
                 ref_pos: Sequence[int],
                 params: StageParams,
                 noise_power: float = 1.0) -> np.ndarray:
    """
    Find the blocks most similar to the reference block

    Candidates are all corners within params.search_radius of ref_pos that keep
    the block inside the volume. They are ranked by mean squared difference to
    the reference block, ties in lexicographic corner order. With a
    params.match_threshold, candidates farther than match_threshold * noise_power
    are dropped. The reference comes first and the group is cut to the largest
    power of two not above min(candidates, group_size).

    Args:
        guide: real volume used for matching
        ref_pos: corner of the reference block
        params: stage parameters
        noise_power: noise variance of the guide samples

    Returns:
        (M, 3) integer corners, reference first
    """
    guide = guide.samples if isinstance(guide, Volume3) else np.asarray(guide)
    if np.iscomplexobj(guide):
        raise ValueError("Block matching needs a real-valued guide")
    block = params.block
    dims = guide.shape
    ref = tuple(int(r) for r in ref_pos)
    if any(d < b for d, b in zip(dims, block)):
        raise ValueError(f"Volume {dims} is smaller than the block {block}")
    if any(r < 0 or r + b > d for r, b, d in zip(ref, block, dims)):
        raise ValueError(f"Reference block at {ref} does not fit in volume {dims}")

    lo = [max(0, r - ns) for r, ns in zip(ref, params.search_radius)]
    hi = [min(d - b, r + ns) for r, ns, d, b in zip(ref, params.search_radius, dims, block)]
    region = guide[lo[0]:hi[0] + block[0], lo[1]:hi[1] + block[1], lo[2]:hi[2] + block[2]]
    windows = sliding_window_view(region, block)
    ref_block = guide[ref[0]:ref[0] + block[0], ref[1]:ref[1] + block[1], ref[2]:ref[2] + block[2]]
    distances = np.mean((windows - ref_block) ** 2, axis=(3, 4, 5)).ravel()

    grid = windows.shape[:3]
    ref_index = np.ravel_multi_index(tuple(r - l for r, l in zip(ref, lo)), grid)
    order = np.argsort(distances, kind="stable")
    order = order[order != ref_index]
    if params.match_threshold is not None:
        order = order[distances[order] <= params.match_threshold * noise_power]
    size = largest_power_of_two(min(order.size + 1, params.group_size))
    chosen = np.concatenate([[ref_index], order[:size - 1]])
    return np.stack(np.unravel_index(chosen, grid), axis=1) + np.asarray(lo)


def gather_blocks(volumes: np.ndarray, positions: np.ndarray, block: Triple) -> np.ndarray:
    """(C, m, n, o) volumes -> (C, M, b1, b2, b3) blocks at the given corners"""
    ix = positions[:, 0, np.newaxis] + np.arange(block[0])
    iy = positions[:, 1, np.newaxis] + np.arange(block[1])
    iz = positions[:, 2, np.newaxis] + np.arange(block[2])
    return volumes[:, ix[:, :, None, None], iy[:, None, :, None], iz[:, None, None, :]]


def _dc_mask(shape: Tuple[int, ...]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    mask.flat[0] = True
    return mask


def _group_axes(coeffs: np.ndarray, variances: np.ndarray) -> Tuple[int, ...]:
    # leading axes of coeffs beyond the shape of variances are channels
    return tuple(range(coeffs.ndim - variances.ndim, coeffs.ndim))


def _keep_mask(coeffs: np.ndarray, variances: np.ndarray, threshold: float) -> np.ndarray:
    keep = np.abs(coeffs) > threshold * np.sqrt(variances)
    return keep | _dc_mask(variances.shape)


def hard_threshold(coeffs: np.ndarray,
                   variances: np.ndarray,
                   threshold: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Zero every coefficient with |c| <= threshold * sqrt(var)

    The first coefficient of the group (Haar row 0, DCT basis 0) is always kept.

    Args:
        coeffs: (..., M, P) group coefficients, leading axes are channels
        variances: (M, P) noise variances of the coefficients
        threshold: multiplier lambda

    Returns:
        (shrunk coefficients, retained count per channel)
    """
    coeffs = np.asarray(coeffs)
    variances = np.asarray(variances, dtype=float)
    keep = _keep_mask(coeffs, variances, threshold)
    return np.where(keep, coeffs, 0.0), np.sum(keep, axis=_group_axes(coeffs, variances))


def hard_threshold_weights(coeffs: np.ndarray,
                           variances: np.ndarray,
                           threshold: float) -> Tuple[np.ndarray, np.ndarray]:
    """Hard threshold plus the aggregation weight 1 / (sum of retained variances) per channel"""
    keep = _keep_mask(coeffs, variances, threshold)
    kept_power = np.sum(np.where(keep, variances, 0.0), axis=_group_axes(coeffs, variances))
    return np.where(keep, coeffs, 0.0), 1.0 / np.maximum(kept_power, WEIGHT_FLOOR)


def wiener_shrink(noisy: np.ndarray,
                  pilot: np.ndarray,
                  variances: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Empirical Wiener shrinkage with gain |pilot|^2 / (|pilot|^2 + var)

    A coefficient with zero noise variance passes unchanged.

    Returns:
        (shrunk coefficients, aggregation weight 1 / sum(gain^2 * var) per channel)
    """
    noisy = np.asarray(noisy)
    variances = np.asarray(variances, dtype=float)
    energy = np.abs(np.asarray(pilot)) ** 2
    denominator = energy + variances
    gains = np.divide(energy, denominator, out=np.ones(denominator.shape), where=denominator > 0)
    residual_power = np.sum(gains ** 2 * variances, axis=_group_axes(noisy, variances))
    return gains * noisy, 1.0 / np.maximum(residual_power, WEIGHT_FLOOR)


class BlockAggregator:
    """
    Weighted accumulation of denoised blocks into numerator / denominator buffers

    Args:
        shape: (C, m, n, o) of the buffers
        origin: corner of the buffer inside the full volume (slab-private buffers)
    """
    def __init__(self, shape: Tuple[int, int, int, int], origin: Triple = (0, 0, 0)):
        self.origin = tuple(int(o) for o in origin)
        self.numerator = np.zeros(shape)
        self.denominator = np.zeros(shape)

    def add(self, positions: np.ndarray, blocks: np.ndarray, weights: np.ndarray) -> None:
        """
        Args:
            positions: (M, 3) corners in full-volume coordinates
            blocks: (C, M, b1, b2, b3)
            weights: (C,) one weight per channel for the whole group
        """
        block = blocks.shape[2:]
        weights = np.asarray(weights, dtype=float).reshape(-1, 1, 1, 1)
        for j, corner in enumerate(positions):
            start = [int(c) - o for c, o in zip(corner, self.origin)]
            window = (slice(None),) + tuple(slice(s, s + b) for s, b in zip(start, block))
            self.numerator[window] += weights * blocks[:, j]
            self.denominator[window] += weights

    def merge(self, origin: Triple, numerator: np.ndarray, denominator: np.ndarray) -> None:
        start = [int(c) - o for c, o in zip(origin, self.origin)]
        window = (slice(None),) + tuple(slice(s, s + n) for s, n in zip(start, numerator.shape[1:]))
        self.numerator[window] += numerator
        self.denominator[window] += denominator

    def result(self, fallback: Optional[np.ndarray] = None) -> np.ndarray:
        """numerator / denominator; voxels never covered keep the fallback value"""
        covered = self.denominator > 0
        output = np.zeros(self.numerator.shape) if fallback is None else np.array(fallback, dtype=float)
        output[covered] = self.numerator[covered] / self.denominator[covered]
        return output


def aggregate(groups: Iterable[Tuple[np.ndarray, np.ndarray, float]],
              dims: Triple,
              fallback: Optional[np.ndarray] = None) -> Volume3:
    """
    Aggregate single-channel denoised groups into a volume

    Args:
        groups: (positions (M, 3), blocks (M, b1, b2, b3), weight) triples
        dims: volume dims
        fallback: values kept at voxels no block covers (zeros when omitted)

    Returns:
        The aggregated volume
    """
    aggregator = BlockAggregator((1,) + tuple(dims))
    for positions, blocks, weight in groups:
        if not weight > 0:
            raise ValueError(f"Aggregation weights must be positive, got {weight}")
        aggregator.add(np.asarray(positions, dtype=int).reshape(-1, 3),
                       np.asarray(blocks)[np.newaxis], np.asarray([weight]))
    base = None if fallback is None else np.asarray(fallback, dtype=float)[np.newaxis]
    return Volume3(aggregator.result(base)[0])


def _filter_slab(x_ref: int,
                 channels: np.ndarray,
                 guide: np.ndarray,
                 pilot: Optional[np.ndarray],
                 model: CoeffVarianceModel,
                 params: StageParams,
                 stage: str,
                 y_refs: np.ndarray,
                 z_refs: np.ndarray,
                 noise_power: float = 1.0):
    # every reference block with first corner coordinate x_ref, into a private slab
    block = params.block
    n_channels, length = channels.shape[0], channels.shape[1]
    x_lo = max(0, x_ref - params.search_radius[0])
    x_hi = min(length - block[0], x_ref + params.search_radius[0]) + block[0]
    aggregator = BlockAggregator((n_channels, x_hi - x_lo) + channels.shape[2:], origin=(x_lo, 0, 0))

    for y_ref in y_refs:
        for z_ref in z_refs:
            positions = match_blocks(guide, (x_ref, y_ref, z_ref), params, noise_power)
            coeffs = forward_group(gather_blocks(channels, positions, block))
            variances = model.variances(positions)
            if stage == "ht":
                shrunk, weights = hard_threshold_weights(coeffs, variances, params.threshold)
            else:
                pilot_coeffs = forward_group(gather_blocks(pilot, positions, block))
                shrunk, weights = wiener_shrink(coeffs, pilot_coeffs, variances)
            aggregator.add(positions, inverse_group(shrunk, block), weights)

    return (x_lo, 0, 0), aggregator.numerator, aggregator.denominator


def bm4d_stage(channels: ChannelInput,
               psd: NoisePsd,
               profile: Bm4dProfile,
               stage: str,
               pilot_channels: Optional[ChannelInput] = None,
               n_jobs: int = 1,
               progress: bool = False) -> np.ndarray:
    """
    Run one BM4D stage on all channels

    Args:
        channels: noisy channels, matching guide is channel 0 (stage "ht")
        psd: noise PSD shared by the channels
        profile: filter parameters
        stage: "ht" (hard thresholding) or "wiener"
        pilot_channels: stage-1 estimates, required by the Wiener stage
        n_jobs: worker processes
        progress: show a progress bar

    Returns:
        (C, m, n, o) filtered channels
    """
    if stage not in STAGES:
        raise ValueError(f"Unknown BM4D stage '{stage}', expected one of {STAGES}")
    noisy = as_channels(channels)
    dims = noisy.shape[1:]
    if psd.dims != dims:
        raise ValueError(f"PSD dims {psd.dims} do not match channel dims {dims}")
    params = profile.ht if stage == "ht" else profile.wiener

    pilot = None
    guide = noisy[0]
    if stage == "wiener":
        if pilot_channels is None:
            raise ValueError("The Wiener stage needs pilot channels from the first stage")
        pilot = as_channels(pilot_channels)
        if pilot.shape != noisy.shape:
            raise ValueError(f"Pilot shape {pilot.shape} does not match channel shape {noisy.shape}")
        guide = pilot[0]

    block = params.block
    refs = [reference_corners(d, b, params.step) for d, b in zip(dims, block)]
    max_offset = tuple(min(2 * r, d - b) for r, d, b in zip(params.search_radius, dims, block))
    model = CoeffVarianceModel(psd, block, max_offset)
    logger.info(f"BM4D {stage} stage: {noisy.shape[0]} channels of size {dims}, "
                f"{refs[0].size * refs[1].size * refs[2].size} reference blocks")

    worker = partial(_filter_slab, channels=noisy, guide=guide, pilot=pilot, model=model,
                     params=params, stage=stage, y_refs=refs[1], z_refs=refs[2],
                     noise_power=psd.mean_power)
    aggregator = BlockAggregator(noisy.shape)
    for origin, numerator, denominator in ordered_map(worker, refs[0], n_jobs=n_jobs,
                                                      desc=f"bm4d-{stage}", progress=progress):
        aggregator.merge(origin, numerator, denominator)

    output = aggregator.result(fallback=noisy)
    if not np.all(np.isfinite(output)):
        raise NumericalError(f"BM4D {stage} stage produced non-finite samples")
    return output


class Bm4dFilter:
    """
    Two-stage multichannel BM4D for channels sharing one noise PSD
    """
    def __init__(self, profile: Optional[Bm4dProfile] = None, n_jobs: int = 1, progress: bool = False):
        """
        Args:
            profile: filter parameters (normal profile by default)
            n_jobs: worker processes
            progress: show progress bars
        """
        self.profile = profile or Bm4dProfile()
        self.n_jobs = n_jobs
        self.progress = progress

    def basic_estimate(self, channels: ChannelInput, psd: NoisePsd) -> np.ndarray:
        return bm4d_stage(channels, psd, self.profile, "ht", n_jobs=self.n_jobs, progress=self.progress)

    def final_estimate(self, channels: ChannelInput, psd: NoisePsd, pilot: ChannelInput) -> np.ndarray:
        return bm4d_stage(channels, psd, self.profile, "wiener", pilot_channels=pilot,
                          n_jobs=self.n_jobs, progress=self.progress)

    def denoise(self, channels: ChannelInput, psd: NoisePsd) -> np.ndarray:
        """
        Args:
            channels: (C, m, n, o) noisy channels, channel 0 guides the matching
            psd: noise PSD shared by all channels

        Returns:
            (C, m, n, o) denoised channels; none is discarded
        """
        noisy = as_channels(channels)
        pilot = self.basic_estimate(noisy, psd)
        return self.final_estimate(noisy, psd, pilot)


def bm4d_multichannel(channels: ChannelInput,
                      psd: NoisePsd,
                      profile: Optional[Bm4dProfile] = None,
                      n_jobs: int = 1) -> np.ndarray:
    """Hard-thresholding stage followed by the Wiener stage on every channel"""
    return Bm4dFilter(profile, n_jobs=n_jobs).denoise(channels, psd)
