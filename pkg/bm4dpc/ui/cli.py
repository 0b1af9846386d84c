"""
Command-line interface for BM4D-PC
"""
import os
import sys
import logging
import argparse
from typing import List, Optional, Sequence, Tuple

import numpy as np

from bm4dpc.data.ingestion import load_dwi, read_bvals_bvecs, read_nifti_array, write_bvals_bvecs, write_nifti
from bm4dpc.data.simulation import NOISE_KINDS, NoiseSpec, PhantomSpec, simulate
from bm4dpc.models.config import Bm4dProfile, NoiseEstParams, PipelineOptions, RuntimeConfig
from bm4dpc.models.dti import fit_dti
from bm4dpc.models.mppca import mppca_denoise
from bm4dpc.models.noise_estimation import NoiseEstimator
from bm4dpc.models.phase import stabilize_phase
from bm4dpc.models.pipeline import Bm4dPcDenoiser
from bm4dpc.models.types import DwiDataset, NoiseMap, NoisePsd
from bm4dpc.utils.benchmark import run_benchmark, write_benchmark
from bm4dpc.utils.metrics import default_mask, evaluate
from bm4dpc.utils.preview import render_psd, render_slices

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


class ArgumentError(ValueError):
    """Raised instead of exiting when argparse rejects the command line"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgumentError(message)


def parse_shells(text: str) -> Tuple[Tuple[float, int], ...]:
    """'0:3,1000:15' -> ((0.0, 3), (1000.0, 15))"""
    shells = []
    for item in text.split(","):
        bval, sep, count = item.partition(":")
        if not sep:
            raise ValueError(f"Shell '{item}' is not of the form b:count")
        shells.append((float(bval), int(count)))
    return tuple(shells)


def parse_floats(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _mask_from(path: Optional[str]) -> Optional[np.ndarray]:
    if path is None:
        return None
    mask = read_nifti_array(path)
    if mask.ndim != 3:
        raise ValueError(f"{path}: a mask must be a 3D image")
    return np.abs(mask) > 0


class Bm4dPcCLI:
    """
    Command-line interface for BM4D-PC
    """
    def __init__(self):
        self.config = RuntimeConfig()
        self.parser = self.build_parser()

    def build_parser(self) -> argparse.ArgumentParser:
        parser = _Parser(prog="bm4dpc",
                         description="BM4D-PC - denoising of diffusion MRI with spatially varying colored noise")
        parser.add_argument("--threads", type=int, default=None,
                            help="Worker processes (default: $BM4DPC_THREADS or the CPU count)")
        parser.add_argument("--seed", type=int, default=0, help="Seed of every random draw")
        parser.add_argument("--verbose", action="store_true", help="Debug logging")
        subparsers = parser.add_subparsers(dest="command", help="Command to run")
        subparsers.required = True

        # Simulate command
        sim = subparsers.add_parser("simulate", help="Write an in-silico phantom with known noise")
        sim.add_argument("--out", required=True, help="Output directory")
        sim.add_argument("--size", type=int, nargs=3, default=[32, 32, 16], metavar=("M", "N", "O"))
        sim.add_argument("--shells", type=parse_shells, default=((0.0, 3), (1000.0, 15), (2000.0, 15)),
                         help="b:count[,b:count...]")
        sim.add_argument("--noise-level", type=float, default=0.05)
        sim.add_argument("--noise-type", choices=NOISE_KINDS, default="colored")
        sim.add_argument("--seed", dest="sim_seed", type=int, default=None, help="Overrides the global seed")

        # Denoise command
        den = subparsers.add_parser("denoise", help="Denoise a DWI series with BM4D-PC")
        self._add_input(den)
        den.add_argument("--out", required=True, help="Denoised NIfTI")
        den.add_argument("--noise-map", help="Known noise map (3D NIfTI)")
        den.add_argument("--psd", help="Known noise PSD (3D NIfTI)")
        den.add_argument("--profile", choices=Bm4dProfile.list_profiles(), default="np")
        den.add_argument("--save-noise-estimates", metavar="DIR",
                         help="Write sigma.nii, psd.nii, eigenvalues.txt and residual.nii to DIR")
        den.add_argument("--save-pcs", metavar="FILE", help="Write the normalized PC stack")
        den.add_argument("--progress", action="store_true", help="Show progress bars")

        # Estimate-noise command
        est = subparsers.add_parser("estimate-noise", help="Estimate the noise map and PSD only")
        self._add_input(est)
        est.add_argument("--out-map", required=True)
        est.add_argument("--out-psd", required=True)

        # Metrics command
        met = subparsers.add_parser("metrics", help="Per-shell PSNR / SSIM against a reference")
        met.add_argument("--ref", required=True)
        met.add_argument("--test", required=True)
        met.add_argument("--bval", required=True)
        met.add_argument("--bvec", help="Adds FA / MD RMSE")
        met.add_argument("--mask")
        met.add_argument("--out", required=True, help="JSON report, a CSV is written next to it")

        # DTI command
        dti = subparsers.add_parser("dti", help="FA and MD maps")
        dti.add_argument("--in", dest="input", required=True)
        dti.add_argument("--bval", required=True)
        dti.add_argument("--bvec", required=True)
        dti.add_argument("--mask")
        dti.add_argument("--max-bval", type=float, default=1000.0)
        dti.add_argument("--out-fa", required=True)
        dti.add_argument("--out-md", required=True)

        # Baseline command
        mp = subparsers.add_parser("baseline-mppca", help="Denoise with the MPPCA baseline")
        mp.add_argument("--in", dest="input", required=True)
        mp.add_argument("--bval", help="Kept with the output when given")
        mp.add_argument("--out", required=True)
        mp.add_argument("--kernel", type=int, default=5)
        mp.add_argument("--step", type=int, default=3)

        # Preview command
        pre = subparsers.add_parser("preview", help="Render a slice or a PSD to PNG")
        pre.add_argument("--in", dest="input", help="Noisy series or volume")
        pre.add_argument("--ref", help="Noise-free reference")
        pre.add_argument("--denoised", help="Denoised series, adds a residual panel")
        pre.add_argument("--psd", help="PSD to render instead of slices")
        pre.add_argument("--volume", type=int, default=0)
        pre.add_argument("--slice", type=int, default=None)
        pre.add_argument("--out", required=True)

        # Benchmark command
        ben = subparsers.add_parser("benchmark", help="Simulate, denoise and score at several noise levels")
        ben.add_argument("--out", required=True, help="JSON report, a CSV is written next to it")
        ben.add_argument("--levels", type=parse_floats, default=[0.01, 0.05, 0.10])
        ben.add_argument("--noise-types", type=lambda s: s.split(","), default=list(NOISE_KINDS))
        ben.add_argument("--size", type=int, nargs=3, default=[32, 32, 16], metavar=("M", "N", "O"))
        ben.add_argument("--profile", choices=Bm4dProfile.list_profiles(), default="np")
        return parser

    @staticmethod
    def _add_input(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--in", dest="input", required=True, help="4D NIfTI (complex64 or float32)")
        sub.add_argument("--bval", required=True)
        sub.add_argument("--bvec")
        sub.add_argument("--real-input", action="store_true",
                         help="Treat the data as already real (complex data keeps its real part)")

    @staticmethod
    def _resolve_input(dataset: DwiDataset, real_input: bool) -> Tuple[DwiDataset, bool]:
        # returns the dataset to process and whether phase stabilization is skipped
        if real_input and dataset.is_complex:
            logger.warning("--real-input given for complex data; using the real part")
            return dataset.with_data(np.real(dataset.data)), True
        if not dataset.is_complex:
            if not real_input:
                logger.warning("Input is real-valued; skipping phase stabilization")
            return dataset, True
        return dataset, False

    def _real_dataset(self, dataset: DwiDataset, real_input: bool) -> DwiDataset:
        dataset, skip = self._resolve_input(dataset, real_input)
        return dataset if skip else stabilize_phase(dataset, n_jobs=self.config.threads)

    def simulate(self, args) -> None:
        seed = self.config.seed if args.sim_seed is None else args.sim_seed
        spec = PhantomSpec(dims=tuple(args.size), shells=args.shells, seed=seed)
        data = simulate(spec, NoiseSpec(level=args.noise_level, kind=args.noise_type, seed=seed),
                        n_jobs=self.config.threads)
        os.makedirs(args.out, exist_ok=True)
        write_nifti(data.ground_truth, os.path.join(args.out, "gt.nii"))
        write_nifti(data.noisy, os.path.join(args.out, "noisy.nii"))
        write_nifti(data.noise_map, os.path.join(args.out, "sigma_true.nii"))
        write_nifti(data.psd, os.path.join(args.out, "psd_true.nii"))
        write_nifti(data.mask.astype(np.float32), os.path.join(args.out, "mask.nii"))
        write_bvals_bvecs(data.noisy.bvals, data.noisy.bvecs,
                          os.path.join(args.out, "bvals"), os.path.join(args.out, "bvecs"))
        logger.info(f"Simulated data written to {args.out}")

    def denoise(self, args) -> None:
        dataset, skip = self._resolve_input(load_dwi(args.input, args.bval, args.bvec), args.real_input)
        noise_map = NoiseMap(read_nifti_array(args.noise_map)) if args.noise_map else None
        psd = None
        if args.psd:
            psi = read_nifti_array(args.psd)
            psd = NoisePsd(psi, unit_variance=abs(float(np.mean(psi)) - 1.0) <= 1e-6)

        options = PipelineOptions(
            provided_noise_map=noise_map,
            provided_psd=psd,
            bm4d_profile=Bm4dProfile.from_name(args.profile),
            skip_phase_stabilization=skip,
            n_jobs=self.config.threads,
        )
        denoiser = Bm4dPcDenoiser(options, progress=args.progress)
        result = denoiser.denoise(dataset)
        write_nifti(result.denoised, args.out)

        if args.save_noise_estimates:
            folder = args.save_noise_estimates
            os.makedirs(folder, exist_ok=True)
            write_nifti(result.noise_map, os.path.join(folder, "sigma.nii"))
            write_nifti(result.psd, os.path.join(folder, "psd.nii"))
            np.savetxt(os.path.join(folder, "eigenvalues.txt"), denoiser.pc_stack.eigenvalues, fmt="%.10g")
            residual = denoiser.real_input.data - result.denoised.data
            write_nifti(residual, os.path.join(folder, "residual.nii"))
            logger.info(f"Noise estimates written to {folder}")
        if args.save_pcs:
            write_nifti(denoiser.pc_stack.pcs, args.save_pcs)

    def estimate_noise(self, args) -> None:
        dataset = self._real_dataset(load_dwi(args.input, args.bval, args.bvec), args.real_input)
        estimate = NoiseEstimator(NoiseEstParams(), n_jobs=self.config.threads).estimate(dataset)
        write_nifti(estimate.noise_map, args.out_map)
        write_nifti(estimate.psd, args.out_psd)

    def metrics(self, args) -> None:
        reference = load_dwi(args.ref, args.bval, args.bvec)
        test = load_dwi(args.test, args.bval, args.bvec)
        mask = _mask_from(args.mask)
        if mask is None:
            mask = default_mask(reference)
        report = evaluate(reference, test, mask, with_dti=args.bvec is not None, n_jobs=self.config.threads)
        report.write(args.out)

    def dti(self, args) -> None:
        dataset = load_dwi(args.input, args.bval, args.bvec)
        mask = _mask_from(args.mask)
        if mask is None:
            mask = default_mask(dataset)
        maps = fit_dti(dataset, mask, max_bval=args.max_bval)
        write_nifti(maps.fa, args.out_fa)
        write_nifti(maps.md, args.out_md)

    def baseline_mppca(self, args) -> None:
        data = read_nifti_array(args.input)
        if data.ndim != 4:
            raise ValueError(f"{args.input}: expected a 4D image, got shape {data.shape}")
        bvals = read_bvals_bvecs(args.bval)[0] if args.bval else np.zeros(data.shape[3])
        dataset = DwiDataset(data, bvals)
        write_nifti(mppca_denoise(dataset, args.kernel, args.step, n_jobs=self.config.threads), args.out)

    def preview(self, args) -> None:
        if args.psd:
            render_psd(read_nifti_array(args.psd), args.out)
            return
        if not args.input:
            raise ValueError("preview needs --in or --psd")

        def pick(path):
            data = read_nifti_array(path)
            if data.ndim == 3:
                return data
            if not 0 <= args.volume < data.shape[3]:
                raise ValueError(f"Volume {args.volume} is outside 0..{data.shape[3] - 1}")
            return data[..., args.volume]

        panels = []
        if args.ref:
            panels.append(("reference", pick(args.ref)))
        noisy = pick(args.input)
        panels.append(("input", noisy))
        if args.denoised:
            denoised = pick(args.denoised)
            panels.append(("denoised", denoised))
            panels.append(("residual", np.abs(noisy) - denoised if np.iscomplexobj(noisy) else noisy - denoised))
        render_slices(panels, args.out, args.slice)

    def benchmark(self, args) -> None:
        results = run_benchmark(PhantomSpec(dims=tuple(args.size), seed=self.config.seed),
                                levels=args.levels,
                                kinds=args.noise_types,
                                profile=Bm4dProfile.from_name(args.profile),
                                seed=self.config.seed,
                                n_jobs=self.config.threads)
        write_benchmark(results, args.out)

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        """
        Parse argv, run the command and return the process exit code
        """
        try:
            args = self.parser.parse_args(argv)
        except ArgumentError as e:
            print(f"bm4dpc: error: {e}", file=sys.stderr)
            return EXIT_USAGE

        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        handlers = {
            "simulate": self.simulate,
            "denoise": self.denoise,
            "estimate-noise": self.estimate_noise,
            "metrics": self.metrics,
            "dti": self.dti,
            "baseline-mppca": self.baseline_mppca,
            "preview": self.preview,
            "benchmark": self.benchmark,
        }
        try:
            self.config = RuntimeConfig.from_env(args.threads, seed=args.seed, verbose=args.verbose)
            handlers[args.command](args)
        # LinAlgError derives from ValueError, so it is caught first
        except (ArithmeticError, np.linalg.LinAlgError) as e:
            logger.error(f"{args.command} failed")
            print(f"bm4dpc: numerical failure: {e}", file=sys.stderr)
            return EXIT_NUMERICAL
        except ValueError as e:
            logger.error(f"{args.command} failed")
            print(f"bm4dpc: error: {e}", file=sys.stderr)
            return EXIT_USAGE
        except OSError as e:
            logger.error(f"{args.command} failed")
            print(f"bm4dpc: I/O error: {e}", file=sys.stderr)
            return EXIT_IO
        return EXIT_OK


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """Run one bm4dpc command, returning its exit code"""
    return Bm4dPcCLI().run(argv)
