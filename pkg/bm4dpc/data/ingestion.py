"""
Data ingestion for BM4D-PC: NIfTI-1 volumes and FSL b-value / b-vector tables
"""
import os
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import nibabel as nib
import numpy as np

from bm4dpc.models.types import DwiDataset, NoiseMap, NoisePsd, Volume3

logger = logging.getLogger(__name__)

NIFTI_HEADER_SIZE = 348
NIFTI_VOX_OFFSET = 352
NIFTI_MAGIC = b"n+1"
# NIfTI-1 datatype codes
DT_FLOAT32 = 16
DT_COMPLEX64 = 32
_SUPPORTED_DATATYPES = {DT_FLOAT32: np.float32, DT_COMPLEX64: np.complex64}

Writable = Union[Volume3, DwiDataset, NoiseMap, NoisePsd, np.ndarray]


class NiftiFormatError(OSError):
    """The file is not a NIfTI-1 image this toolkit can read"""


class BadMagicError(NiftiFormatError):
    """The header does not carry the single-file magic 'n+1'"""


class UnsupportedDatatypeError(NiftiFormatError):
    """The payload type is neither float32 nor complex64"""


class TruncatedPayloadError(NiftiFormatError):
    """The file ends before the header-declared payload does"""


@dataclass(frozen=True)
class ShellTable:
    """
    b-value shells: centers sorted ascending and the volume indices of each

    Args:
        centers: mean b-value of every shell
        members: volume indices belonging to each shell
        tolerance: clustering tolerance in s/mm^2
    """
    centers: Tuple[float, ...]
    members: Tuple[Tuple[int, ...], ...]
    tolerance: float

    def __len__(self) -> int:
        return len(self.centers)

    def highest(self) -> Tuple[float, Tuple[int, ...]]:
        """Center and members of the shell with the largest b-value"""
        return self.centers[-1], self.members[-1]


def _read_header(path: str) -> nib.Nifti1Header:
    if not os.path.exists(path):
        raise FileNotFoundError(f"NIfTI file not found: {path}")

    with open(path, "rb") as fileobj:
        block = fileobj.read(NIFTI_HEADER_SIZE)
    if len(block) < NIFTI_HEADER_SIZE:
        raise TruncatedPayloadError(f"{path}: header is only {len(block)} bytes long")

    sizeof_hdr = int(np.frombuffer(block[:4], dtype="<i4")[0])
    if sizeof_hdr != NIFTI_HEADER_SIZE:
        raise NiftiFormatError(
            f"{path}: sizeof_hdr is {sizeof_hdr} in little-endian order, expected {NIFTI_HEADER_SIZE}"
        )

    header = nib.Nifti1Header(binaryblock=block, endianness="<", check=False)
    magic = bytes(header["magic"]).rstrip(b"\x00")
    if magic != NIFTI_MAGIC:
        raise BadMagicError(f"{path}: magic is {magic!r}, expected {NIFTI_MAGIC!r}")

    datatype = int(header["datatype"])
    if datatype not in _SUPPORTED_DATATYPES:
        raise UnsupportedDatatypeError(f"{path}: datatype code {datatype} is not float32 or complex64")

    ndim = int(header["dim"][0])
    if ndim not in (3, 4):
        raise NiftiFormatError(f"{path}: only 3D and 4D images are supported, got {ndim} dimensions")
    return header


def read_nifti_array(path: str) -> np.ndarray:
    """
    Read the samples of a NIfTI-1 file as float64 or complex128

    Args:
        path: path to a single-file little-endian .nii

    Returns:
        Array of shape (m, n, o) or (m, n, o, N), first axis fastest on disk
    """
    header = _read_header(path)
    ndim = int(header["dim"][0])
    shape = tuple(int(d) for d in header["dim"][1:ndim + 1])
    itemsize = np.dtype(_SUPPORTED_DATATYPES[int(header["datatype"])]).itemsize
    vox_offset = int(header["vox_offset"])
    expected = vox_offset + int(np.prod(shape)) * itemsize
    actual = os.path.getsize(path)
    if actual < expected:
        raise TruncatedPayloadError(f"{path}: payload needs {expected} bytes, file has {actual}")

    image = nib.load(path)
    # dataobj applies scl_slope / scl_inter whenever the slope is set and nonzero
    data = np.asanyarray(image.dataobj)
    if np.iscomplexobj(data):
        data = data.astype(np.complex128)
    else:
        data = data.astype(np.float64)
    logger.debug(f"Read {path}: shape {data.shape}, dtype {data.dtype}")
    return data


def read_nifti(path: str,
               bvals: Optional[np.ndarray] = None,
               bvecs: Optional[np.ndarray] = None) -> Union[Volume3, DwiDataset]:
    """
    Read a NIfTI-1 file as a Volume3 (3D) or a DwiDataset (4D)

    Args:
        path: path to the .nii file
        bvals: b-values to attach to a 4D image (zeros when omitted)
        bvecs: optional gradient directions to attach

    Returns:
        Volume3 or DwiDataset
    """
    data = read_nifti_array(path)
    if data.ndim == 3:
        return Volume3(data)
    if bvals is None:
        logger.debug(f"{path}: no b-values given, attaching zeros")
        bvals = np.zeros(data.shape[3])
    return attach_gradients(data, bvals, bvecs)


def write_nifti(data: Writable, path: str) -> None:
    """
    Write samples as NIfTI-1 (.nii, magic n+1, vox_offset 352, little-endian)

    Real samples are stored as float32, complex samples as complex64.
    """
    if isinstance(data, Volume3):
        array = data.samples
    elif isinstance(data, DwiDataset):
        array = data.data
    elif isinstance(data, NoiseMap):
        array = data.sigma
    elif isinstance(data, NoisePsd):
        array = data.psi
    else:
        array = np.asarray(data)
    if array.ndim not in (3, 4):
        raise ValueError(f"Only 3D and 4D arrays can be written, got shape {array.shape}")

    dtype = np.complex64 if np.iscomplexobj(array) else np.float32
    array = np.asarray(array, dtype=dtype)

    header = nib.Nifti1Header(endianness="<")
    header.set_data_dtype(dtype)
    image = nib.Nifti1Image(array, np.eye(4), header=header)
    image.header["vox_offset"] = NIFTI_VOX_OFFSET
    nib.save(image, path)
    logger.debug(f"Wrote {path}: shape {array.shape}, dtype {np.dtype(dtype).name}")


def read_bvals_bvecs(bval_path: str,
                     bvec_path: Optional[str] = None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Parse FSL-style b-value and b-vector text files

    Args:
        bval_path: one whitespace-separated row of b-values
        bvec_path: three rows holding the x, y and z components

    Returns:
        (bvals, bvecs) with bvecs of shape (N, 3), or None without bvec_path
    """
    for candidate in (bval_path, bvec_path):
        if candidate is not None and not os.path.exists(candidate):
            raise FileNotFoundError(f"Gradient table not found: {candidate}")

    try:
        bvals = np.loadtxt(bval_path, dtype=float, ndmin=1).reshape(-1)
    except ValueError as e:
        raise ValueError(f"{bval_path}: non-numeric token ({e})")
    if bvec_path is None:
        return bvals, None

    try:
        rows = np.loadtxt(bvec_path, dtype=float, ndmin=2)
    except ValueError as e:
        raise ValueError(f"{bvec_path}: non-numeric token or ragged rows ({e})")
    if rows.shape[0] != 3:
        raise ValueError(f"{bvec_path}: expected 3 rows of direction components, got {rows.shape[0]}")
    if rows.shape[1] != bvals.size:
        raise ValueError(f"{bvec_path}: {rows.shape[1]} directions for {bvals.size} b-values")

    bvecs = rows.T.copy()
    norms = np.linalg.norm(bvecs, axis=1)
    valid = norms > 1e-8
    bvecs[valid] /= norms[valid, np.newaxis]
    bvecs[~valid] = 0.0
    return bvals, bvecs


def write_bvals_bvecs(bvals: np.ndarray,
                      bvecs: Optional[np.ndarray],
                      bval_path: str,
                      bvec_path: Optional[str] = None) -> None:
    """Write FSL-style gradient tables"""
    np.savetxt(bval_path, np.asarray(bvals, dtype=float)[np.newaxis, :], fmt="%g")
    if bvecs is not None and bvec_path is not None:
        np.savetxt(bvec_path, np.asarray(bvecs, dtype=float).T, fmt="%.8f")


def attach_gradients(data: np.ndarray,
                     bvals: np.ndarray,
                     bvecs: Optional[np.ndarray] = None) -> DwiDataset:
    """Wrap a 4D array with its gradient table, checking the volume count"""
    n_volumes = data.shape[3]
    if len(bvals) != n_volumes:
        raise ValueError(f"{len(bvals)} b-values for a dataset of {n_volumes} volumes")
    if bvecs is not None and len(bvecs) != n_volumes:
        raise ValueError(f"{len(bvecs)} b-vectors for a dataset of {n_volumes} volumes")
    return DwiDataset(data, bvals, bvecs)


def load_dwi(nifti_path: str, bval_path: str, bvec_path: Optional[str] = None) -> DwiDataset:
    """
    Load a 4D DWI series together with its gradient table
    """
    bvals, bvecs = read_bvals_bvecs(bval_path, bvec_path)
    data = read_nifti_array(nifti_path)
    if data.ndim != 4:
        raise ValueError(f"{nifti_path}: expected a 4D image, got shape {data.shape}")
    dataset = attach_gradients(data, bvals, bvecs)
    logger.info(f"Loaded {dataset.n_volumes} volumes of size {dataset.dims} from {nifti_path}")
    return dataset


def group_shells(bvals: np.ndarray, tolerance: float = 50.0) -> ShellTable:
    """
    Cluster b-values into shells

    Values are visited in ascending order; a value more than tolerance above
    the running mean of the current shell opens a new shell.

    Args:
        bvals: b-values, one per volume
        tolerance: shell tolerance in s/mm^2

    Returns:
        ShellTable sorted by center
    """
    if tolerance < 0:
        raise ValueError(f"Shell tolerance must be nonnegative, got {tolerance}")
    bvals = np.asarray(bvals, dtype=float).reshape(-1)
    order = np.argsort(bvals, kind="stable")

    centers: List[float] = []
    members: List[List[int]] = []
    for index in order:
        value = bvals[index]
        if not members or value > centers[-1] + tolerance:
            centers.append(float(value))
            members.append([int(index)])
        else:
            members[-1].append(int(index))
            centers[-1] = float(np.mean(bvals[members[-1]]))

    return ShellTable(
        centers=tuple(centers),
        members=tuple(tuple(sorted(m)) for m in members),
        tolerance=float(tolerance),
    )
