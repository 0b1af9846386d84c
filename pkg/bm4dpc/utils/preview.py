"""
Preview figures of DWI slices, residuals and noise PSDs
"""
import logging
from typing import Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy import fft  # noqa: E402

logger = logging.getLogger(__name__)


def _slice(volume: np.ndarray, slice_index: Optional[int]) -> np.ndarray:
    volume = np.abs(volume) if np.iscomplexobj(volume) else np.asarray(volume)
    if volume.ndim != 3:
        raise ValueError(f"Expected a 3D volume, got shape {volume.shape}")
    index = volume.shape[2] // 2 if slice_index is None else int(slice_index)
    if not 0 <= index < volume.shape[2]:
        raise ValueError(f"Slice {index} is outside 0..{volume.shape[2] - 1}")
    return volume[:, :, index].T


def render_slices(panels: Sequence[Tuple[str, np.ndarray]],
                  output_path: str,
                  slice_index: Optional[int] = None,
                  dpi: int = 100) -> None:
    """
    Save one axial slice of every panel side by side

    Args:
        panels: (title, 3D volume) pairs; magnitudes are shown for complex volumes
        output_path: PNG path
        slice_index: slice to show, the middle one by default
        dpi: figure resolution
    """
    if not panels:
        raise ValueError("Nothing to render")
    images = [(title, _slice(volume, slice_index)) for title, volume in panels]
    # magnitude panels share one gray scale, residual panels get their own
    shared = [img for title, img in images if not title.startswith("residual")]
    vmax = max(float(img.max()) for img in shared) if shared else None

    fig, axes = plt.subplots(1, len(images), figsize=(3.2 * len(images), 3.4), dpi=dpi, squeeze=False)
    for ax, (title, img) in zip(axes[0], images):
        if title.startswith("residual"):
            limit = float(np.abs(img).max()) or 1.0
            shown = ax.imshow(img, cmap="RdBu_r", vmin=-limit, vmax=limit, origin="lower")
            fig.colorbar(shown, ax=ax, fraction=0.046)
        else:
            ax.imshow(img, cmap="gray", vmin=0.0, vmax=vmax, origin="lower")
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(output_path, dpi=dpi, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"Saved preview {output_path}")


def render_psd(psi: np.ndarray, output_path: str, slice_index: int = 0, dpi: int = 100) -> None:
    """Save the in-plane PSD (zero frequency centered, log scale) of one f_z plane"""
    psi = np.asarray(psi, dtype=float)
    if psi.ndim != 3:
        raise ValueError(f"Expected a 3D PSD, got shape {psi.shape}")
    plane = fft.fftshift(psi[:, :, slice_index]).T

    fig, ax = plt.subplots(figsize=(4.2, 3.6), dpi=dpi)
    shown = ax.imshow(np.log10(plane + 1e-6), cmap="viridis", origin="lower")
    fig.colorbar(shown, ax=ax, label="log10 psi")
    ax.set_title("noise PSD (f_x, f_y)")
    ax.set_xlabel("f_x")
    ax.set_ylabel("f_y")
    fig.tight_layout()
    fig.savefig(output_path, dpi=dpi, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"Saved PSD preview {output_path}")
