"""Auxiliary guidance construction.

Two kinds of guidance accompany each degraded slice on its way into the
networks: a stack of neighboring axial slices (spatial context across the
volume) and the log-magnitude Fourier spectrum of the slice itself
(frequency-domain consistency). Both are additionally provided as
2^k-downsampled pyramids so they can be injected at every encoder
resolution and regressed against their high-quality counterparts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParameterError, ShapeError

__all__ = [
    "GuidanceConfig",
    "GuidanceBundle",
    "neighboring_slices",
    "spectrum",
    "build_pyramid",
    "make_guidance",
]

SPECTRUM_MODES = ("log_magnitude",)


@dataclass(frozen=True)
class GuidanceConfig:
    """Settings for guidance assembly.

    `n_neighbors` slices are taken symmetrically above and below the
    current slice; `pyramid_levels` must equal the number of encoder
    downsampling operations so every level has a matching injection site.
    """

    n_neighbors: int = 4
    pyramid_levels: int = 3
    spectrum_mode: str = "log_magnitude"

    def __post_init__(self):
        if self.n_neighbors <= 0 or self.n_neighbors % 2 != 0:
            raise ParameterError(f"n_neighbors={self.n_neighbors} must be even and positive")
        if self.pyramid_levels < 1:
            raise ParameterError(f"pyramid_levels={self.pyramid_levels} must be >= 1")
        if self.spectrum_mode not in SPECTRUM_MODES:
            raise ParameterError(f"unknown spectrum_mode {self.spectrum_mode!r}")


@dataclass(frozen=True)
class GuidanceBundle:
    """Assembled guidance for one slice: full-resolution stacks and their pyramids."""

    nas: np.ndarray  # [n_neighbors, H, W]
    spectrum: np.ndarray  # [1, H, W]
    nas_pyramid: tuple[np.ndarray, ...]
    spectrum_pyramid: tuple[np.ndarray, ...]

    def __post_init__(self):
        h, w = self.nas.shape[1:]
        for name, pyr in (("nas", self.nas_pyramid), ("spectrum", self.spectrum_pyramid)):
            for k, level in enumerate(pyr, start=1):
                expect = (h // 2**k, w // 2**k)
                if level.shape[1:] != expect:
                    raise ShapeError(
                        f"{name} pyramid level {k} has shape {level.shape[1:]}, expected {expect}"
                    )
                if not np.all(np.isfinite(level)):
                    raise DataError(f"non-finite values in {name} pyramid level {k}")
        if not (np.all(np.isfinite(self.nas)) and np.all(np.isfinite(self.spectrum))):
            raise DataError("non-finite values in guidance bundle")

    @property
    def levels(self) -> int:
        return len(self.nas_pyramid)


def neighboring_slices(volume: np.ndarray, z: int, n_neighbors: int) -> np.ndarray:
    """Extract the n nearest axial slices around z (excluding z itself).

    Offsets run {-n/2, ..., -1, +1, ..., +n/2} in ascending order;
    offsets falling outside the volume are replaced by the nearest valid
    slice (edge replication).
    """
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise ShapeError(f"volume must be 3-D [D,H,W], got shape {vol.shape}")
    if vol.size == 0:
        raise DataError("empty volume")
    depth = vol.shape[0]
    if not 0 <= z < depth:
        raise ParameterError(f"slice index z={z} outside 0..{depth - 1}")
    if n_neighbors <= 0 or n_neighbors % 2 != 0:
        raise ParameterError(f"n_neighbors={n_neighbors} must be even and positive")
    half = n_neighbors // 2
    offsets = [o for o in range(-half, half + 1) if o != 0]
    idx = np.clip([z + o for o in offsets], 0, depth - 1)
    return vol[idx]


def spectrum(slice2d: np.ndarray) -> np.ndarray:
    """Shifted log-magnitude Fourier spectrum of a slice, max-normalized to [0, 1].

    The zero-frequency bin is centered; magnitudes pass through
    log(1 + |.|) and are divided by the per-slice maximum (an all-zero
    slice maps to an all-zero spectrum). Phase is discarded.
    """
    arr = np.asarray(slice2d, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ShapeError(f"slice must be 2-D [H,W], got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("non-finite values in input slice")
    mag = np.log1p(np.abs(np.fft.fftshift(np.fft.fft2(arr))))
    peak = mag.max()
    if peak > 0.0:
        mag = mag / peak
    return mag[np.newaxis].astype(np.float32)


def build_pyramid(x: np.ndarray, levels: int) -> list[np.ndarray]:
    """Downsample [C,H,W] by factors 2^k, k = 1..levels, via average pooling."""
    arr = np.asarray(x)
    if arr.ndim != 3:
        raise ShapeError(f"expected [C,H,W], got shape {arr.shape}")
    if levels < 1:
        raise ParameterError(f"levels={levels} must be >= 1")
    c, h, w = arr.shape
    factor = 2**levels
    if h % factor != 0 or w % factor != 0:
        raise ShapeError(f"spatial size {h}x{w} not divisible by 2^{levels}")
    out = []
    cur = arr
    for _ in range(levels):
        ch, hh, ww = cur.shape
        cur = cur.reshape(ch, hh // 2, 2, ww // 2, 2).mean(axis=(2, 4))
        out.append(cur)
    return out


def make_guidance(volume: np.ndarray, z: int, cfg: GuidanceConfig) -> GuidanceBundle:
    """Assemble the full guidance bundle for slice z of a volume.

    Applied to the degraded volume this yields the network inputs; applied
    to the clean volume it yields the regression targets for the guidance
    loss.
    """
    nas = neighboring_slices(volume, z, cfg.n_neighbors).astype(np.float32)
    spec = spectrum(np.asarray(volume)[z])
    return GuidanceBundle(
        nas=nas,
        spectrum=spec,
        nas_pyramid=tuple(build_pyramid(nas, cfg.pyramid_levels)),
        spectrum_pyramid=tuple(build_pyramid(spec, cfg.pyramid_levels)),
    )
