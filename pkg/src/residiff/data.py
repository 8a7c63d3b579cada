"""Synthetic data pipeline: phantoms, low-dose simulation, volume I/O.

Clinical volumes cannot be redistributed, so the toolkit trains and
verifies itself on synthetic phantoms: random smoothed ellipsoids with a
few small bright lesions. Low-dose acquisition is simulated in image
space by Poisson thinning of the expected counts followed by a mild
blur; a sinogram-domain simulation is deliberately out of scope.

Volumes are stored as `.pvol` files: one JSON header line followed by
raw little-endian float32 voxels in z-major order, trivially parseable
from any language. A dataset directory holds paired volumes per subject
plus a manifest assigning subjects to train/eval splits (splitting is
always by subject, never by slice).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .errors import DataError, FormatError, ParameterError, ShapeError
from .guidance import GuidanceBundle, GuidanceConfig, make_guidance
from .losses import NegativeSet
from .seeding import derive_seed, numpy_rng

__all__ = [
    "VolumeMeta",
    "PairedVolume",
    "SliceSample",
    "ConditionInput",
    "Batch",
    "NormalizeParams",
    "generate_phantom",
    "simulate_lpet",
    "save_volume",
    "load_volume",
    "normalize",
    "denormalize",
    "generate_dataset",
    "load_manifest",
    "SliceDataset",
    "build_negative_set",
    "collate",
    "make_condition",
]

logger = logging.getLogger(__name__)

PVOL_FORMAT = "pvol-v1"
MANIFEST_FORMAT = "manifest-v1"
MANIFEST_NAME = "manifest.json"
DEFAULT_COUNT_SCALE = 1e4  # expected counts at unit intensity, full dose
DEFAULT_VOXEL_MM = (2.0, 2.0, 2.0)


@dataclass(frozen=True)
class VolumeMeta:
    subject_id: str
    voxel_size_mm: tuple[float, float, float] = DEFAULT_VOXEL_MM
    drf: float = 1.0
    kind: str = "spet"

    def __post_init__(self):
        if self.drf < 1.0:
            raise ParameterError(f"drf={self.drf} must be >= 1")
        if len(self.voxel_size_mm) != 3:
            raise ParameterError("voxel_size_mm must have three components")


@dataclass
class PairedVolume:
    """Co-registered clean/degraded volumes for one subject."""

    spet: np.ndarray
    lpet: np.ndarray
    subject_id: str
    voxel_size_mm: tuple[float, float, float] = DEFAULT_VOXEL_MM
    drf: float = 100.0

    def __post_init__(self):
        if self.spet.shape != self.lpet.shape or self.spet.ndim != 3:
            raise ShapeError(
                f"paired volumes must share a 3-D shape, got {self.spet.shape} "
                f"and {self.lpet.shape}"
            )
        if self.drf < 1.0:
            raise ParameterError(f"drf={self.drf} must be >= 1")
        for name, vol in (("spet", self.spet), ("lpet", self.lpet)):
            if not np.all(np.isfinite(vol)):
                raise DataError(f"non-finite values in {name} volume of {self.subject_id}")
            if vol.min() < 0.0 or vol.max() > 1.0:
                raise DataError(f"{name} volume of {self.subject_id} outside [0, 1]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.spet.shape)


def generate_phantom(
    rng: np.random.Generator,
    size: tuple[int, int, int] = (64, 64, 64),
    divisor: int = 8,
) -> np.ndarray:
    """Render a random smoothed-ellipsoid phantom in [0, 1].

    3..8 axis-aligned ellipsoids of intensity in [0.2, 1.0] are painted
    over a 0.02 background, then 1..3 small bright lesion spheres
    (intensity >= 0.8) on top; a light Gaussian smooths the result.
    Deterministic given the generator state.
    """
    if len(size) != 3 or any(s < divisor for s in size):
        raise ParameterError(f"size {size} must be three dims >= {divisor}")
    if any(s % divisor for s in size):
        raise ParameterError(f"size {size} must be divisible by {divisor}")
    d, h, w = size
    vol = np.full(size, 0.02, dtype=np.float64)
    zz, yy, xx = np.meshgrid(
        np.linspace(-1.0, 1.0, d),
        np.linspace(-1.0, 1.0, h),
        np.linspace(-1.0, 1.0, w),
        indexing="ij",
    )
    for _ in range(int(rng.integers(3, 9))):
        center = rng.uniform(-0.5, 0.5, size=3)
        semi = rng.uniform(0.15, 0.45, size=3)
        intensity = rng.uniform(0.2, 1.0)
        inside = (
            ((zz - center[0]) / semi[0]) ** 2
            + ((yy - center[1]) / semi[1]) ** 2
            + ((xx - center[2]) / semi[2]) ** 2
        ) <= 1.0
        vol[inside] = intensity
    # lesions painted last so they stay bright
    voxel_extent = 2.0 / min(size)
    for _ in range(int(rng.integers(1, 4))):
        center = rng.uniform(-0.6, 0.6, size=3)
        radius = rng.uniform(2.5, 5.0) * voxel_extent
        intensity = rng.uniform(0.8, 1.0)
        inside = (
            (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
        ) <= radius**2
        vol[inside] = intensity
    # light smoothing only: sharp anatomy keeps the degradation blur informative
    vol = gaussian_filter(vol, sigma=0.5)
    return np.clip(vol, 0.0, 1.0).astype(np.float32)


def simulate_lpet(
    spet: np.ndarray,
    drf: float,
    rng: np.random.Generator,
    count_scale: float = DEFAULT_COUNT_SCALE,
    blur_sigma: float = 1.0,
) -> np.ndarray:
    """Simulate a low-dose acquisition by Poisson thinning in image space.

    Intensities scale to expected counts `count_scale * spet / drf`,
    independent Poisson counts are drawn per voxel and rescaled back,
    then a mild blur (sigma voxels; 0 disables) and a clip to [0, 1].
    """
    spet = np.asarray(spet, dtype=np.float64)
    if spet.min() < 0.0 or spet.max() > 1.0:
        raise DataError("clean volume must lie in [0, 1]")
    if drf < 1.0:
        raise ParameterError(f"drf={drf} must be >= 1")
    if count_scale <= 0.0:
        raise ParameterError(f"count_scale={count_scale} must be positive")
    counts = rng.poisson(count_scale * spet / drf)
    low = counts.astype(np.float64) * (drf / count_scale)
    if blur_sigma > 0.0:
        low = gaussian_filter(low, sigma=blur_sigma)
    return np.clip(low, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# .pvol volume files


def _meta_to_header(shape: tuple[int, ...], meta: VolumeMeta) -> dict:
    return {
        "format": PVOL_FORMAT,
        "shape": list(shape),
        "dtype": "float32",
        "byteorder": "little",
        "axis_order": "zyx",
        "subject_id": meta.subject_id,
        "voxel_size_mm": list(meta.voxel_size_mm),
        "drf": meta.drf,
        "kind": meta.kind,
    }


def save_volume(path: str | Path, volume: np.ndarray, meta: VolumeMeta) -> Path:
    """Write a volume with its metadata; the round trip is bit-exact."""
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise ShapeError(f"expected a 3-D volume, got shape {vol.shape}")
    path = Path(path)
    header = json.dumps(_meta_to_header(vol.shape, meta)) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(np.ascontiguousarray(vol, dtype="<f4").tobytes())
    return path


def load_volume(path: str | Path) -> tuple[np.ndarray, VolumeMeta]:
    """Read a `.pvol` file back into (volume, metadata)."""
    path = Path(path)
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from exc
    if header.get("format") != PVOL_FORMAT:
        raise FormatError(f"{path}: unknown format {header.get('format')!r}")
    for key in ("shape", "dtype", "byteorder", "subject_id", "voxel_size_mm", "drf"):
        if key not in header:
            raise FormatError(f"{path}: header missing {key!r}")
    if header["dtype"] != "float32" or header["byteorder"] != "little":
        raise FormatError(f"{path}: unsupported payload encoding")
    shape = tuple(int(s) for s in header["shape"])
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload size mismatch, expected {expected} bytes, got {len(payload)}"
        )
    volume = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if not np.all(np.isfinite(volume)):
        raise DataError(f"{path}: non-finite voxels")
    meta = VolumeMeta(
        subject_id=str(header["subject_id"]),
        voxel_size_mm=tuple(float(v) for v in header["voxel_size_mm"]),
        drf=float(header["drf"]),
        kind=str(header.get("kind", "spet")),
    )
    return volume, meta


# ---------------------------------------------------------------------------
# normalization between [0, 1] storage space and [-1, 1] model space

NORMALIZE_MODES = ("unit_range_to_signed",)


@dataclass(frozen=True)
class NormalizeParams:
    """Inverse transform: x_original = x_normalized * scale + offset."""

    scale: float
    offset: float

    def inverse(self, x):
        return x * self.scale + self.offset


def normalize(volume: np.ndarray, mode: str = "unit_range_to_signed"):
    """Map [0, 1] data to the [-1, 1] model space; returns the inverse params."""
    if mode not in NORMALIZE_MODES:
        raise ParameterError(f"unknown normalize mode {mode!r}")
    vol = np.asarray(volume)
    if vol.size and (vol.min() < 0.0 or vol.max() > 1.0):
        raise DataError(
            f"normalize expects input in [0, 1], got [{vol.min():.4g}, {vol.max():.4g}]"
        )
    return vol * 2.0 - 1.0, NormalizeParams(scale=0.5, offset=0.5)


def denormalize(volume, params: NormalizeParams):
    return params.inverse(volume)


# ---------------------------------------------------------------------------
# dataset generation and access


def _subject_paths(out_dir: Path, sid: str) -> tuple[str, str]:
    return f"{sid}_spet.pvol", f"{sid}_lpet.pvol"


def generate_dataset(
    out_dir: str | Path,
    n_subjects: int,
    size: tuple[int, int, int],
    drf: float,
    seed: int,
    count_scale: float = DEFAULT_COUNT_SCALE,
    eval_fraction: float = 0.2,
    voxel_size_mm: tuple[float, float, float] = DEFAULT_VOXEL_MM,
    force: bool = False,
) -> dict:
    """Generate paired phantom volumes plus a manifest with split assignments.

    Per-subject seeds are derived from the master seed, so regenerating
    with the same flags is byte-identical regardless of order.
    """
    if n_subjects < 1:
        raise ParameterError("n_subjects must be >= 1")
    if not 0.0 <= eval_fraction < 1.0:
        raise ParameterError(f"eval_fraction={eval_fraction} outside [0, 1)")
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise DataError(f"{out_dir} exists and is not empty; pass force to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)

    n_eval = int(round(n_subjects * eval_fraction))
    subjects = []
    for i in range(n_subjects):
        sid = f"subj-{i:03d}"
        phantom = generate_phantom(numpy_rng(derive_seed(seed, "phantom", sid)), tuple(size))
        low = simulate_lpet(
            phantom, drf, numpy_rng(derive_seed(seed, "lpet", sid)), count_scale
        )
        spet_name, lpet_name = _subject_paths(out_dir, sid)
        save_volume(
            out_dir / spet_name,
            phantom,
            VolumeMeta(sid, tuple(voxel_size_mm), drf=1.0, kind="spet"),
        )
        save_volume(
            out_dir / lpet_name,
            low,
            VolumeMeta(sid, tuple(voxel_size_mm), drf=float(drf), kind="lpet"),
        )
        split = "eval" if i >= n_subjects - n_eval else "train"
        subjects.append({"id": sid, "split": split, "spet": spet_name, "lpet": lpet_name})

    manifest = {
        "format": MANIFEST_FORMAT,
        "seed": int(seed),
        "drf": float(drf),
        "count_scale": float(count_scale),
        "size": list(size),
        "voxel_size_mm": list(voxel_size_mm),
        "subjects": subjects,
    }
    with open(out_dir / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    logger.info("generated %d subjects in %s", n_subjects, out_dir)
    return manifest


def load_manifest(root: str | Path) -> dict:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"no {MANIFEST_NAME} in {root}")
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path}: unknown manifest format {manifest.get('format')!r}")
    return manifest


@dataclass(frozen=True)
class SliceSample:
    """One training example: paired slices plus both guidance bundles."""

    lpet: np.ndarray  # [1, H, W]
    spet: np.ndarray  # [1, H, W]
    guidance: GuidanceBundle  # built from the degraded volume
    guidance_target: GuidanceBundle  # built from the clean volume
    subject_id: str
    z: int


class SliceDataset:
    """Random-access slice sampler over a generated dataset split."""

    def __init__(self, root: str | Path, split: str, guidance_cfg: GuidanceConfig):
        self.root = Path(root)
        self.guidance_cfg = guidance_cfg
        manifest = load_manifest(self.root)
        self.drf = float(manifest["drf"])
        entries = [s for s in manifest["subjects"] if s["split"] == split]
        if not entries:
            raise DataError(f"no subjects with split {split!r} in {root}")
        self.volumes: dict[str, PairedVolume] = {}
        for entry in entries:
            spet, _ = load_volume(self.root / entry["spet"])
            lpet, meta = load_volume(self.root / entry["lpet"])
            self.volumes[entry["id"]] = PairedVolume(
                spet=spet,
                lpet=lpet,
                subject_id=entry["id"],
                voxel_size_mm=meta.voxel_size_mm,
                drf=meta.drf,
            )
        self.subjects = [e["id"] for e in entries]
        self.depth = self.volumes[self.subjects[0]].shape[0]

    def __len__(self) -> int:
        return len(self.subjects) * self.depth

    def sample(self, subject_id: str, z: int) -> SliceSample:
        pair = self.volumes[subject_id]
        return SliceSample(
            lpet=pair.lpet[z][np.newaxis],
            spet=pair.spet[z][np.newaxis],
            guidance=make_guidance(pair.lpet, z, self.guidance_cfg),
            guidance_target=make_guidance(pair.spet, z, self.guidance_cfg),
            subject_id=subject_id,
            z=z,
        )

    def random_batch(self, batch_size: int, rng: np.random.Generator) -> list[SliceSample]:
        out = []
        for _ in range(batch_size):
            sid = self.subjects[int(rng.integers(0, len(self.subjects)))]
            z = int(rng.integers(0, self.depth))
            out.append(self.sample(sid, z))
        return out


def build_negative_set(
    dataset: SliceDataset,
    batch_subjects: set[str],
    n: int,
    rng: np.random.Generator,
) -> NegativeSet:
    """Draw n clean slices from n distinct subjects outside the batch."""
    candidates = [sid for sid in dataset.subjects if sid not in batch_subjects]
    if len(candidates) < n:
        raise DataError(
            f"only {len(candidates)} subjects outside the batch but {n} negatives "
            "requested; lower the negative-set size"
        )
    chosen = [candidates[int(i)] for i in rng.choice(len(candidates), size=n, replace=False)]
    slices = []
    for sid in chosen:
        z = int(rng.integers(0, dataset.depth))
        slices.append(dataset.volumes[sid].spet[z][np.newaxis])
    return NegativeSet(
        slices=torch.from_numpy(np.stack(slices).astype(np.float32)),
        subject_ids=tuple(chosen),
    )


# ---------------------------------------------------------------------------
# model-side assembly (torch tensors in [-1, 1])


@dataclass
class ConditionInput:
    """Everything the networks see about one (batch of) degraded slice(s).

    `channels` stacks the degraded slice with the enabled guidance
    channels; `aux_pyramid` carries the per-level guidance stacks for
    guided injection (None when guidance is disabled).
    """

    channels: torch.Tensor  # [B, C, H, W]
    aux_pyramid: list[torch.Tensor] | None  # per level: [B, C_aux, H/2^k, W/2^k]


@dataclass
class Batch:
    cond: ConditionInput
    target: torch.Tensor  # [B, 1, H, W]
    target_aux_pyramid: list[torch.Tensor] | None
    subject_ids: tuple[str, ...]


def _to_signed(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float32)) * 2.0 - 1.0


def _bundle_channels(
    lpet: np.ndarray, bundle: GuidanceBundle, include_nas: bool, include_spectrum: bool
) -> torch.Tensor:
    parts = [lpet]
    if include_nas:
        parts.append(bundle.nas)
    if include_spectrum:
        parts.append(bundle.spectrum)
    return _to_signed(np.concatenate(parts, axis=0))


def _bundle_pyramid(
    bundle: GuidanceBundle, include_nas: bool, include_spectrum: bool
) -> list[torch.Tensor] | None:
    if not (include_nas or include_spectrum):
        return None
    levels = []
    for k in range(bundle.levels):
        parts = []
        if include_nas:
            parts.append(bundle.nas_pyramid[k])
        if include_spectrum:
            parts.append(bundle.spectrum_pyramid[k])
        levels.append(_to_signed(np.concatenate(parts, axis=0)))
    return levels


def make_condition(
    lpet: np.ndarray,
    bundle: GuidanceBundle,
    include_nas: bool = True,
    include_spectrum: bool = True,
) -> ConditionInput:
    """Build a batch-of-one condition from a degraded slice and its guidance."""
    channels = _bundle_channels(lpet, bundle, include_nas, include_spectrum).unsqueeze(0)
    pyramid = _bundle_pyramid(bundle, include_nas, include_spectrum)
    if pyramid is not None:
        pyramid = [level.unsqueeze(0) for level in pyramid]
    return ConditionInput(channels=channels, aux_pyramid=pyramid)


def collate(
    samples: list[SliceSample],
    include_nas: bool = True,
    include_spectrum: bool = True,
) -> Batch:
    """Stack slice samples into normalized training tensors."""
    if not samples:
        raise DataError("empty batch")
    channels = torch.stack(
        [_bundle_channels(s.lpet, s.guidance, include_nas, include_spectrum) for s in samples]
    )
    target = torch.stack([_to_signed(s.spet) for s in samples])
    aux_pyramid = None
    target_pyramid = None
    if include_nas or include_spectrum:
        per_sample = [
            _bundle_pyramid(s.guidance, include_nas, include_spectrum) for s in samples
        ]
        per_target = [
            _bundle_pyramid(s.guidance_target, include_nas, include_spectrum) for s in samples
        ]
        levels = len(per_sample[0])
        aux_pyramid = [
            torch.stack([p[k] for p in per_sample]) for k in range(levels)
        ]
        target_pyramid = [
            torch.stack([p[k] for p in per_target]) for k in range(levels)
        ]
    return Batch(
        cond=ConditionInput(channels=channels, aux_pyramid=aux_pyramid),
        target=target,
        target_aux_pyramid=target_pyramid,
        subject_ids=tuple(s.subject_id for s in samples),
    )
