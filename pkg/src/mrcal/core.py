"""Dense 2D array containers, mask types, dataset manifests and the MRC1 on-disk format.

The MRC1 container is a tiny little-endian binary layout used for every array
this package writes to disk:

    bytes 0-3   ASCII magic "MRC1"
    byte  4     dtype code: 0 = u8, 1 = f32 (IEEE-754 little-endian)
    byte  5     ndim (1-3)
    bytes 6-7   reserved, zero
    then        ndim x u32 little-endian dims, slowest-varying first
    then        row-major payload

u8 files loaded as probabilities are rescaled by value/255 (never reinterpreted
bitwise).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MRC1"
DTYPE_U8 = 0
DTYPE_F32 = 1

_NUMPY_DTYPES = {DTYPE_U8: np.dtype("<u1"), DTYPE_F32: np.dtype("<f4")}
_MAX_ELEMENTS = 2 ** 32


class ContainerError(Exception):
    """Base class for MRC1 container failures."""


class BadMagic(ContainerError):
    pass


class UnsupportedDtype(ContainerError):
    pass


class TruncatedPayload(ContainerError):
    pass


class DimOverflow(ContainerError):
    pass


class DatasetError(Exception):
    """Base class for manifest / dataset loading failures."""


class ManifestParseError(DatasetError):
    pass


class MissingFile(DatasetError):
    pass


class DimensionMismatch(DatasetError):
    pass


class RaterCountMismatch(DatasetError):
    pass


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    if out is arr:
        out = arr.copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Grid2D:
    """A dense row-major 2D array. Immutable after construction."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValueError(f"Grid2D requires a 2D array, got ndim={self.data.ndim}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"Grid2D dims must be positive, got {self.data.shape}")
        object.__setattr__(self, "data", _freeze(self.data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class BinaryMask:
    """A {0,1}-valued Grid2D."""

    grid: Grid2D

    def __post_init__(self):
        vals = self.grid.data
        if not np.isin(vals, (0, 1)).all():
            raise ValueError("BinaryMask values must all be 0 or 1")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "BinaryMask":
        return cls(Grid2D(np.asarray(arr, dtype=np.uint8)))

    @property
    def data(self) -> np.ndarray:
        return self.grid.data

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


@dataclass(frozen=True)
class RaterStack:
    """K binary masks for one image, all with identical dimensions."""

    raters: tuple[BinaryMask, ...]

    def __post_init__(self):
        if len(self.raters) < 1:
            raise ValueError("RaterStack requires at least one rater")
        shape = self.raters[0].shape
        for i, m in enumerate(self.raters):
            if m.shape != shape:
                raise DimensionMismatch(
                    f"rater {i} has shape {m.shape}, expected {shape}"
                )
        object.__setattr__(self, "raters", tuple(self.raters))

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "RaterStack":
        """Build from a (K, H, W) array of {0,1} values."""
        arr = np.asarray(arr)
        return cls(tuple(BinaryMask.from_array(arr[r]) for r in range(arr.shape[0])))

    @property
    def num_raters(self) -> int:
        return len(self.raters)

    @property
    def shape(self) -> tuple[int, int]:
        return self.raters[0].shape

    def as_array(self) -> np.ndarray:
        """Stacked (K, H, W) uint8 view of all rater masks."""
        return np.stack([m.data for m in self.raters])


@dataclass(frozen=True)
class ForegroundProbMap:
    """Per-voxel foreground probabilities in [0,1]."""

    grid: Grid2D

    def __post_init__(self):
        vals = self.grid.data
        if vals.min() < 0.0 or vals.max() > 1.0:
            raise ValueError("ForegroundProbMap values must lie in [0,1]")

    @classmethod
    def from_array(cls, arr: np.ndarray, clamp_tol: float = 1e-6) -> "ForegroundProbMap":
        """Build from floats; excursions up to clamp_tol outside [0,1] are clamped."""
        arr = np.asarray(arr, dtype=np.float64)
        if arr.min() < -clamp_tol or arr.max() > 1.0 + clamp_tol:
            raise ValueError(
                f"probabilities outside [-{clamp_tol}, 1+{clamp_tol}]: "
                f"min={arr.min()}, max={arr.max()}"
            )
        return cls(Grid2D(np.clip(arr, 0.0, 1.0)))

    @property
    def data(self) -> np.ndarray:
        return self.grid.data

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


@dataclass(frozen=True)
class Sample:
    """One image with its K rater annotations."""

    id: str
    image: Grid2D
    annotations: RaterStack

    def __post_init__(self):
        if self.image.shape != self.annotations.shape:
            raise DimensionMismatch(
                f"sample {self.id!r}: image {self.image.shape} vs "
                f"annotations {self.annotations.shape}"
            )


SPLITS = ("train", "val", "test")


@dataclass
class ManifestEntry:
    id: str
    image_path: str
    rater_paths: list[str]
    split: str


@dataclass
class DatasetManifest:
    version: str
    num_raters: int
    samples: list[ManifestEntry] = field(default_factory=list)


def write_container(dtype: int, dims, payload, path) -> None:
    """Write an array to disk in MRC1 layout (see module docstring)."""
    if dtype not in _NUMPY_DTYPES:
        raise UnsupportedDtype(f"dtype code {dtype}")
    dims = tuple(int(d) for d in dims)
    if not 1 <= len(dims) <= 3:
        raise ContainerError(f"ndim must be 1-3, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise ContainerError(f"all dims must be >= 1, got {dims}")
    n = int(np.prod(dims, dtype=np.int64))
    if n > _MAX_ELEMENTS:
        raise DimOverflow(f"{n} elements exceeds 2^32")
    arr = np.ascontiguousarray(np.asarray(payload), dtype=_NUMPY_DTYPES[dtype]).reshape(dims)
    header = MAGIC + struct.pack("<BBH", dtype, len(dims), 0)
    header += struct.pack(f"<{len(dims)}I", *dims)
    Path(path).write_bytes(header + arr.tobytes())


def read_container(path):
    """Read an MRC1 file, returning (dtype_code, dims, array)."""
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise BadMagic(f"{path}: missing MRC1 magic")
    dtype, ndim, _reserved = struct.unpack("<BBH", raw[4:8])
    if dtype not in _NUMPY_DTYPES:
        raise UnsupportedDtype(f"{path}: dtype code {dtype}")
    if not 1 <= ndim <= 3:
        raise ContainerError(f"{path}: ndim {ndim} out of range")
    dim_end = 8 + 4 * ndim
    if len(raw) < dim_end:
        raise TruncatedPayload(f"{path}: header cut short")
    dims = struct.unpack(f"<{ndim}I", raw[8:dim_end])
    n = int(np.prod(dims, dtype=np.int64))
    if n > _MAX_ELEMENTS:
        raise DimOverflow(f"{path}: {n} elements exceeds 2^32")
    np_dtype = _NUMPY_DTYPES[dtype]
    expected = dim_end + n * np_dtype.itemsize
    if len(raw) < expected:
        raise TruncatedPayload(
            f"{path}: expected {expected} bytes, file has {len(raw)}"
        )
    arr = np.frombuffer(raw[dim_end:expected], dtype=np_dtype).reshape(dims)
    return dtype, dims, arr


def read_mask(path) -> BinaryMask:
    dtype, dims, arr = read_container(path)
    if len(dims) != 2:
        raise ContainerError(f"{path}: mask must be 2D, got ndim={len(dims)}")
    return BinaryMask.from_array(arr)


def read_image(path) -> Grid2D:
    """Read a 2D image; u8 payloads are rescaled by value/255."""
    dtype, dims, arr = read_container(path)
    if len(dims) != 2:
        raise ContainerError(f"{path}: image must be 2D, got ndim={len(dims)}")
    if dtype == DTYPE_U8:
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64)
    return Grid2D(arr)


def read_prob_map(path) -> ForegroundProbMap:
    """Read a probability map; u8 payloads are rescaled by value/255."""
    dtype, dims, arr = read_container(path)
    if len(dims) != 2:
        raise ContainerError(f"{path}: prob map must be 2D, got ndim={len(dims)}")
    if dtype == DTYPE_U8:
        arr = arr.astype(np.float64) / 255.0
    return ForegroundProbMap.from_array(np.asarray(arr, dtype=np.float64))


def parse_manifest(manifest_path) -> DatasetManifest:
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestParseError(f"{manifest_path}: {exc}") from exc
    try:
        manifest = DatasetManifest(
            version=str(doc["version"]),
            num_raters=int(doc["num_raters"]),
            samples=[
                ManifestEntry(
                    id=str(s["id"]),
                    image_path=str(s["image_path"]),
                    rater_paths=[str(p) for p in s["rater_paths"]],
                    split=str(s["split"]),
                )
                for s in doc["samples"]
            ],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestParseError(f"{manifest_path}: malformed manifest: {exc}") from exc
    for entry in manifest.samples:
        if entry.split not in SPLITS:
            raise ManifestParseError(
                f"{manifest_path}: sample {entry.id!r} has unknown split {entry.split!r}"
            )
    return manifest


def load_dataset(manifest_path) -> dict[str, list[Sample]]:
    """Load every sample referenced by a manifest, grouped by split.

    Paths in the manifest are relative to the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    manifest = parse_manifest(manifest_path)
    root = manifest_path.parent
    out: dict[str, list[Sample]] = {split: [] for split in SPLITS}
    for entry in manifest.samples:
        if len(entry.rater_paths) != manifest.num_raters:
            raise RaterCountMismatch(
                f"sample {entry.id!r} lists {len(entry.rater_paths)} rater paths, "
                f"manifest declares K={manifest.num_raters}"
            )
        image_file = root / entry.image_path
        if not image_file.exists():
            raise MissingFile(str(image_file))
        image = read_image(image_file)
        masks = []
        for rp in entry.rater_paths:
            rater_file = root / rp
            if not rater_file.exists():
                raise MissingFile(str(rater_file))
            mask = read_mask(rater_file)
            if mask.shape != image.shape:
                raise DimensionMismatch(
                    f"sample {entry.id!r}: image {image.shape} vs rater mask "
                    f"{mask.shape} ({rp})"
                )
            masks.append(mask)
        stack = RaterStack(tuple(masks))
        out[entry.split].append(Sample(id=entry.id, image=image, annotations=stack))
    return out
