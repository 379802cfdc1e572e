"""Dense volumes, binary label volumes, raw file I/O and patch tiling.

Arrays are indexed ``data[i, j, k]`` with ``i`` along x.  On disk the
payload is written x-fastest (Fortran order), little-endian.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

LABEL_KINDS = ("vessel", "centerline", "bifurcation")

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolumeFormatError(ValueError):
    """Header or payload of a volume file pair is invalid."""


class CoverageError(ValueError):
    """A patch grid does not cover the requested shape."""


class DegenerateInputError(ValueError):
    """Input cannot be processed, e.g. an all-zero volume for normalization."""


def _check_shape(shape) -> tuple[int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or any(s <= 0 for s in shape):
        raise ValueError(f"shape must be three positive ints, got {shape}")
    return shape


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing must be three positive reals, got {spacing}")
    return spacing


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Volume3D:
    """Scalar field on an ``(nx, ny, nz)`` grid, stored as float32."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got ndim={data.ndim}")
        _check_shape(data.shape)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains NaN or Inf")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @classmethod
    def zeros(cls, shape, spacing=(1.0, 1.0, 1.0)) -> "Volume3D":
        return cls(np.zeros(_check_shape(shape), np.float32), spacing)


@dataclass(frozen=True)
class LabelVolume:
    """Binary voxel mask tagged with what it marks."""

    data: np.ndarray
    kind: str = "vessel"
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim != 3:
            raise ValueError(f"label data must be 3-D, got ndim={raw.ndim}")
        _check_shape(raw.shape)
        if raw.dtype == bool:
            data = raw.astype(np.uint8)
        else:
            if not np.all((raw == 0) | (raw == 1)):
                raise ValueError("label values must be 0 or 1")
            data = raw.astype(np.uint8)
        if self.kind not in LABEL_KINDS:
            raise ValueError(f"unknown label kind {self.kind!r}")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def fraction(self) -> float:
        return float(self.data.mean())


AnyVolume = Union[Volume3D, LabelVolume]


def _pair_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".raw")


def write_volume(vol: AnyVolume, path) -> tuple[Path, Path]:
    """Write ``<name>.json`` + ``<name>.raw`` and return both paths."""
    header_path, raw_path = _pair_paths(path)
    if isinstance(vol, LabelVolume):
        dtype = "u8"
    elif isinstance(vol, Volume3D):
        dtype = "f32"
    else:
        raise TypeError(f"cannot write {type(vol).__name__}")
    header = {
        "shape": list(vol.shape),
        "spacing": list(vol.spacing),
        "dtype": dtype,
        "order": "x-fastest",
        "endianness": "little",
    }
    payload = np.asarray(vol.data, dtype=_DTYPES[dtype]).tobytes(order="F")
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    raw_path.write_bytes(payload)
    return header_path, raw_path


def read_volume(path, kind: str = "vessel") -> AnyVolume:
    """Read a volume file pair.

    ``f32`` payloads come back as :class:`Volume3D`; ``u8`` payloads as
    :class:`LabelVolume` tagged with ``kind``.
    """
    header_path, raw_path = _pair_paths(path)
    for p in (header_path, raw_path):
        if not p.is_file():
            raise FileNotFoundError(p)
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{header_path}: invalid JSON header") from exc

    try:
        shape = _check_shape(header["shape"])
        spacing = _check_spacing(header.get("spacing", (1.0, 1.0, 1.0)))
        dtype_name = header["dtype"]
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"{header_path}: bad header field ({exc})") from exc
    if dtype_name not in _DTYPES:
        raise VolumeFormatError(f"{header_path}: unknown dtype {dtype_name!r}")
    if header.get("order", "x-fastest") != "x-fastest":
        raise VolumeFormatError(f"{header_path}: unsupported order {header['order']!r}")
    if header.get("endianness", "little") != "little":
        raise VolumeFormatError(f"{header_path}: unsupported endianness")

    dtype = _DTYPES[dtype_name]
    payload = raw_path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{raw_path}: payload has {len(payload)} bytes, header requires {expected}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F")
    if dtype_name == "f32":
        if not np.all(np.isfinite(data)):
            raise VolumeFormatError(f"{raw_path}: payload contains NaN or Inf")
        return Volume3D(data, spacing)
    try:
        return LabelVolume(data, kind, spacing)
    except ValueError as exc:
        raise VolumeFormatError(f"{raw_path}: {exc}") from exc


@dataclass
class PatchGrid:
    """Non-overlapping patches (tail patches clamped inward) of one volume."""

    patch_size: int
    origins: list[tuple[int, int, int]] = field(default_factory=list)
    patches: list = field(default_factory=list)


def _axis_origins(n: int, size: int) -> list[int]:
    if n <= size:
        return [0]
    origins = list(range(0, n - size + 1, size))
    if origins[-1] + size < n:
        origins.append(n - size)
    return origins


def _patch_of(vol, sl):
    if isinstance(vol, LabelVolume):
        return LabelVolume(vol.data[sl], vol.kind, vol.spacing)
    if isinstance(vol, Volume3D):
        return Volume3D(vol.data[sl], vol.spacing)
    return np.array(vol[(slice(None),) * (np.ndim(vol) - 3) + sl])


def extract_patches(vol, size: int = 64) -> PatchGrid:
    """Tile ``vol`` with cubes of edge ``size``.

    When an axis is not a multiple of ``size`` the last origin is clamped to
    ``n - size`` so the tail patch overlaps its neighbour instead of being
    zero-padded.  Axes shorter than ``size`` yield a single short patch.
    ``vol`` may also be a plain array with leading channel axes.
    """
    size = int(size)
    if size <= 0:
        raise ValueError(f"patch size must be >= 1, got {size}")
    shape = vol.shape[-3:]
    grid = PatchGrid(size)
    ox, oy, oz = (_axis_origins(n, size) for n in shape)
    for i in ox:
        for j in oy:
            for k in oz:
                sl = (
                    slice(i, min(i + size, shape[0])),
                    slice(j, min(j + size, shape[1])),
                    slice(k, min(k + size, shape[2])),
                )
                grid.origins.append((i, j, k))
                grid.patches.append(_patch_of(vol, sl))
    return grid


def stitch_patches(grid: PatchGrid, shape: Sequence[int]):
    """Reassemble a patch grid; later patches overwrite earlier ones."""
    shape = _check_shape(shape)
    if not grid.patches:
        raise CoverageError("empty patch grid")
    first = grid.patches[0]
    arrays = [p.data if isinstance(p, (Volume3D, LabelVolume)) else np.asarray(p) for p in grid.patches]
    lead = arrays[0].shape[:-3]
    out = np.zeros(lead + shape, dtype=arrays[0].dtype)
    covered = np.zeros(shape, dtype=bool)
    for (i, j, k), arr in zip(grid.origins, arrays):
        px, py, pz = arr.shape[-3:]
        if i + px > shape[0] or j + py > shape[1] or k + pz > shape[2]:
            raise CoverageError(f"patch at {(i, j, k)} extends outside {shape}")
        out[..., i:i + px, j:j + py, k:k + pz] = arr
        covered[i:i + px, j:j + py, k:k + pz] = True
    if not covered.all():
        raise CoverageError(f"{int((~covered).sum())} voxels not covered by any patch")
    if isinstance(first, LabelVolume):
        return LabelVolume(out, first.kind, first.spacing)
    if isinstance(first, Volume3D):
        return Volume3D(out, first.spacing)
    return out


def normalize_intensities(vol: Volume3D, clip_percentile: float = 0.99) -> Volume3D:
    """Clip at the ``clip_percentile`` quantile ``c`` and map ``x -> (x/c)**2``.

    Values below zero are clipped to zero so the map stays monotone and the
    output lies in ``[0, 1]``.
    """
    if not 0.0 < clip_percentile <= 1.0:
        raise ValueError(f"clip_percentile must be in (0, 1], got {clip_percentile}")
    x = np.asarray(vol.data, dtype=np.float64)
    c = float(np.quantile(x, clip_percentile))
    if c <= 0.0:
        raise DegenerateInputError(f"clip intensity is {c}; volume is empty or non-positive")
    y = np.clip(x, 0.0, c) / c
    return Volume3D((y * y).astype(np.float32), vol.spacing)


def volume_paths(directory, stem: str) -> tuple[str, str]:
    header, raw = _pair_paths(os.path.join(directory, stem))
    return str(header), str(raw)
