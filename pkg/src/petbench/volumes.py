"""Volume and metadata types plus SUV normalization.

Volumes are stored as ``(Z, Y, X)`` float32 arrays; spacing is given as
``(dx, dy, dz)`` in millimetres.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_SLICE_THICKNESS = 3.75
CLINICAL_FRAME_SECONDS = (30.0, 60.0, 90.0)


class UnitsTag(str, enum.Enum):
    RAW = "RAW"
    SUV = "SUV"


class VolumeError(ValueError):
    """Invalid volume contents or geometry."""


class MetadataError(ValueError):
    """Invalid or missing study metadata."""


class UnitsError(ValueError):
    """Operation applied to a volume in the wrong units."""


def _frozen_array(data, dtype) -> np.ndarray:
    arr = np.array(data, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_spacing(spacing) -> tuple[float, float, float]:
    if len(spacing) != 3:
        raise VolumeError(f"spacing must have 3 components, got {spacing!r}")
    spacing = tuple(float(s) for s in spacing)
    if not all(s > 0 and math.isfinite(s) for s in spacing):
        raise VolumeError(f"spacing components must be positive, got {spacing}")
    return spacing


@dataclass(frozen=True)
class PETVolume:
    """3D emission volume.

    ``data`` is indexed ``[z, y, x]``. ``frame_seconds`` is the acquisition time
    per bed position the volume corresponds to.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (2.0, 2.0, DEFAULT_SLICE_THICKNESS)
    frame_seconds: float = 90.0
    units_tag: UnitsTag = UnitsTag.RAW

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise VolumeError(f"PET data must be 3D (Z, Y, X), got shape {data.shape}")
        data = _frozen_array(data, np.float32)
        if not np.all(np.isfinite(data)):
            raise VolumeError("PET volume contains non-finite values")
        tag = UnitsTag(self.units_tag)
        if tag is UnitsTag.SUV and data.size and data.min() < 0:
            raise VolumeError("SUV volumes must be non-negative")
        if not (self.frame_seconds > 0):
            raise VolumeError(f"frame_seconds must be positive, got {self.frame_seconds}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        object.__setattr__(self, "units_tag", tag)
        object.__setattr__(self, "frame_seconds", float(self.frame_seconds))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def axis_spacing(self) -> tuple[float, float, float]:
        """Spacing in array-axis order ``(dz, dy, dx)``."""
        dx, dy, dz = self.spacing
        return (dz, dy, dx)

    def with_data(self, data, **changes) -> "PETVolume":
        return replace(self, data=data, **changes)


@dataclass(frozen=True)
class CTVolume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, DEFAULT_SLICE_THICKNESS)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise VolumeError(f"CT data must be 3D (Z, Y, X), got shape {data.shape}")
        data = _frozen_array(data, np.float32)
        if not np.all(np.isfinite(data)):
            raise VolumeError("CT volume contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class StudyMetadata:
    """Dose bookkeeping for one study.

    Parameters
    ----------
    weight : float
        Patient weight in kg.
    total_dose : float
        Injected activity in MBq.
    half_life : float
        Tracer half-life in seconds.
    delta_t : float
        Delay between injection and scan start, in seconds.
    """

    weight: float
    total_dose: float
    half_life: float
    delta_t: float = 0.0

    def __post_init__(self):
        for name in ("weight", "total_dose", "half_life"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise MetadataError(f"{name} must be positive, got {value}")
        if not (math.isfinite(self.delta_t) and self.delta_t >= 0):
            raise MetadataError(f"delta_t must be non-negative, got {self.delta_t}")


@dataclass(frozen=True)
class ImagePair:
    """Aligned low-time / full-time slice pair."""

    lt: np.ndarray
    ft: np.ndarray
    study_id: str
    slice_index: int
    split: str = "train"
    fraction: float = 1.0 / 3.0
    units_tag: UnitsTag = UnitsTag.SUV
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        lt = np.asarray(self.lt)
        ft = np.asarray(self.ft)
        if lt.ndim != 2 or lt.shape != ft.shape:
            raise VolumeError(f"LT/FT slices must be 2D with equal shape, got {lt.shape} and {ft.shape}")
        object.__setattr__(self, "lt", _frozen_array(lt, np.float32))
        object.__setattr__(self, "ft", _frozen_array(ft, np.float32))
        object.__setattr__(self, "units_tag", UnitsTag(self.units_tag))


TIME_UNITS = {"s": 1.0, "min": 60.0}


def suv_coefficient(meta: StudyMetadata, delta_t_unit: str = "s") -> float:
    """Multiplier turning raw activity into SUV.

    Evaluated as ``2000 * weight / total_dose * 0.5 ** (-delta_t / half_life)``
    with ``half_life`` in seconds. ``delta_t_unit="min"`` reads ``delta_t`` as
    minutes.
    """
    if not isinstance(meta, StudyMetadata):
        meta = StudyMetadata(**meta)
    try:
        dt = meta.delta_t * TIME_UNITS[delta_t_unit]
    except KeyError:
        raise MetadataError(f"delta_t_unit must be one of {sorted(TIME_UNITS)}") from None
    return (2000.0 * meta.weight / meta.total_dose) * 0.5 ** (-dt / meta.half_life)


def apply_suv(vol: PETVolume, coeff: float) -> PETVolume:
    if vol.units_tag is not UnitsTag.RAW:
        raise UnitsError("volume is already in SUV units")
    if not (coeff > 0 and math.isfinite(coeff)):
        raise MetadataError(f"SUV coefficient must be positive, got {coeff}")
    data = (vol.data.astype(np.float64) * coeff).astype(np.float32)
    return vol.with_data(data, units_tag=UnitsTag.SUV)


def _interp_axis(arr: np.ndarray, axis: int, size: int) -> np.ndarray:
    n = arr.shape[axis]
    if n == size:
        return arr
    if n == 1:
        return np.repeat(arr, size, axis=axis)
    if size == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(size) * ((n - 1) / (size - 1))
    lo = np.clip(np.floor(pos).astype(np.int64), 0, n - 2)
    w = pos - lo
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, lo + 1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = size
    w = w.reshape(shape)
    # a + w*(b - a) keeps constants exact
    return a + w * (b - a)


def resample_slices(data: np.ndarray, target_shape: tuple[int, int]) -> np.ndarray:
    """Bilinear in-plane resampling of a ``(Z, Y, X)`` or ``(Y, X)`` array.

    Grids are corner-aligned: output sample ``i`` maps to input coordinate
    ``i * (n_in - 1) / (n_out - 1)``.
    """
    h, w = (int(s) for s in target_shape)
    if h <= 0 or w <= 0:
        raise VolumeError(f"target shape must be positive, got {target_shape}")
    data = np.asarray(data)
    if data.shape[-2:] == (h, w):
        return data.copy()
    out = np.asarray(data, dtype=np.float64)
    out = _interp_axis(out, out.ndim - 2, h)
    out = _interp_axis(out, out.ndim - 1, w)
    return out.astype(data.dtype if data.dtype.kind == "f" else np.float64)


def resample(vol, target_shape: tuple[int, int]):
    """Resample every slice of a PET/CT volume in-plane.

    Spacing is rescaled so the corner-to-corner extent is unchanged.
    """
    data = resample_slices(vol.data, target_shape)
    _, ny, nx = vol.shape
    h, w = target_shape
    dx, dy, dz = vol.spacing

    def rescale(d, n_in, n_out):
        if n_in == n_out:
            return d
        if n_in == 1 or n_out == 1:
            return d * n_in / n_out
        return d * (n_in - 1) / (n_out - 1)

    spacing = (rescale(dx, nx, w), rescale(dy, ny, h), dz)
    return replace(vol, data=data, spacing=spacing)


def nearest_slices(mask: np.ndarray, target_shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour in-plane resampling on corner-aligned grids."""
    h, w = (int(s) for s in target_shape)
    mask = np.asarray(mask)
    ny, nx = mask.shape[-2:]

    def index(n_in, n_out):
        if n_out == 1:
            return np.zeros(1, dtype=np.int64)
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        return np.minimum(np.floor(pos + 0.5).astype(np.int64), n_in - 1)

    return mask[..., index(ny, h), :][..., index(nx, w)]
