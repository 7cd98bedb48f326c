"""Lesion segmentation, measurement and SUV agreement statistics.

Lesions are detected once on the full-time volume; the same voxel sets are
measured on the denoised volume, and the paired SUVmax / SUVpeak values are
summarized by median bias, IQR, R² and a ``median ± 1.8·IQR`` interval.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from petbench import kernels
from petbench.volumes import PETVolume, nearest_slices, resample_slices

logger = logging.getLogger(__name__)

CI_IQR_FACTOR = 1.8
PEAK_VOLUME_ML = 1.0
PEAK_RADIUS_MM = (3.0 * PEAK_VOLUME_ML * 1000.0 / (4.0 * math.pi)) ** (1.0 / 3.0)
MIN_LENGTH_MM = 7.0
MIN_MEAN_SUV = 0.5
DEFAULT_THRESHOLD = 2.5
SEGMENTATION_SIZE = (400, 400)


class Strategy(str, enum.Enum):
    THRESHOLD = "THRESHOLD"
    EXTERNAL = "EXTERNAL"


class GeometryError(ValueError):
    pass


class StatisticsError(ValueError):
    pass


def segment(pet: PETVolume, ct=None, strategy=Strategy.THRESHOLD, threshold: float = DEFAULT_THRESHOLD,
            resample_to: tuple[int, int] | None = None, external_mask=None) -> np.ndarray:
    """Binary lesion mask on the PET grid.

    ``THRESHOLD`` marks voxels above ``threshold`` SUV, optionally thresholding on
    a ``resample_to`` in-plane grid and mapping back by nearest neighbour.
    ``EXTERNAL`` returns ``external_mask`` after a geometry check. ``ct`` is
    accepted for interface parity with CT-aware segmenters; the threshold
    strategy ignores it.
    """
    strategy = Strategy(strategy)
    if ct is not None and ct.shape[0] != pet.shape[0]:
        raise GeometryError(f"CT has {ct.shape[0]} slices, PET has {pet.shape[0]}")
    if strategy is Strategy.EXTERNAL:
        if external_mask is None:
            raise ValueError("EXTERNAL segmentation needs an imported mask")
        mask = np.asarray(external_mask).astype(bool)
        if mask.shape != pet.shape:
            raise GeometryError(f"mask shape {mask.shape} does not match PET {pet.shape}")
        return mask
    if resample_to is not None and tuple(resample_to) != pet.shape[1:]:
        hi = resample_slices(pet.data.astype(np.float64), resample_to) > threshold
        return nearest_slices(hi, pet.shape[1:])
    return pet.data > threshold


def connected_components(mask) -> list[np.ndarray]:
    """26-connected components as ``(n_i, 3)`` arrays of ``(z, y, x)`` indices."""
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise GeometryError(f"mask must be 3D, got shape {mask.shape}")
    labels, n = kernels.label26(mask.astype(np.uint8))
    if n == 0:
        return []
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=n + 1)
    starts = np.cumsum(counts)
    coords = np.stack(np.unravel_index(order, labels.shape), axis=1)
    return [coords[starts[k - 1]:starts[k]] for k in range(1, n + 1)]


def _surface(voxels: np.ndarray) -> np.ndarray:
    """Voxels missing at least one face neighbour; they carry the convex hull."""
    if len(voxels) < 27:
        return voxels
    lo = voxels.min(axis=0) - 1
    grid = np.zeros(voxels.max(axis=0) - lo + 2, dtype=bool)
    v = voxels - lo
    grid[v[:, 0], v[:, 1], v[:, 2]] = True
    inner = np.ones(len(v), dtype=bool)
    for axis in range(3):
        for step in (-1, 1):
            shifted = v.copy()
            shifted[:, axis] += step
            inner &= grid[shifted[:, 0], shifted[:, 1], shifted[:, 2]]
    return voxels[~inner]


def max_length(voxels, spacing) -> float:
    """Largest centre-to-centre distance in mm plus one voxel diagonal.

    ``spacing`` is in array-axis order ``(dz, dy, dx)``.
    """
    voxels = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
    if len(voxels) == 0:
        raise ValueError("empty voxel set")
    sp = np.asarray(spacing, dtype=np.float64)
    pts = _surface(voxels) * sp
    return kernels.max_pairwise_distance(pts) + float(np.sqrt((sp ** 2).sum()))


def peak_offsets(spacing, radius_mm: float = PEAK_RADIUS_MM) -> np.ndarray:
    """Integer ``(z, y, x)`` offsets inside a sphere of ``radius_mm``."""
    sp = np.asarray(spacing, dtype=np.float64)
    reach = np.floor(radius_mm / sp).astype(int)
    grids = np.meshgrid(*[np.arange(-r, r + 1) for r in reach], indexing="ij")
    off = np.stack([g.ravel() for g in grids], axis=1)
    d2 = ((off * sp) ** 2).sum(axis=1)
    return np.ascontiguousarray(off[d2 <= radius_mm ** 2], dtype=np.int64)


def suv_max(voxels, volume: PETVolume) -> float:
    v = np.asarray(voxels)
    return float(volume.data[v[:, 0], v[:, 1], v[:, 2]].astype(np.float64).max())


def suv_mean(voxels, volume: PETVolume) -> float:
    v = np.asarray(voxels)
    return float(volume.data[v[:, 0], v[:, 1], v[:, 2]].astype(np.float64).mean())


def suv_peak(voxels, volume: PETVolume, radius_mm: float = PEAK_RADIUS_MM) -> float:
    """Highest mean SUV in a 1 mL sphere centred on any lesion voxel (clipped to the volume)."""
    offsets = peak_offsets(volume.axis_spacing, radius_mm)
    means = kernels.sphere_means(volume.data.astype(np.float64), np.asarray(voxels, dtype=np.int64), offsets)
    return float(means.max())


@dataclass
class LesionRecord:
    voxels: np.ndarray = field(repr=False)
    volume_mm3: float
    max_length: float
    suv_mean: float
    suv_max: float
    suv_peak: float
    study_id: str = ""
    label: int = 0

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("voxels")
        d["n_voxels"] = int(len(self.voxels))
        return d


def measure(voxels, volume: PETVolume, study_id: str = "", label: int = 0) -> LesionRecord:
    voxels = np.asarray(voxels, dtype=np.int64)
    dz, dy, dx = volume.axis_spacing
    return LesionRecord(
        voxels=voxels,
        volume_mm3=float(len(voxels) * dx * dy * dz),
        max_length=max_length(voxels, volume.axis_spacing),
        suv_mean=suv_mean(voxels, volume),
        suv_max=suv_max(voxels, volume),
        suv_peak=suv_peak(voxels, volume),
        study_id=study_id,
        label=label,
    )


def find_lesions(mask, volume: PETVolume, study_id: str = "") -> list[LesionRecord]:
    if np.asarray(mask).shape != volume.shape:
        raise GeometryError(f"mask shape {np.asarray(mask).shape} does not match volume {volume.shape}")
    return [measure(c, volume, study_id, k + 1) for k, c in enumerate(connected_components(mask))]


def lesion_filter(lesions, min_length: float = MIN_LENGTH_MM, min_mean: float = MIN_MEAN_SUV,
                  rule: str = "and") -> list[LesionRecord]:
    """Drop small, faint lesions.

    With ``rule="and"`` a lesion is excluded only when it is both shorter than
    ``min_length`` and has mean SUV below ``min_mean``; ``rule="or"`` excludes
    lesions failing either criterion.
    """
    def excluded(les):
        short = les.max_length < min_length
        faint = les.suv_mean < min_mean
        return (short and faint) if rule == "and" else (short or faint)

    if rule not in ("and", "or"):
        raise ValueError(f"rule must be 'and' or 'or', got {rule!r}")
    return [les for les in lesions if not excluded(les)]


def match_lesions(lesions, denoised: PETVolume, original: PETVolume | None = None) -> dict:
    """Measure the original lesions' voxel sets on ``denoised``.

    Returns ``{"suv_max": (n, 2) array, "suv_peak": (n, 2) array}`` with
    columns ``(original, denoised)``.
    """
    if original is not None and original.shape != denoised.shape:
        raise GeometryError(f"denoised shape {denoised.shape} differs from original {original.shape}")
    out = {"suv_max": [], "suv_peak": []}
    for les in lesions:
        v = les.voxels
        if np.any(v.max(axis=0) >= np.asarray(denoised.shape)) or v.min() < 0:
            raise GeometryError("lesion voxels fall outside the denoised volume")
        out["suv_max"].append((les.suv_max, suv_max(v, denoised)))
        out["suv_peak"].append((les.suv_peak, suv_peak(v, denoised)))
    return {k: np.asarray(val, dtype=np.float64).reshape(-1, 2) for k, val in out.items()}


def _as_pairs(pairs) -> np.ndarray:
    p = np.asarray(pairs, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 2:
        raise StatisticsError(f"expected (n, 2) pairs of (original, denoised), got shape {p.shape}")
    return p


def bland_altman(pairs) -> tuple[float, float]:
    """Median and IQR of ``denoised - original`` (linear-interpolation quantiles)."""
    p = _as_pairs(pairs)
    if len(p) < 2:
        raise StatisticsError("Bland-Altman statistics need at least 2 pairs")
    d = p[:, 1] - p[:, 0]
    q1, med, q3 = np.percentile(d, [25, 50, 75])
    return float(med), float(q3 - q1)


def ols_fit(x, y) -> tuple[float, float]:
    """Slope and intercept of the least-squares line ``y = a + b x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    sxx = float((xc * xc).sum())
    if sxx == 0:
        raise StatisticsError("originals have zero variance")
    slope = float((xc * (y - y.mean())).sum() / sxx)
    return slope, float(y.mean() - slope * x.mean())


def r_squared(pairs, method: str = "ols") -> float:
    """Coefficient of determination of denoised against original SUV.

    ``method="ols"`` scores the least-squares line; ``"identity"`` scores ``y = x``.
    """
    p = _as_pairs(pairs)
    if len(p) < 3:
        raise StatisticsError("R² needs at least 3 pairs")
    x, y = p[:, 0], p[:, 1]
    if np.all(x == x[0]):
        raise StatisticsError("originals have zero variance")
    if method == "ols":
        slope, intercept = ols_fit(x, y)
        resid = y - (intercept + slope * x)
    elif method == "identity":
        resid = y - x
    else:
        raise ValueError(f"unknown R² method {method!r}")
    ss_res = float((resid ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0:
        if ss_res == 0:
            return 1.0
        raise StatisticsError("denoised values have zero variance")
    return 1.0 - ss_res / ss_tot


@dataclass
class AgreementStats:
    n_lesions: int
    median_bias: float
    iqr: float
    r2: float | None
    ci_lower: float
    ci_upper: float

    def to_dict(self) -> dict:
        return {
            "n_lesions": self.n_lesions,
            "one_minus_r2": None if self.r2 is None else 1.0 - self.r2,
            "median_bias": self.median_bias,
            "iqr": self.iqr,
            "ci": [self.ci_lower, self.ci_upper],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AgreementStats":
        r2 = None if d.get("one_minus_r2") is None else 1.0 - d["one_minus_r2"]
        return cls(d["n_lesions"], d["median_bias"], d["iqr"], r2, d["ci"][0], d["ci"][1])


def confidence_interval(median_bias: float, iqr: float, factor: float = CI_IQR_FACTOR) -> tuple[float, float]:
    return (median_bias - factor * iqr, median_bias + factor * iqr)


def agreement(pairs, r2_method: str = "ols") -> AgreementStats:
    p = _as_pairs(pairs)
    med, iqr = bland_altman(p)
    try:
        r2 = r_squared(p, r2_method)
    except StatisticsError as exc:
        logger.warning("R² undefined: %s", exc)
        r2 = None
    lo, hi = confidence_interval(med, iqr)
    return AgreementStats(len(p), med, iqr, r2, lo, hi)


def suv_pipeline(cases, threshold: float = DEFAULT_THRESHOLD, rule: str = "and",
                 resample_to=None, r2_method: str = "ols") -> dict:
    """Run detection, filtering, matching and agreement over several studies.

    ``cases`` yields ``(study_id, original, denoised, mask_or_None)``; with no
    mask the original is threshold-segmented. Returns a dict with per-metric
    :class:`AgreementStats` (``None`` if fewer than two lesions), the paired
    values, and the lesion summaries.
    """
    pairs = {"suv_max": [], "suv_peak": []}
    records = []
    for study_id, original, denoised, mask in cases:
        if mask is None:
            mask = segment(original, threshold=threshold, resample_to=resample_to)
        else:
            mask = segment(original, strategy=Strategy.EXTERNAL, external_mask=mask)
        lesions = lesion_filter(find_lesions(mask, original, study_id), rule=rule)
        matched = match_lesions(lesions, denoised, original)
        for k in pairs:
            pairs[k].append(matched[k])
        for les, pmax, ppeak in zip(lesions, matched["suv_max"], matched["suv_peak"]):
            row = les.summary()
            row.update(suv_max_denoised=float(pmax[1]), suv_peak_denoised=float(ppeak[1]))
            records.append(row)
    out = {"lesions": records}
    for k, chunks in pairs.items():
        p = np.concatenate(chunks) if chunks else np.zeros((0, 2))
        out[f"{k}_pairs"] = p
        out[k] = agreement(p, r2_method) if len(p) >= 2 else None
    return out
