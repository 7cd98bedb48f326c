"""Sphere phantoms and count-domain decimation to emulate shorter frames."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from petbench.dataset import SPLITS, ImagePairDataset, StudyInfo
from petbench.volumes import ImagePair, PETVolume, UnitsTag

FULL_FRAME_SECONDS = 90.0
CLINICAL_FRACTIONS = (30.0 / 90.0, 60.0 / 90.0)
SPHERE_DIAMETERS_MM = (10.0, 13.0, 17.0, 22.0, 28.0, 37.0)


class PhantomSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]  # (x, y, z) in mm from the centre of voxel (0, 0, 0)
    diameter: float
    uptake: float


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int]  # (Z, Y, X)
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)  # (dx, dy, dz) mm
    background_uptake: float = 1.0
    spheres: tuple[Sphere, ...] = ()
    kappa: float = 1.0  # expected counts per SUV per second per voxel
    seed: int = 0
    frame_seconds: float = FULL_FRAME_SECONDS
    psf_fwhm_mm: float = 0.0

    def __post_init__(self):
        spheres = tuple(s if isinstance(s, Sphere) else Sphere(tuple(s["center"]), s["diameter"], s["uptake"])
                        for s in self.spheres)
        object.__setattr__(self, "spheres", spheres)
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        object.__setattr__(self, "spacing", tuple(float(d) for d in self.spacing))
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise PhantomSpecError(f"invalid grid shape {self.shape}")
        if min(self.spacing) <= 0:
            raise PhantomSpecError("spacing must be positive")
        if self.kappa <= 0:
            raise PhantomSpecError("kappa must be positive")
        if self.background_uptake < 0:
            raise PhantomSpecError("background uptake must be non-negative")
        nz, ny, nx = self.shape
        extent = np.array([nx, ny, nz]) * np.array(self.spacing)
        lo = -0.5 * np.array(self.spacing)
        for s in spheres:
            if s.diameter <= 0:
                raise PhantomSpecError(f"sphere diameter must be positive, got {s.diameter}")
            if s.uptake < 0:
                raise PhantomSpecError(f"sphere uptake must be non-negative, got {s.uptake}")
            c = np.array(s.center, dtype=float)
            r = s.diameter / 2
            if np.any(c - r < lo) or np.any(c + r > lo + extent):
                raise PhantomSpecError(f"sphere at {s.center} (d={s.diameter}) leaves the grid")
        for i, a in enumerate(spheres):
            for b in spheres[i + 1:]:
                if math.dist(a.center, b.center) < (a.diameter + b.diameter) / 2:
                    raise PhantomSpecError(f"spheres at {a.center} and {b.center} overlap")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spheres"] = [asdict(s) for s in self.spheres]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        d["spheres"] = tuple(d.get("spheres", ()))
        return cls(**d)


def sphere_mask(spec: PhantomSpec, sphere: Sphere) -> np.ndarray:
    """Voxels whose centres lie inside ``sphere`` (boundary inclusive)."""
    nz, ny, nx = spec.shape
    dx, dy, dz = spec.spacing
    cx, cy, cz = sphere.center
    z = (np.arange(nz) * dz - cz) ** 2
    y = (np.arange(ny) * dy - cy) ** 2
    x = (np.arange(nx) * dx - cx) ** 2
    d2 = z[:, None, None] + y[None, :, None] + x[None, None, :]
    return d2 <= (sphere.diameter / 2) ** 2


def make_phantom(spec: PhantomSpec) -> tuple[PETVolume, np.ndarray]:
    """Noiseless SUV volume and the ground-truth lesion mask."""
    data = np.full(spec.shape, spec.background_uptake, dtype=np.float64)
    mask = np.zeros(spec.shape, dtype=bool)
    for s in spec.spheres:
        m = sphere_mask(spec, s)
        data[m] = s.uptake
        mask |= m
    if spec.psf_fwhm_mm > 0:
        sigma_mm = spec.psf_fwhm_mm / (2 * math.sqrt(2 * math.log(2)))
        dx, dy, dz = spec.spacing
        data = ndimage.gaussian_filter(data, (sigma_mm / dz, sigma_mm / dy, sigma_mm / dx), mode="nearest")
    vol = PETVolume(data, spec.spacing, spec.frame_seconds, UnitsTag.SUV)
    return vol, mask


def decimate(ft: PETVolume, fraction: float, seed, kappa: float) -> PETVolume:
    """Poisson realization of ``ft`` acquired for ``fraction`` of its frame time.

    Each voxel draws ``c ~ Poisson(fraction * kappa * SUV * frame_seconds)`` and is
    rescaled by ``1 / (kappa * fraction * frame_seconds)``, so the result is an
    unbiased estimate of the input whose variance grows as ``1 / fraction``.
    """
    if not (0 < fraction <= 1):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if ft.units_tag is not UnitsTag.SUV:
        raise ValueError("decimate expects an SUV volume")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    rng = np.random.default_rng(seed)
    scale = kappa * fraction * ft.frame_seconds
    counts = rng.poisson(ft.data.astype(np.float64) * scale)
    data = counts / scale
    return ft.with_data(data.astype(np.float32), frame_seconds=ft.frame_seconds * fraction)


def random_phantom_spec(shape=(16, 64, 64), spacing=(4.0, 4.0, 4.0), rng=None, n_spheres=(2, 4),
                        diameters=(10.0, 37.0), uptakes=(3.0, 8.0), background=1.0, kappa=1.0,
                        seed=0, max_tries=1000) -> PhantomSpec:
    """Randomly placed, non-overlapping spheres inside the grid."""
    rng = np.random.default_rng(rng)
    nz, ny, nx = shape
    dx, dy, dz = spacing
    hi = np.array([(nx - 1) * dx, (ny - 1) * dy, (nz - 1) * dz])
    n = int(rng.integers(n_spheres[0], n_spheres[1] + 1))
    spheres = []
    for _ in range(max_tries):
        if len(spheres) == n:
            break
        d = float(rng.uniform(*diameters))
        r = d / 2
        if np.any(2 * r > hi):
            continue
        c = rng.uniform(r, hi - r)
        # z centre snapped to a slice so each sphere has a well-defined middle slice
        c[2] = round(c[2] / dz) * dz
        if any(math.dist(c, s.center) < r + s.diameter / 2 + 2 * dx for s in spheres):
            continue
        spheres.append(Sphere(tuple(float(v) for v in c), d, float(rng.uniform(*uptakes))))
    return PhantomSpec(tuple(shape), tuple(spacing), background, tuple(spheres), kappa, seed)


def make_paired_dataset(specs, fractions=CLINICAL_FRACTIONS, slices_per_phantom=None,
                        splits=None, seed=0, id_prefix="phantom") -> ImagePairDataset:
    """Aligned LT/FT slice pairs from independent Poisson draws of each phantom.

    ``splits`` is a ``(n_train, n_val, n_test)`` count of phantoms assigned in
    order; by default every phantom goes to ``train``. Each phantom's RNG
    streams are derived from ``(seed, phantom index)``.
    """
    specs = list(specs)
    if not specs:
        raise PhantomSpecError("need at least one phantom spec")
    if splits is None:
        splits = (len(specs), 0, 0)
    if sum(splits) != len(specs):
        raise PhantomSpecError(f"split counts {splits} do not sum to {len(specs)} phantoms")
    labels = [name for name, k in zip(SPLITS, splits) for _ in range(k)]
    fractions = [float(f) for f in fractions]

    pairs, studies = [], {}
    for i, (spec, split) in enumerate(zip(specs, labels)):
        sid = f"{id_prefix}{i:03d}"
        clean, mask = make_phantom(spec)
        ft = decimate(clean, 1.0, [seed, i, 0], spec.kappa)
        nz = spec.shape[0]
        if slices_per_phantom is None or slices_per_phantom >= nz:
            z0, z1 = 0, nz
        else:
            z0 = (nz - slices_per_phantom) // 2
            z1 = z0 + slices_per_phantom
        studies[sid] = StudyInfo(sid, split, spec.spacing, spec.frame_seconds,
                                 mask=mask[z0:z1].copy(),
                                 extra={"phantom": spec.to_dict(), "z_range": [z0, z1]})
        for j, f in enumerate(fractions):
            lt = decimate(clean, f, [seed, i, j + 1], spec.kappa)
            for z in range(z0, z1):
                pairs.append(ImagePair(lt.data[z], ft.data[z], sid, z - z0, split, f))
    return ImagePairDataset(pairs, studies)


def suvmax_noise_ratio(spec: PhantomSpec, sphere_index: int, fraction: float, n_real: int = 200,
                       seed=0) -> float:
    """Std/mean of a sphere's SUVmax over ``n_real`` decimated realizations."""
    clean, _ = make_phantom(spec)
    m = sphere_mask(spec, spec.spheres[sphere_index])
    zs, ys, xs = np.nonzero(m)
    box = (slice(zs.min(), zs.max() + 1), slice(ys.min(), ys.max() + 1), slice(xs.min(), xs.max() + 1))
    sub = clean.with_data(clean.data[box])
    sub_mask = m[box]
    maxima = np.array([decimate(sub, fraction, [seed, k], spec.kappa).data[sub_mask].max()
                       for k in range(n_real)], dtype=np.float64)
    return float(maxima.std(ddof=1) / maxima.mean())


def calibrate_kappa(spec: PhantomSpec, sphere_index: int = 0, fraction: float = 30.0 / 150.0,
                    target: float = 0.15, n_real: int = 400, iterations: int = 8, seed=0) -> float:
    """Find ``kappa`` giving the target SUVmax std/mean for one sphere.

    Uses the approximate ``ratio ∝ kappa ** -0.5`` scaling as a fixed-point update.
    """
    kappa = spec.kappa
    for _ in range(iterations):
        trial = PhantomSpec(**{**spec.to_dict(), "kappa": kappa, "spheres": spec.spheres})
        ratio = suvmax_noise_ratio(trial, sphere_index, fraction, n_real, seed)
        if ratio <= 0:
            break
        kappa *= (ratio / target) ** 2
    return kappa
