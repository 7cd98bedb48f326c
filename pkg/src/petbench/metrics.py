"""2D image similarity: RMSE, SSIM/ISSIM, relative improvement, Gaussian baseline."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

SSIM_WIN = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
# added to C1/C2 so a constant reference still yields a defined value
SSIM_STABILIZER = 1e-12


class ShapeError(ValueError):
    pass


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def rmse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def ssim(a, b, data_range: float | None = None, win_size: int = SSIM_WIN,
         k1: float = SSIM_K1, k2: float = SSIM_K2) -> float:
    """Mean structural similarity of ``a`` against the reference ``b``.

    Uniform ``win_size`` window, sample covariances, and the mean taken over
    positions whose window lies fully inside the image. ``data_range`` defaults
    to the peak-to-peak range of ``b``.
    """
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ShapeError(f"ssim expects 2D images, got {a.shape}")
    if min(a.shape) < win_size:
        raise ShapeError(f"image {a.shape} smaller than the {win_size}x{win_size} window")
    if data_range is None:
        data_range = float(b.max() - b.min())
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    if data_range == 0:
        c1 += SSIM_STABILIZER
        c2 += SSIM_STABILIZER
    npix = win_size * win_size
    cov_norm = npix / (npix - 1)
    filt = lambda x: ndimage.uniform_filter(x, size=win_size, mode="reflect")  # noqa: E731
    ux, uy = filt(a), filt(b)
    uxx, uyy, uxy = filt(a * a), filt(b * b), filt(a * b)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    num = (2 * ux * uy + c1) * (2 * vxy + c2)
    den = (ux ** 2 + uy ** 2 + c1) * (vx + vy + c2)
    pad = (win_size - 1) // 2
    s = (num / den)[pad:-pad, pad:-pad]
    return float(s.mean())


def issim(a, b, **kw) -> float:
    return 1.0 - ssim(a, b, **kw)


METRICS = {"rmse": rmse, "issim": issim}


def relative_metric(metric, lt, ft, denoised) -> float:
    """Improvement of ``denoised`` over ``lt``, in percent.

    ``100 * (1 - metric(denoised, ft) / metric(lt, ft))``. Raises
    ``ZeroDivisionError`` when the LT image already matches FT under ``metric``.
    """
    if isinstance(metric, str):
        metric = METRICS[metric]
    base = metric(lt, ft)
    if not base > 0:
        raise ZeroDivisionError("metric(lt, ft) is zero; relative metric undefined")
    return 100.0 * (1.0 - metric(denoised, ft) / base)


def gaussian_kernel_1d(sigma: float, truncate: float = 4.0) -> np.ndarray:
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_baseline(lt, sigma: float = 2.5) -> np.ndarray:
    """Separable Gaussian smoothing with reflective borders."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    lt = np.asarray(lt, dtype=np.float64)
    k = gaussian_kernel_1d(sigma)
    out = ndimage.correlate1d(lt, k, axis=-1, mode="reflect")
    return ndimage.correlate1d(out, k, axis=-2, mode="reflect")


def tune_gaussian_sigma(pairs, sigmas=(0.5, 0.75, 1.0, 1.5, 2.0, 2.5, 3.0)) -> float:
    """Pick the sigma with the best mean validation SSIM."""
    best, best_score = None, -math.inf
    for s in sigmas:
        score = float(np.mean([ssim(gaussian_baseline(p.lt, s), p.ft) for p in pairs]))
        if score > best_score:
            best, best_score = s, score
    return best


@dataclass
class PairMetrics:
    study_id: str
    slice_index: int
    rmse: float
    issim: float
    rel_rmse: float | None
    rel_issim: float | None
    degenerate_ssim: bool = False


@dataclass
class MetricReport:
    model: str
    fraction: float | None
    pairs: list[PairMetrics] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "fraction": self.fraction,
            "pairs": [asdict(p) for p in self.pairs],
            "aggregates": dict(self.aggregates),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d["model"], d.get("fraction"), [PairMetrics(**p) for p in d.get("pairs", [])],
                   dict(d.get("aggregates", {})))


def _mean_ci(values) -> dict:
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return {"mean": None, "ci95": None, "n": 0}
    mean = float(math.fsum(v) / v.size)
    half = float(1.96 * v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return {"mean": mean, "ci95": [mean - half, mean + half], "n": int(v.size)}


def evaluate_model(denoise, pairs, model: str = "model", fraction: float | None = None) -> MetricReport:
    """Score ``denoise(lt) -> image`` over a split of :class:`ImagePair` objects.

    Relative values are computed per pair and then averaged. Pairs whose LT
    slice already equals FT under a metric are excluded from that relative
    aggregate and counted in ``aggregates['excluded_*']``.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("evaluation split is empty")
    report = MetricReport(model, fraction)
    excluded = {"rmse": 0, "issim": 0}
    degenerate = 0
    for p in pairs:
        try:
            den = np.asarray(denoise(p.lt), dtype=np.float64)
            ft = p.ft.astype(np.float64)
            lt = p.lt.astype(np.float64)
            flat = float(ft.max() - ft.min()) == 0.0
            degenerate += flat
            m = {"rmse": rmse(den, ft), "issim": issim(den, ft)}
            rel = {}
            for name in ("rmse", "issim"):
                try:
                    rel[name] = relative_metric(name, lt, ft, den)
                except ZeroDivisionError:
                    excluded[name] += 1
                    rel[name] = None
        except Exception as exc:
            raise type(exc)(f"pair {p.study_id}[{p.slice_index}]: {exc}") from exc
        report.pairs.append(PairMetrics(p.study_id, int(p.slice_index), m["rmse"], m["issim"],
                                        rel["rmse"], rel["issim"], flat))
    agg = {
        "rmse": _mean_ci(q.rmse for q in report.pairs),
        "issim": _mean_ci(q.issim for q in report.pairs),
        "rel_rmse": _mean_ci(q.rel_rmse for q in report.pairs),
        "rel_issim": _mean_ci(q.rel_issim for q in report.pairs),
        "excluded_rel_rmse": excluded["rmse"],
        "excluded_rel_issim": excluded["issim"],
        "degenerate_ssim": degenerate,
        "n_pairs": len(report.pairs),
    }
    if degenerate:
        logger.warning("%d pair(s) have a constant FT reference; SSIM uses stabilized constants", degenerate)
    report.aggregates = agg
    return report
