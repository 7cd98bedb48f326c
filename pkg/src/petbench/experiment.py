"""Experiment configuration, orchestration and report/plot-data emission."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import traceback
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from petbench import kernels
from petbench import losses as L
from petbench import training as T
from petbench.dataset import ImagePairDataset
from petbench.ingest import import_mask, load_dataset, save_dataset
from petbench.lesions import AgreementStats, ols_fit, suv_pipeline
from petbench.metrics import MetricReport, evaluate_model, gaussian_baseline, tune_gaussian_sigma
from petbench.models import ArchConfig, count_parameters, preset
from petbench.phantom import PhantomSpec, make_paired_dataset, random_phantom_spec

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
LT_VS_FT = "LT vs FT"
GAUSSIAN = "Gaussian"


class ExperimentConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class PhantomSetConfig:
    n_phantoms: int = 20
    splits: tuple[int, int, int] = (16, 2, 2)
    shape: tuple[int, int, int] = (32, 64, 64)
    spacing: tuple[float, float, float] = (4.0, 4.0, 4.0)
    kappa: float = 1.0
    psf_fwhm_mm: float = 8.0
    n_spheres: tuple[int, int] = (3, 5)
    diameters: tuple[float, float] = (10.0, 37.0)
    uptakes: tuple[float, float] = (3.0, 8.0)
    fractions: tuple[float, ...] = (1.0 / 3.0,)

    def __post_init__(self):
        for name in ("splits", "shape", "spacing", "n_spheres", "diameters", "uptakes", "fractions"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.n_phantoms < 1 or sum(self.splits) != self.n_phantoms:
            raise ExperimentConfigError(f"splits {tuple(self.splits)} must sum to n_phantoms={self.n_phantoms}")

    def build(self, seed: int) -> ImagePairDataset:
        rng = np.random.default_rng([seed, 7])
        specs = []
        for _ in range(self.n_phantoms):
            s = random_phantom_spec(self.shape, self.spacing, rng=rng, n_spheres=self.n_spheres,
                                    diameters=self.diameters, uptakes=self.uptakes, kappa=self.kappa)
            specs.append(PhantomSpec(**{**s.to_dict(), "spheres": s.spheres, "psf_fwhm_mm": self.psf_fwhm_mm}))
        return make_paired_dataset(specs, self.fractions, splits=tuple(self.splits), seed=seed)


@dataclass
class ModelSpec:
    """One trained row of the benchmark.

    ``arch`` is a preset name or an :class:`ArchConfig` dict; ``train`` a
    training preset name or dict; ``loss`` a mode name or dict. ``overrides``
    patch the resolved configs using ``train.x`` / ``loss.y`` / ``arch.z`` keys.
    """

    name: str
    arch: str | dict = "resnet_ed_small"
    train: str | dict = "resnet_ed"
    loss: str | dict | None = None
    overrides: dict = field(default_factory=dict)
    zero_head: bool = True

    def resolve(self, seed: int) -> tuple[ArchConfig, T.TrainConfig, L.LossConfig]:
        over = {"arch": {}, "train": {}, "loss": {}}
        for key, value in self.overrides.items():
            scope, _, name = key.partition(".")
            if scope not in over or not name:
                raise ExperimentConfigError(f"override {key!r} must start with arch., train. or loss.")
            over[scope][name] = value
        if isinstance(self.arch, str):
            arch = preset(self.arch, **over["arch"])
        else:
            arch = ArchConfig.from_dict({**self.arch, **over["arch"]})
        if isinstance(self.train, str):
            tcfg = T.train_preset(self.train)
        else:
            tcfg = T.TrainConfig.from_dict(dict(self.train))
        tcfg = T.TrainConfig.from_dict({**tcfg.to_dict(), "seed": seed, **over["train"]})
        if self.loss is None:
            lcfg = L.loss_preset(tcfg.mode)
        elif isinstance(self.loss, str):
            lcfg = L.loss_preset(self.loss)
        else:
            lcfg = L.LossConfig.from_dict(dict(self.loss))
        lcfg = L.LossConfig.from_dict({**lcfg.to_dict(), **over["loss"]})
        if lcfg.mode is not tcfg.mode:
            raise ExperimentConfigError(f"{self.name}: loss mode {lcfg.mode.value} != train mode {tcfg.mode.value}")
        return arch, tcfg, lcfg


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    data: str | None = None  # dataset root; None means simulate phantoms
    phantoms: PhantomSetConfig | None = None
    fractions: list[float] | None = None
    models: list[ModelSpec] = field(default_factory=list)
    gaussian: bool = True
    gaussian_sigma: float | None = None  # None: tuned on the validation split
    evaluate_2d: bool = True
    suv: bool = True
    suv_threshold: float = 2.5
    lesion_rule: str = "and"
    masks: str | None = None  # None: stored study masks; "auto": threshold; else a masks directory
    out_dir: str | None = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ExperimentConfigError(f"unsupported config schema {self.schema_version}")
        if isinstance(self.phantoms, dict):
            self.phantoms = PhantomSetConfig(**self.phantoms)
        self.models = [m if isinstance(m, ModelSpec) else ModelSpec(**m) for m in self.models]
        names = [m.name for m in self.models]
        if len(set(names)) != len(names) or {LT_VS_FT, GAUSSIAN} & set(names):
            raise ExperimentConfigError(f"model names must be unique and not reserved: {names}")
        if self.data is None and self.phantoms is None:
            self.phantoms = PhantomSetConfig()
        if self.lesion_rule not in ("and", "or"):
            raise ExperimentConfigError("lesion_rule must be 'and' or 'or'")
        for m in self.models:
            m.resolve(self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def smoke_config(seed: int = 0, epochs: int = 10, out_dir=None) -> ExperimentConfig:
    """Small phantom benchmark: one reduced ResNet-ED against the baselines."""
    model = ModelSpec("ResNet-ED (small)", "resnet_ed_small", "resnet_ed",
                      overrides={"train.epochs": epochs, "train.batch_size": 4, "train.max_lr": 3e-4,
                                 "train.rotate": "right"})
    return ExperimentConfig("smoke", seed, phantoms=PhantomSetConfig(), models=[model],
                            out_dir=None if out_dir is None else str(out_dir))


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

@dataclass
class ReportRow:
    name: str
    kind: str  # "baseline" | "model"
    fraction: float
    run_id: str | None = None
    metrics: MetricReport | None = None
    suv_max: AgreementStats | None = None
    suv_peak: AgreementStats | None = None
    lesion_pairs: dict = field(default_factory=dict)  # metric -> [[original, denoised], ...]
    error: str | None = None

    @property
    def completed(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "fraction": self.fraction,
            "run_id": self.run_id,
            "metrics": None if self.metrics is None else self.metrics.to_dict(),
            "suv_max": None if self.suv_max is None else self.suv_max.to_dict(),
            "suv_peak": None if self.suv_peak is None else self.suv_peak.to_dict(),
            "lesion_pairs": self.lesion_pairs,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReportRow":
        return cls(
            d["name"], d["kind"], d["fraction"], d.get("run_id"),
            None if d.get("metrics") is None else MetricReport.from_dict(d["metrics"]),
            None if d.get("suv_max") is None else AgreementStats.from_dict(d["suv_max"]),
            None if d.get("suv_peak") is None else AgreementStats.from_dict(d["suv_peak"]),
            dict(d.get("lesion_pairs", {})), d.get("error"),
        )


@dataclass
class BenchReport:
    name: str
    seed: int
    manifest_hash: str
    config_hash: str
    env: dict
    rows: list[ReportRow] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    @property
    def all_completed(self) -> bool:
        return all(r.completed for r in self.rows if r.kind == "model")

    def row(self, name: str, fraction: float | None = None) -> ReportRow:
        for r in self.rows:
            if r.name == name and (fraction is None or np.isclose(r.fraction, fraction)):
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "name": self.name,
            "seed": self.seed,
            "manifest_hash": self.manifest_hash,
            "config_hash": self.config_hash,
            "env": self.env,
            "rows": [r.to_dict() for r in self.rows],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ExperimentConfigError(f"unsupported report schema {d.get('schema_version')}")
        return cls(d["name"], d["seed"], d["manifest_hash"], d["config_hash"], dict(d["env"]),
                   [ReportRow.from_dict(r) for r in d["rows"]], d["schema_version"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "BenchReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def table(self) -> str:
        """Plain-text summary in the layout of the similarity and SUV tables."""
        head = (f"{'model':<22} {'frac':>5} {'RMSE':>8} {'ISSIM':>8} {'relRMSE%':>9} {'relISSIM%':>10} "
                f"{'SUVmax bias':>11} {'IQR':>7} {'1-R2':>7} {'SUVpeak bias':>12} {'IQR':>7} {'1-R2':>7}")
        lines = [head, "-" * len(head)]

        def fmt(v, spec):
            return format(v, spec) if v is not None else "-".rjust(len(format(0.0, spec)))

        for r in self.rows:
            if r.error:
                lines.append(f"{r.name:<22} {r.fraction:>5.2f} ERROR: {r.error.splitlines()[0]}")
                continue
            agg = r.metrics.aggregates if r.metrics else {}

            def m(key):
                return agg.get(key, {}).get("mean") if agg else None

            cells = [fmt(m("rmse"), "8.4f"), fmt(m("issim"), "8.4f"), fmt(m("rel_rmse"), "9.2f"),
                     fmt(m("rel_issim"), "10.2f")]
            for st in (r.suv_max, r.suv_peak):
                w = 11 if st is r.suv_max else 12
                cells += [fmt(st.median_bias if st else None, f"{w}.4f"), fmt(st.iqr if st else None, "7.4f"),
                          fmt(None if st is None or st.r2 is None else 1 - st.r2, "7.4f")]
            lines.append(f"{r.name:<22} {r.fraction:>5.2f} " + " ".join(cells))
        return "\n".join(lines)


def dataset_hash(ds: ImagePairDataset) -> str:
    """Content hash over every slice, split label and study geometry."""
    h = hashlib.sha256()
    for p in sorted(ds.pairs, key=lambda p: (p.study_id, p.fraction, p.slice_index)):
        h.update(f"{p.study_id}|{p.split}|{p.fraction!r}|{p.slice_index}|".encode())
        h.update(np.ascontiguousarray(p.lt, dtype=np.float32).tobytes())
        h.update(np.ascontiguousarray(p.ft, dtype=np.float32).tobytes())
    for sid in sorted(ds.studies):
        info = ds.studies[sid]
        h.update(f"{sid}|{info.split}|{tuple(info.spacing)}|{info.frame_seconds}".encode())
        if info.mask is not None:
            h.update(np.packbits(np.asarray(info.mask, dtype=bool)).tobytes())
    return h.hexdigest()


def environment() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "kernel_backend": kernels.BACKEND,
    }


def _config_hash(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    d.pop("out_dir", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def load_or_simulate(cfg: ExperimentConfig, data_root=None) -> ImagePairDataset:
    root = data_root or cfg.data
    if root is not None:
        return load_dataset(root)
    return cfg.phantoms.build(cfg.seed)


def _study_mask(ds: ImagePairDataset, sid: str, masks, reference):
    if masks is None:
        return ds.studies[sid].mask
    if masks == "auto":
        return None
    path = Path(masks) / f"{sid}.bin"
    if not path.exists():
        path = Path(masks) / f"{sid}.npy"
    if not path.exists():
        raise FileNotFoundError(f"no mask for study {sid} under {masks}")
    return import_mask(path, reference)


def _suv_rows(ds: ImagePairDataset, fraction: float, denoise_many, threshold, rule, masks=None) -> dict:
    """SUVmax / SUVpeak agreement of ``denoise_many`` on the test studies (FT as original)."""
    cases = []
    for sid in ds.study_ids("test"):
        pairs = ds.study_pairs(sid, fraction)
        if not pairs:
            continue
        original = ds.volume(sid, "ft", fraction)
        denoised = ds.volume(sid, "lt", fraction, slices=[np.asarray(s, dtype=np.float32)
                                                          for s in denoise_many([p.lt for p in pairs])])
        cases.append((sid, original, denoised, _study_mask(ds, sid, masks, original)))
    return suv_pipeline(cases, threshold=threshold, rule=rule)


def evaluate_row(name, kind, ds, fraction, denoise_many, cfg: ExperimentConfig, run_id=None) -> ReportRow:
    """Score one denoiser on the test split in 2D and on lesions in 3D."""
    row = ReportRow(name, kind, float(fraction), run_id)
    test = ds.split("test", fraction)
    if cfg.evaluate_2d:
        if not test:
            raise ExperimentConfigError(f"no test pairs at fraction {fraction}")
        den = denoise_many([p.lt for p in test])
        lookup = {id(p.lt): d for p, d in zip(test, den)}
        row.metrics = evaluate_model(lambda lt: lookup[id(lt)], test, name, fraction)
    if cfg.suv:
        res = _suv_rows(ds, fraction, denoise_many, cfg.suv_threshold, cfg.lesion_rule, cfg.masks)
        row.suv_max, row.suv_peak = res["suv_max"], res["suv_peak"]
        row.lesion_pairs = {k: res[f"{k}_pairs"].tolist() for k in ("suv_max", "suv_peak")}
    return row


def _identity_many(slices):
    return [np.asarray(s, dtype=np.float64) for s in slices]


def train_model(spec: ModelSpec, ds: ImagePairDataset, fraction: float, seed: int, out_dir=None):
    """Build and train one model row; returns ``(generator, RunRecord)``."""
    arch, tcfg, lcfg = spec.resolve(seed)
    tcfg = T.TrainConfig.from_dict({**tcfg.to_dict(), "fraction": fraction})
    models = T.build_for_mode(arch, tcfg)
    G = models["G"]
    if count_parameters(G) == 0:
        # fixed maps (identity stub) have nothing to fit
        record = T.RunRecord(arch.to_dict(), tcfg.to_dict(), lcfg.to_dict(), extra={"trained": False})
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            T.save_checkpoint(out_dir / "checkpoint.pt", {"G": G})
            record.checkpoint, record.run_id = "checkpoint.pt", out_dir.name
            record.save(out_dir / "run.json")
        return G.eval(), record
    if spec.zero_head and G.is_generator and G.head() is not None:
        G.zero_head()
    record = T.train(models, ds, tcfg, lcfg, out_dir=out_dir)
    return G, record


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name).strip("_").lower() or "row"


def run_id_for(spec: ModelSpec, fraction: float) -> str:
    return f"{_slug(spec.name)}_f{fraction:.3f}"


def _error_text(exc) -> str:
    return f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"


def train_all(cfg, data_root=None, out_dir=None) -> dict:
    """Train every configured model at every fraction; returns ``{run_id: error or None}``."""
    if not isinstance(cfg, ExperimentConfig):
        cfg = ExperimentConfig.load(cfg)
    out = Path(out_dir or cfg.out_dir or "runs")
    ds = load_or_simulate(cfg, data_root)
    status = {}
    for frac in cfg.fractions or ds.fractions():
        for spec in cfg.models:
            run_id = run_id_for(spec, frac)
            try:
                train_model(spec, ds, frac, cfg.seed, out / run_id)
                status[run_id] = None
            except Exception as exc:
                logger.error("model %s failed: %s", spec.name, exc)
                status[run_id] = _error_text(exc)
    return status


def _run_rows(run_dirs, ds, frac, cfg) -> list[ReportRow]:
    rows = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        try:
            record, models = T.load_run(run_dir)
            trained_on = record.train.get("fraction")
            if trained_on is not None and not np.isclose(trained_on, frac):
                continue
            name = record.run_id or run_dir.name
            rows.append(evaluate_row(name, "model", ds, frac, T.Denoiser(models["G"]).many, cfg, name))
        except Exception as exc:
            logger.error("run %s failed: %s", run_dir, exc)
            rows.append(ReportRow(run_dir.name, "model", float(frac), run_dir.name, error=_error_text(exc)))
    return rows


def run_experiment(cfg, data_root=None, out_dir=None, runs_dir=None, evaluate_2d=None, suv=None,
                   run_dirs=None, masks=None) -> BenchReport:
    """Simulate or load data, train each model, and score everything on the test split.

    With ``runs_dir`` the generators are loaded from ``runs_dir/<run_id>``
    instead of being trained. ``run_dirs`` replaces the configured models by
    explicit run directories. A failing model produces a row with ``error``
    set; the remaining rows still run.
    """
    if not isinstance(cfg, ExperimentConfig):
        cfg = ExperimentConfig.load(cfg)
    overrides = {k: v for k, v in (("evaluate_2d", evaluate_2d), ("suv", suv), ("masks", masks)) if v is not None}
    if overrides:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), **overrides})
    out = Path(out_dir or cfg.out_dir) if (out_dir or cfg.out_dir) else None
    ds = load_or_simulate(cfg, data_root)
    fractions = cfg.fractions or ds.fractions()
    report = BenchReport(cfg.name, cfg.seed, dataset_hash(ds), _config_hash(cfg), environment())

    for frac in fractions:
        report.rows.append(evaluate_row(LT_VS_FT, "baseline", ds, frac, _identity_many, cfg))
        if cfg.gaussian:
            sigma = cfg.gaussian_sigma
            if sigma is None:
                val = ds.split("val", frac)
                sigma = tune_gaussian_sigma(val) if val else 1.0
            row = evaluate_row(GAUSSIAN, "baseline", ds, frac,
                               lambda s, sg=sigma: [gaussian_baseline(x, sg) for x in s], cfg)
            row.run_id = f"sigma={sigma:g}"
            report.rows.append(row)
        if run_dirs:
            report.rows.extend(_run_rows(run_dirs, ds, frac, cfg))
            continue
        for spec in cfg.models:
            run_id = run_id_for(spec, frac)
            try:
                if runs_dir is not None:
                    _, models = T.load_run(Path(runs_dir) / run_id)
                    G = models["G"]
                else:
                    G, _ = train_model(spec, ds, frac, cfg.seed, None if out is None else out / "runs" / run_id)
                row = evaluate_row(spec.name, "model", ds, frac, T.Denoiser(G).many, cfg, run_id)
            except Exception as exc:  # isolate per-model failures
                logger.error("model %s failed: %s", spec.name, exc)
                row = ReportRow(spec.name, "model", float(frac), run_id, error=_error_text(exc))
            report.rows.append(row)

    if out is not None:
        write_report(report, out)
    return report


def write_report(report: BenchReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    (out / "report.txt").write_text(report.table() + "\n")
    return [out / "report.json", out / "report.txt"] + emit_plot_data(report, out / "plots")


# --------------------------------------------------------------------------
# plot data
# --------------------------------------------------------------------------

def emit_plot_data(report: BenchReport, out_dir) -> list[Path]:
    """Write Bland-Altman and scatter CSVs per row and SUV metric, plus line fits.

    Bland-Altman files hold ``original, denoised, mean, difference`` per lesion;
    scatter files hold ``original, denoised``; ``fits.csv`` lists the OLS slope
    and intercept of denoised on original for every scatter file.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    fits = []
    for r in report.rows:
        if r.error is not None:
            continue
        for metric in ("suv_max", "suv_peak"):
            if metric not in r.lesion_pairs:  # lesion analysis not run for this row
                continue
            p = np.asarray(r.lesion_pairs[metric], dtype=np.float64).reshape(-1, 2)
            stem = f"{_slug(r.name)}_f{r.fraction:.3f}_{metric}"
            if len(p) == 0:
                warnings.warn(f"{r.name} ({metric}): no lesions, writing header-only plot data", stacklevel=2)
            ba = out / f"bland_altman_{stem}.csv"
            with ba.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["lesion", "original", "denoised", "mean", "difference"])
                for i, (o, d) in enumerate(p.tolist()):
                    w.writerow([i, repr(o), repr(d), repr((o + d) / 2), repr(d - o)])
            sc = out / f"scatter_{stem}.csv"
            with sc.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["lesion", "original", "denoised"])
                for i, (o, d) in enumerate(p.tolist()):
                    w.writerow([i, repr(o), repr(d)])
            written += [ba, sc]
            try:
                slope, intercept = ols_fit(p[:, 0], p[:, 1]) if len(p) >= 2 else (None, None)
            except ValueError:
                slope, intercept = None, None
            stats = getattr(r, metric)
            fits.append([sc.name, len(p), slope, intercept, None if stats is None else stats.r2])
    fit_path = out / "fits.csv"
    with fit_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "n", "slope", "intercept", "r2"])
        for row in fits:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v) for v in row])
    written.append(fit_path)
    return written


def dataset_from_spec(spec, seed: int = 0) -> ImagePairDataset:
    """Build a paired dataset from explicit phantom specs.

    ``spec`` is a JSON path or object: either a list of phantom dicts or
    ``{"phantoms": [...], "fractions": [...], "splits": [n_train, n_val, n_test],
    "slices_per_phantom": n}``.
    """
    if isinstance(spec, (str, Path)):
        spec = json.loads(Path(spec).read_text())
    if isinstance(spec, list):
        spec = {"phantoms": spec}
    unknown = set(spec) - {"phantoms", "fractions", "splits", "slices_per_phantom", "seed"}
    if unknown:
        raise ExperimentConfigError(f"unknown phantom spec keys: {sorted(unknown)}")
    phantoms = [PhantomSpec.from_dict(p) for p in spec.get("phantoms", [])]
    if not phantoms:
        raise ExperimentConfigError("phantom spec lists no phantoms")
    splits = spec.get("splits")
    return make_paired_dataset(phantoms, spec.get("fractions", (1.0 / 3.0,)),
                               slices_per_phantom=spec.get("slices_per_phantom"),
                               splits=None if splits is None else tuple(splits), seed=spec.get("seed", seed))


def export_dataset(cfg: ExperimentConfig, root) -> dict:
    """Simulate the configured phantom set and persist it under ``root``."""
    ds = load_or_simulate(cfg)
    return save_dataset(ds, root)
