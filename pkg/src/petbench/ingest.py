"""DICOM study loading and the on-disk dataset layout.

Dataset root::

    manifest.json
    studies/<id>/meta.json
    studies/<id>/pet/ft_<slice>.npy, lt_<fraction>_<slice>.npy
    studies/<id>/ct/                (only when CT slices are stored)
    masks/<id>.bin                  raw uint8, C order; shape in masks/<id>.json
"""

from __future__ import annotations

import contextlib
import datetime as dt
import fcntl
import json
import os
from pathlib import Path

import numpy as np

from petbench.dataset import SPLITS, ImagePairDataset, StudyInfo, check_split_disjoint
from petbench.volumes import (
    CTVolume,
    ImagePair,
    PETVolume,
    StudyMetadata,
    UnitsTag,
    VolumeError,
    nearest_slices,
)

SCHEMA_VERSION = 1
SECONDS_PER_DAY = 86400.0


class MissingTagError(KeyError):
    def __init__(self, tag):
        super().__init__(tag)
        self.tag = tag

    def __str__(self):
        return f"required DICOM tag missing: {self.tag}"


class CorruptSeriesError(VolumeError):
    pass


class IntegrityError(RuntimeError):
    pass


class GeometryError(ValueError):
    pass


# --------------------------------------------------------------------------
# DICOM
# --------------------------------------------------------------------------

def parse_dicom_time(value) -> float:
    """Seconds since midnight for a DICOM TM string (``HHMMSS.FFFFFF``)."""
    s = str(value).strip().replace(":", "")
    if not s:
        raise ValueError("empty DICOM time")
    main, _, frac = s.partition(".")
    main = main.ljust(6, "0")
    hours, minutes, seconds = int(main[0:2]), int(main[2:4]), int(main[4:6])
    return hours * 3600 + minutes * 60 + seconds + (float("0." + frac) if frac else 0.0)


def format_dicom_time(seconds: float) -> str:
    seconds = seconds % SECONDS_PER_DAY
    whole = int(seconds)
    micro = int(round((seconds - whole) * 1e6))
    h, rem = divmod(whole, 3600)
    m, s = divmod(rem, 60)
    return f"{h:02d}{m:02d}{s:02d}.{micro:06d}"


def scan_delay(injection_time, scan_time) -> float:
    """Injection-to-scan delay in seconds, wrapping past midnight."""
    delta = parse_dicom_time(scan_time) - parse_dicom_time(injection_time)
    if delta < 0:
        delta += SECONDS_PER_DAY
    return max(delta, 0.0)


def _require(ds, name):
    value = getattr(ds, name, None)
    if value is None or value == "":
        raise MissingTagError(name)
    return value


def read_metadata(ds, time_tag: str = "SeriesTime") -> tuple[StudyMetadata, dict]:
    weight = float(_require(ds, "PatientWeight"))
    seq = getattr(ds, "RadiopharmaceuticalInformationSequence", None)
    if not seq:
        raise MissingTagError("RadiopharmaceuticalInformationSequence")
    info = seq[0]
    dose_bq = float(_require(info, "RadionuclideTotalDose"))
    half_life = float(_require(info, "RadionuclideHalfLife"))
    injection = _require(info, "RadiopharmaceuticalStartTime")
    scan = _require(ds, time_tag)
    meta = StudyMetadata(weight, dose_bq / 1e6, half_life, scan_delay(injection, scan))
    return meta, {"injection_time": str(injection), "scan_time": str(scan), "time_tag": time_tag}


def _read_series(files):
    import pydicom

    slices = [pydicom.dcmread(str(f)) for f in files]

    def position(ds):
        pos = getattr(ds, "ImagePositionPatient", None)
        if pos is not None:
            return float(pos[2])
        return float(getattr(ds, "InstanceNumber", 0))

    slices.sort(key=position)
    shapes = {(int(s.Rows), int(s.Columns)) for s in slices}
    if len(shapes) != 1:
        raise CorruptSeriesError(f"inconsistent in-plane shapes in series: {sorted(shapes)}")
    data = np.stack([
        s.pixel_array.astype(np.float64) * float(getattr(s, "RescaleSlope", 1.0))
        + float(getattr(s, "RescaleIntercept", 0.0))
        for s in slices
    ])
    first = slices[0]
    dy, dx = (float(v) for v in getattr(first, "PixelSpacing", (1.0, 1.0)))
    if len(slices) > 1:
        dz = abs(position(slices[1]) - position(slices[0])) or float(getattr(first, "SliceThickness", 3.75))
    else:
        dz = float(getattr(first, "SliceThickness", 3.75))
    return slices, data, (dx, dy, dz)


def load_study(path, time_tag: str = "SeriesTime"):
    """Load a PET (and optional CT) series from a directory of DICOM files.

    Returns ``(PETVolume[RAW], CTVolume | None, StudyMetadata)``. The
    radionuclide dose is converted from Bq to MBq.
    """
    import pydicom

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    files = sorted(p for p in path.rglob("*.dcm") if p.is_file())
    groups = {"PT": [], "CT": []}
    for f in files:
        modality = pydicom.dcmread(str(f), stop_before_pixels=True).Modality
        groups.setdefault(modality, []).append(f)
    if not groups["PT"]:
        raise CorruptSeriesError(f"no PET slices under {path}")
    pet_slices, pet_data, pet_spacing = _read_series(groups["PT"])
    meta, _ = read_metadata(pet_slices[0], time_tag)
    duration_ms = getattr(pet_slices[0], "ActualFrameDuration", None)
    frame = float(duration_ms) / 1000.0 if duration_ms else 90.0
    pet = PETVolume(pet_data, pet_spacing, frame, UnitsTag.RAW)
    ct = None
    if groups["CT"]:
        _, ct_data, ct_spacing = _read_series(groups["CT"])
        ct = CTVolume(ct_data, ct_spacing)
    return pet, ct, meta


def write_study(path, pet: np.ndarray, meta: StudyMetadata | None, spacing=(2.0, 2.0, 3.75),
                injection_time: str = "100000", frame_seconds: float = 90.0, ct: np.ndarray | None = None,
                study_id: str = "synthetic", omit=()):
    """Write a minimal DICOM archive (PET, optional CT) readable by :func:`load_study`.

    ``omit`` lists top-level tags to leave out, for testing error paths.
    """
    import pydicom
    from pydicom.dataset import Dataset, FileMetaDataset
    from pydicom.uid import ExplicitVRLittleEndian, generate_uid

    path = Path(path)
    study_uid = generate_uid()
    scan_time = format_dicom_time(parse_dicom_time(injection_time) + (meta.delta_t if meta else 0.0))

    def write_series(kind, data, spacing_, sop_class):
        folder = path / kind.lower()
        folder.mkdir(parents=True, exist_ok=True)
        series_uid = generate_uid()
        dx, dy, dz = spacing_
        for z, plane in enumerate(np.asarray(data, dtype=np.float64)):
            lo, hi = float(plane.min()), float(plane.max())
            intercept = lo if kind == "CT" else 0.0
            span = hi - intercept
            slope = span / 65535.0 if span > 0 else 1.0
            pixels = np.round((plane - intercept) / slope).astype(np.uint16)

            fm = FileMetaDataset()
            fm.MediaStorageSOPClassUID = sop_class
            fm.MediaStorageSOPInstanceUID = generate_uid()
            fm.TransferSyntaxUID = ExplicitVRLittleEndian
            ds = Dataset()
            ds.file_meta = fm
            ds.SOPClassUID = sop_class
            ds.SOPInstanceUID = fm.MediaStorageSOPInstanceUID
            ds.StudyInstanceUID = study_uid
            ds.SeriesInstanceUID = series_uid
            ds.PatientID = study_id
            ds.Modality = "PT" if kind == "PET" else "CT"
            ds.InstanceNumber = z + 1
            ds.ImagePositionPatient = [0.0, 0.0, z * dz]
            ds.PixelSpacing = [dy, dx]
            ds.SliceThickness = dz
            ds.Rows, ds.Columns = pixels.shape
            ds.SamplesPerPixel = 1
            ds.PhotometricInterpretation = "MONOCHROME2"
            ds.BitsAllocated = 16
            ds.BitsStored = 16
            ds.HighBit = 15
            ds.PixelRepresentation = 0
            ds.RescaleSlope = f"{slope:.10g}"
            ds.RescaleIntercept = f"{intercept:.10g}"
            ds.PixelData = pixels.tobytes()
            if kind == "PET":
                ds.SeriesTime = scan_time
                ds.AcquisitionTime = scan_time
                ds.ActualFrameDuration = int(round(frame_seconds * 1000))
                if meta is not None:
                    ds.PatientWeight = f"{meta.weight:.6g}"
                    info = Dataset()
                    info.RadionuclideTotalDose = f"{meta.total_dose * 1e6:.10g}"
                    info.RadionuclideHalfLife = f"{meta.half_life:.10g}"
                    info.RadiopharmaceuticalStartTime = format_dicom_time(parse_dicom_time(injection_time))
                    ds.RadiopharmaceuticalInformationSequence = [info]
                for tag in omit:
                    if tag in ds:
                        delattr(ds, tag)
            pydicom.dcmwrite(str(folder / f"{z:04d}.dcm"), ds, enforce_file_format=True)

    write_series("PET", pet, spacing, "1.2.840.10008.5.1.4.1.1.128")
    if ct is not None:
        write_series("CT", ct, spacing, "1.2.840.10008.5.1.4.1.1.2")
    return path


# --------------------------------------------------------------------------
# Dataset layout
# --------------------------------------------------------------------------

@contextlib.contextmanager
def dataset_lock(root):
    """Advisory single-writer lock on a dataset root."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / ".lock", "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _frac_key(fraction: float) -> str:
    return f"{fraction:.6f}"


def _meta_to_dict(meta: StudyMetadata | None):
    if meta is None:
        return None
    return {"weight": meta.weight, "total_dose": meta.total_dose, "half_life": meta.half_life,
            "delta_t": meta.delta_t}


def save_mask(root, study_id: str, mask) -> Path:
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    folder = Path(root) / "masks"
    folder.mkdir(parents=True, exist_ok=True)
    target = folder / f"{study_id}.bin"
    target.write_bytes(mask.tobytes())
    (folder / f"{study_id}.json").write_text(json.dumps({"shape": list(mask.shape), "dtype": "uint8"}))
    return target


def read_mask(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path).astype(bool)
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        raise IntegrityError(f"mask {path} has no shape sidecar {sidecar.name}")
    info = json.loads(sidecar.read_text())
    raw = np.frombuffer(path.read_bytes(), dtype=np.dtype(info.get("dtype", "uint8")))
    shape = tuple(info["shape"])
    if raw.size != int(np.prod(shape)):
        raise IntegrityError(f"mask {path} has {raw.size} values, sidecar says {shape}")
    return raw.reshape(shape).astype(bool)


def save_dataset(dataset: ImagePairDataset, root) -> dict:
    """Write ``dataset`` under ``root`` and return the manifest dict."""
    if len(dataset) == 0:
        raise ValueError("refusing to save an empty dataset")
    check_split_disjoint(dataset.pairs)
    root = Path(root)
    with dataset_lock(root):
        entries = []
        for sid, info in dataset.studies.items():
            study_dir = root / "studies" / sid
            (study_dir / "pet").mkdir(parents=True, exist_ok=True)
            slices = {}
            files = []
            for p in dataset.pairs:
                if p.study_id != sid:
                    continue
                rec = slices.setdefault(p.slice_index, {"slice_index": int(p.slice_index), "ft": None, "lt": {}})
                if rec["ft"] is None:
                    rel = f"pet/ft_{p.slice_index:04d}.npy"
                    np.save(study_dir / rel, p.ft)
                    rec["ft"] = rel
                    files.append(f"studies/{sid}/{rel}")
                rel = f"pet/lt_{_frac_key(p.fraction)}_{p.slice_index:04d}.npy"
                np.save(study_dir / rel, p.lt)
                rec["lt"][repr(float(p.fraction))] = rel
                files.append(f"studies/{sid}/{rel}")
            mask_rel = None
            if info.mask is not None:
                save_mask(root, sid, info.mask)
                mask_rel = f"masks/{sid}.bin"
                files.append(mask_rel)
            meta = {
                "study_id": sid,
                "split": info.split,
                "spacing": list(info.spacing),
                "frame_seconds": info.frame_seconds,
                "metadata": _meta_to_dict(info.metadata),
                "mask": mask_rel,
                "extra": info.extra,
                "slices": [slices[k] for k in sorted(slices)],
            }
            (study_dir / "meta.json").write_text(json.dumps(meta, indent=1))
            files.append(f"studies/{sid}/meta.json")
            entries.append({"study_id": sid, "split": info.split, "frame_seconds": info.frame_seconds,
                            "files": files})
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "entries": entries,
            "counts": dataset.counts(),
            "fractions": dataset.fractions(),
            "n_pairs": len(dataset),
        }
        tmp = root / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=1))
        os.replace(tmp, root / "manifest.json")
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise IntegrityError(f"no manifest.json under {root}")
    manifest = json.loads(path.read_text())
    check_split_disjoint(manifest["entries"])
    missing = [f for e in manifest["entries"] for f in e["files"] if not (Path(root) / f).exists()]
    if missing:
        raise IntegrityError(f"manifest references missing files: {missing[:5]}"
                             + (" ..." if len(missing) > 5 else ""))
    return manifest


def load_dataset(root) -> ImagePairDataset:
    root = Path(root)
    manifest = read_manifest(root)
    pairs, studies = [], {}
    for entry in manifest["entries"]:
        sid = entry["study_id"]
        study_dir = root / "studies" / sid
        meta = json.loads((study_dir / "meta.json").read_text())
        if meta["split"] != entry["split"]:
            raise IntegrityError(f"study {sid}: manifest split {entry['split']} != meta split {meta['split']}")
        md = meta.get("metadata")
        mask = read_mask(root / meta["mask"]) if meta.get("mask") else None
        studies[sid] = StudyInfo(sid, meta["split"], tuple(meta["spacing"]), meta["frame_seconds"],
                                 StudyMetadata(**md) if md else None, mask, meta.get("extra", {}))
        for rec in meta["slices"]:
            ft = np.load(study_dir / rec["ft"])
            for frac, rel in rec["lt"].items():
                pairs.append(ImagePair(np.load(study_dir / rel), ft, sid, rec["slice_index"],
                                       meta["split"], float(frac)))
    ds = ImagePairDataset(pairs, studies)
    if ds.counts() != {s: manifest["counts"].get(s, 0) for s in SPLITS}:
        raise IntegrityError("per-split study counts disagree with the manifest")
    return ds


def import_mask(path, reference: PETVolume) -> np.ndarray:
    """Load a binary mask and align it in-plane to ``reference`` by nearest neighbour."""
    mask = read_mask(path) if not isinstance(path, np.ndarray) else path.astype(bool)
    if mask.ndim != 3:
        raise GeometryError(f"mask must be 3D, got shape {mask.shape}")
    if mask.shape[0] != reference.shape[0]:
        raise GeometryError(f"mask has {mask.shape[0]} slices, reference has {reference.shape[0]}")
    if mask.shape[1:] != reference.shape[1:]:
        mask = nearest_slices(mask, reference.shape[1:])
    if mask.shape != reference.shape:
        raise GeometryError(f"mask shape {mask.shape} does not match reference {reference.shape}")
    return mask.astype(bool)
