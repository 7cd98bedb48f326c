"""Paired slice dataset with per-study geometry."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from petbench.volumes import ImagePair, PETVolume, StudyMetadata, UnitsTag

SPLITS = ("train", "val", "test")


class SplitError(ValueError):
    """Study appears in more than one split."""


@dataclass
class StudyInfo:
    study_id: str
    split: str
    spacing: tuple[float, float, float]
    frame_seconds: float = 90.0
    metadata: StudyMetadata | None = None
    mask: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


@dataclass
class ImagePairDataset:
    pairs: list[ImagePair]
    studies: dict[str, StudyInfo] = field(default_factory=dict)

    def __post_init__(self):
        for p in self.pairs:
            if p.study_id not in self.studies:
                self.studies[p.study_id] = StudyInfo(p.study_id, p.split, (2.0, 2.0, 3.75))
        check_split_disjoint(self.pairs)

    def __len__(self):
        return len(self.pairs)

    def split(self, name: str, fraction: float | None = None) -> list[ImagePair]:
        out = [p for p in self.pairs if p.split == name]
        if fraction is not None:
            out = [p for p in out if np.isclose(p.fraction, fraction)]
        return out

    def fractions(self) -> list[float]:
        seen = []
        for p in self.pairs:
            if not any(np.isclose(p.fraction, f) for f in seen):
                seen.append(p.fraction)
        return sorted(seen)

    def study_ids(self, split: str | None = None) -> list[str]:
        return [s for s, info in self.studies.items() if split is None or info.split == split]

    def counts(self) -> dict:
        c = Counter(info.split for info in self.studies.values())
        return {s: c.get(s, 0) for s in SPLITS}

    def study_pairs(self, study_id: str, fraction: float) -> list[ImagePair]:
        pairs = [p for p in self.pairs if p.study_id == study_id and np.isclose(p.fraction, fraction)]
        return sorted(pairs, key=lambda p: p.slice_index)

    def volume(self, study_id: str, which: str = "ft", fraction: float | None = None, slices=None) -> PETVolume:
        """Stack a study's slices (axial order) into a 3D SUV volume."""
        fraction = self.fractions()[0] if fraction is None else fraction
        pairs = self.study_pairs(study_id, fraction)
        if not pairs:
            raise KeyError(f"no pairs for study {study_id!r} at fraction {fraction}")
        info = self.studies[study_id]
        if slices is None:
            slices = [getattr(p, which) for p in pairs]
        frame = info.frame_seconds if which == "ft" else info.frame_seconds * fraction
        return PETVolume(np.stack(slices), info.spacing, frame, UnitsTag.SUV)


def check_split_disjoint(entries) -> None:
    """Raise :class:`SplitError` if any study id carries two split labels."""
    seen = {}
    for e in entries:
        sid, split = (e.study_id, e.split) if hasattr(e, "study_id") else (e["study_id"], e["split"])
        if split not in SPLITS:
            raise SplitError(f"unknown split {split!r} for study {sid}")
        if seen.setdefault(sid, split) != split:
            raise SplitError(f"study {sid} appears in both {seen[sid]} and {split}")
