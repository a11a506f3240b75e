"""Cohort manifest: one CSV row per subject.

Schema: ``id,sex,age,image`` plus ``mask_<region>`` path columns and any
number of numeric covariate columns (e.g. ``lvv``, ``mmd``).  Paths are
stored as written; resolve them against a data root with
:meth:`SubjectRecord.image_path` / :meth:`SubjectRecord.mask_path`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path


class ManifestError(ValueError):
    """Raised for malformed manifests."""


_REQUIRED = ("id", "sex", "age", "image")
_SEXES = ("female", "male")


@dataclass
class SubjectRecord:
    id: str
    sex: str
    covariates: dict[str, float] = field(default_factory=dict)
    image: str = ""
    masks: dict[str, str] = field(default_factory=dict)

    @property
    def age(self) -> float | None:
        return self.covariates.get("age")

    def image_path(self, root: Path | str = ".") -> Path:
        return Path(root) / self.image

    def mask_path(self, region: str, root: Path | str = ".") -> Path:
        if region not in self.masks:
            raise ManifestError(
                f"subject {self.id}: no mask recorded for region '{region}'"
            )
        return Path(root) / self.masks[region]


@dataclass
class CohortManifest:
    records: list[SubjectRecord]
    reference_id: str | None = None

    def __post_init__(self):
        if self.reference_id is not None:
            self.get(self.reference_id)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def get(self, subject_id: str) -> SubjectRecord:
        for rec in self.records:
            if rec.id == subject_id:
                return rec
        raise ManifestError(f"subject '{subject_id}' not in manifest")

    def subset(self, sex: str | None = None) -> "CohortManifest":
        recs = [r for r in self.records if sex is None or r.sex == sex]
        ref = self.reference_id
        if ref is not None and all(r.id != ref for r in recs):
            ref = None
        return CohortManifest(recs, ref)

    def sexes(self) -> list[str]:
        seen = []
        for r in self.records:
            if r.sex not in seen:
                seen.append(r.sex)
        return seen


def read_manifest(path) -> CohortManifest:
    """Parse and validate a cohort manifest CSV."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ManifestError(f"{path}: empty manifest")
        cols = [c.strip() for c in reader.fieldnames]
        missing = [c for c in _REQUIRED if c not in cols]
        if missing:
            raise ManifestError(
                f"{path}: missing required column(s): {', '.join(missing)}"
            )
        mask_cols = [c for c in cols if c.startswith("mask_")]
        cov_cols = [c for c in cols
                    if c not in _REQUIRED and not c.startswith("mask_")]
        records: list[SubjectRecord] = []
        seen: set[str] = set()
        for lineno, row in enumerate(reader, start=2):
            sid = (row.get("id") or "").strip()
            if not sid:
                raise ManifestError(f"{path}:{lineno}: empty subject id")
            if sid in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id '{sid}'")
            seen.add(sid)
            sex = (row.get("sex") or "").strip().lower()
            if sex not in _SEXES:
                raise ManifestError(
                    f"{path}:{lineno}: sex must be one of {_SEXES}, "
                    f"got '{sex}'"
                )
            cov: dict[str, float] = {}
            age_raw = (row.get("age") or "").strip()
            if age_raw:
                try:
                    cov["age"] = float(age_raw)
                except ValueError:
                    raise ManifestError(
                        f"{path}:{lineno}: non-numeric age '{age_raw}'"
                    ) from None
            for c in cov_cols:
                raw = (row.get(c) or "").strip()
                if raw:
                    try:
                        cov[c] = float(raw)
                    except ValueError:
                        raise ManifestError(
                            f"{path}:{lineno}: non-numeric value '{raw}' in "
                            f"column '{c}'"
                        ) from None
            masks = {}
            for c in mask_cols:
                raw = (row.get(c) or "").strip()
                if raw:
                    masks[c[len("mask_"):]] = raw
            records.append(SubjectRecord(
                id=sid, sex=sex, covariates=cov,
                image=(row.get("image") or "").strip(), masks=masks,
            ))
    return CohortManifest(records)


def write_manifest(manifest: CohortManifest, path) -> None:
    """Write a manifest CSV (column order: required, masks, covariates)."""
    path = Path(path)
    mask_cols: list[str] = []
    cov_cols: list[str] = []
    for rec in manifest.records:
        for r in rec.masks:
            if f"mask_{r}" not in mask_cols:
                mask_cols.append(f"mask_{r}")
        for c in rec.covariates:
            if c != "age" and c not in cov_cols:
                cov_cols.append(c)
    cols = list(_REQUIRED) + mask_cols + cov_cols
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for rec in manifest.records:
            row = [rec.id, rec.sex,
                   "" if rec.age is None else repr(rec.age), rec.image]
            row += [rec.masks.get(c[len("mask_"):], "") for c in mask_cols]
            row += ["" if c not in rec.covariates else repr(rec.covariates[c])
                    for c in cov_cols]
            writer.writerow(row)
