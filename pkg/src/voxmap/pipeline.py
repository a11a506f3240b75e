"""Pipeline orchestration shared by the CLI and the test suite.

Every stage persists its artifacts, so later stages (analysis, rendering)
consume only files: registration outputs land under ``out/fields``,
``out/warped``, ``out/jd``, ``out/ice``; analysis outputs under
``out/analysis``.  Artifacts carry no timestamps, so reruns with identical
inputs are byte-identical.
"""

from __future__ import annotations

import csv
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .fieldstats import (StreamingMoments, dice, inverse_consistency,
                         jacobian_determinant)
from .manifest import CohortManifest, SubjectRecord
from .nifti import read_field, read_volume, write_field, write_volume
from .preprocess import (EXCLUSION_REGIONS, REQUIRED_REGIONS,
                         PreprocessedSubject, preprocess_subject)
from .registration import (EnergyTrace, bbox_affine_init, register_deformable,
                           warp, warp_labels)
from .stats import (TEMPLATE_FEATURES, associate, build_feature_matrix,
                    explicit_correlation_table, select_template)
from .supervoxels import slic_cluster, supervoxel_means
from .volume import LabelVolume, Volume, mask_bounding_box

EVAL_REGIONS = ("lv", "la", "rv", "ra", "myo")
ANALYSIS_CHANNELS = {"jd": "jd", "hu": "density"}


class PipelineError(RuntimeError):
    pass


@dataclass
class SubjectResult:
    subject_id: str
    status: str                   # ok | skipped
    reason: str = ""
    dice: dict = dc_field(default_factory=dict)
    ice_mean: float = float("nan")
    ice_sd: float = float("nan")
    ice_regions: dict = dc_field(default_factory=dict)  # region -> (mean, sd)
    mean_abs_u_vox: float = float("nan")
    n_solves: int = 0
    n_accepted: int = 0
    max_block_delta: float = 0.0
    checkpoint_error: float = 0.0


def load_subject(record: SubjectRecord, root: Path):
    """Load a subject's image and masks; errors name the missing piece."""
    img = read_volume(record.image_path(root))
    if isinstance(img, LabelVolume):
        img = Volume(img.labels.astype(np.float32), img.spacing, img.origin)
    masks = {}
    for region in record.masks:
        m = read_volume(record.mask_path(region, root))
        if isinstance(m, Volume):
            m = LabelVolume((m.values > 0.5).astype(np.int32),
                            m.spacing, m.origin)
        masks[region] = m
    missing = [r for r in REQUIRED_REGIONS if r not in masks]
    if missing:
        raise PipelineError(
            f"subject {record.id}: missing mask(s) {', '.join(missing)}"
        )
    return img, masks


def preprocess_record(record: SubjectRecord, root: Path):
    img, masks = load_subject(record, root)
    return img, masks, preprocess_subject(img, masks)


def _field_path(out_dir: Path, sid: str, reverse=False) -> Path:
    sub = "fields_reverse" if reverse else "fields"
    return out_dir / sub / f"{sid}.nii.gz"


def register_subject(ref_img, ref_masks, ref_sub: PreprocessedSubject,
                     record: SubjectRecord, root: Path, out_dir: Path,
                     stages, reverse: bool = False,
                     log=None) -> SubjectResult:
    """Register one subject to the reference and persist all artifacts."""
    sid = record.id
    try:
        flt_img, flt_masks, flt_sub = preprocess_record(record, root)
    except (PipelineError, FileNotFoundError, ValueError) as exc:
        return SubjectResult(sid, "skipped", reason=str(exc))

    trace = EnergyTrace()
    init = bbox_affine_init(mask_bounding_box(ref_masks["lv"], 1),
                            mask_bounding_box(flt_masks["lv"], 1))
    fld = register_deformable(ref_sub, flt_sub, init, stages, trace=trace)

    for d in ("fields", "warped", "jd"):
        (out_dir / d).mkdir(parents=True, exist_ok=True)
    write_field(fld.u, fld.spacing, fld.origin, _field_path(out_dir, sid))
    warped_hu = warp(flt_img, fld)
    write_volume(warped_hu, out_dir / "warped" / f"{sid}.nii.gz")
    jd = jacobian_determinant(fld)
    write_volume(jd, out_dir / "jd" / f"{sid}.nii.gz")

    result = SubjectResult(sid, "ok")
    spacing = np.asarray(fld.spacing)
    result.mean_abs_u_vox = float(
        np.mean(np.linalg.norm(fld.u / spacing, axis=3)))
    result.n_solves = trace.n_solves
    result.n_accepted = trace.n_accepted
    result.max_block_delta = trace.max_delta()
    result.checkpoint_error = trace.max_checkpoint_error()
    for region in EVAL_REGIONS + ("aorta",):
        if region in flt_masks and region in ref_masks:
            warped = warp_labels(flt_masks[region], fld)
            result.dice[region] = dice(ref_masks[region], warped)

    if reverse:
        rev_trace = EnergyTrace()
        rev_init = bbox_affine_init(
            mask_bounding_box(flt_masks["lv"], 1),
            mask_bounding_box(ref_masks["lv"], 1))
        rev = register_deformable(flt_sub, ref_sub, rev_init, stages,
                                  trace=rev_trace)
        (out_dir / "fields_reverse").mkdir(parents=True, exist_ok=True)
        write_field(rev.u, rev.spacing, rev.origin,
                    _field_path(out_dir, sid, reverse=True))
        chambers = np.zeros(ref_img.values.shape, dtype=bool)
        for r in ("lv", "rv", "la", "ra"):
            chambers |= ref_masks[r].mask()
        ice = inverse_consistency(fld, rev, chambers)
        result.ice_mean = ice.mean
        result.ice_sd = ice.sd
        full_ice = inverse_consistency(fld, rev)
        for region in EVAL_REGIONS:
            if region not in ref_masks:
                continue
            vals = full_ice.error.values[ref_masks[region].mask()]
            vals = vals[~np.isnan(vals)]
            if vals.size:
                result.ice_regions[region] = (
                    float(vals.mean()),
                    float(vals.std(ddof=1)) if vals.size > 1 else 0.0)
        (out_dir / "ice").mkdir(parents=True, exist_ok=True)
        ice_vals = np.nan_to_num(full_ice.error.values, nan=0.0)
        write_volume(Volume(ice_vals, fld.spacing, fld.origin),
                     out_dir / "ice" / f"{sid}.nii.gz")

    if log is not None:
        dtxt = " ".join(f"{r}={v:.3f}" for r, v in result.dice.items())
        log(f"[{sid}] registered: {dtxt}")
    return result


def run_register(manifest: CohortManifest, reference_id: str,
                 cfg: PipelineConfig, out_dir: Path | None = None,
                 reverse: bool = False, subjects=None,
                 log=None) -> list[SubjectResult]:
    """Register every non-reference subject; skipped subjects are reported.

    Also writes the QC CSV, the aggregated per-region stats CSV, and the
    voxel-wise aggregate maps (HU/JD mean and SD, plus ICE mean when
    reverse registrations were run).
    """
    out_dir = Path(out_dir if out_dir is not None else cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = cfg.data_root
    ref_rec = manifest.get(reference_id)
    ref_img, ref_masks, ref_sub = preprocess_record(ref_rec, root)

    todo = [r for r in manifest
            if (subjects is None or r.id in subjects)]
    if not any(r.id == reference_id for r in manifest):
        raise PipelineError(f"reference '{reference_id}' not in manifest")

    print_lock = threading.Lock()

    def locked_log(msg):
        if log is not None:
            with print_lock:
                log(msg)

    def work(rec: SubjectRecord) -> SubjectResult:
        if rec.id == reference_id:
            # self-inclusion: the reference registers to itself too
            pass
        return register_subject(ref_img, ref_masks, ref_sub, rec, root,
                                out_dir, cfg.stages, reverse=reverse,
                                log=locked_log if log else None)

    if cfg.jobs > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(work, todo))
    else:
        results = [work(rec) for rec in todo]

    _write_qc(results, out_dir / "qc.csv")
    _write_region_stats(results, out_dir / "region_stats.csv")
    _write_aggregates(results, out_dir)
    return results


def _write_qc(results, path: Path):
    regions = EVAL_REGIONS + ("aorta",)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "status", "reason"]
                   + [f"dice_{r}" for r in regions]
                   + ["ice_mean", "ice_sd", "mean_abs_u_vox",
                      "n_solves", "n_accepted", "max_block_delta",
                      "checkpoint_error"])
        for r in results:
            w.writerow(
                [r.subject_id, r.status, r.reason]
                + [f"{r.dice.get(reg, float('nan')):.6f}" for reg in regions]
                + [f"{r.ice_mean:.6f}", f"{r.ice_sd:.6f}",
                   f"{r.mean_abs_u_vox:.6f}", r.n_solves, r.n_accepted,
                   f"{r.max_block_delta:.3g}", f"{r.checkpoint_error:.3g}"])


def _write_region_stats(results, path: Path):
    ok = [r for r in results if r.status == "ok"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["region", "dice_mean", "dice_sd", "ice_mean", "ice_sd"])
        for region in EVAL_REGIONS:
            ds = np.array([r.dice[region] for r in ok if region in r.dice])
            ices = np.array([r.ice_regions[region][0] for r in ok
                             if region in r.ice_regions])
            if ds.size == 0:
                continue
            w.writerow([
                region, f"{ds.mean():.6f}",
                f"{ds.std(ddof=1) if ds.size > 1 else 0.0:.6f}",
                f"{ices.mean():.6f}" if ices.size else "nan",
                f"{ices.std(ddof=1) if ices.size > 1 else 0.0:.6f}"
                if ices.size else "nan",
            ])


def _write_aggregates(results, out_dir: Path):
    ok = [r for r in results if r.status == "ok"]
    if not ok:
        return
    agg_dir = out_dir / "aggregate"
    agg_dir.mkdir(parents=True, exist_ok=True)
    hu_m, jd_m, ice_m = StreamingMoments(), StreamingMoments(), \
        StreamingMoments()
    for r in ok:
        hu_m.add(read_volume(out_dir / "warped" / f"{r.subject_id}.nii.gz"))
        jd_m.add(read_volume(out_dir / "jd" / f"{r.subject_id}.nii.gz"))
        ice_path = out_dir / "ice" / f"{r.subject_id}.nii.gz"
        if ice_path.exists():
            ice_m.add(read_volume(ice_path))
    write_volume(hu_m.mean(), agg_dir / "hu_mean.nii.gz")
    write_volume(hu_m.sd(), agg_dir / "hu_sd.nii.gz")
    write_volume(jd_m.mean(), agg_dir / "jd_mean.nii.gz")
    write_volume(jd_m.sd(), agg_dir / "jd_sd.nii.gz")
    if ice_m.n:
        write_volume(ice_m.mean(), agg_dir / "ice_mean.nii.gz")


# ---------------------------------------------------------------------------
# Template selection
# ---------------------------------------------------------------------------

def run_select_template(manifest: CohortManifest, stratify_by_sex: bool,
                        out_dir: Path | None = None,
                        sex: str | None = None) -> dict[str, str]:
    """Pick template subject(s); returns {stratum: subject_id}.

    Strata are the sexes present in the manifest when stratifying, else the
    single stratum "all".  Per-feature CSVs record each subject's value
    with the selected subject flagged.
    """
    if sex is not None:
        manifest = manifest.subset(sex=sex)
        if not manifest.records:
            raise PipelineError(f"no subjects in stratum '{sex}'")
    strata = manifest.sexes() if stratify_by_sex else ["all"]
    out = {}
    for stratum in strata:
        sub = manifest.subset(sex=None if stratum == "all" else stratum)
        if not sub.records:
            raise PipelineError(f"no subjects in stratum '{stratum}'")
        features = {}
        for rec in sub:
            feats = {}
            for f in TEMPLATE_FEATURES:
                if f not in rec.covariates:
                    raise PipelineError(
                        f"subject {rec.id}: covariate '{f}' required for "
                        "template selection"
                    )
                feats[f] = rec.covariates[f]
            features[rec.id] = feats
        template_id, scores = select_template(features)
        out[stratum] = template_id
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            for f in TEMPLATE_FEATURES:
                with open(out_dir / f"selection_{stratum}_{f}.csv", "w",
                          newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["subject", "value", "selected"])
                    for rec in sub:
                        w.writerow([rec.id, repr(rec.covariates[f]),
                                    int(rec.id == template_id)])
            with open(out_dir / f"template_{stratum}.txt", "w") as fh:
                fh.write(template_id + "\n")
    return out


# ---------------------------------------------------------------------------
# Analysis
# ---------------------------------------------------------------------------

def run_analyze(manifest: CohortManifest, reference_id: str, covariate: str,
                channels, cfg: PipelineConfig,
                out_dir: Path | None = None,
                explicit_table: bool = False, log=None):
    """Supervoxel-wise association of registered channel maps vs a covariate.

    Consumes only persisted registration artifacts.  Writes the supervoxel
    label volume + sizes CSV, and per channel the painted correlation map
    plus a per-supervoxel CSV.  Returns {channel: AssociationMap}.
    """
    out_dir = Path(out_dir if out_dir is not None else cfg.output_dir)
    analysis_dir = out_dir / "analysis"
    analysis_dir.mkdir(parents=True, exist_ok=True)
    root = cfg.data_root

    ref_rec = manifest.get(reference_id)
    ref_img, ref_masks, ref_sub = preprocess_record(ref_rec, root)

    subjects = []
    cov_vals = []
    for rec in manifest:
        if not (out_dir / "warped" / f"{rec.id}.nii.gz").exists():
            continue
        if covariate not in rec.covariates:
            available = sorted(rec.covariates)
            raise PipelineError(
                f"subject {rec.id}: unknown covariate '{covariate}' "
                f"(available: {', '.join(available)})"
            )
        subjects.append(rec.id)
        cov_vals.append(rec.covariates[covariate])
    if not subjects:
        raise PipelineError(
            "no registered subjects found; run `voxmap register` first"
        )

    decomp = slic_cluster(ref_sub.intensity,
                          seed_spacing=cfg.slic.seed_spacing,
                          compactness=cfg.slic.compactness,
                          max_iters=cfg.slic.max_iterations)
    write_volume(decomp.labels, analysis_dir / "supervoxels.nii.gz")
    _write_supervoxel_csv(decomp, analysis_dir / "supervoxels.csv")
    if log:
        log(f"SLIC: {decomp.count} supervoxels "
            f"(seed spacing {decomp.seed_spacing})")

    fm = build_feature_matrix(
        subjects, decomp,
        (read_volume(out_dir / "warped" / f"{sid}.nii.gz")
         for sid in subjects),
        (read_volume(out_dir / "jd" / f"{sid}.nii.gz")
         for sid in subjects),
    )

    region_filter = ref_sub.exclusion_mask
    results = {}
    for ch in channels:
        amap = associate(fm, np.asarray(cov_vals), decomp,
                         channel=ANALYSIS_CHANNELS[ch],
                         alpha=cfg.analysis.alpha,
                         region_filter=region_filter,
                         bh_correction=cfg.analysis.bh_correction)
        results[ch] = amap
        write_volume(amap.painted,
                     analysis_dir / f"correlation_{ch}_{covariate}.nii.gz")
        with open(analysis_dir / f"correlation_{ch}_{covariate}.csv", "w",
                  newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["supervoxel", "r", "p", "n_eff", "significant",
                        "region_filtered"])
            for row in amap.summary_rows():
                w.writerow([row[0], f"{row[1]:.6f}", f"{row[2]:.6g}",
                            row[3], int(row[4]), int(row[5])])
        if log:
            n_sig = int(amap.significant.sum())
            log(f"channel {ch}: {n_sig}/{amap.r.size} supervoxels "
                f"significant at alpha={cfg.analysis.alpha}")

    if explicit_table:
        cols = {"age": np.array([manifest.get(s).covariates.get("age", np.nan)
                                 for s in subjects])}
        names = ["age"]
        from .stats import EXPLICIT_FEATURES
        for f in EXPLICIT_FEATURES:
            vals = [manifest.get(s).covariates.get(f) for s in subjects]
            if all(v is not None for v in vals):
                cols[f] = np.array(vals, dtype=np.float64)
                names.append(f)
        table = explicit_correlation_table(cols, names,
                                           alpha=cfg.analysis.alpha)
        with open(analysis_dir / "explicit_correlations.csv", "w",
                  newline="") as fh:
            w = csv.writer(fh)
            for row in table.to_rows():
                w.writerow(row)
    return results


def _write_supervoxel_csv(decomp, path: Path):
    lab = decomp.labels.labels
    nz, ny, nx = lab.shape
    zz, yy, xx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx),
                             indexing="ij")
    flat = lab.ravel()
    counts = np.bincount(flat, minlength=decomp.count + 1)
    cen_x = np.bincount(flat, weights=xx.ravel(), minlength=decomp.count + 1)
    cen_y = np.bincount(flat, weights=yy.ravel(), minlength=decomp.count + 1)
    cen_z = np.bincount(flat, weights=zz.ravel(), minlength=decomp.count + 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "voxels", "centroid_x", "centroid_y",
                    "centroid_z"])
        for lab_id in range(1, decomp.count + 1):
            n = counts[lab_id]
            if n == 0:
                continue
            w.writerow([lab_id, int(n), f"{cen_x[lab_id] / n:.3f}",
                        f"{cen_y[lab_id] / n:.3f}",
                        f"{cen_z[lab_id] / n:.3f}"])
