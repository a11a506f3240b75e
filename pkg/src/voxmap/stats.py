"""Robust supervoxel-wise association statistics and template selection.

Quartiles and percentiles use linear interpolation of order statistics
(index h = (n-1) q) throughout, so the outlier-rejection examples are
reproducible.  Pearson p-values are two-sided, from the Student-t
transform evaluated with the regularized incomplete beta function.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import special

from .supervoxels import SupervoxelDecomposition
from .volume import LabelVolume, Volume

MIN_CORR_SUBJECTS = 3
IQR_FACTOR = 1.5


# ---------------------------------------------------------------------------
# Core statistics
# ---------------------------------------------------------------------------

@dataclass
class IqrResult:
    kept: np.ndarray
    bounds: tuple[float, float]
    mask: np.ndarray          # True where the input value was kept
    applied: bool             # False when n < 4 (all kept, filter skipped)


def iqr_filter(values) -> IqrResult:
    """Keep values within [q1 - 1.5 IQR, q3 + 1.5 IQR] (inclusive).

    Fewer than 4 values: everything is kept and the result is flagged as
    not applied.
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim != 1:
        vals = vals.ravel()
    if vals.size < 4:
        return IqrResult(vals.copy(), (-np.inf, np.inf),
                         np.ones(vals.size, dtype=bool), False)
    q1, q3 = np.percentile(vals, [25.0, 75.0])
    iqr = q3 - q1
    lo = q1 - IQR_FACTOR * iqr
    hi = q3 + IQR_FACTOR * iqr
    mask = (vals >= lo) & (vals <= hi)
    return IqrResult(vals[mask], (float(lo), float(hi)), mask, True)


@dataclass(frozen=True)
class PearsonResult:
    r: float
    p: float
    n: int

    @property
    def defined(self) -> bool:
        return not np.isnan(self.r)


def pearson(x, y) -> PearsonResult:
    """Sample Pearson correlation with a two-sided Student-t p-value.

    Zero variance in either argument yields (r = NaN, p = 1) rather than an
    error; r is clamped to [-1, 1] before the t transform.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"x and y must be equal-length vectors, got "
                         f"{x.shape} / {y.shape}")
    n = x.size
    if n < MIN_CORR_SUBJECTS:
        return PearsonResult(float("nan"), 1.0, n)
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx <= 0.0 or syy <= 0.0:
        return PearsonResult(float("nan"), 1.0, n)
    r = float(xc @ yc) / np.sqrt(sxx * syy)
    r = min(1.0, max(-1.0, r))
    df = n - 2
    if abs(r) == 1.0:
        return PearsonResult(r, 0.0, n)
    # two-sided p = I_{df/(df+t^2)}(df/2, 1/2); with t = r sqrt(df/(1-r^2))
    # the beta argument reduces to 1 - r^2
    p = float(special.betainc(df / 2.0, 0.5, 1.0 - r * r))
    return PearsonResult(r, min(max(p, 0.0), 1.0), n)


def winsorize(values: np.ndarray, lo_pct: float = 1.0,
              hi_pct: float = 99.0) -> np.ndarray:
    vals = np.asarray(values, dtype=np.float64)
    lo, hi = np.percentile(vals, [lo_pct, hi_pct])
    return np.clip(vals, lo, hi)


# ---------------------------------------------------------------------------
# Template selection
# ---------------------------------------------------------------------------

TEMPLATE_FEATURES = ("age", "lvv", "rvv", "lav", "rav", "mv")
_AGE_WEIGHT = 1.0
_VOLUME_WEIGHT = 1.0 / 5.0


@dataclass
class TemplateScore:
    subject_id: str
    z: dict[str, float]
    score: float


def select_template(features: dict[str, dict[str, float]],
                    ) -> tuple[str, list[TemplateScore]]:
    """Pick the subject closest to the cohort middle.

    ``features`` maps subject id to {age, lvv, rvv, lav, rav, mv}.  Each
    feature is winsorized at percentiles 1/99, z-scored against the
    winsorized mean/SD (zero-SD features contribute 0), and scored as
    |z_age| + (1/5) * sum of |z_volume|.  Returns the argmin subject (ties
    go to the lexicographically smallest id) plus all scores.
    """
    if len(features) < 2:
        raise ValueError("template selection needs at least 2 subjects")
    ids = sorted(features)
    for sid in ids:
        missing = [f for f in TEMPLATE_FEATURES if f not in features[sid]]
        if missing:
            raise ValueError(
                f"subject {sid}: missing template feature(s) {missing}"
            )
    cols = {}
    for f in TEMPLATE_FEATURES:
        raw = np.array([features[sid][f] for sid in ids], dtype=np.float64)
        wz = winsorize(raw)
        mean = wz.mean()
        sd = wz.std(ddof=1)
        if sd > 0:
            cols[f] = (wz - mean) / sd
        else:
            cols[f] = np.zeros_like(raw)
    scores = []
    for i, sid in enumerate(ids):
        z = {f: float(cols[f][i]) for f in TEMPLATE_FEATURES}
        score = _AGE_WEIGHT * abs(z["age"]) + _VOLUME_WEIGHT * sum(
            abs(z[f]) for f in TEMPLATE_FEATURES[1:])
        scores.append(TemplateScore(sid, z, float(score)))
    best = min(scores, key=lambda s: (s.score, s.subject_id))
    return best.subject_id, scores


# ---------------------------------------------------------------------------
# Feature matrix
# ---------------------------------------------------------------------------

CHANNELS = ("density", "jd")


@dataclass
class FeatureMatrix:
    """Per (subject, supervoxel) mean density and mean JD, with eligibility.

    Within each supervoxel and subject, voxels whose density lies outside
    the 1.5 IQR bounds are excluded from both channel means.  Across
    subjects, the same rejection marks outlier subjects ineligible,
    independently per channel.
    """

    subjects: list[str]
    density: np.ndarray       # (n, K)
    jd: np.ndarray            # (n, K)
    eligible: np.ndarray      # (n, K, 2) bool, channel order = CHANNELS
    voxel_counts: np.ndarray  # (n, K) eligible voxels per cell

    @property
    def n_supervoxels(self) -> int:
        return self.density.shape[1]

    def channel(self, name: str) -> np.ndarray:
        if name not in CHANNELS:
            raise ValueError(f"unknown channel '{name}', expected {CHANNELS}")
        return self.density if name == "density" else self.jd


def _label_slices(labels: np.ndarray, count: int):
    order = np.argsort(labels.ravel(), kind="stable")
    sorted_labels = labels.ravel()[order]
    starts = np.searchsorted(sorted_labels, np.arange(1, count + 2))
    return order, starts


def build_feature_matrix(subject_ids, decomp: SupervoxelDecomposition,
                         warped_hu, jd) -> FeatureMatrix:
    """Aggregate per-supervoxel features for a cohort.

    ``warped_hu`` and ``jd`` are sequences (or generators) of Volumes
    aligned with ``subject_ids``, all on the decomposition's geometry.
    """
    subject_ids = list(subject_ids)
    n = len(subject_ids)
    K = decomp.count
    lab = decomp.labels.labels
    order, starts = _label_slices(lab, K)

    density = np.full((n, K), np.nan)
    jdm = np.full((n, K), np.nan)
    counts = np.zeros((n, K), dtype=np.int64)

    hu_iter = iter(warped_hu)
    jd_iter = iter(jd)
    for s in range(n):
        hu_vol = next(hu_iter)
        jd_vol = next(jd_iter)
        hu_flat = hu_vol.values.astype(np.float64).ravel()[order]
        jd_flat = jd_vol.values.astype(np.float64).ravel()[order]
        for kidx in range(K):
            a, b = starts[kidx], starts[kidx + 1]
            if b <= a:
                continue
            seg_hu = hu_flat[a:b]
            res = iqr_filter(seg_hu)
            m = res.mask
            n_keep = int(m.sum())
            counts[s, kidx] = n_keep
            if n_keep == 0:
                continue
            density[s, kidx] = seg_hu[m].mean()
            jdm[s, kidx] = jd_flat[a:b][m].mean()

    eligible = np.zeros((n, K, 2), dtype=bool)
    for ci, arr in enumerate((density, jdm)):
        for kidx in range(K):
            col = arr[:, kidx]
            valid = ~np.isnan(col)
            if valid.sum() >= 4:
                res = iqr_filter(col[valid])
                keep = np.zeros(n, dtype=bool)
                keep[np.flatnonzero(valid)[res.mask]] = True
                eligible[:, kidx, ci] = keep
            else:
                eligible[:, kidx, ci] = valid
    return FeatureMatrix(subject_ids, density, jdm, eligible, counts)


# ---------------------------------------------------------------------------
# Association maps
# ---------------------------------------------------------------------------

@dataclass
class AssociationMap:
    channel: str
    r: np.ndarray             # (K,), NaN where undefined
    p: np.ndarray             # (K,)
    n_eff: np.ndarray         # (K,)
    significant: np.ndarray   # (K,) bool
    region_filtered: np.ndarray  # (K,) bool
    alpha: float
    painted: Volume           # r painted on voxels of significant supervoxels

    def summary_rows(self):
        for k in range(self.r.size):
            yield (k + 1, self.r[k], self.p[k], int(self.n_eff[k]),
                   bool(self.significant[k]), bool(self.region_filtered[k]))


def _region_filter_mask(decomp: SupervoxelDecomposition,
                        region_filter: LabelVolume | None) -> np.ndarray:
    """Supervoxels whose majority of voxels lie inside filtered regions."""
    if region_filter is None:
        return np.zeros(decomp.count, dtype=bool)
    lab = decomp.labels.labels
    if region_filter.labels.shape != lab.shape:
        raise ValueError("region filter does not match decomposition grid")
    inside = (region_filter.labels > 0).ravel()
    flat = lab.ravel()
    total = np.bincount(flat, minlength=decomp.count + 1)[1:]
    hits = np.bincount(flat, weights=inside.astype(np.float64),
                       minlength=decomp.count + 1)[1:]
    with np.errstate(invalid="ignore"):
        frac = np.where(total > 0, hits / np.maximum(total, 1), 0.0)
    return frac > 0.5


def benjamini_hochberg(p: np.ndarray, alpha: float) -> np.ndarray:
    """BH step-up rejection mask at FDR level alpha."""
    p = np.asarray(p, dtype=np.float64)
    m = p.size
    order = np.argsort(p, kind="stable")
    thresh = alpha * (np.arange(1, m + 1) / m)
    passed = p[order] <= thresh
    out = np.zeros(m, dtype=bool)
    if passed.any():
        kmax = int(np.flatnonzero(passed).max())
        out[order[: kmax + 1]] = True
    return out


def associate(fm: FeatureMatrix, covariate, decomp: SupervoxelDecomposition,
              channel: str = "jd", alpha: float = 0.05,
              region_filter: LabelVolume | None = None,
              bh_correction: bool = False) -> AssociationMap:
    """Per-supervoxel Pearson correlation of a feature channel vs a covariate.

    Only subjects eligible for the (supervoxel, channel) cell enter the
    correlation; supervoxels with fewer than 3 eligible subjects, or whose
    majority voxels lie in filtered regions, are insignificant by
    construction.
    """
    cov = np.asarray(covariate, dtype=np.float64)
    if cov.size != len(fm.subjects):
        raise ValueError(
            f"covariate has {cov.size} entries for {len(fm.subjects)} subjects"
        )
    values = fm.channel(channel)
    ci = CHANNELS.index(channel)
    K = fm.n_supervoxels
    r = np.full(K, np.nan)
    p = np.ones(K)
    n_eff = np.zeros(K, dtype=np.int64)
    for k in range(K):
        elig = fm.eligible[:, k, ci] & ~np.isnan(values[:, k]) & ~np.isnan(cov)
        n_eff[k] = int(elig.sum())
        if n_eff[k] < MIN_CORR_SUBJECTS:
            continue
        res = pearson(values[elig, k], cov[elig])
        r[k] = res.r
        p[k] = res.p

    filtered = _region_filter_mask(decomp, region_filter)
    if bh_correction:
        reject = benjamini_hochberg(p, alpha)
    else:
        reject = p < alpha
    significant = reject & ~filtered & ~np.isnan(r)

    paint = np.zeros(decomp.count + 1, dtype=np.float32)
    paint[1:][significant] = r[significant].astype(np.float32)
    painted = Volume(paint[decomp.labels.labels],
                     decomp.labels.spacing, decomp.labels.origin,
                     fill_value=0.0)
    return AssociationMap(channel, r, p, n_eff, significant, filtered,
                          alpha, painted)


# ---------------------------------------------------------------------------
# Explicit-measurement correlation table
# ---------------------------------------------------------------------------

EXPLICIT_FEATURES = (
    "lvv", "rvv", "lav", "rav", "mv", "av",
    "lvmd", "rvmd", "lamd", "ramd", "mmd", "aortamd",
)

SIGNIFICANT, NEAR, NOT_SIGNIFICANT = "significant", "near", "NS"


def significance_class(p: float, alpha: float = 0.05,
                       near_limit: float = 0.2) -> str:
    if p < alpha:
        return SIGNIFICANT
    if p <= near_limit:
        return NEAR
    return NOT_SIGNIFICANT


@dataclass
class CorrelationTable:
    names: list[str]
    r: np.ndarray
    p: np.ndarray
    classes: list[list[str]]

    def to_rows(self):
        yield ["feature"] + self.names
        for i, name in enumerate(self.names):
            row = [name]
            for j in range(len(self.names)):
                row.append(f"{self.r[i, j]:+.3f}|p={self.p[i, j]:.4g}|"
                           f"{self.classes[i][j]}")
            yield row


def explicit_correlation_table(columns: dict[str, np.ndarray],
                               names: list[str] | None = None,
                               alpha: float = 0.05) -> CorrelationTable:
    """Pairwise Pearson among age and the explicit measurement features.

    ``columns`` maps feature name to per-subject values.  Classes:
    significant (p < 0.05), near (0.05 <= p <= 0.2), NS (p > 0.2).
    """
    if names is None:
        names = ["age"] + [f for f in EXPLICIT_FEATURES if f in columns]
    missing = [n for n in names if n not in columns]
    if missing:
        raise ValueError(f"missing feature column(s): {missing}")
    m = len(names)
    r = np.zeros((m, m))
    p = np.ones((m, m))
    classes = [[NOT_SIGNIFICANT] * m for _ in range(m)]
    for i in range(m):
        for j in range(m):
            res = pearson(columns[names[i]], columns[names[j]])
            r[i, j] = res.r
            p[i, j] = res.p
            classes[i][j] = significance_class(res.p, alpha)
    return CorrelationTable(list(names), r, p, classes)
