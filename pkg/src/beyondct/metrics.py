"""Regression agreement metrics, obstruction staging, and report emission.

Everything here operates on in-memory prediction tables and is pure: the
only function that touches the filesystem is :func:`emit_report` (plus the
CSV helpers :func:`load_predictions` / :func:`save_predictions`).  All
statistics are computed in float64 and returned as Python floats.

Conventions fixed by this module:

- Percent error is the mean of per-sample relative errors,
  ``100 * |actual - predicted| / actual`` — not the ratio of the MAE to the
  mean actual value.
- Bland–Altman differences are oriented ``predicted - actual``; limits of
  agreement use the sample standard deviation (n-1 denominator) and the
  conventional 1.96 multiplier.
- The obstruction threshold FEV1/FVC < 0.7 is strict: a ratio of exactly
  0.7 classifies as non-obstructed.
- Severity stages use the standard cut-points on FEV1 percent-predicted:
  I >= 80, II 50-79, III 30-49, IV < 30.  The percent-predicted reference
  equation is supplied via coefficients, never hard-coded.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .errors import ConfigError, ContractError
from .model import DemographicsRecord
from .util import canonical_json

__all__ = [
    "GOLD_STAGES",
    "COPD_RATIO_THRESHOLD",
    "STAGE_CUTPOINTS_PCT",
    "LOA_MULTIPLIER",
    "PredictionPair",
    "BlandAltmanResult",
    "MetricsReport",
    "ConfusionResult",
    "TTestResult",
    "GroupResult",
    "SubgroupReport",
    "mae",
    "percent_error",
    "per_sample_percent_errors",
    "r_squared",
    "bland_altman",
    "cumulative_error_distribution",
    "gold_copd_classify",
    "gold_stage",
    "reference_fev1",
    "confusion_matrix",
    "paired_t_test",
    "welch_t_test",
    "student_t_two_sided_p",
    "regularized_incomplete_beta",
    "subgroup_report",
    "summarize",
    "emit_report",
    "load_predictions",
    "save_predictions",
]

GOLD_STAGES = ("NonCOPD", "I", "II", "III", "IV")
COPD_RATIO_THRESHOLD = 0.7
# Severity cut-points on FEV1 percent-predicted, applied top-down.
STAGE_CUTPOINTS_PCT = ((80.0, "I"), (50.0, "II"), (30.0, "III"))
LOA_MULTIPLIER = 1.96

GROUPINGS = ("sex", "emphysema", "gold_binary", "smoking")

PREDICTION_COLUMNS = (
    "subject_id",
    "scan_id",
    "actual_l",
    "predicted_l",
    "sex",
    "emphysema",
    "gold_stage",
    "smoking_status",
)

REPORT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class PredictionPair:
    """One scored scan: measured vs. predicted liters plus group labels.

    The group labels are free-form strings used only for subgroup
    stratification; an empty/absent label is ``None``.  ``actual`` must be
    positive before percent-error-based statistics are computed, but the
    constructor only requires finite values so that raw tables can be
    loaded and validated lazily.
    """

    subject_id: str
    scan_id: str
    actual: float
    predicted: float
    sex: str | None = None
    emphysema: str | None = None
    gold_stage: str | None = None
    smoking_status: str | None = None

    def __post_init__(self) -> None:
        problems = []
        if not self.subject_id:
            problems.append("subject_id must be non-empty")
        if not self.scan_id:
            problems.append("scan_id must be non-empty")
        for name in ("actual", "predicted"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                problems.append(f"{name} must be a finite number, got {value!r}")
        if self.gold_stage is not None and self.gold_stage not in GOLD_STAGES:
            problems.append(
                f"gold_stage must be one of {GOLD_STAGES}, got {self.gold_stage!r}"
            )
        if problems:
            raise ContractError("invalid prediction pair: " + "; ".join(problems))


@dataclass(frozen=True)
class BlandAltmanResult:
    """Agreement summary: mean difference and 1.96-SD limits of agreement.

    ``points`` carries the per-pair plot table as ((actual+predicted)/2,
    predicted-actual) rows, in input order.
    """

    mean_diff: float
    loa_low: float
    loa_high: float
    points: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if not self.loa_low <= self.mean_diff <= self.loa_high:
            raise ContractError(
                "limits of agreement must bracket the mean difference: "
                f"low={self.loa_low} mean={self.mean_diff} high={self.loa_high}"
            )


@dataclass(frozen=True)
class MetricsReport:
    """Headline regression agreement metrics for one prediction table."""

    n: int
    mae_l: float
    pct_error: float
    r2: float
    bland_altman: BlandAltmanResult


@dataclass(frozen=True)
class ConfusionResult:
    """5x5 stage confusion counts plus the binary-collapse accuracy pair.

    Rows index the actual stage, columns the predicted stage, both in
    ``GOLD_STAGES`` order.  Sensitivity and specificity are computed on the
    obstructed/non-obstructed collapse (positive class: any stage I-IV) and
    are ``None`` when their denominator is empty.
    """

    counts: tuple[tuple[int, ...], ...]
    sensitivity: float | None
    specificity: float | None
    stages: tuple[str, ...] = field(default=GOLD_STAGES)


@dataclass(frozen=True)
class TTestResult:
    """t statistic and two-sided p-value.

    ``degenerate`` marks zero-variance inputs where the statistic is taken
    by convention instead of by formula: all-zero differences give
    ``t = 0, p = 1``; zero-variance nonzero-mean differences give a signed
    infinite ``t`` with ``p = 0``.
    """

    t: float
    p: float
    dof: float
    degenerate: bool = False


@dataclass(frozen=True)
class GroupResult:
    """Per-group sample count and mean percent error."""

    label: str
    n: int
    pct_error: float


@dataclass(frozen=True)
class SubgroupReport:
    """Percent error stratified by a group label, with a two-sample test.

    The Welch two-sample t-test compares per-sample percent-error rates
    between exactly two groups; with any other group structure (one group,
    more than two, or a group smaller than two members) the test is skipped
    and ``skip_reason`` says why.
    """

    grouping: str
    groups: tuple[GroupResult, ...]
    test: TTestResult | None
    skipped: bool
    skip_reason: str | None


# ---------------------------------------------------------------------------
# core agreement metrics
# ---------------------------------------------------------------------------


def _require_pairs(pairs: Sequence[PredictionPair], minimum: int, op: str) -> None:
    if len(pairs) < minimum:
        raise ContractError(
            f"{op} requires at least {minimum} prediction pair(s), got {len(pairs)}"
        )


def mae(pairs: Sequence[PredictionPair]) -> float:
    """Mean absolute error in liters."""
    _require_pairs(pairs, 1, "mae")
    total = math.fsum(abs(p.actual - p.predicted) for p in pairs)
    return total / len(pairs)


def per_sample_percent_errors(pairs: Sequence[PredictionPair]) -> tuple[float, ...]:
    """Per-sample relative errors, 100*|actual-predicted|/actual.

    Every ``actual`` must be strictly positive; offenders are reported by id
    in a single error.
    """
    _require_pairs(pairs, 1, "percent_error")
    offenders = [p.scan_id for p in pairs if p.actual <= 0]
    if offenders:
        raise ContractError(
            "percent error needs positive actual values; offending scans: "
            + ", ".join(offenders)
        )
    return tuple(100.0 * abs(p.actual - p.predicted) / p.actual for p in pairs)


def percent_error(pairs: Sequence[PredictionPair]) -> float:
    """Mean per-sample relative error, as a percentage."""
    errors = per_sample_percent_errors(pairs)
    return math.fsum(errors) / len(errors)


def r_squared(pairs: Sequence[PredictionPair]) -> float:
    """Coefficient of determination, 1 - SS_res/SS_tot about the actual mean."""
    _require_pairs(pairs, 2, "r_squared")
    actual_mean = math.fsum(p.actual for p in pairs) / len(pairs)
    ss_tot = math.fsum((p.actual - actual_mean) ** 2 for p in pairs)
    if ss_tot == 0.0:
        raise ContractError(
            "r_squared is undefined: actual values have zero variance"
        )
    ss_res = math.fsum((p.actual - p.predicted) ** 2 for p in pairs)
    return 1.0 - ss_res / ss_tot


def bland_altman(pairs: Sequence[PredictionPair]) -> BlandAltmanResult:
    """Mean difference (predicted - actual) with 1.96-SD limits of agreement."""
    _require_pairs(pairs, 2, "bland_altman")
    diffs = [p.predicted - p.actual for p in pairs]
    mean_diff = math.fsum(diffs) / len(diffs)
    var = math.fsum((d - mean_diff) ** 2 for d in diffs) / (len(diffs) - 1)
    half_width = LOA_MULTIPLIER * math.sqrt(var)
    points = tuple(
        ((p.actual + p.predicted) / 2.0, p.predicted - p.actual) for p in pairs
    )
    return BlandAltmanResult(
        mean_diff=mean_diff,
        loa_low=mean_diff - half_width,
        loa_high=mean_diff + half_width,
        points=points,
    )


def cumulative_error_distribution(
    pairs: Sequence[PredictionPair], bins: int | None = None
) -> tuple[tuple[float, float], ...]:
    """Empirical CDF of per-sample percent error.

    Returns (error_pct, cumulative_fraction) rows with the fraction of
    samples whose error is <= the row's threshold.  With ``bins=None`` the
    thresholds are the distinct observed errors; with an integer the
    thresholds are ``bins`` evenly spaced values from 0 to the maximum
    observed error.  Either way the fractions are non-decreasing and the
    final row's fraction is exactly 1.0.
    """
    errors = sorted(per_sample_percent_errors(pairs))
    n = len(errors)
    if bins is None:
        thresholds: list[float] = sorted(set(errors))
    else:
        if bins < 1:
            raise ContractError(f"bins must be a positive integer, got {bins}")
        top = errors[-1]
        if bins == 1:
            thresholds = [top]
        else:
            thresholds = [top * i / (bins - 1) for i in range(bins)]
    table = []
    idx = 0
    for threshold in thresholds:
        while idx < n and errors[idx] <= threshold:
            idx += 1
        table.append((threshold, idx / n))
    return tuple(table)


# ---------------------------------------------------------------------------
# obstruction classification and staging
# ---------------------------------------------------------------------------


def gold_copd_classify(fev1_l: float, fvc_l: float) -> str:
    """Classify obstruction from the FEV1/FVC ratio: "COPD" or "NonCOPD".

    The threshold is strict: ratio < 0.7 is obstructed, exactly 0.7 is not.
    """
    if not (math.isfinite(fev1_l) and math.isfinite(fvc_l)):
        raise ContractError(
            f"fev1 and fvc must be finite, got fev1={fev1_l}, fvc={fvc_l}"
        )
    if fvc_l <= 0:
        raise ContractError(f"fvc must be positive to form a ratio, got {fvc_l}")
    return "COPD" if fev1_l / fvc_l < COPD_RATIO_THRESHOLD else "NonCOPD"


def gold_stage(fev1_l: float, fvc_l: float, fev1_pct_predicted: float) -> str:
    """Assign a severity stage from the ratio and FEV1 percent-predicted.

    Non-obstructed (ratio >= 0.7) scans stage as "NonCOPD" regardless of
    percent-predicted; obstructed scans stage I (>= 80%), II (50-79%),
    III (30-49%), or IV (< 30%).
    """
    if gold_copd_classify(fev1_l, fvc_l) == "NonCOPD":
        return "NonCOPD"
    if not math.isfinite(fev1_pct_predicted):
        raise ContractError(
            f"fev1_pct_predicted must be finite, got {fev1_pct_predicted}"
        )
    for cutpoint, stage in STAGE_CUTPOINTS_PCT:
        if fev1_pct_predicted >= cutpoint:
            return stage
    return "IV"


def reference_fev1(record: DemographicsRecord, coeffs: Mapping[str, float]) -> float:
    """Predicted-normal FEV1 from a configured linear reference equation.

    ``coeffs`` must provide a0 (intercept, liters), a_age (liters/year),
    a_height (liters/inch), and a_sex (liters); the equation is
    ``a0 + a_age*age + a_height*height_in + a_sex*sex``.
    """
    required = ("a0", "a_age", "a_height", "a_sex")
    missing = [key for key in required if key not in coeffs]
    if missing:
        raise ConfigError(
            "reference equation coefficients missing: " + ", ".join(missing)
        )
    values = {key: float(coeffs[key]) for key in required}
    for key, value in values.items():
        if not math.isfinite(value):
            raise ConfigError(f"reference coefficient {key} must be finite, got {value}")
    return (
        values["a0"]
        + values["a_age"] * record.age
        + values["a_height"] * record.height_in
        + values["a_sex"] * record.sex
    )


def confusion_matrix(
    actual_stages: Sequence[str], predicted_stages: Sequence[str]
) -> ConfusionResult:
    """5x5 stage confusion counts plus binary sensitivity/specificity.

    Sensitivity is TP/(TP+FN) and specificity TN/(TN+FP) after collapsing
    stages I-IV into a single obstructed class; a ``None`` value means the
    corresponding denominator was empty.
    """
    if len(actual_stages) != len(predicted_stages):
        raise ContractError(
            "stage vectors must have equal length, got "
            f"{len(actual_stages)} actual vs {len(predicted_stages)} predicted"
        )
    index = {stage: i for i, stage in enumerate(GOLD_STAGES)}
    unknown = sorted(
        {s for s in (*actual_stages, *predicted_stages) if s not in index}
    )
    if unknown:
        raise ContractError(
            f"unknown stage labels {unknown}; expected one of {GOLD_STAGES}"
        )
    counts = [[0] * len(GOLD_STAGES) for _ in GOLD_STAGES]
    for act, pred in zip(actual_stages, predicted_stages):
        counts[index[act]][index[pred]] += 1

    def obstructed(stage: str) -> bool:
        return stage != "NonCOPD"

    tp = fn = tn = fp = 0
    for act, pred in zip(actual_stages, predicted_stages):
        if obstructed(act):
            if obstructed(pred):
                tp += 1
            else:
                fn += 1
        else:
            if obstructed(pred):
                fp += 1
            else:
                tn += 1
    sensitivity = tp / (tp + fn) if tp + fn else None
    specificity = tn / (tn + fp) if tn + fp else None
    return ConfusionResult(
        counts=tuple(tuple(row) for row in counts),
        sensitivity=sensitivity,
        specificity=specificity,
    )


# ---------------------------------------------------------------------------
# Student t machinery
# ---------------------------------------------------------------------------


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    """Continued-fraction kernel for the regularized incomplete beta.

    Modified Lentz iteration on the standard even/odd coefficient pairs;
    converges for x < (a+1)/(a+b+2).
    """
    tiny = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 200):
        m2 = 2 * m
        numerator = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + numerator * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + numerator / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        numerator = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + numerator * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + numerator / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise ContractError(
        f"incomplete beta continued fraction failed to converge for a={a}, b={b}, x={x}"
    )


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b), accurate to ~1e-10.

    Uses the continued-fraction evaluation directly on the side of the
    symmetry point where it converges fast, and the reflection
    I_x(a,b) = 1 - I_{1-x}(b,a) on the other.
    """
    if a <= 0 or b <= 0:
        raise ContractError(f"beta parameters must be positive, got a={a}, b={b}")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, dof: float) -> float:
    """Two-sided p-value for a Student t statistic with ``dof`` degrees."""
    if dof <= 0:
        raise ContractError(f"degrees of freedom must be positive, got {dof}")
    if math.isinf(t):
        return 0.0
    if t == 0.0:
        return 1.0
    x = dof / (dof + t * t)
    return regularized_incomplete_beta(dof / 2.0, 0.5, x)


def paired_t_test(
    errors_a: Sequence[float], errors_b: Sequence[float]
) -> TTestResult:
    """Paired-sample t-test on per-sample differences a - b.

    Zero-variance differences are degenerate by contract: all-zero gives
    ``t=0, p=1``; constant nonzero gives a signed infinite ``t`` with
    ``p=0``.
    """
    if len(errors_a) != len(errors_b):
        raise ContractError(
            "paired t-test needs equal-length samples, got "
            f"{len(errors_a)} vs {len(errors_b)}"
        )
    n = len(errors_a)
    if n < 2:
        raise ContractError(f"paired t-test needs n >= 2, got {n}")
    diffs = [float(a) - float(b) for a, b in zip(errors_a, errors_b)]
    mean_diff = math.fsum(diffs) / n
    var = math.fsum((d - mean_diff) ** 2 for d in diffs) / (n - 1)
    dof = n - 1
    if var == 0.0:
        if mean_diff == 0.0:
            return TTestResult(t=0.0, p=1.0, dof=dof, degenerate=True)
        return TTestResult(
            t=math.copysign(math.inf, mean_diff), p=0.0, dof=dof, degenerate=True
        )
    t = mean_diff / math.sqrt(var / n)
    return TTestResult(t=t, p=student_t_two_sided_p(t, dof), dof=dof)


def welch_t_test(sample_a: Sequence[float], sample_b: Sequence[float]) -> TTestResult:
    """Welch two-sample t-test (unequal variances, Satterthwaite dof)."""
    if len(sample_a) < 2 or len(sample_b) < 2:
        raise ContractError(
            "welch t-test needs at least 2 members per group, got "
            f"{len(sample_a)} and {len(sample_b)}"
        )
    n_a, n_b = len(sample_a), len(sample_b)
    mean_a = math.fsum(float(v) for v in sample_a) / n_a
    mean_b = math.fsum(float(v) for v in sample_b) / n_b
    var_a = math.fsum((float(v) - mean_a) ** 2 for v in sample_a) / (n_a - 1)
    var_b = math.fsum((float(v) - mean_b) ** 2 for v in sample_b) / (n_b - 1)
    pooled = var_a / n_a + var_b / n_b
    if pooled == 0.0:
        if mean_a == mean_b:
            return TTestResult(t=0.0, p=1.0, dof=float(n_a + n_b - 2), degenerate=True)
        return TTestResult(
            t=math.copysign(math.inf, mean_a - mean_b),
            p=0.0,
            dof=float(n_a + n_b - 2),
            degenerate=True,
        )
    t = (mean_a - mean_b) / math.sqrt(pooled)
    dof = pooled**2 / (
        (var_a / n_a) ** 2 / (n_a - 1) + (var_b / n_b) ** 2 / (n_b - 1)
    )
    return TTestResult(t=t, p=student_t_two_sided_p(t, dof), dof=dof)


# ---------------------------------------------------------------------------
# subgroup stratification
# ---------------------------------------------------------------------------


def _group_label(pair: PredictionPair, grouping: str) -> str | None:
    if grouping == "sex":
        return pair.sex
    if grouping == "emphysema":
        return pair.emphysema
    if grouping == "smoking":
        return pair.smoking_status
    if grouping == "gold_binary":
        if pair.gold_stage is None:
            return None
        return "NonCOPD" if pair.gold_stage == "NonCOPD" else "COPD"
    raise ContractError(f"unknown grouping {grouping!r}; expected one of {GROUPINGS}")


def subgroup_report(
    pairs: Sequence[PredictionPair], grouping: str
) -> SubgroupReport:
    """Per-group percent error plus a Welch test between two groups.

    Every pair must carry a label for the requested grouping.  The test is
    skipped (with a reason) unless there are exactly two groups, each with
    at least two members.
    """
    _require_pairs(pairs, 1, "subgroup_report")
    unlabeled = [
        p.scan_id for p in pairs if _group_label(p, grouping) is None
    ]
    if unlabeled:
        raise ContractError(
            f"every pair needs a {grouping} label; missing for scans: "
            + ", ".join(unlabeled)
        )
    errors = per_sample_percent_errors(pairs)
    by_label: dict[str, list[float]] = {}
    for pair, err in zip(pairs, errors):
        by_label.setdefault(_group_label(pair, grouping), []).append(err)

    groups = tuple(
        GroupResult(label=label, n=len(errs), pct_error=math.fsum(errs) / len(errs))
        for label, errs in sorted(by_label.items())
    )
    skip_reason = None
    if len(groups) != 2:
        skip_reason = f"need exactly 2 groups for the two-sample test, got {len(groups)}"
    else:
        small = [g.label for g in groups if g.n < 2]
        if small:
            skip_reason = "group(s) with fewer than 2 members: " + ", ".join(small)
    if skip_reason is not None:
        return SubgroupReport(
            grouping=grouping,
            groups=groups,
            test=None,
            skipped=True,
            skip_reason=skip_reason,
        )
    test = welch_t_test(by_label[groups[0].label], by_label[groups[1].label])
    return SubgroupReport(
        grouping=grouping, groups=groups, test=test, skipped=False, skip_reason=None
    )


# ---------------------------------------------------------------------------
# report assembly and emission
# ---------------------------------------------------------------------------


def summarize(pairs: Sequence[PredictionPair]) -> MetricsReport:
    """Compute the headline metrics bundle for one prediction table."""
    return MetricsReport(
        n=len(pairs),
        mae_l=mae(pairs),
        pct_error=percent_error(pairs),
        r2=r_squared(pairs),
        bland_altman=bland_altman(pairs),
    )


def _test_to_dict(test: TTestResult | None) -> dict | None:
    if test is None:
        return None
    return {
        "t": None if math.isinf(test.t) else test.t,
        "t_infinite": math.isinf(test.t),
        "p": test.p,
        "dof": test.dof,
        "degenerate": test.degenerate,
    }


def emit_report(
    pairs: Sequence[PredictionPair],
    out_dir: str | Path,
    *,
    report: MetricsReport | None = None,
    confusion: ConfusionResult | None = None,
    subgroups: Sequence[SubgroupReport] = (),
    comparisons: Mapping[str, TTestResult] | None = None,
    cdf_bins: int | None = None,
) -> dict[str, Path]:
    """Write the JSON report plus plot-ready CSV tables to ``out_dir``.

    Emits report.json, scatter.csv (actual/predicted pairs),
    bland_altman.csv (per-pair mean and difference), cdf.csv (cumulative
    percent-error distribution), and — when a confusion result is supplied —
    confusion.csv.  Returns the written paths keyed by artifact name.
    I/O failures carry the offending path in the exception context.
    """
    out_dir = Path(out_dir)
    metrics = report if report is not None else summarize(pairs)
    ba = metrics.bland_altman
    cdf = cumulative_error_distribution(pairs, bins=cdf_bins)

    document = {
        "format_version": REPORT_FORMAT_VERSION,
        "diff_orientation": "predicted_minus_actual",
        "n": metrics.n,
        "mae_l": metrics.mae_l,
        "pct_error": metrics.pct_error,
        "r2": metrics.r2,
        "bland_altman": {
            "mean_diff": ba.mean_diff,
            "loa_low": ba.loa_low,
            "loa_high": ba.loa_high,
        },
        "subgroups": [
            {
                "grouping": g.grouping,
                "groups": [
                    {"label": gr.label, "n": gr.n, "pct_error": gr.pct_error}
                    for gr in g.groups
                ],
                "test": _test_to_dict(g.test),
                "skipped": g.skipped,
                "skip_reason": g.skip_reason,
            }
            for g in subgroups
        ],
        "comparisons": {
            name: _test_to_dict(test) for name, test in (comparisons or {}).items()
        },
    }
    if confusion is not None:
        document["confusion"] = {
            "stages": list(confusion.stages),
            "counts": [list(row) for row in confusion.counts],
            "sensitivity": confusion.sensitivity,
            "specificity": confusion.specificity,
        }

    written: dict[str, Path] = {}

    def _write_csv(name: str, header: Sequence[str], rows) -> None:
        path = out_dir / name
        try:
            with path.open("w", newline="") as handle:
                writer = csv.writer(handle)
                writer.writerow(header)
                writer.writerows(rows)
        except OSError as exc:
            raise OSError(f"failed writing report table {path}: {exc}") from exc
        written[name] = path

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        report_path = out_dir / "report.json"
        report_path.write_text(canonical_json(document) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing report to {out_dir}: {exc}") from exc
    written["report.json"] = report_path

    _write_csv(
        "scatter.csv",
        ("subject_id", "scan_id", "actual_l", "predicted_l"),
        (
            (p.subject_id, p.scan_id, repr(p.actual), repr(p.predicted))
            for p in pairs
        ),
    )
    _write_csv(
        "bland_altman.csv",
        ("subject_id", "scan_id", "mean_l", "diff_l"),
        (
            (p.subject_id, p.scan_id, repr(point[0]), repr(point[1]))
            for p, point in zip(pairs, ba.points)
        ),
    )
    _write_csv(
        "cdf.csv",
        ("error_pct", "cum_fraction"),
        ((repr(e), repr(f)) for e, f in cdf),
    )
    if confusion is not None:
        header = ("actual_stage", *confusion.stages)
        _write_csv(
            "confusion.csv",
            header,
            (
                (stage, *counts)
                for stage, counts in zip(confusion.stages, confusion.counts)
            ),
        )
    return written


# ---------------------------------------------------------------------------
# predictions CSV round trip
# ---------------------------------------------------------------------------


def save_predictions(pairs: Sequence[PredictionPair], path: str | Path) -> Path:
    """Write a prediction table as CSV with the fixed column schema."""
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(PREDICTION_COLUMNS)
        for p in pairs:
            writer.writerow(
                (
                    p.subject_id,
                    p.scan_id,
                    repr(p.actual),
                    repr(p.predicted),
                    p.sex or "",
                    p.emphysema or "",
                    p.gold_stage or "",
                    p.smoking_status or "",
                )
            )
    return path


def load_predictions(path: str | Path) -> tuple[PredictionPair, ...]:
    """Read a prediction table written by :func:`save_predictions`.

    The four id/value columns are required; the group-label columns are
    optional and blank cells load as ``None``.
    """
    path = Path(path)
    required = PREDICTION_COLUMNS[:4]
    pairs = []
    with path.open(newline="") as handle:
        reader = csv.DictReader(handle)
        missing = [c for c in required if c not in (reader.fieldnames or ())]
        if missing:
            raise ContractError(
                f"predictions file {path} is missing columns: {', '.join(missing)}"
            )
        for row_number, row in enumerate(reader, start=2):
            try:
                pairs.append(
                    PredictionPair(
                        subject_id=row["subject_id"],
                        scan_id=row["scan_id"],
                        actual=float(row["actual_l"]),
                        predicted=float(row["predicted_l"]),
                        sex=row.get("sex") or None,
                        emphysema=row.get("emphysema") or None,
                        gold_stage=row.get("gold_stage") or None,
                        smoking_status=row.get("smoking_status") or None,
                    )
                )
            except (ContractError, ValueError) as exc:
                raise ContractError(
                    f"predictions file {path} row {row_number}: {exc}"
                ) from exc
    return tuple(pairs)
