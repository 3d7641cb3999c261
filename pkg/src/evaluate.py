"""
Statistics and reports: Pearson correlation with its t-test p-value, ID/OOD
separation (Z-score and histogram overlap), DVH metrics and the paired
Wilcoxon signed-rank test used to compare the network with and without the
reconstruction branch.
"""
import json
import re
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy import special, stats

from .errors import (DataError, DegenerateID, DegenerateVariance, EmptyStructure, IdMismatch,
                     LengthMismatch, TooFew)
from .grid import Mask, Volume
from .logger import setup_logger

logger = setup_logger("evaluate")

DVH_KINDS = ("Dmean", "D2", "D95", "D99")
TARGET_METRICS = ("D95", "D99")
OAR_METRICS = ("Dmean", "D2")
EXACT_WILCOXON_MAX_N = 12

# values reported for the clinical head-and-neck cohort; attached to reports for
# side-by-side reading, never used as pass/fail thresholds
REFERENCE_PEARSON = {
    "DE": (0.447, 6.2e-4),
    "MCDO(0.1)": (0.599, 1.3e-6),
    "MCDO(0.2)": (0.606, 9.1e-7),
    "MCDO(0.3)": (0.609, 8.0e-7),
    "MCDO(0.4)": (0.613, 6.4e-7),
    "MCDO(0.5)": (0.612, 6.6e-7),
    "RECON": (0.620, 4.5e-7),
}
REFERENCE_OOD = {
    "DE": (2.347, 0),
    "MCDO(0.1)": (0.368, 9),
    "MCDO(0.2)": (0.877, 4),
    "MCDO(0.3)": (1.098, 2),
    "MCDO(0.4)": (1.177, 2),
    "MCDO(0.5)": (1.124, 3),
    "RECON": (34.050, 0),
}


class PearsonResult(BaseModel):
    r: float
    p: float
    n: int
    reference_r: Optional[float] = None
    reference_p: Optional[float] = None


class OodResult(BaseModel):
    z_score: float
    overlap_count: int
    n_id: int
    n_ood: int
    reference_z: Optional[float] = None
    reference_overlap: Optional[int] = None


class DvhImpactRow(BaseModel):
    structure: str
    metric: str
    wilcoxon_p: Optional[float]
    n: int
    median_difference: float
    # prediction accuracy of each arm: median |predicted - ground truth|
    median_abs_error_standard: float
    median_abs_error_recon: float


class DvhMetric(BaseModel):
    kind: str
    structure: str
    value: float


class EvalReport(BaseModel):
    pearson: Dict[str, PearsonResult] = Field(default_factory=dict)
    ood: Dict[str, OodResult] = Field(default_factory=dict)
    dvh_impact: List[DvhImpactRow] = Field(default_factory=list)
    skipped: Dict[str, str] = Field(default_factory=dict)
    forward_passes: Dict[str, int] = Field(default_factory=dict)
    provenance: Dict[str, object] = Field(default_factory=dict)


def _as_array(x: Sequence[float]) -> np.ndarray:
    return np.asarray(list(x), dtype=np.float64)


def pearson(x: Sequence[float], y: Sequence[float]) -> Tuple[float, float]:
    """Correlation coefficient and two-sided p-value of t = r sqrt((n-2)/(1-r^2))."""
    x, y = _as_array(x), _as_array(y)
    if len(x) != len(y):
        raise LengthMismatch(f"pearson inputs have lengths {len(x)} and {len(y)}")
    n = len(x)
    if n < 3:
        raise TooFew(f"pearson needs at least 3 pairs, got {n}")
    xm, ym = x - x.mean(), y - y.mean()
    sxx, syy = float(np.dot(xm, xm)), float(np.dot(ym, ym))
    if sxx <= 0.0 or syy <= 0.0:
        raise DegenerateVariance("pearson is undefined when either input has zero variance")
    r = float(np.clip(np.dot(xm, ym) / (np.sqrt(sxx) * np.sqrt(syy)), -1.0, 1.0))
    if abs(r) == 1.0:
        return r, 0.0
    df = n - 2
    t2 = r * r * df / (1.0 - r * r)
    p = float(special.betainc(0.5 * df, 0.5, df / (df + t2)))
    return r, float(np.clip(p, 0.0, 1.0))


def z_score(id_values: Sequence[float], ood_values: Sequence[float]) -> float:
    """OOD mean displacement in units of the ID population std."""
    id_values, ood_values = _as_array(id_values), _as_array(ood_values)
    if len(ood_values) == 0:
        raise TooFew("z_score needs at least one OOD value")
    if len(id_values) < 2:
        raise DegenerateID(f"z_score needs at least 2 ID values, got {len(id_values)}")
    sigma = float(np.std(id_values))
    if sigma == 0.0:
        raise DegenerateID("ID values have zero spread")
    return float((ood_values.mean() - id_values.mean()) / sigma)


def overlap_count(id_values: Sequence[float], ood_values: Sequence[float]) -> int:
    """Members of both sets inside [max of minima, min of maxima]; 0 when that interval is empty."""
    id_values, ood_values = _as_array(id_values), _as_array(ood_values)
    if len(id_values) == 0 or len(ood_values) == 0:
        raise TooFew("overlap_count needs both sets nonempty")
    lo = max(id_values.min(), ood_values.min())
    hi = min(id_values.max(), ood_values.max())
    if lo > hi:
        return 0
    both = np.concatenate([id_values, ood_values])
    return int(np.count_nonzero((both >= lo) & (both <= hi)))


def dvh_metric(dose, structure, kind: str, name: str = "") -> DvhMetric:
    """Dmean, or Dx as the (100 - x)-th percentile (linear interpolation) of the structure's doses."""
    if kind not in DVH_KINDS:
        raise DataError(f"unknown DVH metric {kind!r}; expected one of {DVH_KINDS}")
    dose = dose.data if isinstance(dose, Volume) else np.asarray(dose)
    sel = (structure.data if isinstance(structure, Mask) else np.asarray(structure)).astype(bool)
    if dose.shape != sel.shape:
        raise DataError(f"dose shape {dose.shape} does not match structure shape {sel.shape}")
    values = dose[sel].astype(np.float64)
    if values.size == 0:
        raise EmptyStructure(f"structure {name or '?'} is empty")
    if kind == "Dmean":
        value = float(values.mean())
    else:
        value = float(np.percentile(values, 100.0 - float(kind[1:]), method="linear"))
    return DvhMetric(kind=kind, structure=name, value=value)


def sign_enumeration(n: int) -> np.ndarray:
    """All 2^n sign assignments as a 0/1 matrix (1 = positive)."""
    codes = np.arange(2 ** n, dtype=np.int64)[:, None]
    return ((codes >> np.arange(n, dtype=np.int64)) & 1).astype(np.float64)


def exact_signed_rank_p(ranks: np.ndarray, w: float) -> float:
    """Two-sided p: share of sign assignments whose min(W+, W-) is at most w."""
    ranks = np.asarray(ranks, dtype=np.float64)
    total = float(ranks.sum())
    w_plus = sign_enumeration(len(ranks)) @ ranks
    w_min = np.minimum(w_plus, total - w_plus)
    count = int(np.count_nonzero(w_min <= w + 1e-9))
    return min(1.0, count / float(2 ** len(ranks)))


def normal_signed_rank_p(abs_diffs: np.ndarray, w: float) -> float:
    """Normal approximation with tie and continuity corrections."""
    n = len(abs_diffs)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(abs_diffs, return_counts=True)
    var -= float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    if var <= 0:
        return 1.0
    z = max(abs(w - mean) - 0.5, 0.0) / np.sqrt(var)
    return float(min(1.0, 2.0 * stats.norm.sf(z)))


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float], paired: bool = True) -> float:
    """Paired two-sided Wilcoxon signed-rank test; zero differences are dropped."""
    if not paired:
        raise DataError("only the paired signed-rank test is implemented")
    a, b = _as_array(a), _as_array(b)
    if len(a) != len(b):
        raise LengthMismatch(f"wilcoxon inputs have lengths {len(a)} and {len(b)}")
    d = a - b
    d = d[d != 0.0]
    if len(d) == 0:
        return 1.0
    if len(d) < 5:
        raise TooFew(f"wilcoxon needs at least 5 nonzero differences, got {len(d)}")
    abs_d = np.abs(d)
    ranks = stats.rankdata(abs_d, method="average")
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if len(d) <= EXACT_WILCOXON_MAX_N:
        return exact_signed_rank_p(ranks, w)
    return normal_signed_rank_p(abs_d, w)


def run_id_analysis(scores: Mapping[str, Mapping[str, float]], dose_errors: Mapping[str, float],
                    method_dose_errors: Optional[Mapping[str, Mapping[str, float]]] = None,
                    report: Optional[EvalReport] = None) -> EvalReport:
    """Pearson correlation between each method's uncertainty and the body-masked
    dose error of the prediction it accompanies."""
    report = report if report is not None else EvalReport()
    method_dose_errors = method_dose_errors or {}
    for method in sorted(scores):
        errors = method_dose_errors.get(method, dose_errors)
        ids = sorted(set(scores[method]) & set(errors))
        if not ids:
            raise IdMismatch(f"{method}: no sample ids shared by scores and dose errors")
        extra = set(scores[method]) ^ set(errors)
        if extra:
            logger.warning(f"{method}: {len(extra)} ids present on only one side; using {len(ids)} shared ids")
        try:
            r, p = pearson([scores[method][i] for i in ids], [errors[i] for i in ids])
        except (DegenerateVariance, TooFew) as e:
            logger.warning(f"{method}: Pearson skipped: {e}")
            report.skipped[f"pearson:{method}"] = str(e)
            continue
        ref = REFERENCE_PEARSON.get(method, (None, None))
        report.pearson[method] = PearsonResult(r=r, p=p, n=len(ids), reference_r=ref[0], reference_p=ref[1])
        logger.info(f"{method}: Pearson r={r:.3f} (p={p:.2e}, n={len(ids)})")
    return report


def run_ood_analysis(id_values: Mapping[str, Sequence[float]], ood_values: Mapping[str, Sequence[float]],
                     report: Optional[EvalReport] = None) -> EvalReport:
    report = report if report is not None else EvalReport()
    for method in sorted(set(id_values) & set(ood_values)):
        id_v, ood_v = list(id_values[method]), list(ood_values[method])
        try:
            z = z_score(id_v, ood_v)
        except (DegenerateID, TooFew) as e:
            logger.warning(f"{method}: Z-score skipped: {e}")
            report.skipped[f"ood:{method}"] = str(e)
            continue
        ref = REFERENCE_OOD.get(method, (None, None))
        report.ood[method] = OodResult(
            z_score=z, overlap_count=overlap_count(id_v, ood_v), n_id=len(id_v), n_ood=len(ood_v),
            reference_z=ref[0], reference_overlap=ref[1],
        )
        logger.info(f"{method}: Z-score {z:.3f}, overlap {report.ood[method].overlap_count}")
    return report


def structure_metrics(structure: str) -> Tuple[str, ...]:
    return TARGET_METRICS if structure in ("tv_high", "tv_low") else OAR_METRICS


def run_branch_impact(dvh: pd.DataFrame, report: Optional[EvalReport] = None) -> EvalReport:
    """Paired Wilcoxon per (structure, metric) between the DVH errors of the
    single-branch and the reconstruction-branch predictions.

    `dvh` columns: sample_id, structure, metric, ground_truth, standard, recon.
    """
    report = report if report is not None else EvalReport()
    rows = []
    for (structure, metric), group in dvh.groupby(["structure", "metric"], sort=False):
        group = group.sort_values("sample_id")
        err_standard = (group["standard"] - group["ground_truth"]).to_numpy()
        err_recon = (group["recon"] - group["ground_truth"]).to_numpy()
        try:
            p = wilcoxon_signed_rank(err_standard, err_recon)
        except TooFew as e:
            logger.warning(f"{structure} {metric}: Wilcoxon skipped: {e}")
            p = None
        rows.append(DvhImpactRow(
            structure=str(structure), metric=str(metric), wilcoxon_p=p, n=len(group),
            median_difference=float(np.median(err_standard - err_recon)),
            median_abs_error_standard=float(np.median(np.abs(err_standard))),
            median_abs_error_recon=float(np.median(np.abs(err_recon))),
        ))
    report.dvh_impact = rows
    return report


def method_slug(method: str) -> str:
    return re.sub(r"[^a-z0-9.]+", "_", method.lower()).strip("_")


def _to_csv(frame: pd.DataFrame, path: Path):
    frame.to_csv(path, index=False, lineterminator="\r\n")


TABLE1_COLUMNS = ["structure", "metric", "wilcoxon_p", "median_abs_error_standard", "median_abs_error_recon"]


def dvh_impact_table(rows: Sequence[DvhImpactRow]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump(include=set(TABLE1_COLUMNS)) for r in rows], columns=TABLE1_COLUMNS)


def write_report(report: EvalReport, directory: Path) -> Path:
    """report.json plus the three summary tables."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "report.json").write_text(
        json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _to_csv(pd.DataFrame(
        [{"method": m, "r": res.r, "p": res.p} for m, res in report.pearson.items()],
        columns=["method", "r", "p"],
    ), directory / "table2.csv")
    _to_csv(pd.DataFrame(
        [{"method": m, "z": res.z_score, "overlap": res.overlap_count} for m, res in report.ood.items()],
        columns=["method", "z", "overlap"],
    ), directory / "table3.csv")
    _to_csv(dvh_impact_table(report.dvh_impact), directory / "table1.csv")
    logger.info(f"Wrote report and tables to {directory}")
    return directory / "report.json"


def write_histograms(id_values: Mapping[str, Sequence[float]], ood_values: Mapping[str, Sequence[float]],
                     directory: Path) -> List[Path]:
    """One value/family table per method for plotting the ID and OOD distributions."""
    directory = Path(directory)
    paths = []
    for method in sorted(set(id_values) | set(ood_values)):
        rows = [{"value": v, "family": "ID"} for v in id_values.get(method, [])]
        rows += [{"value": v, "family": "OOD"} for v in ood_values.get(method, [])]
        path = directory / f"hist_{method_slug(method)}.csv"
        _to_csv(pd.DataFrame(rows, columns=["value", "family"]), path)
        paths.append(path)
    return paths
