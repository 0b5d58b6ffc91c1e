"""
Diagnostics: ground-truth TSD ranking, precision/recall of launched
directions, alignment fractions, amplification factors and task overlap.
"""

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, fields
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .adapters import AdapterState, ab_delta, dash_delta, merged_weight
from .errors import DegenerateProjection, InvalidArgument, InvalidState, ReportError, ShapeMismatch
from .spectral import DEFAULT_EPSILON, ChangeRates, Matrix, SvdFactors, as_matrix, change_rates, svd, top_k

DEGENERATE_DENOMINATOR = 1e-12

METRICS_HEADER = [
    "seed", "step", "layer", "precision", "recall",
    "dtsd_ltsd", "tsd_ltsd", "tsd_dtsd", "amp_all", "amp_ab", "amp_dash",
]


@dataclass(frozen=True)
class TsdGroundTruth:
    rates: ChangeRates
    top4: List[int]
    top16: List[int]
    refs_clipped: bool  # min(n, m) < 16

    def top(self, k: int) -> List[int]:
        """Ranking prefix of length min(k, number of directions)."""
        return top_k(self.rates, min(k, len(self.rates)))


@dataclass(frozen=True)
class PrScore:
    precision: float
    recall: float
    k_pred: int
    k_prec_ref: int
    k_rec_ref: int


@dataclass(frozen=True)
class AlignmentRow:
    dtsd_cap_ltsd: float
    tsd_cap_ltsd: float
    tsd_cap_dtsd: float


@dataclass(frozen=True)
class AmpReport:
    amp_all: float
    amp_ab: float
    amp_dash: float


def ground_truth_tsd(
    w: Matrix,
    w_star: Matrix,
    epsilon: float = DEFAULT_EPSILON,
    f: Optional[SvdFactors] = None,
) -> TsdGroundTruth:
    """
    Rank the core directions of ``w`` by their change rate under W* - W.

    Args:
        w: Pretrained weight
        w_star: Optimal (or fully fine-tuned) weight
        epsilon: Change-rate regularizer
        f: Precomputed factors of ``w``

    Returns:
        TsdGroundTruth with top-4/top-16 prefixes clipped to min(n, m)
    """
    w = as_matrix(w, "w")
    w_star = as_matrix(w_star, "w_star")
    if w.shape != w_star.shape:
        raise ShapeMismatch(f"w {w.shape} vs w_star {w_star.shape}")
    f = f if f is not None else svd(w)
    rates = change_rates(f, w_star - w, epsilon)
    k = len(rates)
    return TsdGroundTruth(
        rates=rates,
        top4=top_k(rates, min(4, k)),
        top16=top_k(rates, min(16, k)),
        refs_clipped=k < 16,
    )


def pr_score(
    pred: Sequence[int],
    truth: TsdGroundTruth,
    k_prec_ref: int = 16,
    k_rec_ref: int = 4,
) -> PrScore:
    """
    Precision: share of predicted directions inside the top ``k_prec_ref``
    TSDs. Recall: share of the top ``k_rec_ref`` TSDs among the predictions.
    """
    pred = [int(i) for i in pred]
    if not pred:
        raise InvalidArgument("pred must not be empty")
    if len(set(pred)) != len(pred):
        raise InvalidArgument(f"pred must be distinct, got {pred}")
    prec_ref = set(truth.top(k_prec_ref))
    rec_ref = truth.top(k_rec_ref)
    hits_prec = len(prec_ref.intersection(pred))
    hits_rec = len(set(rec_ref).intersection(pred))
    return PrScore(
        precision=hits_prec / len(pred),
        recall=hits_rec / len(rec_ref),
        k_pred=len(pred),
        k_prec_ref=len(prec_ref),
        k_rec_ref=len(rec_ref),
    )


def alignment(
    ltsd: Sequence[int],
    dtsd_rates: ChangeRates,
    truth: TsdGroundTruth,
    s: int,
) -> AlignmentRow:
    """
    Fractions of the top-4 DTSDs (final update) and top-4 TSDs contained in
    the s LTSDs, and of the top-4 TSDs contained in the top-s DTSDs.
    """
    ltsd = {int(i) for i in ltsd}
    if len(ltsd) != s:
        raise InvalidArgument(f"expected {s} distinct LTSDs, got {len(ltsd)}")
    k = len(dtsd_rates)
    ref = min(4, k)
    dtsd_top4 = top_k(dtsd_rates, ref)
    dtsd_set = set(top_k(dtsd_rates, min(s, k)))
    tsd_top4 = truth.top(ref)
    return AlignmentRow(
        dtsd_cap_ltsd=len(ltsd.intersection(dtsd_top4)) / ref,
        tsd_cap_ltsd=len(ltsd.intersection(tsd_top4)) / ref,
        tsd_cap_dtsd=len(dtsd_set.intersection(tsd_top4)) / ref,
    )


def amplification(w: Matrix, state: AdapterState) -> AmpReport:
    """
    Amplification of the launched directions: ||U_bar^T X V_bar||_F over
    ||U_bar^T W V_bar||_F for X = merged weight, base + AB-only and
    base + dash-only.
    """
    if state.dash is None:
        raise InvalidState("amplification needs a state with launched directions")
    u_bar, v_bar = state.dash.u_bar, state.dash.v_bar

    def _proj(x: Matrix) -> float:
        return float(np.linalg.norm(u_bar.T @ x @ v_bar))

    denom = _proj(as_matrix(w, "w"))
    if denom < DEGENERATE_DENOMINATOR:
        raise DegenerateProjection(f"projection of W onto the launched directions is {denom:.3g}")
    return AmpReport(
        amp_all=_proj(merged_weight(state)) / denom,
        amp_ab=_proj(state.base + ab_delta(state)) / denom,
        amp_dash=_proj(state.base + dash_delta(state)) / denom,
    )


def task_overlap(truth_a: TsdGroundTruth, truth_b: TsdGroundTruth, k: int) -> float:
    """|top-k(a) & top-k(b)| / k."""
    limit = min(len(truth_a.rates), len(truth_b.rates))
    if not 1 <= k <= limit:
        raise InvalidArgument(f"k must lie in [1, {limit}], got {k}")
    return len(set(top_k(truth_a.rates, k)) & set(top_k(truth_b.rates, k))) / k


def shared_direction_ranks(truth_a: TsdGroundTruth, truth_b: TsdGroundTruth, k: int) -> List[Tuple[int, int, int]]:
    """
    Directions in both top-k sets with their 1-based rank in each task,
    ordered by rank in task a.
    """
    top_a = top_k(truth_a.rates, k)
    rank_b = {idx: pos + 1 for pos, idx in enumerate(top_k(truth_b.rates, k))}
    return [(idx, pos + 1, rank_b[idx]) for pos, idx in enumerate(top_a) if idx in rank_b]


@dataclass
class MetricsRow:
    seed: int
    step: int
    layer: int = 0
    precision: Optional[float] = None
    recall: Optional[float] = None
    dtsd_ltsd: Optional[float] = None
    tsd_ltsd: Optional[float] = None
    tsd_dtsd: Optional[float] = None
    amp_all: Optional[float] = None
    amp_ab: Optional[float] = None
    amp_dash: Optional[float] = None

    def csv_fields(self) -> List[str]:
        return [format_value(getattr(self, name)) for name in METRICS_HEADER]


def format_value(value) -> str:
    """CSV cell: empty for missing data, 17 significant digits for floats."""
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def write_metrics_csv(rows: Iterable[MetricsRow], path: str) -> None:
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(METRICS_HEADER)
            for row in rows:
                writer.writerow(row.csv_fields())
    except OSError as e:
        raise ReportError(f"Failed to write metrics {path}: {e}") from e


def average_by_step(rows: Iterable[MetricsRow]) -> List[MetricsRow]:
    """
    Arithmetic mean of every metric over layers and seeds, per step.
    Missing values are skipped; a column missing everywhere stays missing.
    The seed column of the result is -1.
    """
    groups: Dict[int, List[MetricsRow]] = defaultdict(list)
    for row in rows:
        groups[row.step].append(row)
    names = [f.name for f in fields(MetricsRow) if f.name not in ("seed", "step", "layer")]
    out = []
    for step in sorted(groups):
        values = {}
        for name in names:
            present = [getattr(r, name) for r in groups[step] if getattr(r, name) is not None]
            values[name] = math.fsum(present) / len(present) if present else None
        out.append(MetricsRow(seed=-1, step=step, layer=-1, **values))
    return out


