"""Evaluation metrics: identification rate, d_mean, F1 scores, hard subset,
and a two-sided Wilcoxon signed-rank test with an exact small-sample branch.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDENTIFICATION_GATE_MM = 20.0
WILCOXON_EXACT_MAX_N = 12


def identification_rate(gt_positions: np.ndarray, gt_levels: np.ndarray,
                        pred_positions: np.ndarray, pred_levels: np.ndarray
                        ) -> tuple[float, np.ndarray, np.ndarray]:
    """Fraction of ground-truth bodies whose nearest prediction matches.

    A body counts as identified iff its closest predicted point lies within
    20 mm and carries the correct level. Returns (rate, identified flags,
    distance to the nearest prediction per ground-truth body). An empty
    prediction set gives rate 0.
    """
    gt_positions = np.asarray(gt_positions, dtype=float).reshape(-1, 3)
    pred_positions = np.asarray(pred_positions, dtype=float).reshape(-1, 3)
    gt_levels = np.asarray(gt_levels, dtype=int)
    pred_levels = np.asarray(pred_levels, dtype=int)
    n = len(gt_positions)
    if n == 0:
        return 0.0, np.zeros(0, dtype=bool), np.zeros(0)
    if len(pred_positions) == 0:
        return 0.0, np.zeros(n, dtype=bool), np.full(n, np.inf)
    dists = np.linalg.norm(gt_positions[:, None, :] - pred_positions[None, :, :], axis=2)
    nearest = dists.argmin(axis=1)
    nearest_dist = dists[np.arange(n), nearest]
    identified = (nearest_dist <= IDENTIFICATION_GATE_MM) & (pred_levels[nearest] == gt_levels)
    return float(identified.mean()), identified, nearest_dist


def d_mean(identified: np.ndarray, nearest_dist: np.ndarray) -> float | None:
    """Mean gt-to-nearest-prediction distance over identified bodies; None if none."""
    identified = np.asarray(identified, dtype=bool)
    if not identified.any():
        return None
    return float(np.asarray(nearest_dist)[identified].mean())


def f1(tp: int, fp: int, fn: int) -> float:
    """F1 = 2TP / (2TP + FP + FN); the empty-positive case counts as perfect."""
    if tp < 0 or fp < 0 or fn < 0:
        raise ValueError("counts must be non-negative")
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 1.0
    return 2 * tp / denom


def _pair_set(edges) -> set[tuple[int, int]]:
    return {(min(int(u), int(v)), max(int(u), int(v))) for u, v in edges}


def edge_counts(predicted_edges, target_edges) -> tuple[int, int, int]:
    pred = _pair_set(predicted_edges)
    target = _pair_set(target_edges)
    tp = len(pred & target)
    return tp, len(pred) - tp, len(target) - tp


def edge_f1(predicted_edges, target_edges) -> float:
    return f1(*edge_counts(predicted_edges, target_edges))


def illegitimacy_counts(pred_illegitimate, target_illegitimate) -> tuple[int, int, int]:
    """Counts with the positive class being 'illegitimate'."""
    pred = np.asarray(pred_illegitimate, dtype=bool)
    target = np.asarray(target_illegitimate, dtype=bool)
    if pred.shape != target.shape:
        raise ValueError("flag arrays must align")
    tp = int((pred & target).sum())
    fp = int((pred & ~target).sum())
    fn = int((~pred & target).sum())
    return tp, fp, fn


def illegitimacy_f1(pred_illegitimate, target_illegitimate) -> float:
    return f1(*illegitimacy_counts(pred_illegitimate, target_illegitimate))


def _norm_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _rank_abs(values: np.ndarray) -> np.ndarray:
    """Average ranks of |values| (midranks for ties), 1-based."""
    a = np.abs(values)
    order = np.argsort(a, kind="stable")
    ranks = np.zeros(len(a))
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _wilcoxon_exact(ranks: np.ndarray, w_plus: float) -> float:
    """P(|W - mu| >= |w_plus - mu|) by enumerating all sign assignments."""
    n = len(ranks)
    mu = n * (n + 1) / 4.0
    observed_dev = abs(w_plus - mu)
    hits = 0
    for signs in itertools.product((0.0, 1.0), repeat=n):
        w = float(np.dot(signs, ranks))
        if abs(w - mu) >= observed_dev - 1e-12:
            hits += 1
    return hits / 2.0 ** n


def _wilcoxon_approx(diff: np.ndarray, w_plus: float) -> float:
    """Normal approximation with tie and continuity corrections."""
    n = len(diff)
    mu = n * (n + 1) / 4.0
    _, counts = np.unique(np.abs(diff), return_counts=True)
    tie_term = float((counts.astype(float) ** 3 - counts).sum()) / 48.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    dev = w_plus - mu
    if var <= 0 or dev == 0:
        return 1.0
    z = (dev - 0.5 * math.copysign(1.0, dev)) / math.sqrt(var)
    return min(1.0, 2.0 * (1.0 - _norm_cdf(abs(z))))


def wilcoxon_signed_rank(sample_a, sample_b, method: str = "auto") -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired samples.

    Zero differences are dropped. With n <= 12 remaining pairs the p-value is
    exact, enumerating all 2^n sign assignments of the observed ranks; larger
    n uses the normal approximation with tie and continuity corrections.
    All-zero differences give p = 1. `method` forces a branch for testing.
    """
    if method not in ("auto", "exact", "approx"):
        raise ValueError(f"unknown method {method!r}")
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    diff = a - b
    diff = diff[diff != 0.0]
    n = len(diff)
    if n == 0:
        return 1.0
    ranks = _rank_abs(diff)
    w_plus = float(ranks[diff > 0].sum())
    if method == "exact" or (method == "auto" and n <= WILCOXON_EXACT_MAX_N):
        return _wilcoxon_exact(ranks, w_plus)
    return _wilcoxon_approx(diff, w_plus)


@dataclass
class ScanEval:
    """Per-scan metric counts for one method."""

    scan_id: str
    n_gt_bodies: int = 0
    n_identified: int = 0
    identified_dist_sum: float = 0.0
    edge_tp: int | None = None
    edge_fp: int | None = None
    edge_fn: int | None = None
    illegit_tp: int | None = None
    illegit_fp: int | None = None
    illegit_fn: int | None = None

    @property
    def identification_rate(self) -> float | None:
        if self.n_gt_bodies == 0:
            return None
        return self.n_identified / self.n_gt_bodies

    @property
    def edge_f1(self) -> float | None:
        if self.edge_tp is None:
            return None
        return f1(self.edge_tp, self.edge_fp, self.edge_fn)

    @property
    def has_identification_error(self) -> bool:
        return self.n_identified < self.n_gt_bodies

    @property
    def has_edge_error(self) -> bool:
        return self.edge_tp is not None and (self.edge_fp + self.edge_fn) > 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "scan_id", "n_gt_bodies", "n_identified", "identified_dist_sum",
            "edge_tp", "edge_fp", "edge_fn", "illegit_tp", "illegit_fp", "illegit_fn")}

    @classmethod
    def from_dict(cls, d: dict) -> "ScanEval":
        return cls(**d)


@dataclass
class EvalReport:
    """Per-scan records plus aggregates for one method over one corpus."""

    method: str
    scans: list[ScanEval] = field(default_factory=list)
    p_values: dict[str, float] = field(default_factory=dict)

    def aggregate(self) -> dict:
        total_gt = sum(s.n_gt_bodies for s in self.scans)
        total_id = sum(s.n_identified for s in self.scans)
        dist_sum = sum(s.identified_dist_sum for s in self.scans)
        agg: dict = {
            "n_scans": len(self.scans),
            "identification_rate": total_id / total_gt if total_gt else None,
            "d_mean": dist_sum / total_id if total_id else None,
        }
        edge_scans = [s for s in self.scans if s.edge_tp is not None]
        if edge_scans:
            tp = sum(s.edge_tp for s in edge_scans)
            fp = sum(s.edge_fp for s in edge_scans)
            fn = sum(s.edge_fn for s in edge_scans)
            agg.update(edge_tp=tp, edge_fp=fp, edge_fn=fn, edge_f1=f1(tp, fp, fn))
        else:
            agg["edge_f1"] = None
        illegit_scans = [s for s in self.scans if s.illegit_tp is not None]
        if illegit_scans:
            tp = sum(s.illegit_tp for s in illegit_scans)
            fp = sum(s.illegit_fp for s in illegit_scans)
            fn = sum(s.illegit_fn for s in illegit_scans)
            agg["illegitimacy_f1"] = f1(tp, fp, fn)
        else:
            agg["illegitimacy_f1"] = None
        return agg

    def scan_ids(self) -> list[str]:
        return [s.scan_id for s in self.scans]

    def to_json(self) -> str:
        return json.dumps({
            "method": self.method,
            "aggregate": self.aggregate(),
            "p_values": self.p_values,
            "scans": [s.to_dict() for s in self.scans],
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(method=d["method"],
                   scans=[ScanEval.from_dict(s) for s in d["scans"]],
                   p_values=d.get("p_values", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_json(Path(path).read_text())

    def to_csv(self) -> str:
        cols = ["method", "scan_id", "n_gt_bodies", "n_identified", "identification_rate",
                "identified_dist_sum", "edge_tp", "edge_fp", "edge_fn", "edge_f1",
                "illegit_tp", "illegit_fp", "illegit_fn"]
        lines = [",".join(cols)]
        for s in self.scans:
            row = [self.method, s.scan_id, s.n_gt_bodies, s.n_identified,
                   s.identification_rate, s.identified_dist_sum, s.edge_tp, s.edge_fp,
                   s.edge_fn, s.edge_f1, s.illegit_tp, s.illegit_fp, s.illegit_fn]
            lines.append(",".join("" if v is None else str(v) for v in row))
        return "\n".join(lines) + "\n"


def hard_subset(reports: list[EvalReport]) -> set[str]:
    """Scan ids on which at least one method shows an identification or edge error."""
    if len(reports) < 2:
        raise ValueError("hard subset needs at least two methods")
    ids = reports[0].scan_ids()
    for report in reports[1:]:
        if report.scan_ids() != ids:
            raise ValueError("reports cover different scans or orders")
    hard: set[str] = set()
    for report in reports:
        for scan in report.scans:
            if scan.has_identification_error or scan.has_edge_error:
                hard.add(scan.scan_id)
    return hard


def subset_report(report: EvalReport, scan_ids: set[str]) -> EvalReport:
    return EvalReport(method=report.method,
                      scans=[s for s in report.scans if s.scan_id in scan_ids])


def compare_reports(report_a: EvalReport, report_b: EvalReport) -> dict:
    """Aligned comparison: aggregates, Wilcoxon p-values, hard-subset metrics."""
    if report_a.scan_ids() != report_b.scan_ids():
        raise ValueError("reports cover different scans or orders")
    result: dict = {
        "method_a": report_a.method,
        "method_b": report_b.method,
        "full": {report_a.method: report_a.aggregate(), report_b.method: report_b.aggregate()},
    }
    p_values: dict[str, float] = {}
    rates = [(a.identification_rate, b.identification_rate)
             for a, b in zip(report_a.scans, report_b.scans)
             if a.identification_rate is not None and b.identification_rate is not None]
    if rates:
        p_values["identification_rate"] = wilcoxon_signed_rank(
            [r[0] for r in rates], [r[1] for r in rates])
    edge_pairs = [(a.edge_f1, b.edge_f1) for a, b in zip(report_a.scans, report_b.scans)
                  if a.edge_f1 is not None and b.edge_f1 is not None]
    if edge_pairs:
        p_values["edge_f1"] = wilcoxon_signed_rank(
            [e[0] for e in edge_pairs], [e[1] for e in edge_pairs])
    result["p_values"] = p_values

    hard = hard_subset([report_a, report_b])
    result["hard_subset"] = {
        "scan_ids": sorted(hard),
        report_a.method: subset_report(report_a, hard).aggregate(),
        report_b.method: subset_report(report_b, hard).aggregate(),
    }
    return result
