"""Per-scan evaluation drivers for the GNN and both baselines."""
from __future__ import annotations

import numpy as np

from .baselines import Hmm, hmm_predict_levels, match_keypoint_edges
from .dataset import Corpus, ScanRecord
from .gnn import GnnModel, predict
from .graphs import assign_targets, build_knn_graph
from .metrics import (EvalReport, ScanEval, edge_counts, identification_rate,
                      illegitimacy_counts)
from .spine import Keypoint, KeypointType


def scan_ground_truth(keypoints: list[Keypoint]) -> tuple[np.ndarray, np.ndarray]:
    """Positions and levels of the legitimate, labeled body keypoints."""
    bodies = [kp for kp in keypoints
              if kp.kind == KeypointType.BODY and kp.legitimate and kp.level is not None]
    if not bodies:
        return np.zeros((0, 3)), np.zeros(0, dtype=int)
    return (np.array([kp.position for kp in bodies]),
            np.array([kp.level for kp in bodies], dtype=int))


def true_association_edges(keypoints: list[Keypoint]) -> set[tuple[int, int]]:
    """All legitimate same-vertebra body-pedicle pairs, as keypoint index pairs."""
    edges: set[tuple[int, int]] = set()
    bodies = [(i, kp) for i, kp in enumerate(keypoints)
              if kp.kind == KeypointType.BODY and kp.legitimate and kp.level is not None]
    pedicles = [(i, kp) for i, kp in enumerate(keypoints)
                if kp.kind != KeypointType.BODY and kp.legitimate and kp.level is not None]
    for bi, body in bodies:
        for pi, ped in pedicles:
            if ped.level == body.level:
                edges.add((min(bi, pi), max(bi, pi)))
    return edges


def _identification_eval(scan: ScanRecord, pred_positions, pred_levels,
                         record: ScanEval) -> None:
    gt_pos, gt_levels = scan_ground_truth(scan.keypoints)
    record.n_gt_bodies = len(gt_pos)
    if len(gt_pos) == 0:
        return
    _, identified, nearest = identification_rate(gt_pos, gt_levels,
                                                 pred_positions, pred_levels)
    record.n_identified = int(identified.sum())
    if identified.any():
        record.identified_dist_sum = float(nearest[identified].sum())


def evaluate_gnn(model: GnnModel, corpus: Corpus, k: int = 14,
                 edge_threshold: float = 0.5, legitimacy_enabled: bool = False,
                 method: str = "gnn") -> EvalReport:
    report = EvalReport(method=method)
    for scan in corpus.records:
        record = ScanEval(scan_id=scan.scan_id)
        if len(scan.keypoints) >= 2:
            graph = assign_targets(build_knn_graph(scan.keypoints, k))
            pred = predict(model, graph, edge_threshold=edge_threshold,
                           legitimacy_enabled=legitimacy_enabled)
            is_body = np.array([kp.kind == KeypointType.BODY for kp in scan.keypoints])
            shown = is_body & pred.node_kept
            positions = np.array([kp.position for kp in scan.keypoints])
            _identification_eval(scan, positions[shown], pred.node_level[shown], record)
            tp, fp, fn = edge_counts(pred.positive_pairs,
                                     true_association_edges(scan.keypoints))
            record.edge_tp, record.edge_fp, record.edge_fn = tp, fp, fn
            if legitimacy_enabled:
                target_illegit = np.array([not kp.legitimate for kp in scan.keypoints])
                itp, ifp, ifn = illegitimacy_counts(~pred.node_kept, target_illegit)
                record.illegit_tp, record.illegit_fp, record.illegit_fn = itp, ifp, ifn
        else:
            _identification_eval(scan, np.zeros((0, 3)), np.zeros(0, dtype=int), record)
            truth = true_association_edges(scan.keypoints)
            record.edge_tp, record.edge_fp, record.edge_fn = 0, 0, len(truth)
        report.scans.append(record)
    return report


def evaluate_hungarian(corpus: Corpus, max_distance: float = 40.0,
                       method: str = "hungarian") -> EvalReport:
    """Edge metrics only; the matching baseline does not predict levels."""
    report = EvalReport(method=method)
    for scan in corpus.records:
        record = ScanEval(scan_id=scan.scan_id)
        predicted = match_keypoint_edges(scan.keypoints, max_distance=max_distance)
        tp, fp, fn = edge_counts(predicted, true_association_edges(scan.keypoints))
        record.edge_tp, record.edge_fp, record.edge_fn = tp, fp, fn
        report.scans.append(record)
    return report


def evaluate_hmm(hmm: Hmm, corpus: Corpus, method: str = "hmm") -> EvalReport:
    """Node metrics only; levels are decoded for the legitimate bodies."""
    report = EvalReport(method=method)
    for scan in corpus.records:
        record = ScanEval(scan_id=scan.scan_id)
        decoded = hmm_predict_levels(hmm, scan.keypoints)
        if decoded:
            idx = sorted(decoded)
            positions = np.array([scan.keypoints[i].position for i in idx])
            levels = np.array([decoded[i] for i in idx], dtype=int)
        else:
            positions = np.zeros((0, 3))
            levels = np.zeros(0, dtype=int)
        _identification_eval(scan, positions, levels, record)
        report.scans.append(record)
    return report
