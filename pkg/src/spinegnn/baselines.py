"""Comparison methods: Hungarian body-pedicle matching and an HMM level decoder.

The Hungarian solver uses shortest augmenting paths with dual potentials and
then refines ties so the returned assignment is the lexicographically smallest
optimum. The HMM is a discrete 28-state chain over observed segment labels,
fitted with scaled Baum-Welch and decoded with Viterbi.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .spine import Keypoint, KeypointType, N_LEVELS, level_to_segment

_TIE_TOL = 1e-9


def _solve_square(cost: np.ndarray) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Minimum-cost perfect matching on a square matrix.

    Returns (total, col_of_row, u, v) where u, v are optimal dual potentials
    with cost[r, c] >= u[r] + v[c] and equality on assigned pairs.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[j]: row matched to column j, 1-based, 0 = free
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = np.empty(n + 1)
            cur[1:] = cost[i0 - 1, :] - u[i0] - v[1:]
            free = ~used
            free[0] = False
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            free_idx = np.flatnonzero(free)
            j1 = int(free_idx[np.argmin(minv[free_idx])])
            delta = minv[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.zeros(n, dtype=int)
    for j in range(1, n + 1):
        col_of_row[p[j] - 1] = j - 1
    total = float(cost[np.arange(n), col_of_row].sum())
    return total, col_of_row, u[1:], v[1:]


def _solve_rect(cost: np.ndarray) -> tuple[float, list[tuple[int, int]], np.ndarray, np.ndarray]:
    """Minimum-cost maximum matching on a rectangular matrix via zero padding."""
    n, m = cost.shape
    if n <= m:
        padded = np.zeros((m, m))
        padded[:n] = cost
        total, col_of_row, u, v = _solve_square(padded)
        pairs = [(r, int(col_of_row[r])) for r in range(n)]
        return total, pairs, u[:n], v
    total, flipped, u, v = _solve_rect(cost.T)
    return total, [(r, c) for c, r in flipped], v, u


def hungarian(cost) -> list[tuple[int, int]]:
    """Lexicographically smallest minimum-cost maximum matching.

    Accepts rectangular matrices; returns min(n, m) (row, col) pairs sorted by
    row. Among equal-cost optima the assignment whose sorted pair list is
    lexicographically smallest is chosen. Empty input yields an empty list.
    """
    cost = np.atleast_2d(np.asarray(cost, dtype=float))
    if cost.size == 0:
        return []
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    n, m = cost.shape

    rows = list(range(n))
    cols = list(range(m))
    total, _, u, v = _solve_rect(cost)
    tol = _TIE_TOL * max(1.0, abs(total))
    pairs: list[tuple[int, int]] = []
    while rows and cols and len(pairs) < min(n, m):
        r = rows[0]
        r_local = 0
        chosen = None
        for c_local, c in enumerate(cols):
            # a pair with positive reduced cost lies in no optimal assignment
            if cost[r, c] - u[r_local] - v[c_local] > tol:
                continue
            sub_rows = rows[1:]
            sub_cols = cols[:c_local] + cols[c_local + 1:]
            if sub_rows and sub_cols:
                sub_total, _, sub_u, sub_v = _solve_rect(cost[np.ix_(sub_rows, sub_cols)])
            else:
                sub_total, sub_u, sub_v = 0.0, np.zeros(0), np.zeros(0)
            if cost[r, c] + sub_total <= total + tol:
                chosen = c
                total, u, v = sub_total, sub_u, sub_v
                cols = sub_cols
                break
        rows = rows[1:]
        if chosen is not None:
            pairs.append((r, chosen))
        else:
            # row r appears in no optimal maximum matching (possible when n > m)
            total, _, u, v = _solve_rect(cost[np.ix_(rows, cols)])
            tol = _TIE_TOL * max(1.0, abs(total))
    return pairs


@dataclass
class MatchedEdges:
    left: list[tuple[int, int]]  # (body index, left-pedicle index) within the inputs
    right: list[tuple[int, int]]


def associate_by_matching(bodies: np.ndarray, pedicles_left: np.ndarray,
                          pedicles_right: np.ndarray,
                          max_distance: float = 40.0) -> MatchedEdges:
    """Hungarian matching per pedicle side on Euclidean costs.

    Matched pairs farther apart than `max_distance` (mm) are rejected; the
    default sits above the synthetic pedicle offset (~19 mm) and below the
    inter-vertebra ambiguity range.
    """

    def one_side(pedicles: np.ndarray) -> list[tuple[int, int]]:
        bodies_arr = np.asarray(bodies, dtype=float).reshape(-1, 3)
        ped_arr = np.asarray(pedicles, dtype=float).reshape(-1, 3)
        if len(bodies_arr) == 0 or len(ped_arr) == 0:
            return []
        cost = np.linalg.norm(bodies_arr[:, None, :] - ped_arr[None, :, :], axis=2)
        return [(b, p) for b, p in hungarian(cost) if cost[b, p] <= max_distance]

    return MatchedEdges(left=one_side(pedicles_left), right=one_side(pedicles_right))


def match_keypoint_edges(keypoints: list[Keypoint], max_distance: float = 40.0) -> list[tuple[int, int]]:
    """Baseline association over a raw keypoint list, as undirected index pairs."""
    body_idx = [i for i, kp in enumerate(keypoints) if kp.kind == KeypointType.BODY]
    left_idx = [i for i, kp in enumerate(keypoints) if kp.kind == KeypointType.LEFT_PEDICLE]
    right_idx = [i for i, kp in enumerate(keypoints) if kp.kind == KeypointType.RIGHT_PEDICLE]
    positions = np.array([kp.position for kp in keypoints]).reshape(-1, 3)
    matched = associate_by_matching(
        positions[body_idx] if body_idx else np.zeros((0, 3)),
        positions[left_idx] if left_idx else np.zeros((0, 3)),
        positions[right_idx] if right_idx else np.zeros((0, 3)),
        max_distance=max_distance,
    )
    edges = [(body_idx[b], left_idx[p]) for b, p in matched.left]
    edges += [(body_idx[b], right_idx[p]) for b, p in matched.right]
    return sorted(tuple(sorted(e)) for e in edges)


@dataclass
class Hmm:
    """Discrete hidden Markov model with dense transition and emission tables."""

    pi: np.ndarray  # (S,)
    A: np.ndarray  # (S, S)
    B: np.ndarray  # (S, K)

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        s = self.pi.shape[0]
        if self.A.shape != (s, s) or self.B.shape[0] != s:
            raise ValueError("inconsistent HMM shapes")
        for name, rows in (("pi", self.pi[None, :]), ("A", self.A), ("B", self.B)):
            sums = rows.sum(axis=1)
            if not np.allclose(sums, 1.0, atol=1e-9):
                raise ValueError(f"rows of {name} must sum to 1, got {sums}")

    @property
    def num_states(self) -> int:
        return self.pi.shape[0]

    def copy(self) -> "Hmm":
        return Hmm(self.pi.copy(), self.A.copy(), self.B.copy())

    def to_json(self) -> str:
        return json.dumps({"pi": self.pi.tolist(), "A": self.A.tolist(), "B": self.B.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "Hmm":
        d = json.loads(text)
        return cls(np.asarray(d["pi"]), np.asarray(d["A"]), np.asarray(d["B"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "Hmm":
        return cls.from_json(Path(path).read_text())


def _forward_scaled(hmm: Hmm, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Rabiner-scaled forward pass; returns (alpha_hat, scales, log-likelihood)."""
    t_max = len(obs)
    alpha = np.zeros((t_max, hmm.num_states))
    scales = np.zeros(t_max)
    step = hmm.pi * hmm.B[:, obs[0]]
    for t in range(t_max):
        if t > 0:
            step = (alpha[t - 1] @ hmm.A) * hmm.B[:, obs[t]]
        scales[t] = step.sum()
        if scales[t] <= 0.0:
            raise ValueError("observation sequence has zero probability under the model")
        alpha[t] = step / scales[t]
    return alpha, scales, float(np.log(scales).sum())


def _backward_scaled(hmm: Hmm, obs: np.ndarray, scales: np.ndarray) -> np.ndarray:
    t_max = len(obs)
    beta = np.zeros((t_max, hmm.num_states))
    beta[t_max - 1] = 1.0
    for t in range(t_max - 2, -1, -1):
        beta[t] = hmm.A @ (hmm.B[:, obs[t + 1]] * beta[t + 1]) / scales[t + 1]
    return beta


def sequence_log_likelihood(hmm: Hmm, observations) -> float:
    obs = np.asarray(observations, dtype=int)
    if len(obs) == 0:
        return 0.0
    return _forward_scaled(hmm, obs)[2]


def sequence_probability(hmm: Hmm, observations) -> float:
    return math.exp(sequence_log_likelihood(hmm, observations))


@dataclass
class BaumWelchResult:
    hmm: Hmm
    log_likelihoods: list[float]  # one entry per EM iteration, evaluated pre-update


def baum_welch(sequences: list, init: Hmm, max_iters: int = 100, tol: float = 1e-6,
               smoothing: float = 1e-6) -> BaumWelchResult:
    """EM fitting with scaled forward-backward over multiple sequences.

    Stops when the log-likelihood gain drops below `tol` or after `max_iters`
    iterations; with max_iters=0 the initial model is returned untouched.
    Iterations run the exact EM update (so the recorded log-likelihoods are
    non-decreasing); `smoothing` is a probability floor applied once to the
    final re-estimated model, preventing zero-probability lockup at decode
    time.
    """
    seqs = [np.asarray(s, dtype=int) for s in sequences if len(s) > 0]
    if not seqs:
        raise ValueError("baum_welch requires at least one non-empty sequence")
    hmm = init.copy()
    n_states, n_symbols = hmm.B.shape
    history: list[float] = []
    prev_ll = None
    updated = False

    for _ in range(max_iters):
        acc_pi = np.zeros(n_states)
        acc_trans = np.zeros((n_states, n_states))
        acc_emit = np.zeros((n_states, n_symbols))
        ll = 0.0
        for obs in seqs:
            alpha, scales, seq_ll = _forward_scaled(hmm, obs)
            beta = _backward_scaled(hmm, obs, scales)
            ll += seq_ll
            gamma = alpha * beta
            acc_pi += gamma[0]
            np.add.at(acc_emit.T, obs, gamma)
            if len(obs) > 1:
                weighted = hmm.B[:, obs[1:]].T * beta[1:] / scales[1:, None]
                acc_trans += (alpha[:-1].T @ weighted) * hmm.A
        history.append(ll)
        if prev_ll is not None and ll - prev_ll < tol:
            break
        prev_ll = ll
        hmm = Hmm(
            _normalize_counts(acc_pi[None, :], hmm.pi[None, :])[0],
            _normalize_counts(acc_trans, hmm.A),
            _normalize_counts(acc_emit, hmm.B),
        )
        updated = True

    if updated and smoothing > 0.0:
        hmm = Hmm(_floor_rows(hmm.pi[None, :], smoothing)[0],
                  _floor_rows(hmm.A, smoothing),
                  _floor_rows(hmm.B, smoothing))
    return BaumWelchResult(hmm=hmm, log_likelihoods=history)


def _normalize_counts(counts: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    out = np.array(counts, dtype=float)
    for i, row in enumerate(out):
        if row.sum() <= 0.0:
            out[i] = fallback[i]  # state never visited; keep previous distribution
        else:
            out[i] = row / row.sum()
    return out


def _floor_rows(rows: np.ndarray, eps: float) -> np.ndarray:
    out = np.asarray(rows, dtype=float) + eps
    return out / out.sum(axis=1, keepdims=True)


def viterbi(hmm: Hmm, observations) -> list[int]:
    """Maximum-a-posteriori state path; ties resolve to the lower state index."""
    obs = np.asarray(observations, dtype=int)
    if len(obs) == 0:
        return []
    with np.errstate(divide="ignore"):
        log_pi = np.log(hmm.pi)
        log_a = np.log(hmm.A)
        log_b = np.log(hmm.B)
    t_max = len(obs)
    score = log_pi + log_b[:, obs[0]]
    back = np.zeros((t_max, hmm.num_states), dtype=int)
    for t in range(1, t_max):
        candidate = score[:, None] + log_a
        back[t] = candidate.argmax(axis=0)
        score = candidate[back[t], np.arange(hmm.num_states)] + log_b[:, obs[t]]
    path = [int(score.argmax())]
    for t in range(t_max - 1, 0, -1):
        path.append(int(back[t][path[-1]]))
    return path[::-1]


def initial_spine_hmm() -> Hmm:
    """28-level chain biased to advance one level per step.

    Transition mass: 0.8 to the next level, 0.1 skipping one, 0.1 staying,
    renormalized where the chain ends. Emissions put 0.9 on the level's own
    segment. The initial distribution is uniform; Baum-Welch sharpens it.
    """
    pi = np.full(N_LEVELS, 1.0 / N_LEVELS)
    a = np.zeros((N_LEVELS, N_LEVELS))
    for i in range(N_LEVELS):
        a[i, i] = 0.1
        if i + 1 < N_LEVELS:
            a[i, i + 1] = 0.8
        if i + 2 < N_LEVELS:
            a[i, i + 2] = 0.1
        a[i] /= a[i].sum()
    b = np.full((N_LEVELS, 4), 0.1 / 3.0)
    for i in range(N_LEVELS):
        b[i, int(level_to_segment(i))] = 0.9
    return Hmm(pi, a, b)


def spine_observation_sequence(keypoints: list[Keypoint]) -> tuple[list[int], np.ndarray]:
    """Legitimate bodies ordered along the spine with their observed segments.

    Bodies are sorted by projection onto the first principal axis of their
    positions; the axis sign is chosen so that early observations skew
    cervical (low segment indices first). Returns (keypoint indices in
    sequence order, observed segment labels).
    """
    body_idx = [i for i, kp in enumerate(keypoints)
                if kp.kind == KeypointType.BODY and kp.legitimate]
    if not body_idx:
        return [], np.zeros(0, dtype=int)
    positions = np.array([keypoints[i].position for i in body_idx])
    centered = positions - positions.mean(axis=0)
    if len(body_idx) == 1:
        proj = np.zeros(1)
    else:
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        proj = centered @ vt[0]
    order = np.argsort(proj, kind="stable")
    obs = np.array([int(np.argmax(keypoints[body_idx[i]].segment_probs)) for i in order])
    half = max(1, len(obs) // 2)
    if len(obs) > 1 and obs[:half].mean() > obs[-half:].mean():
        order = order[::-1]
        obs = obs[::-1]
    return [body_idx[i] for i in order], obs


def fit_spine_hmm(training_scans: list[list[Keypoint]], max_iters: int = 50,
                  tol: float = 1e-4) -> Hmm:
    sequences = []
    for scan in training_scans:
        _, obs = spine_observation_sequence(scan)
        if len(obs):
            sequences.append(obs)
    if not sequences:
        raise ValueError("no usable observation sequences in the training scans")
    return baum_welch(sequences, initial_spine_hmm(), max_iters=max_iters, tol=tol).hmm


def hmm_predict_levels(hmm: Hmm, keypoints: list[Keypoint]) -> dict[int, int]:
    """Decode levels for the legitimate bodies of one scan.

    Illegitimate detections are filtered out before decoding, which makes the
    sequence task tractable for the chain model. Returns keypoint index ->
    predicted level.
    """
    order, obs = spine_observation_sequence(keypoints)
    if not order:
        return {}
    path = viterbi(hmm, obs)
    return {idx: level for idx, level in zip(order, path)}
