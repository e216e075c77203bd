"""k-NN graph construction and featurization for keypoint sets.

Node features are [one-hot keypoint type (3) | segment pseudo-probabilities (4)].
Edge features are [unit direction u->v (3) | distance in decimeters (1)]; the
decimeter unit keeps typical vertebra spacing near 0.3 for well-scaled MLP
inputs. Every undirected adjacency is stored as two directed edges.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .spine import Keypoint, KeypointType, level_from_name, level_name

MM_PER_LENGTH_UNIT = 100.0  # edge distances are expressed in decimeters

NODE_FEATURE_DIM = 7
EDGE_FEATURE_DIM = 4


class GraphUnderflowError(ValueError):
    pass


@dataclass
class SpineGraph:
    """Connected directed graph over keypoints, ready for the GNN.

    `directed_edges` has shape (E, 2) and contains each undirected adjacency
    in both orientations; `undirected_pairs` maps each undirected edge to its
    two directed rows. Targets are filled by `assign_targets`.
    """

    nodes: list[Keypoint]
    directed_edges: np.ndarray
    node_features: np.ndarray
    edge_features: np.ndarray
    edge_is_predictable: np.ndarray
    undirected_pairs: np.ndarray  # (U, 2) indices into directed_edges
    node_level_target: np.ndarray = field(default=None)  # (N,), -1 where undefined
    node_legit_target: np.ndarray = field(default=None)  # (N,) float 0/1
    edge_target: np.ndarray = field(default=None)  # (E,) float 0/1, per directed edge

    def __post_init__(self):
        if self.node_level_target is None:
            self.node_level_target = np.full(len(self.nodes), -1, dtype=int)
        if self.node_legit_target is None:
            self.node_legit_target = np.ones(len(self.nodes))
        if self.edge_target is None:
            self.edge_target = np.zeros(len(self.directed_edges))

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def undirected_edge_set(self) -> set[tuple[int, int]]:
        return {tuple(sorted(edge)) for edge in self.directed_edges.tolist()}

    def predictable_undirected(self) -> np.ndarray:
        """Indices into undirected_pairs whose edges join a body and a pedicle."""
        first_directed = self.undirected_pairs[:, 0]
        return np.flatnonzero(self.edge_is_predictable[first_directed])

    def to_json(self) -> str:
        payload = {
            "nodes": [_keypoint_to_dict(kp) for kp in self.nodes],
            "directed_edges": self.directed_edges.tolist(),
            "node_features": self.node_features.tolist(),
            "edge_features": self.edge_features.tolist(),
            "edge_is_predictable": self.edge_is_predictable.astype(int).tolist(),
            "undirected_pairs": self.undirected_pairs.tolist(),
            "node_level_target": self.node_level_target.tolist(),
            "node_legit_target": self.node_legit_target.tolist(),
            "edge_target": self.edge_target.tolist(),
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "SpineGraph":
        payload = json.loads(text)
        return cls(
            nodes=[_keypoint_from_dict(d) for d in payload["nodes"]],
            directed_edges=np.asarray(payload["directed_edges"], dtype=int).reshape(-1, 2),
            node_features=np.asarray(payload["node_features"], dtype=float),
            edge_features=np.asarray(payload["edge_features"], dtype=float),
            edge_is_predictable=np.asarray(payload["edge_is_predictable"], dtype=bool),
            undirected_pairs=np.asarray(payload["undirected_pairs"], dtype=int).reshape(-1, 2),
            node_level_target=np.asarray(payload["node_level_target"], dtype=int),
            node_legit_target=np.asarray(payload["node_legit_target"], dtype=float),
            edge_target=np.asarray(payload["edge_target"], dtype=float),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "SpineGraph":
        return cls.from_json(Path(path).read_text())


def _keypoint_to_dict(kp: Keypoint) -> dict:
    return {
        "pos": kp.position.tolist(),
        "kind": kp.kind.name.lower(),
        "level": None if kp.level is None else level_name(kp.level),
        "legitimate": bool(kp.legitimate),
        "segment_probs": kp.segment_probs.tolist(),
        "source_id": kp.source_id,
    }


def _keypoint_from_dict(d: dict) -> Keypoint:
    return Keypoint(
        position=np.asarray(d["pos"], dtype=float),
        kind=KeypointType[d["kind"].upper()],
        level=None if d.get("level") is None else level_from_name(d["level"]),
        legitimate=bool(d.get("legitimate", True)),
        segment_probs=np.asarray(d.get("segment_probs", [0.0] * 4), dtype=float),
        source_id=d.get("source_id"),
    )


def compute_edge_feature(p_u: np.ndarray, p_v: np.ndarray) -> np.ndarray:
    """Unit direction from u to v plus the distance in decimeters.

    Coincident points (possible after clone augmentation) yield the zero
    feature rather than an error.
    """
    delta = np.asarray(p_v, dtype=float) - np.asarray(p_u, dtype=float)
    dist = float(np.linalg.norm(delta))
    if dist == 0.0:
        return np.zeros(4)
    return np.concatenate([delta / dist, [dist / MM_PER_LENGTH_UNIT]])


def _knn_undirected_edges(positions: np.ndarray, k: int) -> set[tuple[int, int]]:
    n = len(positions)
    diffs = positions[:, None, :] - positions[None, :, :]
    dist = np.linalg.norm(diffs, axis=2)
    np.fill_diagonal(dist, np.inf)
    edges: set[tuple[int, int]] = set()
    k_eff = min(k, n - 1)
    # stable argsort breaks distance ties toward the lower node index
    order = np.argsort(dist, axis=1, kind="stable")
    for u in range(n):
        for v in order[u, :k_eff]:
            edges.add((min(u, int(v)), max(u, int(v))))
    return edges


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def _connect_components(positions: np.ndarray, edges: set[tuple[int, int]], k: int) -> None:
    """Bridge disconnected cliques until one component remains.

    Repeatedly take the globally closest pair of components and connect the
    node on the near side to its ceil(k/3) nearest nodes outside its own
    component. Ties break toward lower node indices.
    """
    n = len(positions)
    fanout = -(-k // 3)  # ceil(k/3)
    dist = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=2)
    while True:
        uf = _UnionFind(n)
        for u, v in edges:
            uf.union(u, v)
        roots = np.array([uf.find(i) for i in range(n)])
        if len(set(roots.tolist())) == 1:
            return
        cross = roots[:, None] != roots[None, :]
        masked = np.where(cross, dist, np.inf)
        u = int(np.argmin(masked) // n)  # argmin scans row-major: lexicographic tie-break
        outside = np.flatnonzero(roots != roots[u])
        order = np.argsort(dist[u, outside], kind="stable")
        for v in outside[order[:fanout]]:
            edges.add((min(u, int(v)), max(u, int(v))))


def build_knn_graph(keypoints: list[Keypoint], k: int) -> SpineGraph:
    """Connect keypoints to their k nearest neighbours and featurize.

    Guarantees a connected undirected graph via clique reconnection. Raises
    GraphUnderflowError for fewer than 2 keypoints.
    """
    if len(keypoints) < 2:
        raise GraphUnderflowError("graph underflow: need at least 2 keypoints")
    if k < 1:
        raise ValueError("k must be at least 1")

    positions = np.array([kp.position for kp in keypoints])
    edges = _knn_undirected_edges(positions, k)
    _connect_components(positions, edges, k)

    undirected = sorted(edges)
    directed = np.array(
        [(u, v) for u, v in undirected] + [(v, u) for u, v in undirected], dtype=int
    )
    n_und = len(undirected)
    undirected_pairs = np.column_stack([np.arange(n_und), np.arange(n_und) + n_und])

    kinds = np.array([int(kp.kind) for kp in keypoints])
    node_features = np.zeros((len(keypoints), NODE_FEATURE_DIM))
    node_features[np.arange(len(keypoints)), kinds] = 1.0
    node_features[:, 3:] = np.array([kp.segment_probs for kp in keypoints])

    edge_features = np.array(
        [compute_edge_feature(positions[u], positions[v]) for u, v in directed]
    ).reshape(-1, EDGE_FEATURE_DIM)

    is_body = kinds == int(KeypointType.BODY)
    edge_is_predictable = is_body[directed[:, 0]] ^ is_body[directed[:, 1]]

    return SpineGraph(
        nodes=list(keypoints),
        directed_edges=directed,
        node_features=node_features,
        edge_features=edge_features,
        edge_is_predictable=edge_is_predictable,
        undirected_pairs=undirected_pairs,
    )


def assign_targets(graph: SpineGraph, ground_truth: list[Keypoint] | None = None) -> SpineGraph:
    """Fill node and edge targets in place (and return the graph).

    When `ground_truth` is given, levels are looked up through each node's
    source_id; otherwise the nodes' own labels are used. Level targets exist
    only for legitimate bodies; an edge is positive iff it joins a legitimate
    body and a legitimate pedicle of the same vertebra.
    """

    def true_level(kp: Keypoint) -> int | None:
        if ground_truth is not None and kp.source_id is not None:
            return ground_truth[kp.source_id].level
        return kp.level

    levels = [true_level(kp) for kp in graph.nodes]
    legit = np.array([kp.legitimate for kp in graph.nodes], dtype=bool)
    is_body = np.array([kp.kind == KeypointType.BODY for kp in graph.nodes])

    graph.node_level_target = np.array(
        [
            lvl if (legit[i] and is_body[i] and lvl is not None) else -1
            for i, lvl in enumerate(levels)
        ],
        dtype=int,
    )
    graph.node_legit_target = legit.astype(float)

    targets = np.zeros(len(graph.directed_edges))
    for e_idx, (u, v) in enumerate(graph.directed_edges):
        if not graph.edge_is_predictable[e_idx]:
            continue
        if not (legit[u] and legit[v]):
            continue
        if levels[u] is not None and levels[u] == levels[v]:
            targets[e_idx] = 1.0
    graph.edge_target = targets
    return graph


def connected_components(num_nodes: int, undirected_edges: set[tuple[int, int]]) -> int:
    uf = _UnionFind(num_nodes)
    for u, v in undirected_edges:
        uf.union(u, v)
    return len({uf.find(i) for i in range(num_nodes)})
