"""Message-passing GNN with joint level, legitimacy and association heads.

A layer updates node embeddings by max-pooling a message MLP over the
neighborhood plus a self term (whose edge embedding is a zero vector), and
updates each directed edge embedding with a second MLP; both MLPs see
[x_u | x_v | x_uv]. Directed edge logits are symmetrized by averaging the two
orientations. Architecture strings follow the compact notation where
"(5x1, 4, 1)" means 5 independent layers, 4 weight-sharing layers, then one
more independent layer.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Linear, Mlp, Tensor
from .graphs import (EDGE_FEATURE_DIM, NODE_FEATURE_DIM, SpineGraph, assign_targets,
                     build_knn_graph)
from .spine import (AugmentationConfig, Keypoint, N_LEVELS, SPINE_VARIANTS,
                    SyntheticSpineConfig, augment, generate_synthetic_spine)

NODE_OUT_DIM = N_LEVELS + 1  # 28 level classes plus one legitimacy entry


def parse_architecture(text: str) -> list[tuple[int, bool]]:
    """Parse layer-stacking notation into (num_layers, shared) groups.

    "AxB" stands for A groups of B layers each (weights shared within a
    group); a bare integer m > 1 is m layers sharing one weight set. An empty
    string denotes no layers (used for absent head branches).
    """
    inner = text.strip()
    if inner.startswith("(") and inner.endswith(")"):
        inner = inner[1:-1]
    inner = inner.strip()
    if not inner:
        return []
    groups: list[tuple[int, bool]] = []
    for item in inner.split(","):
        item = item.strip()
        m = re.fullmatch(r"(\d+)\s*x\s*(\d+)", item)
        if m:
            a, b = int(m.group(1)), int(m.group(2))
            if a < 1 or b < 1:
                raise ValueError(f"invalid architecture item {item!r}")
            if b == 1:
                groups.append((a, False))
            else:
                groups.extend([(b, True)] * a)
            continue
        if re.fullmatch(r"\d+", item):
            n = int(item)
            if n < 1:
                raise ValueError(f"invalid architecture item {item!r}")
            groups.append((n, n > 1))
            continue
        raise ValueError(f"cannot parse architecture item {item!r} in {text!r}")
    return groups


def architecture_num_layers(groups: list[tuple[int, bool]]) -> int:
    return sum(n for n, _ in groups)


class MessagePassingLayer:
    """One update of Eq.-style node/edge embeddings.

    Both MLPs act on [x_u | x_v | x_uv]; the first affine layer is evaluated
    as a sum of per-block projections so the node projections run once per
    node instead of once per edge. The node update max-pools messages over
    the neighborhood plus a self term whose edge embedding is zero.
    """

    def __init__(self, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.psi_node = Mlp(3 * hidden, hidden, hidden, rng)
        self.psi_edge = Mlp(3 * hidden, hidden, hidden, rng)

    def _first_layer(self, mlp: Mlp, node_emb: Tensor, edge_emb: Tensor,
                     edges: np.ndarray, plans: "GraphPlans") -> tuple[Tensor, Tensor]:
        """Pre-activations of mlp.first on edge rows and (node-only) self rows."""
        d = self.hidden
        w = mlp.first.weight
        proj_u = ad.matmul(node_emb, ad.slice_rows(w, 0, d))
        proj_v = ad.matmul(node_emb, ad.slice_rows(w, d, 2 * d))
        proj_e = ad.matmul(edge_emb, ad.slice_rows(w, 2 * d, 3 * d))
        edge_pre = ad.add(ad.add(ad.gather_rows(proj_u, edges[:, 0]),
                                 ad.gather_rows(proj_v, edges[:, 1])),
                          proj_e)
        self_pre = ad.add(proj_u, proj_v)  # the self term's edge embedding is zero
        return ad.add(edge_pre, mlp.first.bias), ad.add(self_pre, mlp.first.bias)

    def __call__(self, node_emb: Tensor, edge_emb: Tensor, edges: np.ndarray,
                 plans: "GraphPlans | None" = None) -> tuple[Tensor, Tensor]:
        n = node_emb.shape[0]
        if plans is None:
            plans = GraphPlans(edges, n)
        edge_pre, _ = self._first_layer(self.psi_edge, node_emb, edge_emb, edges, plans)
        new_edge = self.psi_edge.second(ad.relu(edge_pre))

        msg_edge_pre, msg_self_pre = self._first_layer(
            self.psi_node, node_emb, edge_emb, edges, plans)
        hidden = ad.relu(ad.concat_rows([msg_edge_pre, msg_self_pre]))
        messages = self.psi_node.second(hidden)
        groups = np.concatenate([edges[:, 0], np.arange(n)])
        new_node = ad.row_max_pool_grouped(messages, groups, n, plan=plans.pool)
        return new_node, new_edge

    def parameters(self) -> list[Tensor]:
        return self.psi_node.parameters() + self.psi_edge.parameters()


class GraphPlans:
    """Pooling layout shared by every layer of one forward pass."""

    def __init__(self, edges: np.ndarray, num_nodes: int):
        self.pool = ad.build_pool_plan(
            np.concatenate([edges[:, 0], np.arange(num_nodes)]), num_nodes)


def _build_layer_stack(groups: list[tuple[int, bool]], hidden: int,
                       rng: np.random.Generator) -> tuple[list[MessagePassingLayer], list[int]]:
    """Unique layers plus the index sequence in which they are applied."""
    unique: list[MessagePassingLayer] = []
    sequence: list[int] = []
    for count, shared in groups:
        if shared:
            unique.append(MessagePassingLayer(hidden, rng))
            sequence.extend([len(unique) - 1] * count)
        else:
            for _ in range(count):
                unique.append(MessagePassingLayer(hidden, rng))
                sequence.append(len(unique) - 1)
    return unique, sequence


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.0
    legitimacy_enabled: bool = False


class GnnModel:
    """Input projections, a backbone, optional per-head layer branches, linear heads.

    Branch architectures default to empty, which puts both heads directly on
    the backbone output (the single-head configuration). The backbone,
    including both input projections, is shared between heads.
    """

    def __init__(self, hidden: int = 64, backbone: str = "(13x1)", edge_branch: str = "",
                 node_branch: str = "", seed: int = 0, zero_heads: bool = False):
        if architecture_num_layers(parse_architecture(backbone)) < 1:
            raise ValueError("backbone needs at least one message-passing layer")
        self.hidden = hidden
        self.arch = {"backbone": backbone, "edge_branch": edge_branch,
                     "node_branch": node_branch}
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
        self.node_proj = Linear(NODE_FEATURE_DIM, hidden, rng)
        self.edge_proj = Linear(EDGE_FEATURE_DIM, hidden, rng)
        self.backbone_layers, self.backbone_seq = _build_layer_stack(
            parse_architecture(backbone), hidden, rng)
        self.edge_layers, self.edge_seq = _build_layer_stack(
            parse_architecture(edge_branch), hidden, rng)
        self.node_layers, self.node_seq = _build_layer_stack(
            parse_architecture(node_branch), hidden, rng)
        self.node_head = Linear(hidden, NODE_OUT_DIM, rng, zero_init=zero_heads)
        self.edge_head = Linear(hidden, 1, rng, zero_init=zero_heads)

    def parameters(self) -> list[Tensor]:
        params = self.node_proj.parameters() + self.edge_proj.parameters()
        for layer in self.backbone_layers + self.edge_layers + self.node_layers:
            params += layer.parameters()
        return params + self.node_head.parameters() + self.edge_head.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        for prefix, lin in (("node_proj", self.node_proj), ("edge_proj", self.edge_proj),
                            ("node_head", self.node_head), ("edge_head", self.edge_head)):
            named[f"{prefix}.weight"] = lin.weight
            named[f"{prefix}.bias"] = lin.bias
        for branch, layers in (("backbone", self.backbone_layers),
                               ("edge_branch", self.edge_layers),
                               ("node_branch", self.node_layers)):
            for i, layer in enumerate(layers):
                for mlp_name, mlp in (("psi_node", layer.psi_node), ("psi_edge", layer.psi_edge)):
                    named[f"{branch}.{i}.{mlp_name}.first.weight"] = mlp.first.weight
                    named[f"{branch}.{i}.{mlp_name}.first.bias"] = mlp.first.bias
                    named[f"{branch}.{i}.{mlp_name}.second.weight"] = mlp.second.weight
                    named[f"{branch}.{i}.{mlp_name}.second.bias"] = mlp.second.bias
        return named


@dataclass
class GnnOutputs:
    node_logits: Tensor  # (N, 29)
    edge_logits_sym: Tensor  # (U, 1), one symmetrized logit per undirected edge
    graph: SpineGraph


def forward(model: GnnModel, graph: SpineGraph) -> GnnOutputs:
    edges = graph.directed_edges
    plans = GraphPlans(edges, graph.num_nodes)

    node_emb = model.node_proj(Tensor(graph.node_features))
    edge_emb = model.edge_proj(Tensor(graph.edge_features))
    for idx in model.backbone_seq:
        node_emb, edge_emb = model.backbone_layers[idx](node_emb, edge_emb, edges, plans)

    node_branch_emb, edge_branch_emb = node_emb, edge_emb
    for idx in model.node_seq:
        node_branch_emb, edge_branch_emb = model.node_layers[idx](
            node_branch_emb, edge_branch_emb, edges, plans)
    node_logits = model.node_head(node_branch_emb)

    e_node_emb, e_edge_emb = node_emb, edge_emb
    for idx in model.edge_seq:
        e_node_emb, e_edge_emb = model.edge_layers[idx](e_node_emb, e_edge_emb, edges, plans)
    edge_logits = model.edge_head(e_edge_emb)

    pairs = graph.undirected_pairs
    sym = 0.5 * (ad.gather_rows(edge_logits, pairs[:, 0]) +
                 ad.gather_rows(edge_logits, pairs[:, 1]))
    return GnnOutputs(node_logits=node_logits, edge_logits_sym=sym, graph=graph)


def loss(outputs: GnnOutputs, weights: LossWeights) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of edge BCE, level CE and (optionally) legitimacy BCE.

    The edge term runs over predictable undirected edges only; the level term
    over legitimate body nodes only; the legitimacy term over every node.
    """
    graph = outputs.graph
    pred_idx = graph.predictable_undirected()
    edge_logits = ad.gather_rows(outputs.edge_logits_sym, pred_idx)
    edge_targets = graph.edge_target[graph.undirected_pairs[pred_idx, 0]]
    edge_term = ad.binary_cross_entropy_with_logits(edge_logits, edge_targets)

    level_logits = ad.slice_cols(outputs.node_logits, 0, N_LEVELS)
    level_mask = graph.node_level_target >= 0
    level_term = ad.softmax_cross_entropy(
        level_logits, np.maximum(graph.node_level_target, 0), level_mask)

    total = weights.alpha * edge_term + weights.beta * level_term
    components = {"edge": edge_term.item(), "node": level_term.item(), "legit": 0.0}
    if weights.legitimacy_enabled:
        legit_logits = ad.slice_cols(outputs.node_logits, N_LEVELS, N_LEVELS + 1)
        legit_term = ad.binary_cross_entropy_with_logits(legit_logits, graph.node_legit_target)
        total = total + weights.gamma * legit_term
        components["legit"] = legit_term.item()
    components["total"] = total.item()
    return total, components


@dataclass
class Prediction:
    node_level: np.ndarray  # (N,) predicted level per body node, -1 elsewhere
    node_kept: np.ndarray  # (N,) bool, False for discarded (illegitimate) nodes
    legit_prob: np.ndarray  # (N,) sigmoid of the legitimacy entry
    positive_pairs: list[tuple[int, int]]  # undirected body-pedicle associations
    edge_prob: dict[tuple[int, int], float]  # per predictable undirected edge


def predict(model: GnnModel, graph: SpineGraph, edge_threshold: float = 0.5,
            legitimacy_enabled: bool = False) -> Prediction:
    """Decode model outputs; discarded nodes suppress their incident edges.

    An edge is positive only when its probability strictly exceeds the
    threshold, so an all-zero model predicts no associations.
    """
    outputs = forward(model, graph)
    node_logits = outputs.node_logits.data
    is_body = graph.node_features[:, 0] == 1.0

    node_level = np.where(is_body, node_logits[:, :N_LEVELS].argmax(axis=1), -1)
    legit_prob = _sigmoid(node_logits[:, N_LEVELS])
    node_kept = legit_prob >= 0.5 if legitimacy_enabled else np.ones(graph.num_nodes, bool)

    pred_idx = graph.predictable_undirected()
    sym = outputs.edge_logits_sym.data[:, 0]
    edge_prob: dict[tuple[int, int], float] = {}
    positive: list[tuple[int, int]] = []
    for und in pred_idx:
        u, v = graph.directed_edges[graph.undirected_pairs[und, 0]]
        key = (min(int(u), int(v)), max(int(u), int(v)))
        p = float(_sigmoid(np.array([sym[und]]))[0])
        edge_prob[key] = p
        if p > edge_threshold and node_kept[u] and node_kept[v]:
            positive.append(key)
    return Prediction(node_level=node_level, node_kept=node_kept, legit_prob=legit_prob,
                      positive_pairs=sorted(positive), edge_prob=edge_prob)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return ad._sigmoid(np.asarray(x, dtype=float))


def merge_graphs(graphs: list[SpineGraph]) -> SpineGraph:
    """Disjoint union of graphs; message passing cannot cross components."""
    if len(graphs) == 1:
        return graphs[0]
    nodes: list[Keypoint] = []
    directed = []
    pairs = []
    node_offset = 0
    edge_offset = 0
    for g in graphs:
        nodes.extend(g.nodes)
        directed.append(g.directed_edges + node_offset)
        pairs.append(g.undirected_pairs + edge_offset)
        node_offset += g.num_nodes
        edge_offset += len(g.directed_edges)
    return SpineGraph(
        nodes=nodes,
        directed_edges=np.concatenate(directed),
        node_features=np.concatenate([g.node_features for g in graphs]),
        edge_features=np.concatenate([g.edge_features for g in graphs]),
        edge_is_predictable=np.concatenate([g.edge_is_predictable for g in graphs]),
        undirected_pairs=np.concatenate(pairs),
        node_level_target=np.concatenate([g.node_level_target for g in graphs]),
        node_legit_target=np.concatenate([g.node_legit_target for g in graphs]),
        edge_target=np.concatenate([g.edge_target for g in graphs]),
    )


def model_spines() -> list[list[Keypoint]]:
    """The three straight model spines shown to the network during training."""
    return [generate_synthetic_spine(SyntheticSpineConfig(variant=v))
            for v in SPINE_VARIANTS]


@dataclass
class TrainConfig:
    k: int = 14
    epochs: int = 100
    batch_size: int = 25
    reaugment_every: int = 25
    augmentation: AugmentationConfig = field(default_factory=lambda: AugmentationConfig.preset("default"))
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: str = "madgrad"
    lr: float = 1e-3
    momentum: float = 0.1
    seed: int = 0
    include_model_spines: bool = True
    edge_threshold: float = 0.5
    stop_when_perfect: bool = False  # end early once train accuracy and edge F1 hit 1.0


@dataclass
class TrainResult:
    model: GnnModel
    history: list[dict[str, float]]
    n_reaugmentations: int


def _train_metrics(outputs: GnnOutputs, threshold: float) -> tuple[int, int, int, int, int]:
    """Node hits/total and edge tp/fp/fn accumulated from a training forward."""
    graph = outputs.graph
    mask = graph.node_level_target >= 0
    pred_levels = outputs.node_logits.data[:, :N_LEVELS].argmax(axis=1)
    node_hits = int((pred_levels[mask] == graph.node_level_target[mask]).sum())
    node_total = int(mask.sum())

    pred_idx = graph.predictable_undirected()
    probs = _sigmoid(outputs.edge_logits_sym.data[pred_idx, 0])
    target = graph.edge_target[graph.undirected_pairs[pred_idx, 0]] > 0.5
    positive = probs > threshold
    tp = int((positive & target).sum())
    fp = int((positive & ~target).sum())
    fn = int((~positive & target).sum())
    return node_hits, node_total, tp, fp, fn


def train(model: GnnModel, base_scans: list[list[Keypoint]], config: TrainConfig) -> TrainResult:
    """Train on re-augmented base spines, batching graphs as disjoint unions.

    Augmented graphs are regenerated from the base scans every
    `reaugment_every` epochs (the initial build counts as one regeneration).
    The three model spines are appended to the training pool unless disabled.
    """
    if not base_scans:
        raise ValueError("training requires a non-empty dataset")
    bases = [list(scan) for scan in base_scans]
    if config.include_model_spines:
        bases += model_spines()

    optimizer = ad.make_optimizer(config.optimizer, model.parameters(),
                                  lr=config.lr, momentum=config.momentum)
    graphs: list[SpineGraph] = []
    history: list[dict[str, float]] = []
    n_reaug = 0

    for epoch in range(config.epochs):
        if epoch % config.reaugment_every == 0:
            graphs = []
            for i, base in enumerate(bases):
                seed = np.random.SeedSequence([config.seed, 1, n_reaug, i])
                kps = augment(base, config.augmentation, _seed_int(seed))
                if len(kps) < 2:  # pathological deletion of a tiny scan
                    kps = [kp.copy() for kp in base]
                graphs.append(assign_targets(build_knn_graph(kps, config.k)))
            n_reaug += 1

        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2, epoch]))
        order = rng.permutation(len(graphs))
        epoch_losses = []
        node_hits = node_total = tp = fp = fn = 0
        for start in range(0, len(order), config.batch_size):
            batch = [graphs[i] for i in order[start:start + config.batch_size]]
            outputs = forward(model, merge_graphs(batch))
            total, components = loss(outputs, config.weights)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            epoch_losses.append(components)
            h, t, btp, bfp, bfn = _train_metrics(outputs, config.edge_threshold)
            node_hits += h
            node_total += t
            tp += btp
            fp += bfp
            fn += bfn

        mean = {key: float(np.mean([c[key] for c in epoch_losses]))
                for key in ("total", "edge", "node", "legit")}
        denom = 2 * tp + fp + fn
        history.append({
            "epoch": epoch,
            "loss": mean["total"],
            "edge_loss": mean["edge"],
            "node_loss": mean["node"],
            "legit_loss": mean["legit"],
            "node_accuracy": node_hits / node_total if node_total else 1.0,
            "edge_f1": 2 * tp / denom if denom else 1.0,
        })
        if (config.stop_when_perfect and history[-1]["node_accuracy"] == 1.0
                and history[-1]["edge_f1"] == 1.0):
            break
    return TrainResult(model=model, history=history, n_reaugmentations=n_reaug)


def _seed_int(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, np.uint64)[0])


def save_checkpoint(model: GnnModel, path: str | Path, optimizer=None,
                    meta: dict | None = None) -> None:
    payload = {
        "format": "spinegnn-checkpoint-v1",
        "hidden": model.hidden,
        "arch": model.arch,
        "params": {name: t.data.tolist() for name, t in model.named_parameters().items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: str | Path) -> tuple[GnnModel, dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != "spinegnn-checkpoint-v1":
        raise ValueError(f"{path} is not a spinegnn checkpoint")
    model = GnnModel(hidden=payload["hidden"], backbone=payload["arch"]["backbone"],
                     edge_branch=payload["arch"]["edge_branch"],
                     node_branch=payload["arch"]["node_branch"])
    named = model.named_parameters()
    if set(named) != set(payload["params"]):
        raise ValueError("checkpoint parameter names do not match the architecture")
    for name, tensor in named.items():
        arr = np.asarray(payload["params"][name], dtype=float)
        if arr.shape != tensor.data.shape:
            raise ValueError(f"checkpoint shape mismatch for {name}: "
                             f"{arr.shape} vs {tensor.data.shape}")
        tensor.data = arr
    return model, payload.get("meta", {})
