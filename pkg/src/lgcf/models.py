"""Model kinds, BPR training, scorers, and checkpoints.

Five kinds share one training entry point: "lgcf" scores localized graphs
with the hand-written GCN, "mf" and "lightgcn" are embedding baselines (mf is
the zero-layer special case of the propagation), "lgcf-emb" scores the
concatenation of the elementwise embedding product and the pooled subgraph
representation through a joint vector, and "lgcf-ens" sums a trained lgcf
score and a scaled embedding dot product.
"""

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import DomainError
from .evaluation import EvalProtocol, evaluate
from .graph import BipartiteGraph, SplitSpec, build_graph
from .labeling import LabelEncoding, label_graph, one_hot_features
from .nn import (AdamState, GnnParameters, GradCheckReport, adam_from_dict,
                 adam_step, adam_to_dict, bpr_pair_grads, forward_instance,
                 gcn_backward, gcn_forward, glorot_uniform, grad_check,
                 init_adam, init_gnn_params, normalize_adjacency,
                 params_from_dict, params_to_dict, sigmoid, softplus, sum_pool)
from .rng import (ENSEMBLE, EPOCH_SHUFFLE, EVAL_WALK, GRADCHECK, PARAM_INIT,
                  TRAIN_NEGATIVE, seed_stream, walk_stream)
from .subgraph import WalkConfig, extract

MODEL_KINDS = ("lgcf", "mf", "lightgcn", "lgcf-emb", "lgcf-ens")
CHECKPOINT_VERSION = 1


@dataclass
class EmbeddingTable:
    """Free user and item embedding rows (one matrix per side)."""

    user_matrix: np.ndarray
    item_matrix: np.ndarray

    def __post_init__(self):
        if self.user_matrix.ndim != 2 or self.item_matrix.ndim != 2:
            raise DomainError("embedding tables must be matrices")
        if self.user_matrix.shape[1] != self.item_matrix.shape[1]:
            raise DomainError("user and item embeddings must share a width")

    @property
    def dim(self) -> int:
        return self.user_matrix.shape[1]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.user_matrix.copy(), self.item_matrix.copy())


def init_embeddings(num_users: int, num_items: int, dim: int,
                    rng: np.random.Generator, scale: float = 0.1) -> EmbeddingTable:
    return EmbeddingTable(rng.normal(0.0, scale, (num_users, dim)),
                          rng.normal(0.0, scale, (num_items, dim)))


class Propagation:
    """Mean of symmetric-normalized adjacency powers over the full graph.

    apply() serves both directions of training: the operator mean_k S^k is
    symmetric, so refining embeddings forward and pulling gradients back are
    the same computation.  layers == 0 is the identity (plain MF).
    """

    def __init__(self, graph: BipartiteGraph, layers: int):
        if layers < 0:
            raise DomainError(f"layers must be >= 0, got {layers}")
        self.layers = int(layers)
        self.num_nodes = graph.num_nodes
        if self.layers:
            deg = graph.degrees().astype(np.float64)
            inv = np.zeros_like(deg)
            nz = deg > 0
            inv[nz] = 1.0 / np.sqrt(deg[nz])
            rows = np.repeat(np.arange(graph.num_nodes), np.diff(graph.indptr))
            data = inv[rows] * inv[graph.indices]
            self.s = sparse.csr_matrix(
                (data, graph.indices.copy(), graph.indptr.copy()),
                shape=(graph.num_nodes, graph.num_nodes))
        else:
            self.s = None

    def apply(self, mat: np.ndarray) -> np.ndarray:
        if mat.shape[0] != self.num_nodes:
            raise DomainError("row count must equal the graph's node count")
        if not self.layers:
            return mat.copy()
        acc = mat.copy()
        cur = mat
        for _ in range(self.layers):
            cur = self.s @ cur
            acc += cur
        return acc / (self.layers + 1)


def lightgcn_propagate(graph: BipartiteGraph, tables: EmbeddingTable,
                       layers: int) -> EmbeddingTable:
    """Refined tables: the layer-mean of propagated embeddings."""
    e0 = np.vstack([tables.user_matrix, tables.item_matrix])
    refined = Propagation(graph, layers).apply(e0)
    n = tables.user_matrix.shape[0]
    return EmbeddingTable(refined[:n].copy(), refined[n:].copy())


def mf_score(tables: EmbeddingTable, u: int, i: int) -> float:
    """Dot product of the user row and the item row (i is a global id)."""
    n = tables.user_matrix.shape[0]
    return float(tables.user_matrix[u] @ tables.item_matrix[i - n])


def lgcf_inputs(graph: BipartiteGraph, u: int, i: int, cfg: WalkConfig,
                rng: np.random.Generator, enc: LabelEncoding):
    """Network inputs for one pair: one-hot labels and normalized adjacency."""
    lg = label_graph(extract(graph, u, i, cfg, rng))
    return one_hot_features(lg.labels, enc), normalize_adjacency(lg.adjacency)


def lgcf_score(graph: BipartiteGraph, u: int, i: int, params: GnnParameters,
               cfg: WalkConfig, rng: np.random.Generator) -> float:
    """Extract, label, encode, and score one localized graph."""
    x0, a_norm = lgcf_inputs(graph, u, i, cfg, rng, LabelEncoding(params.feature_dim))
    return forward_instance(x0, a_norm, params).score_value


def lgcf_emb_score(graph: BipartiteGraph, u: int, i: int, gnn: GnnParameters,
                   tables: EmbeddingTable, w_joint: np.ndarray, cfg: WalkConfig,
                   rng: np.random.Generator) -> float:
    """Joint score over (refined embedding product || pooled subgraph rep)."""
    if w_joint.size != tables.dim + gnn.hidden_dim:
        raise DomainError("w_joint length must be embed_dim + hidden_dim")
    x0, a_norm = lgcf_inputs(graph, u, i, cfg, rng, LabelEncoding(gnn.feature_dim))
    x_last, _ = gcn_forward(x0, a_norm, gnn)
    pooled = sum_pool(x_last)
    n = tables.user_matrix.shape[0]
    emb = tables.user_matrix[u] * tables.item_matrix[i - n]
    feat = np.concatenate([emb, pooled])
    return float(sigmoid(float(feat @ w_joint)))


def lgcf_ens_score(s_lgcf: float, h_u: np.ndarray, h_i: np.ndarray,
                   lam: float) -> float:
    """Late fusion: lgcf score plus lam times the embedding dot product."""
    return float(s_lgcf + lam * float(h_u @ h_i))


def sample_negative(graph: BipartiteGraph, u: int,
                    rng: np.random.Generator) -> int:
    """Uniform item with no train edge to u; rejection first, then a scan."""
    n, m = graph.num_users, graph.num_items
    if m == 0 or graph.degree(u) >= m:
        raise DomainError(f"user {u} has no non-interacted item to sample")
    for _ in range(64):
        j = n + int(rng.integers(m))
        if not graph.has_edge(u, j):
            return j
    pool = np.setdiff1d(np.arange(n, n + m), graph.neighbors(u))
    return int(pool[int(rng.integers(pool.size))])


def param_count(kind: str, *, num_users: int = 0, num_items: int = 0,
                feature_dim: int = 64, hidden_dim: int = 32,
                gcn_layers: int = 3, embed_dim: int = 32) -> int:
    """Trainable scalar count per model kind.

    The lgcf count is independent of the graph size; embedding models grow
    linearly in num_users + num_items.
    """
    gnn = feature_dim * hidden_dim + (gcn_layers - 1) * hidden_dim * hidden_dim
    tables = (num_users + num_items) * embed_dim
    if kind == "lgcf":
        return gnn + hidden_dim
    if kind in ("mf", "lightgcn"):
        return tables
    if kind == "lgcf-emb":
        return gnn + tables + (embed_dim + hidden_dim)
    if kind == "lgcf-ens":
        return gnn + hidden_dim + tables + 1
    raise DomainError(f"unknown model kind {kind!r}")


@dataclass
class TrainConfig:
    """Hyperparameters shared by every model kind.

    Fields a kind does not use are ignored (mf ignores the walk settings,
    for instance).  master_seed drives every random stream in training.
    """

    epochs: int = 30
    batch_size: int = 64
    negatives_per_positive: int = 1
    early_stop_patience: int = 10
    eval_every: int = 1
    master_seed: int = 0
    walk: WalkConfig = field(default_factory=WalkConfig)
    gcn_layers: int = 3
    hidden_dim: int = 32
    label_cap: int = 64
    activation: str = "relu"
    embed_dim: int = 32
    lightgcn_layers: int = 3
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_ens: float = 1.0
    lambda_mode: str = "grid"
    lambda_grid: tuple = (0.1, 0.5, 1.0, 2.0, 5.0)
    cache_subgraphs: bool = False
    val_negatives: int = 99

    def __post_init__(self):
        if self.epochs < 1:
            raise DomainError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise DomainError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.negatives_per_positive < 1:
            raise DomainError("negatives_per_positive must be >= 1")
        if self.eval_every < 1:
            raise DomainError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.master_seed < 0:
            raise DomainError("master_seed must be non-negative")
        if self.lambda_mode not in ("grid", "fixed", "learnable"):
            raise DomainError(f"unknown lambda_mode {self.lambda_mode!r}")
        if self.val_negatives < 1:
            raise DomainError("val_negatives must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_hr10: float | None
    val_ndcg10: float | None
    wall_ms: float


@dataclass
class TrainedModel:
    """Everything needed to score pairs after training.

    Optional sections are populated per kind: gnn for lgcf/lgcf-emb/lgcf-ens,
    tables for the embedding kinds, w_joint for lgcf-emb, lam for lgcf-ens.
    """

    kind: str
    walk: WalkConfig
    label_cap: int
    lightgcn_layers: int
    master_seed: int
    gnn: GnnParameters | None = None
    tables: EmbeddingTable | None = None
    w_joint: np.ndarray | None = None
    lam: float | None = None

    def make_scorer(self, train_graph: BipartiteGraph):
        """Scorer bound to the training graph; refined tables are precomputed."""
        if self.kind == "lgcf":
            return LgcfScorer(train_graph, self.gnn, self.walk, self.master_seed)
        if self.kind == "mf":
            return DotScorer(self.tables, "mf", self.master_seed)
        if self.kind == "lightgcn":
            refined = lightgcn_propagate(train_graph, self.tables, self.lightgcn_layers)
            return DotScorer(refined, "lightgcn", self.master_seed)
        if self.kind == "lgcf-emb":
            refined = lightgcn_propagate(train_graph, self.tables, self.lightgcn_layers)
            return EmbJointScorer(train_graph, self.gnn, refined, self.w_joint,
                                  self.walk, self.master_seed)
        if self.kind == "lgcf-ens":
            refined = lightgcn_propagate(train_graph, self.tables, self.lightgcn_layers)
            inner = LgcfScorer(train_graph, self.gnn, self.walk, self.master_seed)
            return EnsembleScorer(inner, refined, self.lam)
        raise DomainError(f"unknown model kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "master_seed": self.master_seed,
            "walk": {
                "restart_prob": self.walk.restart_prob,
                "walk_len": self.walk.walk_len,
                "max_nodes": self.walk.max_nodes,
                "remove_target_edge": self.walk.remove_target_edge,
            },
            "label_cap": self.label_cap,
            "lightgcn_layers": self.lightgcn_layers,
            "gnn": params_to_dict(self.gnn) if self.gnn is not None else None,
            "tables": None if self.tables is None else {
                "user": self.tables.user_matrix.tolist(),
                "item": self.tables.item_matrix.tolist(),
            },
            "w_joint": None if self.w_joint is None else self.w_joint.tolist(),
            "lambda": self.lam,
        }

    @staticmethod
    def from_dict(payload: dict) -> "TrainedModel":
        if payload.get("format_version") != CHECKPOINT_VERSION:
            raise DomainError(
                f"unsupported checkpoint format {payload.get('format_version')!r}")
        walk = WalkConfig(**payload["walk"])
        tables = None
        if payload["tables"] is not None:
            tables = EmbeddingTable(
                np.asarray(payload["tables"]["user"], dtype=np.float64),
                np.asarray(payload["tables"]["item"], dtype=np.float64))
        return TrainedModel(
            kind=str(payload["kind"]),
            walk=walk,
            label_cap=int(payload["label_cap"]),
            lightgcn_layers=int(payload["lightgcn_layers"]),
            master_seed=int(payload["master_seed"]),
            gnn=None if payload["gnn"] is None else params_from_dict(payload["gnn"]),
            tables=tables,
            w_joint=None if payload["w_joint"] is None
            else np.asarray(payload["w_joint"], dtype=np.float64),
            lam=None if payload["lambda"] is None else float(payload["lambda"]),
        )


def save_model(path, model: TrainedModel,
               adam_states: dict[str, AdamState] | None = None) -> None:
    payload = model.to_dict()
    payload["adam"] = None if adam_states is None else {
        name: adam_to_dict(state) for name, state in adam_states.items()}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_model(path) -> TrainedModel:
    return TrainedModel.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def load_adam_states(path) -> dict[str, AdamState] | None:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("adam") is None:
        return None
    return {name: adam_from_dict(d) for name, d in payload["adam"].items()}


class LgcfScorer:
    kind = "lgcf"

    def __init__(self, graph: BipartiteGraph, params: GnnParameters,
                 walk: WalkConfig, seed: int):
        self.graph = graph
        self.params = params
        self.walk = walk
        self.seed = int(seed)

    def score(self, u: int, i: int) -> float:
        rng = seed_stream(self.seed, EVAL_WALK, u, i)
        return lgcf_score(self.graph, u, i, self.params, self.walk, rng)


class DotScorer:
    def __init__(self, tables: EmbeddingTable, kind: str, seed: int = 0):
        self.tables = tables
        self.kind = kind
        self.seed = int(seed)

    def score(self, u: int, i: int) -> float:
        return mf_score(self.tables, u, i)


class EmbJointScorer:
    kind = "lgcf-emb"

    def __init__(self, graph: BipartiteGraph, gnn: GnnParameters,
                 refined: EmbeddingTable, w_joint: np.ndarray,
                 walk: WalkConfig, seed: int):
        self.graph = graph
        self.gnn = gnn
        self.refined = refined
        self.w_joint = w_joint
        self.walk = walk
        self.seed = int(seed)

    def score(self, u: int, i: int) -> float:
        rng = seed_stream(self.seed, EVAL_WALK, u, i)
        return lgcf_emb_score(self.graph, u, i, self.gnn, self.refined,
                              self.w_joint, self.walk, rng)


class EnsembleScorer:
    kind = "lgcf-ens"

    def __init__(self, lgcf_scorer: LgcfScorer, refined: EmbeddingTable, lam: float):
        self.lgcf = lgcf_scorer
        self.refined = refined
        self.lam = float(lam)
        self.seed = lgcf_scorer.seed

    def score(self, u: int, i: int) -> float:
        n = self.refined.user_matrix.shape[0]
        return lgcf_ens_score(self.lgcf.score(u, i), self.refined.user_matrix[u],
                              self.refined.item_matrix[i - n], self.lam)


def _joint_triplet(gnn: GnnParameters, w_joint: np.ndarray, refined: np.ndarray,
                   u: int, i_pos: int, i_neg: int, pos_inputs, neg_inputs,
                   d_weights, d_w_joint, d_refined) -> float:
    """Accumulate joint-model gradients for one BPR triplet; returns the loss.

    refined is the propagated (num_nodes, dim) matrix indexed by global id;
    d_refined collects gradients in that same space for one propagation-back
    per batch.
    """
    dim = refined.shape[1]
    r_u = refined[u]
    branches = []
    for (x0, a_norm), item in ((pos_inputs, i_pos), (neg_inputs, i_neg)):
        x_last, cache = gcn_forward(x0, a_norm, gnn)
        pooled = sum_pool(x_last)
        feat = np.concatenate([r_u * refined[item], pooled])
        s = float(sigmoid(float(feat @ w_joint)))
        branches.append((cache, feat, s, item))
    z = branches[0][2] - branches[1][2]
    loss = softplus(-z)
    g = float(sigmoid(z)) - 1.0
    for sign, (cache, feat, s, item) in zip((g, -g), branches):
        d_logit = sign * s * (1.0 - s)
        d_w_joint += d_logit * feat
        d_feat = d_logit * w_joint
        d_emb = d_feat[:dim]
        d_pooled = d_feat[dim:]
        k = cache.xs[0].shape[0]
        d_out = np.broadcast_to(d_pooled, (k, d_pooled.size))
        for acc, grad in zip(d_weights, gcn_backward(cache, gnn, d_out)):
            acc += grad
        d_refined[u] += d_emb * refined[item]
        d_refined[item] += d_emb * r_u
    return loss


def emb_joint_loss_and_grads(gnn: GnnParameters, w_joint: np.ndarray,
                             tables: EmbeddingTable, prop: Propagation,
                             u: int, i_pos: int, i_neg: int,
                             pos_inputs, neg_inputs) -> tuple[float, dict]:
    """Loss and full analytic gradients for one joint triplet.

    Includes the propagation pullback into the base tables; gradients come
    back as {"weights": [...], "w_joint": ..., "user": ..., "item": ...}.
    """
    n = tables.user_matrix.shape[0]
    refined = prop.apply(np.vstack([tables.user_matrix, tables.item_matrix]))
    d_weights = [np.zeros_like(w) for w in gnn.weights]
    d_w_joint = np.zeros_like(w_joint)
    d_refined = np.zeros_like(refined)
    loss = _joint_triplet(gnn, w_joint, refined, u, i_pos, i_neg,
                          pos_inputs, neg_inputs, d_weights, d_w_joint, d_refined)
    d_e0 = prop.apply(d_refined)
    return loss, {"weights": d_weights, "w_joint": d_w_joint,
                  "user": d_e0[:n], "item": d_e0[n:]}


class _LgcfTrainer:
    def __init__(self, train_graph: BipartiteGraph, train_edges, tc: TrainConfig):
        self.graph = train_graph
        self.edges = [tuple(e) for e in train_edges]
        self.tc = tc
        self.enc = LabelEncoding(tc.label_cap)
        rng = seed_stream(tc.master_seed, PARAM_INIT)
        self.params = init_gnn_params(tc.label_cap, tc.hidden_dim, tc.gcn_layers,
                                      rng, tc.activation)
        self.adam = init_adam(self.params.arrays(), lr=tc.lr, beta1=tc.beta1,
                              beta2=tc.beta2, eps=tc.eps)
        self.cache: dict | None = {} if tc.cache_subgraphs else None

    def _inputs(self, u: int, i: int, epoch: int):
        if self.cache is not None:
            hit = self.cache.get((u, i))
            if hit is not None:
                return hit
            epoch = 0  # cached pairs always use their first-epoch walk
        rng = walk_stream(self.tc.master_seed, u, i, epoch)
        pair = lgcf_inputs(self.graph, u, i, self.tc.walk, rng, self.enc)
        if self.cache is not None:
            self.cache[(u, i)] = pair
        return pair

    def run_epoch(self, epoch: int) -> float:
        tc = self.tc
        order = seed_stream(tc.master_seed, EPOCH_SHUFFLE, epoch).permutation(len(self.edges))
        neg_rng = seed_stream(tc.master_seed, TRAIN_NEGATIVE, epoch)
        arrays = self.params.arrays()
        batch = [np.zeros_like(a) for a in arrays]
        pending = 0
        losses = []
        for idx in order:
            u, i = self.edges[idx]
            for _ in range(tc.negatives_per_positive):
                j = sample_negative(self.graph, u, neg_rng)
                loss, grads = bpr_pair_grads(self.params, self._inputs(u, i, epoch),
                                             self._inputs(u, j, epoch))
                losses.append(loss)
                for acc, g in zip(batch, grads.arrays()):
                    acc += g
                pending += 1
                if pending == tc.batch_size:
                    self._step(batch, pending)
                    pending = 0
        if pending:
            self._step(batch, pending)
        return float(np.mean(losses))

    def _step(self, batch, count: int):
        adam_step(self.params.arrays(), [b / count for b in batch], self.adam)
        for b in batch:
            b[:] = 0.0

    def scorer(self):
        return LgcfScorer(self.graph, self.params, self.tc.walk, self.tc.master_seed)

    def snapshot(self):
        return self.params.copy()

    def restore(self, snap):
        for dst, src in zip(self.params.arrays(), snap.arrays()):
            dst[:] = src

    def finish(self) -> TrainedModel:
        tc = self.tc
        return TrainedModel("lgcf", tc.walk, tc.label_cap, tc.lightgcn_layers,
                            tc.master_seed, gnn=self.params)

    def adam_states(self):
        return {"main": self.adam}


class _EmbeddingTrainer:
    def __init__(self, train_graph: BipartiteGraph, train_edges, tc: TrainConfig,
                 kind: str):
        self.graph = train_graph
        self.edges = [tuple(e) for e in train_edges]
        self.tc = tc
        self.kind = kind
        self.layers = 0 if kind == "mf" else tc.lightgcn_layers
        self.prop = Propagation(train_graph, self.layers)
        rng = seed_stream(tc.master_seed, PARAM_INIT)
        self.tables = init_embeddings(train_graph.num_users, train_graph.num_items,
                                      tc.embed_dim, rng)
        self.adam = init_adam([self.tables.user_matrix, self.tables.item_matrix],
                              lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps)

    def run_epoch(self, epoch: int) -> float:
        tc = self.tc
        order = seed_stream(tc.master_seed, EPOCH_SHUFFLE, epoch).permutation(len(self.edges))
        neg_rng = seed_stream(tc.master_seed, TRAIN_NEGATIVE, epoch)
        losses = []
        triplets = []
        for idx in order:
            u, i = self.edges[idx]
            for _ in range(tc.negatives_per_positive):
                triplets.append((u, i, sample_negative(self.graph, u, neg_rng)))
                if len(triplets) == tc.batch_size:
                    self._flush(triplets, losses)
                    triplets = []
        if triplets:
            self._flush(triplets, losses)
        return float(np.mean(losses))

    def _flush(self, triplets, losses):
        n = self.graph.num_users
        refined = self.prop.apply(
            np.vstack([self.tables.user_matrix, self.tables.item_matrix]))
        d_refined = np.zeros_like(refined)
        for u, i, j in triplets:
            r_u, r_i, r_j = refined[u], refined[i], refined[j]
            z = float(r_u @ r_i - r_u @ r_j)
            losses.append(softplus(-z))
            g = float(sigmoid(z)) - 1.0
            d_refined[u] += g * (r_i - r_j)
            d_refined[i] += g * r_u
            d_refined[j] -= g * r_u
        d_e0 = self.prop.apply(d_refined) / len(triplets)
        adam_step([self.tables.user_matrix, self.tables.item_matrix],
                  [d_e0[:n], d_e0[n:]], self.adam)

    def scorer(self):
        if self.layers:
            refined = lightgcn_propagate(self.graph, self.tables, self.layers)
        else:
            refined = self.tables
        return DotScorer(refined, self.kind, self.tc.master_seed)

    def snapshot(self):
        return self.tables.copy()

    def restore(self, snap):
        self.tables.user_matrix[:] = snap.user_matrix
        self.tables.item_matrix[:] = snap.item_matrix

    def finish(self) -> TrainedModel:
        tc = self.tc
        return TrainedModel(self.kind, tc.walk, tc.label_cap, tc.lightgcn_layers,
                            tc.master_seed, tables=self.tables)

    def adam_states(self):
        return {"main": self.adam}


class _JointTrainer:
    def __init__(self, train_graph: BipartiteGraph, train_edges, tc: TrainConfig):
        self.graph = train_graph
        self.edges = [tuple(e) for e in train_edges]
        self.tc = tc
        self.enc = LabelEncoding(tc.label_cap)
        rng = seed_stream(tc.master_seed, PARAM_INIT)
        self.gnn = init_gnn_params(tc.label_cap, tc.hidden_dim, tc.gcn_layers,
                                   rng, tc.activation)
        self.tables = init_embeddings(train_graph.num_users, train_graph.num_items,
                                      tc.embed_dim, rng)
        self.w_joint = glorot_uniform(rng, tc.embed_dim + tc.hidden_dim, 1).ravel()
        self.prop = Propagation(train_graph, tc.lightgcn_layers)
        self.adam = init_adam(self._arrays(), lr=tc.lr, beta1=tc.beta1,
                              beta2=tc.beta2, eps=tc.eps)
        self.cache: dict | None = {} if tc.cache_subgraphs else None

    def _arrays(self):
        return [*self.gnn.weights, self.w_joint,
                self.tables.user_matrix, self.tables.item_matrix]

    def _inputs(self, u: int, i: int, epoch: int):
        if self.cache is not None:
            hit = self.cache.get((u, i))
            if hit is not None:
                return hit
            epoch = 0
        rng = walk_stream(self.tc.master_seed, u, i, epoch)
        pair = lgcf_inputs(self.graph, u, i, self.tc.walk, rng, self.enc)
        if self.cache is not None:
            self.cache[(u, i)] = pair
        return pair

    def run_epoch(self, epoch: int) -> float:
        tc = self.tc
        order = seed_stream(tc.master_seed, EPOCH_SHUFFLE, epoch).permutation(len(self.edges))
        neg_rng = seed_stream(tc.master_seed, TRAIN_NEGATIVE, epoch)
        losses = []
        batch = []
        for idx in order:
            u, i = self.edges[idx]
            for _ in range(tc.negatives_per_positive):
                j = sample_negative(self.graph, u, neg_rng)
                batch.append((u, i, j, self._inputs(u, i, epoch),
                              self._inputs(u, j, epoch)))
                if len(batch) == tc.batch_size:
                    self._flush(batch, losses)
                    batch = []
        if batch:
            self._flush(batch, losses)
        return float(np.mean(losses))

    def _flush(self, batch, losses):
        n = self.graph.num_users
        refined = self.prop.apply(
            np.vstack([self.tables.user_matrix, self.tables.item_matrix]))
        d_weights = [np.zeros_like(w) for w in self.gnn.weights]
        d_w_joint = np.zeros_like(self.w_joint)
        d_refined = np.zeros_like(refined)
        for u, i, j, pos_inputs, neg_inputs in batch:
            losses.append(_joint_triplet(self.gnn, self.w_joint, refined, u, i, j,
                                         pos_inputs, neg_inputs,
                                         d_weights, d_w_joint, d_refined))
        count = len(batch)
        d_e0 = self.prop.apply(d_refined)
        grads = [*(w / count for w in d_weights), d_w_joint / count,
                 d_e0[:n] / count, d_e0[n:] / count]
        adam_step(self._arrays(), grads, self.adam)

    def scorer(self):
        refined = lightgcn_propagate(self.graph, self.tables, self.tc.lightgcn_layers)
        return EmbJointScorer(self.graph, self.gnn, refined, self.w_joint,
                              self.tc.walk, self.tc.master_seed)

    def snapshot(self):
        return (self.gnn.copy(), self.tables.copy(), self.w_joint.copy())

    def restore(self, snap):
        gnn, tables, w_joint = snap
        for dst, src in zip(self.gnn.weights, gnn.weights):
            dst[:] = src
        self.tables.user_matrix[:] = tables.user_matrix
        self.tables.item_matrix[:] = tables.item_matrix
        self.w_joint[:] = w_joint

    def finish(self) -> TrainedModel:
        tc = self.tc
        return TrainedModel("lgcf-emb", tc.walk, tc.label_cap, tc.lightgcn_layers,
                            tc.master_seed, gnn=self.gnn, tables=self.tables,
                            w_joint=self.w_joint)

    def adam_states(self):
        return {"main": self.adam}


@dataclass
class TrainResult:
    model: TrainedModel
    history: list[EpochRecord]
    best_epoch: int | None
    adam: dict[str, AdamState] | None


def _run_epochs(trainer, split: SplitSpec, tc: TrainConfig):
    history: list[EpochRecord] = []
    best_metric = -np.inf
    best_snap = None
    best_epoch = None
    stale = 0
    val_protocol = EvalProtocol(n_negatives=tc.val_negatives, k_values=(10,),
                                seed=tc.master_seed)
    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        loss = trainer.run_epoch(epoch)
        val_hr = val_ndcg = None
        if split.val_edges and epoch % tc.eval_every == 0:
            report = evaluate(trainer.scorer(), trainer.graph, split,
                              val_protocol, subset="val")
            val_hr = report.metrics[10].hr_mean
            val_ndcg = report.metrics[10].ndcg_mean
            if val_hr > best_metric:
                best_metric = val_hr
                best_snap = trainer.snapshot()
                best_epoch = epoch
                stale = 0
            else:
                stale += 1
        wall_ms = (time.perf_counter() - t0) * 1000.0
        history.append(EpochRecord(epoch, loss, val_hr, val_ndcg, wall_ms))
        if (split.val_edges and tc.early_stop_patience > 0
                and stale >= tc.early_stop_patience):
            break
    if best_snap is not None:
        trainer.restore(best_snap)
    return history, best_epoch


def train(kind: str, graph: BipartiteGraph, split: SplitSpec,
          tc: TrainConfig) -> TrainResult:
    """BPR training of any model kind; deterministic in tc.master_seed.

    Each epoch shuffles the train edges, draws fresh negatives, and steps
    Adam per mini-batch on the mean pairwise loss.  When the split has
    validation edges, HR@10 over sampled candidates is tracked and the best
    parameters are restored before returning; early stopping counts
    evaluations without improvement against early_stop_patience.
    """
    if kind not in MODEL_KINDS:
        raise DomainError(f"unknown model kind {kind!r}")
    if split.num_users != graph.num_users or split.num_items != graph.num_items:
        raise DomainError("split metadata does not match the graph")
    if not split.train_edges:
        raise DomainError("split has no training edges")
    if kind == "lgcf-ens":
        return _train_ensemble(graph, split, tc)
    train_graph = build_graph(split.train_edges, graph.num_users, graph.num_items)
    if kind == "lgcf":
        trainer = _LgcfTrainer(train_graph, split.train_edges, tc)
    elif kind in ("mf", "lightgcn"):
        trainer = _EmbeddingTrainer(train_graph, split.train_edges, tc, kind)
    else:
        trainer = _JointTrainer(train_graph, split.train_edges, tc)
    history, best_epoch = _run_epochs(trainer, split, tc)
    return TrainResult(trainer.finish(), history, best_epoch, trainer.adam_states())


def _fit_lambda(lgcf_scorer: LgcfScorer, refined: EmbeddingTable,
                train_graph: BipartiteGraph, split: SplitSpec, seed: int) -> float:
    """One-dimensional BPR fit of the fusion weight on validation triplets.

    The lgcf and embedding score differences are fixed, so the objective is
    convex in lambda and a scalar minimizer settles it deterministically.
    """
    from scipy.optimize import minimize_scalar

    rng = seed_stream(seed, TRAIN_NEGATIVE)
    n = refined.user_matrix.shape[0]
    s_diffs = []
    dot_diffs = []
    for u, i in split.val_edges:
        j = sample_negative(train_graph, u, rng)
        s_diffs.append(lgcf_scorer.score(u, i) - lgcf_scorer.score(u, j))
        dot_diffs.append(float(refined.user_matrix[u] @ refined.item_matrix[i - n])
                         - float(refined.user_matrix[u] @ refined.item_matrix[j - n]))

    def objective(lam: float) -> float:
        return sum(softplus(-(ds + lam * dd)) for ds, dd in zip(s_diffs, dot_diffs))

    return float(minimize_scalar(objective).x)


def _train_ensemble(graph: BipartiteGraph, split: SplitSpec,
                    tc: TrainConfig) -> TrainResult:
    seeds = seed_stream(tc.master_seed, ENSEMBLE).integers(0, 2 ** 31 - 1, size=3)
    res_lgcf = train("lgcf", graph, split, replace(tc, master_seed=int(seeds[0])))
    res_emb = train("lightgcn", graph, split, replace(tc, master_seed=int(seeds[1])))
    train_graph = build_graph(split.train_edges, graph.num_users, graph.num_items)
    lgcf_scorer = LgcfScorer(train_graph, res_lgcf.model.gnn, tc.walk,
                             res_lgcf.model.master_seed)
    refined = lightgcn_propagate(train_graph, res_emb.model.tables,
                                 tc.lightgcn_layers)
    lam = tc.lambda_ens
    if tc.lambda_mode == "grid" and split.val_edges:
        protocol = EvalProtocol(n_negatives=tc.val_negatives, k_values=(10,),
                                seed=int(seeds[2]))
        best = None
        for cand in tc.lambda_grid:
            scorer = EnsembleScorer(lgcf_scorer, refined, float(cand))
            report = evaluate(scorer, train_graph, split, protocol, subset="val")
            key = report.metrics[10].hr_mean
            if best is None or key > best[0]:
                best = (key, float(cand))
        lam = best[1]
    elif tc.lambda_mode == "learnable" and split.val_edges:
        lam = _fit_lambda(lgcf_scorer, refined, train_graph, split, int(seeds[2]))
    model = TrainedModel("lgcf-ens", tc.walk, tc.label_cap, tc.lightgcn_layers,
                         tc.master_seed, gnn=res_lgcf.model.gnn,
                         tables=res_emb.model.tables, lam=float(lam))
    offset = len(res_lgcf.history)
    history = res_lgcf.history + [replace(r, epoch=r.epoch + offset)
                                  for r in res_emb.history]
    adam = {}
    for name, res in (("lgcf", res_lgcf), ("lightgcn", res_emb)):
        if res.adam:
            adam[name] = res.adam["main"]
    return TrainResult(model, history, res_lgcf.best_epoch, adam or None)


def run_gradcheck(kind: str = "lgcf", seed: int = 7, instances: int = 5,
                  tolerance: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Finite-difference verification on freshly sampled random instances.

    Builds small random bipartite graphs, extracts real localized graphs for
    random triplets, and checks every parameter coordinate of the chosen
    objective; reports the worst relative error over all instances.
    """
    if kind not in ("lgcf", "lgcf-emb"):
        raise DomainError(f"gradcheck supports lgcf and lgcf-emb, got {kind!r}")
    rng = seed_stream(seed, GRADCHECK)
    n = m = 6
    cfg = WalkConfig(restart_prob=0.2, walk_len=12, max_nodes=12)
    enc = LabelEncoding(16)
    worst = 0.0
    checked = 0
    for _ in range(instances):
        mask = rng.random((n, m)) < 0.4
        edges = [(u, n + j) for u in range(n) for j in range(m) if mask[u, j]]
        if not edges:
            edges = [(0, n)]
        graph = build_graph(edges, n, m)
        u = int(rng.integers(n))
        i_pos = n + int(rng.integers(m))
        i_neg = n + int(rng.integers(m))
        pos_inputs = lgcf_inputs(graph, u, i_pos, cfg, rng, enc)
        neg_inputs = lgcf_inputs(graph, u, i_neg, cfg, rng, enc)
        gnn = init_gnn_params(enc.label_cap, 8, 3, rng)
        if kind == "lgcf":
            arrays = gnn.arrays()
            _, grads = bpr_pair_grads(gnn, pos_inputs, neg_inputs)
            analytic = grads.arrays()

            def loss_fn():
                return bpr_pair_grads(gnn, pos_inputs, neg_inputs)[0]
        else:
            tables = init_embeddings(n, m, 4, rng)
            w_joint = glorot_uniform(rng, 4 + 8, 1).ravel()
            prop = Propagation(graph, 2)
            arrays = [*gnn.weights, w_joint,
                      tables.user_matrix, tables.item_matrix]
            _, g = emb_joint_loss_and_grads(gnn, w_joint, tables, prop,
                                            u, i_pos, i_neg, pos_inputs, neg_inputs)
            analytic = [*g["weights"], g["w_joint"], g["user"], g["item"]]

            def loss_fn():
                return emb_joint_loss_and_grads(gnn, w_joint, tables, prop, u,
                                                i_pos, i_neg, pos_inputs,
                                                neg_inputs)[0]
        report = grad_check(loss_fn, arrays, analytic, step=step,
                            tolerance=tolerance)
        worst = max(worst, report.max_rel_err)
        checked += report.num_checked
    return GradCheckReport(worst, checked, tolerance, worst < tolerance)
