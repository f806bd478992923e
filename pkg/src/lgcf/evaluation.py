"""Ranking evaluation, degree and sparsity probes, case dumps, synthetic data."""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError
from .graph import BipartiteGraph, SplitSpec, build_graph
from .labeling import label_graph
from .rng import DUMP, EVAL_NEGATIVE, SYNTH, seed_stream
from .subgraph import WalkConfig, dump_localized_graph, extract


@dataclass(frozen=True)
class EvalProtocol:
    """Sampled-candidate ranking protocol.

    Each held-out pair competes against n_negatives sampled non-interacted
    items (or every non-interacted item when full_ranking is set).  seed
    drives candidate sampling, keyed per pair.
    """

    n_negatives: int = 99
    k_values: tuple = (5, 10, 20)
    seed: int = 0
    full_ranking: bool = False

    def __post_init__(self):
        if self.n_negatives < 1:
            raise DomainError(f"n_negatives must be >= 1, got {self.n_negatives}")
        if not self.k_values:
            raise DomainError("at least one K is required")
        for k in self.k_values:
            if k < 1:
                raise DomainError(f"K values must be >= 1, got {k}")
        if not self.full_ranking and max(self.k_values) > self.n_negatives + 1:
            raise DomainError("K cannot exceed the candidate list length")


def hr_at_k(rank: int, k: int) -> float:
    """1 if the positive ranks within the top k, else 0."""
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank: int, k: int) -> float:
    """1 / log2(rank + 1) if the positive ranks within the top k, else 0."""
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


@dataclass
class MetricStats:
    hr_mean: float
    hr_std: float
    ndcg_mean: float
    ndcg_std: float
    n_runs: int = 1

    def to_dict(self) -> dict:
        return {"hr_mean": self.hr_mean, "hr_std": self.hr_std,
                "ndcg_mean": self.ndcg_mean, "ndcg_std": self.ndcg_std,
                "n_runs": self.n_runs}


@dataclass
class EvalReport:
    """Per-K metrics plus enough metadata to reproduce the run.

    groups optionally holds a per-degree-group breakdown; rankings (never
    serialized) optionally holds ordered candidate lists per pair.
    """

    metrics: dict[int, MetricStats]
    num_pairs: int
    num_skipped: int
    metadata: dict
    groups: list["EvalReport"] | None = None
    rankings: list | None = None

    def to_dict(self) -> dict:
        out = {
            "metrics": {str(k): stats.to_dict() for k, stats in self.metrics.items()},
            "num_pairs": self.num_pairs,
            "num_skipped": self.num_skipped,
            "metadata": self.metadata,
        }
        if self.groups is not None:
            out["groups"] = [g.to_dict() for g in self.groups]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


@dataclass
class _PairResult:
    u: int
    i: int
    rank: int | None
    cands: np.ndarray
    scores: np.ndarray
    order: np.ndarray


def _pair_results(scorer, graph: BipartiteGraph, split: SplitSpec,
                  protocol: EvalProtocol, pairs) -> list[_PairResult]:
    interacted: dict[int, set] = {}
    for edge_set in (split.train_edges, split.val_edges, split.test_edges):
        for u, i in edge_set:
            interacted.setdefault(u, set()).add(i)
    n = graph.num_users
    pool_cache: dict[int, np.ndarray] = {}
    results = []
    empty = np.zeros(0, dtype=np.int64)
    for u, i in pairs:
        pool = pool_cache.get(u)
        if pool is None:
            banned = interacted.get(u, set())
            pool = np.array([j for j in range(n, graph.num_nodes) if j not in banned],
                            dtype=np.int64)
            pool_cache[u] = pool
        if pool.size == 0:
            results.append(_PairResult(u, i, None, empty, empty, empty))
            continue
        rng = seed_stream(protocol.seed, EVAL_NEGATIVE, u, i)
        if protocol.full_ranking:
            negatives = pool
        else:
            take = min(protocol.n_negatives, pool.size)
            negatives = rng.choice(pool, size=take, replace=False)
        cands = np.concatenate([np.array([i], dtype=np.int64), negatives])
        scores = np.array([scorer.score(u, int(c)) for c in cands], dtype=np.float64)
        order = np.lexsort((cands, -scores))
        rank = int(np.nonzero(order == 0)[0][0]) + 1
        results.append(_PairResult(u, int(i), rank, cands, scores, order))
    return results


def _metrics_from_ranks(ranks, k_values) -> dict[int, MetricStats]:
    out = {}
    for k in k_values:
        if ranks:
            hr = float(np.mean([hr_at_k(r, k) for r in ranks]))
            ndcg = float(np.mean([ndcg_at_k(r, k) for r in ranks]))
        else:
            hr = ndcg = 0.0
        out[int(k)] = MetricStats(hr, 0.0, ndcg, 0.0, 1)
    return out


def _base_metadata(scorer, protocol: EvalProtocol, subset: str) -> dict:
    return {
        "scorer": getattr(scorer, "kind", "unknown"),
        "scorer_seed": getattr(scorer, "seed", None),
        "subset": subset,
        "protocol": {
            "n_negatives": protocol.n_negatives,
            "k_values": [int(k) for k in protocol.k_values],
            "seed": protocol.seed,
            "full_ranking": protocol.full_ranking,
        },
    }


def evaluate(scorer, graph: BipartiteGraph, split: SplitSpec,
             protocol: EvalProtocol, subset: str = "test",
             collect_rankings: bool = False,
             extra_metadata: dict | None = None) -> EvalReport:
    """Rank each held-out pair against sampled negatives.

    Candidates for (u, i) are items u never interacted with anywhere in the
    split, sampled from a stream keyed by (protocol.seed, u, i) so a pair's
    result does not depend on evaluation order.  The positive is ranked by
    descending score with ascending item id breaking ties; HR@K and NDCG@K
    average over pairs.  Pairs with no available negative are skipped and
    counted in num_skipped.  Deterministic given the scorer's parameters and
    the protocol seed.
    """
    if subset not in ("test", "val"):
        raise DomainError(f"subset must be 'test' or 'val', got {subset!r}")
    pairs = split.test_edges if subset == "test" else split.val_edges
    results = _pair_results(scorer, graph, split, protocol, pairs)
    ranks = [r.rank for r in results if r.rank is not None]
    skipped = len(results) - len(ranks)
    metadata = _base_metadata(scorer, protocol, subset)
    if extra_metadata:
        metadata.update(extra_metadata)
    report = EvalReport(_metrics_from_ranks(ranks, protocol.k_values),
                        len(ranks), skipped, metadata)
    if collect_rankings:
        report.rankings = [(r.u, r.i, tuple(int(c) for c in r.cands[r.order]))
                           for r in results if r.rank is not None]
    return report


def degree_probe(scorer, graph: BipartiteGraph, split: SplitSpec,
                 protocol: EvalProtocol, n_groups: int = 5,
                 extra_metadata: dict | None = None) -> EvalReport:
    """Evaluate test pairs grouped by mean endpoint train degree.

    Pairs sort ascending by the mean of their two endpoints' train degrees
    (stable, so ties keep test order) and split into contiguous groups;
    remainders go to the earlier groups.  Candidate sampling is keyed per
    pair, so each group's metrics equal an independent evaluation of those
    pairs, and the top-level metrics cover all pairs together.
    """
    pairs = list(split.test_edges)
    if n_groups < 1:
        raise DomainError(f"n_groups must be >= 1, got {n_groups}")
    if len(pairs) < n_groups:
        raise DomainError(f"cannot form {n_groups} groups from {len(pairs)} pairs")
    deg = np.zeros(graph.num_nodes, dtype=np.int64)
    for u, i in split.train_edges:
        deg[u] += 1
        deg[i] += 1
    keys = np.array([(deg[u] + deg[i]) / 2.0 for u, i in pairs])
    sorted_idx = np.argsort(keys, kind="stable")
    results = _pair_results(scorer, graph, split, protocol, pairs)
    base, rem = divmod(len(pairs), n_groups)
    sizes = [base + 1] * rem + [base] * (n_groups - rem)
    groups = []
    start = 0
    for g, size in enumerate(sizes):
        member_idx = sorted_idx[start:start + size]
        start += size
        member = [results[j] for j in member_idx]
        ranks = [r.rank for r in member if r.rank is not None]
        meta = _base_metadata(scorer, protocol, "test")
        meta.update({
            "group_index": g,
            "mean_degree_min": float(keys[member_idx].min()),
            "mean_degree_max": float(keys[member_idx].max()),
        })
        groups.append(EvalReport(_metrics_from_ranks(ranks, protocol.k_values),
                                 len(ranks), len(member) - len(ranks), meta))
    all_ranks = [r.rank for r in results if r.rank is not None]
    metadata = _base_metadata(scorer, protocol, "test")
    metadata["n_groups"] = n_groups
    if extra_metadata:
        metadata.update(extra_metadata)
    return EvalReport(_metrics_from_ranks(all_ranks, protocol.k_values),
                      len(all_ranks), len(results) - len(all_ranks),
                      metadata, groups=groups)


def sparsity_sweep(models, graph: BipartiteGraph, split: SplitSpec, levels,
                   tc, protocol: EvalProtocol) -> dict[str, list[EvalReport]]:
    """Train and evaluate each model at each sparsity level.

    models holds kind names (trained via models.train) or callables
    (train_graph, level_split, tc) -> scorer.  Validation, test, and the
    candidate exclusion set stay fixed at the original split across levels,
    so the series isolates the effect of train sparsity.
    """
    out: dict[str, list[EvalReport]] = {}
    for model in models:
        name = model if isinstance(model, str) else getattr(model, "__name__", "custom")
        reports = []
        for level_index, level_edges in enumerate(levels):
            level_split = SplitSpec(tuple(tuple(e) for e in level_edges),
                                    split.val_edges, split.test_edges, split.seed,
                                    f"{split.kind}-level{level_index}",
                                    split.num_users, split.num_items)
            train_graph = build_graph(level_split.train_edges,
                                      graph.num_users, graph.num_items)
            if isinstance(model, str):
                from . import models as model_mod
                result = model_mod.train(model, graph, level_split, tc)
                scorer = result.model.make_scorer(train_graph)
            else:
                scorer = model(train_graph, level_split, tc)
            extra = {"model": name, "level_index": level_index,
                     "train_edges": len(level_split.train_edges)}
            reports.append(evaluate(scorer, graph, split, protocol,
                                    extra_metadata=extra))
        out[name] = reports
    return out


def dump_cases(scorer_a, scorer_b, graph: BipartiteGraph, split: SplitSpec,
               walk_cfg: WalkConfig, out_dir, protocol: EvalProtocol,
               top_k: int = 10) -> list[dict]:
    """Dump labeled subgraphs where scorer_a succeeds and scorer_b fails.

    A test pair qualifies when scorer_a ranks it within top_k and scorer_b
    does not.  Both scorers see identical candidate lists (sampling is keyed
    per pair), and for each qualifying pair the positive plus scorer_b's
    top-ranked negative are extracted from the train graph, labeled, and
    written next to a manifest.csv that pairs the two scorers' scores.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    res_a = _pair_results(scorer_a, graph, split, protocol, split.test_edges)
    res_b = _pair_results(scorer_b, graph, split, protocol, split.test_edges)
    train_graph = build_graph(split.train_edges, graph.num_users, graph.num_items)
    rows = []
    case = 0
    for ra, rb in zip(res_a, res_b):
        if ra.rank is None or rb.rank is None:
            continue
        if not (ra.rank <= top_k and rb.rank > top_k):
            continue
        u, i = ra.u, ra.i
        ordered_b = rb.cands[rb.order]
        top_neg = int(ordered_b[0]) if int(ordered_b[0]) != i else int(ordered_b[1])
        for pair_kind, item in (("positive", i), ("negative", top_neg)):
            rng = seed_stream(protocol.seed, DUMP, u, item)
            lg = label_graph(extract(train_graph, u, item, walk_cfg, rng))
            fname = f"case{case:04d}_{pair_kind}_u{u}_i{item}.sg"
            (out_dir / fname).write_text(dump_localized_graph(lg, graph.num_users),
                                         encoding="utf-8")
            idx_a = int(np.nonzero(ra.cands == item)[0][0])
            idx_b = int(np.nonzero(rb.cands == item)[0][0])
            rows.append({"pair_kind": pair_kind, "u": u, "i": item,
                         "score_a": float(ra.scores[idx_a]),
                         "score_b": float(rb.scores[idx_b]),
                         "dump_file": fname})
        case += 1
    lines = ["pair_kind,u,i,score_a,score_b,dump_file"]
    for r in rows:
        lines.append(f"{r['pair_kind']},{r['u']},{r['i']},"
                     f"{r['score_a']!r},{r['score_b']!r},{r['dump_file']}")
    (out_dir / "manifest.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows


def make_synthetic(block_users: int, block_items: int, p_in: float, p_out: float,
                   seed: int) -> BipartiteGraph:
    """Two-block bipartite stochastic block model without isolated nodes.

    Users and items each form two blocks of the given sizes.  Within-block
    user-item pairs connect independently with probability p_in, cross-block
    pairs with p_out.  Any node left isolated then gains one edge to a
    uniformly random within-block partner (users first, then still-isolated
    items, ascending ids), so every node has degree >= 1.
    """
    if block_users < 1 or block_items < 1:
        raise DomainError("block sizes must be >= 1")
    for p in (p_in, p_out):
        if not 0.0 <= p <= 1.0:
            raise DomainError(f"probabilities must be in [0, 1], got {p}")
    rng = seed_stream(seed, SYNTH)
    n = 2 * block_users
    m = 2 * block_items
    edges = set()
    blocks = [
        (0, n, p_in),                       # user block 0 x item block 0
        (block_users, n + block_items, p_in),  # user block 1 x item block 1
        (0, n + block_items, p_out),        # user block 0 x item block 1
        (block_users, n, p_out),            # user block 1 x item block 0
    ]
    for u_off, i_off, p in blocks:
        mask = rng.random((block_users, block_items)) < p
        for a, b in zip(*np.nonzero(mask)):
            edges.add((u_off + int(a), i_off + int(b)))
    deg = np.zeros(n + m, dtype=np.int64)
    for u, i in edges:
        deg[u] += 1
        deg[i] += 1
    for u in range(n):
        if deg[u] == 0:
            block = 0 if u < block_users else 1
            j = n + block * block_items + int(rng.integers(block_items))
            edges.add((u, j))
            deg[u] += 1
            deg[j] += 1
    for j in range(n, n + m):
        if deg[j] == 0:
            block = 0 if j - n < block_items else 1
            u = block * block_users + int(rng.integers(block_users))
            edges.add((u, j))
            deg[u] += 1
            deg[j] += 1
    return build_graph(sorted(edges), n, m)


def aggregate_reports(reports) -> EvalReport:
    """Mean and std of per-run metrics across runs (typically seeds)."""
    reports = list(reports)
    if not reports:
        raise DomainError("nothing to aggregate")
    k_sets = {tuple(sorted(r.metrics)) for r in reports}
    if len(k_sets) != 1:
        raise DomainError("reports must share the same K values")
    metrics = {}
    for k in reports[0].metrics:
        hr = np.array([r.metrics[k].hr_mean for r in reports])
        ndcg = np.array([r.metrics[k].ndcg_mean for r in reports])
        metrics[k] = MetricStats(float(hr.mean()), float(hr.std()),
                                 float(ndcg.mean()), float(ndcg.std()),
                                 len(reports))
    metadata = {"aggregated_runs": len(reports),
                "scorer_seeds": [r.metadata.get("scorer_seed") for r in reports]}
    first_meta = reports[0].metadata
    for key in ("scorer", "subset", "protocol", "model"):
        if key in first_meta:
            metadata[key] = first_meta[key]
    return EvalReport(metrics, sum(r.num_pairs for r in reports),
                      sum(r.num_skipped for r in reports), metadata)


def metrics_csv(rows, k_values) -> str:
    """Flat CSV for plotting: one line per (label, model, report)."""
    header = ["level", "model"]
    for k in k_values:
        header += [f"hr@{k}", f"ndcg@{k}"]
    lines = [",".join(header)]
    for label, model, report in rows:
        cells = [str(label), str(model)]
        for k in k_values:
            stats = report.metrics[int(k)]
            cells += [repr(stats.hr_mean), repr(stats.ndcg_mean)]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
