"""Localized graph extraction around a user-item pair via restart walks."""

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ParseError
from .graph import BipartiteGraph

# Localized graphs place the target user at position 0 and the target item at
# position 1; every downstream stage relies on that convention.
TARGET_USER_POS = 0
TARGET_ITEM_POS = 1


@dataclass(frozen=True)
class WalkConfig:
    """Controls restart-walk sampling and localized graph size."""

    restart_prob: float = 0.15
    walk_len: int = 50
    max_nodes: int = 50
    remove_target_edge: bool = True

    def __post_init__(self):
        if not 0.0 <= self.restart_prob <= 1.0:
            raise DomainError(f"restart_prob must be in [0, 1], got {self.restart_prob}")
        if self.walk_len < 1:
            raise DomainError(f"walk_len must be >= 1, got {self.walk_len}")
        if self.max_nodes < 2:
            raise DomainError(f"max_nodes must be >= 2, got {self.max_nodes}")


@dataclass
class LocalizedGraph:
    """Induced subgraph for one (user, item) pair.

    nodes[0] is the target user and nodes[1] the target item (global ids);
    adjacency is a dense symmetric 0/1 matrix over node positions with zero
    diagonal.  labels start at zero and are filled by the labeling stage.
    """

    nodes: np.ndarray
    adjacency: np.ndarray
    labels: np.ndarray
    target_pair: tuple[int, int]
    target_edge_removed: bool

    @property
    def num_nodes(self) -> int:
        return int(self.nodes.size)


def rwr_trace(graph: BipartiteGraph, start: int, cfg: WalkConfig,
              rng: np.random.Generator) -> list[int]:
    """First-visit order of a restart walk from start.

    Each of the walk_len steps restarts at the start node with probability
    cfg.restart_prob and otherwise moves to a uniformly random neighbor.
    Exactly 2 * walk_len draws are consumed regardless of the path taken, so
    the trace depends only on the generator state and the graph.
    """
    restarts = rng.random(cfg.walk_len)
    moves = rng.random(cfg.walk_len)
    start = int(start)
    visited = [start]
    seen = {start}
    cur = start
    for t in range(cfg.walk_len):
        if restarts[t] < cfg.restart_prob:
            cur = start
            continue
        nbrs = graph.neighbors(cur)
        if nbrs.size == 0:
            cur = start
            continue
        cur = int(nbrs[int(moves[t] * nbrs.size)])
        if cur not in seen:
            seen.add(cur)
            visited.append(cur)
    return visited


def union_nodes(first, second) -> list[int]:
    """Order-preserving union: first-appearance order across both inputs."""
    out: list[int] = []
    seen: set[int] = set()
    for x in (*first, *second):
        x = int(x)
        if x not in seen:
            seen.add(x)
            out.append(x)
    return out


def induce_subgraph(graph: BipartiteGraph, nodes, target: tuple[int, int],
                    remove_target_edge: bool,
                    max_nodes: int | None = None) -> LocalizedGraph:
    """Dense induced adjacency over the given nodes, targets first.

    The target pair is forced to positions 0 and 1; any truncation to
    max_nodes drops from the tail of the visit order, never the targets.
    """
    u, i = int(target[0]), int(target[1])
    ordered = [u, i]
    for x in nodes:
        x = int(x)
        if x != u and x != i:
            ordered.append(x)
    if max_nodes is not None:
        ordered = ordered[:max_nodes]
    pos = {g: p for p, g in enumerate(ordered)}
    k = len(ordered)
    adj = np.zeros((k, k), dtype=np.float64)
    for p, g in enumerate(ordered):
        for nb in graph.neighbors(g):
            q = pos.get(int(nb))
            if q is not None:
                adj[p, q] = 1.0
    if remove_target_edge:
        adj[TARGET_USER_POS, TARGET_ITEM_POS] = 0.0
        adj[TARGET_ITEM_POS, TARGET_USER_POS] = 0.0
    return LocalizedGraph(
        nodes=np.asarray(ordered, dtype=np.int64),
        adjacency=adj,
        labels=np.zeros(k, dtype=np.int64),
        target_pair=(u, i),
        target_edge_removed=bool(remove_target_edge),
    )


def extract(graph: BipartiteGraph, u: int, i: int, cfg: WalkConfig,
            rng: np.random.Generator) -> LocalizedGraph:
    """Localized graph for the pair (u, i): walk from both, union, induce."""
    if not graph.is_user(u):
        raise DomainError(f"{u} is not a user id")
    if graph.is_user(i) or not i < graph.num_nodes or i < 0:
        raise DomainError(f"{i} is not an item id")
    trace_u = rwr_trace(graph, u, cfg, rng)
    trace_i = rwr_trace(graph, i, cfg, rng)
    return induce_subgraph(graph, union_nodes(trace_u, trace_i), (u, i),
                           cfg.remove_target_edge, cfg.max_nodes)


def dump_localized_graph(lg: LocalizedGraph, num_users: int) -> str:
    """Text form: header, one node line per position, one line per edge.

    Header is "k u i removed_flag"; node lines are "pos global_id side label"
    with side u/i; edge lines are "p q" with p < q in ascending order.
    """
    u, i = lg.target_pair
    lines = [f"{lg.num_nodes} {u} {i} {int(lg.target_edge_removed)}"]
    for p in range(lg.num_nodes):
        gid = int(lg.nodes[p])
        side = "u" if gid < num_users else "i"
        lines.append(f"{p} {gid} {side} {int(lg.labels[p])}")
    for p in range(lg.num_nodes):
        for q in range(p + 1, lg.num_nodes):
            if lg.adjacency[p, q]:
                lines.append(f"{p} {q}")
    return "\n".join(lines) + "\n"


def parse_localized_graph(text: str) -> LocalizedGraph:
    """Inverse of dump_localized_graph (side letters are format-checked only)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParseError("empty localized graph dump", 1)
    head = lines[0].split()
    if len(head) != 4:
        raise ParseError(f"expected 'k u i removed_flag', got {lines[0]!r}", 1)
    k, u, i, removed = (int(x) for x in head)
    if len(lines) < 1 + k:
        raise ParseError(f"expected {k} node lines, got {len(lines) - 1}", len(lines))
    nodes = np.zeros(k, dtype=np.int64)
    labels = np.zeros(k, dtype=np.int64)
    for p in range(k):
        parts = lines[1 + p].split()
        if len(parts) != 4 or parts[2] not in ("u", "i"):
            raise ParseError(f"bad node line {lines[1 + p]!r}", 2 + p)
        if int(parts[0]) != p:
            raise ParseError(f"node lines out of order at {lines[1 + p]!r}", 2 + p)
        nodes[p] = int(parts[1])
        labels[p] = int(parts[3])
    adj = np.zeros((k, k), dtype=np.float64)
    for off, ln in enumerate(lines[1 + k:]):
        parts = ln.split()
        if len(parts) != 2:
            raise ParseError(f"bad edge line {ln!r}", 2 + k + off)
        p, q = int(parts[0]), int(parts[1])
        if not (0 <= p < k and 0 <= q < k and p != q):
            raise ParseError(f"edge endpoints out of range in {ln!r}", 2 + k + off)
        adj[p, q] = adj[q, p] = 1.0
    return LocalizedGraph(nodes, adj, labels, (u, i), bool(removed))
