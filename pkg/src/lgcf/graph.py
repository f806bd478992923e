"""User-item bipartite interaction graph: ingestion, construction, splits."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, ParseError
from .rng import LEVELS, SPLIT, seed_stream

Edge = tuple[int, int]


@dataclass(frozen=True)
class BipartiteGraph:
    """Immutable undirected user-item graph over a global id space.

    Users occupy ids [0, num_users) and items [num_users, num_users+num_items).
    Adjacency is stored CSR-style with each neighbor list sorted ascending, so
    the structure is cheap to share across any number of concurrent readers.
    """

    num_users: int
    num_items: int
    indptr: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        self.indptr.flags.writeable = False
        self.indices.flags.writeable = False

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    @property
    def edge_count(self) -> int:
        return self.indices.size // 2

    def is_user(self, gid: int) -> bool:
        return 0 <= gid < self.num_users

    def neighbors(self, gid: int) -> np.ndarray:
        return self.indices[self.indptr[gid]:self.indptr[gid + 1]]

    def degree(self, gid: int) -> int:
        return int(self.indptr[gid + 1] - self.indptr[gid])

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def has_edge(self, u: int, i: int) -> bool:
        row = self.neighbors(u)
        pos = int(np.searchsorted(row, i))
        return pos < row.size and int(row[pos]) == i

    def edges(self) -> list[Edge]:
        """All edges as (user, item) pairs in ascending (u, i) order."""
        out = []
        for u in range(self.num_users):
            for i in self.neighbors(u):
                out.append((u, int(i)))
        return out


def build_graph(edges, num_users: int, num_items: int) -> BipartiteGraph:
    """Build the adjacency structure from deduplicated (user, item) pairs.

    Every edge must connect a user id in [0, num_users) to an item id in
    [num_users, num_users+num_items).  Out-of-range or wrong-side endpoints
    and duplicate edges raise DomainError.
    """
    if num_users < 0 or num_items < 0:
        raise DomainError("num_users and num_items must be non-negative")
    n, total = num_users, num_users + num_items
    seen = set()
    deg = np.zeros(total, dtype=np.int64)
    pairs = []
    for u, i in edges:
        u, i = int(u), int(i)
        if not 0 <= u < n:
            raise DomainError(f"edge ({u}, {i}): {u} is not a valid user id")
        if not n <= i < total:
            raise DomainError(f"edge ({u}, {i}): {i} is not a valid item id")
        if (u, i) in seen:
            raise DomainError(f"duplicate edge ({u}, {i})")
        seen.add((u, i))
        deg[u] += 1
        deg[i] += 1
        pairs.append((u, i))
    indptr = np.zeros(total + 1, dtype=np.int64)
    indptr[1:] = np.cumsum(deg)
    indices = np.zeros(int(indptr[-1]), dtype=np.int64)
    cursor = indptr[:-1].copy()
    for u, i in pairs:
        indices[cursor[u]] = i
        cursor[u] += 1
        indices[cursor[i]] = u
        cursor[i] += 1
    for gid in range(total):
        indices[indptr[gid]:indptr[gid + 1]].sort()
    return BipartiteGraph(n, num_items, indptr, indices)


def density(graph: BipartiteGraph) -> float:
    """Interaction density |E| / (num_users * num_items)."""
    if graph.num_users == 0 or graph.num_items == 0:
        raise DomainError("density is undefined for an empty side")
    return graph.edge_count / (graph.num_users * graph.num_items)


@dataclass(frozen=True)
class IngestResult:
    """Dense re-indexing of a raw interaction file.

    user_keys[u] holds the original key of user id u, and item_keys[j] the
    key of the item with global id num_users + j, for reverse lookup.
    Edges use global ids: (user id, num_users + item index).
    """

    edges: tuple[Edge, ...]
    num_users: int
    num_items: int
    user_keys: tuple[str, ...]
    item_keys: tuple[str, ...]


def ingest_interactions(path, *, delimiter: str | None = None, user_col: int = 0,
                        item_col: int = 1, rating_col: int | None = None,
                        rating_threshold: float | None = None) -> IngestResult:
    """Read a delimited interaction file and densely re-index its keys.

    Ids are assigned in order of first appearance over all well-formed rows;
    the rating threshold only filters which rows become edges, so the id
    space covers every key seen.  Duplicate (user, item) rows collapse to one
    edge.  Lines starting with '#' and blank lines are skipped.  When
    delimiter is None it is sniffed from the first data line (tab wins over
    comma).  Malformed rows raise ParseError with their line number; an
    empty edge set raises DomainError.
    """
    if rating_threshold is not None and rating_col is None:
        raise DomainError("rating_threshold requires rating_col")
    cols = [user_col, item_col] + ([rating_col] if rating_col is not None else [])
    if any(c < 0 for c in cols):
        raise DomainError("column indices must be non-negative")
    need = max(cols)
    user_ids: dict[str, int] = {}
    item_ids: dict[str, int] = {}
    pairs: set[tuple[int, int]] = set()
    sep = delimiter
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if sep is None:
                sep = "\t" if "\t" in line else ","
            parts = line.split(sep)
            if len(parts) <= need:
                raise ParseError(
                    f"expected at least {need + 1} columns, got {len(parts)}", line_no)
            ukey = parts[user_col].strip()
            ikey = parts[item_col].strip()
            if not ukey or not ikey:
                raise ParseError("empty user or item key", line_no)
            rating = None
            if rating_col is not None:
                try:
                    rating = float(parts[rating_col])
                except ValueError:
                    raise ParseError(
                        f"unparseable rating {parts[rating_col]!r}", line_no) from None
            uid = user_ids.setdefault(ukey, len(user_ids))
            iid = item_ids.setdefault(ikey, len(item_ids))
            if rating_threshold is not None and rating < rating_threshold:
                continue
            pairs.add((uid, iid))
    if not pairs:
        raise DomainError(f"no interactions ingested from {path}")
    n = len(user_ids)
    edges = tuple(sorted((u, n + i) for u, i in pairs))
    return IngestResult(edges, n, len(item_ids), tuple(user_ids), tuple(item_ids))


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint train/validation/test edge sets for one graph."""

    train_edges: tuple[Edge, ...]
    val_edges: tuple[Edge, ...]
    test_edges: tuple[Edge, ...]
    seed: int
    kind: str
    num_users: int
    num_items: int


def _greedy_holdout(graph: BipartiteGraph, seed: int, limit: int | None):
    """Move edges to holdout in seeded random order, keeping degrees >= 1.

    An edge is only moved when both endpoints still have two or more
    remaining train edges, so nothing in train becomes isolated and every
    held-out endpoint keeps at least one training interaction.
    """
    edges = graph.edges()
    rng = seed_stream(seed, SPLIT)
    order = rng.permutation(len(edges))
    deg = graph.degrees().copy()
    held = []
    held_mask = np.zeros(len(edges), dtype=bool)
    for idx in order:
        if limit is not None and len(held) >= limit:
            break
        u, i = edges[idx]
        if deg[u] >= 2 and deg[i] >= 2:
            deg[u] -= 1
            deg[i] -= 1
            held.append(edges[idx])
            held_mask[idx] = True
    train = tuple(e for j, e in enumerate(edges) if not held_mask[j])
    return train, held


def _finish_split(graph, train, held, seed, kind) -> SplitSpec:
    # held is in removal order; first half validates, the rest (plus the odd
    # edge, if any) tests.
    val = tuple(sorted(held[:len(held) // 2]))
    test = tuple(sorted(held[len(held) // 2:]))
    return SplitSpec(train, val, test, seed, kind,
                     graph.num_users, graph.num_items)


def normal_split(graph: BipartiteGraph, train_frac: float, seed: int) -> SplitSpec:
    """Hold out about (1 - train_frac) of edges, protecting rare endpoints.

    Edges whose removal would isolate a node or strand a held-out endpoint
    without training interactions stay in train, so the realized train
    fraction can exceed the request.  Deterministic in (graph, train_frac,
    seed).
    """
    if graph.edge_count == 0:
        raise DomainError("cannot split a graph with no edges")
    if not 0.0 < train_frac < 1.0:
        raise DomainError(f"train_frac must be in (0, 1), got {train_frac}")
    target = int(round(graph.edge_count * (1.0 - train_frac)))
    train, held = _greedy_holdout(graph, seed, target)
    return _finish_split(graph, train, held, seed, "normal")


def sparse_split(graph: BipartiteGraph, seed: int) -> SplitSpec:
    """Greedily hold out as many edges as the degree constraints allow.

    Same constraint as normal_split but with no size target: the seeded
    greedy pass keeps moving edges while both endpoints retain two or more
    train edges, producing a maximally thinned training set with no
    cold-start evaluation pairs.
    """
    if graph.edge_count == 0:
        raise DomainError("cannot split a graph with no edges")
    train, held = _greedy_holdout(graph, seed, None)
    return _finish_split(graph, train, held, seed, "sparse")


def sparsity_levels(train_edges, fractions, seed: int) -> list[tuple[Edge, ...]]:
    """Nested sparsifications of a training edge set.

    A greedy pass over one seeded edge order keeps a necessary set that
    covers every endpoint; the remaining (additional) edges are shuffled
    once, and each fraction drops that share of them from the front of the
    shuffled order.  Larger fractions therefore remove supersets, so the
    levels nest, and every node keeps at least one edge at every level.

    train_edges is an edge list (typically SplitSpec.train_edges, so levels
    nest inside an existing split) or a BipartiteGraph whose whole edge set
    plays that role.
    """
    if isinstance(train_edges, BipartiteGraph):
        train_edges = train_edges.edges()
    edges = [tuple(e) for e in train_edges]
    if not edges:
        raise DomainError("cannot sparsify an empty train set")
    for f in fractions:
        if not 0.0 <= f <= 1.0:
            raise DomainError(f"fractions must be in [0, 1], got {f}")
    rng = seed_stream(seed, LEVELS)
    order = rng.permutation(len(edges))
    covered: set[int] = set()
    necessary = np.zeros(len(edges), dtype=bool)
    for idx in order:
        u, i = edges[idx]
        if u not in covered or i not in covered:
            necessary[idx] = True
            covered.add(u)
            covered.add(i)
    additional = np.flatnonzero(~necessary)
    if additional.size:
        additional = additional[rng.permutation(additional.size)]
    levels = []
    for f in fractions:
        k = int(round(f * additional.size))
        removed = set(additional[:k].tolist())
        levels.append(tuple(e for j, e in enumerate(edges) if j not in removed))
    return levels


def _write_edge_file(path: Path, edges):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, i in edges:
            fh.write(f"{u}\t{i}\n")


def _read_edge_file(path: Path) -> tuple[Edge, ...]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"expected 'user<TAB>item', got {line!r}", line_no)
            try:
                out.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise ParseError(f"non-integer id in {line!r}", line_no) from None
    return tuple(out)


def save_split(split: SplitSpec, out_dir) -> None:
    """Persist a split as three edge files plus a metadata header."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, edges in (("train", split.train_edges),
                        ("val", split.val_edges),
                        ("test", split.test_edges)):
        _write_edge_file(out_dir / f"{name}.tsv", edges)
    meta = {
        "kind": split.kind,
        "seed": split.seed,
        "num_users": split.num_users,
        "num_items": split.num_items,
        "counts": {
            "train": len(split.train_edges),
            "val": len(split.val_edges),
            "test": len(split.test_edges),
        },
    }
    (out_dir / "meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_split(split_dir) -> SplitSpec:
    split_dir = Path(split_dir)
    meta = json.loads((split_dir / "meta.json").read_text(encoding="utf-8"))
    parts = {name: _read_edge_file(split_dir / f"{name}.tsv")
             for name in ("train", "val", "test")}
    for name in ("train", "val", "test"):
        if len(parts[name]) != meta["counts"][name]:
            raise DomainError(
                f"{name} edge count {len(parts[name])} does not match metadata "
                f"{meta['counts'][name]}")
    return SplitSpec(parts["train"], parts["val"], parts["test"],
                     int(meta["seed"]), str(meta["kind"]),
                     int(meta["num_users"]), int(meta["num_items"]))


def save_graph_dir(graph: BipartiteGraph, out_dir) -> None:
    """Persist a graph as edges.tsv plus a size header."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_edge_file(out_dir / "edges.tsv", graph.edges())
    meta = {"num_users": graph.num_users, "num_items": graph.num_items,
            "num_edges": graph.edge_count}
    (out_dir / "graph.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_graph_dir(graph_dir) -> BipartiteGraph:
    graph_dir = Path(graph_dir)
    meta = json.loads((graph_dir / "graph.json").read_text(encoding="utf-8"))
    edges = _read_edge_file(graph_dir / "edges.tsv")
    return build_graph(edges, int(meta["num_users"]), int(meta["num_items"]))
