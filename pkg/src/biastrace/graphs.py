"""Attributed graphs: loading, splitting, adjacency operators, receptive
fields, node deletion and path statistics.

Graphs are undirected, with dense integer node ids 0..n-1. Instances are
immutable after construction; every mutating operation returns a new value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

MAX_PATH_HOPS = 4
MAX_PATH_COUNT = 10**6


class GraphFormatError(ValueError):
    """Raised when an edge/attribute/mask file violates the expected format."""


@dataclass(frozen=True)
class Graph:
    """Undirected attributed graph with labels, sensitive groups and splits.

    Attributes
    ----------
    n : int
        Number of nodes; ids are 0..n-1.
    edges : (E, 2) int array
        Canonical undirected edges: u < v, lexicographically sorted, unique,
        no self loops.
    x : (n, d) float array
        Node attributes.
    y : (n,) int array
        Class labels in 0..c-1.
    s : (n,) int array
        Sensitive-group membership per node.
    train_mask, val_mask, test_mask : (n,) bool arrays
        Disjoint split masks (possibly all-false before splitting).
    origin_ids : (n,) int array or None
        For graphs produced by node deletion: origin_ids[new] = old id in
        the parent graph. None means identity.
    """

    n: int
    edges: np.ndarray
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    train_mask: np.ndarray = field(default=None)
    val_mask: np.ndarray = field(default=None)
    test_mask: np.ndarray = field(default=None)
    origin_ids: np.ndarray | None = None

    def __post_init__(self):
        for name in ("train_mask", "val_mask", "test_mask"):
            if getattr(self, name) is None:
                object.__setattr__(self, name, np.zeros(self.n, dtype=bool))
        if self.x.shape[0] != self.n or self.y.shape[0] != self.n or self.s.shape[0] != self.n:
            raise ValueError("attribute/label/sensitive arrays must have one row per node")
        overlap = (self.train_mask & self.val_mask) | (self.train_mask & self.test_mask) | (
            self.val_mask & self.test_mask)
        if overlap.any():
            raise ValueError(f"split masks overlap at node {int(np.flatnonzero(overlap)[0])}")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= self.n):
            raise ValueError("edge endpoint out of range")

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def num_features(self) -> int:
        return int(self.x.shape[1])

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1 if self.n else 0

    @property
    def train_ids(self) -> np.ndarray:
        return np.flatnonzero(self.train_mask)

    @property
    def test_ids(self) -> np.ndarray:
        return np.flatnonzero(self.test_mask)

    def neighbor_lists(self) -> list[np.ndarray]:
        """Per-node sorted neighbor arrays (cached; the graph is immutable)."""
        cached = getattr(self, "_nbrs", None)
        if cached is None:
            buckets = [[] for _ in range(self.n)]
            for u, v in self.edges:
                buckets[u].append(v)
                buckets[v].append(u)
            cached = [np.array(sorted(b), dtype=np.int64) for b in buckets]
            object.__setattr__(self, "_nbrs", cached)
        return cached

    def degrees(self, self_loops: bool = True) -> np.ndarray:
        """Node degrees under the adjacency convention (self loop counts 1)."""
        deg = np.zeros(self.n, dtype=np.int64)
        if self.edges.size:
            np.add.at(deg, self.edges[:, 0], 1)
            np.add.at(deg, self.edges[:, 1], 1)
        return deg + 1 if self_loops else deg


@dataclass(frozen=True)
class ComputationGraph:
    """The hop-limited subgraph that fully determines one node's prediction."""

    center: int
    hops: int
    members: frozenset[int]
    member_training_nodes: frozenset[int]


@dataclass(frozen=True)
class PathStats:
    """Simple-path statistics between two nodes, capped at MAX_PATH_HOPS.

    shortest_distance is None when no path of length <= the cap exists, in
    which case path_count is 0 and the degree statistics are empty.
    """

    source: int
    target: int
    shortest_distance: int | None
    path_count: int
    geo_mean_degrees: tuple[float, ...]
    min_geo_mean: float | None


@dataclass(frozen=True)
class SplitPolicy:
    """Split sizing rules: balanced val/test fractions and a per-class
    training quota of min(train_fraction * class size, train_cap)."""

    val_fraction: float = 0.25
    test_fraction: float = 0.25
    train_fraction: float = 0.5
    train_cap: int = 500


def canonical_edges(edges, n: int) -> np.ndarray:
    """Canonicalize an edge list: undirected, deduplicated, self loops
    dropped, endpoints validated against n."""
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if arr.size:
        if arr.min() < 0 or arr.max() >= n:
            bad = arr.flat[np.argmax((arr < 0) | (arr >= n))]
            raise GraphFormatError(f"unknown node {int(bad)} referenced by an edge (n={n})")
        arr = arr[arr[:, 0] != arr[:, 1]]
        arr = np.sort(arr, axis=1)
        arr = np.unique(arr, axis=0)
    return arr.reshape(-1, 2)


def _check_node(graph: Graph, v: int) -> int:
    v = int(v)
    if not 0 <= v < graph.n:
        raise ValueError(f"invalid node id {v} (graph has {graph.n} nodes)")
    return v


def load_graph(edge_path, attr_path, schema=None) -> Graph:
    """Load a graph from an edge list and a delimited attribute table.

    The edge file has one "u<TAB>v" pair per line. The attribute file is
    tab-delimited with a header; `schema` (a mapping or an object with
    matching attributes) may override the column names `id_col`, `label_col`,
    `sensitive_col` and may bound the sensitive arity via `sensitive_arity`.
    Every remaining column is a numeric feature.
    """
    id_col, label_col, sens_col, arity = _schema_fields(schema)
    attr_path = Path(attr_path)
    lines = attr_path.read_text().splitlines()
    if not lines:
        raise GraphFormatError(f"{attr_path}: empty attribute file")
    header = lines[0].split("\t")
    try:
        id_ix, y_ix, s_ix = header.index(id_col), header.index(label_col), header.index(sens_col)
    except ValueError as exc:
        raise GraphFormatError(f"{attr_path}: missing column: {exc}") from None
    feat_ix = [k for k in range(len(header)) if k not in (id_ix, y_ix, s_ix)]

    rows = [ln.split("\t") for ln in lines[1:] if ln]
    n = len(rows)
    x = np.empty((n, len(feat_ix)), dtype=np.float64)
    y = np.empty(n, dtype=np.int64)
    s = np.empty(n, dtype=np.int64)
    seen = np.zeros(n, dtype=bool)
    for row in rows:
        if len(row) != len(header):
            raise GraphFormatError(f"{attr_path}: row with {len(row)} fields, expected {len(header)}")
        try:
            i = int(row[id_ix])
            yi, si = int(row[y_ix]), int(row[s_ix])
            feats = [float(row[k]) for k in feat_ix]
        except ValueError as exc:
            raise GraphFormatError(f"{attr_path}: non-numeric attribute: {exc}") from None
        if not 0 <= i < n or seen[i]:
            raise GraphFormatError(f"{attr_path}: node ids must be a permutation of 0..{n - 1}")
        seen[i] = True
        x[i], y[i], s[i] = feats, yi, si
    if arity and s.size and s.max() >= arity:
        raise GraphFormatError(
            f"unknown sensitive value {int(s.max())} beyond declared arity {arity}")
    if s.size and s.min() < 0:
        raise GraphFormatError("sensitive values must be non-negative")

    raw = []
    for ln in Path(edge_path).read_text().splitlines():
        if not ln.strip():
            continue
        parts = ln.split("\t") if "\t" in ln else ln.split()
        if len(parts) != 2:
            raise GraphFormatError(f"{edge_path}: malformed edge line {ln!r}")
        raw.append((int(parts[0]), int(parts[1])))
    edges = canonical_edges(raw, n)
    return Graph(n=n, edges=edges, x=x, y=y, s=s)


def _schema_fields(schema):
    def get(name, default):
        if schema is None:
            return default
        if isinstance(schema, dict):
            return schema.get(name, default)
        return getattr(schema, name, default)

    return (get("id_col", "id"), get("label_col", "label"),
            get("sensitive_col", "sensitive"), get("sensitive_arity", None))


def load_masks(graph: Graph, train_path, val_path, test_path) -> Graph:
    """Attach split masks read from one-id-per-line files."""
    masks = []
    for path in (train_path, val_path, test_path):
        mask = np.zeros(graph.n, dtype=bool)
        for ln in Path(path).read_text().splitlines():
            if ln.strip():
                mask[_check_node(graph, int(ln))] = True
        masks.append(mask)
    return replace(graph, train_mask=masks[0], val_mask=masks[1], test_mask=masks[2])


def save_graph(graph: Graph, out_dir) -> dict[str, Path]:
    """Write edges.tsv / attributes.tsv / {train,val,test}.ids under out_dir.

    Floats are written with repr so a reload reproduces the arrays exactly.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    edge_lines = [f"{u}\t{v}" for u, v in graph.edges]
    paths["edges"] = _write(out / "edges.tsv", edge_lines)

    d = graph.num_features
    header = "id\tlabel\tsensitive\t" + "\t".join(f"f{k}" for k in range(d))
    rows = [header]
    for i in range(graph.n):
        feats = "\t".join(repr(float(v)) for v in graph.x[i])
        rows.append(f"{i}\t{int(graph.y[i])}\t{int(graph.s[i])}\t{feats}")
    paths["attributes"] = _write(out / "attributes.tsv", rows)

    for name, mask in (("train", graph.train_mask), ("val", graph.val_mask),
                       ("test", graph.test_mask)):
        paths[name] = _write(out / f"{name}.ids", [str(i) for i in np.flatnonzero(mask)])
    return paths


def _write(path: Path, lines) -> Path:
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path


def load_graph_dir(data_dir, schema=None) -> Graph:
    """Load a graph saved by save_graph (edges + attributes + masks)."""
    data_dir = Path(data_dir)
    g = load_graph(data_dir / "edges.tsv", data_dir / "attributes.tsv", schema)
    return load_masks(g, data_dir / "train.ids", data_dir / "val.ids", data_dir / "test.ids")


def split(graph: Graph, seed: int, policy: SplitPolicy = SplitPolicy()):
    """Draw deterministic label-balanced splits.

    Validation and test each take their fraction of all nodes, composed of
    equal per-class quotas (remainders assigned round-robin by class order,
    continuing from validation into test so a class is not charged twice).
    Training then takes min(train_fraction * class size, train_cap) nodes
    per class from the remainder.

    Returns (train_mask, val_mask, test_mask).
    """
    if graph.n < 8:
        raise ValueError("need at least 8 nodes to split")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    classes = np.unique(graph.y)
    c = len(classes)
    n_val = int(policy.val_fraction * graph.n)
    n_test = int(policy.test_fraction * graph.n)
    base_v, rem_v = divmod(n_val, c)
    base_t, rem_t = divmod(n_test, c)

    train = np.zeros(graph.n, dtype=bool)
    val = np.zeros(graph.n, dtype=bool)
    test = np.zeros(graph.n, dtype=bool)
    for k, cls in enumerate(classes):
        ids = np.flatnonzero(graph.y == cls)
        if len(ids) < 2:
            raise ValueError(f"class {int(cls)} has fewer than 2 nodes")
        rng.shuffle(ids)
        vq = base_v + (1 if k < rem_v else 0)
        tq = base_t + (1 if (k - rem_v) % c < rem_t else 0)
        if len(ids) < vq + tq + 1:
            raise ValueError(
                f"class {int(cls)} has too few nodes ({len(ids)}) for balanced "
                f"val/test quotas ({vq}+{tq})")
        val[ids[:vq]] = True
        test[ids[vq:vq + tq]] = True
        want = min(int(policy.train_fraction * len(ids)), policy.train_cap)
        pool = ids[vq + tq:]
        train[pool[:min(want, len(pool))]] = True
    return train, val, test


def with_split(graph: Graph, seed: int, policy: SplitPolicy = SplitPolicy()) -> Graph:
    train, val, test = split(graph, seed, policy)
    return replace(graph, train_mask=train, val_mask=val, test_mask=test)


def normalized_adjacency(graph: Graph, mode: str = "row", self_loops: bool = True) -> sp.csr_matrix:
    """Normalized adjacency operator.

    mode "row" gives D^-1 A, mode "symmetric" gives D^-1/2 A D^-1/2; the
    self loop (when enabled) is added before degrees are computed.
    """
    if graph.n == 0:
        raise ValueError("empty graph")
    e = graph.edges
    rows = np.concatenate([e[:, 0], e[:, 1]]) if e.size else np.empty(0, dtype=np.int64)
    cols = np.concatenate([e[:, 1], e[:, 0]]) if e.size else np.empty(0, dtype=np.int64)
    if self_loops:
        diag = np.arange(graph.n)
        rows = np.concatenate([rows, diag])
        cols = np.concatenate([cols, diag])
    data = np.ones(len(rows), dtype=np.float64)
    a = sp.coo_matrix((data, (rows, cols)), shape=(graph.n, graph.n)).tocsr()
    deg = np.asarray(a.sum(axis=1)).ravel()
    if (deg == 0).any():
        raise ValueError(
            f"node {int(np.flatnonzero(deg == 0)[0])} is isolated; enable self_loops "
            "or connect it before normalizing")
    if mode == "row":
        return sp.diags(1.0 / deg) @ a
    if mode == "symmetric":
        half = sp.diags(1.0 / np.sqrt(deg))
        return half @ a @ half
    raise ValueError(f"unknown normalization mode {mode!r}")


def computation_graph(graph: Graph, v: int, hops: int) -> ComputationGraph:
    """BFS ball of the given radius around v."""
    v = _check_node(graph, v)
    if hops < 0:
        raise ValueError("hops must be >= 0")
    nbrs = graph.neighbor_lists()
    seen = {v}
    frontier = [v]
    for _ in range(hops):
        nxt = []
        for u in frontier:
            for w in nbrs[u]:
                w = int(w)
                if w not in seen:
                    seen.add(w)
                    nxt.append(w)
        if not nxt:
            break
        frontier = nxt
    members = frozenset(seen)
    training = frozenset(u for u in members if graph.train_mask[u])
    return ComputationGraph(center=v, hops=hops, members=members,
                            member_training_nodes=training)


def remove_node(graph: Graph, v: int) -> Graph:
    """New graph with node v deleted; origin_ids records the old ids."""
    return remove_nodes(graph, [v])


def remove_nodes(graph: Graph, nodes) -> Graph:
    """Delete a set of nodes, their incident edges, attributes and mask bits.

    The surviving nodes keep their relative order; result.origin_ids maps
    each new id back to its id in this graph.
    """
    drop = np.zeros(graph.n, dtype=bool)
    for v in nodes:
        drop[_check_node(graph, v)] = True
    keep = ~drop
    old_ids = np.flatnonzero(keep)
    new_id = -np.ones(graph.n, dtype=np.int64)
    new_id[old_ids] = np.arange(len(old_ids))

    e = graph.edges
    if e.size:
        alive = keep[e[:, 0]] & keep[e[:, 1]]
        edges = new_id[e[alive]]
    else:
        edges = e.copy()
    return Graph(
        n=len(old_ids),
        edges=canonical_edges(edges, len(old_ids)),
        x=graph.x[keep].copy(),
        y=graph.y[keep].copy(),
        s=graph.s[keep].copy(),
        train_mask=graph.train_mask[keep].copy(),
        val_mask=graph.val_mask[keep].copy(),
        test_mask=graph.test_mask[keep].copy(),
        origin_ids=old_ids,
    )


def path_stats(graph: Graph, j: int, i: int, hops: int, self_loops: bool = True) -> PathStats:
    """Enumerate simple paths from j to i of length <= hops.

    Each path contributes the geometric mean of the degrees of its nodes
    excluding the endpoint i (degrees follow the adjacency convention, so a
    self loop adds one). Enumeration is a desk-scale tool: hops is capped at
    MAX_PATH_HOPS and the path count at MAX_PATH_COUNT.
    """
    j, i = _check_node(graph, j), _check_node(graph, i)
    if i == j:
        raise ValueError("path statistics need two distinct nodes")
    if hops < 1 or hops > MAX_PATH_HOPS:
        raise ValueError(f"hops must be in 1..{MAX_PATH_HOPS}")
    deg = graph.degrees(self_loops=self_loops).astype(np.float64)
    nbrs = graph.neighbor_lists()

    geo_means: list[float] = []
    on_path = np.zeros(graph.n, dtype=bool)
    log_deg = np.log(np.maximum(deg, 1.0))

    def walk(u: int, depth: int, log_sum: float):
        if len(geo_means) > MAX_PATH_COUNT:
            raise ValueError(f"path enumeration exceeds {MAX_PATH_COUNT} paths")
        for w in nbrs[u]:
            w = int(w)
            if w == i:
                geo_means.append(math.exp((log_sum + log_deg[u]) / (depth + 1)))
            elif depth + 1 < hops and not on_path[w]:
                on_path[w] = True
                walk(w, depth + 1, log_sum + log_deg[u])
                on_path[w] = False

    on_path[j] = True
    shortest = _bfs_distance(nbrs, j, i, hops)
    walk(j, 0, 0.0)
    return PathStats(
        source=j, target=i,
        shortest_distance=shortest,
        path_count=len(geo_means),
        geo_mean_degrees=tuple(geo_means),
        min_geo_mean=min(geo_means) if geo_means else None,
    )


def _bfs_distance(nbrs, src: int, dst: int, limit: int) -> int | None:
    frontier = {src}
    seen = {src}
    for depth in range(1, limit + 1):
        nxt = set()
        for u in frontier:
            for w in nbrs[u]:
                w = int(w)
                if w == dst:
                    return depth
                if w not in seen:
                    seen.add(w)
                    nxt.add(w)
        if not nxt:
            return None
        frontier = nxt
    return None


def threshold_graph_edges(x: np.ndarray, threshold: float = 0.7) -> np.ndarray:
    """Distance-threshold edge builder over attribute rows.

    Connects u and v when their Euclidean distance exceeds `threshold` times
    min(max distance of u, max distance of v). Shipped as an uncertified
    convenience for tabular data; the synthetic generator is the supported
    input source.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    sq = np.sum(x * x, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
    dist = np.sqrt(d2)
    np.fill_diagonal(dist, 0.0)
    dmax = dist.max(axis=1)
    cut = threshold * np.minimum(dmax[:, None], dmax[None, :])
    iu, iv = np.triu_indices(n, k=1)
    keep = dist[iu, iv] > cut[iu, iv]
    return np.stack([iu[keep], iv[keep]], axis=1).astype(np.int64)
