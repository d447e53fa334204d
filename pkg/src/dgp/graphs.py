"""Graph containers, dataset I/O, featurizers, splits and synthetic data.

Graphs are directed edge lists; undirected input data is stored with both
directions present.  Datasets are treated as immutable once built: every
transformation returns new objects and never mutates its input.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .seeding import derive_rng


class TuFormatError(ValueError):
    """A dataset file violates the on-disk text format."""


@dataclass
class Graph:
    """One graph: node count, directed (src, dst) edges, node features."""

    node_count: int
    edges: np.ndarray  # (m, 2) int
    features: np.ndarray  # (node_count, d) float64

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.intp).reshape(-1, 2)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != self.node_count:
            raise ValueError(
                f"features must be ({self.node_count}, d), got {self.features.shape}"
            )
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= self.node_count):
            raise ValueError("edge endpoint out of range")

    @property
    def edge_count(self) -> int:
        return self.edges.shape[0]

    def out_degrees(self) -> np.ndarray:
        return np.bincount(self.edges[:, 0], minlength=self.node_count)


@dataclass
class LabeledGraph:
    graph: Graph
    label: int


@dataclass
class GraphDataset:
    """A named list of labeled graphs with a shared feature width."""

    name: str
    graphs: list[LabeledGraph]
    class_count: int
    feature_dim: int

    def __post_init__(self):
        for lg in self.graphs:
            if lg.graph.features.shape[1] != self.feature_dim:
                raise ValueError("inconsistent feature width across graphs")
            if not 0 <= lg.label < self.class_count:
                raise ValueError(f"label {lg.label} outside [0, {self.class_count})")

    def __len__(self):
        return len(self.graphs)


@dataclass
class SplitBundle:
    """Disjoint experiment splits: labels kept for in-distribution graphs."""

    train_id: list[LabeledGraph]
    val_id: list[LabeledGraph]
    val_ood: list[Graph]
    test_id: list[LabeledGraph]
    test_ood: list[Graph]


# -- text-format dataset I/O ------------------------------------------------


def _data_lines(path):
    """Yield (line_number, stripped_text) for non-blank lines."""
    with open(path, "r", encoding="utf-8") as fh:
        for no, raw in enumerate(fh, start=1):
            text = raw.strip()
            if text:
                yield no, text


def _parse_int(path, no, token):
    try:
        return int(token.strip())
    except ValueError:
        raise TuFormatError(f"{path}:{no}: expected integer, got {token.strip()!r}") from None


def _parse_float(path, no, token):
    try:
        return float(token.strip())
    except ValueError:
        raise TuFormatError(f"{path}:{no}: expected number, got {token.strip()!r}") from None


def parse_tu_dataset(directory: str, name: str) -> GraphDataset:
    """Load a dataset stored as {name}_A.txt / _graph_indicator.txt /
    _graph_labels.txt with optional _node_labels.txt and
    _node_attributes.txt.

    Node ids in the files are 1-based and global across all graphs.  Graph
    labels and node labels are remapped to dense 0-based ranges (sorted by
    original value); node labels become one-hot features, attributes are
    appended after them.  Graphs with neither get a constant feature of
    width 1.
    """
    def path_of(suffix, required):
        p = os.path.join(directory, f"{name}_{suffix}.txt")
        if required and not os.path.isfile(p):
            raise TuFormatError(f"{p}: required file missing")
        return p if os.path.isfile(p) else None

    ind_path = path_of("graph_indicator", True)
    a_path = path_of("A", True)
    lab_path = path_of("graph_labels", True)
    nlab_path = path_of("node_labels", False)
    attr_path = path_of("node_attributes", False)

    node_graph = []  # 0-based graph index per global node
    for no, text in _data_lines(ind_path):
        node_graph.append(_parse_int(ind_path, no, text) - 1)
    node_graph = np.asarray(node_graph, dtype=np.intp)
    n_nodes = len(node_graph)
    if n_nodes == 0:
        raise TuFormatError(f"{ind_path}: no nodes listed")
    n_graphs = int(node_graph.max()) + 1
    if sorted(set(node_graph.tolist())) != list(range(n_graphs)):
        raise TuFormatError(f"{ind_path}: graph ids must cover 1..{n_graphs}")

    counts = np.bincount(node_graph, minlength=n_graphs)
    offsets = np.concatenate([[0], np.cumsum(counts)])

    edges_per_graph = [[] for _ in range(n_graphs)]
    for no, text in _data_lines(a_path):
        parts = text.split(",")
        if len(parts) != 2:
            raise TuFormatError(f"{a_path}:{no}: expected 'i, j'")
        i = _parse_int(a_path, no, parts[0]) - 1
        j = _parse_int(a_path, no, parts[1]) - 1
        if not (0 <= i < n_nodes and 0 <= j < n_nodes):
            raise TuFormatError(f"{a_path}:{no}: node id out of range")
        gi, gj = node_graph[i], node_graph[j]
        if gi != gj:
            raise TuFormatError(f"{a_path}:{no}: edge joins nodes of different graphs")
        edges_per_graph[gi].append((i - offsets[gi], j - offsets[gi]))

    raw_labels = [_parse_int(lab_path, no, text) for no, text in _data_lines(lab_path)]
    if len(raw_labels) != n_graphs:
        raise TuFormatError(
            f"{lab_path}: {len(raw_labels)} labels for {n_graphs} graphs"
        )
    label_map = {v: k for k, v in enumerate(sorted(set(raw_labels)))}
    labels = [label_map[v] for v in raw_labels]

    onehot = None
    if nlab_path is not None:
        raw_nlabels = [_parse_int(nlab_path, no, text) for no, text in _data_lines(nlab_path)]
        if len(raw_nlabels) != n_nodes:
            raise TuFormatError(f"{nlab_path}: {len(raw_nlabels)} labels for {n_nodes} nodes")
        nmap = {v: k for k, v in enumerate(sorted(set(raw_nlabels)))}
        onehot = np.zeros((n_nodes, len(nmap)))
        for i, v in enumerate(raw_nlabels):
            onehot[i, nmap[v]] = 1.0

    attrs = None
    if attr_path is not None:
        rows = []
        for no, text in _data_lines(attr_path):
            rows.append([_parse_float(attr_path, no, tok) for tok in text.split(",")])
        if len(rows) != n_nodes:
            raise TuFormatError(f"{attr_path}: {len(rows)} rows for {n_nodes} nodes")
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise TuFormatError(f"{attr_path}: ragged attribute rows")
        attrs = np.asarray(rows, dtype=np.float64)

    if onehot is not None and attrs is not None:
        features = np.concatenate([onehot, attrs], axis=1)
    elif onehot is not None:
        features = onehot
    elif attrs is not None:
        features = attrs
    else:
        features = np.ones((n_nodes, 1))

    graphs = []
    for gi in range(n_graphs):
        lo, hi = offsets[gi], offsets[gi + 1]
        g = Graph(
            node_count=int(hi - lo),
            edges=np.asarray(edges_per_graph[gi], dtype=np.intp).reshape(-1, 2),
            features=features[lo:hi].copy(),
        )
        graphs.append(LabeledGraph(g, labels[gi]))

    return GraphDataset(
        name=name,
        graphs=graphs,
        class_count=len(label_map),
        feature_dim=features.shape[1],
    )


def write_tu_dataset(ds: GraphDataset, directory: str):
    """Persist a dataset in the text format read by parse_tu_dataset.

    Features are written as full-precision node attributes so that a
    parse -> write -> parse round trip reproduces the dataset exactly.
    """
    os.makedirs(directory, exist_ok=True)

    def out(suffix):
        return open(os.path.join(directory, f"{ds.name}_{suffix}.txt"), "w", encoding="utf-8")

    with out("A") as fa, out("graph_indicator") as fi, out("graph_labels") as fl, out(
        "node_attributes"
    ) as fn:
        offset = 0
        for gi, lg in enumerate(ds.graphs):
            g = lg.graph
            fl.write(f"{lg.label}\n")
            for i in range(g.node_count):
                fi.write(f"{gi + 1}\n")
                fn.write(", ".join(f"{v:.17g}" for v in g.features[i]) + "\n")
            for s, d in g.edges:
                fa.write(f"{s + 1 + offset}, {d + 1 + offset}\n")
            offset += g.node_count


# -- featurizers ------------------------------------------------------------


def degree_features(ds: GraphDataset, max_degree: int = 32) -> GraphDataset:
    """Replace node features with a one-hot of min(out-degree, max_degree)."""
    dim = max_degree + 1
    graphs = []
    for lg in ds.graphs:
        g = lg.graph
        deg = np.minimum(g.out_degrees(), max_degree)
        feats = np.zeros((g.node_count, dim))
        feats[np.arange(g.node_count), deg] = 1.0
        graphs.append(LabeledGraph(Graph(g.node_count, g.edges.copy(), feats), lg.label))
    return GraphDataset(ds.name, graphs, ds.class_count, dim)


# -- splits -----------------------------------------------------------------


def make_split(id_ds: GraphDataset, ood_ds: GraphDataset, seed: int) -> SplitBundle:
    """80/10/10 split of the ID set, with equal-size OOD contamination of
    the validation and test portions.

    Val and test sizes are floor(0.1 * |ID|); the remainder trains.  OOD
    graphs are drawn without replacement, so the pool must hold at least
    2 * ceil(0.1 * |ID|) graphs.
    """
    n = len(id_ds)
    n_val = n // 10
    n_test = n // 10
    required = 2 * math.ceil(0.1 * n)
    if len(ood_ds) < required:
        raise ValueError(
            f"OOD pool has {len(ood_ds)} graphs but {required} are required "
            f"for an ID set of {n}"
        )
    rng = derive_rng(seed, "split")
    id_order = rng.permutation(n)
    val_idx = id_order[:n_val]
    test_idx = id_order[n_val : n_val + n_test]
    train_idx = id_order[n_val + n_test :]
    ood_order = rng.permutation(len(ood_ds))
    return SplitBundle(
        train_id=[id_ds.graphs[i] for i in train_idx],
        val_id=[id_ds.graphs[i] for i in val_idx],
        val_ood=[ood_ds.graphs[i].graph for i in ood_order[:n_val]],
        test_id=[id_ds.graphs[i] for i in test_idx],
        test_ood=[ood_ds.graphs[i].graph for i in ood_order[n_val : n_val + n_test]],
    )


# -- synthetic benchmark ----------------------------------------------------


@dataclass
class MotifSpec:
    """Planted-motif layout for in-distribution graphs.

    Class c plants `count` disjoint cycles of length cycle_base + c on top
    of `extra_nodes` background nodes (plus up to `jitter` more, drawn per
    graph).
    """

    count: int = 2
    extra_nodes: int = 10
    jitter: int = 3
    cycle_base: int = 3


@dataclass
class OodSpec:
    """Star-dominated out-of-distribution family: one hub adjacent to all
    other nodes, padded with random edges up to a target density."""

    nodes: int = 16
    density: float = 0.2
    jitter: int = 3


def _add_undirected(edge_list, i, j):
    edge_list.append((i, j))
    edge_list.append((j, i))


def _er_fill(edge_list, pairs, p, rng):
    for i, j in pairs:
        if rng.random() < p:
            _add_undirected(edge_list, i, j)


def synth_id(
    classes: int = 2,
    per_class: int = 150,
    motif_spec: MotifSpec | None = None,
    bg_density: float = 0.08,
    seed: int = 0,
    max_degree: int = 32,
) -> GraphDataset:
    """Generate the in-distribution benchmark with degree features applied.

    With bg_density 0, extra_nodes 0 and jitter 0, every graph is exactly
    its planted motifs, which keeps exhaustive motif censuses meaningful.
    """
    if classes < 1 or per_class < 1:
        raise ValueError("classes and per_class must be positive")
    spec = motif_spec or MotifSpec()
    rng = derive_rng(seed, "synth-id")
    graphs = []
    for c in range(classes):
        cycle_len = spec.cycle_base + c
        for _ in range(per_class):
            n = spec.count * cycle_len + spec.extra_nodes + int(rng.integers(0, spec.jitter + 1))
            edge_list = []
            motif_pairs = set()
            for k in range(spec.count):
                base = k * cycle_len
                for step in range(cycle_len):
                    i = base + step
                    j = base + (step + 1) % cycle_len
                    _add_undirected(edge_list, i, j)
                    motif_pairs.add((min(i, j), max(i, j)))
            candidates = [
                (i, j)
                for i in range(n)
                for j in range(i + 1, n)
                if (i, j) not in motif_pairs
            ]
            _er_fill(edge_list, candidates, bg_density, rng)
            g = Graph(n, np.asarray(edge_list, dtype=np.intp).reshape(-1, 2), np.ones((n, 1)))
            graphs.append(LabeledGraph(g, c))
    ds = GraphDataset("SYNTH-ID", graphs, classes, 1)
    return degree_features(ds, max_degree=max_degree)


def synth_ood(
    count: int = 60,
    ood_spec: OodSpec | None = None,
    seed: int = 0,
    max_degree: int = 32,
) -> GraphDataset:
    """Generate the out-of-distribution pool (sentinel label 0)."""
    if count < 1:
        raise ValueError("count must be positive")
    spec = ood_spec or OodSpec()
    rng = derive_rng(seed, "synth-ood")
    graphs = []
    for _ in range(count):
        n = spec.nodes + int(rng.integers(0, spec.jitter + 1))
        edge_list = []
        for leaf in range(1, n):
            _add_undirected(edge_list, 0, leaf)
        total_pairs = n * (n - 1) // 2
        star_pairs = n - 1
        target = spec.density * total_pairs
        rest = total_pairs - star_pairs
        p_extra = min(1.0, max(0.0, (target - star_pairs) / rest)) if rest else 0.0
        candidates = [(i, j) for i in range(1, n) for j in range(i + 1, n)]
        _er_fill(edge_list, candidates, p_extra, rng)
        g = Graph(n, np.asarray(edge_list, dtype=np.intp).reshape(-1, 2), np.ones((n, 1)))
        graphs.append(LabeledGraph(g, 0))
    ds = GraphDataset("SYNTH-OOD", graphs, 1, 1)
    return degree_features(ds, max_degree=max_degree)


def mean_density(ds: GraphDataset) -> float:
    """Mean undirected edge density over a dataset's graphs."""
    vals = []
    for lg in ds.graphs:
        g = lg.graph
        pairs = g.node_count * (g.node_count - 1) / 2
        vals.append((g.edge_count / 2) / pairs if pairs else 0.0)
    return float(np.mean(vals))
