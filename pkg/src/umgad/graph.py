"""Multiplex graph container and on-disk format.

A dataset is a manifest of key=value lines:

    nodes=<int>
    features=<path>          # first line "<node_count> <f>", then one row per node
    relation.<name>=<path>   # edge list "<u> <v>" per line, '#' comments allowed
    labels=<path>            # optional, "<node_id> <0|1>" per line

Paths are resolved relative to the manifest. Every relation shares the node
set; adjacency is stored symmetric, 0/1, zero-diagonal CSR.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from pathlib import Path
from scipy import sparse

from .errors import (
    EmptyRelation,
    InconsistentNodeCount,
    IndexOutOfRange,
    MissingFile,
    NumericalError,
    ParseError,
    ShapeMismatch,
)


@dataclass
class RelationalSubgraph:
    relation_id: int
    name: str
    adjacency: sparse.csr_matrix  # |V| x |V|, symmetric 0/1, no self-loops
    edge_count: int               # undirected edge count

    def degree(self, v):
        n = self.adjacency.shape[0]
        if not 0 <= v < n:
            raise IndexOutOfRange(f"node {v} not in [0, {n})")
        return int(self.adjacency.indptr[v + 1] - self.adjacency.indptr[v])

    def neighbors(self, v):
        a = self.adjacency
        return a.indices[a.indptr[v]:a.indptr[v + 1]]

    def edge_array(self):
        """Undirected edges as an (E, 2) array with u < v, lexicographic."""
        coo = sparse.triu(self.adjacency, k=1).tocoo()
        edges = np.column_stack([coo.row, coo.col]).astype(np.int64)
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        return edges[order]

    def closed_neighborhoods(self):
        """Sorted closed neighborhoods ({v} | N(v)) as a padded matrix.

        Returns (matrix, sizes); row v holds its sizes[v] forbidden ids and is
        padded with 2n, which sorts past every real id. Built once, cached.
        """
        cached = getattr(self, "_closed_nbrs", None)
        if cached is not None:
            return cached
        a = self.adjacency
        n = a.shape[0]
        sizes = (np.diff(a.indptr) + 1).astype(np.int64)
        mat = np.full((n, int(sizes.max())), 2 * n, dtype=np.int64)
        for v in range(n):
            row = a.indices[a.indptr[v]:a.indptr[v + 1]]
            pos = int(np.searchsorted(row, v))
            mat[v, :pos] = row[:pos]
            mat[v, pos] = v
            mat[v, pos + 1:sizes[v]] = row[pos:]
        self._closed_nbrs = (mat, sizes)
        return self._closed_nbrs


@dataclass
class MultiplexGraph:
    relations: list[RelationalSubgraph]
    attributes: np.ndarray        # |V| x f float64, finite
    labels: np.ndarray | None = None

    node_count: int = field(init=False)
    feature_dim: int = field(init=False)

    def __post_init__(self):
        self.attributes = np.asarray(self.attributes, dtype=np.float64)
        if self.attributes.ndim != 2:
            raise ShapeMismatch("attributes must be a 2-D matrix")
        if not np.all(np.isfinite(self.attributes)):
            raise NumericalError("non-finite attribute values")
        self.node_count, self.feature_dim = self.attributes.shape
        for rel in self.relations:
            if rel.adjacency.shape != (self.node_count, self.node_count):
                raise InconsistentNodeCount(
                    f"relation {rel.name}: adjacency {rel.adjacency.shape} "
                    f"vs {self.node_count} nodes")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.node_count,):
                raise InconsistentNodeCount("labels length != node count")

    @property
    def n_relations(self):
        return len(self.relations)


def build_adjacency(edges, node_count, name="relation"):
    """Symmetric 0/1 CSR from an iterable of (u, v) pairs.

    Self-loops are dropped with a warning; duplicates collapse to one edge.
    """
    edges = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= node_count):
        raise IndexOutOfRange(f"{name}: edge endpoint outside [0, {node_count})")
    loops = edges[:, 0] == edges[:, 1]
    if loops.any():
        warnings.warn(f"{name}: dropped {int(loops.sum())} self-loop(s)")
        edges = edges[~loops]
    if edges.size:
        und = np.unique(np.sort(edges, axis=1), axis=0)
    else:
        und = np.zeros((0, 2), dtype=np.int64)
    rows = np.concatenate([und[:, 0], und[:, 1]])
    cols = np.concatenate([und[:, 1], und[:, 0]])
    adj = sparse.csr_matrix(
        (np.ones(rows.size), (rows, cols)), shape=(node_count, node_count))
    adj.sum_duplicates()
    adj.data[:] = 1.0
    return adj, int(und.shape[0])


def normalize_adjacency(adjacency):
    """Symmetric renormalized propagation matrix D^-1/2 (A + I) D^-1/2."""
    n = adjacency.shape[0]
    a_tilde = (adjacency + sparse.identity(n, format="csr")).tocsr()
    deg = np.asarray(a_tilde.sum(axis=1)).ravel()
    d_inv_sqrt = 1.0 / np.sqrt(deg)  # deg >= 1 thanks to the self-loop
    d = sparse.diags(d_inv_sqrt)
    return (d @ a_tilde @ d).tocsr()


def zscore_attributes(g):
    """Copy of g with each attribute column standardized (constant columns -> 0)."""
    x = g.attributes
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    return MultiplexGraph(g.relations, (x - mu) / sd, g.labels)


# --- manifest I/O -----------------------------------------------------------


def _require(path):
    if not path.exists():
        raise MissingFile(str(path))
    return path


def _read_features(path):
    path = _require(Path(path))
    with open(path) as fh:
        lines = fh.readlines()
    if not lines:
        raise ParseError(path, 1, "empty feature file")
    head = lines[0].split()
    if len(head) != 2:
        raise ParseError(path, 1, "expected '<node_count> <feature_dim>'")
    try:
        n, f = int(head[0]), int(head[1])
    except ValueError:
        raise ParseError(path, 1, "expected integer header") from None
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != f:
            raise ParseError(path, ln, f"expected {f} values, got {len(parts)}")
        try:
            row = [float(p) for p in parts]
        except ValueError:
            raise ParseError(path, ln, "non-numeric attribute value") from None
        if not all(np.isfinite(row)):
            raise ParseError(path, ln, "non-finite attribute value")
        rows.append(row)
    if len(rows) != n:
        raise InconsistentNodeCount(
            f"{path}: header says {n} nodes, found {len(rows)} rows")
    return np.array(rows, dtype=np.float64).reshape(n, f)


def _read_edges(path, node_count):
    path = _require(Path(path))
    edges = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(path, ln, "expected '<u> <v>'")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(path, ln, "non-integer endpoint") from None
            if not (0 <= u < node_count and 0 <= v < node_count):
                raise IndexOutOfRange(
                    f"{path}:{ln}: endpoint outside [0, {node_count})")
            edges.append((u, v))
    return edges


def _read_labels(path, node_count):
    path = _require(Path(path))
    labels = np.zeros(node_count, dtype=np.int64)
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2 or parts[1] not in ("0", "1"):
                raise ParseError(path, ln, "expected '<node_id> <0|1>'")
            try:
                v = int(parts[0])
            except ValueError:
                raise ParseError(path, ln, "non-integer node id") from None
            if not 0 <= v < node_count:
                raise IndexOutOfRange(
                    f"{path}:{ln}: node {v} outside [0, {node_count})")
            labels[v] = int(parts[1])
    return labels


def load_multiplex(manifest_path):
    """Load a dataset from its manifest. See the module docstring for format."""
    manifest_path = _require(Path(manifest_path))
    base = manifest_path.parent
    node_count = None
    features_path = None
    labels_path = None
    relations = []  # (name, path) in manifest order
    with open(manifest_path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(manifest_path, ln, "expected key=value")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key == "nodes":
                try:
                    node_count = int(value)
                except ValueError:
                    raise ParseError(manifest_path, ln,
                                     "nodes must be an integer") from None
            elif key == "features":
                features_path = base / value
            elif key == "labels":
                labels_path = base / value
            elif key.startswith("relation."):
                name = key[len("relation."):]
                if not name:
                    raise ParseError(manifest_path, ln, "empty relation name")
                relations.append((name, base / value))
            else:
                raise ParseError(manifest_path, ln, f"unknown key '{key}'")
    if node_count is None or features_path is None or not relations:
        raise ParseError(manifest_path, 1,
                         "manifest needs nodes=, features=, and >=1 relation.*=")

    attributes = _read_features(features_path)
    if attributes.shape[0] != node_count:
        raise InconsistentNodeCount(
            f"manifest says {node_count} nodes, features file has "
            f"{attributes.shape[0]}")

    rels = []
    for rid, (name, path) in enumerate(relations):
        adj, e = build_adjacency(_read_edges(path, node_count), node_count,
                                 name=name)
        rels.append(RelationalSubgraph(rid, name, adj, e))

    labels = _read_labels(labels_path, node_count) if labels_path else None
    return MultiplexGraph(rels, attributes, labels)


def save_multiplex(g, out_dir, stem="graph"):
    """Write g to out_dir in manifest format; returns the manifest path.

    Attribute values are written with repr() so a reload is bit-identical.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    feat_name = f"{stem}.features"
    with open(out_dir / feat_name, "w") as fh:
        fh.write(f"{g.node_count} {g.feature_dim}\n")
        for row in g.attributes:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
    lines = [f"nodes={g.node_count}", f"features={feat_name}"]
    for rel in g.relations:
        edge_name = f"{stem}.{rel.name}.edges"
        with open(out_dir / edge_name, "w") as fh:
            fh.write(f"# relation {rel.name}\n")
            for u, v in rel.edge_array():
                fh.write(f"{u} {v}\n")
        lines.append(f"relation.{rel.name}={edge_name}")
    if g.labels is not None:
        label_name = f"{stem}.labels"
        with open(out_dir / label_name, "w") as fh:
            for v, y in enumerate(g.labels):
                fh.write(f"{v} {int(y)}\n")
        lines.append(f"labels={label_name}")
    manifest = out_dir / f"{stem}.manifest"
    with open(manifest, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest


def require_edges(g):
    """Raise EmptyRelation if any relation has no edges."""
    for rel in g.relations:
        if rel.edge_count == 0:
            raise EmptyRelation(f"relation {rel.name} has no edges")
