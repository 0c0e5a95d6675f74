"""Heterogeneous graph data model, dataset ingestion, and relation adjacencies.

On-disk dataset layout (one directory):

* ``manifest.json`` with ``node_types`` (name, count, feature_dim, feature_file),
  ``edge_types`` (name, src_type, dst_type, edge_file, undirected),
  ``target_type``, ``num_classes``, ``labels_file``, ``splits_file``.
* Feature files are CSV, one row per node in id order.
* Edge files are TSV rows ``src<TAB>dst`` of 0-based local ids.
* Labels/splits are TSV rows ``node_id<TAB>class`` and ``node_id<TAB>train|val|test``.

All files UTF-8 with LF newlines. Loaders fail with diagnostics that name the
offending file and line.

A relation is a typed path: an ordered list of edge-type steps, each optionally
reversed. Its adjacency A has A[j, k] = 1 iff at least one path instance
matching the step sequence connects source node k to target node j. Multi-edges
collapse to one boolean entry. Composed multi-step relations may contain
diagonal entries (a path can return to its start node); single-step relations
cannot.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLIT_NAMES = ("train", "val", "test")


class DatasetFormatError(ValueError):
    """A dataset directory violates the on-disk format."""


@dataclass(frozen=True)
class EdgeType:
    name: str
    src_type: int
    dst_type: int
    undirected: bool = False


@dataclass(frozen=True)
class RelationStep:
    edge_type: int
    reverse: bool = False


@dataclass(frozen=True)
class Relation:
    """A named typed path; direction runs from source nodes to target nodes."""

    name: str
    steps: tuple[RelationStep, ...]

    def __post_init__(self):
        if not self.steps:
            raise ValueError(f"relation {self.name!r} has an empty step list")


@dataclass
class RelationGroup:
    """A non-empty set of relations that all terminate at the target type."""

    name: str
    relations: list[Relation]

    def __post_init__(self):
        if not self.relations:
            raise ValueError(f"relation group {self.name!r} is empty")


@dataclass
class HeterogeneousGraph:
    node_type_names: list[str]
    node_counts: list[int]
    edge_types: list[EdgeType]
    features: list[np.ndarray]          # per node type, (count, dim) float64
    edges: list[np.ndarray]             # per edge type, (E, 2) int64 [src, dst]
    target_type: int
    num_classes: int
    labels: np.ndarray                  # (n_targets,) int64
    splits: np.ndarray                  # (n_targets,) int8 into SPLIT_NAMES

    def node_type_id(self, name: str) -> int:
        try:
            return self.node_type_names.index(name)
        except ValueError:
            raise KeyError(f"unknown node type {name!r}") from None

    def edge_type_id(self, name: str) -> int:
        for i, et in enumerate(self.edge_types):
            if et.name == name:
                return i
        raise KeyError(f"unknown edge type {name!r}")

    @property
    def n_targets(self) -> int:
        return self.node_counts[self.target_type]

    def split_ids(self, split: str) -> np.ndarray:
        code = SPLIT_NAMES.index(split)
        return np.flatnonzero(self.splits == code).astype(np.int64)


# ---------------------------------------------------------------------------
# Sparse adjacency carriers (CSR; receivers on rows, senders on columns)

@dataclass
class RelationAdjacency:
    """Boolean CSR pattern. Column indices are sorted and unique per row."""

    n_rows: int
    n_cols: int
    indptr: np.ndarray
    indices: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    def row(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n_rows, self.n_cols), dtype=np.float64)
        for i in range(self.n_rows):
            out[i, self.row(i)] = 1.0
        return out


@dataclass
class NormalizedAdjacency:
    """CSR with float64 values; each non-empty row holds 1/degree entries."""

    n_rows: int
    n_cols: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    _transpose: "NormalizedAdjacency | None" = field(default=None, repr=False)

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    def row(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n_rows, self.n_cols), dtype=np.float64)
        for i in range(self.n_rows):
            s, e = self.indptr[i], self.indptr[i + 1]
            out[i, self.indices[s:e]] = self.values[s:e]
        return out

    def transposed(self) -> "NormalizedAdjacency":
        """Column-major view as a CSR over the transposed shape (cached)."""
        if self._transpose is None:
            order = np.argsort(self.indices, kind="stable")
            counts = np.bincount(self.indices, minlength=self.n_cols)
            indptr = np.zeros(self.n_cols + 1, dtype=np.int64)
            np.cumsum(counts, out=indptr[1:])
            rows = np.repeat(
                np.arange(self.n_rows, dtype=np.int64), np.diff(self.indptr)
            )
            self._transpose = NormalizedAdjacency(
                n_rows=self.n_cols,
                n_cols=self.n_rows,
                indptr=indptr,
                indices=rows[order],
                values=self.values[order],
            )
        return self._transpose


def _empty_csr(n_rows: int, n_cols: int) -> RelationAdjacency:
    return RelationAdjacency(
        n_rows, n_cols,
        np.zeros(n_rows + 1, dtype=np.int64),
        np.zeros(0, dtype=np.int64),
    )


def _csr_from_pairs(rows: np.ndarray, cols: np.ndarray, n_rows: int,
                    n_cols: int) -> RelationAdjacency:
    """Build a deduplicated boolean CSR from (row, col) index pairs."""
    if rows.size == 0:
        return _empty_csr(n_rows, n_cols)
    packed = rows.astype(np.int64) * np.int64(n_cols) + cols.astype(np.int64)
    packed = np.unique(packed)
    r = packed // n_cols
    c = packed % n_cols
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(r, minlength=n_rows), out=indptr[1:])
    return RelationAdjacency(n_rows, n_cols, indptr, c.astype(np.int64))


def step_adjacency(graph: HeterogeneousGraph, step: RelationStep) -> RelationAdjacency:
    """Boolean matrix of one path step; rows receive, columns send.

    Forward traversal of edge type (s -> t) maps s-senders to t-receivers.
    Same-type undirected edge lists are symmetrized; for cross-type edge
    types the undirected flag is informational (use reverse steps).
    """
    et = graph.edge_types[step.edge_type]
    edges = graph.edges[step.edge_type]
    src, dst = edges[:, 0], edges[:, 1]
    if et.undirected and et.src_type == et.dst_type:
        src = np.concatenate([src, dst])
        dst = np.concatenate([dst, edges[:, 0]])
    if step.reverse:
        rows, cols = src, dst
        n_rows, n_cols = graph.node_counts[et.src_type], graph.node_counts[et.dst_type]
    else:
        rows, cols = dst, src
        n_rows, n_cols = graph.node_counts[et.dst_type], graph.node_counts[et.src_type]
    return _csr_from_pairs(rows, cols, n_rows, n_cols)


def step_endpoints(graph: HeterogeneousGraph, step: RelationStep) -> tuple[int, int]:
    et = graph.edge_types[step.edge_type]
    return (et.dst_type, et.src_type) if step.reverse else (et.src_type, et.dst_type)


def relation_endpoints(graph: HeterogeneousGraph, rel: Relation) -> tuple[int, int]:
    """(src_type, dst_type) of the whole path; raises on incompatible steps."""
    src0, prev_out = step_endpoints(graph, rel.steps[0])
    for k, step in enumerate(rel.steps[1:], start=1):
        s_in, s_out = step_endpoints(graph, step)
        if s_in != prev_out:
            raise ValueError(
                f"relation {rel.name!r}: step {k} expects source type "
                f"{graph.node_type_names[s_in]!r} but the previous step "
                f"produces {graph.node_type_names[prev_out]!r}"
            )
        prev_out = s_out
    return src0, prev_out


def boolean_product(a: RelationAdjacency, b: RelationAdjacency) -> RelationAdjacency:
    """Pattern of a @ b: row i collects the union of b-rows of a's columns."""
    if a.n_cols != b.n_rows:
        raise ValueError(f"shape mismatch in boolean product: {a.n_cols} vs {b.n_rows}")
    indptr = np.zeros(a.n_rows + 1, dtype=np.int64)
    chunks = []
    for i in range(a.n_rows):
        mids = a.row(i)
        if mids.size == 0:
            indptr[i + 1] = indptr[i]
            continue
        parts = [b.row(m) for m in mids]
        cols = np.unique(np.concatenate(parts)) if parts else np.zeros(0, np.int64)
        chunks.append(cols)
        indptr[i + 1] = indptr[i] + cols.size
    indices = np.concatenate(chunks) if chunks else np.zeros(0, np.int64)
    return RelationAdjacency(a.n_rows, b.n_cols, indptr, indices.astype(np.int64))


def gen_relation_adjacency(graph: HeterogeneousGraph, rel: Relation) -> RelationAdjacency:
    """Compose the relation's steps into one boolean adjacency.

    A path step sequence [s1, ..., sp] from sources to targets composes as
    M(sp) @ ... @ M(s1); the result has target receivers on rows.
    """
    relation_endpoints(graph, rel)  # validates type compatibility
    acc = step_adjacency(graph, rel.steps[0])
    for step in rel.steps[1:]:
        acc = boolean_product(step_adjacency(graph, step), acc)
    return acc


def normalize_adjacency(adj: RelationAdjacency) -> NormalizedAdjacency:
    """Row-normalize: each of a row's entries becomes 1/degree; empty rows stay empty."""
    deg = np.diff(adj.indptr).astype(np.float64)
    values = np.repeat(np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0), np.diff(adj.indptr))
    return NormalizedAdjacency(
        adj.n_rows, adj.n_cols, adj.indptr.copy(), adj.indices.copy(), values
    )


# ---------------------------------------------------------------------------
# Ingestion

def _read_lines(path: Path) -> list[str]:
    if not path.is_file():
        raise DatasetFormatError(f"{path}: missing file")
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def _load_features(path: Path, count: int, dim: int) -> np.ndarray:
    lines = _read_lines(path)
    if len(lines) != count:
        raise DatasetFormatError(
            f"{path}:{len(lines)}: expected {count} feature rows, found {len(lines)}"
        )
    out = np.empty((count, dim), dtype=np.float64)
    for i, line in enumerate(lines):
        parts = line.split(",")
        if len(parts) != dim:
            raise DatasetFormatError(
                f"{path}:{i + 1}: feature-dim mismatch, expected {dim} columns, "
                f"found {len(parts)}"
            )
        try:
            out[i, :] = [float(p) for p in parts]
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{i + 1}: {exc}") from None
    return out


def _load_edges(path: Path, n_src: int, n_dst: int) -> np.ndarray:
    lines = _read_lines(path)
    out = np.empty((len(lines), 2), dtype=np.int64)
    for i, line in enumerate(lines):
        parts = line.split("\t")
        if len(parts) != 2:
            raise DatasetFormatError(
                f"{path}:{i + 1}: expected 'src<TAB>dst', found {line!r}"
            )
        try:
            s, d = int(parts[0]), int(parts[1])
        except ValueError:
            raise DatasetFormatError(f"{path}:{i + 1}: non-integer node id") from None
        if not (0 <= s < n_src):
            raise DatasetFormatError(
                f"{path}:{i + 1}: source id {s} out of range [0, {n_src})"
            )
        if not (0 <= d < n_dst):
            raise DatasetFormatError(
                f"{path}:{i + 1}: destination id {d} out of range [0, {n_dst})"
            )
        out[i, 0], out[i, 1] = s, d
    return out


def _load_id_column(path: Path, n_targets: int, parse, what: str) -> np.ndarray:
    values = np.full(n_targets, -1, dtype=np.int64)
    for i, line in enumerate(_read_lines(path)):
        parts = line.split("\t")
        if len(parts) != 2:
            raise DatasetFormatError(f"{path}:{i + 1}: expected 'node_id<TAB>{what}'")
        try:
            nid = int(parts[0])
        except ValueError:
            raise DatasetFormatError(f"{path}:{i + 1}: non-integer node id") from None
        if not (0 <= nid < n_targets):
            raise DatasetFormatError(
                f"{path}:{i + 1}: target id {nid} out of range [0, {n_targets})"
            )
        if values[nid] != -1:
            raise DatasetFormatError(f"{path}:{i + 1}: duplicate entry for node {nid}")
        values[nid] = parse(parts[1], f"{path}:{i + 1}")
    return values


def load_dataset(directory: str | Path) -> HeterogeneousGraph:
    """Load and fully validate a dataset directory.

    Raises DatasetFormatError with a file:line diagnostic on the first
    structural problem found.
    """
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetFormatError(f"{manifest_path}: missing file")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{manifest_path}:{exc.lineno}: invalid JSON ({exc.msg})")

    for key in ("node_types", "edge_types", "target_type", "num_classes",
                "labels_file", "splits_file"):
        if key not in manifest:
            raise DatasetFormatError(f"{manifest_path}: missing manifest key {key!r}")

    type_names, counts, features = [], [], []
    for entry in manifest["node_types"]:
        for key in ("name", "count", "feature_dim", "feature_file"):
            if key not in entry:
                raise DatasetFormatError(
                    f"{manifest_path}: node type entry missing key {key!r}"
                )
        if entry["name"] in type_names:
            raise DatasetFormatError(
                f"{manifest_path}: duplicate node type {entry['name']!r}"
            )
        if int(entry["count"]) <= 0 or int(entry["feature_dim"]) <= 0:
            raise DatasetFormatError(
                f"{manifest_path}: node type {entry['name']!r} needs positive "
                f"count and feature_dim"
            )
        type_names.append(entry["name"])
        counts.append(int(entry["count"]))
        features.append(
            _load_features(directory / entry["feature_file"], counts[-1],
                           int(entry["feature_dim"]))
        )

    def type_id(name: str) -> int:
        if name not in type_names:
            raise DatasetFormatError(f"{manifest_path}: unknown node type {name!r}")
        return type_names.index(name)

    edge_types, edge_lists = [], []
    for entry in manifest["edge_types"]:
        for key in ("name", "src_type", "dst_type", "edge_file"):
            if key not in entry:
                raise DatasetFormatError(
                    f"{manifest_path}: edge type entry missing key {key!r}"
                )
        st, dt = type_id(entry["src_type"]), type_id(entry["dst_type"])
        edge_types.append(
            EdgeType(entry["name"], st, dt, bool(entry.get("undirected", False)))
        )
        edge_lists.append(
            _load_edges(directory / entry["edge_file"], counts[st], counts[dt])
        )

    target = type_id(manifest["target_type"])
    num_classes = int(manifest["num_classes"])
    if num_classes < 2:
        raise DatasetFormatError(f"{manifest_path}: num_classes must be >= 2")
    n_targets = counts[target]

    def parse_label(text: str, where: str) -> int:
        try:
            return int(text)
        except ValueError:
            raise DatasetFormatError(f"{where}: non-integer class label") from None

    def parse_split(text: str, where: str) -> int:
        if text not in SPLIT_NAMES:
            raise DatasetFormatError(f"{where}: unknown split tag {text!r}")
        return SPLIT_NAMES.index(text)

    labels_path = directory / manifest["labels_file"]
    splits_path = directory / manifest["splits_file"]
    labels = _load_id_column(labels_path, n_targets, parse_label, "class")
    splits = _load_id_column(splits_path, n_targets, parse_split, "split")

    missing_split = np.flatnonzero(splits == -1)
    if missing_split.size:
        raise DatasetFormatError(
            f"{splits_path}: target node {int(missing_split[0])} has no split tag"
        )
    missing_label = np.flatnonzero(labels == -1)
    if missing_label.size:
        raise DatasetFormatError(
            f"{labels_path}: target node {int(missing_label[0])} has no label"
        )

    graph = HeterogeneousGraph(
        node_type_names=type_names,
        node_counts=counts,
        edge_types=edge_types,
        features=features,
        edges=edge_lists,
        target_type=target,
        num_classes=num_classes,
        labels=labels,
        splits=splits.astype(np.int8),
    )
    problems = validate_graph(graph)
    if problems:
        raise DatasetFormatError("; ".join(problems))
    return graph


def save_dataset(graph: HeterogeneousGraph, directory: str | Path) -> None:
    """Write the on-disk layout; load_dataset(save_dataset(g)) round-trips exactly."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    node_types = []
    for t, name in enumerate(graph.node_type_names):
        fname = f"features_{name}.csv"
        node_types.append({
            "name": name,
            "count": graph.node_counts[t],
            "feature_dim": int(graph.features[t].shape[1]),
            "feature_file": fname,
        })
        rows = [",".join(repr(float(v)) for v in row) for row in graph.features[t]]
        (directory / fname).write_text("\n".join(rows) + "\n", encoding="utf-8")
    edge_types = []
    for e, et in enumerate(graph.edge_types):
        fname = f"edges_{et.name}.tsv"
        edge_types.append({
            "name": et.name,
            "src_type": graph.node_type_names[et.src_type],
            "dst_type": graph.node_type_names[et.dst_type],
            "edge_file": fname,
            "undirected": et.undirected,
        })
        rows = [f"{int(s)}\t{int(d)}" for s, d in graph.edges[e]]
        (directory / fname).write_text(
            ("\n".join(rows) + "\n") if rows else "", encoding="utf-8"
        )
    manifest = {
        "node_types": node_types,
        "edge_types": edge_types,
        "target_type": graph.node_type_names[graph.target_type],
        "num_classes": graph.num_classes,
        "labels_file": "labels.tsv",
        "splits_file": "splits.tsv",
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (directory / "labels.tsv").write_text(
        "\n".join(f"{i}\t{int(c)}" for i, c in enumerate(graph.labels)) + "\n",
        encoding="utf-8",
    )
    (directory / "splits.tsv").write_text(
        "\n".join(
            f"{i}\t{SPLIT_NAMES[s]}" for i, s in enumerate(graph.splits)
        ) + "\n",
        encoding="utf-8",
    )


def validate_graph(graph: HeterogeneousGraph) -> list[str]:
    """Structural diagnostics on an in-memory graph; empty list means valid."""
    problems: list[str] = []
    for t, name in enumerate(graph.node_type_names):
        feats = graph.features[t]
        if feats.shape[0] != graph.node_counts[t]:
            problems.append(
                f"node type {name!r}: {feats.shape[0]} feature rows for "
                f"{graph.node_counts[t]} nodes"
            )
        if not np.isfinite(feats).all():
            bad = np.argwhere(~np.isfinite(feats))[0]
            problems.append(
                f"node type {name!r}: non-finite feature at node {int(bad[0])}, "
                f"column {int(bad[1])}"
            )
    for e, et in enumerate(graph.edge_types):
        edges = graph.edges[e]
        if edges.size:
            if edges[:, 0].min() < 0 or edges[:, 0].max() >= graph.node_counts[et.src_type]:
                problems.append(f"edge type {et.name!r}: source id out of range")
            if edges[:, 1].min() < 0 or edges[:, 1].max() >= graph.node_counts[et.dst_type]:
                problems.append(f"edge type {et.name!r}: destination id out of range")
    n_targets = graph.n_targets
    if graph.labels.shape[0] != n_targets:
        problems.append("labels array does not cover the target type")
    else:
        bad = np.flatnonzero((graph.labels < 0) | (graph.labels >= graph.num_classes))
        if bad.size:
            problems.append(
                f"label {int(graph.labels[bad[0]])} out of range [0, "
                f"{graph.num_classes}) at target node {int(bad[0])}"
            )
    if graph.splits.shape[0] != n_targets:
        problems.append("splits array does not cover the target type")
    else:
        bad = np.flatnonzero((graph.splits < 0) | (graph.splits > 2))
        if bad.size:
            problems.append(f"target node {int(bad[0])} has no valid split tag")
    return problems
