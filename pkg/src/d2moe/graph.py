"""Graphs: synthetic block-model generation, text-file IO, and split management.

A Graph is immutable after construction. Topology is kept three ways: the raw
undirected edge list (canonical i<j, deduplicated, no self-edges), a
symmetrically normalized adjacency with self-loops for convolution experts,
and a row-stochastic mean aggregator (self-loop included in the neighborhood)
for mean-aggregation experts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

EDGES_FILE = "edges.tsv"
FEATURES_FILE = "features.csv"
LABELS_FILE = "labels.txt"
MASKS_FILE = "masks.txt"

_MASK_TOKENS = ("train", "val", "test", "none")


class GraphFormatError(ValueError):
    """A graph file failed to parse; carries path and 1-based line number."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


@dataclass(frozen=True)
class SbmSpec:
    """Stochastic block model: C balanced classes over n nodes, intra-class
    edge probability p_in, inter-class p_out, and class-mean feature vectors
    on a sphere of radius ``signal`` with unit Gaussian noise."""

    n: int
    classes: int
    dim: int
    p_in: float
    p_out: float
    signal: float
    seed: int

    def validate(self) -> None:
        if self.n <= 0:
            raise ValueError(f"need at least one node, got n={self.n}")
        if self.classes < 2 or self.n < self.classes:
            raise ValueError(f"need n >= classes >= 2, got n={self.n}, classes={self.classes}")
        if self.dim < 1:
            raise ValueError("feature dimension must be positive")
        for name, p in (("p_in", self.p_in), ("p_out", self.p_out)):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")


@dataclass(frozen=True)
class Graph:
    n: int
    n_classes: int
    features: np.ndarray     # (n, d) float64
    labels: np.ndarray       # (n,) int64 in [0, n_classes)
    raw_edges: np.ndarray    # (E, 2) int64, i < j, unique, sorted
    adj: sp.csr_array        # D^{-1/2} (A+I) D^{-1/2}; exactly symmetric
    adj_t: sp.csr_array
    mean_adj: sp.csr_array   # D^{-1} (A+I)
    mean_adj_t: sp.csr_array
    train_mask: np.ndarray   # (n,) bool, pairwise disjoint with val/test
    val_mask: np.ndarray
    test_mask: np.ndarray

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def mask_idx(self, split: str) -> np.ndarray:
        return np.flatnonzero(getattr(self, f"{split}_mask"))


def _canonical_edges(edges: np.ndarray, n: int) -> np.ndarray:
    """Undirected canonical form: sorted unique (min, max) pairs, self-edges
    dropped (the normalization adds the diagonal itself)."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise ValueError(f"edge endpoint out of range [0, {n})")
    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    keep = lo != hi
    pairs = np.unique(np.stack([lo[keep], hi[keep]], axis=1), axis=0)
    return pairs


def _normalized_adjacencies(edges: np.ndarray, n: int):
    """Build both normalized operators from the canonical edge list. The
    symmetric one stores the value d_i*d_j per entry, which is bitwise
    symmetric, so its transpose is itself."""
    src = np.concatenate([edges[:, 0], edges[:, 1], np.arange(n)])
    dst = np.concatenate([edges[:, 1], edges[:, 0], np.arange(n)])
    ones = np.ones(src.size, dtype=np.float64)
    a_tilde = sp.csr_array(sp.coo_array((ones, (src, dst)), shape=(n, n)))
    deg = np.asarray(a_tilde.sum(axis=1)).reshape(-1)  # >= 1 by the self-loop
    dinv_sqrt = 1.0 / np.sqrt(deg)
    sym = sp.csr_array(
        sp.coo_array((dinv_sqrt[src] * dinv_sqrt[dst], (src, dst)), shape=(n, n)))
    mean = sp.csr_array(
        sp.coo_array((1.0 / deg[src], (src, dst)), shape=(n, n)))
    mean_t = sp.csr_array(mean.T)
    return sym, mean, mean_t


def build_graph(edges, features, labels, n_classes: int | None = None,
                masks: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None) -> Graph:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = features.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"feature rows ({n}) and label count ({labels.shape[0]}) differ")
    if not np.all(np.isfinite(features)):
        raise ValueError("features contain non-finite values")
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if n else 0
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    pairs = _canonical_edges(edges, n)
    sym, mean, mean_t = _normalized_adjacencies(pairs, n)
    if masks is None:
        zeros = np.zeros(n, dtype=bool)
        masks = (zeros, zeros.copy(), zeros.copy())
    train, val, test = (np.asarray(m, dtype=bool) for m in masks)
    if (train & val).any() or (train & test).any() or (val & test).any():
        raise ValueError("train/val/test masks overlap")
    return Graph(n=n, n_classes=n_classes, features=features, labels=labels,
                 raw_edges=pairs, adj=sym, adj_t=sym, mean_adj=mean, mean_adj_t=mean_t,
                 train_mask=train, val_mask=val, test_mask=test)


def generate_sbm(spec: SbmSpec) -> Graph:
    """Sample a block-model graph. Deterministic per spec.seed; draw order is
    labels, then edges, then class means, then feature noise."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    labels = rng.permutation(np.arange(spec.n) % spec.classes)

    same = labels[:, None] == labels[None, :]
    prob = np.where(same, spec.p_in, spec.p_out)
    draw = rng.random((spec.n, spec.n))
    upper = np.triu(np.ones((spec.n, spec.n), dtype=bool), k=1)
    src, dst = np.nonzero(upper & (draw < prob))
    edges = np.stack([src, dst], axis=1)

    means = rng.standard_normal((spec.classes, spec.dim))
    means *= spec.signal / np.linalg.norm(means, axis=1, keepdims=True)
    features = means[labels] + rng.standard_normal((spec.n, spec.dim))
    return build_graph(edges, features, labels, n_classes=spec.classes)


def split_nodes(g: Graph, fractions: tuple[float, float, float], seed: int) -> Graph:
    """Stratified-by-class random masks. Within each class the split sizes
    follow cumulative rounding of the fractions; any remainder (fractions
    summing below 1) stays unassigned."""
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(f < 0 for f in fr):
        raise ValueError(f"need three nonnegative fractions, got {fractions}")
    if sum(fr) > 1.0 + 1e-9:
        raise ValueError(f"fractions sum to {sum(fr)} > 1")
    rng = np.random.default_rng(seed)
    masks = [np.zeros(g.n, dtype=bool) for _ in range(3)]
    n_slots = sum(1 for f in fr if f > 0)
    for c in range(g.n_classes):
        members = np.flatnonzero(g.labels == c)
        if members.size < n_slots:
            log.warning("class %d has %d nodes for %d split slots; proportional fallback",
                        c, members.size, n_slots)
        order = rng.permutation(members)
        bounds = [int(round(sum(fr[: k + 1]) * members.size)) for k in range(3)]
        lo = 0
        for mask, hi in zip(masks, bounds):
            mask[order[lo:hi]] = True
            lo = hi
    return replace(g, train_mask=masks[0], val_mask=masks[1], test_mask=masks[2])


def edge_homophily(g: Graph) -> float:
    """Fraction of undirected edges whose endpoints share a label."""
    if g.raw_edges.shape[0] == 0:
        return 1.0
    same = g.labels[g.raw_edges[:, 0]] == g.labels[g.raw_edges[:, 1]]
    return float(same.mean())


# ---- text formats --------------------------------------------------------


def write_graph(g: Graph, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / EDGES_FILE, "w", encoding="utf-8") as fh:
        fh.write("# src<TAB>dst, 0-based, undirected\n")
        for a, b in g.raw_edges:
            fh.write(f"{a}\t{b}\n")
    with open(out / FEATURES_FILE, "w", encoding="utf-8") as fh:
        for row in g.features:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    with open(out / LABELS_FILE, "w", encoding="utf-8") as fh:
        for y in g.labels:
            fh.write(f"{y}\n")
    names = np.full(g.n, "none", dtype=object)
    names[g.train_mask] = "train"
    names[g.val_mask] = "val"
    names[g.test_mask] = "test"
    with open(out / MASKS_FILE, "w", encoding="utf-8") as fh:
        for token in names:
            fh.write(f"{token}\n")


def _parse_edges(path, n) -> np.ndarray:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split("\t")
            if len(parts) != 2:
                raise GraphFormatError(path, line_no, f"expected 'src<TAB>dst', got {text!r}")
            try:
                a, b = int(parts[0]), int(parts[1])
            except ValueError:
                raise GraphFormatError(path, line_no, f"non-integer endpoint in {text!r}") from None
            if not (0 <= a < n and 0 <= b < n):
                raise GraphFormatError(path, line_no, f"node index out of range [0, {n})")
            pairs.append((a, b))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def _parse_features(path) -> np.ndarray:
    rows = []
    width = None
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            parts = text.split(",")
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise GraphFormatError(path, line_no,
                                       f"expected {width} columns, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise GraphFormatError(path, line_no, f"non-numeric value in {text!r}") from None
    return np.asarray(rows, dtype=np.float64)


def _parse_labels(path) -> np.ndarray:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                out.append(int(text))
            except ValueError:
                raise GraphFormatError(path, line_no, f"non-integer label {text!r}") from None
    return np.asarray(out, dtype=np.int64)


def _parse_masks(path, n) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tokens = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            if text not in _MASK_TOKENS:
                raise GraphFormatError(path, line_no,
                                       f"mask token must be one of {_MASK_TOKENS}, got {text!r}")
            tokens.append(text)
    if len(tokens) != n:
        raise GraphFormatError(path, len(tokens) + 1,
                               f"expected {n} mask lines, got {len(tokens)}")
    arr = np.asarray(tokens, dtype=object)
    return tuple(arr == name for name in ("train", "val", "test"))


def load_graph(edges_path, features_path, labels_path, masks_path=None) -> Graph:
    features = _parse_features(features_path)
    labels = _parse_labels(labels_path)
    if features.shape[0] != labels.shape[0]:
        raise GraphFormatError(labels_path, labels.shape[0],
                               f"feature rows ({features.shape[0]}) and label count "
                               f"({labels.shape[0]}) differ")
    n = features.shape[0]
    edges = _parse_edges(edges_path, n)
    masks = _parse_masks(masks_path, n) if masks_path is not None else None
    return build_graph(edges, features, labels, masks=masks)


def load_graph_dir(graph_dir) -> Graph:
    d = Path(graph_dir)
    masks = d / MASKS_FILE
    return load_graph(d / EDGES_FILE, d / FEATURES_FILE, d / LABELS_FILE,
                      masks if masks.exists() else None)
