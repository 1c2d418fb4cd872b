"""Synthetic task generators with brute-force targets.

Two desk-scale tasks:

* ``spd2_fraction``: graph regression, target is the fraction of unordered
  node pairs whose shortest-path distance is exactly 2. Solvable only with
  multi-hop structure, which is what the encodings provide.
* ``degree_class``: node classification, degree bucketed into 3 classes.

Targets are computed by Floyd-Warshall / direct counting at generation
time, independently of the BFS path used by the model pipeline.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .graph import UNREACHABLE, Graph, GraphSample

TASK_KINDS = ("spd2_fraction", "degree_class")

# degree buckets: 0-1 -> class 0, 2-3 -> class 1, 4+ -> class 2
DEGREE_CLASS_EDGES = (1, 3)
NUM_DEGREE_CLASSES = 3


def floyd_warshall(g: Graph) -> np.ndarray:
    """All-pairs shortest paths by relaxation over real nodes.

    Independent of the BFS implementation on purpose; the two are checked
    against each other. Virtual-node rows (if any) stay UNREACHABLE.
    """
    n = g.num_nodes
    big = n + 1  # larger than any finite path length
    d = np.full((n, n), big, dtype=np.int64)
    np.fill_diagonal(d, 0)
    for i, j, _ in g.edges:
        d[i, j] = 1
        d[j, i] = 1
    start = 1 if g.has_virtual_node else 0
    for k in range(start, n):
        d = np.minimum(d, d[:, k][:, None] + d[k, :][None, :])
    if g.has_virtual_node:
        d[0, 1:] = big
        d[1:, 0] = big
    out = np.where(d >= big, UNREACHABLE, d)
    return out.astype(np.int64)


def spd2_fraction(g: Graph) -> float:
    """Fraction of unordered real-node pairs at distance exactly 2."""
    if g.num_real_nodes < 2:
        raise ValueError("spd2_fraction needs at least 2 nodes")
    d = floyd_warshall(g)
    off = 1 if g.has_virtual_node else 0
    sub = d[off:, off:]
    iu = np.triu_indices(sub.shape[0], k=1)
    hits = int((sub[iu] == 2).sum())
    return hits / len(iu[0])


def degree_classes(g: Graph) -> list:
    """Per-node class from real-edge degree."""
    lo, hi = DEGREE_CLASS_EDGES
    out = []
    for idx, deg in enumerate(g.degrees()):
        if g.has_virtual_node and idx == 0:
            continue
        out.append(0 if deg <= lo else (1 if deg <= hi else 2))
    return out


def random_graph(rng, num_nodes: int, num_edge_types: int, node_vocab: int,
                 edge_prob: float) -> Graph:
    """Erdos-Renyi graph with uniform random node and edge types."""
    types = rng.integers(0, node_vocab, size=num_nodes).tolist()
    edges = []
    for i in range(num_nodes):
        for j in range(i + 1, num_nodes):
            if rng.random() < edge_prob:
                edges.append((i, j, int(rng.integers(0, max(num_edge_types, 1)))))
    return Graph(node_types=types, edges=edges, num_edge_types=max(num_edge_types, 1))


def make_synthetic(task_kind: str, n_graphs: int, size_range, seed: int,
                   num_edge_types: int = 4, node_vocab: int = 8,
                   edge_prob_range=(0.15, 0.45)) -> list:
    """Generate a dataset of random graphs with brute-force targets."""
    if task_kind not in TASK_KINDS:
        raise ConfigError(f"task_kind must be one of {TASK_KINDS}, got {task_kind!r}")
    lo, hi = size_range
    if lo > hi or lo < 2:
        raise ConfigError(f"degenerate size_range {size_range!r}; need 2 <= lo <= hi")
    if n_graphs < 0:
        raise ConfigError("n_graphs must be >= 0")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n_graphs):
        n = int(rng.integers(lo, hi + 1))
        p = float(rng.uniform(*edge_prob_range))
        g = random_graph(rng, n, num_edge_types, node_vocab, p)
        if task_kind == "spd2_fraction":
            samples.append(GraphSample(graph=g, target=spd2_fraction(g)))
        else:
            samples.append(GraphSample(graph=g, node_labels=degree_classes(g)))
    return samples
