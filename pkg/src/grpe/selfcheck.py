"""Built-in verification suites: the oracles, runnable from the CLI.

Each suite compares an optimized or composite path against an independent
reference (naive double loop, Floyd-Warshall, a vanilla forward, residual
identities) and reports case counts plus the worst deviation observed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import graph as graphs
from .attention import grpe_scores_fast, grpe_scores_naive, grpe_values
from .encodings import init_tables, normalized_laplacian
from .linalg import jacobi_eigh
from .model import ModelConfig, build_model
from .synthetic import floyd_warshall, random_graph
from .tensor import softmax_lastdim

EQUIVALENCE_TOL = 1e-10
REDUCTION_TOL = 1e-12
EIGEN_TOL = 1e-8


@dataclass
class SuiteResult:
    name: str
    cases: int
    max_deviation: float
    threshold: float
    passed: bool
    note: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"suite {self.name}: cases={self.cases} "
                f"max_deviation={self.max_deviation:.3e} "
                f"threshold={self.threshold:.0e} {status}")


def _table_config(L, num_edge_types, d_z=16, heads=2):
    return ModelConfig(layers=1, d_z=d_z, ffn_dim=d_z, heads=heads, L=L,
                       num_edge_types=num_edge_types, node_vocab=4,
                       pe_mode="grpe")


def suite_equivalence(cases: int = 200, seed: int = 0) -> SuiteResult:
    """Fast score/value assembly vs the per-pair double loop."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for case in range(cases):
        n = int(rng.integers(2, 32))
        L = int(rng.choice([1, 3, 5]))
        e_types = int(rng.choice([1, 4]))
        cfg = _table_config(L, e_types)
        topology, edge, _, _ = init_tables(cfg, int(rng.integers(0, 2 ** 31)))
        g = graphs.attach_virtual_node(
            random_graph(rng, n, e_types, cfg.node_vocab, float(rng.uniform(0.1, 0.5))))
        t_idx = graphs.topology_indices(graphs.bfs_all_pairs(g), L, True)
        e_idx = graphs.edge_indices(g)
        m = g.num_nodes
        q = rng.normal(size=(m, cfg.d_z))
        k = rng.normal(size=(m, cfg.d_z))
        v = rng.normal(size=(m, cfg.d_z))
        s_fast = grpe_scores_fast(q, k, t_idx, e_idx, topology, edge, heads=cfg.heads)
        s_naive = grpe_scores_naive(q, k, t_idx, e_idx, topology, edge, heads=cfg.heads)
        worst = max(worst, float(np.abs(s_fast - s_naive).max()))
        attn = softmax_lastdim(rng.normal(size=(cfg.heads, m, m)))
        z_fast = grpe_values(attn, v, t_idx, e_idx, topology, edge, heads=cfg.heads, fast=True)
        z_naive = grpe_values(attn, v, t_idx, e_idx, topology, edge, heads=cfg.heads, fast=False)
        worst = max(worst, float(np.abs(z_fast - z_naive).max()))
    return SuiteResult("equivalence", cases, worst, EQUIVALENCE_TOL,
                       worst < EQUIVALENCE_TOL)


def suite_bfs(cases: int = 200, seed: int = 0) -> SuiteResult:
    """BFS all-pairs distances vs Floyd-Warshall, exact integer equality."""
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(cases):
        n = int(rng.integers(1, 21))
        g = random_graph(rng, n, 1, 4, float(rng.uniform(0.0, 0.4)))
        if rng.random() < 0.5:
            g = graphs.attach_virtual_node(g)
        mismatches += int((graphs.bfs_all_pairs(g) != floyd_warshall(g)).sum())
    return SuiteResult("bfs", cases, float(mismatches), 0.0, mismatches == 0,
                       note="deviation counts mismatched entries")


def suite_reduction(cases: int = 50, seed: int = 0) -> SuiteResult:
    """Zeroed encoding tables must make the full model a vanilla transformer."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for case in range(cases):
        model_seed = int(rng.integers(0, 2 ** 31))
        grpe_cfg = ModelConfig(layers=2, d_z=32, ffn_dim=32, heads=4, L=3,
                               num_edge_types=2, node_vocab=6, pe_mode="grpe",
                               seed=model_seed)
        plain_cfg = ModelConfig(**{**grpe_cfg.__dict__, "pe_mode": "none"})
        m_grpe = build_model(grpe_cfg)
        m_plain = build_model(plain_cfg)
        for tables in (m_grpe.topology, m_grpe.edge):
            for p in (tables.query, tables.key, tables.value):
                p.value.data[...] = 0.0
        n = int(rng.integers(2, 12))
        g = random_graph(rng, n, 2, 6, float(rng.uniform(0.1, 0.5)))
        sample = graphs.GraphSample(graph=g, target=0.0)
        pg = m_grpe.prepare(sample)
        pred_g, _, cache_g = m_grpe._run(pg)
        pred_p, _, cache_p = m_plain._run(m_plain.prepare(sample))
        worst = max(worst, float(np.abs(cache_g["x_final"] - cache_p["x_final"]).max()),
                    abs(pred_g - pred_p))
    return SuiteResult("reduction", cases, worst, REDUCTION_TOL, worst < REDUCTION_TOL)


def suite_eigensolver(cases: int = 50, seed: int = 0) -> SuiteResult:
    """Normalized-Laplacian eigenpairs: residual, range, orthonormality.

    Residual and orthonormality are bounded by 1e-8; eigenvalues must lie
    in [-1e-10, 2 + 1e-10]."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_range = 0.0
    for _ in range(cases):
        n = int(rng.integers(2, 16))
        g = random_graph(rng, n, 1, 4, float(rng.uniform(0.1, 0.6)))
        lap = normalized_laplacian(g)
        w, v = jacobi_eigh(lap)
        wv, vv = w.data, v.data
        residual = float(np.abs(lap @ vv - vv * wv[None, :]).max())
        ortho = float(np.abs(vv.T @ vv - np.eye(n)).max())
        worst = max(worst, residual, ortho)
        worst_range = max(worst_range, 0.0, float(-wv.min()), float(wv.max() - 2.0))
    passed = worst < EIGEN_TOL and worst_range < 1e-10
    return SuiteResult("eigensolver", cases, worst, EIGEN_TOL, passed,
                       note=f"eigenvalue range excess {worst_range:.3e} (bound 1e-10)")


def verify_targets(samples) -> SuiteResult:
    """Recompute dataset targets with a second brute-force pass.

    The generator derives targets from Floyd-Warshall; this check recounts
    them from BFS distances and raw degrees.
    """
    worst = 0.0
    for s in samples:
        g = s.graph
        if s.target is not None:
            d = graphs.bfs_all_pairs(g)
            iu = np.triu_indices(g.num_nodes, k=1)
            frac = float((d[iu] == 2).sum()) / len(iu[0])
            worst = max(worst, abs(s.target - frac))
        else:
            for deg, label in zip(g.degrees(), s.node_labels):
                want = 0 if deg <= 1 else (1 if deg <= 3 else 2)
                worst = max(worst, float(abs(label - want)))
    return SuiteResult("targets", len(samples), worst, 1e-12, worst < 1e-12,
                       note="re-derived from BFS distances and degrees")


SUITES = {
    "equivalence": suite_equivalence,
    "bfs": suite_bfs,
    "reduction": suite_reduction,
    "eigensolver": suite_eigensolver,
}


def run_suites(names=None, cases=None, seed: int = 0, inject_fault: bool = False):
    """Run the named suites (all by default); returns SuiteResult list."""
    selected = list(SUITES) if not names else list(names)
    results = []
    for name in selected:
        if name not in SUITES:
            raise ValueError(f"unknown suite {name!r}; available: {sorted(SUITES)}")
        fn = SUITES[name]
        results.append(fn(**({} if cases is None else {"cases": cases}), seed=seed))
    if inject_fault:
        results.append(SuiteResult("injected-fault", 1, 1.0, 0.0, False,
                                   note="synthetic failure for harness testing"))
    return results
