"""Goal scoring for Voronoi nodes.

Each unvisited candidate gets a weighted sum of four terms: how much of its
panorama is still invisible, how much unseen hull volume it overlooks (both
max-normalized over the current candidate set), whether it is unvisited, and
whether it sits within the agent's horizon (same subregion or close by graph
distance). Ties go to the node nearer the agent along the graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .voronoi import VoronoiGraph


@dataclass
class ScoreWeights:
    w_o: float = 20.0
    w_c: float = 10.0
    w_u: float = 10.0
    w_h: float = 10.0


@dataclass
class NodeScore:
    s_o: float = 0.0
    s_c: float = 0.0
    s_u: float = 0.0
    s_h: float = 0.0
    total: float = 0.0

    @staticmethod
    def combine(s_o, s_c, s_u, s_h, w: ScoreWeights) -> "NodeScore":
        total = w.w_o * s_o + w.w_c * s_c + w.w_u * s_u + w.w_h * s_h
        return NodeScore(s_o=s_o, s_c=s_c, s_u=s_u, s_h=s_h, total=total)


def score_nodes(
    graph: VoronoiGraph,
    lowvis_fractions: dict[int, float],
    hull_volumes: dict[int, float],
    agent_subregion: int,
    graph_dists: dict[int, float],
    weights: ScoreWeights | None = None,
    horizon: float = 3.0,
) -> VoronoiGraph:
    """Fill node.score/node.score_parts for every node; candidates are the
    unvisited nodes present in `lowvis_fractions`. With no candidates every
    score is zero, which callers read as exploration complete."""
    weights = weights or ScoreWeights()
    candidates = [n for n in graph.nodes if not n.visited and n.id in lowvis_fractions]
    max_o = max((lowvis_fractions[n.id] for n in candidates), default=0.0)
    max_c = max((hull_volumes.get(n.id, 0.0) for n in candidates), default=0.0)
    cand_ids = {n.id for n in candidates}
    for node in graph.nodes:
        if node.id not in cand_ids:
            node.score = 0.0
            node.score_parts = {}
            continue
        s_o = lowvis_fractions[node.id] / max_o if max_o > 0 else 0.0
        s_c = hull_volumes.get(node.id, 0.0) / max_c if max_c > 0 else 0.0
        s_u = 1.0  # candidates are unvisited by construction
        in_horizon = (
            (agent_subregion >= 0 and node.subregion == agent_subregion)
            or graph_dists.get(node.id, np.inf) <= horizon
        )
        s_h = 1.0 if in_horizon else 0.0
        sc = NodeScore.combine(s_o, s_c, s_u, s_h, weights)
        node.score = sc.total
        node.score_parts = {"s_o": s_o, "s_c": s_c, "s_u": s_u, "s_h": s_h}
    return graph


def select_best(graph: VoronoiGraph, graph_dists: dict[int, float]):
    """Highest-scoring node; equal scores resolve to the nearer node."""
    best = None
    for node in graph.nodes:
        if node.score <= 0.0:
            continue
        d = graph_dists.get(node.id, np.inf)
        if best is None:
            best = (node, d)
            continue
        if node.score > best[0].score + 1e-12:
            best = (node, d)
        elif abs(node.score - best[0].score) <= 1e-12 and d < best[1]:
            best = (node, d)
    return best[0] if best else None
