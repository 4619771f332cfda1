"""Generalized Voronoi graph over the free-space occupancy grid.

The skeleton comes from a topology-preserving medial-axis thinning of the
Free region (Unknown counts as obstacle so the graph stays inside observed
space). Corner spurs are pruned by comparing branch length against the local
clearance, junction pixel clusters collapse to single nodes, and remaining
degree-2 chains become edges carrying their polyline and arc length.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve, label
from skimage.morphology import medial_axis

from .topdown import Cell, OccupancyGrid

_NEIGH = np.array([[1, 1, 1], [1, 0, 1], [1, 1, 1]], dtype=np.int8)
_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass
class GraphNode:
    id: int
    position: np.ndarray        # world xy
    degree: int = 0
    visited: bool = False
    score: float = 0.0
    score_parts: dict = field(default_factory=dict)
    subregion: int = -1
    cell: tuple[int, int] = (0, 0)
    clearance: float = 0.0      # meters to the nearest obstacle


@dataclass
class GraphEdge:
    a: int
    b: int
    polyline: np.ndarray        # (k, 2) world xy including both endpoints
    length: float


@dataclass
class VoronoiGraph:
    nodes: list[GraphNode] = field(default_factory=list)
    edges: list[GraphEdge] = field(default_factory=list)

    def adjacency(self) -> dict[int, list[tuple[int, float]]]:
        adj = {n.id: [] for n in self.nodes}
        for e in self.edges:
            adj[e.a].append((e.b, e.length))
            if e.a != e.b:
                adj[e.b].append((e.a, e.length))
        return adj

    def node_by_id(self, nid: int) -> GraphNode:
        for n in self.nodes:
            if n.id == nid:
                return n
        raise KeyError(nid)

    def nearest_node(self, xy) -> GraphNode | None:
        if not self.nodes:
            return None
        xy = np.asarray(xy, dtype=np.float64)
        dists = [float(np.hypot(*(n.position - xy))) for n in self.nodes]
        return self.nodes[int(np.argmin(dists))]

    def positions(self) -> np.ndarray:
        if not self.nodes:
            return np.zeros((0, 2))
        return np.stack([n.position for n in self.nodes])

    def to_text(self) -> str:
        lines = ["# nodes: id x y degree visited"]
        for n in self.nodes:
            lines.append(f"{n.id} {n.position[0]:.4f} {n.position[1]:.4f} {n.degree} {int(n.visited)}")
        lines.append("# edges: a b length")
        for e in self.edges:
            lines.append(f"{e.a} {e.b} {e.length:.4f}")
        return "\n".join(lines) + "\n"


def _neighbor_counts(skel: np.ndarray) -> np.ndarray:
    return convolve(skel.astype(np.int8), _NEIGH, mode="constant", cval=0)


def _chain_from(skel, counts, start, first):
    """Walk a degree-2 chain from node pixel `start` through `first`.

    Returns (pixels, end) where pixels excludes `start` and includes the
    terminal pixel `end` (a node pixel, or the last chain pixel for a stub).
    """
    chain = [first]
    prev, cur = start, first
    while counts[cur] == 2 and cur != start:
        nxt = None
        for dr, dc in _OFFSETS:
            cand = (cur[0] + dr, cur[1] + dc)
            if cand != prev and skel[cand]:
                nxt = cand
                break
        if nxt is None:
            break
        chain.append(nxt)
        prev, cur = cur, nxt
    return chain, chain[-1]


def _prune_spurs(skel: np.ndarray, dist: np.ndarray, factor: float) -> np.ndarray:
    """Drop endpoint branches shorter than `factor` times the junction clearance.

    Thinning turns every free-region corner into a short diagonal branch whose
    length is about the local clearance; real dead-end corridors are much
    longer than the clearance where they attach, so they survive.
    """
    skel = skel.copy()
    pad = np.pad(skel, 1, constant_values=False)
    dist_pad = np.pad(dist, 1, constant_values=0.0)
    while True:
        counts = _neighbor_counts(pad)
        endpoints = np.argwhere(pad & (counts == 1))
        removed = False
        for ep in endpoints:
            ep = tuple(ep)
            if not pad[ep] or counts[ep] != 1:
                continue
            first = None
            for dr, dc in _OFFSETS:
                cand = (ep[0] + dr, ep[1] + dc)
                if pad[cand]:
                    first = cand
                    break
            if first is None:
                pad[ep] = False
                removed = True
                continue
            chain, end = _chain_from(pad, counts, ep, first)
            if counts[end] < 3:
                continue  # open chain with no junction: a real corridor, keep
            length = 0.0
            prev = ep
            for p in chain:
                length += np.hypot(p[0] - prev[0], p[1] - prev[1])
                prev = p
            if length <= factor * dist_pad[end] + 1e-9:
                pad[ep] = False
                for p in chain[:-1]:
                    pad[p] = False
                removed = True
        if not removed:
            break
    return pad[1:-1, 1:-1]


def extract_voronoi(grid: OccupancyGrid, spur_factor: float = 1.5) -> VoronoiGraph:
    """Medial-axis graph of the Free region; empty graph when nothing is free."""
    free = grid.cells == Cell.FREE
    graph = VoronoiGraph()
    if not free.any():
        return graph
    skel, dist = medial_axis(free, return_distance=True)
    skel = _prune_spurs(skel, dist, spur_factor)
    if not skel.any():
        # pruning ate everything (tiny blob): keep the maximal-clearance pixel
        r, c = np.unravel_index(np.argmax(dist * free), dist.shape)
        skel = np.zeros_like(free)
        skel[r, c] = True

    pad = np.pad(skel, 1, constant_values=False)
    counts = _neighbor_counts(pad)
    node_mask = pad & (counts != 2)
    cluster_ids, n_clusters = label(node_mask, structure=np.ones((3, 3)))

    def world(p):
        return grid.cell_to_world(p[0] - 1, p[1] - 1)

    nodes = []
    cluster_pixels = {}
    for cid in range(1, n_clusters + 1):
        pix = np.argwhere(cluster_ids == cid)
        centroid = pix.mean(axis=0)
        anchor = pix[np.argmin(((pix - centroid) ** 2).sum(axis=1))]
        anchor = (int(anchor[0]), int(anchor[1]))
        nodes.append(GraphNode(
            id=cid - 1,
            position=world(anchor),
            cell=(anchor[0] - 1, anchor[1] - 1),
            clearance=float(dist[anchor[0] - 1, anchor[1] - 1] * grid.cell_size),
        ))
        cluster_pixels[cid] = [tuple(p) for p in pix]

    edges = []
    consumed = np.zeros_like(pad, dtype=bool)
    direct_pairs = set()

    def add_edge(a_cid, b_cid, pixels):
        pts = np.stack([world(p) for p in pixels])
        length = float(np.hypot(*np.diff(pts, axis=0).T).sum()) if len(pts) > 1 else 0.0
        edges.append(GraphEdge(a=a_cid - 1, b=b_cid - 1, polyline=pts, length=length))

    for cid in range(1, n_clusters + 1):
        for start in cluster_pixels[cid]:
            for dr, dc in _OFFSETS:
                first = (start[0] + dr, start[1] + dc)
                if not pad[first] or cluster_ids[first] == cid:
                    continue
                if cluster_ids[first] > 0:
                    # directly touching clusters: one contact edge per pair
                    key = (min(cid, cluster_ids[first]), max(cid, cluster_ids[first]))
                    if key not in direct_pairs:
                        direct_pairs.add(key)
                        add_edge(cid, cluster_ids[first], [start, first])
                    continue
                if consumed[first]:
                    continue
                chain, end = _chain_from(pad, counts, start, first)
                for p in chain:
                    if cluster_ids[p] == 0:
                        consumed[p] = True
                end_cid = cluster_ids[end]
                if end_cid == 0:
                    continue  # dangling stub left by pruning edge cases
                add_edge(cid, end_cid, [start] + chain)

    # pure cycles have no degree!=2 pixel; give each one an anchor node
    leftover = pad & ~consumed & (cluster_ids == 0)
    lab, n_loops = label(leftover, structure=np.ones((3, 3)))
    for li in range(1, n_loops + 1):
        pix = [tuple(p) for p in np.argwhere(lab == li)]
        if len(pix) < 4:
            continue
        anchor = min(pix)
        cid = len(nodes) + 1
        nodes.append(GraphNode(
            id=cid - 1,
            position=world(anchor),
            cell=(anchor[0] - 1, anchor[1] - 1),
            clearance=float(dist[anchor[0] - 1, anchor[1] - 1] * grid.cell_size),
        ))
        nbrs = [(anchor[0] + dr, anchor[1] + dc) for dr, dc in _OFFSETS]
        nbrs = [p for p in nbrs if lab[p] == li]
        if not nbrs:
            continue
        chain, end = _chain_from(pad, counts, anchor, nbrs[0])
        if end == anchor or counts[end] == 2:
            loop_pixels = [anchor] + chain
            if loop_pixels[-1] != anchor:
                loop_pixels.append(anchor)
            add_edge(cid, cid, loop_pixels)

    graph.nodes = nodes
    graph.edges = edges
    _recount_degrees(graph)
    return graph


def _recount_degrees(graph: VoronoiGraph):
    deg = {n.id: 0 for n in graph.nodes}
    for e in graph.edges:
        deg[e.a] += 1
        deg[e.b] += 1
    for n in graph.nodes:
        n.degree = deg[n.id]


def update_graph(old: VoronoiGraph, new: VoronoiGraph, trajectory,
                 visit_radius: float = 0.5, match_radius: float = 0.15) -> VoronoiGraph:
    """Carry visited flags from `old` onto `new` and fold in the trajectory.

    A new node inherits visited when an old visited node lies within
    match_radius of it, and becomes visited outright when the agent's past
    trajectory passed within visit_radius.
    """
    traj = np.asarray(trajectory, dtype=np.float64).reshape(-1, 2) if trajectory is not None else np.zeros((0, 2))
    old_visited = [n.position for n in old.nodes if n.visited] if old is not None else []
    for node in new.nodes:
        if old_visited:
            d = min(float(np.hypot(*(p - node.position))) for p in old_visited)
            if d <= match_radius:
                node.visited = True
        if traj.size and not node.visited:
            d = float(np.min(np.hypot(traj[:, 0] - node.position[0], traj[:, 1] - node.position[1])))
            if d <= visit_radius:
                node.visited = True
    return new
