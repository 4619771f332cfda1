"""Exploration planning over the Voronoi graph.

The planner is a sequential state machine: an initial sweep to seed the map,
then alternating goal selection and navigation. Goals are graph nodes; routes
are Dijkstra shortest paths whose edge polylines are discretized into the
simulator's turn and move increments. Node clusters from average-linkage
agglomeration (UPGMA) partition the graph into subregions so the agent
finishes worthwhile goals near itself before committing to a distant one.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform
from skimage.measure import approximate_polygon

from .simulator import Action, AgentState, SimConfig
from .voronoi import VoronoiGraph

UNREACHABLE = 1e6

STRATEGIES = ("random", "position", "viewpoint", "full")


@dataclass
class PlannerConfig:
    tau_local: float = 5.0        # min score for a local-subregion goal
    beta_dist: float = 0.5        # global-utility cost per meter of path
    gamma_visits: float = 5.0     # global-utility cost per prior visit
    subregion_cut: float = 2.0    # dendrogram cut distance, meters
    waypoint_tol: float = 0.1     # waypoint considered reached, meters
    arrival_radius: float = 0.2   # node considered reached, meters
    max_blocked: int = 5          # blocked moves tolerated before replanning
    junction_degree: int = 3      # rotate when passing nodes this connected
    max_pitch_deg: float = 45.0   # rotation targets clamp to this magnitude


@dataclass
class SubregionPartition:
    assignments: dict[int, int]                              # node id -> subregion
    local_id: int                                            # agent's subregion
    merges: list[tuple[frozenset, frozenset, float]] = field(default_factory=list)

    def subregion_of(self, node_id: int) -> int:
        return self.assignments.get(node_id, -1)


def bootstrap_plan(sim_cfg: SimConfig | None = None) -> list[Action]:
    """Initial sweep: tilt down 45 degrees, one full yaw revolution, tilt back."""
    cfg = sim_cfg or SimConfig()
    down = int(round(45.0 / cfg.pitch_step_deg))
    around = int(round(360.0 / cfg.turn_step_deg))
    return [Action.TURN_DOWN] * down + [Action.TURN_LEFT] * around + [Action.TURN_UP] * down


def shortest_path(graph: VoronoiGraph, src: int, dst: int) -> tuple[list[int] | None, float]:
    """Dijkstra on edge lengths; equal-length relaxations keep the smaller
    predecessor id so results are deterministic."""
    adj = graph.adjacency()
    if src not in adj or dst not in adj:
        raise KeyError(f"node not in graph: {src if src not in adj else dst}")
    if src == dst:
        return [src], 0.0
    dist = {src: 0.0}
    prev: dict[int, int] = {}
    settled = set()
    heap = [(0.0, src)]
    while heap:
        d, u = heapq.heappop(heap)
        if u in settled:
            continue
        settled.add(u)
        if u == dst:
            break
        for v, w in sorted(adj[u]):
            if v == u or v in settled:
                continue
            nd = d + w
            if v not in dist or nd < dist[v]:
                dist[v] = nd
                prev[v] = u
                heapq.heappush(heap, (nd, v))
            elif nd == dist[v] and u < prev[v]:
                prev[v] = u
    if dst not in dist:
        return None, math.inf
    path = [dst]
    while path[-1] != src:
        path.append(prev[path[-1]])
    return path[::-1], dist[dst]


def graph_distances(graph: VoronoiGraph, src: int) -> dict[int, float]:
    """Shortest-path length from `src` to every node; inf when unreachable."""
    adj = graph.adjacency()
    if src not in adj:
        raise KeyError(f"node not in graph: {src}")
    dist = {nid: math.inf for nid in adj}
    dist[src] = 0.0
    heap = [(0.0, src)]
    settled = set()
    while heap:
        d, u = heapq.heappop(heap)
        if u in settled:
            continue
        settled.add(u)
        for v, w in sorted(adj[u]):
            if v == u or v in settled:
                continue
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def path_polyline(graph: VoronoiGraph, path_ids: list[int]) -> np.ndarray:
    """World-xy polyline along a node path, stitched from edge polylines.

    Parallel edges contribute their shortest member, matching what Dijkstra
    relaxed over.
    """
    if len(path_ids) == 1:
        return graph.node_by_id(path_ids[0]).position.reshape(1, 2).copy()
    by_pair: dict[tuple[int, int], list] = {}
    for e in graph.edges:
        by_pair.setdefault((min(e.a, e.b), max(e.a, e.b)), []).append(e)
    pts: list[np.ndarray] = []
    for u, v in zip(path_ids[:-1], path_ids[1:]):
        cands = by_pair.get((min(u, v), max(u, v)))
        if not cands:
            raise KeyError(f"no edge between {u} and {v}")
        e = min(cands, key=lambda e: e.length)
        seg = e.polyline if e.a == u else e.polyline[::-1]
        pts.append(seg if not pts else seg[1:])
    return np.concatenate(pts, axis=0)


def simplify_polyline(polyline, tolerance: float = 0.06) -> np.ndarray:
    """Drop skeleton-pixel jaggies: RDP simplification keeping endpoints.

    Voronoi centerlines have maximal obstacle clearance, so straightening
    within a few centimeters stays safely inside the corridor.
    """
    pts = np.asarray(polyline, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        return pts
    return approximate_polygon(pts, tolerance)


def path_to_actions(polyline, agent: AgentState, sim_cfg: SimConfig | None = None,
                    waypoint_tol: float = 0.1, max_actions: int = 20000) -> list[Action]:
    """Discretize a polyline into turn/move actions by closed-loop dead
    reckoning.

    The polyline is straightened first, then each waypoint is approached in a
    turn-when-needed / move-otherwise loop: the agent turns only while that
    shrinks the heading error toward the current waypoint, so long segments
    become a single alignment followed by forward moves, and quantization
    drift is corrected en route instead of accumulating.
    """
    cfg = sim_cfg or SimConfig()
    x, y = float(agent.position[0]), float(agent.position[1])
    yaw = float(agent.yaw_deg)
    out: list[Action] = []
    for wx, wy in simplify_polyline(polyline, tolerance=0.6 * waypoint_tol):
        while len(out) < max_actions:
            d = math.hypot(wx - x, wy - y)
            if d <= waypoint_tol:
                break
            heading = math.degrees(math.atan2(wy - y, wx - x))
            err = (heading - yaw + 180.0) % 360.0 - 180.0
            k = int(round(err / cfg.turn_step_deg))
            if k != 0:
                out.append(Action.TURN_LEFT if k > 0 else Action.TURN_RIGHT)
                yaw = (yaw + math.copysign(cfg.turn_step_deg, k)) % 360.0
                continue
            # Aligned to within half a turn step: advance a bounded chunk,
            # then re-aim, so the residual heading error (up to 5 degrees)
            # cannot accumulate into sideways drift on long segments.
            n = min(max(1, int(d / cfg.move_step)), 8)
            dx = cfg.move_step * math.cos(math.radians(yaw))
            dy = cfg.move_step * math.sin(math.radians(yaw))
            for _ in range(n):
                x += dx
                y += dy
                out.append(Action.MOVE_FORWARD)
        if len(out) >= max_actions:
            break
    return out


def pairwise_planning_distance(graph: VoronoiGraph) -> tuple[list[int], np.ndarray]:
    """Node distance matrix: mean of Euclidean and on-graph shortest path.

    Unreachable pairs take a sentinel graph distance large enough that no cut
    threshold ever merges across disconnected components.
    """
    ids = [n.id for n in graph.nodes]
    pos = graph.positions()
    n = len(ids)
    D = np.zeros((n, n))
    for i in range(n):
        gd = graph_distances(graph, ids[i])
        for j in range(i + 1, n):
            e = float(np.hypot(pos[i, 0] - pos[j, 0], pos[i, 1] - pos[j, 1]))
            g = gd.get(ids[j], math.inf)
            if not math.isfinite(g):
                g = UNREACHABLE
            D[i, j] = D[j, i] = 0.5 * (e + g)
    return ids, D


def partition_subregions(graph: VoronoiGraph, agent_xy=None,
                         threshold: float = 2.0) -> SubregionPartition:
    """Average-linkage agglomeration of graph nodes, dendrogram cut at
    `threshold`. `merges` records every agglomeration as two frozen member
    sets plus the linkage distance, in merge order."""
    if not graph.nodes:
        raise ValueError("cannot partition an empty graph")
    ids, D = pairwise_planning_distance(graph)
    n = len(ids)
    if n == 1:
        return SubregionPartition({ids[0]: 0}, 0, [])
    Z = linkage(squareform(D, checks=False), method="average")
    labels = fcluster(Z, t=threshold, criterion="distance")
    remap: dict[int, int] = {}
    assignments: dict[int, int] = {}
    for nid, lab in zip(ids, labels):
        if lab not in remap:
            remap[lab] = len(remap)
        assignments[nid] = remap[lab]
    members: dict[int, frozenset] = {i: frozenset([ids[i]]) for i in range(n)}
    merges = []
    for k in range(Z.shape[0]):
        a, b, d = int(Z[k, 0]), int(Z[k, 1]), float(Z[k, 2])
        merges.append((members[a], members[b], d))
        members[n + k] = members[a] | members[b]
    local_id = 0
    if agent_xy is not None:
        xy = np.asarray(agent_xy, dtype=np.float64)[:2]
        near = graph.nearest_node(xy)
        local_id = assignments[near.id]
    return SubregionPartition(assignments, local_id, merges)


def apply_partition(graph: VoronoiGraph, partition: SubregionPartition) -> None:
    for node in graph.nodes:
        node.subregion = partition.subregion_of(node.id)


def select_goal(graph: VoronoiGraph, partition: SubregionPartition | None,
                graph_dists: dict[int, float], cfg: PlannerConfig | None = None,
                visit_counts: dict[int, int] | None = None,
                use_hp: bool = True) -> tuple[int, str] | None:
    """Pick the next goal node, or None when every reachable node is visited.

    Local stage: the best-scoring unvisited node in the agent's subregion, if
    its score clears `tau_local`. Global stage: maximize score minus path and
    revisit costs. Ties go to the nearer node, then the smaller id.
    """
    cfg = cfg or PlannerConfig()
    visit_counts = visit_counts or {}

    def dist(n):
        return graph_dists.get(n.id, math.inf)

    cands = [n for n in graph.nodes
             if not n.visited and math.isfinite(dist(n)) and dist(n) < UNREACHABLE]
    if not cands:
        return None
    if use_hp and partition is not None:
        local = [n for n in cands
                 if partition.subregion_of(n.id) == partition.local_id
                 and n.score >= cfg.tau_local]
        if local:
            best = max(local, key=lambda n: (n.score, -dist(n), -n.id))
            return best.id, "Local"
    def utility(n):
        return n.score - cfg.beta_dist * dist(n) - cfg.gamma_visits * visit_counts.get(n.id, 0)
    best = max(cands, key=lambda n: (utility(n), -dist(n), -n.id))
    return best.id, "Global"


def rotation_actions(targets, agent_yaw: float, agent_pitch: float,
                     sim_cfg: SimConfig | None = None,
                     max_pitch: float = 45.0) -> list[Action]:
    """Turn toward each (yaw, pitch) target in order, then level the pitch."""
    cfg = sim_cfg or SimConfig()
    yaw, pitch = float(agent_yaw), float(agent_pitch)
    out: list[Action] = []
    for t_yaw, t_pitch in targets:
        err = (t_yaw - yaw + 180.0) % 360.0 - 180.0
        k = int(round(err / cfg.turn_step_deg))
        if k > 0:
            out.extend([Action.TURN_LEFT] * k)
        elif k < 0:
            out.extend([Action.TURN_RIGHT] * (-k))
        yaw = (yaw + k * cfg.turn_step_deg) % 360.0
        goal_pitch = float(np.clip(t_pitch, -max_pitch, max_pitch))
        p = int(round((goal_pitch - pitch) / cfg.pitch_step_deg))
        if p > 0:
            out.extend([Action.TURN_UP] * p)
        elif p < 0:
            out.extend([Action.TURN_DOWN] * (-p))
        pitch += p * cfg.pitch_step_deg
    p = int(round(-pitch / cfg.pitch_step_deg))
    if p > 0:
        out.extend([Action.TURN_UP] * p)
    elif p < 0:
        out.extend([Action.TURN_DOWN] * (-p))
    return out


@dataclass
class PlanContext:
    """Per-step snapshot the runner hands the planner.

    `rotation_plan` maps a node id to ordered (yaw, pitch) look targets; it is
    only called when the planner decides to rotate somewhere.
    """
    agent: AgentState
    graph: VoronoiGraph | None = None
    blocked: bool = False
    rotation_plan: Callable[[int], list[tuple[float, float]]] | None = None


class Planner:
    """State machine driving one agent.

    Modes: Bootstrap, LocalSelect, GlobalSelect, NavigateToNode, RotateAtNode,
    Done. The action queue is nonempty exactly in Bootstrap / NavigateToNode /
    RotateAtNode. Strategies stack: `random` picks unvisited nodes blindly,
    `position` picks by score, `viewpoint` adds look-around rotations at each
    goal, `full` also rotates at well-connected junctions passed en route and
    (unless use_hp is off) prefers finishing the local subregion first.
    """

    def __init__(self, sim_cfg: SimConfig | None = None, cfg: PlannerConfig | None = None,
                 strategy: str = "full", use_hp: bool = True, seed: int = 0):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}")
        self.sim_cfg = sim_cfg or SimConfig()
        self.cfg = cfg or PlannerConfig()
        self.strategy = strategy
        self.use_hp = use_hp and strategy == "full"
        self.rng = np.random.default_rng(seed)
        self.mode = "Bootstrap"
        self.pending: deque[Action] = deque(bootstrap_plan(self.sim_cfg))
        self.suspended: deque[Action] | None = None
        self.goal_id: int | None = None
        self.goal_score = 0.0
        self.scope = ""
        self.path_ids: list[int] = []
        self.junctions: list[tuple[int, np.ndarray]] = []
        self.visit_counts: dict[int, int] = {}
        self.blocked_count = 0
        self.partition: SubregionPartition | None = None
        self.moves_emitted = 0
        self.log_lines: list[str] = []

    @property
    def needs_selection(self) -> bool:
        return not self.pending and self.mode not in ("Done",)

    def _log(self, step: int, msg: str) -> None:
        self.log_lines.append(
            f"{step} {self.mode} goal={self.goal_id} S={self.goal_score:.2f} "
            f"path_m={self.moves_emitted * self.sim_cfg.move_step:.2f} {msg}"
        )

    def _emit(self, act: Action) -> Action:
        if act == Action.MOVE_FORWARD:
            self.moves_emitted += 1
        return act

    def step(self, ctx: PlanContext) -> Action:
        step = ctx.agent.step_count
        if self.mode == "NavigateToNode" and ctx.blocked:
            self.blocked_count += 1
            if self.blocked_count > self.cfg.max_blocked:
                if self.goal_id is not None:
                    self.visit_counts[self.goal_id] = self.visit_counts.get(self.goal_id, 0) + 1
                self.pending.clear()
                self.suspended = None
                self.mode = "LocalSelect"
                self._log(step, f"replan: {self.blocked_count} blocked moves")
                self.blocked_count = 0

        if self.mode == "NavigateToNode" and self.pending:
            self._check_junction(ctx)

        for _ in range(16):  # transitions settle well before this bound
            if self.mode == "Done":
                return Action.STOP
            if self.pending:
                return self._emit(self.pending.popleft())
            if self.mode == "Bootstrap":
                self.mode = "LocalSelect"
                self._log(step, "bootstrap complete")
            elif self.mode == "NavigateToNode":
                self._arrive(ctx)
            elif self.mode == "RotateAtNode":
                if self.suspended is not None:
                    self.pending = self.suspended
                    self.suspended = None
                    self.mode = "NavigateToNode"
                else:
                    self.mode = "LocalSelect"
            elif self.mode in ("LocalSelect", "GlobalSelect"):
                self._select(ctx)
        self._log(step, "transition overflow; holding with a turn")
        return self._emit(Action.TURN_LEFT)

    def _check_junction(self, ctx: PlanContext) -> None:
        if self.strategy != "full" or not self.junctions:
            return
        agent_xy = ctx.agent.position[:2]
        nid, pos = self.junctions[0]
        if float(np.hypot(*(pos - agent_xy))) > self.cfg.arrival_radius:
            return
        self.junctions.pop(0)
        node = None
        if ctx.graph is not None:
            try:
                node = ctx.graph.node_by_id(nid)
            except KeyError:  # graph was rebuilt mid-path and the id is gone
                pass
        if node is not None:
            node.visited = True
        targets = ctx.rotation_plan(nid) if ctx.rotation_plan else []
        if targets:
            acts = rotation_actions(targets, ctx.agent.yaw_deg, ctx.agent.pitch_deg,
                                    self.sim_cfg, self.cfg.max_pitch_deg)
            if acts:
                self.suspended = self.pending
                self.pending = deque(acts)
                self.mode = "RotateAtNode"
                self._log(ctx.agent.step_count, f"junction rotation at node {nid}")

    def _arrive(self, ctx: PlanContext) -> None:
        step = ctx.agent.step_count
        nid = self.goal_id
        self.junctions = []
        self.blocked_count = 0
        if nid is not None:
            self.visit_counts[nid] = self.visit_counts.get(nid, 0) + 1
            if ctx.graph is not None:
                try:
                    ctx.graph.node_by_id(nid).visited = True
                except KeyError:
                    pass
        self._log(step, f"arrived at node {nid}")
        if self.strategy in ("viewpoint", "full") and nid is not None and ctx.rotation_plan:
            targets = ctx.rotation_plan(nid)
            acts = rotation_actions(targets, ctx.agent.yaw_deg, ctx.agent.pitch_deg,
                                    self.sim_cfg, self.cfg.max_pitch_deg)
            if acts:
                self.mode = "RotateAtNode"
                self.pending = deque(acts)
                return
        self.mode = "LocalSelect"

    def _select(self, ctx: PlanContext) -> None:
        step = ctx.agent.step_count
        graph = ctx.graph
        if graph is None or not graph.nodes:
            self.pending = deque([Action.TURN_LEFT] * 3)
            self._log(step, "no graph yet; scanning")
            self.mode = "NavigateToNode"
            return
        agent_xy = ctx.agent.position[:2]
        start = graph.nearest_node(agent_xy)
        dists = graph_distances(graph, start.id)

        if self.use_hp:
            self.partition = partition_subregions(graph, agent_xy, self.cfg.subregion_cut)
            apply_partition(graph, self.partition)
        else:
            self.partition = None

        if self.strategy == "random":
            open_ids = sorted(n.id for n in graph.nodes
                              if not n.visited and math.isfinite(dists.get(n.id, math.inf))
                              and dists.get(n.id, math.inf) < UNREACHABLE)
            if not open_ids:
                choice = None
            else:
                choice = (int(self.rng.choice(open_ids)), "Global")
        else:
            choice = select_goal(graph, self.partition, dists, self.cfg,
                                 self.visit_counts, self.use_hp)

        if choice is None:
            self.mode = "Done"
            self.goal_id = None
            self._log(step, "all reachable nodes visited")
            return
        nid, scope = choice
        self.mode = "LocalSelect" if scope == "Local" else "GlobalSelect"
        self.goal_id = nid
        self.scope = scope
        self.goal_score = graph.node_by_id(nid).score
        path, length = shortest_path(graph, start.id, nid)
        if path is None:
            self.visit_counts[nid] = self.visit_counts.get(nid, 0) + 1
            self._log(step, f"goal {nid} unreachable; repicking")
            return
        self.path_ids = path
        poly = path_polyline(graph, path)
        acts = path_to_actions(poly, ctx.agent, self.sim_cfg, self.cfg.waypoint_tol)
        self.junctions = [
            (pid, graph.node_by_id(pid).position.copy())
            for pid in path[1:-1]
            if graph.node_by_id(pid).degree >= self.cfg.junction_degree
        ]
        self._log(step, f"selected node {nid} ({scope}) path {length:.2f} m, "
                        f"{len(acts)} actions")
        if not acts:
            self._arrive(ctx)
            return
        self.pending = deque(acts)
        self.blocked_count = 0
        self.mode = "NavigateToNode"
