"""Episode runtime: observations, waypoint dynamics, the global-planner expert.

High-level actions are node ids (traverse the shortest graph path to that
node) or STOP. The deterministic controller appends every traversed node to
the trace and aligns the heading with the direction of arrival.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError
from .world import Episode, WorldGraph, wrap_angle

STOP_ACTION = -1


@dataclass
class NeighborDesc:
    node: int
    dxw: float  # world-frame offset from the observing node
    dyw: float
    r: float
    rel_bearing: float  # relative to the agent heading
    sector: int  # world-frame view sector of the observing node facing this neighbor
    view: np.ndarray  # that sector's raw view feature


@dataclass
class Observation:
    node: int
    heading: float
    pos: tuple[float, float]
    views: np.ndarray  # (K, d_view) raw per-sector features
    neighbors: list[NeighborDesc]


@dataclass
class EpisodeState:
    episode: Episode
    current: int
    heading: float
    length: float = 0.0
    trace: list[int] = field(default_factory=list)
    step_count: int = 0
    done: bool = False
    stop_issued: bool = False
    # (node, arrival heading) for nodes traversed by the latest action
    last_traversal: list[tuple[int, float]] = field(default_factory=list)


def observe(world: WorldGraph, node: int, heading: float) -> Observation:
    pos = world.positions[node]
    neighbors = []
    for v in world.neighbors(node):
        delta = world.positions[v] - pos
        brg = math.atan2(delta[1], delta[0])
        neighbors.append(
            NeighborDesc(
                node=v,
                dxw=float(delta[0]),
                dyw=float(delta[1]),
                r=float(np.hypot(*delta)),
                rel_bearing=wrap_angle(brg - heading),
                sector=world.sector_of(brg),
                view=world.view_features[node, world.sector_of(brg)],
            )
        )
    return Observation(
        node=node,
        heading=heading,
        pos=(float(pos[0]), float(pos[1])),
        views=world.view_features[node],
        neighbors=neighbors,
    )


def reset(world: WorldGraph, episode: Episode) -> tuple[EpisodeState, Observation]:
    if episode.world_seed != world.seed:
        raise ContractError(
            f"episode {episode.id} references world {episode.world_seed}, got {world.seed}"
        )
    state = EpisodeState(
        episode=episode,
        current=episode.start,
        heading=episode.start_heading,
        trace=[episode.start],
        last_traversal=[(episode.start, episode.start_heading)],
    )
    return state, observe(world, state.current, state.heading)


def step_highlevel(
    world: WorldGraph,
    state: EpisodeState,
    action: int,
    candidates: Sequence[int],
) -> tuple[EpisodeState, Optional[Observation]]:
    """Execute one high-level action in place; returns (state, obs or None).

    A node action traverses the shortest graph path to it, appending every
    intermediate node to the trace; the terminal observation is None only
    after STOP.
    """
    if state.done:
        raise ContractError("step on a finished episode")
    if action == STOP_ACTION:
        state.done = True
        state.stop_issued = True
        state.step_count += 1
        state.last_traversal = []
        return state, None
    if action not in candidates:
        raise ContractError(f"action {action} not in the candidate set")
    if not 0 <= action < world.n_nodes:
        raise ContractError(f"unknown node {action}")
    path = world.shortest_path(state.current, action)
    traversal = []
    for u, v in zip(path[:-1], path[1:]):
        brg = world.bearing(u, v)
        state.length += world.edge_length(u, v)
        state.trace.append(v)
        traversal.append((v, brg))
    state.current = action
    state.heading = traversal[-1][1]
    state.step_count += 1
    state.last_traversal = traversal
    if state.step_count >= state.episode.max_highlevel_steps:
        state.done = True
    return state, observe(world, state.current, state.heading)


def geodesic_distance(world: WorldGraph, a: int, b: int) -> float:
    """Dijkstra shortest-path length; +inf for a disconnected pair."""
    if not (0 <= a < world.n_nodes and 0 <= b < world.n_nodes):
        raise ContractError(f"node pair ({a}, {b}) outside world")
    return world.geodesic(a, b)


def _reference_progress(trace: Sequence[int], reference: Sequence[int]) -> int:
    """Number of reference nodes consumed, in order, by the trace."""
    ptr = 0
    for node in trace:
        if ptr < len(reference) and node == reference[ptr]:
            ptr += 1
    return ptr


def expert_action(
    world: WorldGraph,
    state: EpisodeState,
    episode: Episode,
    frontier: Sequence[int],
) -> int:
    """Global-planner expert over the candidate set (frontier plus STOP).

    Shortest-style episodes head for the goal; meandering-style episodes
    chase the earliest reference node not yet reached (path fidelity). Ties
    break toward the lowest node id.
    """
    if state.done:
        raise ContractError("expert queried on a finished episode")
    goal = episode.goal
    threshold = episode.success_threshold
    if episode.task_id == 2:
        ref = episode.reference_path
        ptr = _reference_progress(state.trace, ref)
        past_intermediates = ptr >= len(ref) - 1
        if past_intermediates and world.geodesic(state.current, goal) < threshold:
            return STOP_ACTION
        target = goal if past_intermediates else ref[ptr]
    else:
        if world.geodesic(state.current, goal) < threshold:
            return STOP_ACTION
        target = goal
    best = None
    best_d = math.inf
    for f in sorted(frontier):
        d = world.geodesic(f, target)
        if d < best_d:
            best = f
            best_d = d
    return STOP_ACTION if best is None else best
