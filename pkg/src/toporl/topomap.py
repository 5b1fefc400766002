"""Agent-side topological map and its conversion to graph tokens.

The map tracks visited and frontier nodes plus a dedicated STOP entry.
Frontier features are inherited from the most recent parent's view sector
facing them; visited features are the mean of the node's own encoded views.
Raw view data stays in the world (read-only); encoding happens at token-build
time so gradients reach the panorama encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError
from .simenv import STOP_ACTION, EpisodeState, Observation
from .world import WorldGraph, wrap_angle

VISITED = "visited"
FRONTIER = "frontier"


@dataclass(frozen=True)
class NodeEntry:
    status: str
    last_visit_step: int  # -1 when never visited
    pos: tuple[float, float]
    parent: int  # frontier: most recent observing node, else -1
    sector: int  # frontier: parent's view sector facing this node, else -1


class TopoMap:
    """One agent's online map; the STOP entry is implicit and always first."""

    def __init__(self):
        self.nodes: dict[int, NodeEntry] = {}
        self.current: int = -1

    def frontier(self) -> list[int]:
        return sorted(n for n, e in self.nodes.items() if e.status == FRONTIER)

    def visited(self) -> list[int]:
        return sorted(n for n, e in self.nodes.items() if e.status == VISITED)

    def order(self) -> list[int]:
        """Canonical token order: STOP first, then nodes by id."""
        return [STOP_ACTION, *sorted(self.nodes)]

    def status_of(self, node: int) -> str:
        if node == self.current:
            return "current"
        return self.nodes[node].status

    def counts(self) -> dict[str, int]:
        out = {"current": 1 if self.current >= 0 else 0, "visited": 0, "frontier": 0, "stop": 1}
        for n, e in self.nodes.items():
            if n == self.current:
                continue
            out[e.status] += 1
        return out

    def snapshot(self) -> "TopoMap":
        m = TopoMap()
        m.nodes = dict(self.nodes)
        m.current = self.current
        return m


def update_map(tmap: TopoMap, obs: Observation, step: int) -> TopoMap:
    """Integrate one observation: mark the observed node visited, refresh or
    create frontier entries for its unvisited neighbors (inheriting this
    parent's facing view sector), and move the current pointer here.
    """
    node = obs.node
    tmap.nodes[node] = NodeEntry(
        status=VISITED, last_visit_step=step, pos=obs.pos, parent=-1, sector=-1
    )
    for nb in obs.neighbors:
        existing = tmap.nodes.get(nb.node)
        if existing is not None and existing.status == VISITED:
            continue
        tmap.nodes[nb.node] = NodeEntry(
            status=FRONTIER,
            last_visit_step=-1,
            pos=(obs.pos[0] + nb.dxw, obs.pos[1] + nb.dyw),
            parent=node,
            sector=nb.sector,
        )
    tmap.current = node
    return tmap


def integrate_step(tmap: TopoMap, state: EpisodeState, world: WorldGraph) -> TopoMap:
    """Fold the latest high-level step's traversal into the map.

    Every traversed node is observed at its arrival heading; the final one
    becomes the current node.
    """
    from .simenv import observe

    if not state.last_traversal:
        return tmap
    if state.last_traversal[-1][0] != state.current:
        raise ContractError("traversal does not end at the current node")
    for node, heading in state.last_traversal:
        update_map(tmap, observe(world, node, heading), state.step_count)
    return tmap


@dataclass
class GraphTokens:
    order: list[int]  # token index -> STOP_ACTION or node id
    tokens: object  # Tensor (N_g, d)
    cand_mask: np.ndarray  # bool (N_g,), STOP + frontier
    node_task_id: int


def build_graph_tokens(
    tmap: TopoMap,
    policy,
    world: WorldGraph,
    heading: float,
    task_id: int,
    ctx,
    view_pool: Optional[tuple[object, dict[int, int]]] = None,
) -> GraphTokens:
    """Emit the graph token sequence: STOP first, then nodes by id.

    Each token is the projected node feature plus step, position, and task
    embeddings. Visited features are the mean of the node's own encoded
    views; frontier features are the encoded view of the most recent parent's
    sector facing them; STOP uses a learned feature with the zero pose.

    view_pool, when given, is a pre-encoded (rows, offset-by-node) pair shared
    across the forwards of one update batch.
    """
    from . import numcore as nc

    cfg = policy.cfg
    p = policy.params
    k = cfg.k_views
    order, pose, buckets, cand = graph_token_inputs(tmap, heading, cfg.max_steps)
    node_task_id = 1 if task_id in (1, 3) else 2

    body = order[1:]
    sources = []
    for node in body:
        e = tmap.nodes[node]
        sources.append(node if e.status == VISITED else e.parent)
    uniq = sorted(set(sources))

    if view_pool is not None:
        enc, offset = view_pool
        missing = [nid for nid in uniq if nid not in offset]
        if missing:
            raise ContractError(f"view pool missing nodes {missing}")
    else:
        offset = {nid: i * k for i, nid in enumerate(uniq)}
        # the cache applies whenever the panorama encoder runs without
        # dropout and either off-tape or frozen (no gradient flows into it)
        pano_frozen = not p["pano.proj_w"].requires_grad
        if not ctx.on_frozen and (pano_frozen or not nc.tape_active()):
            enc = nc.Tensor(policy.node_encodings(world, uniq, ctx))
        else:
            enc = policy.encode_views_batch(
                np.stack([world.view_features[nid] for nid in uniq]), ctx
            )

    # one selector matmul picks frontier sector rows and visited view means
    sel = np.zeros((len(body), enc.data.shape[0]))
    for i, node in enumerate(body):
        e = tmap.nodes[node]
        if e.status == VISITED:
            sel[i, offset[node] : offset[node] + k] = 1.0 / k
        else:
            sel[i, offset[e.parent] + e.sector] = 1.0
    node_feats = nc.matmul(nc.Tensor(sel), enc)
    feats = nc.concat_rows(nc.reshape(p["graph.stop_feat"], (1, cfg.d)), node_feats)
    tok = nc.linear(feats, p["graph.feat_w"], p["graph.feat_b"])
    tok = nc.add(tok, nc.linear(nc.Tensor(pose), p["graph.pose_w"], p["graph.pose_b"]))
    tok = nc.add(tok, nc.take_rows(p["graph.step_emb"], buckets))
    tok = nc.add(tok, nc.take_rows(p["graph.task_emb"], [node_task_id]))
    tok = nc.layer_norm(tok, p["graph.emb_ln_g"], p["graph.emb_ln_b"])
    tok = ctx.apply(tok, frozen_group=True)
    return GraphTokens(order=order, tokens=tok, cand_mask=cand, node_task_id=node_task_id)


def graph_token_inputs(
    tmap: TopoMap, heading: float, max_steps: int
) -> tuple[list[int], np.ndarray, np.ndarray, np.ndarray]:
    """Canonical numeric inputs for graph-token assembly.

    Returns (order, pose matrix [dx, dy, r, sin, cos] in the ego frame,
    step-embedding buckets, candidate mask). Bucket 0 is reserved for
    never-visited entries (frontier and STOP).
    """
    if not tmap.nodes:
        raise ContractError("cannot build tokens from an empty map")
    order = tmap.order()
    cur = tmap.nodes[tmap.current]
    n = len(order)
    pose = np.zeros((n, 5))
    pose[:, 4] = 1.0  # cos(0) for the zero pose
    buckets = np.zeros(n, dtype=np.int64)
    cand = np.zeros(n, dtype=bool)
    cand[0] = True  # STOP
    ch, sh = math.cos(heading), math.sin(heading)
    for i, node in enumerate(order[1:], start=1):
        e = tmap.nodes[node]
        dxw = e.pos[0] - cur.pos[0]
        dyw = e.pos[1] - cur.pos[1]
        r = math.hypot(dxw, dyw)
        if r > 0.0:
            theta = wrap_angle(math.atan2(dyw, dxw) - heading)
            # ego frame: x forward, y left
            pose[i] = (ch * dxw + sh * dyw, -sh * dxw + ch * dyw, r, math.sin(theta), math.cos(theta))
        if e.status == FRONTIER:
            cand[i] = True
        else:
            buckets[i] = 1 + min(e.last_visit_step, max_steps)
    return order, pose, buckets, cand
