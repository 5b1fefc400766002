"""Procedural navigation worlds, episode sampling, instruction synthesis.

A world is a connected 2-D graph with per-node panoramic view features and a
landmark label per node. Episodes reference a start pose, a goal, and a
reference path; a deterministic rule-based speaker renders each path into a
token instruction (direction + landmark per hop, STOP_AT at the end). Every
emitted instruction is literally followable: a greedy follower that obeys the
direction/landmark tokens reproduces the reference path exactly, which the
sampler enforces by rejection.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, GenerationError, SamplingError

TAU = 2.0 * math.pi

# direction-token bins (radians): |rel| <= FORWARD_MAX is FORWARD, then
# slight turn, hard turn; beyond HARD_MAX only a turn-around can express it
FORWARD_MAX = math.radians(30.0)
SLIGHT_MAX = math.radians(75.0)
HARD_MAX = math.radians(135.0)


class Vocab:
    """Fixed token table: specials, direction tokens, fillers, landmarks."""

    PAD = 0
    MASK = 1
    SEP = 2
    STOP_AT = 3
    TURN_AROUND = 4
    FORWARD = 5
    SLIGHT_LEFT = 6
    LEFT = 7
    SLIGHT_RIGHT = 8
    RIGHT = 9
    THEN = 10
    GO = 11
    HEAD = 12
    LANDMARK_BASE = 13

    DIRECTION_TOKENS = (FORWARD, SLIGHT_LEFT, LEFT, SLIGHT_RIGHT, RIGHT)
    FILLER_TOKENS = (THEN, GO, HEAD)

    def __init__(self, landmark_count: int, size: int = 64):
        if self.LANDMARK_BASE + landmark_count > size:
            raise ContractError(
                f"vocab size {size} too small for {landmark_count} landmarks"
            )
        self.landmark_count = landmark_count
        self.size = size

    def landmark_token(self, idx: int) -> int:
        if not 0 <= idx < self.landmark_count:
            raise IndexError(f"landmark index {idx} out of range")
        return self.LANDMARK_BASE + idx

    def is_landmark(self, token: int) -> bool:
        return self.LANDMARK_BASE <= token < self.LANDMARK_BASE + self.landmark_count


def wrap_angle(theta: float) -> float:
    """Normalize to (-pi, pi]."""
    theta = math.fmod(theta + math.pi, TAU)
    if theta <= 0.0:
        theta += TAU
    return theta - math.pi


def direction_token(rel_bearing: float) -> Optional[int]:
    """Map a relative bearing to a direction token; None beyond the hard bin."""
    a = abs(rel_bearing)
    if a <= FORWARD_MAX:
        return Vocab.FORWARD
    if a > HARD_MAX:
        return None
    if rel_bearing > 0:
        return Vocab.SLIGHT_LEFT if a <= SLIGHT_MAX else Vocab.LEFT
    return Vocab.SLIGHT_RIGHT if a <= SLIGHT_MAX else Vocab.RIGHT


@dataclass
class WorldParams:
    node_count: int = 36
    # spacing scales with area/sqrt(n); the default keeps node spacing above
    # the 3 m success radius so "within threshold" implies "at the goal node"
    area: float = 34.0
    degree: int = 3
    k_views: int = 12
    d_view: int = 32
    landmark_count: int = 16
    view_noise: float = 0.05
    vocab_size: int = 64

    def to_dict(self) -> dict:
        return {
            "node_count": self.node_count,
            "area": self.area,
            "degree": self.degree,
            "k_views": self.k_views,
            "d_view": self.d_view,
            "landmark_count": self.landmark_count,
            "view_noise": self.view_noise,
            "vocab_size": self.vocab_size,
        }


@dataclass
class WorldGraph:
    """Ground-truth navigation graph with per-sector view features."""

    seed: int
    params: WorldParams
    positions: np.ndarray  # (n, 2) meters
    edges: list[tuple[int, int, float]]  # a < b, Euclidean length
    landmarks: np.ndarray  # (n,) landmark index
    view_features: np.ndarray  # (n, K, d_view)
    _indptr: np.ndarray = field(default=None, repr=False)
    _indices: np.ndarray = field(default=None, repr=False)
    _weights: np.ndarray = field(default=None, repr=False)
    _apsp: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        n = self.positions.shape[0]
        adj: list[list[tuple[int, float]]] = [[] for _ in range(n)]
        for a, b, w in self.edges:
            adj[a].append((b, w))
            adj[b].append((a, w))
        indptr = [0]
        indices: list[int] = []
        weights: list[float] = []
        for row in adj:
            for b, w in sorted(row):
                indices.append(b)
                weights.append(w)
            indptr.append(len(indices))
        self._indptr = np.asarray(indptr, dtype=np.int64)
        self._indices = np.asarray(indices, dtype=np.int64)
        self._weights = np.asarray(weights, dtype=np.float64)

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.params.landmark_count, self.params.vocab_size)

    def neighbors(self, node: int) -> list[int]:
        lo, hi = self._indptr[node], self._indptr[node + 1]
        return [int(i) for i in self._indices[lo:hi]]

    def edge_length(self, a: int, b: int) -> float:
        lo, hi = self._indptr[a], self._indptr[a + 1]
        for e in range(lo, hi):
            if self._indices[e] == b:
                return float(self._weights[e])
        raise ContractError(f"nodes {a} and {b} are not adjacent")

    def apsp(self) -> np.ndarray:
        if self._apsp is None:
            self._apsp = kernels.apsp(self.n_nodes, self._indptr, self._indices, self._weights)
        return self._apsp

    def geodesic(self, a: int, b: int) -> float:
        return float(self.apsp()[a, b])

    def bearing(self, a: int, b: int) -> float:
        dx, dy = self.positions[b] - self.positions[a]
        return math.atan2(dy, dx)

    def shortest_path(self, a: int, b: int) -> list[int]:
        """Node sequence of a shortest path, ties broken by lowest next id."""
        dist = self.apsp()
        if not np.isfinite(dist[a, b]):
            raise ContractError(f"nodes {a} and {b} are disconnected")
        path = [a]
        u = a
        while u != b:
            best = None
            lo, hi = self._indptr[u], self._indptr[u + 1]
            for e in range(lo, hi):
                v = int(self._indices[e])
                w = float(self._weights[e])
                if abs(dist[u, b] - (w + dist[v, b])) <= 1e-9 and (best is None or v < best):
                    best = v
            if best is None:
                raise ContractError("shortest-path walk failed (inconsistent APSP)")
            path.append(best)
            u = best
        return path

    def path_length(self, path: Sequence[int]) -> float:
        return sum(self.edge_length(a, b) for a, b in zip(path[:-1], path[1:]))

    def sector_of(self, bearing: float) -> int:
        width = TAU / self.params.k_views
        return int((bearing % TAU) / width) % self.params.k_views


def generate_world(seed: int, params: WorldParams | None = None) -> WorldGraph:
    """Poisson-disk node placement, k-nearest edges, spanning repair.

    View features mix the node's own landmark one-hot with the landmark of
    the nearest neighbor whose direction falls in each sector, plus seeded
    noise, so a view facing a neighbor encodes that neighbor's landmark.
    """
    params = params or WorldParams()
    if params.node_count < 2:
        raise GenerationError("node_count must be at least 2")
    if params.degree < 2:
        raise GenerationError("degree must be at least 2")
    if params.d_view < 2 * params.landmark_count:
        raise GenerationError("d_view must be at least 2 * landmark_count")
    rng = np.random.default_rng(seed)
    n = params.node_count

    # dart-throwing Poisson disk
    r_min = 0.55 * params.area / math.sqrt(n)
    pts: list[np.ndarray] = []
    attempts = 0
    while len(pts) < n:
        attempts += 1
        if attempts > 400 * n:
            raise GenerationError(
                f"could not place {n} nodes with spacing {r_min:.2f} in area {params.area}"
            )
        cand = rng.uniform(0.0, params.area, size=2)
        if all(np.hypot(*(cand - p)) >= r_min for p in pts):
            pts.append(cand)
    positions = np.array(pts)

    # k-nearest edges
    edge_set: set[tuple[int, int]] = set()
    d2 = ((positions[:, None, :] - positions[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    for a in range(n):
        for b in np.argsort(d2[a])[: params.degree]:
            edge_set.add((min(a, int(b)), max(a, int(b))))

    # spanning repair: connect components through their closest node pair
    parent = list(range(n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in sorted(edge_set):
        parent[find(a)] = find(b)
    while True:
        roots = {find(i) for i in range(n)}
        if len(roots) == 1:
            break
        best = None
        for a in range(n):
            for b in range(a + 1, n):
                if find(a) != find(b):
                    dd = d2[a, b]
                    if best is None or dd < best[0]:
                        best = (dd, a, b)
        _, a, b = best
        edge_set.add((a, b))
        parent[find(a)] = find(b)

    edges = [
        (a, b, float(np.hypot(*(positions[a] - positions[b]))))
        for a, b in sorted(edge_set)
    ]

    # landmarks: greedy, avoiding labels already used by graph neighbors
    adj: list[set[int]] = [set() for _ in range(n)]
    for a, b, _ in edges:
        adj[a].add(b)
        adj[b].add(a)
    landmarks = np.full(n, -1, dtype=np.int64)
    for u in range(n):
        used = {int(landmarks[v]) for v in sorted(adj[u]) if landmarks[v] >= 0}
        free = [l for l in range(params.landmark_count) if l not in used]
        pool = free if free else list(range(params.landmark_count))
        landmarks[u] = pool[int(rng.integers(len(pool)))]

    # per-sector view features
    L = params.landmark_count
    feats = rng.normal(0.0, params.view_noise, size=(n, params.k_views, params.d_view))
    width = TAU / params.k_views
    for u in range(n):
        feats[u, :, landmarks[u]] += 1.0
        by_sector: dict[int, tuple[float, int]] = {}
        for v in sorted(adj[u]):
            brg = math.atan2(*(positions[v] - positions[u])[::-1])
            sector = int((brg % TAU) / width) % params.k_views
            dist = float(np.hypot(*(positions[v] - positions[u])))
            if sector not in by_sector or dist < by_sector[sector][0]:
                by_sector[sector] = (dist, v)
        for sector, (_, v) in by_sector.items():
            feats[u, sector, L + landmarks[v]] += 1.0

    return WorldGraph(
        seed=seed,
        params=params,
        positions=positions,
        edges=edges,
        landmarks=landmarks,
        view_features=feats,
    )


# ---------------------------------------------------------------------------
# instructions
# ---------------------------------------------------------------------------


@dataclass
class Instruction:
    tokens: list[int]
    task_id: int
    segments: list[tuple[int, int]]  # token span per subtask, half-open

    def __len__(self) -> int:
        return len(self.tokens)


def synthesize_instruction(
    world: WorldGraph,
    reference_path: Sequence[int],
    start_heading: float,
    n_segments: int,
    rng: np.random.Generator,
    wordy: bool = False,
    task_id: int = 0,
) -> Instruction:
    """Render a path as direction/landmark tokens split into subtask segments.

    Heading at every node after the first is aligned with the direction of
    arrival. A first hop more than the hard-turn bin away from the start
    heading is re-oriented and announced with a TURN_AROUND token; a mid-path
    hop that sharp is a contract violation (such paths are discarded during
    sampling).
    """
    hops = len(reference_path) - 1
    if hops < 1:
        raise ContractError("reference path needs at least one hop")
    if not 1 <= n_segments <= 3:
        raise ContractError(f"n_segments must be in 1..3, got {n_segments}")
    if n_segments > hops:
        raise ContractError(f"cannot split {hops} hops into {n_segments} segments")
    vocab = world.vocab

    if n_segments == 1:
        cuts: list[int] = []
    else:
        cuts = sorted(rng.choice(np.arange(1, hops), size=n_segments - 1, replace=False).tolist())
    bounds = [0, *cuts, hops]

    forced_then = int(rng.integers(hops)) if wordy else -1
    heading = start_heading
    tokens: list[int] = []
    segments: list[tuple[int, int]] = []
    hop = 0
    for s in range(n_segments):
        seg_start = len(tokens)
        for hop in range(bounds[s], bounds[s + 1]):
            u, v = reference_path[hop], reference_path[hop + 1]
            brg = world.bearing(u, v)
            rel = wrap_angle(brg - heading)
            if hop == 0 and abs(rel) > HARD_MAX:
                tokens.append(vocab.TURN_AROUND)
                heading = brg
                rel = 0.0
            tok = direction_token(rel)
            if tok is None:
                raise ContractError(f"mid-path turn at hop {hop} exceeds the hard bin")
            if wordy:
                if hop == forced_then or rng.random() < 0.3:
                    tokens.append(vocab.THEN)
                if rng.random() < 0.5:
                    tokens.append(vocab.GO if rng.random() < 0.5 else vocab.HEAD)
            tokens.append(tok)
            tokens.append(vocab.landmark_token(int(world.landmarks[v])))
            heading = brg
        if s == n_segments - 1:
            tokens.append(vocab.STOP_AT)
            tokens.append(vocab.landmark_token(int(world.landmarks[reference_path[-1]])))
        segments.append((seg_start, len(tokens)))
        if s < n_segments - 1:
            tokens.append(vocab.SEP)
    return Instruction(tokens=tokens, task_id=task_id, segments=segments)


def literal_follow(
    world: WorldGraph,
    instruction: Instruction,
    start: int,
    start_heading: float,
) -> Optional[list[int]]:
    """Greedy oracle follower; returns the walked path or None on ambiguity.

    Obeys direction + landmark token pairs, skips separators and fillers,
    and requires a unique matching neighbor at every hop.
    """
    vocab = world.vocab
    node = start
    heading = start_heading
    path = [start]
    turn_around = False
    toks = instruction.tokens
    i = 0
    while i < len(toks):
        t = toks[i]
        if t in (vocab.SEP, vocab.THEN, vocab.GO, vocab.HEAD, vocab.PAD):
            i += 1
            continue
        if t == vocab.TURN_AROUND:
            turn_around = True
            i += 1
            continue
        if t == vocab.STOP_AT:
            if i + 1 >= len(toks) or not vocab.is_landmark(toks[i + 1]):
                return None
            want = toks[i + 1] - vocab.LANDMARK_BASE
            return path if int(world.landmarks[node]) == want else None
        if t in vocab.DIRECTION_TOKENS:
            if i + 1 >= len(toks) or not vocab.is_landmark(toks[i + 1]):
                return None
            want = toks[i + 1] - vocab.LANDMARK_BASE
            matches = []
            for v in world.neighbors(node):
                if int(world.landmarks[v]) != want:
                    continue
                rel = wrap_angle(world.bearing(node, v) - heading)
                if turn_around:
                    if abs(rel) > HARD_MAX and t == vocab.FORWARD:
                        matches.append(v)
                elif direction_token(rel) == t:
                    matches.append(v)
            if len(matches) != 1:
                return None
            node = matches[0]
            heading = world.bearing(path[-1], node)
            path.append(node)
            turn_around = False
            i += 2
            continue
        return None
    return None  # no STOP_AT marker


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------


@dataclass
class Episode:
    id: str
    world_seed: int
    start: int
    start_heading: float
    goal: int
    reference_path: list[int]
    instruction: Instruction
    task_id: int  # 1 shortest-style, 2 meandering-style, 3 augmented
    success_threshold: float = 3.0
    max_highlevel_steps: int = 20

    @property
    def hops(self) -> int:
        return len(self.reference_path) - 1


@dataclass
class EpisodeParams:
    min_geodesic: float = 9.0
    max_geodesic: float = 22.0
    min_hops: int = 3
    max_hops: int = 7
    success_threshold: float = 3.0
    max_highlevel_steps: int = 20
    detour_max_hops: int = 9


def _render_followable(
    world: WorldGraph,
    path: Sequence[int],
    heading: float,
    n_segments: int,
    rng: np.random.Generator,
    wordy: bool,
    task_id: int,
) -> Optional[Instruction]:
    try:
        instr = synthesize_instruction(
            world, path, heading, n_segments, rng, wordy=wordy, task_id=task_id
        )
    except ContractError:
        return None
    if literal_follow(world, instr, path[0], heading) != list(path):
        return None
    return instr


def sample_episode(
    world: WorldGraph,
    seed: int,
    style: str,
    params: EpisodeParams | None = None,
) -> Episode:
    """Sample one episode; shortest style follows the geodesic, meandering
    routes through 1-2 off-path detour waypoints and is strictly longer.

    Rejection-samples until the rendered instruction is literally followable
    and every mid-path turn stays within the hard bin.
    """
    if style not in ("shortest", "meandering"):
        raise SamplingError(f"unknown episode style {style!r}")
    params = params or EpisodeParams()
    rng = np.random.default_rng((world.seed, seed, 0 if style == "shortest" else 1))
    dist = world.apsp()
    n = world.n_nodes
    band = (dist >= params.min_geodesic) & (dist <= params.max_geodesic)
    np.fill_diagonal(band, False)
    pairs = np.argwhere(band)
    if pairs.size == 0:
        raise SamplingError("no node pair within the geodesic distance band")

    for _ in range(600):
        start, goal = (int(x) for x in pairs[rng.integers(len(pairs))])
        direct = world.shortest_path(start, goal)
        if style == "shortest":
            path = direct
            if not params.min_hops <= len(path) - 1 <= params.max_hops:
                continue
        else:
            n_detours = int(rng.integers(1, 3))
            off_path = [v for v in range(n) if v not in direct]
            if len(off_path) < n_detours:
                continue
            widx = rng.choice(len(off_path), size=n_detours, replace=False)
            waypoints = [off_path[int(i)] for i in widx]
            stations = [start, *waypoints, goal]
            path = [start]
            ok = True
            for a, b in zip(stations[:-1], stations[1:]):
                leg = world.shortest_path(a, b)
                if len(leg) < 2:
                    ok = False
                    break
                path.extend(leg[1:])
            if not ok or len(set(path)) != len(path):
                continue
            if not params.min_hops <= len(path) - 1 <= params.detour_max_hops:
                continue
            if world.path_length(path) <= dist[start, goal] + 1e-9:
                continue
        start_heading = float(rng.uniform(-math.pi, math.pi))
        max_segments = min(3, len(path) - 1)
        n_segments = int(rng.integers(1, max_segments + 1))
        wordy = bool(rng.random() < 0.5)
        task_id = 1 if style == "shortest" else 2
        instr = _render_followable(world, path, start_heading, n_segments, rng, wordy, task_id)
        if instr is None:
            continue
        return Episode(
            id=f"w{world.seed}-{style[0]}{seed}",
            world_seed=world.seed,
            start=start,
            start_heading=start_heading,
            goal=goal,
            reference_path=list(path),
            instruction=instr,
            task_id=task_id,
            success_threshold=params.success_threshold,
            max_highlevel_steps=params.max_highlevel_steps,
        )
    raise SamplingError(f"episode sampling failed for world {world.seed} seed {seed}")


def annotate_dataset(
    episodes: Sequence[Episode],
    worlds: dict[int, WorldGraph],
    per_trajectory_variants: int = 6,
    seed: int = 0,
) -> list[Episode]:
    """Six instruction variants per trajectory: segment counts {1,2,3},
    two rendering draws each (one plain, one wordy). Copies share geometry
    and carry task id 3.
    """
    if per_trajectory_variants != 6:
        raise ContractError("annotation emits exactly 6 variants (3 schemes x 2 draws)")
    out: list[Episode] = []
    for ep in episodes:
        world = worlds[ep.world_seed]
        if ep.hops < 3:
            raise ContractError(f"episode {ep.id} too short to split into 3 segments")
        rng = np.random.default_rng((seed, ep.world_seed, zlib.crc32(ep.id.encode())))
        k = 0
        for scheme in (1, 2, 3):
            for draw in (0, 1):
                instr = None
                for _ in range(40):
                    instr = _render_followable(
                        world,
                        ep.reference_path,
                        ep.start_heading,
                        scheme,
                        rng,
                        wordy=(draw == 1),
                        task_id=3,
                    )
                    if instr is not None:
                        break
                if instr is None:
                    raise ContractError(f"could not render variant for {ep.id}")
                out.append(
                    replace(ep, id=f"{ep.id}v{k}", instruction=instr, task_id=3)
                )
                k += 1
    return out


def split_dataset(
    episodes: Sequence[Episode], rft_fraction: float = 0.10, seed: int = 0
) -> tuple[list[Episode], list[Episode]]:
    """Seed-deterministic disjoint split into (sft, rft) sets."""
    if not episodes:
        raise ContractError("cannot split an empty episode list")
    if not 0.0 < rft_fraction < 1.0:
        raise ContractError(f"rft_fraction must be in (0, 1), got {rft_fraction}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(episodes))
    n_rft = max(1, int(round(len(episodes) * rft_fraction)))
    rft_idx = set(order[:n_rft].tolist())
    sft = [episodes[i] for i in range(len(episodes)) if i not in rft_idx]
    rft = [episodes[i] for i in range(len(episodes)) if i in rft_idx]
    return sft, rft


# ---------------------------------------------------------------------------
# file formats (line-delimited, version header first)
# ---------------------------------------------------------------------------

WORLD_FORMAT = {"format": "toporl/worlds", "version": 1}
EPISODE_FORMAT = {"format": "toporl/episodes", "version": 1}


def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def save_worlds(path: str | Path, worlds: Iterable[WorldGraph]) -> None:
    lines = [_dump(WORLD_FORMAT)]
    for w in worlds:
        lines.append(
            _dump(
                {
                    "seed": w.seed,
                    "params": w.params.to_dict(),
                    "positions": w.positions.tolist(),
                    "edges": [[a, b, l] for a, b, l in w.edges],
                    "landmarks": w.landmarks.tolist(),
                    "view_features": w.view_features.tolist(),
                }
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_worlds(path: str | Path) -> dict[int, WorldGraph]:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("format") != WORLD_FORMAT["format"]:
        raise ContractError(f"{path}: not a world file")
    if header.get("version") != WORLD_FORMAT["version"]:
        raise ContractError(f"{path}: unsupported world file version")
    out: dict[int, WorldGraph] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        rec = json.loads(line)
        w = WorldGraph(
            seed=rec["seed"],
            params=WorldParams(**rec["params"]),
            positions=np.array(rec["positions"]),
            edges=[(a, b, l) for a, b, l in rec["edges"]],
            landmarks=np.array(rec["landmarks"], dtype=np.int64),
            view_features=np.array(rec["view_features"]),
        )
        out[w.seed] = w
    return out


def episode_to_dict(ep: Episode) -> dict:
    return {
        "id": ep.id,
        "world_seed": ep.world_seed,
        "start": ep.start,
        "start_heading": ep.start_heading,
        "goal": ep.goal,
        "reference_path": ep.reference_path,
        "task_id": ep.task_id,
        "success_threshold": ep.success_threshold,
        "max_highlevel_steps": ep.max_highlevel_steps,
        "instruction": {
            "tokens": ep.instruction.tokens,
            "task_id": ep.instruction.task_id,
            "segments": [list(s) for s in ep.instruction.segments],
        },
    }


def episode_from_dict(rec: dict) -> Episode:
    instr = Instruction(
        tokens=list(rec["instruction"]["tokens"]),
        task_id=rec["instruction"]["task_id"],
        segments=[tuple(s) for s in rec["instruction"]["segments"]],
    )
    return Episode(
        id=rec["id"],
        world_seed=rec["world_seed"],
        start=rec["start"],
        start_heading=rec["start_heading"],
        goal=rec["goal"],
        reference_path=list(rec["reference_path"]),
        instruction=instr,
        task_id=rec["task_id"],
        success_threshold=rec["success_threshold"],
        max_highlevel_steps=rec["max_highlevel_steps"],
    )


def save_episodes(path: str | Path, episodes: Iterable[Episode]) -> None:
    lines = [_dump(EPISODE_FORMAT)]
    lines.extend(_dump(episode_to_dict(ep)) for ep in episodes)
    Path(path).write_text("\n".join(lines) + "\n")


def load_episodes(path: str | Path) -> list[Episode]:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("format") != EPISODE_FORMAT["format"]:
        raise ContractError(f"{path}: not an episode file")
    if header.get("version") != EPISODE_FORMAT["version"]:
        raise ContractError(f"{path}: unsupported episode file version")
    return [episode_from_dict(json.loads(l)) for l in lines[1:] if l.strip()]
