"""Navigation metrics and the two episode reward functions.

All point distances are geodesic (graph shortest-path) distances between
trace nodes. Success comparisons are strict (<), matching the reward's
success indicator. The DTW similarity is nDTW = exp(-DTW / (|R| * d_th))
with d_th equal to the episode success threshold.

Report files are CSV: one header, one row per episode (full-precision
values), then one aggregate row where rate-like columns are percentages with
two decimals.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import ContractError
from .simenv import EpisodeState
from .world import Episode, WorldGraph

REWARD_SUCCESS_RADIUS = 1.5  # success indicator threshold inside the reward
REWARD_DISTANCE_DIVISOR = 6.0

REPORT_COLUMNS = ("id", "NE", "SR", "OSR", "SPL", "gSPL", "nDTW", "SDTW", "reward")


@dataclass
class TrajectoryRecord:
    episode_id: str
    trace: list[int]
    length: float
    final_node: int
    stop_issued: bool


def record_from_state(state: EpisodeState) -> TrajectoryRecord:
    if not state.done:
        raise ContractError("cannot build a trajectory record from an unfinished episode")
    return TrajectoryRecord(
        episode_id=state.episode.id,
        trace=list(state.trace),
        length=state.length,
        final_node=state.current,
        stop_issued=state.stop_issued,
    )


def navigation_error(world: WorldGraph, traj: TrajectoryRecord, episode: Episode) -> float:
    return world.geodesic(traj.final_node, episode.goal)


def success(world: WorldGraph, traj: TrajectoryRecord, episode: Episode) -> int:
    ne = navigation_error(world, traj, episode)
    return int(traj.stop_issued and ne < episode.success_threshold)


def oracle_success(world: WorldGraph, traj: TrajectoryRecord, episode: Episode) -> int:
    d = world.apsp()
    best = min(d[n, episode.goal] for n in traj.trace)
    return int(best < episode.success_threshold)


def spl(world: WorldGraph, traj: TrajectoryRecord, episode: Episode) -> float:
    s = success(world, traj, episode)
    if not s:
        return 0.0
    shortest = world.geodesic(episode.start, episode.goal)
    return shortest / max(traj.length, shortest)


def gspl(world: WorldGraph, traj: TrajectoryRecord, episode: Episode) -> float:
    s = success(world, traj, episode)
    if not s:
        return 0.0
    ref_len = world.path_length(episode.reference_path)
    return ref_len / max(traj.length, ref_len)


def dtw(world: WorldGraph, p_nodes: Sequence[int], r_nodes: Sequence[int]) -> float:
    """DTW cost under geodesic point distance; DTW of two empty paths is 0."""
    if len(p_nodes) == 0 and len(r_nodes) == 0:
        return 0.0
    if len(p_nodes) == 0 or len(r_nodes) == 0:
        return float("inf")
    d = world.apsp()
    dist = d[np.ix_(np.asarray(p_nodes), np.asarray(r_nodes))]
    return float(kernels.dtw_cost(np.ascontiguousarray(dist)))


def ndtw(
    world: WorldGraph,
    traj: TrajectoryRecord,
    episode: Episode,
    d_th: Optional[float] = None,
) -> float:
    d_th = episode.success_threshold if d_th is None else d_th
    cost = dtw(world, traj.trace, episode.reference_path)
    return float(np.exp(-cost / (len(episode.reference_path) * d_th)))


def sdtw(world: WorldGraph, traj: TrajectoryRecord, episode: Episode) -> float:
    return success(world, traj, episode) * ndtw(world, traj, episode)


def reward_r2r(world: WorldGraph, traj: TrajectoryRecord, episode: Episode) -> float:
    """Success indicator at 1.5 m, plus SPL, minus final distance over 6."""
    d_final = navigation_error(world, traj, episode)
    indicator = 1.0 if d_final < REWARD_SUCCESS_RADIUS else 0.0
    return indicator + spl(world, traj, episode) - d_final / REWARD_DISTANCE_DIVISOR


def reward_rxr(world: WorldGraph, traj: TrajectoryRecord, episode: Episode) -> float:
    """nDTW + SDTW + gSPL, minus final distance over 6."""
    d_final = navigation_error(world, traj, episode)
    return (
        ndtw(world, traj, episode)
        + sdtw(world, traj, episode)
        + gspl(world, traj, episode)
        - d_final / REWARD_DISTANCE_DIVISOR
    )


def episode_reward(
    world: WorldGraph, traj: TrajectoryRecord, episode: Episode, kind: str
) -> float:
    if kind == "r2r":
        return reward_r2r(world, traj, episode)
    if kind == "rxr":
        return reward_rxr(world, traj, episode)
    raise ContractError(f"unknown reward kind {kind!r}")


@dataclass
class MetricRow:
    id: str
    ne: float
    sr: int
    osr: int
    spl: float
    gspl: float
    ndtw: float
    sdtw: float
    reward: float


def metric_row(
    world: WorldGraph, traj: TrajectoryRecord, episode: Episode, reward_kind: str
) -> MetricRow:
    return MetricRow(
        id=traj.episode_id,
        ne=navigation_error(world, traj, episode),
        sr=success(world, traj, episode),
        osr=oracle_success(world, traj, episode),
        spl=spl(world, traj, episode),
        gspl=gspl(world, traj, episode),
        ndtw=ndtw(world, traj, episode),
        sdtw=sdtw(world, traj, episode),
        reward=episode_reward(world, traj, episode, reward_kind),
    )


@dataclass
class MetricReport:
    rows: list[MetricRow]

    def aggregate(self) -> dict[str, float]:
        if not self.rows:
            return {c: 0.0 for c in REPORT_COLUMNS[1:]}
        return {
            "NE": float(np.mean([r.ne for r in self.rows])),
            "SR": float(np.mean([r.sr for r in self.rows])),
            "OSR": float(np.mean([r.osr for r in self.rows])),
            "SPL": float(np.mean([r.spl for r in self.rows])),
            "gSPL": float(np.mean([r.gspl for r in self.rows])),
            "nDTW": float(np.mean([r.ndtw for r in self.rows])),
            "SDTW": float(np.mean([r.sdtw for r in self.rows])),
            "reward": float(np.mean([r.reward for r in self.rows])),
        }

    def to_csv(self) -> str:
        lines = [",".join(REPORT_COLUMNS)]
        for r in self.rows:
            lines.append(
                ",".join(
                    [
                        r.id,
                        repr(r.ne),
                        str(r.sr),
                        str(r.osr),
                        repr(r.spl),
                        repr(r.gspl),
                        repr(r.ndtw),
                        repr(r.sdtw),
                        repr(r.reward),
                    ]
                )
            )
        agg = self.aggregate()
        lines.append(
            ",".join(
                [
                    "aggregate",
                    f"{agg['NE']:.4f}",
                    f"{agg['SR'] * 100:.2f}",
                    f"{agg['OSR'] * 100:.2f}",
                    f"{agg['SPL'] * 100:.2f}",
                    f"{agg['gSPL'] * 100:.2f}",
                    f"{agg['nDTW'] * 100:.2f}",
                    f"{agg['SDTW'] * 100:.2f}",
                    f"{agg['reward']:.4f}",
                ]
            )
        )
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())
