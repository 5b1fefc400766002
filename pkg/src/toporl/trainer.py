"""Three-stage training: offline pretraining, DAgger SFT, GRPO RFT.

Pretraining alternates action-prediction and masked-token batches 1:1 over
teacher (expert) trajectories. SFT rolls the policy out online, executing the
expert with probability p and a policy sample otherwise, always labeling with
the expert. RFT samples a group of trajectories per episode, normalizes the
episode rewards into per-step advantages, and optimizes the clipped
importance-ratio surrogate with a KL penalty against the frozen pre-RFT
reference policy.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContractError
from .metrics import MetricReport, episode_reward, metric_row, record_from_state
from .numcore import Tensor
from .policy import DropoutCtx, Policy, sample_action
from .simenv import STOP_ACTION, expert_action, reset, step_highlevel
from .topomap import TopoMap, integrate_step
from .world import Episode, Vocab, WorldGraph


@dataclass
class TrainConfig:
    stage: str = "pretrain"  # pretrain | sft | rft
    seed: int = 0
    lr: float = 1e-3
    batch_size: int = 8
    total_steps: int = 1000
    eval_interval: int = 250
    dropout_rate: float = 0.1
    reward_kind: str = "r2r"  # r2r | rxr; also selects the checkpoint score
    # pretrain
    mlm_mask_rate: float = 0.15
    aug_fraction: float = 0.5  # share of pretrain samples drawn from augmented data
    # sft
    dagger_p_start: float = 0.75
    dagger_p_end: float = 0.25
    # dataset composition and the sft/rft split
    use_augmented: bool = True
    use_crosstask: bool = True
    rft_fraction: float = 0.10
    split_seed: int = 0
    # rft
    clip_eps: float = 0.2
    kl_beta: float = 0.04
    group_size: int = 8
    mu_updates: int = 1
    sample_dropout: bool = True
    frozen_dropout: bool = True
    temperature_mode: str = "off"  # off | decay
    temp_start: float = 2.0
    temp_end: float = 1.0

    def __post_init__(self):
        if self.stage not in ("pretrain", "sft", "rft"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.reward_kind not in ("r2r", "rxr"):
            raise ConfigError(f"unknown reward kind {self.reward_kind!r}")
        if self.clip_eps <= 0:
            raise ConfigError("clip_eps must be positive")
        if self.kl_beta < 0:
            raise ConfigError("kl_beta must be non-negative")
        if self.group_size < 2:
            raise ConfigError("group_size must be at least 2")
        if self.mu_updates < 1:
            raise ConfigError("mu_updates must be at least 1")
        if not 0.0 <= self.dagger_p_start <= 1.0 or not 0.0 <= self.dagger_p_end <= 1.0:
            raise ConfigError("dagger mixing probabilities must be in [0, 1]")
        if not 0.0 <= self.mlm_mask_rate < 1.0:
            raise ConfigError("mlm_mask_rate must be in [0, 1)")
        if not 0.0 < self.rft_fraction < 1.0:
            raise ConfigError("rft_fraction must be in (0, 1)")
        if self.temperature_mode not in ("off", "decay"):
            raise ConfigError(f"unknown temperature mode {self.temperature_mode!r}")


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------


@dataclass
class DecisionRecord:
    tmap: TopoMap  # snapshot before acting
    heading: float
    action: int  # executed action: node id or STOP_ACTION
    action_index: int  # its index in the canonical token order
    logp_old: float
    expert: Optional[int] = None  # DAgger supervision label


@dataclass
class Rollout:
    episode: Episode
    records: list[DecisionRecord]
    final_state: object
    reward: Optional[float] = None
    final_map: Optional[TopoMap] = None


def _frontier_candidates(tmap: TopoMap) -> list[int]:
    return tmap.frontier() + [STOP_ACTION]


def run_policy_rollout(
    world: WorldGraph,
    episode: Episode,
    policy: Policy,
    ctx: DropoutCtx,
    mode: str,
    rng: Optional[np.random.Generator] = None,
    temperature: float = 1.0,
    execute_expert_prob: float = 0.0,
    label_expert: bool = False,
) -> Rollout:
    """Roll one episode with the policy in the loop (no gradients).

    With execute_expert_prob > 0 the expert action is executed with that
    probability (the policy still proposes and is still scored); with
    label_expert the expert action is recorded on every step.
    """
    state, _ = reset(world, episode)
    tmap = TopoMap()
    integrate_step(tmap, state, world)
    text_feats = None
    if not ctx.on_frozen:
        with nc.no_grad():
            text_feats = policy.encode_text(episode.instruction, ctx)
    records: list[DecisionRecord] = []
    while not state.done:
        snapshot = tmap.snapshot()
        with nc.no_grad():
            res = policy.forward_plan(
                world, tmap, state.heading, episode.instruction, ctx, text_feats=text_feats
            )
        logits = res.masked_logits()
        idx, logp = sample_action(logits, mode, rng=rng, temperature=temperature)
        action = res.order[idx]
        expert = None
        if label_expert or execute_expert_prob > 0.0:
            expert = expert_action(world, state, episode, tmap.frontier())
        executed = action
        if execute_expert_prob > 0.0 and rng.random() < execute_expert_prob:
            executed = expert
        exec_index = res.order.index(executed)
        if exec_index != idx:
            # log-prob of the executed action under the distribution sampled from
            finite = np.isfinite(logits)
            scaled = logits / temperature
            mx = scaled[finite].max()
            logp = float(scaled[exec_index] - mx - np.log(np.exp(scaled[finite] - mx).sum()))
        records.append(
            DecisionRecord(
                tmap=snapshot,
                heading=state.heading,
                action=executed,
                action_index=exec_index,
                logp_old=logp,
                expert=expert,
            )
        )
        state, _ = step_highlevel(world, state, executed, _frontier_candidates(tmap))
        if executed != STOP_ACTION:
            integrate_step(tmap, state, world)
    return Rollout(episode=episode, records=records, final_state=state)


def expert_rollout(world: WorldGraph, episode: Episode) -> Rollout:
    """Teacher trajectory: expert actions only, with map snapshots."""
    state, _ = reset(world, episode)
    tmap = TopoMap()
    integrate_step(tmap, state, world)
    records: list[DecisionRecord] = []
    while not state.done:
        snapshot = tmap.snapshot()
        act = expert_action(world, state, episode, tmap.frontier())
        order = snapshot.order()
        records.append(
            DecisionRecord(
                tmap=snapshot,
                heading=state.heading,
                action=act,
                action_index=order.index(act),
                logp_old=0.0,
                expert=act,
            )
        )
        state, _ = step_highlevel(world, state, act, _frontier_candidates(tmap))
        if act != STOP_ACTION:
            integrate_step(tmap, state, world)
    # the full teacher map conditions masked-token pretraining
    return Rollout(episode=episode, records=records, final_state=state, final_map=tmap)


def dagger_rollout(
    policy: Policy,
    world: WorldGraph,
    episode: Episode,
    p: float,
    rng: np.random.Generator,
    ctx: Optional[DropoutCtx] = None,
) -> Rollout:
    """Online imitation rollout: execute expert w.p. p, else a policy sample;
    the expert action is recorded as the label either way."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"mixing probability must be in [0, 1], got {p}")
    ctx = ctx or DropoutCtx.eval_mode()
    return run_policy_rollout(
        world,
        episode,
        policy,
        ctx,
        mode="sample",
        rng=rng,
        execute_expert_prob=p,
        label_expert=True,
    )


# ---------------------------------------------------------------------------
# view pools (shared encodings inside one update batch)
# ---------------------------------------------------------------------------


def _needed_sources(tmap: TopoMap) -> set[int]:
    out = set()
    for node, e in tmap.nodes.items():
        out.add(node if e.status == "visited" else e.parent)
    return out


def _make_view_pool(policy: Policy, world: WorldGraph, maps: Sequence[TopoMap], ctx: DropoutCtx):
    ids = sorted(set().union(*[_needed_sources(m) for m in maps]))
    k = policy.cfg.k_views
    enc = policy.encode_views_batch(np.stack([world.view_features[i] for i in ids]), ctx)
    return enc, {nid: j * k for j, nid in enumerate(ids)}


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


class TeacherCache:
    """Lazy expert rollouts keyed by episode id."""

    def __init__(self, worlds: dict[int, WorldGraph]):
        self.worlds = worlds
        self._cache: dict[str, Rollout] = {}

    def get(self, episode: Episode) -> Rollout:
        if episode.id not in self._cache:
            self._cache[episode.id] = expert_rollout(self.worlds[episode.world_seed], episode)
        return self._cache[episode.id]


def _mask_instruction(instr, rate: float, rng: np.random.Generator, mask_token: int):
    """Mask tokens at the given rate (at least one); returns (masked, positions)."""
    n = len(instr.tokens)
    picks = np.flatnonzero(rng.random(n) < rate)
    if picks.size == 0:
        picks = np.array([int(rng.integers(n))])
    tokens = list(instr.tokens)
    for pos in picks:
        tokens[pos] = mask_token
    return replace(instr, tokens=tokens), picks.tolist()


def pretrain_step(
    policy: Policy,
    batch: Sequence[Episode],
    cfg: TrainConfig,
    cache: TeacherCache,
    opt_state: nc.AdamState,
    rng: np.random.Generator,
    step_idx: int,
) -> tuple[Optional[float], Optional[float]]:
    """One alternating pretraining batch; returns (sap_loss, mlm_loss).

    Even batches train next-action prediction on a random teacher prefix;
    odd batches train masked-token reconstruction on the full teacher map.
    One optimizer step either way.
    """
    if not batch:
        raise ContractError("empty pretraining batch")
    do_sap = step_idx % 2 == 0
    ctx = DropoutCtx.train_mode(rng, cfg.dropout_rate)
    sap_loss = mlm_loss = None
    with nc.Tape():
        total = None
        for ep in batch:
            teacher = cache.get(ep)
            world = cache.worlds[ep.world_seed]
            if do_sap:
                rec = teacher.records[int(rng.integers(len(teacher.records)))]
                res = policy.forward_plan(world, rec.tmap, rec.heading, ep.instruction, ctx)
                term = nc.cross_entropy(res.scores, rec.action_index, mask=res.cand_mask)
            else:
                masked, positions = _mask_instruction(
                    ep.instruction, cfg.mlm_mask_rate, rng, mask_token=Vocab.MASK
                )
                t0 = policy.encode_text(masked, ctx)
                fmap = teacher.final_map
                res = policy.forward_plan(
                    world, fmap, teacher.final_state.heading, masked, ctx, text_feats=t0
                )
                logits = policy.mlm_logits(res.t_sym, positions)
                ce = None
                for j, pos in enumerate(positions):
                    row = nc.reshape(nc.take_rows(logits, [j]), (policy.cfg.vocab_size,))
                    piece = nc.cross_entropy(row, ep.instruction.tokens[pos])
                    ce = piece if ce is None else nc.add(ce, piece)
                term = nc.scale(ce, 1.0 / len(positions))
            total = term if total is None else nc.add(total, term)
        loss = nc.scale(total, 1.0 / len(batch))
        nc.backward(loss)
    nc.adam_step(policy.params, opt_state, lr=cfg.lr)
    policy.bump_version()
    if do_sap:
        sap_loss = loss.item()
    else:
        mlm_loss = loss.item()
    return sap_loss, mlm_loss


def pretrain_accuracy(
    policy: Policy,
    episodes: Sequence[Episode],
    cache: TeacherCache,
    cfg: TrainConfig,
) -> tuple[float, float]:
    """Teacher-forced SAP accuracy over all steps plus MLM accuracy under a
    fixed per-episode masking; deterministic (dropout off, greedy)."""
    ctx = DropoutCtx.eval_mode()
    sap_hits = sap_total = mlm_hits = mlm_total = 0
    for ep in episodes:
        world = cache.worlds[ep.world_seed]
        teacher = cache.get(ep)
        with nc.no_grad():
            text_feats = policy.encode_text(ep.instruction, ctx)
            for rec in teacher.records:
                res = policy.forward_plan(
                    world, rec.tmap, rec.heading, ep.instruction, ctx, text_feats=text_feats
                )
                sap_hits += int(np.argmax(res.masked_logits()) == rec.action_index)
                sap_total += 1
            mask_rng = np.random.default_rng((cfg.seed, zlib.crc32(ep.id.encode())))
            masked, positions = _mask_instruction(
                ep.instruction, cfg.mlm_mask_rate, mask_rng, Vocab.MASK
            )
            t0 = policy.encode_text(masked, ctx)
            res = policy.forward_plan(
                world, teacher.final_map, teacher.final_state.heading, masked, ctx, text_feats=t0
            )
            logits = policy.mlm_logits(res.t_sym, positions)
            for j, pos in enumerate(positions):
                mlm_hits += int(np.argmax(logits.data[j]) == ep.instruction.tokens[pos])
                mlm_total += 1
    return sap_hits / max(sap_total, 1), mlm_hits / max(mlm_total, 1)


# ---------------------------------------------------------------------------
# online SFT (DAgger)
# ---------------------------------------------------------------------------


def sft_update(
    policy: Policy,
    worlds: dict[int, WorldGraph],
    rollouts: Sequence[Rollout],
    cfg: TrainConfig,
    opt_state: nc.AdamState,
    rng: np.random.Generator,
) -> float:
    """Cross-entropy of expert labels at every visited state; one Adam step."""
    if not rollouts:
        raise ContractError("empty SFT batch")
    ctx = DropoutCtx.train_mode(rng, cfg.dropout_rate)
    n_records = sum(len(r.records) for r in rollouts)
    if n_records == 0:
        raise ContractError("SFT batch contains no decisions")
    with nc.Tape():
        total = None
        for ro in rollouts:
            world = worlds[ro.episode.world_seed]
            text_feats = policy.encode_text(ro.episode.instruction, ctx)
            pool = _make_view_pool(policy, world, [r.tmap for r in ro.records], ctx)
            for rec in ro.records:
                res = policy.forward_plan(
                    world,
                    rec.tmap,
                    rec.heading,
                    ro.episode.instruction,
                    ctx,
                    text_feats=text_feats,
                    view_pool=pool,
                )
                order = rec.tmap.order()
                target = order.index(rec.expert)
                term = nc.cross_entropy(res.scores, target, mask=res.cand_mask)
                total = term if total is None else nc.add(total, term)
        loss = nc.scale(total, 1.0 / n_records)
        nc.backward(loss)
    nc.adam_step(policy.params, opt_state, lr=cfg.lr)
    policy.bump_version()
    return loss.item()


def dagger_p(cfg: TrainConfig, step: int) -> float:
    if cfg.total_steps <= 1:
        return cfg.dagger_p_start
    frac = min(step / (cfg.total_steps - 1), 1.0)
    return cfg.dagger_p_start + frac * (cfg.dagger_p_end - cfg.dagger_p_start)


# ---------------------------------------------------------------------------
# GRPO
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryGroup:
    episode: Episode
    rollouts: list[Rollout]
    rewards: np.ndarray
    policy_version: int
    consumed: bool = False


def rft_temperature(cfg: TrainConfig, step: int) -> float:
    if cfg.temperature_mode == "off":
        return 1.0
    if cfg.total_steps <= 1:
        return cfg.temp_end
    frac = min(step / (cfg.total_steps - 1), 1.0)
    return cfg.temp_start + frac * (cfg.temp_end - cfg.temp_start)


def grpo_sample_group(
    policy: Policy,
    world: WorldGraph,
    episode: Episode,
    cfg: TrainConfig,
    rng: np.random.Generator,
    temperature: float = 1.0,
    mode: str = "sample",
) -> TrajectoryGroup:
    """Sample G trajectories for one episode under the current policy."""
    if mode != "sample":
        raise ConfigError("group sampling requires categorical sampling (greedy forbidden)")
    ctx = DropoutCtx.rft_sampling(rng, cfg.dropout_rate, cfg.sample_dropout, cfg.frozen_dropout)
    rollouts = []
    rewards = np.empty(cfg.group_size)
    for i in range(cfg.group_size):
        ro = run_policy_rollout(
            world, episode, policy, ctx, mode="sample", rng=rng, temperature=temperature
        )
        traj = record_from_state(ro.final_state)
        ro.reward = episode_reward(world, traj, episode, cfg.reward_kind)
        rewards[i] = ro.reward
        rollouts.append(ro)
    return TrajectoryGroup(
        episode=episode, rollouts=rollouts, rewards=rewards, policy_version=policy.version
    )


def compute_advantages(rewards: np.ndarray) -> np.ndarray:
    """Group-normalized advantages: (r - mean) / population std.

    A degenerate group (std below 1e-8) yields all-zero advantages so it
    contributes no surrogate gradient.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ContractError("advantage normalization needs a group of at least 2 rewards")
    std = float(r.std())
    if std < 1e-8:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def grpo_update(
    policy: Policy,
    policy_ref: Policy,
    group: TrajectoryGroup,
    cfg: TrainConfig,
    opt_state: nc.AdamState,
    rng: np.random.Generator,
    worlds: dict[int, WorldGraph],
) -> dict[str, float]:
    """Clipped-ratio surrogate with per-step KL penalty; mu optimizer passes.

    The loss is the flat mean over all steps of all rollouts of
    -[min(rho*A, clip(rho)*A) - beta*k3], with k3 the non-negative KL
    estimator at the taken action against the reference policy.
    """
    if group.consumed:
        raise ContractError("trajectory group was already consumed (strictly on-policy)")
    if group.policy_version != policy.version:
        raise ContractError("trajectory group was sampled from a different policy snapshot")
    world = worlds[group.episode.world_seed]
    instr = group.episode.instruction
    adv = compute_advantages(group.rewards)
    n_steps = sum(len(ro.records) for ro in group.rollouts)
    stats = {"surrogate": 0.0, "kl": 0.0, "loss": 0.0}
    ref_ctx = DropoutCtx.eval_mode()
    for _ in range(cfg.mu_updates):
        ctx = DropoutCtx.rft_update(rng, cfg.dropout_rate, cfg.frozen_dropout)
        with nc.Tape():
            text_feats = policy.encode_text(instr, ctx)
            with nc.no_grad():
                ref_text = policy_ref.encode_text(instr, ref_ctx)
            all_maps = [rec.tmap for ro in group.rollouts for rec in ro.records]
            pool = _make_view_pool(policy, world, all_maps, ctx)
            surr_sum = None
            kl_sum = None
            for i, ro in enumerate(group.rollouts):
                a_i = float(adv[i])
                for rec in ro.records:
                    res = policy.forward_plan(
                        world, rec.tmap, rec.heading, instr, ctx,
                        text_feats=text_feats, view_pool=pool,
                    )
                    logp_new = nc.scale(
                        nc.cross_entropy(res.scores, rec.action_index, mask=res.cand_mask), -1.0
                    )
                    ratio = nc.exp(nc.sub(logp_new, Tensor(rec.logp_old)))
                    surr = nc.minimum(
                        nc.scale(ratio, a_i),
                        nc.scale(nc.clip_const(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), a_i),
                    )
                    surr_sum = surr if surr_sum is None else nc.add(surr_sum, surr)
                    if cfg.kl_beta > 0.0:
                        with nc.no_grad():
                            ref_res = policy_ref.forward_plan(
                                world, rec.tmap, rec.heading, instr, ref_ctx, text_feats=ref_text
                            )
                            ref_ce = nc.cross_entropy(
                                ref_res.scores, rec.action_index, mask=ref_res.cand_mask
                            )
                        delta = nc.sub(logp_new, Tensor(-ref_ce.item()))  # logp_new - logp_ref
                        k3 = nc.sub(nc.add(nc.exp(nc.scale(delta, -1.0)), delta), Tensor(1.0))
                        kl_sum = k3 if kl_sum is None else nc.add(kl_sum, k3)
            objective = surr_sum
            if kl_sum is not None:
                objective = nc.sub(objective, nc.scale(kl_sum, cfg.kl_beta))
            loss = nc.scale(objective, -1.0 / n_steps)
            nc.backward(loss)
        nc.adam_step(policy.params, opt_state, lr=cfg.lr)
        policy.bump_version()
        stats["loss"] = loss.item()
        stats["surrogate"] = float(surr_sum.item()) / n_steps
        stats["kl"] = float(kl_sum.item()) / n_steps if kl_sum is not None else 0.0
    group.consumed = True
    return stats


# ---------------------------------------------------------------------------
# evaluation and checkpoint selection
# ---------------------------------------------------------------------------


def evaluate(
    policy: Policy,
    worlds: dict[int, WorldGraph],
    episodes: Sequence[Episode],
    reward_kind: str = "r2r",
    traj_log: Optional[Callable[[dict], None]] = None,
) -> MetricReport:
    """Greedy, dropout-free evaluation; one metric row per episode."""
    ctx = DropoutCtx.eval_mode()
    rows = []
    for ep in episodes:
        world = worlds[ep.world_seed]
        state, _ = reset(world, ep)
        tmap = TopoMap()
        integrate_step(tmap, state, world)
        with nc.no_grad():
            text_feats = policy.encode_text(ep.instruction, ctx)
        while not state.done:
            with nc.no_grad():
                res = policy.forward_plan(
                    world, tmap, state.heading, ep.instruction, ctx, text_feats=text_feats
                )
            logits = res.masked_logits()
            idx, _ = sample_action(logits, "greedy")
            action = res.order[idx]
            if traj_log is not None:
                finite = np.isfinite(logits)
                mx = logits[finite].max()
                lp = logits - mx - np.log(np.exp(logits[finite] - mx).sum())
                traj_log(
                    {
                        "episode": ep.id,
                        "step": state.step_count,
                        "action": action,
                        "logp": {
                            str(res.order[j]): float(lp[j]) for j in range(len(logits)) if finite[j]
                        },
                        "expert": expert_action(world, state, ep, tmap.frontier()),
                        "cum_length": state.length,
                    }
                )
            state, _ = step_highlevel(world, state, action, _frontier_candidates(tmap))
            if action != STOP_ACTION:
                integrate_step(tmap, state, world)
        rows.append(metric_row(world, record_from_state(state), ep, reward_kind))
    return MetricReport(rows=rows)


def select_checkpoint(history: Sequence[tuple[str, float]]) -> str:
    """Argmax of (checkpoint id, score); ties go to the earliest entry."""
    if not history:
        raise ContractError("no evaluated checkpoints to select from")
    best_id, best_score = history[0]
    for ckpt_id, score in history[1:]:
        if score > best_score:
            best_id, best_score = ckpt_id, score
    return best_id


def selection_score(stage: str, reward_kind: str, agg: dict[str, float]) -> float:
    """Stage- and task-appropriate checkpoint score."""
    if stage == "pretrain":
        return agg["sap_acc"] + agg["mlm_acc"]
    if reward_kind == "rxr":
        return agg["nDTW"] + agg["SDTW"]
    return agg["SR"] + agg["SPL"]


# ---------------------------------------------------------------------------
# stage drivers
# ---------------------------------------------------------------------------


def _cycle_indices(rng: np.random.Generator, n: int, count: int) -> list[int]:
    """count indices cycling over reshuffled epochs of range(n)."""
    out: list[int] = []
    while len(out) < count:
        out.extend(rng.permutation(n).tolist())
    return out[:count]


def run_pretrain(
    policy: Policy,
    worlds: dict[int, WorldGraph],
    train_eps: Sequence[Episode],
    val_eps: Sequence[Episode],
    cfg: TrainConfig,
    log_fn: Callable[[dict], None] = lambda rec: None,
    ckpt_fn: Optional[Callable[[int, Policy, dict], str]] = None,
) -> list[tuple[str, float]]:
    """Alternating SAP/MLM pretraining with periodic accuracy checkpoints."""
    if not train_eps:
        raise ContractError("pretraining needs a non-empty training set")
    policy.set_all_trainable()
    cache = TeacherCache(worlds)
    opt = nc.init_adam(policy.params)
    rng = np.random.default_rng(cfg.seed)
    idx = _cycle_indices(rng, len(train_eps), cfg.total_steps * cfg.batch_size)
    history: list[tuple[str, float]] = []
    for step in range(cfg.total_steps):
        batch = [train_eps[i] for i in idx[step * cfg.batch_size : (step + 1) * cfg.batch_size]]
        sap_loss, mlm_loss = pretrain_step(policy, batch, cfg, cache, opt, rng, step)
        log_fn(
            {
                "stage": "pretrain",
                "step": step,
                "sap_loss": sap_loss,
                "mlm_loss": mlm_loss,
                "seed": cfg.seed,
            }
        )
        if (step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.total_steps:
            sap_acc, mlm_acc = pretrain_accuracy(policy, val_eps, cache, cfg)
            agg = {"sap_acc": sap_acc, "mlm_acc": mlm_acc}
            score = selection_score("pretrain", cfg.reward_kind, agg)
            log_fn({"stage": "pretrain", "step": step, "eval": agg, "score": score, "seed": cfg.seed})
            if ckpt_fn is not None:
                history.append((ckpt_fn(step, policy, agg), score))
    return history


def run_sft(
    policy: Policy,
    worlds: dict[int, WorldGraph],
    train_eps: Sequence[Episode],
    val_eps: Sequence[Episode],
    cfg: TrainConfig,
    log_fn: Callable[[dict], None] = lambda rec: None,
    ckpt_fn: Optional[Callable[[int, Policy, dict], str]] = None,
) -> list[tuple[str, float]]:
    """Online DAgger: mixed-execution rollouts, expert-labeled updates."""
    if not train_eps:
        raise ContractError("SFT needs a non-empty training set")
    policy.set_all_trainable()
    opt = nc.init_adam(policy.params)
    rng = np.random.default_rng(cfg.seed)
    idx = _cycle_indices(rng, len(train_eps), cfg.total_steps * cfg.batch_size)
    history: list[tuple[str, float]] = []
    for step in range(cfg.total_steps):
        p = dagger_p(cfg, step)
        batch = [train_eps[i] for i in idx[step * cfg.batch_size : (step + 1) * cfg.batch_size]]
        rollouts = [
            dagger_rollout(policy, worlds[ep.world_seed], ep, p, rng) for ep in batch
        ]
        loss = sft_update(policy, worlds, rollouts, cfg, opt, rng)
        log_fn({"stage": "sft", "step": step, "loss": loss, "p": p, "seed": cfg.seed})
        if (step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.total_steps:
            agg = evaluate(policy, worlds, val_eps, cfg.reward_kind).aggregate()
            score = selection_score("sft", cfg.reward_kind, agg)
            log_fn({"stage": "sft", "step": step, "eval": agg, "score": score, "seed": cfg.seed})
            if ckpt_fn is not None:
                history.append((ckpt_fn(step, policy, agg), score))
    return history


def run_rft(
    policy: Policy,
    worlds: dict[int, WorldGraph],
    train_eps: Sequence[Episode],
    val_eps: Sequence[Episode],
    cfg: TrainConfig,
    log_fn: Callable[[dict], None] = lambda rec: None,
    ckpt_fn: Optional[Callable[[int, Policy, dict], str]] = None,
) -> list[tuple[str, float]]:
    """Closed-loop GRPO against a frozen pre-RFT reference policy."""
    if not train_eps:
        raise ContractError("RFT needs a non-empty training set")
    policy_ref = policy.snapshot()
    policy.set_rft_trainable()
    opt = nc.init_adam(policy.params)
    rng = np.random.default_rng(cfg.seed)
    idx = _cycle_indices(rng, len(train_eps), cfg.total_steps)
    history: list[tuple[str, float]] = []
    for step in range(cfg.total_steps):
        episode = train_eps[idx[step]]
        temp = rft_temperature(cfg, step)
        group = grpo_sample_group(
            policy, worlds[episode.world_seed], episode, cfg, rng, temperature=temp
        )
        stats = grpo_update(policy, policy_ref, group, cfg, opt, rng, worlds)
        log_fn(
            {
                "stage": "rft",
                "step": step,
                "loss": stats["loss"],
                "surrogate": stats["surrogate"],
                "kl": stats["kl"],
                "reward_mean": float(group.rewards.mean()),
                "reward_std": float(group.rewards.std()),
                "temperature": temp,
                "clip_eps": cfg.clip_eps,
                "kl_beta": cfg.kl_beta,
                "seed": cfg.seed,
            }
        )
        if (step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.total_steps:
            agg = evaluate(policy, worlds, val_eps, cfg.reward_kind).aggregate()
            score = selection_score("rft", cfg.reward_kind, agg)
            log_fn({"stage": "rft", "step": step, "eval": agg, "score": score, "seed": cfg.seed})
            if ckpt_fn is not None:
                history.append((ckpt_fn(step, policy, agg), score))
    return history
