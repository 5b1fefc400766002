"""The planner network: encoders, dual-phase fusion, task heads, sampling.

Text tokens and graph tokens are fused by a stack of symmetric cross-attention
layers (unshared weights per direction) followed by per-stream self-attention
and FFN blocks. A refinement step then lets the fused graph tokens query the
fused text once more; its FFN output is concatenated onto the graph tokens,
doubling their width before the action-scoring head.

Parameters live in a flat name->Tensor dict. Name prefixes define the
freezing groups used during reinforcement fine-tuning: only ``dpft.``,
``refine.`` and ``sap.`` stay trainable there; ``text.``, ``pano.``,
``graph.`` and ``mlm.`` are frozen (their dropout can stay live, which is a
separate switch carried by :class:`DropoutCtx`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numcore as nc
from .errors import ContractError, DegenerateDistributionError
from .numcore import Tensor
from .world import Instruction

FROZEN_PREFIXES = ("text.", "pano.", "graph.", "mlm.")
RFT_TRAINABLE_PREFIXES = ("dpft.", "refine.", "sap.")

STAGE_CODES = {"none": 0, "pretrain": 1, "sft": 2, "rft": 3}
STAGE_NAMES = {v: k for k, v in STAGE_CODES.items()}


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    heads: int = 4
    l_text: int = 2
    l_pano: int = 2
    l_fuse: int = 4
    d_ff: int = 128
    vocab_size: int = 64
    n_t_max: int = 48
    k_views: int = 12
    d_view: int = 32
    max_steps: int = 20
    n_types: int = 4
    n_tasks: int = 4

    def __post_init__(self):
        if self.d % self.heads:
            raise ContractError(f"d={self.d} not divisible by heads={self.heads}")


@dataclass
class DropoutCtx:
    """Per-forward dropout switches, split by RFT freezing group."""

    rng: Optional[np.random.Generator]
    rate: float
    on_frozen: bool
    on_trainable: bool

    @classmethod
    def eval_mode(cls) -> "DropoutCtx":
        return cls(rng=None, rate=0.0, on_frozen=False, on_trainable=False)

    @classmethod
    def train_mode(cls, rng: np.random.Generator, rate: float) -> "DropoutCtx":
        return cls(rng=rng, rate=rate, on_frozen=True, on_trainable=True)

    @classmethod
    def rft_sampling(
        cls, rng: np.random.Generator, rate: float, sample_dropout: bool, frozen_dropout: bool
    ) -> "DropoutCtx":
        return cls(
            rng=rng,
            rate=rate,
            on_trainable=sample_dropout,
            on_frozen=sample_dropout and frozen_dropout,
        )

    @classmethod
    def rft_update(
        cls, rng: np.random.Generator, rate: float, frozen_dropout: bool
    ) -> "DropoutCtx":
        return cls(rng=rng, rate=rate, on_trainable=True, on_frozen=frozen_dropout)

    def apply(self, x: Tensor, frozen_group: bool) -> Tensor:
        enabled = self.on_frozen if frozen_group else self.on_trainable
        if not enabled or self.rate == 0.0:
            return x
        return nc.dropout(x, self.rate, self.rng, enabled=True)


def _attn_names(prefix: str) -> list[str]:
    return [f"{prefix}.{n}" for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def mat(name, rows, cols):
        params[name] = nc.parameter(rng.normal(0.0, 0.02, size=(rows, cols)))

    def vec(name, n, value=0.0):
        params[name] = nc.parameter(np.full(n, value))

    def rowvec(name, n):
        params[name] = nc.parameter(rng.normal(0.0, 0.02, size=n))

    def ln(name, n):
        vec(f"{name}_g", n, 1.0)
        vec(f"{name}_b", n, 0.0)

    def attn(prefix, d):
        for w, b in (("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")):
            mat(f"{prefix}.{w}", d, d)
            vec(f"{prefix}.{b}", d)

    def ffn(prefix, d, d_ff):
        mat(f"{prefix}.w1", d, d_ff)
        vec(f"{prefix}.b1", d_ff)
        mat(f"{prefix}.w2", d_ff, d)
        vec(f"{prefix}.b2", d)

    def encoder_layer(prefix, d, d_ff):
        attn(f"{prefix}.self", d)
        ln(f"{prefix}.self_ln", d)
        ffn(f"{prefix}.ffn", d, d_ff)
        ln(f"{prefix}.ffn_ln", d)

    d, d_ff = cfg.d, cfg.d_ff
    # text encoder
    mat("text.tok_emb", cfg.vocab_size, d)
    mat("text.pos_emb", cfg.n_t_max, d)
    mat("text.type_emb", cfg.n_types, d)
    mat("text.task_emb", cfg.n_tasks, d)
    ln("text.emb_ln", d)
    for i in range(cfg.l_text):
        encoder_layer(f"text.l{i}", d, d_ff)
    ln("text.out_ln", d)
    # panorama encoder
    mat("pano.proj_w", cfg.d_view, d)
    vec("pano.proj_b", d)
    mat("pano.angle_emb", cfg.k_views, d)
    ln("pano.emb_ln", d)
    for i in range(cfg.l_pano):
        encoder_layer(f"pano.l{i}", d, d_ff)
    ln("pano.out_ln", d)
    # graph-token assembly
    mat("graph.feat_w", d, d)
    vec("graph.feat_b", d)
    mat("graph.pose_w", 5, d)
    vec("graph.pose_b", d)
    mat("graph.step_emb", cfg.max_steps + 2, d)
    mat("graph.task_emb", cfg.n_tasks, d)
    rowvec("graph.stop_feat", d)
    ln("graph.emb_ln", d)
    # dual-phase fusion: unshared bidirectional cross-attention per layer
    for i in range(cfg.l_fuse):
        for stream in ("t", "g"):
            attn(f"dpft.l{i}.{stream}_cross", d)
            ln(f"dpft.l{i}.{stream}_cross_ln", d)
            attn(f"dpft.l{i}.{stream}_self", d)
            ln(f"dpft.l{i}.{stream}_self_ln", d)
            ffn(f"dpft.l{i}.{stream}_ffn", d, d_ff)
            ln(f"dpft.l{i}.{stream}_ffn_ln", d)
    ln("dpft.t_out_ln", d)
    ln("dpft.g_out_ln", d)
    # text-guided refinement
    attn("refine.cross", d)
    ln("refine.cross_ln", d)
    ffn("refine.ffn", d, d_ff)
    # heads: action scoring eats the concatenated 2d graph tokens
    mat("sap.w1", 2 * d, d)
    vec("sap.b1", d)
    mat("sap.w2", d, 1)
    vec("sap.b2", 1)
    mat("mlm.w1", d, d)
    vec("mlm.b1", d)
    mat("mlm.w2", d, cfg.vocab_size)
    vec("mlm.b2", cfg.vocab_size)
    return params


@dataclass
class PlanResult:
    order: list[int]  # token index -> STOP_ACTION or node id
    cand_mask: np.ndarray
    scores: Tensor  # (N_g,) raw per-token scores (finite)
    t_sym: Tensor  # (N_t, d)
    g_out: Tensor  # (N_g, 2d)

    def masked_logits(self) -> np.ndarray:
        """Scores with non-candidates at -inf, ready for sampling."""
        return np.where(self.cand_mask, self.scores.data, -np.inf)


class Policy:
    """Planner network parameters plus forward passes."""

    def __init__(self, cfg: ModelConfig, params: Optional[dict[str, Tensor]] = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        self.version = 0
        self._node_cache: dict[tuple[int, int], np.ndarray] = {}
        self._node_cache_version = -1

    def bump_version(self) -> None:
        """Mark parameters as changed (invalidates inference caches)."""
        self.version += 1

    # ------------------------------------------------------------------
    # parameter management
    # ------------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) ^ set(arrays)
            raise ContractError(f"parameter name mismatch: {sorted(missing)[:4]}...")
        for name, arr in arrays.items():
            if arr.shape != self.params[name].data.shape:
                raise ContractError(f"shape mismatch for {name!r}")
            self.params[name].data[...] = arr

    def snapshot(self) -> "Policy":
        """Frozen deep copy (requires_grad off everywhere)."""
        twin = Policy(self.cfg, params={n: Tensor(p.data.copy()) for n, p in self.params.items()})
        twin.version = self.version
        return twin

    def set_rft_trainable(self) -> None:
        for name, p in self.params.items():
            p.requires_grad = name.startswith(RFT_TRAINABLE_PREFIXES)
            if p.requires_grad:
                p.ensure_grad()
            else:
                p.grad = None

    def set_all_trainable(self) -> None:
        for p in self.params.values():
            p.requires_grad = True
            p.ensure_grad()

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.params.items() if p.requires_grad]

    def save(self, path: str | Path, stage: str = "none") -> None:
        arrays = self.state_arrays()
        meta = {
            "__meta.stage": float(STAGE_CODES[stage]),
            "__meta.format": 1.0,
        }
        for f in fields(ModelConfig):
            meta[f"__meta.cfg.{f.name}"] = float(getattr(self.cfg, f.name))
        arrays.update({k: np.asarray(v) for k, v in meta.items()})
        nc.save_tensors(path, arrays)

    @classmethod
    def load(cls, path: str | Path) -> tuple["Policy", str]:
        arrays = nc.load_tensors(path)
        cfg_kwargs = {}
        for f in fields(ModelConfig):
            key = f"__meta.cfg.{f.name}"
            if key not in arrays:
                raise ContractError(f"checkpoint missing config entry {f.name}")
            cfg_kwargs[f.name] = int(float(arrays.pop(key)))
        stage = STAGE_NAMES[int(arrays.pop("__meta.stage"))]
        arrays.pop("__meta.format", None)
        cfg = ModelConfig(**cfg_kwargs)
        policy = cls(cfg, params={n: Tensor(a, requires_grad=True) for n, a in arrays.items()})
        return policy, stage

    # ------------------------------------------------------------------
    # building blocks
    # ------------------------------------------------------------------

    def _attention(
        self,
        prefix: str,
        xq: Tensor,
        xkv: Tensor,
        ctx: DropoutCtx,
        frozen: bool,
        mask: Optional[np.ndarray] = None,
    ) -> Tensor:
        p = self.params
        q = nc.linear(xq, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
        k = nc.linear(xkv, p[f"{prefix}.wk"], p[f"{prefix}.bk"])
        v = nc.linear(xkv, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
        att = nc.multi_head_attention(q, k, v, self.cfg.heads, mask=mask)
        out = nc.linear(att, p[f"{prefix}.wo"], p[f"{prefix}.bo"])
        return ctx.apply(out, frozen)

    def _ffn(self, prefix: str, x: Tensor, ctx: DropoutCtx, frozen: bool) -> Tensor:
        p = self.params
        h = nc.gelu(nc.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        out = nc.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])
        return ctx.apply(out, frozen)

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return nc.layer_norm(x, self.params[f"{prefix}_g"], self.params[f"{prefix}_b"])

    def _encoder_layer(
        self,
        prefix: str,
        x: Tensor,
        ctx: DropoutCtx,
        frozen: bool,
        mask: Optional[np.ndarray] = None,
    ) -> Tensor:
        # pre-LN residual blocks: x + sublayer(LN(x))
        xn = self._ln(f"{prefix}.self_ln", x)
        x = nc.add(x, self._attention(f"{prefix}.self", xn, xn, ctx, frozen, mask))
        return nc.add(x, self._ffn(f"{prefix}.ffn", self._ln(f"{prefix}.ffn_ln", x), ctx, frozen))

    # ------------------------------------------------------------------
    # forward passes
    # ------------------------------------------------------------------

    def encode_text(self, instruction: Instruction, ctx: DropoutCtx) -> Tensor:
        cfg = self.cfg
        tokens = list(instruction.tokens)
        if len(tokens) == 0:
            raise ContractError("empty instruction")
        if len(tokens) > cfg.n_t_max:
            raise ContractError(f"instruction length {len(tokens)} exceeds {cfg.n_t_max}")
        if instruction.task_id not in (1, 2, 3):
            raise ContractError(f"instruction task id must be 1..3, got {instruction.task_id}")
        type_ids = np.zeros(len(tokens), dtype=np.int64)
        for si, (lo, hi) in enumerate(instruction.segments):
            type_ids[lo:hi] = min(si, cfg.n_types - 1)
        for i in range(1, len(tokens)):  # separators inherit the preceding segment
            if not any(lo <= i < hi for lo, hi in instruction.segments):
                type_ids[i] = type_ids[i - 1]
        p = self.params
        x = nc.embedding_lookup(p["text.tok_emb"], tokens)
        x = nc.add(x, nc.take_rows(p["text.pos_emb"], np.arange(len(tokens))))
        x = nc.add(x, nc.take_rows(p["text.type_emb"], type_ids))
        x = nc.add(x, nc.take_rows(p["text.task_emb"], [instruction.task_id]))
        x = ctx.apply(self._ln("text.emb_ln", x), frozen_group=True)
        for i in range(cfg.l_text):
            x = self._encoder_layer(f"text.l{i}", x, ctx, frozen=True)
        return self._ln("text.out_ln", x)

    def encode_node_views(self, views: np.ndarray, ctx: DropoutCtx) -> Tensor:
        cfg = self.cfg
        if views.shape != (cfg.k_views, cfg.d_view):
            raise ContractError(f"expected views of shape {(cfg.k_views, cfg.d_view)}, got {views.shape}")
        return self.encode_views_batch(views[None], ctx)

    def encode_views_batch(self, views: np.ndarray, ctx: DropoutCtx) -> Tensor:
        """Encode B nodes' view sets in one pass; returns (B*K, d).

        Self-attention is block-diagonal so views only attend within their
        own node; rows b*K..(b+1)*K belong to node b.
        """
        cfg = self.cfg
        b, k_views, d_view = views.shape
        if (k_views, d_view) != (cfg.k_views, cfg.d_view):
            raise ContractError(f"expected views of shape (B, {cfg.k_views}, {cfg.d_view})")
        p = self.params
        flat = views.reshape(b * k_views, d_view)
        x = nc.linear(Tensor(flat), p["pano.proj_w"], p["pano.proj_b"])
        angle_ids = np.tile(np.arange(k_views), b)
        x = nc.add(x, nc.take_rows(p["pano.angle_emb"], angle_ids))
        x = ctx.apply(self._ln("pano.emb_ln", x), frozen_group=True)
        mask = None
        if b > 1:
            blocks = np.repeat(np.arange(b), k_views)
            mask = blocks[:, None] == blocks[None, :]
        for i in range(cfg.l_pano):
            x = self._encoder_layer(f"pano.l{i}", x, ctx, frozen=True, mask=mask)
        return self._ln("pano.out_ln", x)

    def node_encodings(self, world, ids: Sequence[int], ctx: DropoutCtx) -> np.ndarray:
        """Cached no-grad view encodings for inference-time token building.

        Valid only while the panorama encoder runs deterministically (frozen
        dropout off); the cache is dropped whenever the version bumps.
        """
        k = self.cfg.k_views
        if self._node_cache_version != self.version:
            self._node_cache = {}
            self._node_cache_version = self.version
        missing = [nid for nid in ids if (world.seed, nid) not in self._node_cache]
        if missing:
            views = np.stack([world.view_features[nid] for nid in missing])
            with nc.no_grad():
                enc = self.encode_views_batch(views, ctx).data
            for i, nid in enumerate(missing):
                self._node_cache[(world.seed, nid)] = enc[i * k : (i + 1) * k]
        return np.concatenate([self._node_cache[(world.seed, nid)] for nid in ids])

    def dpft_forward(self, t0: Tensor, g0: Tensor, ctx: DropoutCtx) -> tuple[Tensor, Tensor]:
        """Symmetric fusion then text-guided refinement; returns (T_sym, G_out)."""
        if t0.data.shape[1] != self.cfg.d or g0.data.shape[1] != self.cfg.d:
            raise ContractError("fusion inputs must have width d")
        t, g = t0, g0
        for i in range(self.cfg.l_fuse):
            # symmetric phase: both cross-attentions read the pre-layer streams
            tn = self._ln(f"dpft.l{i}.t_cross_ln", t)
            gn = self._ln(f"dpft.l{i}.g_cross_ln", g)
            t = nc.add(t, self._attention(f"dpft.l{i}.t_cross", tn, gn, ctx, frozen=False))
            g = nc.add(g, self._attention(f"dpft.l{i}.g_cross", gn, tn, ctx, frozen=False))
            tn = self._ln(f"dpft.l{i}.t_self_ln", t)
            gn = self._ln(f"dpft.l{i}.g_self_ln", g)
            t = nc.add(t, self._attention(f"dpft.l{i}.t_self", tn, tn, ctx, False))
            g = nc.add(g, self._attention(f"dpft.l{i}.g_self", gn, gn, ctx, False))
            t = nc.add(t, self._ffn(f"dpft.l{i}.t_ffn", self._ln(f"dpft.l{i}.t_ffn_ln", t), ctx, False))
            g = nc.add(g, self._ffn(f"dpft.l{i}.g_ffn", self._ln(f"dpft.l{i}.g_ffn_ln", g), ctx, False))
        t_sym = self._ln("dpft.t_out_ln", t)
        g_sym = self._ln("dpft.g_out_ln", g)
        guide = self._ln("refine.cross_ln", nc.add(g_sym, self._attention("refine.cross", g_sym, t_sym, ctx, False)))
        g_out = nc.concat_cols(g_sym, self._ffn("refine.ffn", guide, ctx, False))
        return t_sym, g_out

    def sap_scores(self, g_out: Tensor, cand_mask: np.ndarray) -> Tensor:
        if not np.any(cand_mask):
            raise ContractError("empty candidate set")
        p = self.params
        h = nc.gelu(nc.add(nc.matmul(g_out, p["sap.w1"]), p["sap.b1"]))
        s = nc.add(nc.matmul(h, p["sap.w2"]), p["sap.b2"])
        return nc.reshape(s, (g_out.data.shape[0],))

    def mlm_logits(self, t_sym: Tensor, masked_positions: Sequence[int]) -> Tensor:
        n_t = t_sym.data.shape[0]
        for pos in masked_positions:
            if not 0 <= pos < n_t:
                raise IndexError(f"masked position {pos} out of range")
        p = self.params
        x = nc.take_rows(t_sym, np.asarray(masked_positions, dtype=np.int64))
        h = nc.gelu(nc.add(nc.matmul(x, p["mlm.w1"]), p["mlm.b1"]))
        return nc.add(nc.matmul(h, p["mlm.w2"]), p["mlm.b2"])

    def forward_plan(
        self,
        world,
        tmap,
        heading: float,
        instruction: Instruction,
        ctx: DropoutCtx,
        text_feats: Optional[Tensor] = None,
        view_pool=None,
    ) -> PlanResult:
        """Full planning pass from map + instruction to action scores."""
        from .topomap import build_graph_tokens

        t0 = text_feats if text_feats is not None else self.encode_text(instruction, ctx)
        gt = build_graph_tokens(
            tmap, self, world, heading, instruction.task_id, ctx, view_pool=view_pool
        )
        t_sym, g_out = self.dpft_forward(t0, gt.tokens, ctx)
        scores = self.sap_scores(g_out, gt.cand_mask)
        return PlanResult(order=gt.order, cand_mask=gt.cand_mask, scores=scores, t_sym=t_sym, g_out=g_out)


def sample_action(
    logits: np.ndarray,
    mode: str,
    rng: Optional[np.random.Generator] = None,
    temperature: float = 1.0,
) -> tuple[int, float]:
    """Pick an action index from (possibly -inf masked) logits.

    Greedy takes the argmax (ties to the lowest index); sampling draws from
    softmax(logits / temperature). The returned log-probability is under the
    distribution actually sampled from.
    """
    finite = np.isfinite(logits)
    if not finite.any():
        raise ContractError("no finite logits to sample from")
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    scaled = logits / temperature
    mx = scaled[finite].max()
    e = np.where(finite, np.exp(scaled - mx), 0.0)
    probs = e / e.sum()
    if mode == "greedy":
        idx = int(np.argmax(np.where(finite, logits, -np.inf)))
    elif mode == "sample":
        if rng is None:
            raise ContractError("sampling requires an rng")
        idx = int(rng.choice(len(probs), p=probs))
    else:
        raise ContractError(f"unknown sampling mode {mode!r}")
    logp = float(np.log(probs[idx]))
    return idx, logp
