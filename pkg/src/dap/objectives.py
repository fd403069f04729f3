"""Training losses, ablation controls and the AdamW step.

Objective sets: ``tr`` (translation ranking), ``tr+tlm`` and ``dap``
(translation ranking + representation translation). Similarity in the
ranking loss is the raw CLS dot product unless ``cosine`` is switched on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .corpus import ParallelBatch, mask_for_tlm
from .model import ModelParams, encode, is_bias, is_embedding, is_layer_norm, rtl_forward, tlm_forward
from .numcore import ShapeError, Tensor

OBJECTIVES = ("tr", "tr+tlm", "dap")
DIRECTIONS = ("xx->en", "en->xx", "both")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int = 2000
    lr: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_frac: float = 0.05
    objective: str = "dap"
    direction: str = "xx->en"
    rho: float = 1.0
    tlm_mask_prob: float = 0.15
    cosine: bool = False
    temperature: float = 0.05
    bidirectional: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.batch_size < 2:
            raise ValueError("translation ranking needs batch_size >= 2 for in-batch negatives")


@dataclass
class LossBreakdown:
    tr: float
    rtl: float | None = None
    tlm: float | None = None
    total: float = 0.0

    def as_dict(self) -> dict:
        return {"tr": self.tr, "rtl": self.rtl, "tlm": self.tlm, "total": self.total}


# ---------------------------------------------------------------- losses


def similarity(cls_x: Tensor, cls_y: Tensor, cosine: bool = False, temperature: float = 0.05) -> Tensor:
    if cosine:
        cls_x = nc.div(cls_x, nc.sqrt(nc.sum(nc.mul(cls_x, cls_x), axis=1, keepdims=True)))
        cls_y = nc.div(cls_y, nc.sqrt(nc.sum(nc.mul(cls_y, cls_y), axis=1, keepdims=True)))
        return nc.scale(nc.matmul(cls_x, nc.transpose(cls_y)), 1.0 / temperature)
    return nc.matmul(cls_x, nc.transpose(cls_y))


def tr_loss(cls_x, cls_y, cosine: bool = False, temperature: float = 0.05, bidirectional: bool = False) -> Tensor:
    """In-batch softmax ranking: row i must pick column i among all B targets."""
    cls_x, cls_y = nc.as_tensor(cls_x), nc.as_tensor(cls_y)
    if cls_x.shape != cls_y.shape or cls_x.ndim != 2:
        raise ShapeError(f"tr_loss needs equal B x d inputs, got {cls_x.shape} and {cls_y.shape}")
    sim = similarity(cls_x, cls_y, cosine, temperature)
    labels = np.arange(cls_x.shape[0])
    loss = nc.cross_entropy(sim, labels)
    if bidirectional:
        loss = nc.scale(nc.add(loss, nc.cross_entropy(nc.transpose(sim), labels)), 0.5)
    return loss


def rtl_loss(logits, target_ids, recon_positions) -> Tensor:
    """Per-sentence mean cross entropy over reconstructed positions, then batch mean.

    ``logits`` are flattened in (example, position) order as produced by
    ``rtl_forward``; ``target_ids`` is the padded B x S_y target id matrix.
    """
    recon = [np.asarray(sorted(set(int(i) for i in r)), dtype=np.int64) for r in recon_positions]
    if any(r.size == 0 for r in recon):
        raise nc.ContractError("empty reconstruction set")
    tgt = np.asarray(target_ids)
    targets = np.concatenate([tgt[b, r] for b, r in enumerate(recon)])
    b = len(recon)
    weights = np.concatenate([np.full(r.size, 1.0 / (b * r.size)) for r in recon])
    return nc.cross_entropy(logits, targets, weights)


def tlm_loss(logits, original_ids) -> Tensor:
    return nc.cross_entropy(logits, np.asarray(original_ids).reshape(-1))


def select_reconstruction_positions(length: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Each position kept with probability ``rho``; an empty draw forces one position."""
    if length < 1:
        raise ValueError("target length must be >= 1")
    if rho >= 1.0:
        return np.arange(length)
    picked = np.flatnonzero(rng.random(length) < rho)
    if picked.size == 0:
        picked = np.array([int(rng.integers(length))])
    return picked


@dataclass
class DirectionPlan:
    """Per-example source/target choice for the RTL head.

    ``source_is_pivot[b]`` selects the pivot sentence as RTL input for example b;
    ``lang_ids`` is None when no language embedding is added.
    """

    source_is_pivot: np.ndarray
    lang_ids: np.ndarray | None = field(default=None)


def apply_direction_mode(batch: ParallelBatch, mode: str) -> DirectionPlan:
    """xx->en: non-pivot source, pivot target, no language embedding.
    en->xx: reversed, target-language embedding added.
    both: first ceil(B/2) examples xx->en, the rest en->xx, language
    embeddings (of each example's target language) added everywhere."""
    n = len(batch)
    langs = np.asarray(batch.lang_ids)
    if mode == "xx->en":
        return DirectionPlan(np.zeros(n, dtype=bool), None)
    if mode == "en->xx":
        return DirectionPlan(np.ones(n, dtype=bool), langs.copy())
    if mode == "both":
        first = (n + 1) // 2
        rev = np.arange(n) >= first
        return DirectionPlan(rev, np.where(rev, langs, 0))
    raise ValueError(f"unknown direction mode {mode!r}")


# ---------------------------------------------------------------- forward


def _select_rows(a: Tensor, b: Tensor, take_b: np.ndarray) -> Tensor:
    """Row-wise choice between two B x S x d tensors padded to a common length."""
    s = max(a.shape[1], b.shape[1])

    def pad(t: Tensor) -> Tensor:
        if t.shape[1] == s:
            return t
        return nc.concat([t, np.zeros((t.shape[0], s - t.shape[1], t.shape[2]))], axis=1)

    return nc.where(take_b[:, None, None], pad(b), pad(a))


def compute_losses(params: ModelParams, batch: ParallelBatch, cfg: TrainConfig, rng: np.random.Generator):
    """Forward pass for the configured objective set -> (total Tensor, LossBreakdown)."""
    b = len(batch)
    sx, sy = batch.src_ids.shape[1], batch.piv_ids.shape[1]
    s = max(sx, sy)
    ids = np.zeros((2 * b, s), dtype=np.int64)
    ids[:b, :sx] = batch.src_ids
    ids[b:, :sy] = batch.piv_ids
    enc = encode(params, ids)
    cls_x, cls_y = enc.cls[:b], enc.cls[b:]
    tr = tr_loss(cls_x, cls_y, cfg.cosine, cfg.temperature, cfg.bidirectional)
    total = tr
    parts = LossBreakdown(tr=float(tr.data))

    if cfg.objective == "dap":
        plan = apply_direction_mode(batch, cfg.direction)
        src_h, tgt_h = enc.tokens[:b], enc.tokens[b:]
        rev = plan.source_is_pivot
        source = _select_rows(src_h, tgt_h, rev)
        target = _select_rows(tgt_h, src_h, rev)
        src_len = np.where(rev, batch.piv_len, batch.src_len)
        tgt_len = np.where(rev, batch.src_len, batch.piv_len)
        tgt_ids_full = np.where(rev[:, None], ids[:b], ids[b:])
        recon = [select_reconstruction_positions(int(n), cfg.rho, rng) for n in tgt_len]
        leaked = target if cfg.rho < 1.0 else None
        logits = rtl_forward(params, source, src_len, tgt_len, recon, leaked, plan.lang_ids)
        rtl = rtl_loss(logits, tgt_ids_full, recon)
        parts.rtl = float(rtl.data)
        total = nc.add(total, rtl)
    elif cfg.objective == "tr+tlm":
        tin = mask_for_tlm(batch, cfg.tlm_mask_prob, rng, vocab_size=params.config.V)
        tlm = tlm_loss(tlm_forward(params, tin.ids, tin.positions), tin.targets)
        parts.tlm = float(tlm.data)
        total = nc.add(total, tlm)
    parts.total = float(total.data)
    return total, parts


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def decays(name: str) -> bool:
    return not (is_bias(name) or is_layer_norm(name) or is_embedding(name))


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup over the first ``warmup_frac`` of steps, then constant."""
    warm = int(math.ceil(cfg.warmup_frac * cfg.steps))
    if warm > 0 and step < warm:
        return cfg.lr * (step + 1) / warm
    return cfg.lr


def adamw_update(params: ModelParams, state: AdamState, cfg: TrainConfig) -> None:
    state.step += 1
    t = state.step
    lr = lr_at(cfg, t - 1)
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in params.tensors.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if decays(name) and cfg.weight_decay:
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def dap_step(params: ModelParams, state: AdamState, batch: ParallelBatch, cfg: TrainConfig,
             rng: np.random.Generator, step_index: int | None = None) -> tuple[ModelParams, AdamState, LossBreakdown]:
    """One forward/backward over the objective set and one AdamW update (in place)."""
    if len(batch) < 2:
        raise ValueError("translation ranking needs at least 2 pairs per batch")
    params.zero_grad()
    total, parts = compute_losses(params, batch, cfg, rng)
    if not np.isfinite(parts.total):
        raise DivergenceError(state.step if step_index is None else step_index, parts.total)
    nc.backward(total)
    adamw_update(params, state, cfg)
    return params, state, parts
