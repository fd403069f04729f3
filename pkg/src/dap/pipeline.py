"""Training loop and held-out evaluation shared by the CLI and the experiment scripts."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import evalkit
from .corpus import ParallelPair, make_batches
from .model import ModelParams, encode
from .objectives import AdamState, DivergenceError, TrainConfig, compute_losses, dap_step

EVAL_BATCH = 64


@dataclass
class Embedded:
    """CLS embeddings and per-token hiddens for a list of pairs (both sides)."""

    src_cls: np.ndarray
    piv_cls: np.ndarray
    src_tokens: list[np.ndarray]
    piv_tokens: list[np.ndarray]


def embed_sentences(params: ModelParams, sentences: Sequence[Sequence[int]]) -> tuple[np.ndarray, list[np.ndarray]]:
    cls_rows, toks = [], []
    for start in range(0, len(sentences), EVAL_BATCH):
        chunk = sentences[start : start + EVAL_BATCH]
        width = max(len(s) for s in chunk)
        ids = np.zeros((len(chunk), width), dtype=np.int64)
        for i, s in enumerate(chunk):
            ids[i, : len(s)] = s
        enc = encode(params, ids)
        cls_rows.append(enc.cls.data)
        toks += [enc.tokens.data[i, : len(s)] for i, s in enumerate(chunk)]
    return np.concatenate(cls_rows), toks


def embed_pairs(params: ModelParams, pairs: Sequence[ParallelPair]) -> Embedded:
    params.requires_grad_(False)
    try:
        src_cls, src_tok = embed_sentences(params, [p.source for p in pairs])
        piv_cls, piv_tok = embed_sentences(params, [p.pivot for p in pairs])
    finally:
        params.requires_grad_(True)
    return Embedded(src_cls, piv_cls, src_tok, piv_tok)


def by_language(pairs: Sequence[ParallelPair]) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    for i, p in enumerate(pairs):
        out.setdefault(p.lang_id, []).append(i)
    return dict(sorted(out.items()))


def _average(per_lang: dict) -> dict:
    keys = next(iter(per_lang.values())).keys()
    return {k: float(np.mean([v[k] for v in per_lang.values()])) for k in keys}


def eval_retrieval(emb: Embedded, pairs: Sequence[ParallelPair]) -> dict:
    per = {}
    for lang, idx in by_language(pairs).items():
        s, t = emb.src_cls[idx], emb.piv_cls[idx]
        per[str(lang)] = {
            "xx->en": evalkit.retrieval_accuracy(s, t, "src->tgt"),
            "en->xx": evalkit.retrieval_accuracy(s, t, "tgt->src"),
        }
    return {"per_language": per, "average": _average(per)}


def eval_token_alignment(emb: Embedded, pairs: Sequence[ParallelPair]) -> dict:
    per = {}
    for lang, idx in by_language(pairs).items():
        items = [(emb.src_tokens[i], emb.piv_tokens[i], pairs[i].alignment) for i in idx]
        per[str(lang)] = {"token_alignment": evalkit.token_alignment_accuracy(items)}
    return {"per_language": per, "average": _average(per)}


def _mining_split(idx: Sequence[int]) -> tuple[list[int], list[int], set]:
    """Sources: every pair; targets: pivots of the first two thirds, so the
    remaining sources have no translation and act as distractors."""
    n_gold = max(1, (2 * len(idx)) // 3)
    gold = {(i, i) for i in range(n_gold)}
    return list(idx), list(idx[:n_gold]), gold


def eval_mining(emb: Embedded, pairs: Sequence[ParallelPair], k: int = 4, mode: str = "exact", m: int = 8) -> dict:
    """Threshold learned on the first half of each language's pairs, applied to the second half."""
    per = {}
    for lang, idx in by_language(pairs).items():
        half = len(idx) // 2
        parts = []
        for sub in (idx[:half], idx[half:]):
            src_i, tgt_i, gold = _mining_split(sub)
            parts.append((emb.src_cls[src_i], emb.piv_cls[tgt_i], gold))
        (s_tr, t_tr, g_tr), (s_te, t_te, g_te) = parts
        kk = min(k, len(t_tr) - 1, len(t_te) - 1) or 1
        cands, _ = evalkit.score_candidates(s_tr, t_tr, kk, None if mode == "exact" else m)
        gamma, _ = evalkit.optimal_threshold(cands, g_tr)
        res = evalkit.mine_pairs(s_te, t_te, kk, gamma, g_te, mode=mode, m=m)
        per[str(lang)] = {"precision": res.precision, "recall": res.recall, "f1": res.f1, "gamma": gamma}
    return {"per_language": per, "average": _average(per)}


def evaluate(params: ModelParams, pairs: Sequence[ParallelPair], task: str, k: int = 4) -> dict:
    emb = embed_pairs(params, pairs)
    if task == "retrieval":
        return eval_retrieval(emb, pairs)
    if task == "token-align":
        return eval_token_alignment(emb, pairs)
    if task == "mining":
        return eval_mining(emb, pairs, k)
    raise ValueError(f"unknown task {task!r}")


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict]
    diverged_at: int | None = None


def train(
    params: ModelParams,
    pairs: Sequence[ParallelPair],
    cfg: TrainConfig,
    log_interval: int = 100,
    on_log: Callable[[dict], None] | None = None,
    checkpoint: Callable[[ModelParams, int], None] | None = None,
    checkpoint_interval: int = 0,
) -> TrainResult:
    """Run ``cfg.steps`` AdamW steps. Losses are logged at every multiple of
    ``log_interval`` including step 0 and the final step (the final entry is
    a forward-only evaluation on the next batch)."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 1])
    batches = make_batches(pairs, cfg.batch_size, params.config.S_max, cfg.seed)
    state = AdamState()
    entries: list[dict] = []
    t0 = time.perf_counter()
    for step in range(cfg.steps + 1):
        batch = next(batches)
        try:
            if step < cfg.steps:
                _, _, parts = dap_step(params, state, batch, cfg, rng, step)
            else:
                params.requires_grad_(False)
                _, parts = compute_losses(params, batch, cfg, rng)
                params.requires_grad_(True)
                if not np.isfinite(parts.total):
                    raise DivergenceError(step, parts.total)
        except DivergenceError as exc:
            return TrainResult(params, entries, exc.step)
        if step % log_interval == 0:
            entry = {"step": step, **parts.as_dict(), "wall_ms": round((time.perf_counter() - t0) * 1e3, 3)}
            entries.append(entry)
            if on_log:
                on_log(entry)
        if checkpoint and checkpoint_interval and step and step % checkpoint_interval == 0 and step < cfg.steps:
            checkpoint(params, step)
    return TrainResult(params, entries)


def write_jsonl(entries: Sequence[dict], path) -> None:
    Path(path).write_text("".join(json.dumps(e) + "\n" for e in entries), encoding="utf-8")
