"""Evaluation: bitext retrieval, margin-based mining, token alignment, PCA, FLOPs.

All evaluation-time similarities are cosine. Ties are broken toward the
lowest index everywhere.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .model import EncoderConfig

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


class ScoreError(ArithmeticError):
    pass


class NumericError(ArithmeticError):
    pass


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise MetricError(f"{what} row {int(zero[0])} has zero norm")
    return x / norms[:, None]


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _unit_rows(a, "source") @ _unit_rows(b, "target").T


# ---------------------------------------------------------------- retrieval


def retrieval_accuracy(src_embs, tgt_embs, direction: str = "src->tgt") -> float:
    """Fraction of queries whose cosine nearest neighbour is their gold partner (row i <-> row i)."""
    src, tgt = np.asarray(src_embs), np.asarray(tgt_embs)
    if src.shape[0] != tgt.shape[0] or src.shape[0] < 2:
        raise MetricError(f"need two aligned corpora with >= 2 rows, got {src.shape} and {tgt.shape}")
    sims = cosine_matrix(src, tgt)
    if direction == "tgt->src":
        sims = sims.T
    elif direction != "src->tgt":
        raise ValueError(f"unknown direction {direction!r}")
    return float(np.mean(np.argmax(sims, axis=1) == np.arange(sims.shape[0])))


# ---------------------------------------------------------------- margin mining


def knn_means(sims: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Average cosine to the k nearest neighbours: forward (per row) and backward (per column)."""
    if not 1 <= k <= min(sims.shape):
        raise ValueError(f"k={k} must lie in [1, {min(sims.shape)}]")
    fwd = -np.sort(-sims, axis=1)[:, :k].mean(axis=1)
    bwd = -np.sort(-sims, axis=0)[:k, :].mean(axis=0)
    return fwd, bwd


def margin_scores(src_embs, tgt_embs, k: int = 4) -> np.ndarray:
    """Ratio margin for every (i, j): cos(x_i, y_j) / (mean_kNN(x_i) + mean_kNN(y_j))."""
    sims = cosine_matrix(src_embs, tgt_embs)
    fwd, bwd = knn_means(sims, k)
    denom = fwd[:, None] + bwd[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        return sims / denom


def margin_score(i: int, j: int, src_embs, tgt_embs, k: int = 4) -> float:
    sims = cosine_matrix(src_embs, tgt_embs)
    fwd, bwd = knn_means(sims, k)
    denom = fwd[i] + bwd[j]
    if denom == 0:
        raise ScoreError(f"zero margin denominator for candidate ({i}, {j})")
    return float(sims[i, j] / denom)


def prf(pred: Iterable[tuple[int, int]], gold: Iterable[tuple[int, int]]) -> tuple[float, float, float]:
    pred, gold = set(pred), set(gold)
    tp = len(pred & gold)
    p = tp / len(pred) if pred else 0.0
    r = tp / len(gold) if gold else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def dedupe_by_source(cands: Sequence[tuple[int, int, float]], gamma: float) -> list[tuple[int, int, float]]:
    """Keep candidates scoring >= gamma, then the best one per source index."""
    best: dict[int, tuple[int, int, float]] = {}
    for i, j, s in cands:
        if s >= gamma and (i not in best or s > best[i][2] or (s == best[i][2] and j < best[i][1])):
            best[i] = (i, j, s)
    return [best[i] for i in sorted(best)]


def threshold_grid(scores: Sequence[float]) -> np.ndarray:
    """Midpoints of consecutive unique scores, plus one point below the minimum and one above the maximum."""
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.concatenate([[u[0] - 1.0], mids, [u[-1] + 1.0]])


def optimal_threshold(cands: Sequence[tuple[int, int, float]], gold) -> tuple[float, float]:
    """Sweep the threshold grid and return (gamma, F1) maximising F1; ties go to the larger gamma."""
    if not len(cands):
        raise ValueError("no candidates to threshold")
    gold = set(gold)
    # after dedupe, only each source's top candidate can ever be predicted
    top = dedupe_by_source(cands, -math.inf)
    top_scores = np.array([s for _, _, s in top])
    top_hit = np.array([(i, j) in gold for i, j, _ in top], dtype=np.float64)
    order = np.argsort(top_scores, kind="stable")
    sorted_scores = top_scores[order]
    hits_from = np.concatenate([np.cumsum(top_hit[order][::-1])[::-1], [0.0]])
    best_g, best_f = None, -1.0
    for g in threshold_grid([s for _, _, s in cands]):
        first = int(np.searchsorted(sorted_scores, g, side="left"))
        n_pred = len(sorted_scores) - first
        tp = hits_from[first]
        p = tp / n_pred if n_pred else 0.0
        r = tp / len(gold) if gold else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        if f >= best_f:
            best_g, best_f = float(g), f
    return best_g, best_f


@dataclass
class MiningResult:
    candidates: list[tuple[int, int, float]]
    gamma: float
    predicted: list[tuple[int, int, float]]
    precision: float
    recall: float
    f1: float
    skipped: list[tuple[int, int]] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"gamma": self.gamma, "precision": self.precision, "recall": self.recall, "f1": self.f1,
                "n_candidates": len(self.candidates), "n_predicted": len(self.predicted)}


def candidate_pairs(sims: np.ndarray, m: int | None) -> list[tuple[int, int]]:
    """Union of forward and backward top-m neighbours; m=None means all pairs."""
    n_src, n_tgt = sims.shape
    if m is None:
        return [(i, j) for i in range(n_src) for j in range(n_tgt)]
    fwd = np.argsort(-sims, axis=1, kind="stable")[:, : min(m, n_tgt)]
    bwd = np.argsort(-sims, axis=0, kind="stable")[: min(m, n_src), :]
    cand = {(i, int(j)) for i in range(n_src) for j in fwd[i]}
    cand |= {(int(i), j) for j in range(n_tgt) for i in bwd[:, j]}
    return sorted(cand)


def score_candidates(src_embs, tgt_embs, k: int = 4, m: int | None = None):
    sims = cosine_matrix(src_embs, tgt_embs)
    fwd, bwd = knn_means(sims, k)
    out, skipped = [], []
    for i, j in candidate_pairs(sims, m):
        denom = fwd[i] + bwd[j]
        if denom == 0:
            log.warning("zero margin denominator for candidate (%d, %d); skipped", i, j)
            skipped.append((i, j))
            continue
        out.append((i, j, float(sims[i, j] / denom)))
    return out, skipped


def mine_pairs(src_embs, tgt_embs, k: int, gamma: float, gold, mode: str = "exact", m: int = 8) -> MiningResult:
    if not math.isfinite(gamma):
        raise ValueError("gamma must be finite")
    if mode not in ("exact", "prefilter"):
        raise ValueError(f"unknown mining mode {mode!r}")
    cands, skipped = score_candidates(src_embs, tgt_embs, k, None if mode == "exact" else m)
    pred = dedupe_by_source(cands, gamma)
    p, r, f = prf(((i, j) for i, j, _ in pred), gold)
    return MiningResult(cands, gamma, pred, p, r, f, skipped)


# ---------------------------------------------------------------- token alignment


def token_alignment_accuracy(items: Iterable[tuple[np.ndarray, np.ndarray, Sequence[tuple[int, int]]]]) -> float:
    """Per pair: fraction of source tokens whose cosine-nearest target token is the gold one; mean over pairs."""
    accs = []
    for src, tgt, align in items:
        sims = cosine_matrix(src, tgt)
        nearest = np.argmax(sims, axis=1)
        gold = set((int(i), int(j)) for i, j in align)
        accs.append(np.mean([(i, int(nearest[i])) in gold for i in range(sims.shape[0])]))
    if not accs:
        raise MetricError("no pairs to score")
    return float(np.mean(accs))


# ---------------------------------------------------------------- PCA


@dataclass
class PCAResult:
    points: np.ndarray
    explained_variance: np.ndarray
    components: np.ndarray
    mean: np.ndarray


def _fix_sign(v: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    return -v if nz.size and v[nz[0]] < 0 else v


def power_iteration(mat: np.ndarray, rng: np.random.Generator, tol: float = 1e-10, max_iter: int = 10_000,
                    scale: float | None = None):
    """Dominant eigenpair of a symmetric PSD matrix. ``scale`` is the magnitude
    that counts as "large" (defaults to max |mat|); deflated matrices should
    pass the original one so leftover roundoff is recognised as null."""
    n = mat.shape[0]
    if scale is None:
        scale = float(np.abs(mat).max())
    scale = max(scale, 1e-300)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = float(v @ mat @ v)
    for it in range(1, max_iter + 1):
        w = mat @ v
        norm = np.linalg.norm(w)
        if norm <= 1e-12 * scale:
            # numerically null (e.g. rank-deficient after deflation)
            return 0.0, v, it
        w /= norm
        new_lam = float(w @ mat @ w)
        if abs(new_lam - lam) <= tol * scale and np.linalg.norm(w - v) <= math.sqrt(tol):
            return new_lam, w, it
        v, lam = w, new_lam
    raise NumericError(f"power iteration did not converge in {max_iter} iterations")


def pca_project(vectors, out_dim: int = 2, seed: int = 0, tol: float = 1e-10, max_iter: int = 10_000) -> PCAResult:
    """Mean-centre, then project onto the leading covariance eigenvectors found by
    power iteration with deflation. Each eigenvector's first nonzero coordinate
    is made positive."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("PCA needs at least two vectors")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (x.shape[0] - 1)
    rng = np.random.default_rng(seed)
    comps, lams = [], []
    work = cov.copy()
    scale = float(np.abs(cov).max())
    for _ in range(min(out_dim, x.shape[1])):
        lam, v, _ = power_iteration(work, rng, tol, max_iter, scale)
        for c in comps:  # keep exact orthogonality after deflation
            v = v - (v @ c) * c
        nv = np.linalg.norm(v)
        v = v / nv if nv > 0 else v
        v = _fix_sign(v)
        lam = max(float(v @ cov @ v), 0.0) if nv > 0 else 0.0
        comps.append(v)
        lams.append(lam)
        work = work - lam * np.outer(v, v)
    comps_arr = np.array(comps)
    return PCAResult(points=xc @ comps_arr.T, explained_variance=np.array(lams), components=comps_arr, mean=mu)


# ---------------------------------------------------------------- FLOPs


PAPER_SCALE = EncoderConfig(L=12, d=768, n_heads=12, d_ff=3072, V=119547, S_max=33, K=2)
PAPER_SEQ_LEN = 32


@dataclass
class FlopsReport:
    totals: dict[str, int]
    components: dict[str, dict[str, int]]

    def as_rows(self) -> list[dict]:
        return [{"objective": k, "total": v, **self.components[k]} for k, v in self.totals.items()]


def layer_flops(d: int, d_ff: int, seq_len: int) -> int:
    """Forward FLOPs (2 per multiply-accumulate) of one transformer layer over seq_len tokens."""
    per_token_macs = 3 * d * d + 2 * seq_len * d + d * d + 2 * d * d_ff
    return 2 * per_token_macs * seq_len


def estimate_flops(config: EncoderConfig, seq_len: int) -> FlopsReport:
    """Per-sample forward FLOPs for the three objective sets.

    Counted: QKV and output projections, attention scores and context, the
    feed-forward pair, and vocabulary projections. Layer norms, softmaxes,
    biases and embedding lookups are ignored. TR encodes two sentences of
    length S; TLM adds one encoder pass over 2S tokens plus the vocabulary
    projection at all 2S positions; DAP adds K head layers over 2S tokens and
    the vocabulary projection at the S target positions.
    """
    d, f, s, v = config.d, config.d_ff, seq_len, config.V
    enc_pass = config.L * layer_flops(d, f, s)
    tr = {"encoder": 2 * enc_pass, "rtl_head": 0, "vocab_projection": 0}
    tlm = {"encoder": 2 * enc_pass + config.L * layer_flops(d, f, 2 * s), "rtl_head": 0,
           "vocab_projection": 2 * d * v * 2 * s}
    dap = {"encoder": 2 * enc_pass, "rtl_head": config.K * layer_flops(d, f, 2 * s),
           "vocab_projection": 2 * d * v * s}
    comps = {"tr": tr, "tr+tlm": tlm, "dap": dap}
    return FlopsReport({k: sum(c.values()) for k, c in comps.items()}, comps)


# ---------------------------------------------------------------- files


def write_embeddings(embs: np.ndarray, path, ids: Sequence | None = None) -> None:
    embs = np.asarray(embs, dtype=np.float64)
    ids = range(len(embs)) if ids is None else ids
    lines = [f"#dapemb v1 d={embs.shape[1]}"]
    lines += [f"{i}\t{' '.join(repr(float(x)) for x in row)}" for i, row in zip(ids, embs)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_embeddings(path) -> tuple[list[str], np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 3 or head[:2] != ["#dapemb", "v1"] or not head[2].startswith("d="):
        raise ValueError(f"{path}: missing '#dapemb v1 d=<d>' header")
    d = int(head[2][2:])
    ids, rows = [], []
    for n, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        key, vals = line.split("\t")
        row = [float(x) for x in vals.split()]
        if len(row) != d:
            raise ValueError(f"{path}:{n}: expected {d} values, got {len(row)}")
        ids.append(key)
        rows.append(row)
    return ids, np.array(rows, dtype=np.float64).reshape(len(rows), d)


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def scatter_svg(points: np.ndarray, labels: Sequence[int], names: dict[int, str] | None = None,
                size: int = 640, title: str = "token representations") -> str:
    """Standalone SVG scatter, one colour per label, axes PC1/PC2."""
    pts = np.asarray(points, dtype=np.float64)
    labels = list(labels)
    names = names or {}
    pad = 60
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    xy = pad + (pts - lo) / span * (size - 2 * pad)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<title>{escape(title)}</title>',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{size - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{size - pad}" stroke="black"/>',
        f'<text x="{size / 2:.0f}" y="{size - 20}" text-anchor="middle" font-size="14">PC1</text>',
        f'<text x="20" y="{size / 2:.0f}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 20 {size / 2:.0f})">PC2</text>',
    ]
    kinds = sorted(set(labels))
    colour = {k: _PALETTE[n % len(_PALETTE)] for n, k in enumerate(kinds)}
    for (x, y), lab in zip(xy, labels):
        out.append(f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="3" fill="{colour[lab]}" fill-opacity="0.7"/>')
    for n, k in enumerate(kinds):
        y = 20 + 18 * n
        out.append(f'<rect x="{size - 150}" y="{y - 10}" width="12" height="12" fill="{colour[k]}"/>')
        out.append(f'<text x="{size - 132}" y="{y}" font-size="12">{escape(names.get(k, f"lang {k}"))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
