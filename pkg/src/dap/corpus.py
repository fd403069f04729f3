"""Synthetic parallel corpora with known token alignments.

Every language renders the same concept sequence through its own bijection
onto a private token range, so tokens never overlap across languages and the
only route to cross-lingual alignment is learning it. Non-pivot renderings
swap every ``reorder_period``-th adjacent pair of positions, which keeps the
gold alignment easy to compute while breaking positional identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .model import CLS, MASK, N_SPECIAL, PAD

HEADER = "#dapcorpus v1"


class SpecError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class LanguageSpec:
    n_langs: int = 3
    n_concepts: int = 200
    reorder_period: int = 2
    min_len: int = 4
    max_len: int = 8
    zipf_exponent: float = 1.1
    bigram_strength: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.n_concepts < 2:
            raise SpecError(f"need at least 2 concepts, got {self.n_concepts}")
        if self.n_langs < 2:
            raise SpecError(f"need a pivot and at least one other language, got {self.n_langs}")
        if not 1 <= self.min_len <= self.max_len:
            raise SpecError(f"empty length range [{self.min_len}, {self.max_len}]")
        if self.reorder_period < 0:
            raise SpecError("reorder_period must be >= 0")

    @property
    def vocab_size(self) -> int:
        return N_SPECIAL + self.n_langs * self.n_concepts

    def token_range(self, lang: int) -> range:
        start = N_SPECIAL + lang * self.n_concepts
        return range(start, start + self.n_concepts)

    def zipf_weights(self) -> np.ndarray:
        w = 1.0 / np.arange(1, self.n_concepts + 1) ** self.zipf_exponent
        return w / w.sum()

    def lexicons(self) -> np.ndarray:
        """n_langs x C table: token id of concept c in language i."""
        rng = np.random.default_rng([self.seed, 0xC0FFEE])
        return np.stack([rng.permutation(self.n_concepts) + self.token_range(i).start for i in range(self.n_langs)])

    def transitions(self) -> np.ndarray:
        """Row-stochastic concept bigram matrix: Zipf prior times lognormal noise."""
        rng = np.random.default_rng([self.seed, 0xB16A])
        noise = np.exp(self.bigram_strength * rng.standard_normal((self.n_concepts, self.n_concepts)))
        t = self.zipf_weights()[None, :] * noise
        return t / t.sum(axis=1, keepdims=True)


@dataclass
class ParallelPair:
    lang_id: int
    source: list[int]
    pivot: list[int]
    alignment: list[tuple[int, int]]  # (source position, pivot position)


@dataclass
class ParallelBatch:
    src_ids: np.ndarray
    piv_ids: np.ndarray
    src_len: np.ndarray
    piv_len: np.ndarray
    lang_ids: np.ndarray
    alignments: list[list[tuple[int, int]]] = field(default_factory=list)
    indices: np.ndarray | None = None

    @property
    def src_pad(self) -> np.ndarray:
        return self.src_ids == PAD

    @property
    def piv_pad(self) -> np.ndarray:
        return self.piv_ids == PAD

    def __len__(self) -> int:
        return int(self.src_ids.shape[0])


def reorder_permutation(n: int, period: int) -> np.ndarray:
    """perm[i] = canonical position rendered at position i."""
    perm = np.arange(n)
    if period <= 0:
        return perm
    for start in range(0, n - 1, period):
        perm[start], perm[start + 1] = perm[start + 1], perm[start]
    return perm


def _sample_concepts(spec: LanguageSpec, rng: np.random.Generator, zipf: np.ndarray, trans: np.ndarray) -> np.ndarray:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    seq = np.empty(n, dtype=np.int64)
    seq[0] = rng.choice(spec.n_concepts, p=zipf)
    for i in range(1, n):
        seq[i] = rng.choice(spec.n_concepts, p=trans[seq[i - 1]])
    return seq


def generate_corpus(spec: LanguageSpec, n_pairs: int, seed: int | None = None) -> list[ParallelPair]:
    spec.validate()
    seed = spec.seed if seed is None else seed
    lex = spec.lexicons()
    zipf = spec.zipf_weights()
    trans = spec.transitions()
    pairs = []
    for k in range(n_pairs):
        rng = np.random.default_rng([seed, k])
        concepts = _sample_concepts(spec, rng, zipf, trans)
        lang = 1 + k % (spec.n_langs - 1)
        perm = reorder_permutation(len(concepts), spec.reorder_period)
        pairs.append(ParallelPair(
            lang_id=lang,
            source=[int(t) for t in lex[lang][concepts[perm]]],
            pivot=[int(t) for t in lex[0][concepts]],
            alignment=[(i, int(j)) for i, j in enumerate(perm)],
        ))
    return pairs


def decode_concept(spec: LanguageSpec, lang_id: int, token_id: int) -> int:
    rng = spec.token_range(lang_id)
    if token_id not in rng:
        raise DataError(f"token {token_id} is not in language {lang_id}'s range [{rng.start}, {rng.stop})")
    lex = spec.lexicons()[lang_id]
    return int(np.flatnonzero(lex == token_id)[0])


def token_language(spec: LanguageSpec, token_id: int) -> int:
    if token_id < N_SPECIAL:
        raise DataError(f"special token {token_id} has no language")
    lang = (token_id - N_SPECIAL) // spec.n_concepts
    if lang >= spec.n_langs:
        raise DataError(f"token {token_id} beyond vocabulary")
    return lang


# ---------------------------------------------------------------- files


def write_corpus(pairs: Sequence[ParallelPair], path) -> None:
    lines = [HEADER]
    for p in pairs:
        align = ",".join(f"{i}-{j}" for i, j in p.alignment)
        lines.append(f"{p.lang_id}\t{' '.join(map(str, p.source))}\t{' '.join(map(str, p.pivot))}\t{align}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_corpus(path) -> list[ParallelPair]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != HEADER:
        raise DataError(f"{path}: missing '{HEADER}' header")
    pairs = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            lang, src, piv, align = line.split("\t")
            alignment = [tuple(int(v) for v in a.split("-")) for a in align.split(",") if a]
            pairs.append(ParallelPair(int(lang), [int(t) for t in src.split()], [int(t) for t in piv.split()], alignment))
        except ValueError as exc:
            raise DataError(f"{path}:{n}: {exc}") from None
    return pairs


def split_heldout(pairs: Sequence[ParallelPair], frac: float = 0.1) -> tuple[list[ParallelPair], list[ParallelPair]]:
    """Last ``frac`` of the corpus is held out."""
    n_eval = int(round(len(pairs) * frac))
    cut = len(pairs) - n_eval
    return list(pairs[:cut]), list(pairs[cut:])


# ---------------------------------------------------------------- batching


def _pad(rows: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([len(r) for r in rows], dtype=np.int64)
    out = np.full((len(rows), int(lens.max())), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out, lens


def collate(pairs: Sequence[ParallelPair], indices=None) -> ParallelBatch:
    src, src_len = _pad([p.source for p in pairs])
    piv, piv_len = _pad([p.pivot for p in pairs])
    return ParallelBatch(
        src_ids=src, piv_ids=piv, src_len=src_len, piv_len=piv_len,
        lang_ids=np.array([p.lang_id for p in pairs], dtype=np.int64),
        alignments=[list(p.alignment) for p in pairs],
        indices=None if indices is None else np.asarray(indices),
    )


def check_lengths(pairs: Sequence[ParallelPair], s_max: int) -> None:
    for i, p in enumerate(pairs):
        if max(len(p.source), len(p.pivot)) > s_max - 1:
            raise DataError(f"pair {i} has a sentence longer than S_max-1={s_max - 1}")


def epoch_batches(pairs: Sequence[ParallelPair], batch_size: int, s_max: int, seed: int, epoch: int = 0,
                  drop_last: bool = True) -> list[ParallelBatch]:
    check_lengths(pairs, s_max)
    order = np.random.default_rng([seed, epoch]).permutation(len(pairs))
    out = []
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        out.append(collate([pairs[i] for i in idx], idx))
    return out


def make_batches(pairs: Sequence[ParallelPair], batch_size: int, s_max: int, seed: int,
                 drop_last: bool = True) -> Iterator[ParallelBatch]:
    """Endless stream, reshuffled every epoch. Short final batches are dropped
    by default because in-batch negatives need the full batch."""
    check_lengths(pairs, s_max)
    epoch = 0
    while True:
        batches = epoch_batches(pairs, batch_size, s_max, seed, epoch, drop_last)
        if not batches:
            raise DataError(f"{len(pairs)} pairs cannot fill a batch of {batch_size}")
        yield from batches
        epoch += 1


# ---------------------------------------------------------------- TLM masking


@dataclass
class TLMInput:
    ids: np.ndarray  # B x (1 + Sx + Sy), CLS at 0, padded
    positions: list[np.ndarray]  # per example, indices into ids
    targets: np.ndarray  # flat original ids in (example, position) order


def mask_for_tlm(batch: ParallelBatch, p_mask: float, rng: np.random.Generator,
                 branch_probs: tuple[float, float, float] = (0.8, 0.1, 0.1),
                 vocab_size: int | None = None) -> TLMInput:
    """Concatenate [CLS] x y per pair and corrupt a random subset of real tokens.

    Each real token is selected with ``p_mask``; selected tokens become MASK,
    a random non-special token, or stay unchanged per ``branch_probs``. An
    example with no selected token gets one forced uniformly at random.
    """
    if not 0.0 < p_mask <= 1.0:
        raise ValueError(f"p_mask must be in (0, 1], got {p_mask}")
    rows = [[CLS] + list(batch.src_ids[i, : batch.src_len[i]]) + list(batch.piv_ids[i, : batch.piv_len[i]])
            for i in range(len(batch))]
    ids, lens = _pad(rows)
    original = ids.copy()
    hi = vocab_size if vocab_size is not None else int(ids.max()) + 1
    positions = []
    for i, n in enumerate(lens):
        chosen = np.flatnonzero(rng.random(n - 1) < p_mask) + 1
        if chosen.size == 0:
            chosen = np.array([1 + int(rng.integers(n - 1))])
        branch = rng.choice(3, size=chosen.size, p=branch_probs)
        rand_tok = rng.integers(N_SPECIAL, hi, size=chosen.size)
        ids[i, chosen[branch == 0]] = MASK
        ids[i, chosen[branch == 1]] = rand_tok[branch == 1]
        positions.append(chosen)
    targets = np.concatenate([original[i, pos] for i, pos in enumerate(positions)])
    return TLMInput(ids=ids, positions=positions, targets=targets)
