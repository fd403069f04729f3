import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from dap.corpus import (
    LanguageSpec, DataError, SpecError, decode_concept, epoch_batches, generate_corpus, make_batches,
    mask_for_tlm, read_corpus, reorder_permutation, split_heldout, token_language, write_corpus, collate,
)
from dap.model import CLS, MASK, N_SPECIAL, PAD


@pytest.fixture(scope="module")
def spec():
    return LanguageSpec(n_langs=3, n_concepts=30, reorder_period=2, min_len=3, max_len=9, seed=4)


@pytest.fixture(scope="module")
def pairs(spec):
    return generate_corpus(spec, 200)


def test_generation_deterministic(spec):
    a, b = generate_corpus(spec, 50), generate_corpus(spec, 50)
    assert a == b


def test_identity_alignment_without_reordering():
    spec = LanguageSpec(n_concepts=20, reorder_period=0, seed=1)
    for p in generate_corpus(spec, 30):
        assert p.alignment == [(i, i) for i in range(len(p.source))]


def test_spec_errors():
    with pytest.raises(SpecError):
        generate_corpus(LanguageSpec(n_concepts=1), 3)
    with pytest.raises(SpecError):
        generate_corpus(LanguageSpec(min_len=5, max_len=4), 3)


def test_zipf_rank_correlation():
    spec = LanguageSpec(n_langs=2, n_concepts=50, seed=2)
    counts = np.zeros(50)
    for p in generate_corpus(spec, 10_000):
        for t in p.pivot:
            counts[decode_concept(spec, 0, t)] += 1
    rho = spearmanr(counts, spec.zipf_weights()).correlation
    assert rho >= 0.9


def test_languages_round_robin(spec, pairs):
    assert [p.lang_id for p in pairs[:6]] == [1, 2, 1, 2, 1, 2]


def test_token_ranges_identify_language(spec, pairs):
    for p in pairs:
        assert all(token_language(spec, t) == p.lang_id for t in p.source)
        assert all(token_language(spec, t) == 0 for t in p.pivot)
    ranges = [set(spec.token_range(i)) for i in range(spec.n_langs)]
    for i in range(spec.n_langs):
        assert not ranges[i] & {PAD, CLS, MASK}
        for j in range(i + 1, spec.n_langs):
            assert not ranges[i] & ranges[j]


def test_lexicon_is_bijection(spec):
    lex = spec.lexicons()
    for i in range(spec.n_langs):
        assert sorted(lex[i]) == list(spec.token_range(i))


def test_decode_round_trip(spec):
    lex = spec.lexicons()
    for c in range(spec.n_concepts):
        assert decode_concept(spec, 1, int(lex[1][c])) == c
        assert decode_concept(spec, 1, int(lex[1][c])) == decode_concept(spec, 2, int(lex[2][c])) == c


def test_decode_special_rejected(spec):
    for tok in (PAD, CLS, MASK):
        with pytest.raises(DataError):
            decode_concept(spec, 1, tok)


def test_alignment_maps_translations(spec, pairs):
    for p in pairs:
        for i, j in p.alignment:
            assert decode_concept(spec, p.lang_id, p.source[i]) == decode_concept(spec, 0, p.pivot[j])


@given(st.integers(1, 20), st.integers(0, 5))
def test_alignment_inverse_is_identity(n, period):
    perm = reorder_permutation(n, period)
    inv = np.argsort(perm)
    assert np.array_equal(perm[inv], np.arange(n))
    assert sorted(perm) == list(range(n))


def test_corpus_file_round_trip(tmp_path, pairs):
    path = tmp_path / "c.tsv"
    write_corpus(pairs, path)
    assert path.read_text().splitlines()[0] == "#dapcorpus v1"
    assert read_corpus(path) == pairs


def test_corpus_file_bad_header(tmp_path):
    path = tmp_path / "c.tsv"
    path.write_text("nope\n")
    with pytest.raises(DataError):
        read_corpus(path)


def test_heldout_is_tail(pairs):
    train, held = split_heldout(pairs, 0.1)
    assert len(held) == 20 and held == pairs[-20:] and train == pairs[:-20]


# ---------------------------------------------------------------- batching


def test_drop_last_batch_count(pairs):
    assert len(epoch_batches(pairs[:100], 32, 16, seed=0)) == 3


def test_batch_order_reproducible(pairs):
    a = [b.indices.tolist() for b in epoch_batches(pairs, 16, 16, seed=5)]
    b = [b.indices.tolist() for b in epoch_batches(pairs, 16, 16, seed=5)]
    assert a == b


def test_stream_reshuffles_epochs(pairs):
    it = make_batches(pairs[:64], 32, 16, seed=1)
    first = [next(it).indices.tolist() for _ in range(2)]
    second = [next(it).indices.tolist() for _ in range(2)]
    assert sorted(sum(first, [])) == sorted(sum(second, [])) == list(range(64))
    assert first != second


def test_pad_consistency(pairs):
    for b in epoch_batches(pairs, 16, 16, seed=0):
        real = np.arange(b.src_ids.shape[1])[None, :] < b.src_len[:, None]
        assert np.array_equal(~real, b.src_pad)
        real = np.arange(b.piv_ids.shape[1])[None, :] < b.piv_len[:, None]
        assert np.array_equal(~real, b.piv_pad)


def test_overlong_sentence_names_pair(pairs):
    with pytest.raises(DataError, match="pair 0"):
        epoch_batches(pairs, 4, s_max=3, seed=0)


# ---------------------------------------------------------------- TLM masking


def test_tlm_forced_single_position(pairs):
    batch = collate(pairs[:20])
    tin = mask_for_tlm(batch, 1e-12, np.random.default_rng(0))
    assert all(len(p) == 1 for p in tin.positions)
    assert np.all(tin.ids[:, 0] == CLS)


def test_tlm_full_mask_branch(pairs):
    batch = collate(pairs[:10])
    tin = mask_for_tlm(batch, 1.0, np.random.default_rng(0), branch_probs=(1.0, 0.0, 0.0))
    real = tin.ids != PAD
    real[:, 0] = False
    assert np.all(tin.ids[real] == MASK)
    lens = batch.src_len + batch.piv_len
    assert [len(p) for p in tin.positions] == list(lens)


def test_tlm_targets_are_originals(pairs):
    batch = collate(pairs[:10])
    tin = mask_for_tlm(batch, 0.5, np.random.default_rng(3))
    flat = np.concatenate([np.r_[batch.src_ids[i, : batch.src_len[i]], batch.piv_ids[i, : batch.piv_len[i]]][p - 1]
                           for i, p in enumerate(tin.positions)])
    assert np.array_equal(flat, tin.targets)


def test_tlm_mask_count_binomial():
    # 10000 examples, 10 + 10 real tokens each
    n_ex, length, p = 10_000, 20, 0.15
    from dap.corpus import ParallelBatch

    batch = ParallelBatch(
        src_ids=np.full((n_ex, 10), N_SPECIAL), piv_ids=np.full((n_ex, 10), N_SPECIAL + 1),
        src_len=np.full(n_ex, 10), piv_len=np.full(n_ex, 10), lang_ids=np.ones(n_ex, dtype=int),
    )
    tin = mask_for_tlm(batch, p, np.random.default_rng(0))
    counts = np.array([len(x) for x in tin.positions])
    # expected count includes the forced position when the binomial draw is empty
    p0 = (1 - p) ** length
    mean = length * p + p0
    var = length * p * (1 - p) + p0 * (1 - p0) + 2 * p0 * (0 - length * p)  # cov(X, 1[X=0]) = -p0*E[X]
    sigma = np.sqrt(var / n_ex)
    assert abs(counts.mean() - mean) <= 3 * sigma


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_every_example_gets_a_masked_position(seed):
    spec = LanguageSpec(n_concepts=10, min_len=1, max_len=3, seed=seed % 7)
    batch = collate(generate_corpus(spec, 8, seed))
    tin = mask_for_tlm(batch, 0.05, np.random.default_rng(seed))
    assert all(len(p) >= 1 for p in tin.positions)
