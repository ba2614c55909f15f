import dataclasses
import itertools
import re

import numpy as np
import pytest
from hypothesis import given, strategies as st

from entropylab.env import (PromptError, build_spec, chunks, demonstrations, hallucinated_argument, make_episode,
                            micro_spec, reward, score_batch, score_format, score_semantic, small_spec)

S = micro_spec()
BOS, EOS, CALL, END, LOOK, K0, K1, V0, V1, DOT = range(10)


def test_micro_vocabulary_layout():
    assert S.render(range(10)) == "BOS EOS CALL ENDCALL LOOKUP K0 K1 V0 V1 DOT"
    assert S.vocab_size == 10 and S.max_response_len == 6
    assert S.table == {K0: V0, K1: V1}
    assert small_spec().vocab_size == 13


def test_format_examples():
    assert score_format(S, [CALL, LOOK, K0, END, V1, EOS]) == 1
    assert score_format(S, [CALL, LOOK, V0, END, V1, EOS]) == 0
    assert score_format(S, [CALL, LOOK, K0, END, V1]) == 0
    assert score_format(S, []) == 0


def test_semantic_examples():
    assert score_semantic(S, [BOS, K0], [CALL, LOOK, K0, END, V0, EOS]) == 1
    assert score_semantic(S, [BOS, K0], [CALL, LOOK, K0, END, V1, EOS]) == 0
    ep = make_episode(S, [BOS, K0], [V0, EOS])
    assert (ep.r_fmt, ep.r_sem, ep.reward) == (0, 1, -0.1)
    assert score_semantic(S, [BOS, K0], [EOS, V0]) == 0


def test_semantic_rejects_bad_prompt():
    with pytest.raises(PromptError):
        score_semantic(S, [BOS, V0], [EOS])
    with pytest.raises(PromptError):
        score_semantic(S, [K0], [EOS])


def test_hallucination_examples():
    assert hallucinated_argument(S, [BOS, K0], [CALL, LOOK, K1, END, V1, EOS]) == 1
    assert hallucinated_argument(S, [BOS, K0], [CALL, LOOK, K0, END, V0, EOS]) == 0
    assert hallucinated_argument(S, [BOS, K0], [CALL, LOOK, K1, END, V1]) == 0


def test_reward_constants():
    assert reward(S, 1, 1) == 10.0
    assert reward(S, 1, 0) == 0.0
    assert reward(S, 0, 1) == -0.1
    assert reward(S, 0, 0) == -0.1


def _regex_oracle(spec):
    """Independent grammar oracle over rendered token names."""
    names = {t: spec.name(t) for t in range(spec.vocab_size)}
    fill = "|".join(names[f] for f in spec.fillers) or "NOFILL"
    keys = "|".join(names[k] for k in spec.keys)
    vals = "|".join(names[v] for v in spec.values)
    seg = f"(THINK( ({fill}))+ DOT )*" if spec.think is not None else ""
    pat = re.compile(f"^{seg}CALL LOOKUP ({keys}) ENDCALL ({vals}) EOS$")
    return lambda seq: int(len(seq) <= spec.max_response_len and bool(pat.match(spec.render(seq))))


def _all_sequences(V, L):
    for n in range(L + 1):
        yield from itertools.product(range(V), repeat=n)


def test_brute_force_valid_count_micro():
    # every nonempty sequence of length <= 6, scored in batches against the closed-form count
    total = 0
    for n in range(1, 7):
        toks = np.indices((10,) * n).reshape(n, -1).T
        fmt, _ = score_batch(S, K0, toks, np.full(len(toks), n))
        total += int(fmt.sum())
    assert total == len(S.keys) * len(S.values) == 4


FILLER_SPEC = build_spec(num_keys=2, num_values=2, think=True, num_fillers=2, max_response_len=12)
_ORACLE = _regex_oracle(FILLER_SPEC)

segment = st.lists(st.sampled_from(FILLER_SPEC.fillers), min_size=0, max_size=3)
slot = st.sampled_from(FILLER_SPEC.keys + FILLER_SPEC.values)
closer = st.sampled_from([FILLER_SPEC.eos, FILLER_SPEC.dot])


@given(st.lists(segment, max_size=3), slot, slot, closer)
def test_format_matches_regex_oracle_on_grammar_like_sequences(segs, arg, ans, end):
    seq = []
    for seg in segs:
        seq += [FILLER_SPEC.think, *seg, FILLER_SPEC.dot]
    seq += [FILLER_SPEC.call, FILLER_SPEC.lookup, arg, FILLER_SPEC.endcall, ans, end]
    assert score_format(FILLER_SPEC, seq) == _ORACLE(seq)


@given(st.lists(st.integers(0, FILLER_SPEC.vocab_size - 1), max_size=13))
def test_format_matches_regex_oracle_on_random_sequences(seq):
    assert score_format(FILLER_SPEC, seq) == _ORACLE(seq)


def test_valid_count_with_one_filler_prefix():
    # length <= 9 with one key/value/filler: the bare call and a single THINK F DOT prefix
    spec = build_spec(num_keys=1, num_values=1, think=True, num_fillers=1, max_response_len=9)
    oracle = _regex_oracle(spec)
    tail = [spec.call, spec.lookup, spec.keys[0], spec.endcall, spec.values[0], spec.eos]
    count = 0
    for n in range(4):
        for head in itertools.product(range(spec.vocab_size), repeat=n):
            seq = list(head) + tail
            a = score_format(spec, seq)
            assert a == oracle(seq)
            count += a
    assert count == 2


def test_demonstrations_examples():
    demos = demonstrations(S, 4, rng_seed=3)
    assert sorted(p[1] for p, _ in demos) == [K0, K0, K1, K1]
    for p, r in demos:
        ep = make_episode(S, p, r)
        assert (ep.r_fmt, ep.r_sem) == (1, 1)
        assert len(r) == 6
    spec = small_spec()
    lengths = set()
    for p, r in demonstrations(spec, 40, rng_seed=1):
        ep = make_episode(spec, p, r)
        assert (ep.r_fmt, ep.r_sem) == (1, 1)
        lengths.add(len(r))
    assert len(lengths) > 1
    assert all(len(r) == 6 for _, r in demonstrations(spec, 10, rng_seed=1, fillers=False))
    with pytest.raises(ValueError):
        demonstrations(S, 0)


def test_format_and_semantic_sets_overlap_without_containment():
    p = [BOS, K0]
    both = make_episode(S, p, [CALL, LOOK, K0, END, V0, EOS])
    fmt_only = make_episode(S, p, [CALL, LOOK, K0, END, V1, EOS])
    sem_only = make_episode(S, p, [V0, EOS])
    assert (both.r_fmt, both.r_sem) == (1, 1)
    assert (fmt_only.r_fmt, fmt_only.r_sem) == (1, 0)
    assert (sem_only.r_fmt, sem_only.r_sem) == (0, 1)


def test_chunks_split_on_delimiters():
    spec = small_spec()
    t, f0, f1 = spec.think, *spec.fillers
    resp = [t, f0, spec.dot, t, f0, spec.dot, spec.call, spec.eos]
    assert chunks(spec, resp) == [(t, f0), (t, f0), (spec.call,)]


def test_spec_validation():
    with pytest.raises(ValueError):
        dataclasses.replace(S, eos=S.bos)
    with pytest.raises(ValueError):
        dataclasses.replace(S, answers=(K0, V0))


responses = st.lists(st.integers(0, 9), min_size=0, max_size=8)


@given(responses, st.sampled_from([K0, K1]))
def test_reward_factorization(resp, key):
    ep = make_episode(S, [BOS, key], resp)
    assert (ep.reward > 0) == (ep.r_fmt * ep.r_sem == 1)
    again = make_episode(S, ep.prompt, ep.response)
    assert again == ep


@given(st.lists(responses, min_size=1, max_size=12), st.sampled_from([K0, K1]))
def test_batch_scoring_matches_scalar(batch, key):
    n, L = len(batch), max(1, max(len(r) for r in batch))
    toks = np.full((n, L), -1, dtype=np.int64)
    for i, r in enumerate(batch):
        toks[i, :len(r)] = r
    fmt, sem = score_batch(S, key, np.where(toks < 0, 0, toks), np.array([len(r) for r in batch]))
    for i, r in enumerate(batch):
        assert fmt[i] == score_format(S, r)
        assert sem[i] == score_semantic(S, [BOS, key], r)
