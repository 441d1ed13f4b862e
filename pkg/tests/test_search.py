import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamdecode.core import Beam, Chunk, Hypothesis, chunk_stream, make_vocabulary
from streamdecode.scoring import StepScore, build_scorer
from streamdecode.search import (
    IncrementalDecoder,
    ManualClock,
    beam_extend,
    beam_search_offline,
    best_result,
    incremental_step,
    root_beam,
)
from streamdecode.synthesis import generate_corpus


def step(log_probs, n_frames=1):
    return StepScore(np.asarray(log_probs, dtype=float), np.full(n_frames, 1.0 / n_frames))


def test_fan_out_ranks_all_extensions():
    beam = beam_extend(root_beam(), [step(np.log([0.2, 0.5, 0.3]))], 3, eos_id=0)
    assert [h.tokens for h in beam.hypotheses] == [(1,), (2,), (0,)]
    assert beam.hypotheses[2].finished
    assert [h.log_score for h in beam.hypotheses] == pytest.approx(np.log([0.5, 0.3, 0.2]))


def test_beam_size_one_is_greedy():
    corpus = generate_corpus(3, 4)
    scorer = build_scorer(corpus.scorer_spec, corpus.vocab)
    for u in corpus.utterances:
        feats = u.stream.values
        tokens = []
        while True:
            nxt = int(np.argmax(scorer.score_step(feats, tokens).log_probs))
            tokens.append(nxt)
            if nxt == corpus.vocab.eos_id:
                break
        assert beam_search_offline(u.stream, scorer, 1, 200).tokens == tuple(tokens)


def test_ties_broken_by_token_ids():
    parents = Beam((Hypothesis((2,), -1.0, (np.ones(1),), (-1.0,)), Hypothesis((1,), -1.0, (np.ones(1),), (-1.0,))))
    flat = step(np.log([0.25] * 4))
    beam = beam_extend(parents, [flat, flat], 3, eos_id=0)
    assert [h.tokens for h in beam.hypotheses] == [(1, 0), (1, 1), (1, 2)]


def test_finished_hypotheses_are_carried():
    done = Hypothesis((1, 0), -0.1, (np.ones(1), np.ones(1)), (-0.05, -0.05), finished=True)
    open_ = Hypothesis((2,), -0.5, (np.ones(1),), (-0.5,))
    beam = beam_extend(Beam((done, open_)), [None, step(np.log([0.5, 0.5]))], 2, eos_id=0)
    assert beam.hypotheses[0] is done


def test_empty_beam_rejected():
    with pytest.raises(ValueError):
        beam_extend(Beam(()), [], 2, eos_id=0)


@settings(max_examples=80, deadline=None)
@given(
    st.lists(st.lists(st.floats(-8, 0), min_size=4, max_size=4), min_size=1, max_size=5),
    st.integers(1, 12),
)
def test_beam_extend_keeps_best_candidates(rows, beam_size):
    hyps = tuple(
        Hypothesis((i + 1,), -float(i), (np.ones(1),), (-float(i),)) for i in range(len(rows))
    )
    scores = [step(r) for r in rows]
    beam = beam_extend(Beam(hyps), scores, beam_size, eos_id=0)
    candidates = sorted(
        (-(h.log_score + r[v]), h.tokens + (v,)) for h, r in zip(hyps, rows) for v in range(4)
    )
    assert [h.tokens for h in beam.hypotheses] == [seq for _, seq in candidates[:beam_size]]


def test_offline_errors_and_determinism():
    corpus = generate_corpus(5, 2)
    scorer = build_scorer(corpus.scorer_spec, corpus.vocab)
    stream = corpus.utterances[0].stream
    with pytest.raises(ValueError):
        beam_search_offline(stream, scorer, 8, 0)
    assert beam_search_offline(stream, scorer, 8, 200) == beam_search_offline(stream, scorer, 8, 200)
    assert beam_search_offline(stream, scorer, 8, 200).tokens[:-1] == corpus.utterances[0].tokens


def test_peaked_scorer_greedy_recovers_planted():
    corpus = generate_corpus(21, 10)
    scorer = build_scorer(corpus.scorer_spec, corpus.vocab)
    for u in corpus.utterances:
        assert beam_search_offline(u.stream, scorer, 1, 200).tokens == u.tokens + (corpus.vocab.eos_id,)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(17, 12)


def decoder_for(corpus, beam_size=8):
    return IncrementalDecoder(build_scorer(corpus.scorer_spec, corpus.vocab), beam_size, 200, clock=ManualClock())


def test_single_chunk_then_flush_equals_offline(corpus):
    u = corpus.utterances[0]
    dec = decoder_for(corpus)
    chunks = chunk_stream(u.stream, u.stream.duration_ms)
    assert len(chunks) == 2
    incremental_step(dec, chunks[0])
    beam = incremental_step(dec, chunks[1])
    assert best_result(beam) == beam_search_offline(u.stream, dec.scorer, 8, 200)


def test_flush_runs_to_completion(corpus):
    u = corpus.utterances[1]
    dec = decoder_for(corpus)
    for chunk in chunk_stream(u.stream, 300):
        beam = dec.step(chunk)
    assert best_result(beam).finished


def test_leader_agrees_with_offline_on_covered_tokens(corpus):
    for u in corpus.utterances:
        dec = decoder_for(corpus)
        offline = beam_search_offline(u.stream, dec.scorer, 8, 200).tokens
        fpt = dec.scorer.frames_per_token
        for chunk in chunk_stream(u.stream, 100)[:-1]:
            leader = dec.step(chunk).best.tokens
            covered = dec.n_frames // fpt
            assert leader[:covered] == offline[:covered]


def test_step_order_is_enforced(corpus):
    u = corpus.utterances[2]
    chunks = chunk_stream(u.stream, 300)
    dec = decoder_for(corpus)
    with pytest.raises(ValueError, match="out-of-order"):
        dec.step(chunks[1])
    for chunk in chunks:
        dec.step(chunk)
    with pytest.raises(RuntimeError):
        dec.step(Chunk(np.zeros((0, u.stream.dim)), dec.n_frames, 0.0, 0.0, flush=True))


def test_commit_rejects_eos_and_divergent_hypotheses(corpus):
    dec = decoder_for(corpus)
    u = corpus.utterances[0]
    for chunk in chunk_stream(u.stream, 300):
        beam = dec.step(chunk)
    best = best_result(beam)
    with pytest.raises(ValueError, match="eos"):
        dec.commit(best, len(best.tokens))
    dec.commit(best, 2)
    other = Hypothesis((best.tokens[0] + 1,) + best.tokens[1:], 0.0, best.attention, best.token_log_probs)
    with pytest.raises(ValueError):
        dec.commit(other, 1)


def test_step_compute_reads_clock(corpus):
    clock = ManualClock()
    scorer = build_scorer(corpus.scorer_spec, corpus.vocab)
    dec = IncrementalDecoder(scorer, 4, 200, clock=clock)
    dec.step(chunk_stream(corpus.utterances[0].stream, 300)[0])
    assert dec.step_compute_ms == [0.0]
    assert dec.score_calls[0] > 0
