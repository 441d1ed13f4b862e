import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from streamdecode.core import CommitRecord, Detector, DetectorMode, SessionConfig
from streamdecode.metrics import (
    WordAlignment,
    build_conversion_chart,
    ConversionChart,
    confidence_latency,
    evaluate,
    format_alignments,
    latency_decomposition,
    parse_alignments,
    parse_references,
    format_references,
    rtf,
    session_latency_decomposition,
    tradeoff_sweep,
    wer,
    word_latency,
)
from streamdecode.pipeline import SessionResult, run_sessions
from streamdecode.scoring import build_scorer
from streamdecode.synthesis import generate_corpus


def session(commits, duration_ms, utt="u"):
    commits = tuple(commits)
    return SessionResult(
        commits,
        tuple(t for c in commits for t in c.tokens),
        tuple(w for c in commits for w in c.words),
        (),
        duration_ms,
        utt,
    )


def commit(words, wall, consumed, detector=Detector.SHARED_PREFIX):
    return CommitRecord(tuple(range(1, len(words) + 1)), tuple(words), wall, consumed, detector)


def test_word_latency_examples():
    assert word_latency(0.9, 1.2, 0.3) == pytest.approx(0.6)
    assert word_latency(2.0, 2.0, 0.0) == 0.0


def test_single_word_at_audio_end():
    result = session([commit(["a"], 1000.0, 1000.0, Detector.FLUSH)], 1000.0)
    d, c, u = session_latency_decomposition(result, [WordAlignment("u", "a", 0.2, 0.7)])
    assert (d, c) == (0.0, 1.0)
    assert u == pytest.approx(0.7)


def test_commit_at_utterance_end_gives_zero_latency():
    align = [WordAlignment("u", w, s, e) for w, s, e in [("a", 0.0, 0.3), ("b", 0.3, 0.5), ("c", 0.5, 0.9)]]
    result = session([commit([a.word], a.end_s * 1000, a.end_s * 1000) for a in align], 1000.0)
    dec = latency_decomposition([result], align)
    assert dec.mean_latency_s == pytest.approx(0.0, abs=1e-12)


def test_decomposition_errors():
    align = [WordAlignment("u", "a", 0.0, 0.5)]
    with pytest.raises(ValueError, match="empty"):
        session_latency_decomposition(session([], 1000.0), align)
    many = [WordAlignment("u", f"w{i}", 0.0, 0.5) for i in range(10)]
    with pytest.raises(ValueError, match="w3"):
        latency_decomposition([session([commit(["w0", "w1"], 600.0, 600.0)], 1000.0)], many)


def test_case_insensitive_matching_and_tolerance():
    align = [WordAlignment("u", w, 0.0, 0.1 * (i + 1)) for i, w in enumerate("a b c d e f g h i j k l m n o p q r s t u".split())]
    hyp = [a.word.upper() for a in align if a.word != "k"]
    dec = latency_decomposition([session([commit(hyp, 2500.0, 2100.0, Detector.FLUSH)], 2100.0)], align)
    assert dec.n_words == 20 and dec.n_unmatched == 1


@given(
    st.lists(
        st.tuples(st.integers(1, 3), st.floats(0.0, 3000.0), st.floats(0.0, 500.0)),
        min_size=1,
        max_size=8,
    )
)
def test_decomposition_matches_per_word_loop(steps):
    steps = sorted(steps, key=lambda s: s[1])
    commits, align, k = [], [], 0
    for n_words, consumed, delay in steps:
        words = [f"w{k + i}" for i in range(n_words)]
        commits.append(commit(words, consumed + delay, consumed))
        align.extend(WordAlignment("u", w, 0.0, consumed / 1000 * 0.9) for w in words)
        k += n_words
    duration = max(3000.0, steps[-1][1])
    dec = latency_decomposition([session(commits, duration)], align)
    total = 0.0
    for c, a in zip((c for c in commits for _ in c.words), align):
        total += word_latency(a.end_s, c.audio_consumed_ms / 1000, (c.commit_wall_ms - c.audio_consumed_ms) / 1000)
    assert dec.mean_latency_s == pytest.approx(total / len(align), abs=1e-9)
    assert dec.mean_latency_s == pytest.approx(dec.d_avg_s + dec.c_avg_s - dec.u_avg_s, abs=1e-9)


def chart_fixture():
    align = [WordAlignment(f"u{i}", "w", 0.0, e) for i, e in enumerate([0.2, 0.5, 0.8])]
    durations = {f"u{i}": 1.0 for i in range(3)}
    return build_conversion_chart(align, durations, np.arange(0, 101) * 0.01)


def test_chart_examples():
    chart = chart_fixture()
    assert chart.u_avg_shifted[10] == pytest.approx(0.6)
    assert chart.u_avg_shifted[0] == pytest.approx(0.5) == chart.u_avg


def test_chart_rejects_zero_duration():
    with pytest.raises(ValueError, match="zero-duration"):
        build_conversion_chart([WordAlignment("u", "w", 0.0, 0.0)], {"u": 0.0})


def test_confidence_latency_examples():
    chart = chart_fixture()
    assert confidence_latency(chart.u_avg, chart).delta_norm == 0.0
    target = float(np.interp(0.15, chart.delta_grid, chart.u_avg_shifted))
    assert confidence_latency(target, chart).delta_norm == pytest.approx(0.15, abs=0.01)
    low = confidence_latency(0.1, chart)
    assert low.delta_norm == chart.delta_grid[0] and low.clamped


def test_chart_clamp_option():
    align = [WordAlignment("u", "w", 0.0, 0.9)]
    chart = build_conversion_chart(align, {"u": 1.0}, [0.0, 0.05, 0.1, 0.2], clamp=True)
    assert list(chart.u_avg_shifted) == pytest.approx([0.9, 0.95, 1.0, 1.0])


def test_chart_text_round_trip():
    chart = chart_fixture()
    back = ConversionChart.from_text(chart.to_text())
    assert np.array_equal(back.delta_grid, chart.delta_grid)
    assert np.array_equal(back.u_avg_shifted, chart.u_avg_shifted)
    assert back.mean_duration_s == chart.mean_duration_s


@pytest.mark.parametrize("compute, audio, expected", [(100, 1000, 0.1), (0, 1000, 0.0), (1000, 1000, 1.0)])
def test_rtf_examples(compute, audio, expected):
    assert rtf(compute, audio) == expected


def test_rtf_rejects_zero_audio():
    with pytest.raises(ValueError):
        rtf(1.0, 0.0)


def test_wer_examples():
    assert wer("a b c d".split(), "a x c".split()) == 0.5
    assert wer("a b".split(), "a b".split()) == 0.0
    assert wer(["Hello"], ["hello"], normalize_case=True) == 0.0
    with pytest.raises(ValueError):
        wer([], ["a"])


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(8, 6)


def test_infinite_threshold_equals_shared_only(corpus):
    point = tradeoff_sweep(corpus, SessionConfig(), [math.inf])[0]
    scorer = build_scorer(corpus.scorer_spec, corpus.vocab)
    shared = evaluate(
        run_sessions([(u.utt, u.stream) for u in corpus.utterances], SessionConfig(), scorer),
        corpus.alignments,
        corpus.references,
    )
    assert (point.confidence_latency_s, point.wer) == (shared.confidence_latency_s, shared.wer)


def test_single_utterance_sweep_matches_manual_run(corpus):
    one = type(corpus)(corpus.vocab, corpus.scorer_spec, corpus.utterances[:1])
    point = tradeoff_sweep(one, SessionConfig(), [250.0])[0]
    config = SessionConfig(detector_mode=DetectorMode.COMBINED, delta_threshold_ms=250.0)
    u = one.utterances[0]
    manual = evaluate(run_sessions([(u.utt, u.stream)], config, build_scorer(one.scorer_spec, one.vocab)), u.alignments)
    assert point.confidence_latency_s == manual.confidence_latency_s
    assert point.wer == manual.wer == 0.0


def test_sweep_needs_thresholds(corpus):
    with pytest.raises(ValueError):
        tradeoff_sweep(corpus, SessionConfig(), [])


def test_alignment_and_reference_round_trip(corpus):
    assert parse_alignments(format_alignments(corpus.alignments)) == corpus.alignments
    refs = {k: list(v) for k, v in corpus.references.items()}
    assert parse_references(format_references(refs)) == refs


def test_alignment_parse_errors():
    with pytest.raises(ValueError, match="x.ctm:2"):
        parse_alignments("u a 0 1\nu b 1\n", "x.ctm")
    with pytest.raises(ValueError, match=":1"):
        parse_alignments("u a 2 1\n")
