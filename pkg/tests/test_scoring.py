import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamdecode.core import make_vocabulary
from streamdecode.scoring import (
    EnsembleScorer,
    ScorerSpec,
    StepScore,
    build_scorer,
    build_synthetic_scorer,
    corrupt_scorer,
    dump_scorer_spec,
    ensemble_combine,
    logsumexp,
    parse_scorer_spec,
)
from streamdecode.search import beam_search_offline

VOCAB = make_vocabulary()
SMALL = make_vocabulary(2, 2)


def features(n, dim=16, seed=0):
    return np.random.default_rng(seed).normal(size=(n, dim))


prefixes = st.lists(st.integers(1, VOCAB.size - 1), max_size=12).map(tuple)


@settings(max_examples=60, deadline=None)
@given(prefixes, st.integers(1, 120), st.floats(0.0, 1.0))
def test_log_probs_are_normalized(prefix, n_frames, noise):
    scorer = build_synthetic_scorer(3, VOCAB, 16, noise_level=noise)
    score = scorer.score_step(features(n_frames), prefix)
    assert abs(logsumexp(score.log_probs)) <= 1e-6
    score.check()


@settings(max_examples=40, deadline=None)
@given(prefixes, st.integers(1, 120))
def test_truncating_at_the_endpoint_changes_nothing(prefix, extra):
    scorer = build_synthetic_scorer(5, VOCAB, 16)
    cut = scorer.endpoint(len(prefix)) + 1
    full = features(cut + extra)
    assert scorer.score_step(full[:cut], prefix) == scorer.score_step(full, prefix)


def test_repeated_calls_are_bit_identical():
    a = build_synthetic_scorer(11, VOCAB, 16).score_step(features(40), (3, 4))
    b = build_synthetic_scorer(11, VOCAB, 16).score_step(features(40), (3, 4))
    assert a == b
    assert a.log_probs.tobytes() == b.log_probs.tobytes()


def test_dim_must_be_positive():
    with pytest.raises(ValueError):
        build_synthetic_scorer(0, VOCAB, 0)


def test_input_validation():
    scorer = build_synthetic_scorer(0, VOCAB, 16)
    with pytest.raises(ValueError, match="16-dim"):
        scorer.score_step(np.zeros((4, 8)), ())
    with pytest.raises(ValueError):
        scorer.score_step(np.zeros((0, 16)), ())
    with pytest.raises(ValueError, match="max_output_tokens"):
        scorer.score_step(np.zeros((4, 16)), (1,) * scorer.max_output_tokens)


def test_attention_reaches_endpoint_mass():
    scorer = build_synthetic_scorer(0, VOCAB, 16, frames_per_token=4)
    att = scorer.score_step(features(40), (1, 2)).attention
    assert att.sum() == pytest.approx(1.0)
    assert len(att) == scorer.endpoint(2) + 1
    assert att[-1] >= 0.95


def test_attention_can_be_disabled():
    scorer = build_synthetic_scorer(0, VOCAB, 16, attention=False)
    assert not scorer.provides_attention
    # uniform over the frames the first token can depend on
    att = scorer.score_step(features(10), ()).attention
    assert np.allclose(att, 1 / scorer.frames_per_token)


def test_ensemble_combine_example():
    a = StepScore(np.array([-1.0, -2.0]), np.array([1.0]))
    b = StepScore(np.array([-3.0, -2.0]), np.array([1.0]))
    out = ensemble_combine([a, b], [0.5, 0.5])
    assert np.allclose(out.log_probs, np.log([0.5, 0.5]))


def test_ensemble_single_member_unchanged():
    a = StepScore(np.log([0.2, 0.8]), np.array([0.3, 0.7]))
    assert ensemble_combine([a], [1.0]) == a


def test_ensemble_identical_members_idempotent():
    a = StepScore(np.log([0.2, 0.3, 0.5]), np.array([0.3, 0.7]))
    out = ensemble_combine([a, a, a], [0.2, 0.5, 0.3])
    assert np.allclose(out.log_probs, a.log_probs, atol=1e-12)
    assert np.allclose(out.attention, a.attention)


@pytest.mark.parametrize("weights", [[0.5], [1.5, -0.5], [0.3, 0.3]])
def test_ensemble_combine_rejects_bad_weights(weights):
    a = StepScore(np.log([0.5, 0.5]), np.array([1.0]))
    with pytest.raises(ValueError):
        ensemble_combine([a, a], weights)


def test_ensemble_attention_is_padded_and_renormalized():
    a = StepScore(np.log([0.5, 0.5]), np.array([1.0]))
    b = StepScore(np.log([0.5, 0.5]), np.array([0.0, 0.0, 1.0]))
    out = ensemble_combine([a, b], [0.5, 0.5])
    assert np.allclose(out.attention, [0.5, 0.0, 0.5])


def test_ensemble_scorer_of_one_matches_member():
    member = build_synthetic_scorer(4, VOCAB, 16)
    ens = EnsembleScorer([member], [1.0])
    f = features(30)
    assert ens.score_step(f, (2,)) == member.score_step(f, (2,))


def test_ensemble_scorer_attention_source():
    members = [build_synthetic_scorer(s, VOCAB, 16) for s in (1, 2)]
    ens = EnsembleScorer(members, attention_member=1)
    f = features(30)
    assert np.array_equal(ens.score_step(f, ()).attention, members[1].score_step(f, ()).attention)
    with pytest.raises(ValueError):
        EnsembleScorer(members, attention_member=2)


def exhaustive(scorer, feats, max_len):
    best = None
    for n in range(max_len):
        for body in itertools.product(range(1, scorer.vocab.size), repeat=n):
            seq = body + (0,)
            total = 0.0
            for k, tok in enumerate(seq):
                total = total + float(scorer.score_step(feats, seq[:k]).log_probs[tok])
            if best is None or (-total, seq) < best:
                best = (-total, seq)
    return best[1]


def test_planted_sequence_recovered_by_exhaustive_search():
    scorer = build_synthetic_scorer(7, SMALL, 8, codebook_seed=7, frames_per_token=4, bias_scale=0.5)
    planted = [3, 1, 4, 2, 0]
    feats = scorer.render(planted, tail_frames=4)
    best = exhaustive(scorer, feats, 6)
    assert list(best) == planted
    assert beam_search_offline(feats, scorer, 5**6, 6).tokens == best


def test_corrupt_scorer_noise_zero_is_identity():
    spec = ScorerSpec(seed=3, codebook_seed=3)
    f = features(50)
    clean = build_scorer(spec, VOCAB).score_step(f, (1, 2))
    assert build_scorer(corrupt_scorer(spec, 0.0, 9), VOCAB).score_step(f, (1, 2)) == clean


def test_corrupt_scorer_is_deterministic():
    spec = ScorerSpec(seed=3)
    f = features(50)
    a = build_scorer(corrupt_scorer(spec, 0.7, 9), VOCAB).score_step(f, (1,))
    b = build_scorer(corrupt_scorer(spec, 0.7, 9), VOCAB).score_step(f, (1,))
    assert a == b


def test_noise_lowers_planted_rank():
    spec = ScorerSpec(seed=2, codebook_seed=2)
    renderer = build_scorer(spec, VOCAB)
    rng = np.random.default_rng(0)
    planted = [int(t) for t in rng.integers(1, VOCAB.size, size=150)] + [0]
    feats = renderer.render(planted, jitter=0.1, rng=rng)
    mean_rank = []
    for noise in (0.0, 0.5, 1.0):
        scorer = build_scorer(corrupt_scorer(spec, noise, 5), VOCAB)
        ranks = []
        for k in range(len(planted)):
            lp = scorer.score_step(feats, planted[:k]).log_probs
            ranks.append(int((lp > lp[planted[k]]).sum()))
        mean_rank.append(np.mean(ranks))
    assert mean_rank[0] <= mean_rank[1] <= mean_rank[2]
    assert mean_rank[2] > mean_rank[0]


def test_corrupt_scorer_ensemble_members_get_distinct_seeds():
    spec = ScorerSpec(kind="ensemble", members=(ScorerSpec(seed=1), ScorerSpec(seed=2)), weights=(0.5, 0.5))
    noisy = corrupt_scorer(spec, 0.5, 10)
    assert [m.noise_seed for m in noisy.members] == [10, 11]
    with pytest.raises(ValueError):
        corrupt_scorer(spec, 1.5, 0)


@pytest.mark.parametrize(
    "spec",
    [
        ScorerSpec(seed=4, dim=8, sharpness=12.5, noise_level=0.25, noise_seed=3, attention=False),
        ScorerSpec(
            kind="ensemble",
            members=(ScorerSpec(seed=1), ScorerSpec(seed=1001, bias_scale=0.5)),
            weights=(0.75, 0.25),
            attention_member=None,
        ),
    ],
)
def test_spec_text_round_trip(spec):
    parsed, vocab_file = parse_scorer_spec(dump_scorer_spec(spec, vocab_file="vocab.txt"))
    assert parsed == spec
    assert vocab_file == "vocab.txt"


def test_spec_parse_errors():
    with pytest.raises(ValueError):
        parse_scorer_spec("kind=synthetic\nbogus=1\n")
    with pytest.raises(ValueError):
        parse_scorer_spec("kind=magic\n")
