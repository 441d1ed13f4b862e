"""Deterministic synthetic corpora matched to the synthetic scorer.

Each utterance plants a random word sequence, renders it into feature
frames the scorer can read back, and derives exact word alignments from
the scorer's frame windows (no forced aligner needed).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import (
    FeatureStream,
    Vocabulary,
    make_vocabulary,
    read_feature_file,
    tokens_to_words,
    write_feature_file,
)
from .metrics import (
    WordAlignment,
    format_alignments,
    format_references,
    parse_alignments,
    parse_references,
)
from .scoring import ScorerSpec, SyntheticScorer, build_scorer, corrupt_scorer, dump_scorer_spec, load_scorer_spec

__all__ = [
    "Corpus",
    "Utterance",
    "corrupt_scorer",
    "generate_corpus",
    "load_corpus",
    "write_corpus",
    "write_text_atomic",
]


@dataclass(frozen=True)
class Utterance:
    utt: str
    stream: FeatureStream
    tokens: tuple[int, ...]
    words: tuple[str, ...]
    alignments: tuple[WordAlignment, ...]


@dataclass(frozen=True)
class Corpus:
    vocab: Vocabulary
    scorer_spec: ScorerSpec
    utterances: tuple[Utterance, ...]

    @property
    def alignments(self) -> list[WordAlignment]:
        return [a for u in self.utterances for a in u.alignments]

    @property
    def references(self) -> dict[str, tuple[str, ...]]:
        return {u.utt: u.words for u in self.utterances}

    def with_scorer(self, spec: ScorerSpec) -> "Corpus":
        return replace(self, scorer_spec=spec)


def generate_corpus(
    seed: int,
    n_utterances: int,
    vocab: Vocabulary | None = None,
    words_per_utt: tuple[int, int] = (4, 10),
    dim: int = 16,
    *,
    tokens_per_word: tuple[int, int] = (1, 3),
    frame_period_ms: float = 10.0,
    frames_per_token: int = 8,
    tail_frames: int = 16,
    jitter: float = 0.1,
    n_models: int = 1,
) -> Corpus:
    """Generate ``n_utterances`` utterances and the scorer spec that reads them.

    With ``n_models > 1`` the spec is a uniform ensemble of synthetic
    members sharing the feature codebook but differing in their biases.
    """
    if n_utterances < 1:
        raise ValueError("n_utterances must be >= 1")
    lo, hi = words_per_utt
    tlo, thi = tokens_per_word
    if not 1 <= lo <= hi or not 1 <= tlo <= thi:
        raise ValueError("invalid words_per_utt / tokens_per_word range")
    vocab = vocab if vocab is not None else make_vocabulary()
    starts = [i for i in range(vocab.size) if vocab.is_word_start(i)]
    conts = [i for i in range(vocab.size) if i != vocab.eos_id and not vocab.is_word_start(i)]
    if len(starts) < 2:
        raise ValueError("vocabulary needs at least two word-initial tokens")
    if thi > 1 and not conts:
        raise ValueError("multi-token words need continuation tokens in the vocabulary")

    member = ScorerSpec(seed=seed, dim=dim, codebook_seed=seed, frames_per_token=frames_per_token)
    if n_models > 1:
        members = tuple(replace(member, seed=seed + 1000 * k) for k in range(n_models))
        spec = ScorerSpec(kind="ensemble", members=members, weights=(1.0 / n_models,) * n_models)
    else:
        spec = member
    renderer = build_scorer(member, vocab)
    assert isinstance(renderer, SyntheticScorer)

    token_s = frames_per_token * frame_period_ms / 1000.0
    utterances = []
    for i in range(n_utterances):
        rng = np.random.default_rng([seed, i])
        tokens: list[int] = []
        spans = []
        for _ in range(int(rng.integers(lo, hi + 1))):
            n_tok = int(rng.integers(tlo, thi + 1))
            word = [int(rng.choice(starts))] + [int(rng.choice(conts)) for _ in range(n_tok - 1)]
            spans.append((len(tokens), len(tokens) + len(word)))
            tokens.extend(word)
        frames = renderer.render(tokens + [vocab.eos_id], tail_frames, jitter, rng)
        stream = FeatureStream(frames, frame_period_ms, dim)
        words = tuple(tokens_to_words(vocab, tokens))
        utt = f"utt{i:04d}"
        alignments = tuple(
            WordAlignment(utt, w, a * token_s, b * token_s) for w, (a, b) in zip(words, spans)
        )
        utterances.append(Utterance(utt, stream, tuple(tokens), words, alignments))
    return Corpus(vocab, spec, tuple(utterances))


def write_text_atomic(path: str | Path, text: str) -> None:
    """Write via a temporary sibling and rename, so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def write_corpus(corpus: Corpus, out_dir: str | Path) -> Path:
    """Write the corpus files plus a manifest of SHA-256 digests; returns the manifest path."""
    out = Path(out_dir)
    files: dict[str, str] = {}
    files["vocab.txt"] = corpus.vocab.to_text()
    files["scorer.cfg"] = dump_scorer_spec(corpus.scorer_spec, vocab_file="vocab.txt")
    for u in corpus.utterances:
        files[f"features/{u.utt}.feat"] = write_feature_file(u.stream)
    files["alignments.ctm"] = format_alignments(corpus.alignments)
    files["references.txt"] = format_references(corpus.references)
    files["tokens.txt"] = "".join(f"{u.utt} {' '.join(map(str, u.tokens))}\n" for u in corpus.utterances)
    for name, text in files.items():
        write_text_atomic(out / name, text)
    manifest = "".join(
        f"{hashlib.sha256(text.encode('utf-8')).hexdigest()}  {name}\n" for name, text in sorted(files.items())
    )
    write_text_atomic(out / "manifest.txt", manifest)
    return out / "manifest.txt"


def load_corpus(corpus_dir: str | Path) -> Corpus:
    root = Path(corpus_dir)
    spec, vocab = load_scorer_spec(root / "scorer.cfg")
    alignments = parse_alignments((root / "alignments.ctm").read_text(encoding="utf-8"), str(root / "alignments.ctm"))
    references = parse_references((root / "references.txt").read_text(encoding="utf-8"))
    tokens = parse_references((root / "tokens.txt").read_text(encoding="utf-8"))
    by_utt: dict[str, list[WordAlignment]] = {}
    for a in alignments:
        by_utt.setdefault(a.utt, []).append(a)
    utterances = []
    for path in sorted((root / "features").glob("*.feat")):
        utt = path.stem
        utterances.append(
            Utterance(
                utt,
                read_feature_file(path),
                tuple(int(t) for t in tokens.get(utt, [])),
                tuple(references.get(utt, [])),
                tuple(by_utt.get(utt, [])),
            )
        )
    return Corpus(vocab, spec, tuple(utterances))
