"""Domain types shared across the decoder: features, chunks, vocabulary,
hypotheses, beams, commit records and session configuration.

All durations are in milliseconds unless a name says otherwise.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

WORD_MARKER = "▁"


class DetectorMode(str, enum.Enum):
    SHARED_ONLY = "shared"
    ENDPOINT_ONLY = "endpoint"
    COMBINED = "combined"


class Detector(str, enum.Enum):
    SHARED_PREFIX = "SharedPrefix"
    RELIABLE_ENDPOINT = "ReliableEndpoint"
    FLUSH = "Flush"


def _frozen(values: np.ndarray) -> np.ndarray:
    values = np.array(values, dtype=np.float64)
    values.setflags(write=False)
    return values


@dataclass(frozen=True)
class FeatureFrame:
    values: np.ndarray
    index: int


@dataclass(frozen=True, eq=False)
class FeatureStream:
    """A sequence of feature frames stored as an ``(n, dim)`` array."""

    values: np.ndarray
    frame_period_ms: float
    dim: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.size == 0:
            values = values.reshape(0, self.dim)
        if values.ndim != 2 or values.shape[1] != self.dim:
            raise ValueError(f"expected features of shape (n, {self.dim}), got {values.shape}")
        if not self.frame_period_ms > 0:
            raise ValueError("frame_period_ms must be positive")
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if not np.all(np.isfinite(values)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "values", _frozen(values))

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> Iterator[FeatureFrame]:
        for i, row in enumerate(self.values):
            yield FeatureFrame(row, i)

    @property
    def duration_ms(self) -> float:
        return len(self) * self.frame_period_ms

    def __eq__(self, other):
        if not isinstance(other, FeatureStream):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.frame_period_ms == other.frame_period_ms
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class Chunk:
    """Frames ``[start_index, start_index + len(frames))`` of a stream.

    The flush marker is an empty chunk with ``flush=True``.
    """

    frames: np.ndarray
    start_index: int
    arrival_wall_ms: float
    audio_end_ms: float
    flush: bool = False

    def __post_init__(self):
        object.__setattr__(self, "frames", _frozen(self.frames))
        if len(self.frames) == 0 and not self.flush:
            raise ValueError("only the flush chunk may be empty")
        if self.flush and len(self.frames):
            raise ValueError("flush chunk must be empty")

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    eos_id: int
    word_boundary_marker: str = WORD_MARKER

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if not self.tokens:
            raise ValueError("vocabulary is empty")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("token strings must be unique")
        if not 0 <= self.eos_id < len(self.tokens):
            raise ValueError("eos_id out of range")
        starts = np.array(
            [i != self.eos_id and t.startswith(self.word_boundary_marker) for i, t in enumerate(self.tokens)]
        )
        object.__setattr__(self, "_word_start", starts)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def is_word_start(self, token_id: int) -> bool:
        return bool(self._word_start[token_id])

    @property
    def word_start_mask(self) -> np.ndarray:
        return self._word_start

    def id(self, token: str) -> int:
        return self.tokens.index(token)

    def ids(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def to_text(self) -> str:
        lines = [f"# marker={self.word_boundary_marker} eos={self.tokens[self.eos_id]}"]
        lines.extend(self.tokens)
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("# "):
            raise ValueError(f"{path}: missing vocabulary header")
        header = dict(kv.split("=", 1) for kv in lines[0][2:].split())
        tokens = tuple(lines[1:])
        return cls(tokens, tokens.index(header["eos"]), header["marker"])


def make_vocabulary(n_word_start: int = 16, n_continuation: int = 8) -> Vocabulary:
    """Deterministic sentencepiece-style vocabulary with syllable tokens."""
    onsets = "bdfgklmnprstvz"
    vowels = "aeiou"
    syllables = [o + v for v in vowels for o in onsets]
    if n_word_start + n_continuation > len(syllables):
        raise ValueError("vocabulary too large for the syllable inventory")
    starts = [WORD_MARKER + s for s in syllables[:n_word_start]]
    conts = syllables[n_word_start : n_word_start + n_continuation]
    return Vocabulary(tuple(["</s>", *starts, *conts]), eos_id=0)


@dataclass(frozen=True, eq=False)
class Hypothesis:
    """A scored token sequence.

    ``attention[i]`` is the attention vector emitted with ``tokens[i]``; it
    may be shorter than the number of frames available, trailing frames
    carrying zero weight.
    """

    tokens: tuple[int, ...] = ()
    log_score: float = 0.0
    attention: tuple[np.ndarray, ...] = ()
    token_log_probs: tuple[float, ...] = ()
    finished: bool = False

    def __post_init__(self):
        if len(self.attention) != len(self.tokens) or len(self.token_log_probs) != len(self.tokens):
            raise ValueError("attention/token_log_probs must align with tokens")

    def __eq__(self, other):
        if not isinstance(other, Hypothesis):
            return NotImplemented
        return (
            self.tokens == other.tokens
            and self.log_score == other.log_score
            and self.finished == other.finished
            and self.token_log_probs == other.token_log_probs
            and all(np.array_equal(a, b) for a, b in zip(self.attention, other.attention))
        )

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class Beam:
    hypotheses: tuple[Hypothesis, ...]
    committed_prefix: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "hypotheses", tuple(self.hypotheses))
        object.__setattr__(self, "committed_prefix", tuple(self.committed_prefix))
        n = len(self.committed_prefix)
        for h in self.hypotheses:
            if h.tokens[:n] != self.committed_prefix:
                raise ValueError("hypothesis does not extend the committed prefix")

    @property
    def best(self) -> Hypothesis:
        return self.hypotheses[0]

    def __len__(self) -> int:
        return len(self.hypotheses)


@dataclass(frozen=True)
class CommitRecord:
    """Tokens that became immutable at one detection step.

    ``words`` lists the words finalized by this commit: their text can no
    longer change. A word is final once the following word-initial token
    is committed, once a word-sealing endpoint commit ends on it, or at
    flush.
    """

    tokens: tuple[int, ...]
    words: tuple[str, ...]
    commit_wall_ms: float
    audio_consumed_ms: float
    detector: Detector

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "words", tuple(self.words))
        object.__setattr__(self, "detector", Detector(self.detector))
        if not self.tokens and self.detector is not Detector.FLUSH:
            raise ValueError("only flush commits may be empty")


@dataclass(frozen=True)
class SessionConfig:
    chunk_ms: float = 300.0
    beam_size: int = 8
    detector_mode: DetectorMode = DetectorMode.SHARED_ONLY
    delta_threshold_ms: float = math.inf
    attention_mass_threshold: float = 0.95
    max_output_tokens: int = 200
    length_normalize: bool = False
    # simulated time charges a fixed cost per scorer call instead of
    # reading the clock, so commit logs are reproducible
    simulated_time: bool = True
    score_cost_ms: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "detector_mode", DetectorMode(self.detector_mode))
        if not self.chunk_ms > 0:
            raise ValueError("chunk_ms must be positive")
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if not 0 < self.attention_mass_threshold <= 1:
            raise ValueError("attention_mass_threshold must lie in (0, 1]")
        if self.delta_threshold_ms < 0:
            raise ValueError("delta_threshold_ms must be non-negative")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")
        if self.score_cost_ms < 0:
            raise ValueError("score_cost_ms must be non-negative")


def tokens_to_words(vocab: Vocabulary, tokens: Sequence[int]) -> list[str]:
    """Merge sub-word tokens into words at word-boundary markers; eos is dropped."""
    words: list[str] = []
    marker = vocab.word_boundary_marker
    for pos, tok in enumerate(tokens):
        if not 0 <= tok < vocab.size:
            raise ValueError(f"unknown token id {tok} at position {pos}")
        if tok == vocab.eos_id:
            continue
        piece = vocab.tokens[tok]
        if piece.startswith(marker) or not words:
            words.append(piece[len(marker):] if piece.startswith(marker) else piece)
        else:
            words[-1] += piece
    return words


def frames_per_chunk(chunk_ms: float, frame_period_ms: float) -> int:
    # tolerance keeps 300 / 10 from flooring to 29 under float error
    n = math.floor(chunk_ms / frame_period_ms + 1e-9)
    if n < 1:
        raise ValueError(f"chunk_ms={chunk_ms} is shorter than one frame ({frame_period_ms} ms)")
    return n


def chunk_stream(stream: FeatureStream, chunk_ms: float) -> list[Chunk]:
    """Partition a stream into fixed-size chunks followed by a flush marker.

    Chunks arrive in real time: a chunk is available once its last frame
    has been recorded.
    """
    if not chunk_ms > 0:
        raise ValueError("chunk_ms must be positive")
    size = frames_per_chunk(chunk_ms, stream.frame_period_ms)
    chunks = []
    for start in range(0, len(stream), size):
        frames = stream.values[start : start + size]
        end_ms = (start + len(frames)) * stream.frame_period_ms
        chunks.append(Chunk(frames, start, end_ms, end_ms))
    end_ms = stream.duration_ms
    chunks.append(Chunk(np.zeros((0, stream.dim)), len(stream), end_ms, end_ms, flush=True))
    return chunks


def _format_float(x: float) -> str:
    return repr(float(x))


def write_feature_file(stream: FeatureStream) -> str:
    lines = [f"dim={stream.dim} frame_period_ms={_format_float(stream.frame_period_ms)}"]
    lines.extend(" ".join(_format_float(v) for v in row) for row in stream.values)
    return "\n".join(lines) + "\n"


def parse_feature_file(text: str, source: str = "<features>") -> FeatureStream:
    lines = text.splitlines()
    if not lines:
        raise ValueError(f"{source}: empty feature file")
    try:
        header = dict(kv.split("=", 1) for kv in lines[0].split())
        dim = int(header["dim"])
        period = float(header["frame_period_ms"])
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{source}:1: bad header {lines[0]!r}") from exc
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = [float(v) for v in line.split()]
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from exc
        if len(row) != dim:
            raise ValueError(f"{source}:{lineno}: expected {dim} values, got {len(row)}")
        rows.append(row)
    return FeatureStream(np.array(rows, dtype=np.float64).reshape(len(rows), dim), period, dim)


def read_feature_file(path: str | Path) -> FeatureStream:
    return parse_feature_file(Path(path).read_text(encoding="utf-8"), str(path))
