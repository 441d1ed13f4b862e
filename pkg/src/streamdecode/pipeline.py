"""Session orchestration: chunk -> incremental inference -> detection -> commit.

Chunks arrive in real time (a chunk becomes available when its last frame
has been recorded). Processing of a chunk starts when it is available and
the previous chunk is done, so ``commit_wall_ms`` includes queueing as
well as compute.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    CommitRecord,
    Detector,
    DetectorMode,
    FeatureStream,
    SessionConfig,
    chunk_stream,
    tokens_to_words,
)
from .scoring import Scorer, StepScore
from .search import Clock, IncrementalDecoder, ManualClock, MonotonicClock, best_result
from .stability import DetectionContext, detect

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SessionResult:
    commits: tuple[CommitRecord, ...] = ()
    final_tokens: tuple[int, ...] = ()
    final_words: tuple[str, ...] = ()
    step_compute_ms: tuple[float, ...] = ()
    audio_duration_ms: float = 0.0
    utt: str = "utt"

    @property
    def total_compute_ms(self) -> float:
        return float(sum(self.step_compute_ms))


class ChargedScorer:
    """Scorer wrapper advancing a manual clock by a fixed cost per call."""

    def __init__(self, scorer: Scorer, clock: ManualClock, cost_ms: float):
        self.scorer = scorer
        self.clock = clock
        self.cost_ms = cost_ms
        self.vocab = scorer.vocab
        self.dim = scorer.dim
        self.max_output_tokens = scorer.max_output_tokens
        self.provides_attention = scorer.provides_attention

    def score_step(self, features: np.ndarray, prefix: Sequence[int]) -> StepScore:
        self.clock.advance(self.cost_ms)
        return self.scorer.score_step(features, prefix)


def check_compatible(stream: FeatureStream, config: SessionConfig, scorer: Scorer) -> None:
    if stream.dim != scorer.dim:
        raise ValueError(f"feature dimension {stream.dim} does not match scorer dimension {scorer.dim}")
    if config.detector_mode is not DetectorMode.SHARED_ONLY and not scorer.provides_attention:
        raise ValueError(f"detector mode {config.detector_mode.value!r} needs a scorer that provides attention")


def run_session(
    stream: FeatureStream,
    config: SessionConfig,
    scorer: Scorer,
    *,
    clock: Clock | None = None,
    utt: str = "utt",
) -> SessionResult:
    """Decode one stream incrementally and return its commit history.

    With ``config.simulated_time`` every scorer call costs
    ``config.score_cost_ms`` of simulated compute and ``clock`` is ignored;
    otherwise compute is measured with ``clock`` (monotonic by default).
    """
    check_compatible(stream, config, scorer)
    if config.simulated_time:
        clock = ManualClock()
        scorer = ChargedScorer(scorer, clock, config.score_cost_ms)
    elif clock is None:
        clock = MonotonicClock()
    vocab = scorer.vocab
    decoder = IncrementalDecoder(
        scorer,
        config.beam_size,
        config.max_output_tokens,
        attention_mass_threshold=config.attention_mass_threshold,
        length_normalize=config.length_normalize,
        clock=clock,
    )

    commits: list[CommitRecord] = []
    busy_until = 0.0
    n_final_words = 0
    leader, persistence = None, 0

    def finalize_words(everything: bool) -> tuple[str, ...]:
        nonlocal n_final_words
        words = tokens_to_words(vocab, decoder.committed.tokens)
        n = len(words) if everything or decoder.sealed else max(len(words) - 1, 0)
        new = tuple(words[n_final_words:n])
        n_final_words = max(n_final_words, n)
        return new

    for chunk in chunk_stream(stream, config.chunk_ms):
        beam = decoder.step(chunk)
        start = max(chunk.arrival_wall_ms, busy_until)
        busy_until = start + decoder.step_compute_ms[-1]

        if chunk.flush:
            best = best_result(beam)
            rest = best.tokens[len(decoder.committed.tokens) :]
            if rest and rest[-1] == vocab.eos_id:
                rest = rest[:-1]
            new = decoder.commit(best, len(rest)) if decoder.n_frames else ()
            commits.append(CommitRecord(new, finalize_words(True), busy_until, chunk.audio_end_ms, Detector.FLUSH))
            break

        ctx = DetectionContext(
            vocab,
            chunk.audio_end_ms,
            stream.frame_period_ms,
            config.delta_threshold_ms,
            config.attention_mass_threshold,
        )
        extension, detector = detect(beam, config.detector_mode, ctx)

        nxt = beam.best.tokens[len(decoder.committed.tokens) : len(decoder.committed.tokens) + 1]
        persistence = persistence + 1 if nxt == leader else 1
        leader = nxt
        logger.debug("utt=%s audio=%.0fms leading token %s persisted %d steps", utt, chunk.audio_end_ms, nxt, persistence)

        if extension:
            new = decoder.commit(beam.best, len(extension), seal_word=detector is Detector.RELIABLE_ENDPOINT)
            commits.append(CommitRecord(new, finalize_words(False), busy_until, chunk.audio_end_ms, detector))

    final_tokens = decoder.committed.tokens
    return SessionResult(
        tuple(commits),
        final_tokens,
        tuple(tokens_to_words(vocab, final_tokens)),
        tuple(decoder.step_compute_ms),
        stream.duration_ms,
        utt,
    )


def _run_one(args):
    stream, config, scorer, utt = args
    return run_session(stream, config, scorer, utt=utt)


def run_sessions(
    streams: Sequence[tuple[str, FeatureStream]],
    config: SessionConfig,
    scorer: Scorer,
    jobs: int = 1,
) -> list[SessionResult]:
    """Decode many utterances; results keep the input order."""
    work = [(stream, config, scorer, utt) for utt, stream in streams]
    if jobs <= 1 or len(work) <= 1:
        return [_run_one(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_one, work, chunksize=max(1, len(work) // (4 * jobs))))


# -- commit log ---------------------------------------------------------------

COMMIT_FIELDS = ("utt", "commit_wall_ms", "audio_consumed_ms", "detector", "tokens", "words")


def format_ms(x: float) -> str:
    """At least three decimals, and exact enough to parse back to ``x``."""
    x = float(x)
    for places in range(3, 18):
        s = f"{x:.{places}f}"
        if float(s) == x:
            return s
    return repr(x)


def format_session(result: SessionResult) -> str:
    lines = [
        "#session\t"
        f"utt={result.utt}\t"
        f"audio_duration_ms={format_ms(result.audio_duration_ms)}\t"
        f"step_compute_ms={' '.join(format_ms(x) for x in result.step_compute_ms)}"
    ]
    for c in result.commits:
        lines.append(
            "\t".join(
                [
                    f"utt={result.utt}",
                    f"commit_wall_ms={format_ms(c.commit_wall_ms)}",
                    f"audio_consumed_ms={format_ms(c.audio_consumed_ms)}",
                    f"detector={c.detector.value}",
                    f"tokens={' '.join(map(str, c.tokens))}",
                    f"words={' '.join(c.words)}",
                ]
            )
        )
    return "\n".join(lines) + "\n"


def format_commit_log(results: Sequence[SessionResult]) -> str:
    return "".join(format_session(r) for r in results)


class LogError(ValueError):
    pass


def _fields(line: str, lineno: int, expected: Sequence[str]) -> dict[str, str]:
    parts = line.split("\t")
    keys = []
    out = {}
    for part in parts:
        key, sep, value = part.partition("=")
        if not sep:
            raise LogError(f"line {lineno}: field {part!r} is not key=value")
        keys.append(key)
        out[key] = value
    if tuple(keys) != tuple(expected):
        raise LogError(f"line {lineno}: expected fields {list(expected)}, got {keys}")
    return out


def replay_log(text: str) -> list[SessionResult]:
    """Rebuild the session results serialized by :func:`format_commit_log`."""
    sessions: list[dict] = []
    by_utt: dict[str, dict] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            if line.startswith("#session"):
                f = _fields(line[len("#session\t"):], lineno, ("utt", "audio_duration_ms", "step_compute_ms"))
                if f["utt"] in by_utt:
                    raise LogError(f"line {lineno}: duplicate session {f['utt']!r}")
                s = {
                    "utt": f["utt"],
                    "audio_duration_ms": float(f["audio_duration_ms"]),
                    "step_compute_ms": tuple(float(x) for x in f["step_compute_ms"].split()),
                    "commits": [],
                }
                sessions.append(s)
                by_utt[s["utt"]] = s
                continue
            if line.startswith("#"):
                continue
            f = _fields(line, lineno, COMMIT_FIELDS)
            s = by_utt.get(f["utt"])
            if s is None:
                s = {"utt": f["utt"], "audio_duration_ms": None, "step_compute_ms": (), "commits": []}
                sessions.append(s)
                by_utt[f["utt"]] = s
            record = CommitRecord(
                tuple(int(t) for t in f["tokens"].split()),
                tuple(f["words"].split()),
                float(f["commit_wall_ms"]),
                float(f["audio_consumed_ms"]),
                Detector(f["detector"]),
            )
        except LogError:
            raise
        except ValueError as exc:
            raise LogError(f"line {lineno}: {exc}") from exc
        if s["commits"]:
            prev = s["commits"][-1]
            if record.audio_consumed_ms < prev.audio_consumed_ms:
                raise LogError(f"line {lineno}: audio_consumed_ms decreases")
            if record.commit_wall_ms < prev.commit_wall_ms:
                raise LogError(f"line {lineno}: commit_wall_ms decreases")
        s["commits"].append(record)

    results = []
    for s in sessions:
        commits = tuple(s["commits"])
        duration = s["audio_duration_ms"]
        if duration is None:
            duration = commits[-1].audio_consumed_ms if commits else 0.0
        results.append(
            SessionResult(
                commits,
                tuple(t for c in commits for t in c.tokens),
                tuple(w for c in commits for w in c.words),
                s["step_compute_ms"],
                duration,
                s["utt"],
            )
        )
    return results


def read_commit_log(path: str | Path) -> list[SessionResult]:
    return replay_log(Path(path).read_text(encoding="utf-8"))
