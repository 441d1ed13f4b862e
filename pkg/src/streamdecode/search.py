"""Beam search over a scorer, offline and incrementally over growing audio.

The incremental decoder keeps the committed (stable) prefix and, for every
new chunk, restarts beam extension from that prefix over all frames
received so far. The beam it returns is unstable; the stability detector
decides what to commit from it.
"""

from __future__ import annotations

import heapq
import time
from typing import Callable, Protocol, Sequence

import numpy as np

from .core import Beam, Chunk, FeatureStream, Hypothesis
from .scoring import Scorer, StepScore
from .stability import estimate_endpoint


class Clock(Protocol):
    def now_ms(self) -> float: ...


class MonotonicClock:
    def now_ms(self) -> float:
        return time.perf_counter() * 1000.0


class ManualClock:
    """Clock that only moves when told to."""

    def __init__(self, start_ms: float = 0.0):
        self.t = float(start_ms)

    def now_ms(self) -> float:
        return self.t

    def advance(self, ms: float) -> None:
        self.t += ms


def beam_extend(
    beam: Beam,
    step_scores: Sequence[StepScore | None],
    beam_size: int,
    eos_id: int,
    *,
    length_normalize: bool = False,
) -> Beam:
    """One search step: expand every unfinished hypothesis by every token.

    Finished hypotheses are carried unchanged (their entry in
    ``step_scores`` is ignored). Candidates are ranked by descending score,
    ties broken by ascending token-id sequence, and the best ``beam_size``
    are kept.
    """
    if not beam.hypotheses:
        raise ValueError("cannot extend an empty beam")
    if len(step_scores) != len(beam.hypotheses):
        raise ValueError("need one step score per hypothesis")
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")

    parents, tokens, totals, ranks = [], [], [], []
    for i, (h, s) in enumerate(zip(beam.hypotheses, step_scores)):
        if h.finished:
            parents.append(np.array([i]))
            tokens.append(np.array([-1]))
            totals.append(np.array([h.log_score]))
            ranks.append(np.array([h.log_score / max(len(h.tokens), 1) if length_normalize else h.log_score]))
            continue
        v = len(s.log_probs)
        total = h.log_score + s.log_probs
        parents.append(np.full(v, i))
        tokens.append(np.arange(v))
        totals.append(total)
        ranks.append(total / (len(h.tokens) + 1) if length_normalize else total)
    parents = np.concatenate(parents)
    tokens = np.concatenate(tokens)
    totals = np.concatenate(totals)
    ranks = np.concatenate(ranks)

    idx = np.arange(len(ranks))
    if len(ranks) > beam_size:
        # prune on score first; ties at the cut survive for the tie-break
        cut = np.partition(ranks, len(ranks) - beam_size)[len(ranks) - beam_size]
        idx = idx[ranks >= cut]

    def seq(j):
        h = beam.hypotheses[parents[j]]
        return h.tokens if tokens[j] < 0 else h.tokens + (int(tokens[j]),)

    chosen = heapq.nsmallest(beam_size, idx.tolist(), key=lambda j: (-ranks[j], seq(j)))
    out = []
    for j in chosen:
        h = beam.hypotheses[parents[j]]
        v = int(tokens[j])
        if v < 0:
            out.append(h)
            continue
        s = step_scores[parents[j]]
        out.append(
            Hypothesis(
                h.tokens + (v,),
                float(totals[j]),
                h.attention + (s.attention,),
                h.token_log_probs + (float(s.log_probs[v]),),
                v == eos_id,
            )
        )
    return Beam(tuple(out), beam.committed_prefix)


def root_beam(committed: Hypothesis | None = None) -> Beam:
    root = committed if committed is not None else Hypothesis()
    return Beam((root,), root.tokens)


def search_done(beam: Beam, max_output_tokens: int, length_normalize: bool = False) -> bool:
    """Offline stopping rule: every hypothesis finished or at the length limit.

    Without length normalization the search also stops as soon as the
    leader is finished: scores only decrease on extension, so a finished
    leader can never be overtaken.
    """
    if all(h.finished or len(h.tokens) >= max_output_tokens for h in beam.hypotheses):
        return True
    return not length_normalize and beam.best.finished


def run_beam(
    scorer: Scorer,
    features: np.ndarray,
    beam: Beam,
    beam_size: int,
    max_output_tokens: int,
    *,
    length_normalize: bool = False,
    stop: Callable[[Beam], bool] | None = None,
    first_token_mask: np.ndarray | None = None,
) -> tuple[Beam, int]:
    """Extend ``beam`` until the offline rule or ``stop`` says so.

    Returns the final beam and the number of scorer calls made.
    ``first_token_mask`` restricts the token allowed right after the
    committed prefix.
    """
    calls = 0
    eos = scorer.vocab.eos_id
    n_committed = len(beam.committed_prefix)
    while not search_done(beam, max_output_tokens, length_normalize):
        scores: list[StepScore | None] = []
        for h in beam.hypotheses:
            if h.finished:
                scores.append(None)
                continue
            s = scorer.score_step(features, h.tokens)
            calls += 1
            if first_token_mask is not None and len(h.tokens) == n_committed:
                s = StepScore(np.where(first_token_mask, s.log_probs, -np.inf), s.attention)
            scores.append(s)
        beam = beam_extend(beam, scores, beam_size, eos, length_normalize=length_normalize)
        if stop is not None and stop(beam):
            break
    return beam, calls


def best_result(beam: Beam) -> Hypothesis:
    """Best finished hypothesis, or the best overall if none finished."""
    for h in beam.hypotheses:
        if h.finished:
            return h
    return beam.best


def beam_search_offline(
    stream: FeatureStream | np.ndarray,
    scorer: Scorer,
    beam_size: int,
    max_output_tokens: int,
    *,
    length_normalize: bool = False,
) -> Hypothesis:
    features = stream.values if isinstance(stream, FeatureStream) else np.asarray(stream)
    if max_output_tokens < 1:
        raise ValueError("max_output_tokens must be >= 1")
    if features.shape[0] == 0:
        raise ValueError("cannot decode an empty stream")
    beam, _ = run_beam(scorer, features, root_beam(), beam_size, max_output_tokens, length_normalize=length_normalize)
    return best_result(beam)


class IncrementalDecoder:
    """Per-session search state: accumulated frames plus the committed prefix.

    ``step`` consumes one chunk and returns the unstable beam. Mid-stream,
    extension stops once the leading hypothesis is finished or its last
    token's endpoint reaches the last received frame; on the flush chunk
    the offline stopping rule applies.
    """

    def __init__(
        self,
        scorer: Scorer,
        beam_size: int = 8,
        max_output_tokens: int = 200,
        *,
        attention_mass_threshold: float = 0.95,
        length_normalize: bool = False,
        clock: Clock | None = None,
    ):
        self.scorer = scorer
        self.beam_size = beam_size
        self.max_output_tokens = max_output_tokens
        self.attention_mass_threshold = attention_mass_threshold
        self.length_normalize = length_normalize
        self.clock = clock if clock is not None else MonotonicClock()
        self._blocks: list[np.ndarray] = []
        self.n_frames = 0
        self.committed = Hypothesis()
        self.sealed = False
        self.finalized = False
        self.step_compute_ms: list[float] = []
        self.score_calls: list[int] = []

    @property
    def features(self) -> np.ndarray:
        if len(self._blocks) > 1:
            self._blocks = [np.concatenate(self._blocks)]
        return self._blocks[0] if self._blocks else np.zeros((0, self.scorer.dim))

    def commit(self, hyp: Hypothesis, n_tokens: int, seal_word: bool = False) -> tuple[int, ...]:
        """Make the first ``len(committed) + n_tokens`` tokens of ``hyp`` permanent.

        ``seal_word`` forbids a word continuation right after the new prefix.
        """
        end = len(self.committed.tokens) + n_tokens
        if hyp.tokens[: len(self.committed.tokens)] != self.committed.tokens:
            raise ValueError("hypothesis does not extend the committed prefix")
        new = hyp.tokens[len(self.committed.tokens) : end]
        if self.scorer.vocab.eos_id in new:
            raise ValueError("cannot commit eos")
        lps = hyp.token_log_probs[:end]
        self.committed = Hypothesis(hyp.tokens[:end], float(sum(lps)), hyp.attention[:end], lps, False)
        if n_tokens:
            self.sealed = seal_word
        return new

    def step(self, chunk: Chunk) -> Beam:
        if self.finalized:
            raise RuntimeError("session already flushed")
        if chunk.start_index != self.n_frames:
            raise ValueError(f"out-of-order chunk: expected frame {self.n_frames}, got {chunk.start_index}")
        if len(chunk):
            if chunk.frames.shape[1] != self.scorer.dim:
                raise ValueError("chunk feature dimension does not match the scorer")
            self._blocks.append(chunk.frames)
            self.n_frames += len(chunk)
        if chunk.flush:
            self.finalized = True

        start = self.clock.now_ms()
        beam = root_beam(self.committed)
        calls = 0
        if self.n_frames:
            mask = None
            if self.sealed:
                vocab = self.scorer.vocab
                mask = vocab.word_start_mask.copy()
                mask[vocab.eos_id] = True
            stop = None if chunk.flush else self._saturated
            beam, calls = run_beam(
                self.scorer,
                self.features,
                beam,
                self.beam_size,
                self.max_output_tokens,
                length_normalize=self.length_normalize,
                stop=stop,
                first_token_mask=mask,
            )
        self.score_calls.append(calls)
        self.step_compute_ms.append(self.clock.now_ms() - start)
        return beam

    def _saturated(self, beam: Beam) -> bool:
        best = beam.best
        if best.finished:
            return True
        t_c = estimate_endpoint(best.attention[-1], threshold=self.attention_mass_threshold)
        return t_c >= self.n_frames - 1


def incremental_step(state: IncrementalDecoder, chunk: Chunk) -> Beam:
    return state.step(chunk)
