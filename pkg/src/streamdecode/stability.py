"""Stability detection: which part of the current beam may be committed.

Two conditions are implemented. The shared-prefix condition commits the
longest prefix common to every active hypothesis. The reliable-endpoint
condition commits the prefix of the best hypothesis whose attention-based
endpoint lies at least ``delta_threshold_ms`` before the end of the audio
received so far. ``detect`` combines them by logical OR.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Beam, Detector, DetectorMode, Hypothesis, Vocabulary


@dataclass(frozen=True)
class EndpointEstimate:
    prefix_len: int
    t_c: int
    delta_ms: float


@dataclass(frozen=True)
class DetectionContext:
    vocab: Vocabulary
    audio_end_ms: float
    frame_period_ms: float
    delta_threshold_ms: float = math.inf
    attention_mass_threshold: float = 0.95


def estimate_endpoint(attention: Sequence[np.ndarray] | np.ndarray, token_index: int | None = None, threshold: float = 0.95) -> int:
    """Smallest frame index at which cumulative attention reaches ``threshold``.

    Accepts either one attention vector or a per-token list plus
    ``token_index``.
    """
    weights = np.asarray(attention if token_index is None else attention[token_index], dtype=np.float64)
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    total = weights.sum()
    if weights.size == 0 or abs(total - 1) > 1e-3:
        raise ValueError(f"attention is not normalized (sum={total})")
    cum = np.cumsum(weights)
    # a fully normalized vector must reach threshold 1 despite rounding
    idx = int(np.searchsorted(cum, min(threshold, cum[-1]), side="left"))
    return min(idx, weights.size - 1)


def endpoint_estimate(hyp: Hypothesis, prefix_len: int, ctx: DetectionContext) -> EndpointEstimate:
    t_c = estimate_endpoint(hyp.attention, prefix_len - 1, ctx.attention_mass_threshold)
    return EndpointEstimate(prefix_len, t_c, ctx.audio_end_ms - (t_c + 1) * ctx.frame_period_ms)


def shared_prefix(beam: Beam) -> tuple[int, ...]:
    """Longest prefix common to all hypotheses, minus the committed prefix.

    The eos token is never part of the result.
    """
    if not beam.hypotheses:
        return ()
    first = beam.hypotheses[0].tokens
    n = len(first)
    for h in beam.hypotheses[1:]:
        n = min(n, len(h.tokens))
        for i in range(len(beam.committed_prefix), n):
            if h.tokens[i] != first[i]:
                n = i
                break
    if beam.hypotheses[0].finished and n == len(first):
        n -= 1  # never commit eos
    return tuple(first[len(beam.committed_prefix) : n])


def reliable_prefix(best: Hypothesis, committed_len: int, ctx: DetectionContext) -> tuple[int, ...]:
    """Prefix of ``best`` beyond the committed part whose endpoint is reliable.

    The last qualifying token ``j`` is the one with the largest index such
    that ``audio_end - endpoint(j) >= delta_threshold``; the result is then
    cut back to the last word known to be complete, i.e. one followed in
    ``best`` by a word-initial token or eos.
    """
    vocab = ctx.vocab
    tokens = best.tokens
    last = None
    for j in range(len(tokens) - 1, committed_len - 1, -1):
        if tokens[j] == vocab.eos_id:
            continue
        est = endpoint_estimate(best, j + 1, ctx)
        if est.delta_ms >= ctx.delta_threshold_ms:
            last = j
            break
    if last is None:
        return ()
    for end in range(last + 1, committed_len, -1):
        if end < len(tokens) and (tokens[end] == vocab.eos_id or vocab.is_word_start(tokens[end])):
            return tuple(tokens[committed_len:end])
    return ()


def detect(beam: Beam, mode: DetectorMode, ctx: DetectionContext) -> tuple[tuple[int, ...], Detector | None]:
    """Stable extension of the committed prefix and the detector that found it.

    Returns ``((), None)`` when nothing is stable.
    """
    mode = DetectorMode(mode)
    shared: tuple[int, ...] = ()
    reliable: tuple[int, ...] = ()
    if mode is not DetectorMode.ENDPOINT_ONLY:
        shared = shared_prefix(beam)
    if mode is not DetectorMode.SHARED_ONLY:
        reliable = reliable_prefix(beam.best, len(beam.committed_prefix), ctx)
    if not shared and not reliable:
        return (), None
    if len(reliable) > len(shared):
        return reliable, Detector.RELIABLE_ENDPOINT
    return shared, Detector.SHARED_PREFIX
