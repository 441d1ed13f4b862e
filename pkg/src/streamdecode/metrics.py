"""Latency and accuracy measurement.

Per-word user-perceived latency is ``C + D + T - U``: ``C`` the audio
position at which the word was committed, ``D`` the processing delay
between that audio being available and the commit, ``T`` transmission
time (taken as zero) and ``U`` the time the word was fully uttered.
Confidence latency is read off a conversion chart built from forced
alignments shifted by a fixed delay.
"""

from __future__ import annotations

import difflib
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import CommitRecord, DetectorMode, SessionConfig
from .pipeline import SessionResult, run_sessions
from .scoring import build_scorer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WordAlignment:
    utt: str
    word: str
    start_s: float
    end_s: float

    def __post_init__(self):
        if not 0 <= self.start_s <= self.end_s:
            raise ValueError(f"bad alignment times for {self.word!r}: {self.start_s}..{self.end_s}")


def word_latency(u_w: float, c_w: float, d_w: float, t_w: float = 0.0) -> float:
    return c_w + d_w + t_w - u_w


def rtf(total_compute_ms: float, audio_duration_ms: float) -> float:
    if audio_duration_ms <= 0:
        raise ValueError("audio duration must be positive")
    return total_compute_ms / audio_duration_ms


def edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(reference: Sequence[str], hypothesis: Sequence[str], normalize_case: bool = False) -> float:
    if not reference:
        raise ValueError("reference must not be empty")
    if normalize_case:
        reference = [w.lower() for w in reference]
        hypothesis = [w.lower() for w in hypothesis]
    return edit_distance(reference, hypothesis) / len(reference)


def corpus_wer(pairs: Iterable[tuple[Sequence[str], Sequence[str]]]) -> float:
    errors = words = 0
    for ref, hyp in pairs:
        errors += edit_distance(ref, hyp)
        words += len(ref)
    if words == 0:
        raise ValueError("references are empty")
    return errors / words


# -- latency decomposition ------------------------------------------------------


@dataclass(frozen=True)
class LatencyDecomposition:
    """Per matched word: commit position ``c_s``, processing delay ``d_s``,
    alignment end ``u_s`` and utterance duration ``duration_s`` (seconds)."""

    c_s: np.ndarray
    d_s: np.ndarray
    u_s: np.ndarray
    duration_s: np.ndarray
    n_reference: int
    n_unmatched: int

    @property
    def n_words(self) -> int:
        return len(self.c_s)

    @property
    def d_avg_s(self) -> float:
        return float(np.mean(self.d_s))

    @property
    def c_avg_s(self) -> float:
        return float(np.mean(self.c_s))

    @property
    def u_avg_s(self) -> float:
        return float(np.mean(self.u_s))

    @property
    def c_avg_norm(self) -> float:
        return float(np.mean(self.c_s / self.duration_s))

    @property
    def u_avg_norm(self) -> float:
        return float(np.mean(self.u_s / self.duration_s))

    @property
    def latencies_s(self) -> np.ndarray:
        return self.c_s + self.d_s - self.u_s

    @property
    def mean_latency_s(self) -> float:
        return float(np.mean(self.latencies_s))


def committed_words(commits: Sequence[CommitRecord]) -> list[tuple[str, float, float]]:
    """``(word, C seconds, D seconds)`` for every word, in transcript order."""
    out = []
    for c in commits:
        d = (c.commit_wall_ms - c.audio_consumed_ms) / 1000.0
        for w in c.words:
            out.append((w, c.audio_consumed_ms / 1000.0, d))
    return out


def _match(hyp: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    matcher = difflib.SequenceMatcher(None, [w.lower() for w in hyp], [w.lower() for w in ref], autojunk=False)
    pairs = []
    for block in matcher.get_matching_blocks():
        pairs.extend((block.a + k, block.b + k) for k in range(block.size))
    return pairs


def latency_decomposition(
    sessions: Sequence[SessionResult],
    alignments: Sequence[WordAlignment],
    *,
    max_unmatched: float = 0.05,
) -> LatencyDecomposition:
    """Pool per-word latency terms over sessions.

    Committed words are matched to aligned reference words in order,
    case-insensitively. Reference words without a match are skipped as
    long as they make up at most ``max_unmatched`` of all reference words.
    """
    if not sessions or not any(s.commits for s in sessions):
        raise ValueError("no commits to evaluate")
    by_utt: dict[str, list[WordAlignment]] = {}
    for a in alignments:
        by_utt.setdefault(a.utt, []).append(a)
    c, d, u, dur = [], [], [], []
    n_ref = n_unmatched = 0
    unmatched_words: list[str] = []
    for s in sessions:
        ref = by_utt.get(s.utt, [])
        if s.audio_duration_ms <= 0:
            if ref:
                raise ValueError(f"{s.utt}: zero-duration utterance has aligned words")
            continue
        hyp = committed_words(s.commits)
        pairs = _match([w for w, _, _ in hyp], [a.word for a in ref])
        matched_refs = {j for _, j in pairs}
        n_ref += len(ref)
        n_unmatched += len(ref) - len(matched_refs)
        unmatched_words.extend(f"{s.utt}:{a.word}" for j, a in enumerate(ref) if j not in matched_refs)
        for i, j in pairs:
            _, ci, di = hyp[i]
            c.append(ci)
            d.append(di)
            u.append(ref[j].end_s)
            dur.append(s.audio_duration_ms / 1000.0)
    if n_ref and n_unmatched / n_ref > max_unmatched:
        raise ValueError(
            f"{n_unmatched}/{n_ref} reference words unmatched (limit {max_unmatched:.0%}): "
            + " ".join(unmatched_words[:20])
        )
    if n_unmatched:
        logger.warning("skipping %d/%d unmatched reference words", n_unmatched, n_ref)
    if not c:
        raise ValueError("no committed word matches the alignments")
    return LatencyDecomposition(np.array(c), np.array(d), np.array(u), np.array(dur), n_ref, n_unmatched)


def session_latency_decomposition(
    result: SessionResult, alignments: Sequence[WordAlignment], *, max_unmatched: float = 0.05
) -> tuple[float, float, float]:
    """``(d_avg, c_avg, u_avg)`` in seconds for one session."""
    if not result.commits:
        raise ValueError("empty commit list")
    dec = latency_decomposition([result], alignments, max_unmatched=max_unmatched)
    return dec.d_avg_s, dec.c_avg_s, dec.u_avg_s


# -- conversion chart ---------------------------------------------------------


@dataclass(frozen=True)
class ConversionChart:
    """Average normalized word end time after shifting every word by δ.

    δ is in normalized units (fractions of an utterance); multiply by
    ``mean_duration_s`` for seconds.
    """

    delta_grid: np.ndarray
    u_avg_shifted: np.ndarray
    mean_duration_s: float

    @property
    def u_avg(self) -> float:
        return float(self.u_avg_shifted[0]) if self.delta_grid[0] == 0 else float(
            np.interp(0.0, self.delta_grid, self.u_avg_shifted)
        )

    def to_text(self) -> str:
        lines = [f"# mean_duration_s={float(self.mean_duration_s)!r}"]
        lines.extend(f"{d!r} {u!r}" for d, u in zip(self.delta_grid.tolist(), self.u_avg_shifted.tolist()))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ConversionChart":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# mean_duration_s="):
            raise ValueError("missing chart header")
        mean = float(lines[0].split("=", 1)[1])
        rows = np.array([[float(x) for x in ln.split()] for ln in lines[1:] if ln.strip()])
        return cls(rows[:, 0], rows[:, 1], mean)


def default_delta_grid(mean_duration_s: float, max_s: float = 5.0, step_s: float = 0.05) -> np.ndarray:
    n = int(round(max_s / step_s))
    return np.arange(n + 1) * step_s / mean_duration_s


def build_conversion_chart(
    alignments: Sequence[WordAlignment],
    durations_s: Mapping[str, float],
    delta_grid: Sequence[float] | None = None,
    *,
    clamp: bool = False,
) -> ConversionChart:
    """Chart of ``mean(U_w / duration + δ)`` over the grid.

    With ``clamp`` every shifted position is capped at 1 (a word cannot be
    output later than its utterance ends under offline decoding).
    """
    if not alignments:
        raise ValueError("no alignments")
    for utt, dur in durations_s.items():
        if dur <= 0:
            raise ValueError(f"{utt}: zero-duration utterance")
    try:
        u_norm = np.array([a.end_s / durations_s[a.utt] for a in alignments])
    except KeyError as exc:
        raise ValueError(f"no duration for utterance {exc.args[0]!r}") from None
    utts = sorted({a.utt for a in alignments})
    mean_duration = float(np.mean([durations_s[u] for u in utts]))
    grid = default_delta_grid(mean_duration) if delta_grid is None else np.asarray(delta_grid, dtype=np.float64)
    if grid.size == 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("delta grid must be non-empty and strictly ascending")
    shifted = u_norm[None, :] + grid[:, None]
    if clamp:
        shifted = np.minimum(shifted, 1.0)
    return ConversionChart(grid, shifted.mean(axis=1), mean_duration)


@dataclass(frozen=True)
class ConfidenceLatency:
    delta_norm: float
    delta_s: float
    clamped: bool


def confidence_latency(c_avg_norm: float, chart: ConversionChart) -> ConfidenceLatency:
    """Delay δ* whose chart value equals ``c_avg_norm`` (linear interpolation).

    Values outside the chart are clamped to the grid ends and flagged.
    """
    values, grid = chart.u_avg_shifted, chart.delta_grid
    clamped = bool(c_avg_norm < values[0] or c_avg_norm > values[-1])
    if clamped:
        logger.warning("C_avg=%.4f outside conversion chart [%.4f, %.4f]; clamping", c_avg_norm, values[0], values[-1])
    delta = float(np.interp(c_avg_norm, values, grid))
    return ConfidenceLatency(delta, delta * chart.mean_duration_s, clamped)


# -- session metrics ------------------------------------------------------------


@dataclass(frozen=True)
class SessionMetrics:
    d_avg_ms: float
    c_avg_norm: float
    confidence_latency_s: float
    rtf: float
    wer: float
    u_avg_norm: float = math.nan
    mean_latency_s: float = math.nan
    clamped: bool = False

    REPORT_KEYS = ("d_avg_ms", "rtf", "c_avg_norm", "confidence_latency_s", "wer")

    def to_text(self) -> str:
        keys = self.REPORT_KEYS + ("u_avg_norm", "mean_latency_s", "clamped")
        return "".join(f"{k}={_fmt(getattr(self, k))}\n" for k in keys)


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    return f"{x:.6f}"


def evaluate(
    sessions: Sequence[SessionResult],
    alignments: Sequence[WordAlignment],
    references: Mapping[str, Sequence[str]] | None = None,
    chart: ConversionChart | None = None,
    *,
    max_unmatched: float = 0.05,
) -> SessionMetrics:
    """Corpus-level metrics for decoded sessions."""
    durations = {s.utt: s.audio_duration_ms / 1000.0 for s in sessions}
    if references is None:
        references = {}
        for a in alignments:
            references.setdefault(a.utt, []).append(a.word)
    if chart is None:
        chart = build_conversion_chart([a for a in alignments if a.utt in durations], durations)
    dec = latency_decomposition(sessions, alignments, max_unmatched=max_unmatched)
    conf = confidence_latency(dec.c_avg_norm, chart)
    total_audio = sum(s.audio_duration_ms for s in sessions)
    total_compute = sum(s.total_compute_ms for s in sessions)
    missing = [s.utt for s in sessions if s.utt not in references]
    if missing:
        raise ValueError(f"no reference for {missing[:5]}")
    return SessionMetrics(
        d_avg_ms=dec.d_avg_s * 1000.0,
        c_avg_norm=dec.c_avg_norm,
        confidence_latency_s=conf.delta_s,
        rtf=rtf(total_compute, total_audio),
        wer=corpus_wer((references[s.utt], s.final_words) for s in sessions),
        u_avg_norm=dec.u_avg_norm,
        mean_latency_s=dec.mean_latency_s,
        clamped=conf.clamped,
    )


# -- trade-off sweep ------------------------------------------------------------


@dataclass(frozen=True)
class SweepPoint:
    delta_threshold_ms: float
    confidence_latency_s: float
    wer: float
    c_avg_norm: float
    d_avg_ms: float


def tradeoff_sweep(
    corpus,
    base: SessionConfig,
    delta_thresholds: Sequence[float],
    *,
    jobs: int = 1,
    max_unmatched: float = 0.05,
) -> list[SweepPoint]:
    """Decode ``corpus`` in combined mode once per Δ threshold.

    An infinite threshold never fires the endpoint condition, which makes
    that point equal to a shared-prefix-only run.
    """
    if not delta_thresholds:
        raise ValueError("need at least one delta threshold")
    scorer = build_scorer(corpus.scorer_spec, corpus.vocab)
    streams = [(u.utt, u.stream) for u in corpus.utterances]
    alignments = corpus.alignments
    references = {u.utt: u.words for u in corpus.utterances}
    durations = {u.utt: u.stream.duration_ms / 1000.0 for u in corpus.utterances}
    chart = build_conversion_chart(alignments, durations)
    points = []
    for thr in delta_thresholds:
        config = replace(base, detector_mode=DetectorMode.COMBINED, delta_threshold_ms=float(thr))
        results = run_sessions(streams, config, scorer, jobs=jobs)
        m = evaluate(results, alignments, references, chart, max_unmatched=max_unmatched)
        points.append(SweepPoint(float(thr), m.confidence_latency_s, m.wer, m.c_avg_norm, m.d_avg_ms))
    return points


# -- file formats ---------------------------------------------------------------


def format_alignments(alignments: Iterable[WordAlignment]) -> str:
    return "".join(f"{a.utt} {a.word} {float(a.start_s)!r} {float(a.end_s)!r}\n" for a in alignments)


def parse_alignments(text: str, source: str = "<alignments>") -> list[WordAlignment]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{source}:{lineno}: expected 'utt word start_s end_s'")
        try:
            out.append(WordAlignment(parts[0], parts[1], float(parts[2]), float(parts[3])))
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from exc
    return out


def format_references(references: Mapping[str, Sequence[str]]) -> str:
    return "".join(f"{utt} {' '.join(words)}\n".replace(" \n", "\n") for utt, words in references.items())


def parse_references(text: str) -> dict[str, list[str]]:
    refs = {}
    for line in text.splitlines():
        if line.strip():
            utt, *words = line.split()
            refs[utt] = words
    return refs
