"""Scorers: next-token distributions plus attention over feature frames.

A scorer maps ``(features so far, token prefix)`` to a :class:`StepScore`.
:class:`SyntheticScorer` stands in for a trained encoder-decoder model; it
is prefix-consistent, i.e. its output for a prefix depends only on the
frames up to that prefix's endpoint. :class:`EnsembleScorer` combines
several scorers in the log domain.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .core import Vocabulary

_TABLE_ROWS = 4096


@dataclass(frozen=True, eq=False)
class StepScore:
    log_probs: np.ndarray
    attention: np.ndarray

    def __post_init__(self):
        for name in ("log_probs", "attention"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __eq__(self, other):
        if not isinstance(other, StepScore):
            return NotImplemented
        return np.array_equal(self.log_probs, other.log_probs) and np.array_equal(
            self.attention, other.attention
        )

    def check(self, tol: float = 1e-6) -> None:
        lse = logsumexp(self.log_probs)
        if abs(lse) > tol:
            raise ValueError(f"log_probs not normalized (logsumexp={lse})")
        if np.any(self.attention < 0) or abs(self.attention.sum() - 1) > tol:
            raise ValueError("attention must be non-negative and sum to 1")


class Scorer(Protocol):
    vocab: Vocabulary
    dim: int
    max_output_tokens: int
    provides_attention: bool

    def score_step(self, features: np.ndarray, prefix: Sequence[int]) -> StepScore: ...


def _check_inputs(scorer, features: np.ndarray, prefix: Sequence[int]) -> None:
    if features.ndim != 2 or features.shape[1] != scorer.dim:
        raise ValueError(f"scorer expects {scorer.dim}-dim features, got shape {features.shape}")
    if features.shape[0] == 0:
        raise ValueError("no features to score")
    if len(prefix) >= scorer.max_output_tokens:
        raise ValueError(f"prefix length {len(prefix)} reaches max_output_tokens={scorer.max_output_tokens}")
    if scorer.vocab.eos_id in prefix:
        raise ValueError("prefix contains eos")


def _prefix_key(prefix: Sequence[int], salt: int) -> int:
    data = np.asarray(prefix, dtype="<i4").tobytes()
    return zlib.crc32(data, salt & 0xFFFFFFFF) % _TABLE_ROWS


def logsumexp(x: np.ndarray) -> float:
    m = np.max(x)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(x - m))))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    return logits - logsumexp(logits)


def codebook(codebook_seed: int, vocab_size: int, dim: int) -> np.ndarray:
    """Unit-norm token embeddings used both to render and to read features."""
    rng = np.random.default_rng([codebook_seed, vocab_size, dim])
    book = rng.standard_normal((vocab_size, dim))
    return book / np.linalg.norm(book, axis=1, keepdims=True)


class SyntheticScorer:
    """Deterministic stand-in for an attention-based S2S model.

    Token position ``k`` is read from the frame window
    ``[k * frames_per_token, (k + 1) * frames_per_token)``; the endpoint of
    prefix ``p`` is the last frame of window ``len(p)``. Logits are the
    similarity of the mean window frame to each token embedding, scaled by
    ``sharpness`` and by the fraction of the window already received, plus
    a prefix-keyed bias (the "model") and an optional prefix-keyed
    perturbation (``noise_level``, see :func:`corrupt_scorer`).
    """

    provides_attention = True

    def __init__(
        self,
        vocab: Vocabulary,
        dim: int,
        seed: int = 0,
        *,
        codebook_seed: int = 0,
        frames_per_token: int = 8,
        sharpness: float = 20.0,
        bias_scale: float = 1.0,
        noise_level: float = 0.0,
        noise_seed: int = 0,
        noise_scale: float = 3.0,
        attention: bool = True,
        max_output_tokens: int = 512,
    ):
        if dim <= 0:
            raise ValueError("dim must be positive")
        if vocab.size < 2:
            raise ValueError("vocabulary must hold at least two tokens")
        if frames_per_token < 1:
            raise ValueError("frames_per_token must be >= 1")
        if not 0 <= noise_level <= 1:
            raise ValueError("noise_level must lie in [0, 1]")
        self.vocab = vocab
        self.dim = dim
        self.seed = seed
        self.frames_per_token = frames_per_token
        self.sharpness = sharpness
        self.bias_scale = bias_scale
        self.noise_level = noise_level
        self.noise_seed = noise_seed
        self.noise_scale = noise_scale
        self.provides_attention = attention
        self.max_output_tokens = max_output_tokens
        self.codebook = codebook(codebook_seed, vocab.size, dim)
        self._bias = np.random.default_rng([seed, 1]).standard_normal((_TABLE_ROWS, vocab.size))
        self._noise = np.random.default_rng([noise_seed, 2]).standard_normal((_TABLE_ROWS, vocab.size))

    def endpoint(self, prefix_len: int) -> int:
        """Frame index where the token following a prefix of this length ends."""
        return (prefix_len + 1) * self.frames_per_token - 1

    def render(self, tokens: Sequence[int], tail_frames: int = 0, jitter: float = 0.0, rng=None) -> np.ndarray:
        """Feature frames from which this scorer reads ``tokens``.

        ``tokens`` should end with eos; ``tail_frames`` extra frames of
        the eos embedding follow.
        """
        rows = np.repeat(self.codebook[list(tokens)], self.frames_per_token, axis=0)
        if tail_frames:
            rows = np.vstack([rows, np.repeat(self.codebook[[self.vocab.eos_id]], tail_frames, axis=0)])
        if jitter:
            rows = rows + jitter * rng.standard_normal(rows.shape)
        return rows

    def score_step(self, features: np.ndarray, prefix: Sequence[int]) -> StepScore:
        features = np.asarray(features)
        _check_inputs(self, features, prefix)
        k = len(prefix)
        fpt = self.frames_per_token
        end = self.endpoint(k)
        start = k * fpt
        avail = min(features.shape[0], end + 1)
        if start < avail:
            evidence = (avail - start) / fpt
            logits = (self.sharpness * evidence) * (self.codebook @ features[start:avail].mean(axis=0))
        else:
            logits = np.zeros(self.vocab.size)
        logits = logits + self.bias_scale * self._bias[_prefix_key(prefix, self.seed)]
        if self.noise_level:
            key = _prefix_key(prefix, self.noise_seed ^ 0x5BD1E995)
            logits = logits + (self.noise_level * self.noise_scale) * self._noise[key]
        return StepScore(_log_softmax(logits), self._attention(avail, end))

    def _attention(self, avail: int, end: int) -> np.ndarray:
        if not self.provides_attention:
            return np.full(avail, 1.0 / avail)
        t_end = min(end, avail - 1)
        weights = np.zeros(t_end + 1)
        lo = max(0, t_end - self.frames_per_token + 1)
        if lo == t_end:
            weights[t_end] = 1.0
        else:
            # the last frame carries enough mass to be the 0.95 endpoint
            weights[lo:t_end] = 0.04 / (t_end - lo)
            weights[t_end] = 0.96
        return weights


def ensemble_combine(scores: Sequence[StepScore], weights: Sequence[float]) -> StepScore:
    """Weighted log-linear interpolation of member distributions, renormalized.

    Attention is the weighted mean of member attentions (shorter vectors
    are zero-padded), renormalized to unit mass.
    """
    if not scores:
        raise ValueError("ensemble needs at least one member")
    if len(weights) != len(scores):
        raise ValueError("one weight per member required")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("ensemble weights must be non-negative")
    if abs(w.sum() - 1) > 1e-9:
        raise ValueError("ensemble weights must sum to 1")
    sizes = {s.log_probs.shape for s in scores}
    if len(sizes) != 1:
        raise ValueError(f"log_prob vectors differ in length: {sorted(sizes)}")
    if len(scores) == 1:
        return scores[0]
    log_probs = _log_softmax(np.einsum("m,mv->v", w, np.stack([s.log_probs for s in scores])))
    width = max(len(s.attention) for s in scores)
    att = np.zeros(width)
    for wi, s in zip(w, scores):
        att[: len(s.attention)] += wi * s.attention
    return StepScore(log_probs, att / att.sum())


class EnsembleScorer:
    """Combines member scorers; attention can come from one designated member.

    With ``attention_member=None`` the weighted mean attention is used.
    """

    def __init__(self, members: Sequence[Scorer], weights: Sequence[float] | None = None, attention_member: int | None = 0):
        if not members:
            raise ValueError("ensemble needs at least one member")
        if weights is None:
            weights = [1.0 / len(members)] * len(members)
        if len(weights) != len(members):
            raise ValueError("one weight per member required")
        if any(m.vocab != members[0].vocab or m.dim != members[0].dim for m in members):
            raise ValueError("ensemble members must share vocabulary and feature dimension")
        if attention_member is not None and not 0 <= attention_member < len(members):
            raise ValueError("attention_member out of range")
        self.members = list(members)
        self.weights = [float(x) for x in weights]
        self.attention_member = attention_member
        self.vocab = members[0].vocab
        self.dim = members[0].dim
        self.max_output_tokens = min(m.max_output_tokens for m in members)
        if attention_member is None:
            self.provides_attention = any(m.provides_attention for m in members)
        else:
            self.provides_attention = members[attention_member].provides_attention

    def score_step(self, features: np.ndarray, prefix: Sequence[int]) -> StepScore:
        features = np.asarray(features)
        _check_inputs(self, features, prefix)
        scores = [m.score_step(features, prefix) for m in self.members]
        combined = ensemble_combine(scores, self.weights)
        if self.attention_member is None:
            return combined
        return StepScore(combined.log_probs, scores[self.attention_member].attention)


def build_synthetic_scorer(seed: int, vocab: Vocabulary, dim: int, **kwargs) -> SyntheticScorer:
    return SyntheticScorer(vocab, dim, seed, **kwargs)


# -- scorer specifications ---------------------------------------------------

_SYNTH_KEYS = {
    "seed": int,
    "dim": int,
    "codebook_seed": int,
    "frames_per_token": int,
    "sharpness": float,
    "bias_scale": float,
    "noise_level": float,
    "noise_seed": int,
    "attention": lambda s: s.lower() in ("1", "true", "yes"),
}


@dataclass(frozen=True)
class ScorerSpec:
    """Serializable description of a scorer (synthetic or ensemble)."""

    kind: str = "synthetic"
    seed: int = 0
    dim: int = 16
    codebook_seed: int = 0
    frames_per_token: int = 8
    sharpness: float = 20.0
    bias_scale: float = 1.0
    noise_level: float = 0.0
    noise_seed: int = 0
    attention: bool = True
    members: tuple["ScorerSpec", ...] = ()
    weights: tuple[float, ...] = ()
    attention_member: int | None = 0

    def __post_init__(self):
        if self.kind not in ("synthetic", "ensemble"):
            raise ValueError(f"unknown scorer kind {self.kind!r}")
        object.__setattr__(self, "members", tuple(self.members))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if self.kind == "ensemble":
            if not self.members:
                raise ValueError("ensemble spec needs at least one member")
            if len(self.weights) != len(self.members):
                raise ValueError("ensemble spec needs one weight per member")

    @property
    def feature_dim(self) -> int:
        return self.members[0].feature_dim if self.kind == "ensemble" else self.dim


def build_scorer(spec: ScorerSpec, vocab: Vocabulary) -> Scorer:
    if spec.kind == "ensemble":
        members = [build_scorer(m, vocab) for m in spec.members]
        return EnsembleScorer(members, spec.weights, spec.attention_member)
    return SyntheticScorer(
        vocab,
        spec.dim,
        spec.seed,
        codebook_seed=spec.codebook_seed,
        frames_per_token=spec.frames_per_token,
        sharpness=spec.sharpness,
        bias_scale=spec.bias_scale,
        noise_level=spec.noise_level,
        noise_seed=spec.noise_seed,
        attention=spec.attention,
    )


def corrupt_scorer(spec: ScorerSpec, noise_level: float, seed: int) -> ScorerSpec:
    """Return ``spec`` with a deterministic prefix-keyed log-prob perturbation.

    Ensemble members are perturbed independently (member ``i`` uses seed
    ``seed + i``).
    """
    if not 0 <= noise_level <= 1:
        raise ValueError("noise_level must lie in [0, 1]")
    if spec.kind == "ensemble":
        members = tuple(corrupt_scorer(m, noise_level, seed + i) for i, m in enumerate(spec.members))
        return replace(spec, members=members)
    return replace(spec, noise_level=float(noise_level), noise_seed=int(seed))


def _spec_lines(spec: ScorerSpec, prefix: str) -> list[str]:
    lines = [f"{prefix}kind={spec.kind}"]
    if spec.kind == "ensemble":
        member = "none" if spec.attention_member is None else str(spec.attention_member)
        lines.append(f"{prefix}attention_member={member}")
        for i, (m, w) in enumerate(zip(spec.members, spec.weights)):
            lines.append(f"{prefix}member.{i}.weight={w!r}")
            lines.extend(_spec_lines(m, f"{prefix}member.{i}."))
        return lines
    for key in _SYNTH_KEYS:
        value = getattr(spec, key)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{prefix}{key}={value!r}" if isinstance(value, float) else f"{prefix}{key}={value}")
    return lines


def dump_scorer_spec(spec: ScorerSpec, vocab_file: str | None = None) -> str:
    lines = [f"vocab_file={vocab_file}"] if vocab_file else []
    lines.extend(_spec_lines(spec, ""))
    return "\n".join(lines) + "\n"


def _spec_from_items(items: dict[str, str], where: str) -> ScorerSpec:
    kind = items.get("kind", "synthetic")
    if kind == "ensemble":
        groups: dict[int, dict[str, str]] = {}
        for key, value in items.items():
            if key.startswith("member."):
                idx, _, rest = key[len("member."):].partition(".")
                if not idx.isdigit() or not rest:
                    raise ValueError(f"{where}: bad key {key!r}")
                groups.setdefault(int(idx), {})[rest] = value
        if sorted(groups) != list(range(len(groups))):
            raise ValueError(f"{where}: member indices must be contiguous from 0")
        members, weights = [], []
        for i in range(len(groups)):
            sub = dict(groups[i])
            weights.append(float(sub.pop("weight", 1.0 / len(groups))))
            members.append(_spec_from_items(sub, f"{where} member.{i}"))
        am = items.get("attention_member", "0")
        return ScorerSpec(
            kind="ensemble",
            members=tuple(members),
            weights=tuple(weights),
            attention_member=None if am.lower() == "none" else int(am),
        )
    if kind != "synthetic":
        raise ValueError(f"{where}: unknown scorer kind {kind!r}")
    kwargs = {}
    for key, value in items.items():
        if key == "kind":
            continue
        if key not in _SYNTH_KEYS:
            raise ValueError(f"{where}: unknown key {key!r}")
        kwargs[key] = _SYNTH_KEYS[key](value)
    return ScorerSpec(**kwargs)


def parse_scorer_spec(text: str, source: str = "<spec>") -> tuple[ScorerSpec, str | None]:
    """Parse ``key=value`` lines; returns the spec and the ``vocab_file`` entry."""
    items: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{source}:{lineno}: expected key=value")
        items[key.strip()] = value.strip()
    vocab_file = items.pop("vocab_file", None)
    return _spec_from_items(items, source), vocab_file


def load_scorer_spec(path: str | Path) -> tuple[ScorerSpec, Vocabulary]:
    path = Path(path)
    spec, vocab_file = parse_scorer_spec(path.read_text(encoding="utf-8"), str(path))
    if vocab_file is None:
        raise ValueError(f"{path}: missing vocab_file")
    return spec, Vocabulary.load(path.parent / vocab_file)
