"""Incremental sequence-to-sequence decoding with stable-prefix commits and
latency measurement."""

from .core import (
    Beam,
    Chunk,
    CommitRecord,
    Detector,
    DetectorMode,
    FeatureStream,
    Hypothesis,
    SessionConfig,
    Vocabulary,
    chunk_stream,
    make_vocabulary,
    tokens_to_words,
)
from .pipeline import SessionResult, replay_log, run_session
from .scoring import EnsembleScorer, ScorerSpec, StepScore, SyntheticScorer, build_scorer, ensemble_combine
from .search import IncrementalDecoder, beam_extend, beam_search_offline
from .stability import detect, estimate_endpoint, reliable_prefix, shared_prefix

__version__ = "0.1.0"
