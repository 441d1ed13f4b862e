"""Per-detector latency breakdown (D, C, confidence latency, RTF, WER) on one corpus.

    python3 scripts/latency_table.py --seed 3 --utts 40 --noise 0.5
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass

from streamdecode.core import DetectorMode, SessionConfig
from streamdecode.metrics import build_conversion_chart, evaluate
from streamdecode.pipeline import run_sessions
from streamdecode.scoring import build_scorer
from streamdecode.synthesis import corrupt_scorer, generate_corpus


@dataclass
class TableConfig:
    seed: int = 3
    utts: int = 40
    noise: float = 0.5
    chunk_ms: float = 300.0
    beam: int = 8
    delta_threshold_ms: float = 500.0
    score_cost_ms: float = 0.02


def run(cfg: TableConfig) -> str:
    corpus = generate_corpus(cfg.seed, cfg.utts)
    if cfg.noise:
        corpus = corpus.with_scorer(corrupt_scorer(corpus.scorer_spec, cfg.noise, cfg.seed))
    scorer = build_scorer(corpus.scorer_spec, corpus.vocab)
    streams = [(u.utt, u.stream) for u in corpus.utterances]
    durations = {u.utt: u.stream.duration_ms / 1000 for u in corpus.utterances}
    chart = build_conversion_chart(corpus.alignments, durations)

    rows = ["detector\td_avg_ms\tc_avg_norm\tconfidence_latency_s\trtf\twer"]
    for mode in DetectorMode:
        config = SessionConfig(
            chunk_ms=cfg.chunk_ms,
            beam_size=cfg.beam,
            detector_mode=mode,
            delta_threshold_ms=cfg.delta_threshold_ms,
            score_cost_ms=cfg.score_cost_ms,
        )
        m = evaluate(run_sessions(streams, config, scorer), corpus.alignments, corpus.references, chart, max_unmatched=1.0)
        rows.append(f"{mode.value}\t{m.d_avg_ms:.2f}\t{m.c_avg_norm:.4f}\t{m.confidence_latency_s:.4f}\t{m.rtf:.5f}\t{m.wer:.4f}")
    return "\n".join(rows) + "\n"


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    d = TableConfig()
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--utts", type=int, default=d.utts)
    p.add_argument("--noise", type=float, default=d.noise)
    p.add_argument("--chunk-ms", type=float, default=d.chunk_ms)
    p.add_argument("--beam", type=int, default=d.beam)
    p.add_argument("--delta-threshold-ms", type=float, default=d.delta_threshold_ms)
    p.add_argument("--score-cost-ms", type=float, default=d.score_cost_ms)
    args = p.parse_args()
    print(run(TableConfig(**vars(args))), end="")


if __name__ == "__main__":
    main()
