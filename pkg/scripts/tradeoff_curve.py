"""Latency/accuracy trade-off averaged over several noisy synthetic corpora.

    python3 scripts/tradeoff_curve.py --corpora 5 --utts 20 --noise 1.0
"""

from __future__ import annotations

import argparse
import math
from dataclasses import dataclass, field

import numpy as np

from streamdecode.core import SessionConfig
from streamdecode.metrics import tradeoff_sweep
from streamdecode.synthesis import corrupt_scorer, generate_corpus, write_text_atomic


@dataclass
class CurveConfig:
    corpora: int = 5
    utts: int = 20
    noise: float = 1.0
    first_seed: int = 100
    thresholds: list[float] = field(default_factory=lambda: [0.0, 100.0, 200.0, 300.0, 500.0, 800.0, 1200.0, math.inf])
    chunk_ms: float = 300.0
    beam: int = 8
    # latency is averaged over matched words only
    max_unmatched: float = 1.0
    out: str | None = None


def run(cfg: CurveConfig) -> str:
    base = SessionConfig(chunk_ms=cfg.chunk_ms, beam_size=cfg.beam)
    latency = np.zeros((cfg.corpora, len(cfg.thresholds)))
    errors = np.zeros_like(latency)
    for k in range(cfg.corpora):
        seed = cfg.first_seed + k
        corpus = generate_corpus(seed, cfg.utts)
        corpus = corpus.with_scorer(corrupt_scorer(corpus.scorer_spec, cfg.noise, seed))
        points = tradeoff_sweep(corpus, base, cfg.thresholds, max_unmatched=cfg.max_unmatched)
        latency[k] = [p.confidence_latency_s for p in points]
        errors[k] = [p.wer for p in points]
        print(f"corpus {seed}: " + " ".join(f"{x:.3f}" for x in latency[k]), flush=True)

    rows = ["delta_threshold_ms\tconfidence_latency_s\tlatency_sd\twer"]
    for j, thr in enumerate(cfg.thresholds):
        rows.append(f"{thr:g}\t{latency[:, j].mean():.4f}\t{latency[:, j].std():.4f}\t{errors[:, j].mean():.4f}")
    return "\n".join(rows) + "\n"


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    defaults = CurveConfig()
    p.add_argument("--corpora", type=int, default=defaults.corpora)
    p.add_argument("--utts", type=int, default=defaults.utts)
    p.add_argument("--noise", type=float, default=defaults.noise)
    p.add_argument("--first-seed", type=int, default=defaults.first_seed)
    p.add_argument("--thresholds", default=",".join(f"{t:g}" for t in defaults.thresholds))
    p.add_argument("--chunk-ms", type=float, default=defaults.chunk_ms)
    p.add_argument("--beam", type=int, default=defaults.beam)
    p.add_argument("--out")
    args = p.parse_args()
    cfg = CurveConfig(
        corpora=args.corpora,
        utts=args.utts,
        noise=args.noise,
        first_seed=args.first_seed,
        thresholds=[float(t) for t in args.thresholds.split(",")],
        chunk_ms=args.chunk_ms,
        beam=args.beam,
        out=args.out,
    )
    table = run(cfg)
    print(table, end="")
    if cfg.out:
        write_text_atomic(cfg.out, table)


if __name__ == "__main__":
    main()
