"""Command-line interface: ``decode``, ``metrics``, ``chart``, ``sweep``, ``gen``.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from .core import DetectorMode, SessionConfig, read_feature_file
from .metrics import (
    ConversionChart,
    build_conversion_chart,
    evaluate,
    parse_alignments,
    parse_references,
    rtf,
    tradeoff_sweep,
)
from .pipeline import check_compatible, format_commit_log, read_commit_log, run_sessions
from .scoring import build_scorer, load_scorer_spec
from .synthesis import corrupt_scorer, generate_corpus, load_corpus, write_corpus, write_text_atomic

logger = logging.getLogger("streamdecode")


def _session_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--beam", type=int, default=8, help="beam size (default 8)")
    p.add_argument("--chunk-ms", type=float, default=300.0, help="chunk length in ms (default 300)")
    p.add_argument("--attention-mass", type=float, default=0.95, help="attention mass defining an endpoint")
    p.add_argument("--max-output-tokens", type=int, default=200)
    p.add_argument("--score-cost-ms", type=float, default=0.02, help="simulated compute per scorer call")
    clock = p.add_mutually_exclusive_group()
    clock.add_argument("--simulated-time", dest="simulated", action="store_true", default=True)
    clock.add_argument("--wall-time", dest="simulated", action="store_false")
    p.add_argument("--jobs", type=int, default=1, help="parallel utterances")


def _config(args, detector: str, delta: float) -> SessionConfig:
    return SessionConfig(
        chunk_ms=args.chunk_ms,
        beam_size=args.beam,
        detector_mode=DetectorMode(detector),
        delta_threshold_ms=delta,
        attention_mass_threshold=args.attention_mass,
        max_output_tokens=args.max_output_tokens,
        simulated_time=args.simulated,
        score_cost_ms=args.score_cost_ms,
    )


def _float_or_inf(text: str) -> float:
    value = float(text)
    if math.isnan(value):
        raise argparse.ArgumentTypeError("threshold must be a number")
    return value


def _thresholds(text: str) -> list[float]:
    try:
        values = [_float_or_inf(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("threshold list is empty")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamdecode", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decode", help="decode feature files incrementally")
    p.add_argument("--features", nargs="+", required=True, type=Path)
    p.add_argument("--scorer-spec", required=True, type=Path)
    p.add_argument("--detector", choices=[m.value for m in DetectorMode], default="shared")
    p.add_argument("--delta-threshold-ms", type=_float_or_inf, default=1000.0)
    p.add_argument("--out-dir", type=Path, default=Path("decode_out"))
    _session_flags(p)

    p = sub.add_parser("metrics", help="latency/accuracy report for a commit log")
    p.add_argument("--log", required=True, type=Path)
    p.add_argument("--alignments", required=True, type=Path)
    p.add_argument("--references", type=Path, help="utt word ... per line (default: alignment words)")
    p.add_argument("--chart", type=Path, help="precomputed conversion chart (default: built from alignments)")
    p.add_argument("--max-unmatched", type=float, default=0.05)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("chart", help="build a conversion chart from alignments")
    p.add_argument("--alignments", required=True, type=Path)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--log", type=Path, help="take utterance durations from a commit log")
    src.add_argument("--features", nargs="+", type=Path, help="take utterance durations from feature files")
    p.add_argument("--max-delay-s", type=float, default=5.0)
    p.add_argument("--step-s", type=float, default=0.05)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("sweep", help="latency/accuracy trade-off over delta thresholds")
    p.add_argument("--thresholds", required=True, type=_thresholds, help="comma-separated ms values, 'inf' allowed")
    p.add_argument("--corpus", type=Path, help="corpus directory written by 'gen'")
    p.add_argument("--seed", type=int, default=0, help="generate a corpus in memory when --corpus is absent")
    p.add_argument("--utts", type=int, default=20)
    p.add_argument("--noise", type=float, default=0.0, help="corrupt the scorer with this noise level")
    p.add_argument("--max-unmatched", type=float, default=0.05)
    p.add_argument("--out", type=Path)
    _session_flags(p)

    p = sub.add_parser("gen", help="write a synthetic corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--utts", type=int, default=20)
    p.add_argument("--words-min", type=int, default=4)
    p.add_argument("--words-max", type=int, default=10)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--models", type=int, default=1, help="ensemble size of the matched scorer")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--out-dir", type=Path, default=Path("corpus"))
    return parser


def cmd_decode(args) -> int:
    spec, vocab = load_scorer_spec(args.scorer_spec)
    scorer = build_scorer(spec, vocab)
    config = _config(args, args.detector, args.delta_threshold_ms)
    streams = sorted(((path.stem, read_feature_file(path)) for path in args.features), key=lambda x: x[0])
    for _, stream in streams:
        check_compatible(stream, config, scorer)
    results = run_sessions(streams, config, scorer, jobs=args.jobs)

    out = args.out_dir
    write_text_atomic(out / "commits.log", format_commit_log(results))
    write_text_atomic(out / "transcripts.txt", "".join(f"{r.utt} {' '.join(r.final_words)}\n" for r in results))
    audio = sum(r.audio_duration_ms for r in results)
    compute = sum(r.total_compute_ms for r in results)
    lines = [
        f"utterances={len(results)}",
        f"audio_ms={audio:.3f}",
        f"compute_ms={compute:.3f}",
        f"rtf={rtf(compute, audio) if audio else 0.0:.6f}",
    ]
    lines += [
        f"utt={r.utt} audio_ms={r.audio_duration_ms:.3f} compute_ms={r.total_compute_ms:.3f} "
        f"steps={len(r.step_compute_ms)} commits={len(r.commits)}"
        for r in results
    ]
    summary = "\n".join(lines) + "\n"
    write_text_atomic(out / "summary.txt", summary)
    print(summary, end="")
    return 0


def cmd_metrics(args) -> int:
    sessions = read_commit_log(args.log)
    alignments = parse_alignments(args.alignments.read_text(encoding="utf-8"), str(args.alignments))
    references = parse_references(args.references.read_text(encoding="utf-8")) if args.references else None
    chart = ConversionChart.from_text(args.chart.read_text(encoding="utf-8")) if args.chart else None
    m = evaluate(sessions, alignments, references, chart, max_unmatched=args.max_unmatched)
    report = m.to_text()
    if args.out:
        write_text_atomic(args.out, report)
    print(report, end="")
    return 0


def cmd_chart(args) -> int:
    alignments = parse_alignments(args.alignments.read_text(encoding="utf-8"), str(args.alignments))
    if args.log:
        durations = {s.utt: s.audio_duration_ms / 1000.0 for s in read_commit_log(args.log)}
    else:
        durations = {p.stem: read_feature_file(p).duration_ms / 1000.0 for p in args.features}
    wanted = [a for a in alignments if a.utt in durations]
    mean = sum(durations[u] for u in {a.utt for a in wanted}) / max(len({a.utt for a in wanted}), 1)
    n = int(round(args.max_delay_s / args.step_s))
    grid = [k * args.step_s / mean for k in range(n + 1)]
    chart = build_conversion_chart(wanted, durations, grid)
    write_text_atomic(args.out, chart.to_text())
    print(args.out)
    return 0


def cmd_sweep(args) -> int:
    if args.corpus:
        corpus = load_corpus(args.corpus)
    else:
        corpus = generate_corpus(args.seed, args.utts)
    if args.noise:
        corpus = corpus.with_scorer(corrupt_scorer(corpus.scorer_spec, args.noise, args.seed))
    base = _config(args, "combined", math.inf)
    points = tradeoff_sweep(corpus, base, args.thresholds, jobs=args.jobs, max_unmatched=args.max_unmatched)
    lines = ["delta_threshold_ms\tconfidence_latency_s\twer\tc_avg_norm\td_avg_ms"]
    lines += [
        f"{p.delta_threshold_ms:g}\t{p.confidence_latency_s:.6f}\t{p.wer:.6f}\t{p.c_avg_norm:.6f}\t{p.d_avg_ms:.6f}"
        for p in points
    ]
    table = "\n".join(lines) + "\n"
    if args.out:
        write_text_atomic(args.out, table)
    print(table, end="")
    return 0


def cmd_gen(args) -> int:
    corpus = generate_corpus(args.seed, args.utts, words_per_utt=(args.words_min, args.words_max), dim=args.dim, n_models=args.models)
    if args.noise:
        corpus = corpus.with_scorer(corrupt_scorer(corpus.scorer_spec, args.noise, args.seed))
    print(write_corpus(corpus, args.out_dir))
    return 0


COMMANDS = {"decode": cmd_decode, "metrics": cmd_metrics, "chart": cmd_chart, "sweep": cmd_sweep, "gen": cmd_gen}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "utts", 1) < 1:
        parser.error("--utts must be >= 1")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"streamdecode {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
