"""Command-line entry point.

Subcommands: eval, mine, leakage, train, validate-uiq, report.

Exit codes: 0 success, 1 usage error, 2 validation failure (bad data,
bad config, invalid queries), 3 I/O failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import __version__, embedstore, harness, hnmine, leakage, trainer, uiqtools
from . import report as report_mod
from .errors import BenchError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    """argparse reserves exit code 2 for usage errors; this tool uses 2
    for validation failures, so usage errors exit 1 instead."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="atrbench", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_eval = sub.add_parser("eval", help="run a batch evaluation")
    p_eval.add_argument("--config", required=True, help="TOML run config")
    p_eval.add_argument("--out", help="override output directory")
    p_eval.add_argument("--threads", type=int, help="worker threads")
    p_eval.add_argument("--seed", type=int, help="override run seed")
    p_eval.add_argument(
        "--format", choices=["csv", "markdown", "both"], help="table format"
    )
    p_eval.add_argument(
        "--no-figures", action="store_true", help="skip PNG rendering"
    )

    p_mine = sub.add_parser("mine", help="mine hard-negative pairs")
    p_mine.add_argument("--audio", required=True, help="audio embeddings")
    p_mine.add_argument(
        "--text", required=True, help="designated caption embeddings"
    )
    p_mine.add_argument("--manifest", required=True)
    p_mine.add_argument("--out", required=True, help="pairs output file")
    p_mine.add_argument("--failures-out", help="failure records output file")
    p_mine.add_argument("--candidates", type=int, default=20)
    p_mine.add_argument("--stage2-multiplier", type=float, default=3.0)
    p_mine.add_argument("--per-target", type=int, default=1)
    p_mine.add_argument("--reviews", help="review decisions to apply")

    p_leak = sub.add_parser("leakage", help="train/eval overlap report")
    p_leak.add_argument(
        "--kind", required=True, choices=list(leakage.KINDS)
    )
    src = p_leak.add_mutually_exclusive_group(required=True)
    src.add_argument("--eval-keys", help="line-delimited eval ids/filenames")
    src.add_argument("--eval-manifest", help="eval dataset manifest")
    p_leak.add_argument(
        "--train-keys", required=True, help="line-delimited train ids/filenames"
    )
    p_leak.add_argument("--out", required=True, help="output directory")

    p_train = sub.add_parser("train", help="train projection heads")
    p_train.add_argument("--text", required=True, help="text embeddings")
    p_train.add_argument("--audio", required=True, help="audio embeddings")
    p_train.add_argument(
        "--pairs", required=True, help="line-delimited (text_id, audio_id)"
    )
    p_train.add_argument("--val-pairs", help="validation pairs")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--out-dim", type=int, default=trainer.DEFAULT_OUT_DIM)
    p_train.add_argument("--lr", type=float, default=3e-4)
    p_train.add_argument(
        "--temperature", type=float, default=trainer.DEFAULT_TEMPERATURE
    )
    p_train.add_argument("--batch-size", type=int, default=64)
    p_train.add_argument("--max-steps", type=int, default=500)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--dropout", type=float, default=0.1)
    p_train.add_argument("--weight-decay", type=float, default=0.0)
    p_train.add_argument("--early-stop-k", type=int, default=10)
    p_train.add_argument("--patience", type=int, default=0)

    p_uiq = sub.add_parser(
        "validate-uiq", help="validate query formats, one query per line"
    )
    p_uiq.add_argument(
        "queries", nargs="?", help="input file (default: standard input)"
    )
    p_uiq.add_argument(
        "--type",
        dest="query_type",
        help="apply one type to all lines; otherwise lines are TYPE<TAB>TEXT",
    )

    p_rep = sub.add_parser("report", help="re-render tables from a report file")
    p_rep.add_argument("--report", required=True, help="report.jsonl path")
    p_rep.add_argument("--out", required=True, help="output directory")
    p_rep.add_argument(
        "--format", choices=["csv", "markdown", "both"], help="table format"
    )
    p_rep.add_argument("--no-figures", action="store_true")
    return parser


def _formats(choice: Optional[str]) -> Optional[tuple[str, ...]]:
    if choice is None:
        return None
    if choice == "both":
        return ("csv", "markdown")
    return (choice,)


def _cmd_eval(args: argparse.Namespace) -> int:
    cfg = harness.load_run_config(args.config)
    overrides = {}
    if args.out is not None:
        overrides["output_dir"] = Path(args.out)
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.seed is not None:
        overrides["seed"] = args.seed
    fmt = _formats(args.format)
    if fmt is not None:
        overrides["formats"] = fmt
    if args.no_figures:
        overrides["figures"] = False
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)

    started = time.perf_counter()
    report = harness.run_eval(cfg)
    elapsed = time.perf_counter() - started
    # Wall time goes to stdout only; report files must stay identical
    # across reruns.
    print(
        f"evaluated {len(report.entries)} metric cells in {elapsed:.2f}s; "
        f"report written to {cfg.output_dir}"
    )
    return EXIT_OK


def _cmd_mine(args: argparse.Namespace) -> int:
    cfg = hnmine.MiningConfig(
        k_candidates=args.candidates,
        stage2_multiplier=args.stage2_multiplier,
        final_count_per_target=args.per_target,
    )
    audio = embedstore.l2_normalize(embedstore.load_embeddings(args.audio))
    text = embedstore.l2_normalize(embedstore.load_embeddings(args.text))
    manifest = embedstore.load_manifest(args.manifest)
    result = hnmine.mine_pairs(audio, text, manifest, cfg)
    pairs = result.pairs
    if args.reviews:
        pairs = hnmine.verify_pairs(pairs, hnmine.read_reviews(args.reviews))
    hnmine.write_pairs(pairs, args.out)
    if args.failures_out:
        hnmine.write_failures(result.failures, args.failures_out)
    print(
        f"mined {len(pairs)} pairs over {len(result.stages)} targets "
        f"({len(result.failures)} failures) -> {args.out}"
    )
    return EXIT_OK


def _cmd_leakage(args: argparse.Namespace) -> int:
    if args.eval_manifest:
        eval_index = leakage.index_from_manifest(
            args.kind, embedstore.load_manifest(args.eval_manifest)
        )
    else:
        eval_index = leakage.index_from_keys(
            args.kind, leakage.read_keys(args.eval_keys)
        )
    train_index = leakage.index_from_keys(
        args.kind, leakage.read_keys(args.train_keys)
    )
    report = leakage.overlap_report(eval_index, train_index)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "overlap.json").write_text(
        json.dumps(report.to_record(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    leakage.emit_blocklist(report, out / "blocklist.txt")
    print(
        f"overlap: {len(report.overlap_keys)} of {report.eval_unique} eval "
        f"keys ({report.clip_overlap_pct:.2f}%), "
        f"{report.duplicated_caption_rows} duplicated caption rows; "
        f"blocklist -> {out / 'blocklist.txt'}"
    )
    return EXIT_OK


def _cmd_train(args: argparse.Namespace) -> int:
    text_emb = embedstore.load_embeddings(args.text)
    audio_emb = embedstore.load_embeddings(args.audio)
    pairs = trainer.load_pairs(args.pairs)
    val_pairs = trainer.load_pairs(args.val_pairs) if args.val_pairs else None
    cfg = trainer.TrainConfig(
        temperature=args.temperature,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_steps=args.max_steps,
        seed=args.seed,
        weight_decay=args.weight_decay,
        early_stop_k=args.early_stop_k,
        early_stop_patience=args.patience,
    )
    heads = trainer.HeadPair(
        trainer.ProjectionHead.create(
            text_emb.dim, args.out_dim, args.dropout, seed=args.seed
        ),
        trainer.ProjectionHead.create(
            audio_emb.dim, args.out_dim, args.dropout, seed=args.seed + 1
        ),
    )
    result = trainer.train(heads, text_emb, audio_emb, pairs, cfg, val_pairs)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer.save_checkpoint(result.heads.text, out / "text_head.oemb")
    trainer.save_checkpoint(result.heads.audio, out / "audio_head.oemb")
    trainer.write_trace(result, out / "trace.jsonl")
    last = result.loss_trace[-1][1] if result.loss_trace else float("nan")
    print(
        f"trained {result.steps_run} steps (final loss {last:.6f}, "
        f"early stop: {result.stopped_early}); checkpoints -> {out}"
    )
    return EXIT_OK


def _cmd_validate_uiq(args: argparse.Namespace) -> int:
    if args.queries:
        lines = Path(args.queries).read_text(encoding="utf-8").splitlines()
    else:
        lines = sys.stdin.read().splitlines()

    checked = 0
    invalid = 0
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if args.query_type is not None:
            query_type, text = args.query_type, line
        else:
            if "\t" not in line:
                raise BenchError(
                    f"line {line_no}: expected TYPE<TAB>TEXT (or pass --type)"
                )
            query_type, text = line.split("\t", 1)
        result = uiqtools.validate_query(text, query_type)
        checked += 1
        if not result.valid:
            invalid += 1
            for violation in result.violations:
                print(
                    f"line {line_no} [{query_type}] {violation.code}: "
                    f"{violation.message}",
                    file=sys.stderr,
                )
    print(f"checked {checked} queries, {invalid} invalid")
    return EXIT_VALIDATION if invalid else EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    report = report_mod.load_report_file(args.report)
    fmt = _formats(args.format) or ("csv", "markdown")
    written = report_mod.render_report(
        report, Path(args.out), formats=fmt, figures=not args.no_figures
    )
    print(f"rendered {len(written)} files to {args.out}")
    return EXIT_OK


_COMMANDS = {
    "eval": _cmd_eval,
    "mine": _cmd_mine,
    "leakage": _cmd_leakage,
    "train": _cmd_train,
    "validate-uiq": _cmd_validate_uiq,
    "report": _cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors exit 1, --help exits 0
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except BenchError as exc:
        print(f"atrbench: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"atrbench: i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
