"""Command-line entry point: preprocess, train, tag, eval, cost-report, make-toy.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import ConfigError, RunConfig, parse_override, resolve_run_config
from .corpus import (CorpusFormatError, TagError, build_vocab, load_embeddings, read_conll,
                     read_embedding_vocab, read_unlabeled, split_validation, write_conll)
from .greenmeter import TABLE_HEADER, PowerDataError, ResourceConfig, read_samples, report
from .ndiff import NonFiniteError, retain_freed_memory
from .scoring import AlignmentError, EvalReport, aggregate, score, significance
from .training import CheckpointError, TrainingDiverged, load_checkpoint, save_checkpoint, tag_sentences, train

log = logging.getLogger("crossview")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _open_text(path: str):
    try:
        return open(path, encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot open {path}: {e.strerror}") from None


@contextlib.contextmanager
def _numerics(deterministic: bool):
    """Pin BLAS to one thread so reductions happen in a fixed order."""
    if not deterministic:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        yield


def _run_config(args) -> RunConfig:
    return resolve_run_config(args.config, args.set or (), args.seed)


def _required_inputs(run: RunConfig) -> dict:
    needed = {"labeled_path": run.labeled_path}
    if run.train.mode == "cvt":
        needed["unlabeled_path"] = run.unlabeled_path
    for k in ("val_path", "embeddings_path"):
        if getattr(run, k):
            needed[k] = getattr(run, k)
    missing = [k for k, v in needed.items() if not v]
    if missing:
        raise ConfigError("config is missing required keys: " + ", ".join(missing))
    absent = [f"{k}={v}" for k, v in needed.items() if not Path(v).is_file()]
    if absent:
        raise DataError("input files not found: " + ", ".join(absent))
    return needed


def _load_data(run: RunConfig):
    with _open_text(run.labeled_path) as fh:
        labeled = read_conll(fh)
    if not labeled:
        raise DataError(f"{run.labeled_path}: no sentences")
    if run.val_path:
        with _open_text(run.val_path) as fh:
            val = read_conll(fh)
        train_set = labeled
    else:
        train_set, val = split_validation(labeled, run.val_fraction, seed=run.train.seed)
    unlabeled = []
    if run.train.mode == "cvt":
        with _open_text(run.unlabeled_path) as fh:
            unlabeled = read_unlabeled(fh, run.max_unlabeled)
        if not unlabeled:
            raise DataError(f"{run.unlabeled_path}: no sentences")
    emb_vocab = None
    if run.embeddings_path:
        with _open_text(run.embeddings_path) as fh:
            emb_vocab = read_embedding_vocab(fh)
    vocab = build_vocab(train_set, unlabeled, emb_vocab, run.min_count)
    return train_set, val, unlabeled, vocab


def _word_vectors(run: RunConfig, vocab):
    dim = run.train.encoder.word_dim
    if run.embeddings_path:
        with _open_text(run.embeddings_path) as fh:
            mat, skipped = load_embeddings(fh, vocab, dim, seed=run.train.seed, dtype=run.train.dtype)
    else:
        mat, skipped = load_embeddings([], vocab, dim, seed=run.train.seed, dtype=run.train.dtype)
    return mat


# ------------------------------------------------------------------ commands

def cmd_preprocess(args) -> int:
    run = _run_config(args)
    _required_inputs(run)
    train_set, val, unlabeled, vocab = _load_data(run)
    out = Path(args.out or Path(run.output_dir) / "preprocessed")
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.conll").write_text(write_conll(train_set), encoding="utf-8")
    (out / "val.conll").write_text(write_conll(val), encoding="utf-8")
    (out / "vocab.json").write_text(json.dumps(vocab.to_dict(), indent=2) + "\n", encoding="utf-8")
    stats = dict(train_sentences=len(train_set), val_sentences=len(val), unlabeled_sentences=len(unlabeled),
                 words=len(vocab.words), chars=len(vocab.chars), tags=vocab.tags)
    (out / "stats.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(stats))
    return EXIT_OK


def cmd_train(args) -> int:
    run = _run_config(args)
    inputs = _required_inputs(run)
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = dict(toolkit_version=__version__, config=run.to_dict(), seed=run.train.seed,
                    deterministic=args.deterministic,
                    inputs={k: {"path": v, "sha256": _digest(v)} for k, v in sorted(inputs.items())},
                    started=time.strftime("%Y-%m-%dT%H:%M:%S%z"), finished=None)
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    train_set, val, unlabeled, vocab = _load_data(run)
    vectors = _word_vectors(run, vocab)
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as logf, _numerics(args.deterministic):
        result = train(train_set, unlabeled, val, run.train, vocab, word_vectors=vectors, log_stream=logf)
    save_checkpoint(result.best, out / "best")
    save_checkpoint(result.final, out / "final")
    manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    manifest["result"] = dict(steps=result.final.state.step, best_val_f1=result.best.state.best_f1,
                              best_step=result.best.state.best_step, stopped_early=result.final.state.stopped_early)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(manifest["result"]))
    return EXIT_OK


def cmd_tag(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    with _open_text(args.input) as fh:
        sentences = read_unlabeled(fh)
    with _numerics(args.deterministic):
        tags = tag_sentences(sentences, ckpt.model, ckpt.vocab) if sentences else []
    lines = []
    for s, t in zip(sentences, tags):
        lines.extend(f"{tok} {tag}" for tok, tag in zip(s.tokens, t))
        lines.append("")
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def read_aligned(pred_path: str, gold_path: Optional[str]):
    """Predicted and gold tag sequences, checked to cover the same tokens.

    With no ``gold_path`` the file is read in conlleval layout, where the last
    two columns of each line are the gold and the predicted tag.
    """
    if gold_path is None:
        # conlleval layout: token ... gold pred
        with _open_text(pred_path) as fh:
            rows = [line.split() for line in fh]
        gold_tags, pred_tags, cur_g, cur_p = [], [], [], []
        for lineno, cols in enumerate(rows + [[]], start=1):
            if not cols:
                if cur_g:
                    gold_tags.append(cur_g)
                    pred_tags.append(cur_p)
                    cur_g, cur_p = [], []
                continue
            if cols[0] == "-DOCSTART-":
                continue
            if len(cols) < 3:
                raise AlignmentError(f"{pred_path}:{lineno}: need token, gold and predicted tag")
            cur_g.append(cols[-2])
            cur_p.append(cols[-1])
        return pred_tags, gold_tags
    with _open_text(pred_path) as fh:
        pred = read_conll(fh)
    with _open_text(gold_path) as fh:
        gold = read_conll(fh)
    if len(pred) != len(gold):
        raise AlignmentError(f"{len(pred)} predicted sentences but {len(gold)} gold sentences")
    for i, (p, g) in enumerate(zip(pred, gold)):
        if p.tokens != g.tokens:
            j = next((k for k, (a, b) in enumerate(zip(p.tokens, g.tokens)) if a != b), min(len(p.tokens), len(g.tokens)))
            raise AlignmentError(f"sentence {i}, token {j}: prediction and gold disagree on tokens")
    return [list(p.tags) for p in pred], [list(g.tags) for g in gold]


def _load_reports(paths) -> list[float]:
    f1s = []
    for p in paths:
        with _open_text(p) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as e:
                raise DataError(f"{p}: not a JSON report ({e})") from None
        f1s.append(EvalReport.from_dict(d).overall.f1)
    return f1s


def cmd_eval(args) -> int:
    if args.runs:
        a = aggregate(_load_reports(args.runs))
        print(f"runs: {len(a.runs)}  F1: {a}")
        if args.versus:
            b = aggregate(_load_reports(args.versus))
            print(f"versus: {len(b.runs)}  F1: {b}")
            p = significance(a.runs, b.runs, method=args.method, paired=args.paired, seed=args.seed or 0)
            print(f"p-value ({args.method}{', paired' if args.paired else ''}): {p:.4g}")
        return EXIT_OK
    if not args.pred:
        raise ConfigError("eval needs --pred (with optional --gold) or --runs")
    pred, gold = read_aligned(args.pred, args.gold)
    rep = score(pred, gold)
    sys.stdout.write(rep.to_text())
    if args.out:
        Path(args.out).write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_cost_report(args) -> int:
    settings = {}
    if args.config:
        try:
            settings = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"{args.config}: {e}") from None
    for o in args.set or ():
        settings.update(parse_override(o))
    for key, val in (("pue", args.pue), ("co2_lbs_per_kwh", args.co2_factor), ("usd_per_hour", args.usd_per_hour)):
        if val is not None:
            settings[key] = val
    unknown = sorted(set(settings) - {"pue", "co2_lbs_per_kwh", "usd_per_hour"})
    if unknown:
        raise ConfigError("unknown cost-report keys: " + ", ".join(unknown))
    try:
        cfg = ResourceConfig(**{k: float(v) for k, v in settings.items()})
    except ValueError as e:
        raise ConfigError(str(e)) from None
    with _open_text(args.samples) as fh:
        samples = read_samples(fh)
    rep = report(samples, args.hours, cfg)
    print(TABLE_HEADER)
    print(rep.table_row(args.model, args.hw))
    for fam in rep.omitted:
        print(f"note: no {fam} samples; {fam} energy omitted")
    if args.out:
        Path(args.out).write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_make_toy(args) -> int:
    from .synthetic import toy_splits
    d = toy_splits(args.labeled, args.unlabeled, args.val, args.test, seed=args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("labeled", "val", "test"):
        (out / f"{name}.conll").write_text(write_conll(d[name]), encoding="utf-8")
    (out / "unlabeled.txt").write_text("".join(" ".join(s.tokens) + "\n" for s in d["unlabeled"]), encoding="utf-8")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--seed", type=int, help="random seed (overrides config)")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                        help="single-threaded numerics (default on)")

    parser = _Parser(prog="crossview", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"crossview {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", parents=[common], help="normalize data and build the vocabulary")
    p.add_argument("--out", help="output directory (default <output_dir>/preprocessed)")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train a tagger")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tag", parents=[common], help="tag one-sentence-per-line text")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_tag)

    p = sub.add_parser("eval", parents=[common], help="conlleval-style scoring and multi-run summaries")
    p.add_argument("--pred", help="predictions (CoNLL); with no --gold, a token/gold/pred file")
    p.add_argument("--gold")
    p.add_argument("--out", help="write the structured report here")
    p.add_argument("--runs", nargs="+", help="structured reports of several runs")
    p.add_argument("--versus", nargs="+", help="reports of a second model for a significance test")
    p.add_argument("--method", choices=("welch_t", "permutation"), default="welch_t")
    p.add_argument("--paired", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cost-report", parents=[common], help="energy, CO2 and cost of a run")
    p.add_argument("--samples", required=True, help="CSV with timestamp,component,watts")
    p.add_argument("--hours", type=float, required=True)
    p.add_argument("--usd-per-hour", type=float)
    p.add_argument("--pue", type=float)
    p.add_argument("--co2-factor", type=float)
    p.add_argument("--model", default="run")
    p.add_argument("--hw", default="-")
    p.add_argument("--out")
    p.set_defaults(func=cmd_cost_report)

    p = sub.add_parser("make-toy", parents=[common], help="write a synthetic HMM-tagged corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--labeled", type=int, default=50)
    p.add_argument("--unlabeled", type=int, default=5000)
    p.add_argument("--val", type=int, default=100)
    p.add_argument("--test", type=int, default=500)
    p.set_defaults(func=cmd_make_toy)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    retain_freed_memory()
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NonFiniteError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CorpusFormatError, TagError, AlignmentError, PowerDataError, CheckpointError,
            OSError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
