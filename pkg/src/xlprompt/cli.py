"""Command-line entry point: ``xlprompt <command> [options]``.

Experiment options can also come from an INI file given with ``--config``;
keys in its ``[experiment]`` section use the ExperimentConfig field names and
command-line flags take precedence over them.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .data import (SPLITS, SynthConfig, load_corpus, load_splits,
                   sample_few_shot, synth_corpus, write_corpus)
from .harness import (SEEDS, Artifacts, ExperimentConfig, Lab, Report, dump_results, emit_table,
                      emit_variance, evaluate, load_base, parse_results, rows_from, run_in_language,
                      run_transfer, save_base, sweep, train)
from .model import MaskedLM, ModelConfig, pretrain_mlm
from .prompts import dump_pack, load_pack_file
from .tokenizer import build_vocab, encode

_INT_FIELDS = {"K", "seed", "epochs", "batch_size", "max_len", "n_soft", "eval_batch_size"}
_FLOAT_FIELDS = {"lr"}


class CLIError(Exception):
    pass


def _log(msg: str):
    print(msg, file=sys.stderr, flush=True)


# -- config resolution --------------------------------------------------------

def read_config_file(path) -> dict:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if not cp.read(path, encoding="utf-8"):
        raise CLIError(f"cannot read config file {path}")
    if not cp.has_section("experiment"):
        raise CLIError(f"{path}: missing [experiment] section")
    known = {f.name for f in fields(ExperimentConfig)}
    out = {}
    for key, raw in cp.items("experiment"):
        if key not in known:
            raise CLIError(f"{path}: unknown key {key!r}")
        out[key] = _coerce(key, raw.strip())
    return out


def _coerce(key: str, raw):
    if raw is None:
        return None
    if key in _INT_FIELDS:
        return int(raw)
    if key in _FLOAT_FIELDS:
        return float(raw)
    if key == "eval_languages":
        return [s for s in str(raw).replace(",", " ").split() if s] if not isinstance(raw, list) else raw
    return raw


def resolve_config(args) -> ExperimentConfig:
    values = read_config_file(args.config) if args.config else {}
    for f in fields(ExperimentConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = _coerce(f.name, flag)
    if "method" not in values:
        raise CLIError("no method given (use --method or the config file)")
    try:
        return ExperimentConfig(**values)
    except (TypeError, ValueError) as exc:
        raise CLIError(str(exc)) from None


def build_lab(config: ExperimentConfig, data_dir) -> Lab:
    if not config.model_path:
        raise CLIError("no base model given (use --model-path)")
    if not data_dir:
        raise CLIError("no data directory given (use --data)")
    model, vocab = load_base(config.model_path)
    return Lab(vocab, model, load_splits(data_dir), pack_dir=config.pack_dir)


def _write(path, text: str):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# -- commands ----------------------------------------------------------------

def cmd_synth(args):
    cfg = SynthConfig(args.languages, args.pairs_per_class, args.vocab_per_language, args.seed)
    out = Path(args.out)
    (out / "data").mkdir(parents=True, exist_ok=True)
    (out / "packs").mkdir(parents=True, exist_ok=True)
    sizes = {"train": args.pairs_per_class, "dev": args.dev_per_class, "test": args.pairs_per_class}
    for split in SPLITS:
        write_corpus(out / "data" / f"{split}.tsv", synth_corpus(cfg, split, sizes[split]))
    from .desk import DeskRecipe, pretraining_text, synthetic_packs
    for tag, pf in synthetic_packs(cfg).items():
        (out / "packs" / f"{tag}.ini").write_text(dump_pack(pf), encoding="utf-8")
    recipe = DeskRecipe(n_languages=args.languages, vocab_per_language=args.vocab_per_language, seed=args.seed)
    (out / "pretrain.txt").write_text("\n".join(pretraining_text(recipe)) + "\n", encoding="utf-8")
    _log(f"wrote synthetic corpus, packs and pretraining text to {out}")


def cmd_pretrain(args):
    lines = [ln for ln in Path(args.text).read_text(encoding="utf-8").splitlines() if ln.strip()]
    vocab_lines = list(lines)
    for path in sorted(Path(args.pack_dir).glob("*.ini")) if args.pack_dir else ():
        pf = load_pack_file(path)
        vocab_lines += [" ".join(pf.pack(m).words()) for m in pf.templates]
    vocab = build_vocab(vocab_lines, size_cap=args.vocab_size)
    model = MaskedLM(ModelConfig(len(vocab), d=args.d, layers=args.layers, heads=args.heads,
                                 max_len=args.max_len), seed=args.seed)
    log = pretrain_mlm(model, [encode(s, vocab) for s in lines], vocab, args.steps, seed=args.seed,
                       lr=args.lr, batch_size=args.batch_size, log_every=args.log_every, logger=_log)
    save_base(args.out, model, vocab)
    _log(f"held-out loss {log.heldout_before:.4f} -> {log.heldout_after:.4f}; saved {args.out}")


def cmd_sample(args):
    split = sample_few_shot(load_splits(args.data), args.language, args.K, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(out / "train.tsv", split.train)
    write_corpus(out / "dev.tsv", split.dev)
    _log(f"{len(split.train)} train / {len(split.dev)} dev examples written to {out}")


def _load_split(args, config):
    if not args.split_dir:
        return None
    from .data import FewShotSplit
    d = Path(args.split_dir)
    tr, dv = load_corpus(d / "train.tsv", "train"), load_corpus(d / "dev.tsv", "dev")
    lang = config.train_language
    return FewShotSplit(config.K, config.seed, lang, tr.examples(lang), dv.examples(lang))


def cmd_train(args):
    config = resolve_config(args)
    lab = build_lab(config, args.data)
    art, result = train(config, lab, split=_load_split(args, config), log=print)
    print(f"selected_epoch {result.selected_epoch}")
    if args.out:
        art.save(args.out)


def cmd_eval(args):
    art = Artifacts.load(args.artifacts)
    splits = load_splits(args.data)
    for lang in args.languages:
        print(f"{lang}\t{evaluate(art, splits.test, lang):.2f}")


def _run(args, runner):
    config = resolve_config(args)
    lab = build_lab(config, args.data)
    art, result = runner(config, lab, log=print)
    print(f"selected_epoch {result.selected_epoch}")
    _write(args.results, dump_results(rows_from(result)))
    if args.out:
        art.save(args.out)


def cmd_transfer(args):
    _run(args, run_transfer)


def cmd_inlanguage(args):
    _run(args, run_in_language)


def cmd_sweep(args):
    config = resolve_config(args)
    lab = build_lab(config, args.data)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(SEEDS)
    rows, report = sweep(config, lab, seeds, args.mode, log=_log if args.verbose else None)
    _write(args.results, dump_results(rows))
    if args.report:
        Path(args.report).write_text(emit_table(report, "text"), encoding="utf-8")


def cmd_report(args):
    rows = []
    for path in args.results:
        rows += parse_results(Path(path).read_text(encoding="utf-8"))
    if not rows:
        raise CLIError("results files contain no rows")
    report = Report.from_rows(rows, args.languages or None)
    text = emit_variance(report) if args.variance else emit_table(report, args.format, not args.no_dispersion)
    _write(args.out, text)


# -- parser ------------------------------------------------------------------

def _experiment_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI file with an [experiment] section")
    p.add_argument("--data", help="directory with train.tsv, dev.tsv, test.tsv")
    p.add_argument("--method", choices=("FT", "DP", "SP", "MP"))
    p.add_argument("--train-language", dest="train_language")
    p.add_argument("--eval-languages", dest="eval_languages", help="comma-separated")
    p.add_argument("--source-language", dest="source_language")
    p.add_argument("-K", "--K", dest="K", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--pack-dir", dest="pack_dir")
    p.add_argument("--model-path", dest="model_path")
    p.add_argument("--loss", choices=("restricted", "full"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xlprompt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic parallel corpus, packs and pretraining text")
    p.add_argument("--out", required=True)
    p.add_argument("--languages", type=int, default=3)
    p.add_argument("--pairs-per-class", type=int, default=300)
    p.add_argument("--dev-per-class", type=int, default=60)
    p.add_argument("--vocab-per-language", type=int, default=45)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="build a vocabulary and pretrain a masked LM")
    p.add_argument("--text", required=True, help="one sentence per line")
    p.add_argument("--pack-dir", help="packs whose words join the vocabulary")
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-size", type=int, default=8192)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--max-len", type=int, default=256)
    p.add_argument("--steps", type=int, default=4000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=500)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("sample", help="write a K-shot train/dev split")
    p.add_argument("--data", required=True)
    p.add_argument("--language", default="en")
    p.add_argument("-K", "--K", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="train one run; prints per-epoch dev accuracy")
    _experiment_flags(p)
    p.add_argument("--split-dir", help="use a split written by 'sample' instead of sampling")
    p.add_argument("--out", help="where to save the trained artifacts")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test accuracy of saved artifacts")
    p.add_argument("--artifacts", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--languages", nargs="+", required=True)
    p.set_defaults(func=cmd_eval)

    for name, func, text in (("transfer", cmd_transfer, "train in one language, test on all"),
                             ("inlanguage", cmd_inlanguage, "train and test in the target language")):
        p = sub.add_parser(name, help=text)
        _experiment_flags(p)
        p.add_argument("--results", help="results TSV (default stdout)")
        p.add_argument("--out", help="where to save the trained artifacts")
        p.set_defaults(func=func)

    p = sub.add_parser("sweep", help="repeat a run over seeds")
    _experiment_flags(p)
    p.add_argument("--mode", choices=("transfer", "inlanguage"), default="transfer")
    p.add_argument("--seeds", help="comma-separated (default 1,2,3,4,5)")
    p.add_argument("--results", help="results TSV (default stdout)")
    p.add_argument("--report", help="also write a text table here")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate results TSVs into a table")
    p.add_argument("results", nargs="+")
    p.add_argument("--languages", nargs="*", help="column order")
    p.add_argument("--format", choices=("text", "tsv"), default="text")
    p.add_argument("--no-dispersion", action="store_true")
    p.add_argument("--variance", action="store_true", help="per-cell mean/std/variance TSV")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (CLIError, ValueError, KeyError, OSError, FloatingPointError) as exc:
        reason = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"xlprompt {args.command}: error: {reason}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
