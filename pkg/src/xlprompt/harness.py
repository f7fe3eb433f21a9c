"""Training, evaluation and reporting for FT / DP / SP / MP.

FT stacks a 3-way linear classifier on the ``<s>`` hidden state. DP, SP and
MP fill the mask of a cloze prompt and score the verbalizer words there; SP
and MP also train a soft-prompt bank jointly with the model.

Every run trains for a fixed number of epochs, measures dev accuracy after
each epoch and keeps the weights of the earliest epoch with the best dev
accuracy.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import make_rng
from .data import CorpusSplits, FewShotSplit, NLIExample, align_translations, sample_few_shot
from .model import ClassifierHead, MaskedLM, NUM_LABELS, cls_logits, load_model, pad_batch, save_model
from .prompts import (LABELS, AssembledExample, PackFile, PromptPack, Verbalizer, assemble, cloze_loss,
                      full_vocab_loss, load_pack, load_pack_file, parse_template, render, soft_order)
from .soft_prompt import SoftPromptBank, batch_overrides, init_bank, reparameterize
from .tokenizer import DEFAULT_MAX_LEN, Vocabulary, encode

METHODS = ("FT", "DP", "SP", "MP")
PROMPT_METHODS = ("DP", "SP", "MP")
MAJORITY = 100.0 / 3
SEEDS = (1, 2, 3, 4, 5)


@dataclass
class ExperimentConfig:
    method: str
    train_language: str = "en"
    eval_languages: list[str] | None = None
    K: int = 16
    seed: int = 1
    lr: float = 1e-5
    epochs: int = 50
    batch_size: int | None = None
    max_len: int = DEFAULT_MAX_LEN
    pack_dir: str | None = None
    model_path: str | None = None
    source_language: str = "en"
    loss: str = "restricted"
    n_soft: int = 4
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.seed < 1:
            raise ValueError("seed must be at least 1")
        if self.loss not in ("restricted", "full"):
            raise ValueError("loss must be 'restricted' or 'full'")
        if self.batch_size is None:
            self.batch_size = 32 if self.method == "FT" else 24


@dataclass
class RunResult:
    method: str
    K: int
    seed: int
    train_language: str
    dev_trace: list[float]
    selected_epoch: int
    test_accuracy: dict[str, float] = field(default_factory=dict)


def select_epoch(trace: Sequence[float]) -> int:
    """1-based index of the best dev accuracy; the earliest epoch wins ties."""
    if len(trace) == 0:
        raise ValueError("no epochs to select from")
    return int(np.argmax(np.asarray(trace))) + 1


# -- lab: shared resources ---------------------------------------------------

@dataclass
class Lab:
    """Everything a run needs besides its config: vocabulary, base model, data and packs."""
    vocab: Vocabulary
    model: MaskedLM
    data: CorpusSplits
    packs: dict[str, PackFile] = field(default_factory=dict)
    pack_dir: str | None = None

    def pack(self, language: str, method: str) -> PromptPack:
        if language in self.packs:
            return self.packs[language].pack(method)
        try:
            return load_pack(language, method, self.pack_dir)
        except FileNotFoundError:
            raise FileNotFoundError(f"no prompt pack for language {language!r}") from None


# -- encoding ----------------------------------------------------------------

def encode_pair(premise: str, hypothesis: str, vocab: Vocabulary, max_len: int) -> list[int]:
    """``<s> premise </s> hypothesis </s>``; the premise is truncated first."""
    p, h = encode(premise, vocab), encode(hypothesis, vocab)
    excess = len(p) + len(h) + 3 - max_len
    if excess > 0:
        cut = min(excess, len(p))
        p = p[: len(p) - cut]
        h = h[: len(h) - (excess - cut)]
    return [vocab.bos_id, *p, vocab.eos_id, *h, vocab.eos_id]


@dataclass
class Artifacts:
    """A trained model plus whatever its method needs to predict."""
    method: str
    model: MaskedLM
    vocab: Vocabulary
    max_len: int = DEFAULT_MAX_LEN
    head: ClassifierHead | None = None
    bank: SoftPromptBank | None = None
    pack: PromptPack | None = None

    def trainable(self) -> ad.ParamGroup:
        group = ad.ParamGroup()
        if self.method == "FT":
            group.update(self.model.encoder_params(), "model.")
            group.update(self.head.params, "cls.")
        else:
            group.update(self.model.mlm_params(), "model.")
            if self.bank is not None:
                group.update(self.bank.params, "bank.")
        return group

    def verbalizer_ids(self) -> np.ndarray:
        return self.pack.verbalizer.ids(self.vocab)

    def prepare(self, examples: Sequence[NLIExample]):
        if self.method == "FT":
            return [encode_pair(e.premise, e.hypothesis, self.vocab, self.max_len) for e in examples]
        return [assemble(self.pack.template, e.premise, e.hypothesis, self.vocab, self.max_len)
                for e in examples]

    def scores(self, items, rng=None, soft_vectors=None) -> ad.Tensor:
        """Label scores (B, 3) for prepared items (id lists or assembled examples)."""
        if self.method == "FT":
            ids, mask = pad_batch(items, self.vocab.pad_id)
            return cls_logits(self.model, self.head, ids, mask, rng)
        ids, mask = pad_batch([x.ids for x in items], self.vocab.pad_id)
        over = batch_overrides(self.bank, items, soft_order(self.pack.template), soft_vectors)
        h = self.model.hidden(ids, attn_mask=mask, overrides=over, rng=rng)
        at_mask = h[np.arange(len(items)), np.array([x.mask_pos for x in items])]
        return self.model.mlm_logits(at_mask)

    def loss(self, items, labels, objective="restricted", rng=None) -> ad.Tensor:
        out = self.scores(items, rng)
        if self.method == "FT":
            return ad.cross_entropy(out, labels)
        vids = self.verbalizer_ids()
        if objective == "full":
            return full_vocab_loss(out, labels, vids)
        return cloze_loss(out[:, vids], labels)

    def predict(self, examples: Sequence[NLIExample], batch_size: int = 256) -> np.ndarray:
        """Predicted label ids; batches are formed by length so order does not matter."""
        items = self.prepare(examples)
        lengths = [len(x) if self.method == "FT" else len(x.ids) for x in items]
        keys = [tuple(x) if self.method == "FT" else tuple(x.ids) for x in items]
        order = sorted(range(len(items)), key=lambda i: (lengths[i], keys[i]))
        preds = np.zeros(len(items), dtype=np.int64)
        vids = None if self.method == "FT" else self.verbalizer_ids()
        vectors = reparameterize(self.bank) if self.bank is not None else None
        for lo in range(0, len(order), batch_size):
            idx = order[lo: lo + batch_size]
            out = self.scores([items[i] for i in idx], soft_vectors=vectors).data
            if vids is not None:
                out = out[:, vids]
            preds[idx] = out.argmax(axis=-1)
        return preds

    def with_pack(self, pack: PromptPack) -> "Artifacts":
        return replace(self, pack=pack)

    # checkpoint -------------------------------------------------------------
    def save(self, path) -> None:
        extra = {"method": self.method, "max_len": self.max_len,
                 "vocab": {"tokens": self.vocab.tokens, "n_pseudo": self.vocab.n_pseudo}}
        tensors = {}
        if self.head is not None:
            tensors.update({"cls." + k: v.data for k, v in self.head.params.items()})
        if self.bank is not None:
            extra["bank"] = {"m": self.bank.m, "d": self.bank.d}
            tensors.update({"bank." + k: v.data for k, v in self.bank.params.items()})
        if self.pack is not None:
            extra["pack"] = {"language": self.pack.language, "method": self.pack.method,
                             "template": render(self.pack.template),
                             "verbalizer": list(self.pack.verbalizer.words)}
        save_model(path, self.model, extra, tensors)

    @classmethod
    def load(cls, path) -> "Artifacts":
        model, cfg, rest = load_model(path)
        vocab = Vocabulary(cfg["vocab"]["tokens"], cfg["vocab"]["n_pseudo"])
        art = cls(cfg["method"], model, vocab, cfg["max_len"])
        if any(k.startswith("cls.") for k in rest):
            art.head = ClassifierHead(model.config.d, zero=True)
            for k in art.head.params:
                art.head.params[k].data = rest["cls." + k]
        if "bank" in cfg:
            bank = init_bank(cfg["bank"]["m"], cfg["bank"]["d"], seed=0)
            for k in bank.params:
                bank.params[k].data = rest["bank." + k]
            art.bank = bank
        if "pack" in cfg:
            p = cfg["pack"]
            art.pack = PromptPack(p["language"], p["method"], parse_template(p["template"]),
                                  Verbalizer(p["language"], tuple(p["verbalizer"])))
        return art


# -- training ----------------------------------------------------------------

def _snapshot(group: ad.ParamGroup) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in group.params.items()}


def _restore(group: ad.ParamGroup, snap: dict[str, np.ndarray]):
    for k, p in group.params.items():
        p.data = snap[k]
        p.grad = None


def accuracy(preds, gold) -> float:
    gold = np.asarray(gold)
    if gold.size == 0:
        raise ValueError("cannot compute accuracy on an empty set")
    return 100.0 * int((np.asarray(preds) == gold).sum()) / gold.size


def new_artifacts(config: ExperimentConfig, lab: Lab, pack_language: str | None = None) -> Artifacts:
    model = lab.model.clone()
    art = Artifacts(config.method, model, lab.vocab, config.max_len)
    if config.method == "FT":
        art.head = ClassifierHead(model.config.d, seed=config.seed)
    else:
        art.pack = lab.pack(pack_language or config.train_language, config.method)
        art.verbalizer_ids()
        if config.method in ("SP", "MP"):
            m = art.pack.template.n_soft
            if m != config.n_soft:
                raise ValueError(f"{config.method} template has {m} soft tokens; config expects {config.n_soft}")
            art.bank = init_bank(m, model.config.d, seed=config.seed)
    return art


def train(config: ExperimentConfig, lab: Lab, split: FewShotSplit | None = None,
          pack_language: str | None = None, log: Callable[[str], None] | None = None) -> tuple[Artifacts, RunResult]:
    """Train one run and return the artifacts of the best-dev epoch."""
    if config.epochs < 1:
        raise ValueError("epochs must be at least 1; no checkpoint could be selected otherwise")
    if split is None:
        split = sample_few_shot(lab.data, config.train_language, config.K, config.seed)
    if not split.train:
        raise ValueError("empty training set")
    art = new_artifacts(config, lab, pack_language)
    group = art.trainable()
    train_items = art.prepare(split.train)
    train_y = np.array([e.label_id for e in split.train])
    dev_y = np.array([e.label_id for e in split.dev])
    rng = make_rng([config.seed, 2])
    trace: list[float] = []
    best, best_snap = -1.0, None
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(train_items))
        for step, lo in enumerate(range(0, len(perm), config.batch_size)):
            idx = perm[lo: lo + config.batch_size]
            loss = art.loss([train_items[i] for i in idx], train_y[idx], config.loss, rng)
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"loss is {value} at epoch {epoch}, step {step + 1}")
            ad.backward(loss)
            ad.adam_step(group, config.lr)
        dev_acc = accuracy(art.predict(split.dev, config.eval_batch_size), dev_y)
        trace.append(dev_acc)
        if log:
            log(f"epoch {epoch} dev_acc {dev_acc:.2f}")
        if dev_acc > best:
            best, best_snap = dev_acc, _snapshot(group)
    _restore(group, best_snap)
    for p in group.params.values():
        p.requires_grad = False
    result = RunResult(config.method, config.K, config.seed, split.language, trace, select_epoch(trace))
    return art, result


def evaluate(art: Artifacts, corpus, language: str, batch_size: int = 256) -> float:
    """Test accuracy (percent) on ``language``; prompting keeps the artifacts' own pack."""
    examples = corpus.examples(language) if hasattr(corpus, "examples") else list(corpus)
    if not examples:
        raise ValueError(f"no test examples for {language!r}")
    return accuracy(art.predict(examples, batch_size), [e.label_id for e in examples])


def run_transfer(config: ExperimentConfig, lab: Lab, log=None) -> tuple[Artifacts, RunResult]:
    """Train in one language, then evaluate every language with the same (code-switched) prompt."""
    art, result = train(config, lab, log=log)
    for lang in config.eval_languages or lab.data.languages:
        result.test_accuracy[lang] = evaluate(art, lab.data.test, lang, config.eval_batch_size)
    return art, result


def run_in_language(config: ExperimentConfig, lab: Lab, log=None) -> tuple[Artifacts, RunResult]:
    """Train and test in ``config.train_language`` with its own prompt pack.

    Few-shot examples are sampled in ``config.source_language`` and replaced by
    their translations, mirroring how the non-English few-shot sets are built.
    """
    target = config.train_language
    if config.method in PROMPT_METHODS:
        lab.pack(target, config.method)
    base = sample_few_shot(lab.data, config.source_language, config.K, config.seed)
    split = align_translations(base, lab.data, target)
    art, result = train(config, lab, split=split, pack_language=target, log=log)
    result.test_accuracy[target] = evaluate(art, lab.data.test, target, config.eval_batch_size)
    return art, result


# -- sweeps and reports ------------------------------------------------------

@dataclass(frozen=True)
class ResultRow:
    method: str
    K: int
    seed: int
    language: str
    accuracy: float


RESULT_COLUMNS = ("method", "K", "seed", "language", "accuracy")


def rows_from(result: RunResult) -> list[ResultRow]:
    return [ResultRow(result.method, result.K, result.seed, lang, acc)
            for lang, acc in result.test_accuracy.items()]


def dump_results(rows: Iterable[ResultRow]) -> str:
    lines = ["\t".join(RESULT_COLUMNS)]
    lines += [f"{r.method}\t{r.K}\t{r.seed}\t{r.language}\t{r.accuracy:.6f}" for r in rows]
    return "\n".join(lines) + "\n"


def parse_results(text: str) -> list[ResultRow]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or tuple(lines[0].split("\t")) != RESULT_COLUMNS:
        raise ValueError("results file must start with the header " + "\t".join(RESULT_COLUMNS))
    rows = []
    for ln in lines[1:]:
        m, k, s, lang, acc = ln.split("\t")
        rows.append(ResultRow(m, int(k), int(s), lang, float(acc)))
    return rows


@dataclass
class Stats:
    mean: float
    std: float
    variance: float
    n: int


def describe(values: Sequence[float]) -> Stats:
    """Mean plus sample (n-1) std and variance; a single value has zero dispersion."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no values")
    var = float(arr.var(ddof=1)) if arr.size > 1 else 0.0
    return Stats(float(arr.mean()), math.sqrt(var), var, int(arr.size))


@dataclass
class Cell:
    per_language: dict[str, Stats]
    macro: float
    macro_spread: float  # population std of the per-language means


@dataclass
class Report:
    languages: list[str]
    cells: dict[tuple[str, int], Cell]

    @classmethod
    def from_rows(cls, rows: Iterable[ResultRow], languages: Sequence[str] | None = None) -> "Report":
        rows = list(rows)
        langs = list(languages) if languages else list(dict.fromkeys(r.language for r in rows))
        grouped: dict[tuple[str, int], dict[str, list[tuple[int, float]]]] = {}
        for r in rows:
            grouped.setdefault((r.method, r.K), {}).setdefault(r.language, []).append((r.seed, r.accuracy))
        cells = {}
        for key, by_lang in grouped.items():
            stats = {lang: describe([a for _, a in sorted(by_lang[lang])]) for lang in langs if lang in by_lang}
            means = np.array([s.mean for s in stats.values()])
            cells[key] = Cell(stats, float(means.mean()), float(means.std()))
        return cls(langs, cells)

    def keys(self) -> list[tuple[str, int]]:
        order = {m: i for i, m in enumerate(METHODS)}
        return sorted(self.cells, key=lambda k: (k[1], order.get(k[0], 99), k[0]))


def sweep(config: ExperimentConfig, lab: Lab, seeds: Sequence[int] = SEEDS, mode: str = "transfer",
          log=None) -> tuple[list[ResultRow], Report]:
    """Repeat a run over seeds and summarise."""
    if not seeds:
        raise ValueError("sweep needs at least one seed")
    runner = {"transfer": run_transfer, "inlanguage": run_in_language}[mode]
    rows: list[ResultRow] = []
    for seed in seeds:
        _, result = runner(replace(config, seed=seed), lab, log=log)
        rows.extend(rows_from(result))
    langs = config.eval_languages or (lab.data.languages if mode == "transfer" else [config.train_language])
    return rows, Report.from_rows(rows, langs)


XBAR = "X̄"


def _cell(mean: float, spread: float | None) -> str:
    return f"{mean:.2f}" if spread is None else f"{mean:.2f}±{spread:.2f}"


def emit_table(report: Report, fmt: str = "tsv", dispersion: bool = True) -> str:
    """Results table: header, MAJ row, then one row per (shots, method); X̄ last."""
    header = ["Shots", "Method", *report.languages, XBAR]
    body = [["-", "MAJ", *(["33.33"] * (len(report.languages) + 1))]]
    for method, K in report.keys():
        cell = report.cells[(method, K)]
        row = [str(K), method]
        for lang in report.languages:
            s = cell.per_language.get(lang)
            row.append("n/a" if s is None else _cell(s.mean, s.std if dispersion else None))
        row.append(_cell(cell.macro, cell.macro_spread if dispersion else None))
        body.append(row)
    table = [header, *body]
    if fmt == "tsv":
        return "\n".join("\t".join(r) for r in table) + "\n"
    if fmt == "text":
        widths = [max(len(r[i]) for r in table) for i in range(len(header))]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)).rstrip() for r in table) + "\n"
    raise ValueError(f"unknown table format {fmt!r}")


def parse_table(text: str) -> dict[tuple[str, str], dict[str, tuple[float, float | None]]]:
    """Inverse of ``emit_table`` (either format): {(shots, method): {column: (mean, spread)}}."""
    lines = [ln.split() for ln in text.splitlines() if ln.strip()]
    header, rows = lines[0], lines[1:]
    out = {}
    for r in rows:
        cells = {}
        for col, raw in zip(header[2:], r[2:]):
            if raw == "n/a":
                continue
            mean, _, spread = raw.partition("±")
            cells[col] = (float(mean), float(spread) if spread else None)
        out[(r[0], r[1])] = cells
    return out


def emit_variance(report: Report) -> str:
    """Machine-readable per-cell statistics, variance included."""
    lines = ["method\tK\tlanguage\tmean\tstd\tvariance\tn"]
    for method, K in report.keys():
        cell = report.cells[(method, K)]
        for lang, s in cell.per_language.items():
            lines.append(f"{method}\t{K}\t{lang}\t{s.mean:.6f}\t{s.std:.6f}\t{s.variance:.6f}\t{s.n}")
        lines.append(f"{method}\t{K}\t{XBAR}\t{cell.macro:.6f}\t{cell.macro_spread:.6f}\t"
                     f"{cell.macro_spread ** 2:.6f}\t{len(cell.per_language)}")
    return "\n".join(lines) + "\n"


# -- base model files --------------------------------------------------------

def save_base(path, model: MaskedLM, vocab: Vocabulary) -> None:
    """Pretrained model with its vocabulary embedded in the config block."""
    save_model(path, model, {"vocab": {"tokens": vocab.tokens, "n_pseudo": vocab.n_pseudo}})


def load_base(path) -> tuple[MaskedLM, Vocabulary]:
    model, cfg, _ = load_model(path)
    if "vocab" not in cfg:
        raise ValueError(f"{path}: checkpoint carries no vocabulary")
    return model, Vocabulary(cfg["vocab"]["tokens"], cfg["vocab"]["n_pseudo"])
