"""Translation-aligned NLI corpora, few-shot sampling and a synthetic generator.

Corpus files are UTF-8 TSV with a header row::

    pair_id	language	label	premise	hypothesis

one file per split (``train.tsv``, ``dev.tsv``, ``test.tsv``). Labels are the
class names ``entailment``, ``contradiction`` or ``neutral``.
"""

from __future__ import annotations

import re
import zlib
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import make_rng
from .prompts import LABELS, Literal, PackFile, PromptTemplate, Verbalizer

COLUMNS = ("pair_id", "language", "label", "premise", "hypothesis")
SPLITS = ("train", "dev", "test")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class NLIExample:
    pair_id: str
    language: str
    premise: str
    hypothesis: str
    label: str

    def __post_init__(self):
        if not self.premise.strip() or not self.hypothesis.strip():
            raise CorpusError(f"{self.pair_id}/{self.language}: empty premise or hypothesis")
        if self.label not in LABELS:
            raise CorpusError(f"{self.pair_id}/{self.language}: unknown label {self.label!r}")

    @property
    def label_id(self) -> int:
        return LABELS.index(self.label)


class ParallelCorpus:
    def __init__(self, split: str, examples: Iterable[NLIExample], languages: Sequence[str] | None = None,
                 require_parallel: bool | None = None):
        self.split = split
        self._rows: dict[tuple[str, str], NLIExample] = {}
        order: list[str] = []
        langs: list[str] = list(languages or [])
        for ex in examples:
            key = (ex.pair_id, ex.language)
            if key in self._rows:
                raise CorpusError(f"duplicate row for pair {ex.pair_id!r} in {ex.language!r}")
            self._rows[key] = ex
            if ex.language not in langs:
                langs.append(ex.language)
            if not order or order[-1] != ex.pair_id:
                order.append(ex.pair_id)
        self.pair_ids = list(dict.fromkeys(order))
        self.languages = langs
        self._check_labels()
        if require_parallel if require_parallel is not None else split in ("dev", "test"):
            self._check_parallel()

    def _check_labels(self):
        seen: dict[str, str] = {}
        bad = []
        for (pid, _), ex in self._rows.items():
            if seen.setdefault(pid, ex.label) != ex.label:
                bad.append(pid)
        if bad:
            raise CorpusError(f"labels disagree across languages for pair ids: {', '.join(sorted(set(bad)))}")

    def _check_parallel(self):
        missing = [f"{pid}/{lang}" for pid in self.pair_ids for lang in self.languages
                   if (pid, lang) not in self._rows]
        if missing:
            raise CorpusError(f"{self.split} split is not parallel; missing: {', '.join(missing[:20])}"
                              + (" ..." if len(missing) > 20 else ""))

    def __len__(self):
        return len(self._rows)

    def __iter__(self):
        return iter(self._rows.values())

    def get(self, pair_id: str, language: str) -> NLIExample:
        try:
            return self._rows[(pair_id, language)]
        except KeyError:
            raise CorpusError(f"no {language!r} example for pair {pair_id!r} in {self.split}") from None

    def has(self, pair_id: str, language: str) -> bool:
        return (pair_id, language) in self._rows

    def examples(self, language: str) -> list[NLIExample]:
        return [self._rows[(pid, language)] for pid in self.pair_ids if (pid, language) in self._rows]


@dataclass
class CorpusSplits:
    train: ParallelCorpus
    dev: ParallelCorpus
    test: ParallelCorpus

    @property
    def languages(self) -> list[str]:
        return list(self.test.languages)

    def __getitem__(self, split: str) -> ParallelCorpus:
        return getattr(self, split)


# -- TSV ---------------------------------------------------------------------

def load_corpus(path, split: str) -> ParallelCorpus:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or tuple(lines[0].split("\t")) != COLUMNS:
        raise CorpusError(f"{path}: header must be {' / '.join(COLUMNS)}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != len(COLUMNS):
            raise CorpusError(f"{path}:{lineno}: expected {len(COLUMNS)} columns, got {len(fields)}")
        pid, lang, label, premise, hypothesis = fields
        if label not in LABELS:
            raise CorpusError(f"{path}:{lineno}: unknown label {label!r}")
        try:
            rows.append(NLIExample(pid, lang, premise, hypothesis, label))
        except CorpusError as exc:
            raise CorpusError(f"{path}:{lineno}: {exc}") from None
    return ParallelCorpus(split, rows)


def dump_corpus(examples: Iterable[NLIExample]) -> str:
    out = ["\t".join(COLUMNS)]
    for ex in examples:
        fields = (ex.pair_id, ex.language, ex.label, ex.premise, ex.hypothesis)
        if any("\t" in f or "\n" in f for f in fields):
            raise CorpusError(f"{ex.pair_id}: fields may not contain tabs or newlines")
        out.append("\t".join(fields))
    return "\n".join(out) + "\n"


def write_corpus(path, examples: Iterable[NLIExample]) -> None:
    Path(path).write_text(dump_corpus(examples), encoding="utf-8")


def load_splits(directory) -> CorpusSplits:
    d = Path(directory)
    return CorpusSplits(*(load_corpus(d / f"{s}.tsv", s) for s in SPLITS))


# -- few-shot sampling -------------------------------------------------------

@dataclass
class FewShotSplit:
    K: int
    seed: int
    language: str
    train: list[NLIExample]
    dev: list[NLIExample]

    def pair_ids(self) -> tuple[list[str], list[str]]:
        return [e.pair_id for e in self.train], [e.pair_id for e in self.dev]


def _stratified(corpus: ParallelCorpus, language: str, K: int, rng, split: str) -> list[NLIExample]:
    pool = sorted(corpus.examples(language), key=lambda e: e.pair_id)
    out = []
    for label in LABELS:
        cands = [e for e in pool if e.label == label]
        if len(cands) < K:
            raise CorpusError(f"{split} split has {len(cands)} {label} examples in {language!r}; need {K}")
        picks = rng.choice(len(cands), size=K, replace=False)
        out.extend(cands[i] for i in picks)
    return out


def sample_few_shot(data: CorpusSplits, language: str, K: int, seed: int) -> FewShotSplit:
    """Draw K examples per class from train and K per class from dev, without replacement.

    The seed feeds one ``SeedSequence`` whose two spawned children drive the
    train draw and the dev draw independently.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    train_seq, dev_seq = np.random.SeedSequence(seed).spawn(2)
    train = _stratified(data.train, language, K, make_rng(train_seq), "train")
    dev = _stratified(data.dev, language, K, make_rng(dev_seq), "dev")
    return FewShotSplit(K, seed, language, train, dev)


def align_translations(split: FewShotSplit, data: CorpusSplits, target_language: str) -> FewShotSplit:
    """Same pair ids and labels with texts taken from ``target_language``."""
    missing = [e.pair_id for part, corpus in ((split.train, data.train), (split.dev, data.dev))
               for e in part if not corpus.has(e.pair_id, target_language)]
    if missing:
        raise CorpusError(f"no {target_language!r} translation for pair ids: {', '.join(missing)}")
    train = [data.train.get(e.pair_id, target_language) for e in split.train]
    dev = [data.dev.get(e.pair_id, target_language) for e in split.dev]
    for src, dst in zip(split.train + split.dev, train + dev):
        if src.label != dst.label:
            raise CorpusError(f"label changed for {src.pair_id} under translation")
    return replace(split, language=target_language, train=train, dev=dev)


# -- fixtures ----------------------------------------------------------------

def fixtures() -> list[NLIExample]:
    """The three qualitative pairs (contradiction, neutral, entailment)."""
    return [
        NLIExample("qual-1", "en", "This was the temper of the times.",
                   "This wasn't the temper of the times.", "contradiction"),
        NLIExample("qual-2", "en", "We would go in there.", "We would enter there at 8pm.", "neutral"),
        NLIExample("qual-3", "en", "I hope to hear from you soon.", "I hope we talk soon.", "entailment"),
    ]


# -- synthetic multilingual corpus -------------------------------------------

NOUNS = ("cat", "dog", "bird", "horse", "man", "woman", "child", "teacher", "farmer", "doctor",
         "king", "queen", "boy", "girl", "fox", "wolf", "sailor", "baker", "student", "soldier")
VERBS = ("saw", "liked", "followed", "helped", "called", "found", "watched", "chased",
         "met", "visited", "pushed", "painted")
ADJECTIVES = ("big", "small", "old", "young", "red", "quiet", "happy", "tired", "brave", "clever")
PREPOSITIONS = ("near", "behind", "with")
MODIFIERS = ("yesterday", "today", "often", "twice", "again", "tomorrow")
FUNCTION_WORDS = ("the", "not")
PUNCT = (".", "?")
PROMPT_WORDS = ("Question:", "Answer:", "yes", "no", "maybe")
MIN_CONTENT_WORDS = 8
_SYLLABLE_ONSETS = "bdfgklmnprstvz"
_SYLLABLE_VOWELS = "aeiou"


@dataclass
class SynthConfig:
    n_languages: int = 3
    pairs_per_class: int = 100
    vocab_per_language: int = 45
    seed: int = 0

    def language_tags(self) -> list[str]:
        return ["en"] + [f"x{i}" for i in range(1, self.n_languages)]


def _lexicon(vocab_per_language: int) -> dict[str, tuple[str, ...]]:
    """Pick nouns/verbs/adjectives/modifiers in fixed proportions of the content budget."""
    if vocab_per_language < MIN_CONTENT_WORDS:
        raise ValueError(f"vocab_per_language must be at least {MIN_CONTENT_WORDS} for the label rules")
    pools = {"noun": NOUNS, "verb": VERBS, "adj": ADJECTIVES, "prep": PREPOSITIONS, "mod": MODIFIERS}
    share = {"noun": 0.4, "verb": 0.25, "adj": 0.2, "prep": 0.05, "mod": 0.1}
    floor = {"noun": 2, "verb": 1, "adj": 1, "prep": 1, "mod": 1}
    return {k: pool[: max(floor[k], min(len(pool), int(round(share[k] * vocab_per_language))))]
            for k, pool in pools.items()}


@dataclass
class Cipher:
    """Bijective word substitution from English to each synthetic language.

    Punctuation maps to itself; a trailing colon on a word is preserved.
    """
    seed: int
    words: tuple[str, ...]
    tables: dict[str, dict[str, str]] = field(default_factory=dict)

    def add_language(self, tag: str, index: int):
        rng = make_rng([self.seed, index, 7])
        used: set[str] = set(self.words)
        table = {}
        for w in sorted(self.words):
            if w in PUNCT:
                table[w] = w
                continue
            base, colon = (w[:-1], ":") if w.endswith(":") else (w, "")
            while True:
                n = int(rng.integers(2, 4))
                fake = "".join(rng.choice(list(_SYLLABLE_ONSETS)) + rng.choice(list(_SYLLABLE_VOWELS))
                               for _ in range(n))
                fake = fake.capitalize() + colon if base[:1].isupper() else fake + colon
                if fake not in used:
                    break
            used.add(fake)
            table[w] = fake
        self.tables[tag] = table

    def translate(self, text: str, tag: str) -> str:
        if tag == "en":
            return text
        table = self.tables[tag]
        return " ".join(table[w] for w in text.split())

    def decipher(self, text: str, tag: str) -> str:
        if tag == "en":
            return text
        inverse = {v: k for k, v in self.tables[tag].items()}
        return " ".join(inverse[w] for w in text.split())

    def translate_pack(self, pack: PackFile, tag: str) -> PackFile:
        def literal(text):
            return re.sub(r"\S+", lambda m: self.translate(m.group(0), tag), text)

        templates = {
            method: PromptTemplate(tuple(Literal(literal(s.text)) if isinstance(s, Literal) else s
                                         for s in t.segments))
            for method, t in pack.templates.items()
        }
        words = tuple(self.translate(w, tag) for w in pack.verbalizer.words)
        return PackFile(tag, templates, Verbalizer(tag, words), normative=False,
                        note="cipher translation of the English pack")


def make_cipher(config: SynthConfig) -> Cipher:
    lex = _lexicon(config.vocab_per_language)
    words = tuple(sorted({w for pool in lex.values() for w in pool} | set(FUNCTION_WORDS)
                         | set(PUNCT) | set(PROMPT_WORDS)))
    cipher = Cipher(config.seed, words)
    for i, tag in enumerate(config.language_tags()[1:], start=1):
        cipher.add_language(tag, i)
    return cipher


def _sentence(lex, rng) -> tuple[list[str], dict[str, list[int]]]:
    """Premise tokens plus indices of optional (droppable) tokens."""
    def pick(kind):
        pool = lex[kind]
        return pool[int(rng.integers(len(pool)))]

    toks, optional, verb_at = ["the"], [], 0
    if rng.random() < 0.6:
        optional.append(len(toks))
        toks.append(pick("adj"))
    toks.append(pick("noun"))
    verb_at = len(toks)
    toks += [pick("verb"), "the"]
    if rng.random() < 0.6:
        optional.append(len(toks))
        toks.append(pick("adj"))
    toks.append(pick("noun"))
    if rng.random() < 0.5:
        start = len(toks)
        toks += [pick("prep"), "the", pick("noun")]
        optional.append((start, start + 3))
    return toks, {"optional": optional, "verb": [verb_at]}


def _restate(toks, info, rng) -> list[str]:
    """An ordered subsequence of the premise that keeps its core meaning."""
    drop: set[int] = set()
    for opt in info["optional"]:
        if rng.random() < 0.5:
            drop.update(range(*opt) if isinstance(opt, tuple) else (opt,))
    return [t for i, t in enumerate(toks) if i not in drop]


def _make_pair(label: str, lex, rng) -> tuple[str, str]:
    toks, info = _sentence(lex, rng)
    hyp = _restate(toks, info, rng)
    if label == "contradiction":
        verb = hyp.index(toks[info["verb"][0]], 1)
        hyp.insert(verb, "not")
    elif label == "neutral":
        mods = lex["mod"]
        hyp.append(mods[int(rng.integers(len(mods)))])
    return " ".join(toks + ["."]), " ".join(hyp + ["."])


def synth_corpus(config: SynthConfig, split: str = "train", pairs_per_class: int | None = None) -> ParallelCorpus:
    """Rule-labelled English-like pairs plus cipher translations into n-1 synthetic languages.

    entailment: the hypothesis is an ordered subsequence of the premise.
    contradiction: the same with the negation marker before the verb.
    neutral: the same with an unverifiable modifier appended.
    """
    if config.n_languages < 1:
        raise ValueError("need at least one language")
    n = config.pairs_per_class if pairs_per_class is None else pairs_per_class
    lex = _lexicon(config.vocab_per_language)
    cipher = make_cipher(config)
    rng = make_rng([config.seed, zlib.crc32(split.encode())])
    labels = [lab for _ in range(n) for lab in LABELS]
    labels = [labels[i] for i in rng.permutation(len(labels))]
    rows = []
    for i, label in enumerate(labels):
        premise, hypothesis = _make_pair(label, lex, rng)
        pid = f"{split}-{i:05d}"
        for tag in config.language_tags():
            rows.append(NLIExample(pid, tag, cipher.translate(premise, tag),
                                   cipher.translate(hypothesis, tag), label))
    return ParallelCorpus(split, rows, config.language_tags(), require_parallel=True)


def synth_splits(config: SynthConfig, sizes: dict[str, int] | None = None) -> CorpusSplits:
    sizes = sizes or {"train": config.pairs_per_class, "dev": config.pairs_per_class,
                      "test": config.pairs_per_class}
    return CorpusSplits(*(synth_corpus(config, s, sizes[s]) for s in SPLITS))


def class_counts(examples: Iterable[NLIExample]) -> Counter:
    return Counter(e.label for e in examples)
