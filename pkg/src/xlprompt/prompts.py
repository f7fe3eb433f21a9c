"""Cloze prompt templates, verbalizers and scoring.

Template grammar::

    template    := (literal | placeholder)*
    placeholder := "{premise}" | "{hypothesis}" | "{mask}" | "{soft:" INT "}"
    literal     := any text; "\\{", "\\}" and "\\\\" stand for "{", "}" and "\\"

``render(parse_template(s)) == s`` for every accepted ``s``.

Prompt packs are UTF-8 INI files::

    [pack]
    language = en
    [templates]
    DP = {premise} . Question: {hypothesis} ? Answer: {mask} .
    SP = ...
    MP = ...
    [verbalizer]
    entailment = yes
    contradiction = no
    neutral = maybe
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .tokenizer import DEFAULT_MAX_LEN, Vocabulary, encode

LABELS = ("entailment", "contradiction", "neutral")
METHODS = ("DP", "SP", "MP")


class TemplateError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")


# -- segments ----------------------------------------------------------------

@dataclass(frozen=True)
class Literal:
    text: str


@dataclass(frozen=True)
class PremiseSlot:
    pass


@dataclass(frozen=True)
class HypothesisSlot:
    pass


@dataclass(frozen=True)
class SoftToken:
    index: int


@dataclass(frozen=True)
class MaskSlot:
    pass


Segment = Literal | PremiseSlot | HypothesisSlot | SoftToken | MaskSlot

_PLACEHOLDER = re.compile(r"\{(premise|hypothesis|mask|soft:(\d+))\}")


@dataclass(frozen=True)
class PromptTemplate:
    segments: tuple[Segment, ...]

    @property
    def n_soft(self) -> int:
        return sum(isinstance(s, SoftToken) for s in self.segments)

    def render(self) -> str:
        return render(self)


def _byte_offset(source: str, i: int) -> int:
    return len(source[:i].encode("utf-8"))


def parse_template(source: str, require_slots: bool = True) -> PromptTemplate:
    segments: list[Segment] = []
    buf: list[str] = []
    i = 0

    def flush():
        if buf:
            segments.append(Literal("".join(buf)))
            buf.clear()

    while i < len(source):
        ch = source[i]
        if ch == "\\":
            if i + 1 >= len(source) or source[i + 1] not in "{}\\":
                raise TemplateError("invalid escape", _byte_offset(source, i))
            buf.append(source[i + 1])
            i += 2
        elif ch == "{":
            m = _PLACEHOLDER.match(source, i)
            if m is None:
                raise TemplateError("malformed placeholder", _byte_offset(source, i))
            flush()
            name = m.group(1)
            if name == "premise":
                segments.append(PremiseSlot())
            elif name == "hypothesis":
                segments.append(HypothesisSlot())
            elif name == "mask":
                segments.append(MaskSlot())
            else:
                digits = m.group(2)
                if digits != str(int(digits)):
                    raise TemplateError("soft index must not have leading zeros", _byte_offset(source, i))
                segments.append(SoftToken(int(digits)))
            i = m.end()
        elif ch == "}":
            raise TemplateError("unmatched '}'", _byte_offset(source, i))
        else:
            buf.append(ch)
            i += 1
    flush()
    template = PromptTemplate(tuple(segments))
    validate(template, require_slots)
    return template


def validate(template: PromptTemplate, require_slots: bool = True) -> None:
    segs = template.segments
    n_mask = sum(isinstance(s, MaskSlot) for s in segs)
    if n_mask != 1:
        raise TemplateError(f"template needs exactly one {{mask}}, found {n_mask}")
    for kind, label in ((PremiseSlot, "premise"), (HypothesisSlot, "hypothesis")):
        n = sum(isinstance(s, kind) for s in segs)
        if n > 1:
            raise TemplateError(f"{{{label}}} appears {n} times")
        if require_slots and n == 0:
            raise TemplateError(f"NLI template lacks {{{label}}}")
    soft = [s.index for s in segs if isinstance(s, SoftToken)]
    if len(set(soft)) != len(soft):
        raise TemplateError("soft token indices repeat")
    if soft and sorted(soft) != list(range(1, len(soft) + 1)):
        raise TemplateError(f"soft token indices {sorted(soft)} are not contiguous from 1")


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("{", "\\{").replace("}", "\\}")


def render(template: PromptTemplate) -> str:
    out = []
    for s in template.segments:
        if isinstance(s, Literal):
            out.append(_escape(s.text))
        elif isinstance(s, PremiseSlot):
            out.append("{premise}")
        elif isinstance(s, HypothesisSlot):
            out.append("{hypothesis}")
        elif isinstance(s, MaskSlot):
            out.append("{mask}")
        else:
            out.append(f"{{soft:{s.index}}}")
    return "".join(out)


def fill(template: PromptTemplate, premise: str, hypothesis: str, mask_text: str = "<mask>") -> str:
    """Human-readable prompt text with slots substituted (soft tokens as <vi>)."""
    out = []
    for s in template.segments:
        if isinstance(s, Literal):
            out.append(s.text)
        elif isinstance(s, PremiseSlot):
            out.append(premise)
        elif isinstance(s, HypothesisSlot):
            out.append(hypothesis)
        elif isinstance(s, MaskSlot):
            out.append(mask_text)
        else:
            out.append(f"<v{s.index}>")
    return "".join(out)


# -- verbalizer --------------------------------------------------------------

@dataclass(frozen=True)
class Verbalizer:
    language: str
    words: tuple[str, str, str]  # in LABELS order

    def ids(self, vocab: Vocabulary) -> np.ndarray:
        """Vocabulary ids of the three label words; each must be a single token."""
        out = []
        for label, word in zip(LABELS, self.words):
            wid = vocab.word_id(word) if len(word.split()) == 1 else None
            if wid is None:
                raise ValueError(f"verbalizer word {word!r} for {label} ({self.language}) "
                                 "is not a single vocabulary token")
            out.append(wid)
        if len(set(out)) != 3:
            raise ValueError(f"verbalizer words for {self.language} share a token id")
        return np.array(out)

    def word(self, label: str) -> str:
        return self.words[LABELS.index(label)]


# -- assembly ----------------------------------------------------------------

@dataclass
class AssembledExample:
    ids: list[int]
    mask_pos: int
    soft_positions: list[int]
    label: int | None = None
    premise_span: tuple[int, int] = (0, 0)
    hypothesis_span: tuple[int, int] = (0, 0)

    def scaffold_ids(self) -> list[int]:
        """Ids outside the premise and hypothesis spans."""
        drop = set(range(*self.premise_span)) | set(range(*self.hypothesis_span))
        return [t for i, t in enumerate(self.ids) if i not in drop]


def assemble(template: PromptTemplate, premise: str, hypothesis: str, vocab: Vocabulary,
             max_len: int = DEFAULT_MAX_LEN, label: int | None = None) -> AssembledExample:
    """Build ``<s> ... </s>`` with slots encoded, pseudo ids placed and one mask.

    Over-long inputs lose tokens from the end of the premise first, then from
    the end of the hypothesis; scaffold, soft tokens and mask are kept.
    """
    prem = encode(premise, vocab)
    hyp = encode(hypothesis, vocab)
    parts: list[tuple[Segment, list[int]]] = []
    for s in template.segments:
        if isinstance(s, Literal):
            parts.append((s, encode(s.text, vocab)))
        elif isinstance(s, PremiseSlot):
            parts.append((s, prem))
        elif isinstance(s, HypothesisSlot):
            parts.append((s, hyp))
        elif isinstance(s, MaskSlot):
            parts.append((s, [vocab.mask_id]))
        else:
            parts.append((s, [vocab.pseudo_id(s.index)]))
    scaffold = 2 + sum(len(t) for s, t in parts if not isinstance(s, (PremiseSlot, HypothesisSlot)))
    if scaffold > max_len:
        raise ValueError(f"prompt scaffold needs {scaffold} tokens but max_len is {max_len}")
    excess = scaffold + len(prem) + len(hyp) - max_len
    if excess > 0:
        cut = min(excess, len(prem))
        prem = prem[: len(prem) - cut]
        hyp = hyp[: len(hyp) - (excess - cut)]
    ids = [vocab.bos_id]
    mask_pos, soft, spans = -1, [], {}
    for s, toks in parts:
        if isinstance(s, PremiseSlot):
            toks = prem
        elif isinstance(s, HypothesisSlot):
            toks = hyp
        start = len(ids)
        ids.extend(toks)
        if isinstance(s, MaskSlot):
            mask_pos = start
        elif isinstance(s, SoftToken):
            soft.append(start)
        elif isinstance(s, (PremiseSlot, HypothesisSlot)):
            spans[type(s)] = (start, len(ids))
    ids.append(vocab.eos_id)
    return AssembledExample(ids, mask_pos, soft, label,
                            spans.get(PremiseSlot, (0, 0)), spans.get(HypothesisSlot, (0, 0)))


def soft_order(template: PromptTemplate) -> list[int]:
    """Zero-based soft-vector index for each soft position, in template order."""
    return [s.index - 1 for s in template.segments if isinstance(s, SoftToken)]


# -- scoring -----------------------------------------------------------------

def cloze_scores(logits_at_mask, verbalizer_ids):
    """Restrict mask-position logits to the verbalizer ids (label order).

    Works on a (|V|,) or (B, |V|) numpy array or Tensor.
    """
    ids = np.asarray(verbalizer_ids)
    if isinstance(logits_at_mask, ad.Tensor):
        if logits_at_mask.ndim == 1:
            return logits_at_mask[ids]
        return logits_at_mask[:, ids]
    return np.asarray(logits_at_mask)[..., ids]


def predict(scores) -> np.ndarray | int:
    """Argmax over label scores; ties go to the lowest label index."""
    arr = scores.data if isinstance(scores, ad.Tensor) else np.asarray(scores)
    pred = arr.argmax(axis=-1)
    return int(pred) if pred.ndim == 0 else pred


def cloze_loss(scores, gold) -> ad.Tensor:
    """Cross-entropy of the 3-way softmax over verbalizer scores."""
    scores = ad.as_tensor(scores)
    if scores.ndim == 1:
        scores = scores.reshape(1, -1)
    gold = np.atleast_1d(np.asarray(gold, dtype=np.int64))
    return ad.cross_entropy(scores, gold)


def full_vocab_loss(logits_at_mask: ad.Tensor, gold, verbalizer_ids) -> ad.Tensor:
    """Alternative objective: cross-entropy over the full vocabulary at the mask."""
    if logits_at_mask.ndim == 1:
        logits_at_mask = logits_at_mask.reshape(1, -1)
    gold = np.atleast_1d(np.asarray(gold, dtype=np.int64))
    return ad.cross_entropy(logits_at_mask, np.asarray(verbalizer_ids)[gold])


# -- prompt packs ------------------------------------------------------------

@dataclass(frozen=True)
class PromptPack:
    language: str
    method: str
    template: PromptTemplate
    verbalizer: Verbalizer
    normative: bool = True

    def words(self) -> list[str]:
        """Natural-text words the pack needs in the vocabulary."""
        lits = " ".join(s.text for s in self.template.segments if isinstance(s, Literal))
        return lits.split() + list(self.verbalizer.words)


@dataclass
class PackFile:
    language: str
    templates: dict[str, PromptTemplate]
    verbalizer: Verbalizer
    normative: bool = True
    note: str = field(default="", repr=False)

    def pack(self, method: str) -> PromptPack:
        if method not in self.templates:
            raise KeyError(f"pack {self.language!r} has no {method} template")
        return PromptPack(self.language, method, self.templates[method], self.verbalizer, self.normative)


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#",),
                                   inline_comment_prefixes=None)
    cp.optionxform = str
    return cp


def parse_pack(text: str, source: str = "<pack>") -> PackFile:
    cp = _parser()
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ValueError(f"{source}: {exc}") from None
    for section in ("pack", "templates", "verbalizer"):
        if not cp.has_section(section):
            raise ValueError(f"{source}: missing [{section}] section")
    lang = cp.get("pack", "language", fallback="").strip()
    if not lang:
        raise ValueError(f"{source}: missing language")
    templates = {}
    for method, src in cp.items("templates"):
        if method not in METHODS:
            raise ValueError(f"{source}: unknown method {method!r}")
        t = parse_template(src.strip())
        if method == "DP" and t.n_soft:
            raise ValueError(f"{source}: DP template must not contain soft tokens")
        if method in ("SP", "MP") and not t.n_soft:
            raise ValueError(f"{source}: {method} template needs soft tokens")
        templates[method] = t
    missing = [lab for lab in LABELS if not cp.get("verbalizer", lab, fallback="").strip()]
    if missing:
        raise ValueError(f"{source}: verbalizer lacks {', '.join(missing)}")
    words = tuple(cp.get("verbalizer", lab).strip() for lab in LABELS)
    if any(len(w.split()) != 1 for w in words):
        raise ValueError(f"{source}: verbalizer entries must be single words, got {words}")
    normative = cp.getboolean("pack", "normative", fallback=True)
    return PackFile(lang, templates, Verbalizer(lang, words), normative, cp.get("pack", "note", fallback=""))


def dump_pack(pf: PackFile) -> str:
    lines = ["[pack]", f"language = {pf.language}"]
    if not pf.normative:
        lines.append("normative = false")
    lines += ["", "[templates]"]
    lines += [f"{m} = {render(t)}" for m, t in pf.templates.items()]
    lines += ["", "[verbalizer]"]
    lines += [f"{lab} = {w}" for lab, w in zip(LABELS, pf.verbalizer.words)]
    return "\n".join(lines) + "\n"


def load_pack_file(path) -> PackFile:
    path = Path(path)
    return parse_pack(path.read_text(encoding="utf-8"), str(path))


def shipped_languages() -> list[str]:
    root = resources.files("xlprompt") / "packs"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".ini"))


def find_pack(language: str, pack_dir=None) -> PackFile:
    """``<language>.ini`` from ``pack_dir`` if present there, else from the shipped packs."""
    if pack_dir is not None:
        path = Path(pack_dir) / f"{language}.ini"
        if path.exists():
            return load_pack_file(path)
    res = resources.files("xlprompt") / "packs" / f"{language}.ini"
    if not res.is_file():
        raise FileNotFoundError(f"no prompt pack for language {language!r}")
    return parse_pack(res.read_text(encoding="utf-8"), str(res))


def load_pack(language: str, method: str, pack_dir=None) -> PromptPack:
    return find_pack(language, pack_dir).pack(method)


def assemble_batch(pack: PromptPack, pairs: Sequence[tuple[str, str]], vocab: Vocabulary,
                   max_len: int = DEFAULT_MAX_LEN, labels: Sequence[int] | None = None) -> list[AssembledExample]:
    labels = labels if labels is not None else [None] * len(pairs)
    return [assemble(pack.template, p, h, vocab, max_len, y) for (p, h), y in zip(pairs, labels)]
