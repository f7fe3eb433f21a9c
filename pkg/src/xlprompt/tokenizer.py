"""Word-level vocabulary with character-piece fallback.

Text is NFC-normalised and split on whitespace. Words found in the vocabulary
map to a single id. Other words are broken into ``##``-prefixed character
n-gram pieces by greedy longest match, falling back to ``<unk>`` for any
character with no piece.

Id layout: the five specials, then the reserved pseudo tokens ``<v1>..<vm>``,
then corpus words by descending frequency (ties broken lexicographically),
then single-character pieces by descending frequency while room remains.

Serialised form (UTF-8, one token per line, line index = id after the
header)::

    #! xlprompt-vocab 1
    #! specials pad=0 bos=1 eos=2 mask=3 unk=4
    #! pseudo first=5 count=4
    <pad>
    <s>
    ...
"""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

PAD, BOS, EOS, MASK, UNK = "<pad>", "<s>", "</s>", "<mask>", "<unk>"
SPECIALS = (PAD, BOS, EOS, MASK, UNK)
PIECE_PREFIX = "##"
DEFAULT_MAX_LEN = 256


def pseudo_token(i: int) -> str:
    return f"<v{i}>"


def normalize(text: str) -> str:
    return unicodedata.normalize("NFC", text)


def split_words(text: str) -> list[str]:
    return normalize(text).split()


@dataclass
class Vocabulary:
    tokens: list[str]
    n_pseudo: int
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        expected = list(SPECIALS) + [pseudo_token(i) for i in range(1, self.n_pseudo + 1)]
        if self.tokens[: len(expected)] != expected:
            raise ValueError("vocabulary must start with the specials and pseudo tokens")
        self._reserved = len(expected)
        self._max_piece = max((len(t) - len(PIECE_PREFIX) for t in self.tokens[self._reserved:]
                               if t.startswith(PIECE_PREFIX)), default=0)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, word: str):
        i = self.index.get(word)
        return i is not None and i >= self._reserved

    pad_id = property(lambda self: 0)
    bos_id = property(lambda self: 1)
    eos_id = property(lambda self: 2)
    mask_id = property(lambda self: 3)
    unk_id = property(lambda self: 4)

    @property
    def reserved_ids(self) -> range:
        """Specials and pseudo ids; never produced by ``encode``."""
        return range(self._reserved)

    @property
    def natural_ids(self) -> range:
        return range(self._reserved, len(self.tokens))

    def pseudo_id(self, i: int) -> int:
        if not 1 <= i <= self.n_pseudo:
            raise ValueError(f"pseudo token <v{i}> not reserved (have {self.n_pseudo})")
        return len(SPECIALS) + i - 1

    def word_id(self, word: str) -> int | None:
        """Id of ``word`` if it is a whole natural-text token, else None."""
        i = self.index.get(normalize(word))
        if i is None or i < self._reserved or word.startswith(PIECE_PREFIX):
            return None
        return i

    def encode(self, text: str) -> list[int]:
        return encode(text, self)

    def decode(self, ids: Iterable[int]) -> str:
        return decode(ids, self)

    def save(self, path) -> None:
        Path(path).write_text(dumps(self), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return loads(Path(path).read_text(encoding="utf-8"))


def build_vocab(corpus: Iterable[str], size_cap: int, n_pseudo: int = 4) -> Vocabulary:
    """Build a deterministic vocabulary from lines of text.

    ``size_cap`` bounds the specials plus natural tokens; the ``n_pseudo``
    pseudo slots are reserved on top of it.
    """
    if size_cap < len(SPECIALS):
        raise ValueError(f"size_cap {size_cap} is smaller than the {len(SPECIALS)} special tokens")
    words: Counter[str] = Counter()
    chars: Counter[str] = Counter()
    seen_text = False
    for line in corpus:
        for w in split_words(line):
            seen_text = True
            chars.update(w)
            words[w] += 1
    if not seen_text:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    banned = set(SPECIALS) | {pseudo_token(i) for i in range(1, n_pseudo + 1)}
    ranked = sorted((w for w in words if w not in banned and not w.startswith(PIECE_PREFIX)),
                    key=lambda w: (-words[w], w))
    tokens = list(SPECIALS) + [pseudo_token(i) for i in range(1, n_pseudo + 1)]
    cap = size_cap + n_pseudo
    tokens += ranked[: cap - len(tokens)]
    room = cap - len(tokens)
    pieces = sorted(chars, key=lambda c: (-chars[c], c))
    tokens += [PIECE_PREFIX + c for c in pieces[:room]]
    return Vocabulary(tokens, n_pseudo)


def _pieces(word: str, vocab: Vocabulary) -> list[int]:
    out, i = [], 0
    while i < len(word):
        for n in range(min(vocab._max_piece, len(word) - i), 0, -1):
            pid = vocab.index.get(PIECE_PREFIX + word[i:i + n])
            if pid is not None:
                out.append(pid)
                i += n
                break
        else:
            out.append(vocab.unk_id)
            i += 1
    return out


def encode(text: str, vocab: Vocabulary, max_len: int | None = None) -> list[int]:
    """Encode natural text. Reserved ids (mask, pseudo, bos...) are never emitted."""
    ids: list[int] = []
    for w in split_words(text):
        wid = vocab.word_id(w)
        if wid is not None:
            ids.append(wid)
        else:
            ids.extend(_pieces(w, vocab))
    return ids if max_len is None else ids[:max_len]


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    """Inverse of ``encode`` for in-vocabulary words; pieces are glued back together.

    Consecutive out-of-vocabulary words decode as one word.
    """
    words: list[str] = []
    in_piece = False
    for i in ids:
        tok = vocab.tokens[i]
        if tok.startswith(PIECE_PREFIX) and tok != PIECE_PREFIX:
            if in_piece:
                words[-1] += tok[len(PIECE_PREFIX):]
            else:
                words.append(tok[len(PIECE_PREFIX):])
            in_piece = True
        else:
            words.append(tok)
            in_piece = False
    return " ".join(words)


HEADER = "#! xlprompt-vocab 1"


def dumps(vocab: Vocabulary) -> str:
    lines = [
        HEADER,
        "#! specials " + " ".join(f"{n}={i}" for n, i in zip(("pad", "bos", "eos", "mask", "unk"), range(5))),
        f"#! pseudo first={len(SPECIALS)} count={vocab.n_pseudo}",
    ]
    return "\n".join(lines + vocab.tokens) + "\n"


def loads(text: str) -> Vocabulary:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != HEADER:
        raise ValueError("not a vocabulary file (bad header)")
    n_pseudo = None
    body = 1
    while body < len(lines) and lines[body].startswith("#! "):
        parts = lines[body][3:].split()
        if parts[0] == "pseudo":
            n_pseudo = int(dict(p.split("=") for p in parts[1:])["count"])
        body += 1
    if n_pseudo is None:
        raise ValueError("vocabulary header lacks the pseudo line")
    return Vocabulary(lines[body:], n_pseudo)
