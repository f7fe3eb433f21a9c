"""Desk-scale stand-in for the full pipeline.

A small synthetic multilingual NLI corpus, cipher-translated prompt packs and
a tiny masked LM pretrained on unlabelled sentences. Part of the pretraining
text is code-switched (each word independently drawn from a random language)
so that the languages share one embedding space, which is what makes
cross-lingual transfer possible at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .autodiff import make_rng
from .data import CorpusSplits, SynthConfig, make_cipher, synth_corpus
from .harness import Lab
from .model import MaskedLM, ModelConfig, PretrainLog, pretrain_mlm
from .prompts import PackFile, find_pack
from .tokenizer import Vocabulary, build_vocab, encode


@dataclass
class DeskRecipe:
    n_languages: int = 3
    vocab_per_language: int = 45
    train_per_class: int = 300
    dev_per_class: int = 60
    test_per_class: int = 300
    pretrain_pairs_per_class: int = 1000
    code_switch_copies: int = 4
    d: int = 64
    layers: int = 2
    heads: int = 4
    pretrain_steps: int = 4000
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 32
    seed: int = 0
    finetune_lr: float = 1e-3

    def synth(self) -> SynthConfig:
        return SynthConfig(self.n_languages, self.train_per_class, self.vocab_per_language, self.seed)


@dataclass
class DeskLab:
    lab: Lab
    pretrain_log: PretrainLog
    pretrain_sentences: list[str] = field(default_factory=list)


def synthetic_packs(config: SynthConfig) -> dict[str, PackFile]:
    """The English pack plus its cipher translation for every synthetic language."""
    english = find_pack("en")
    cipher = make_cipher(config)
    packs = {"en": english}
    for tag in config.language_tags()[1:]:
        packs[tag] = cipher.translate_pack(english, tag)
    return packs


def synthetic_splits(recipe: DeskRecipe) -> CorpusSplits:
    cfg = recipe.synth()
    return CorpusSplits(synth_corpus(cfg, "train", recipe.train_per_class),
                        synth_corpus(cfg, "dev", recipe.dev_per_class),
                        synth_corpus(cfg, "test", recipe.test_per_class))


def pretraining_text(recipe: DeskRecipe) -> list[str]:
    """Unlabelled sentences from a dedicated split, monolingual plus code-switched copies."""
    cfg = recipe.synth()
    corpus = synth_corpus(cfg, "pretrain", recipe.pretrain_pairs_per_class)
    cipher = make_cipher(cfg)
    tags = cfg.language_tags()
    rng = make_rng([recipe.seed, 11])
    sentences = []
    for ex in corpus:
        sentences += [ex.premise, ex.hypothesis]
    for ex in corpus.examples("en"):
        for text in (ex.premise, ex.hypothesis):
            for _ in range(recipe.code_switch_copies):
                words = [cipher.translate(w, tags[int(rng.integers(len(tags)))]) for w in text.split()]
                sentences.append(" ".join(words))
    order = rng.permutation(len(sentences))
    return [sentences[i] for i in order]


def desk_vocab(sentences: list[str], packs: dict[str, PackFile]) -> Vocabulary:
    lines = list(sentences)
    for pf in packs.values():
        for method in pf.templates:
            lines.append(" ".join(pf.pack(method).words()))
    return build_vocab(lines, size_cap=4096)


def build_desk_lab(recipe: DeskRecipe | None = None, logger=None) -> DeskLab:
    recipe = recipe or DeskRecipe()
    cfg = recipe.synth()
    packs = synthetic_packs(cfg)
    data = synthetic_splits(recipe)
    sentences = pretraining_text(recipe)
    vocab = desk_vocab(sentences, packs)
    model = MaskedLM(ModelConfig(len(vocab), d=recipe.d, layers=recipe.layers, heads=recipe.heads,
                                 max_len=64), seed=recipe.seed)
    log = pretrain_mlm(model, [encode(s, vocab) for s in sentences], vocab, recipe.pretrain_steps,
                       seed=recipe.seed, batch_size=recipe.pretrain_batch, lr=recipe.pretrain_lr,
                       log_every=500 if logger else 0, logger=logger)
    return DeskLab(Lab(vocab, model, data, packs), log, sentences)
