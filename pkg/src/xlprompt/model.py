"""Compact transformer encoder with an MLM head and an attachable classifier head.

Post-LN blocks (BERT/RoBERTa layout): embeddings -> LayerNorm, then per block
``x = LN(x + attn(x)); x = LN(x + ffn(x))``. The MLM head is dense -> GELU ->
LayerNorm -> projection onto the (tied) token embedding table plus a bias.

Soft prompts enter through *overrides*: rows of the token-embedding output are
replaced by supplied vectors before position embeddings are added, which is
the lowest embedding layer of the model.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, make_rng
from .tokenizer import DEFAULT_MAX_LEN, Vocabulary

NUM_LABELS = 3
INIT_STD = 0.02
_NEG_INF = -1e9


@dataclass
class ModelConfig:
    vocab_size: int
    d: int = 64
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    max_len: int = DEFAULT_MAX_LEN
    tie_output: bool = True
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("vocab_size", "d", "layers", "heads", "ffn_mult", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.d % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide d ({self.d})")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


def _normal(rng, shape, std=INIT_STD):
    return Tensor(rng.normal(0.0, std, size=shape))


def _zeros(shape):
    return Tensor(np.zeros(shape))


def _ones(shape):
    return Tensor(np.ones(shape))


class MaskedLM:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = make_rng(seed)
        d, f, V = config.d, config.d * config.ffn_mult, config.vocab_size
        p: dict[str, Tensor] = {
            "tok_emb": _normal(rng, (V, d)),
            "pos_emb": _normal(rng, (config.max_len, d)),
            "emb_ln.g": _ones(d),
            "emb_ln.b": _zeros(d),
        }
        for i in range(config.layers):
            pre = f"layer{i}."
            for proj in ("q", "k", "v", "o"):
                p[pre + proj + ".w"] = _normal(rng, (d, d))
                p[pre + proj + ".b"] = _zeros(d)
            p[pre + "ln1.g"], p[pre + "ln1.b"] = _ones(d), _zeros(d)
            p[pre + "ffn.w1"], p[pre + "ffn.b1"] = _normal(rng, (d, f)), _zeros(f)
            p[pre + "ffn.w2"], p[pre + "ffn.b2"] = _normal(rng, (f, d)), _zeros(d)
            p[pre + "ln2.g"], p[pre + "ln2.b"] = _ones(d), _zeros(d)
        p["head.dense.w"], p["head.dense.b"] = _normal(rng, (d, d)), _zeros(d)
        p["head.ln.g"], p["head.ln.b"] = _ones(d), _zeros(d)
        p["head.bias"] = _zeros(V)
        if not config.tie_output:
            p["head.out.w"] = _normal(rng, (d, V))
        self.params = p

    # -- parameter bookkeeping -----------------------------------------------
    def encoder_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if not k.startswith("head.")}

    def mlm_params(self) -> dict[str, Tensor]:
        return dict(self.params)

    def clone(self) -> "MaskedLM":
        other = copy.copy(self)
        other.config = copy.deepcopy(self.config)
        other.params = {k: Tensor(v.data.copy(), dtype=v.data.dtype.type) for k, v in self.params.items()}
        return other

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]):
        if set(state) != set(self.params):
            raise ValueError(f"state keys differ: {sorted(set(state) ^ set(self.params))}")
        for k, arr in state.items():
            if arr.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {arr.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=self.params[k].data.dtype)

    def astype_(self, dtype):
        ad.cast_params(self.params.values(), dtype)
        return self

    # -- forward -------------------------------------------------------------
    def hidden(self, ids, attn_mask=None, overrides=None, rng=None) -> Tensor:
        """Encode a padded batch ``ids`` (B, T) into hidden states (B, T, d).

        ``overrides`` is ``(batch_idx, pos_idx, values)`` with ``values`` of
        shape (n, d); those token-embedding rows are replaced exactly.
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ad.ShapeError(f"hidden: ids must be (B, T), got {ids.shape}")
        cfg, p = self.config, self.params
        B, T = ids.shape
        if T > cfg.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len {cfg.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
        x = ad.embedding(p["tok_emb"], ids)
        if overrides is not None:
            bi, pi, values = overrides
            pi = np.asarray(pi, dtype=np.int64)
            if pi.size and (pi.min() < 0 or pi.max() >= T):
                raise ValueError(f"override position outside [0, {T})")
            x = ad.replace_rows(x, bi, pi, values)
        x = x + p["pos_emb"][:T]
        x = ad.layer_norm(x, p["emb_ln.g"], p["emb_ln.b"])
        x = self._dropout(x, rng)
        if attn_mask is None:
            attn_mask = np.ones((B, T), dtype=bool)
        bias = np.where(np.asarray(attn_mask, dtype=bool), 0.0, _NEG_INF).reshape(B, 1, 1, T)
        bias = Tensor(bias, dtype=x.dtype.type)
        for i in range(cfg.layers):
            x = self._block(x, f"layer{i}.", bias, rng)
        return x

    def _dropout(self, x, rng):
        rate = self.config.dropout
        if rng is None or rate == 0.0:
            return x
        keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
        return x * Tensor(keep, dtype=x.dtype.type)

    def _block(self, x, pre, bias, rng):
        p, cfg = self.params, self.config
        B, T, d = x.shape
        H = cfg.heads
        dh = d // H

        def heads(t):
            return t.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        q = heads(x @ p[pre + "q.w"] + p[pre + "q.b"])
        k = heads(x @ p[pre + "k.w"] + p[pre + "k.b"])
        v = heads(x @ p[pre + "v.w"] + p[pre + "v.b"])
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)) + bias
        att = ad.softmax(scores)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
        a = self._dropout(ctx @ p[pre + "o.w"] + p[pre + "o.b"], rng)
        x = ad.layer_norm(x + a, p[pre + "ln1.g"], p[pre + "ln1.b"])
        h = ad.gelu(x @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"])
        h = self._dropout(h @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"], rng)
        return ad.layer_norm(x + h, p[pre + "ln2.g"], p[pre + "ln2.b"])

    def mlm_logits(self, h: Tensor) -> Tensor:
        """Project hidden states (..., d) to vocabulary logits (..., V)."""
        p = self.params
        z = ad.gelu(h @ p["head.dense.w"] + p["head.dense.b"])
        z = ad.layer_norm(z, p["head.ln.g"], p["head.ln.b"])
        w = p["tok_emb"].transpose() if self.config.tie_output else p["head.out.w"]
        if z.ndim == 1:
            return (z.reshape(1, -1) @ w).reshape(-1) + p["head.bias"]
        return z @ w + p["head.bias"]


class ClassifierHead:
    """Linear map d -> 3 over the first-position (<s>) hidden state."""

    def __init__(self, d: int, seed: int = 0, zero: bool = False):
        rng = make_rng(seed)
        self.params = {
            "w": _zeros((d, NUM_LABELS)) if zero else _normal(rng, (d, NUM_LABELS)),
            "b": _zeros(NUM_LABELS),
        }

    def __call__(self, h0: Tensor) -> Tensor:
        return h0 @ self.params["w"] + self.params["b"]


# -- single-sequence entry points --------------------------------------------

def overrides_from_map(overrides: Mapping[int, object] | None, batch: int = 0):
    if not overrides:
        return None
    positions = sorted(overrides)
    rows = []
    for pos in positions:
        v = overrides[pos]
        rows.append(v.reshape(1, -1) if isinstance(v, Tensor) else Tensor(np.asarray(v).reshape(1, -1)))
    return np.full(len(positions), batch), np.array(positions), ad.concat(rows, axis=0)


def forward_mlm(model: MaskedLM, ids: Sequence[int], overrides: Mapping[int, object] | None = None) -> Tensor:
    """Logits (T, |V|) for one sequence; positions in ``overrides`` bypass the embedding lookup."""
    ids = np.asarray(ids, dtype=np.int64).reshape(1, -1)
    if overrides:
        bad = [pos for pos in overrides if not 0 <= pos < ids.shape[1]]
        if bad:
            raise ValueError(f"override positions {bad} outside [0, {ids.shape[1]})")
    h = model.hidden(ids, overrides=overrides_from_map(overrides))
    return model.mlm_logits(h).reshape(ids.shape[1], -1)


def forward_cls(model: MaskedLM, head: ClassifierHead, ids: Sequence[int]) -> Tensor:
    """Three class logits for one sequence."""
    ids = np.asarray(ids, dtype=np.int64).reshape(1, -1)
    return cls_logits(model, head, ids, None).reshape(NUM_LABELS)


def cls_logits(model: MaskedLM, head: ClassifierHead, ids, attn_mask, rng=None) -> Tensor:
    h = model.hidden(ids, attn_mask=attn_mask, rng=rng)
    return head(h[:, 0, :])


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the longest sequence; returns (ids, attention mask)."""
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


# -- pretraining -------------------------------------------------------------

@dataclass
class PretrainLog:
    steps: int
    losses: list[float] = field(default_factory=list)
    heldout_before: float = float("nan")
    heldout_after: float = float("nan")
    heldout_acc_after: float = float("nan")


def _mask_batch(seqs, vocab: Vocabulary, mask_rate, rng):
    """80/10/10 corruption; at least one position per sequence is selected."""
    ids, attn = pad_batch([[vocab.bos_id, *s, vocab.eos_id] for s in seqs], vocab.pad_id)
    inner = attn.copy()
    inner[:, 0] = False
    lengths = attn.sum(axis=1)
    inner[np.arange(len(seqs)), lengths - 1] = False
    chosen = (rng.random(ids.shape) < mask_rate) & inner
    for i in np.flatnonzero(~chosen.any(axis=1)):
        cand = np.flatnonzero(inner[i])
        chosen[i, cand[rng.integers(len(cand))]] = True
    roll = rng.random(ids.shape)
    corrupted = ids.copy()
    natural = np.asarray(vocab.natural_ids)
    corrupted[chosen & (roll < 0.8)] = vocab.mask_id
    rand_pos = chosen & (roll >= 0.8) & (roll < 0.9)
    corrupted[rand_pos] = natural[rng.integers(len(natural), size=int(rand_pos.sum()))]
    bi, pi = np.nonzero(chosen)
    return corrupted, attn, bi, pi, ids[bi, pi]


def mlm_loss(model: MaskedLM, corrupted, attn, bi, pi, targets, rng=None) -> tuple[Tensor, np.ndarray]:
    h = model.hidden(corrupted, attn_mask=attn, rng=rng)
    logits = model.mlm_logits(h[bi, pi])
    return ad.cross_entropy(logits, targets), logits.data


def pretrain_mlm(model: MaskedLM, corpus: Sequence[Sequence[int]], vocab: Vocabulary, steps: int,
                 mask_rate: float = 0.15, seed: int = 0, batch_size: int = 32, lr: float = 1e-3,
                 heldout_frac: float = 0.05, log_every: int = 0, logger=None) -> PretrainLog:
    """Masked-language-model training on tokenised sentences (no bos/eos)."""
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    if not 0.0 < mask_rate < 1.0:
        raise ValueError("mask_rate must lie in (0, 1)")
    corpus = [list(s) for s in corpus if len(s) > 0]
    n_held = max(1, int(len(corpus) * heldout_frac)) if len(corpus) > 1 else 0
    train, held = (corpus[:-n_held], corpus[-n_held:]) if n_held else (corpus, corpus)
    held = held[:256]
    held_batch = _mask_batch(held, vocab, mask_rate, make_rng([seed, 1]))

    def held_eval():
        loss, logits = mlm_loss(model, *held_batch)
        return loss.item(), float((logits.argmax(-1) == held_batch[-1]).mean())

    log = PretrainLog(steps=steps)
    log.heldout_before, _ = held_eval()
    rng = make_rng([seed, 0])
    group = ad.ParamGroup(model.mlm_params())
    for step in range(steps):
        idx = rng.integers(len(train), size=min(batch_size, len(train)))
        batch = _mask_batch([train[i] for i in idx], vocab, mask_rate, rng)
        loss, _ = mlm_loss(model, *batch, rng=rng)
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"pretraining loss is {loss.item()} at step {step}")
        ad.backward(loss)
        ad.adam_step(group, lr)
        log.losses.append(loss.item())
        if logger and log_every and (step + 1) % log_every == 0:
            logger(f"step {step + 1}/{steps} loss {np.mean(log.losses[-log_every:]):.4f}")
    for p in group.params.values():
        p.requires_grad = False
        p.grad = None
    log.heldout_after, log.heldout_acc_after = held_eval()
    return log


# -- checkpoint file ---------------------------------------------------------
# Layout (all integers little-endian):
#   8 bytes  magic  b"XLPCKPT\0"
#   u32      format version (1)
#   u32      length of the config block, then that many bytes of UTF-8 JSON
#   u32      number of tensors, then per tensor:
#              u16 name length, UTF-8 name, u8 ndim, u32 * ndim dims,
#              prod(dims) float32 values (little-endian, C order)

MAGIC = b"XLPCKPT\0"
VERSION = 1


def save_checkpoint(path, config: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    blob = json.dumps(config, sort_keys=True, ensure_ascii=False).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        return _parse_checkpoint(Path(path).read_bytes(), path)
    except (struct.error, IndexError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: truncated or corrupt checkpoint ({exc})") from None


def _parse_checkpoint(buf: bytes, path) -> tuple[dict, dict[str, np.ndarray]]:
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, n = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    config = json.loads(buf[off:off + n].decode("utf-8"))
    off += n
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + name_len].decode("utf-8")
        off += name_len
        ndim = buf[off]
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        if off + 4 * size > len(buf):
            raise ValueError(f"{path}: tensor {name!r} runs past the end of the file")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return config, tensors


def save_model(path, model: MaskedLM, extra: Mapping | None = None, extra_tensors=None) -> None:
    config = {"model": asdict(model.config), **(extra or {})}
    tensors = {"model." + k: v for k, v in model.state().items()}
    tensors.update(extra_tensors or {})
    save_checkpoint(path, config, tensors)


def load_model(path) -> tuple[MaskedLM, dict, dict[str, np.ndarray]]:
    """Return (model, remaining config, tensors not belonging to the model)."""
    config, tensors = load_checkpoint(path)
    model = MaskedLM(ModelConfig(**config.pop("model")))
    model.load_state({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    rest = {k: v for k, v in tensors.items() if not k.startswith("model.")}
    return model, config, rest
