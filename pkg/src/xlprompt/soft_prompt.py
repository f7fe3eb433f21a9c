"""Trainable soft prompts reparameterized through a bidirectional LSTM.

The raw vectors v_1..v_m run through a single-layer bidirectional LSTM with
hidden size d per direction. At each position the forward and backward
hidden states are concatenated (2d) and mapped back to d by an affine
projection. Each direction has one bias per gate, so the parameter counts are

    LSTM   2 * 4 * (d*d + d*d + d)
    MLP    2*d*d + d
    raw    m * d
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, make_rng
from .prompts import AssembledExample

RAW_INIT_STD = 0.02


class ParamCount(NamedTuple):
    lstm: int
    mlp: int
    vectors: int

    @property
    def total(self) -> int:
        return self.lstm + self.mlp + self.vectors


def expected_param_count(m: int, d: int) -> ParamCount:
    return ParamCount(2 * 4 * (d * d + d * d + d), d * 2 * d + d, m * d)


@dataclass
class SoftPromptBank:
    m: int
    d: int
    params: dict[str, Tensor]

    def lstm_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("lstm.")}

    def mlp_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("mlp.")}

    def clone(self) -> "SoftPromptBank":
        return SoftPromptBank(self.m, self.d, {k: Tensor(v.data.copy(), dtype=v.data.dtype.type)
                                               for k, v in self.params.items()})

    def astype_(self, dtype):
        ad.cast_params(self.params.values(), dtype)
        return self


def init_bank(m: int, d: int, seed: int) -> SoftPromptBank:
    """Raw vectors ~ N(0, 0.02^2); LSTM and MLP weights ~ U(-1/sqrt(d), 1/sqrt(d))."""
    if m <= 0 or d <= 0:
        raise ValueError("soft prompt count and dimension must be positive")
    rng = make_rng(seed)
    bound = 1.0 / math.sqrt(d)

    def uniform(*shape):
        return Tensor(rng.uniform(-bound, bound, size=shape))

    params = {"raw": Tensor(rng.normal(0.0, RAW_INIT_STD, size=(m, d)))}
    for direction in ("fwd", "bwd"):
        # gate column blocks: input, forget, cell, output
        params[f"lstm.{direction}.w_ih"] = uniform(d, 4 * d)
        params[f"lstm.{direction}.w_hh"] = uniform(d, 4 * d)
        params[f"lstm.{direction}.b"] = uniform(4 * d)
    params["mlp.w"] = uniform(2 * d, d)
    params["mlp.b"] = uniform(d)
    return SoftPromptBank(m, d, params)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step on row vectors (1, d)."""
    d = h.shape[-1]
    gates = x @ w_ih + h @ w_hh + b
    i = ad.sigmoid(gates[:, 0:d])
    f = ad.sigmoid(gates[:, d:2 * d])
    g = ad.tanh(gates[:, 2 * d:3 * d])
    o = ad.sigmoid(gates[:, 3 * d:4 * d])
    c = f * c + i * g
    h = o * ad.tanh(c)
    return h, c


def _run_direction(xs: list[Tensor], w_ih, w_hh, b, d, dtype) -> list[Tensor]:
    h = Tensor(np.zeros((1, d)), dtype=dtype)
    c = Tensor(np.zeros((1, d)), dtype=dtype)
    out = []
    for x in xs:
        h, c = lstm_cell(x, h, c, w_ih, w_hh, b)
        out.append(h)
    return out


def reparameterize(bank: SoftPromptBank) -> Tensor:
    """Effective soft-prompt embeddings, shape (m, d)."""
    p, d = bank.params, bank.d
    raw = p["raw"]
    dtype = raw.dtype.type
    xs = [raw[i:i + 1] for i in range(bank.m)]
    fwd = _run_direction(xs, p["lstm.fwd.w_ih"], p["lstm.fwd.w_hh"], p["lstm.fwd.b"], d, dtype)
    bwd = _run_direction(xs[::-1], p["lstm.bwd.w_ih"], p["lstm.bwd.w_hh"], p["lstm.bwd.b"], d, dtype)[::-1]
    states = ad.concat([ad.concat([f, b], axis=1) for f, b in zip(fwd, bwd)], axis=0)
    return states @ p["mlp.w"] + p["mlp.b"]


def param_count(bank: SoftPromptBank) -> ParamCount:
    """Count parameters by enumerating the bank's tensors."""
    lstm = sum(t.data.size for t in bank.lstm_params().values())
    mlp = sum(t.data.size for t in bank.mlp_params().values())
    return ParamCount(lstm, mlp, bank.params["raw"].data.size)


def _soft_indices(bank: SoftPromptBank, n_positions: int, order=None) -> list[int]:
    if n_positions not in (0, bank.m):
        raise ValueError(f"example has {n_positions} soft positions; bank holds {bank.m}")
    return list(order) if order is not None else list(range(n_positions))


def inject(bank: SoftPromptBank, example: AssembledExample, vectors: Tensor | None = None,
           order=None) -> dict[int, Tensor]:
    """Map each soft position of ``example`` to its reparameterized vector.

    ``order`` gives the vector index per soft position (template order by
    default); ``vectors`` reuses an already computed ``reparameterize`` output.
    """
    idx = _soft_indices(bank, len(example.soft_positions), order)
    if not idx:
        return {}
    vectors = reparameterize(bank) if vectors is None else vectors
    return {pos: vectors[k] for pos, k in zip(example.soft_positions, idx)}


def batch_overrides(bank: SoftPromptBank | None, examples: list[AssembledExample], order=None,
                    vectors: Tensor | None = None):
    """Override triple for ``MaskedLM.hidden`` covering a whole batch, or None."""
    if bank is None:
        if any(ex.soft_positions for ex in examples):
            raise ValueError("examples contain soft positions but no soft prompt bank was given")
        return None
    bi, pi, rows = [], [], []
    for b, ex in enumerate(examples):
        idx = _soft_indices(bank, len(ex.soft_positions), order)
        bi += [b] * len(idx)
        pi += ex.soft_positions
        rows += idx
    if not rows:
        return None
    vectors = reparameterize(bank) if vectors is None else vectors
    return np.array(bi), np.array(pi), vectors[np.array(rows)]
