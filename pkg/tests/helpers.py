"""Finite-difference gradient oracle shared by the test modules."""

from __future__ import annotations

import numpy as np

from xlprompt import autodiff as ad

H = 1e-3
TOL = 1e-4


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitudes."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_grad(f, t: ad.Tensor, entries) -> np.ndarray:
    out = np.empty(len(entries))
    for k, idx in enumerate(entries):
        old = t.data[idx]
        t.data[idx] = old + H
        plus = f().item()
        t.data[idx] = old - H
        minus = f().item()
        t.data[idx] = old
        out[k] = (plus - minus) / (2 * H)
    return out


def gradcheck(f, tensors: dict[str, ad.Tensor], max_entries: int = 40, seed: int = 0) -> dict[str, float]:
    """Relative error per tensor of analytic vs central-difference gradients.

    ``f`` rebuilds the scalar loss from the current tensor values; tensors must
    be float64. Large tensors are checked on a random subset of entries.
    """
    for t in tensors.values():
        assert t.data.dtype == np.float64, "gradient checks run in 64-bit"
        t.requires_grad = True
        t.grad = None
    ad.backward(f())
    rng = np.random.default_rng(seed)
    errors = {}
    for name, t in tensors.items():
        all_idx = list(np.ndindex(t.shape))
        if len(all_idx) > max_entries:
            all_idx = [all_idx[i] for i in rng.choice(len(all_idx), max_entries, replace=False)]
        analytic = np.array([t.grad[i] for i in all_idx]) if t.grad is not None else np.zeros(len(all_idx))
        errors[name] = rel_error(analytic, numeric_grad(f, t, all_idx))
    return errors


def weighted_sum(out: ad.Tensor, seed: int = 99) -> ad.Tensor:
    """Reduce a tensor to a scalar with fixed random weights (a generic loss)."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return (out * ad.Tensor(w, dtype=np.float64)).sum()
