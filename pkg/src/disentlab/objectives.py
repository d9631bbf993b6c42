"""Training losses: masked prediction, two-view contrastive loss, their weighted sum."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as tn
from .errors import ContractError, DimensionError
from .tensor import Tensor

log = logging.getLogger(__name__)

CONTRASTIVE_FORMS = ("ntxent", "literal")


@dataclass
class ContrastiveConfig:
    temperature: float = 0.1
    num_negatives: int = 20
    tap_layer: Optional[int] = None
    apply_to_all_frames: bool = True
    form: str = "ntxent"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ContractError("contrastive temperature must be > 0")
        if self.num_negatives < 1:
            raise ContractError("num_negatives must be >= 1")
        if self.form not in CONTRASTIVE_FORMS:
            raise ContractError(f"contrastive form must be one of {CONTRASTIVE_FORMS}")


@dataclass
class LambdaSchedule:
    """Contrastive weight ramp: lambda_max * min(step / total_steps, 1)."""

    lambda_max: float = 10.0
    total_steps: int = 3000

    def __call__(self, step: int) -> float:
        if step < 0:
            raise ContractError("step must be >= 0")
        return self.lambda_max * min(step / self.total_steps, 1.0)


def masked_prediction_loss(logits1: Tensor, logits2: Optional[Tensor], labels, mask1,
                           mask2=None) -> Tensor:
    """Cross-entropy over masked frames, averaged over the available views.

    Each view carries its own mask; ``mask2`` defaults to ``mask1``.
    With ``logits2=None`` only one view is scored.
    """
    loss = tn.cross_entropy_logits(logits1, labels, mask1)
    if logits2 is None:
        return loss
    loss2 = tn.cross_entropy_logits(logits2, labels, mask1 if mask2 is None else mask2)
    return (loss + loss2) * 0.5


def sample_negatives(T: int, t: int, num_negatives: int, rng: np.random.Generator) -> np.ndarray:
    """Negative time indices for anchor ``t``: uniform without replacement, never ``t``."""
    if not 0 <= t < T:
        raise IndexError(f"anchor {t} outside [0, {T})")
    return sample_negatives_all(T, num_negatives, rng)[t]


def sample_negatives_all(T: int, num_negatives: int, rng: np.random.Generator) -> np.ndarray:
    """Negative sets for every anchor at once, shape (T, min(num_negatives, T-1))."""
    if T < 2:
        raise ContractError("need at least two frames to draw negatives")
    n = num_negatives
    if n > T - 1:
        log.info("only %d frames: reducing negatives from %d to %d", T, n, T - 1)
        n = T - 1
    order = np.argsort(rng.random((T, T - 1)), axis=1, kind="stable")[:, :n]
    return order + (order >= np.arange(T)[:, None])


def batch_negatives(lengths, num_negatives: int, rng: np.random.Generator):
    """Padded negative indices (B, Tmax, N) and a validity mask of the same shape."""
    B, Tmax = len(lengths), max(lengths)
    idx = np.zeros((B, Tmax, num_negatives), dtype=np.int64)
    ok = np.zeros((B, Tmax, num_negatives), dtype=bool)
    for b, T in enumerate(lengths):
        neg = sample_negatives_all(T, num_negatives, rng)
        idx[b, :T, :neg.shape[1]] = neg
        ok[b, :T, :neg.shape[1]] = True
    # padding rows point at a frame other than themselves to stay well-formed
    pad_t = np.arange(Tmax)[None, :, None]
    idx = np.where(ok, idx, np.where(pad_t == 0, 1, 0))
    return idx, ok


def contrastive_loss(R1: Tensor, R2: Tensor, neg_idx, k: float = 0.1, valid=None,
                     neg_valid=None, form: str = "ntxent") -> Tensor:
    """Symmetric two-view contrastive loss over all (valid) frames.

    For each frame t and direction (a, b) in {(1, 2), (2, 1)}::

        -log exp(cos(Ra_t, Rb_t)/k) /
             (exp(cos(Ra_t, Rb_t)/k) + sum_{tau in I_t} exp(cos(Ra_t, Ra_tau)/k))

    averaged over frames and directions. ``form="literal"`` evaluates the
    un-logged ratio with ``{t} U I_t`` in the denominator instead, for
    comparison only (minimizing it pushes views apart).
    """
    if R1.shape != R2.shape:
        raise DimensionError(f"views have different shapes {R1.shape} and {R2.shape}")
    squeeze = R1.ndim == 2
    if squeeze:
        R1 = R1.reshape(1, *R1.shape)
        R2 = R2.reshape(1, *R2.shape)
        neg_idx = np.asarray(neg_idx)[None]
        valid = None if valid is None else np.asarray(valid)[None]
        neg_valid = None if neg_valid is None else np.asarray(neg_valid)[None]
    B, T, _ = R1.shape
    neg_idx = np.asarray(neg_idx, dtype=np.int64)
    if neg_idx.shape[:2] != (B, T):
        raise DimensionError(f"negative indices of shape {neg_idx.shape} do not match {R1.shape}")
    valid = np.ones((B, T), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    neg_valid = (np.ones(neg_idx.shape, dtype=bool) if neg_valid is None
                 else np.asarray(neg_valid, dtype=bool))
    if neg_idx.min() < 0 or neg_idx.max() >= T:
        raise IndexError(f"negative indices must lie in [0, {T})")
    live = neg_valid & valid[..., None]
    if np.any((neg_idx == np.arange(T)[None, :, None]) & live):
        raise ContractError("an anchor appears in its own negative set")

    n1, n2 = tn.l2_normalize(R1), tn.l2_normalize(R2)
    pos = (n1 * n2).sum(axis=-1)
    w = valid.astype(R1.dtype) / (2.0 * valid.sum())
    total = None
    for na in (n1, n2):
        sims = tn.gather(na @ na.transpose(0, 2, 1), neg_idx, axis=-1)
        if form == "ntxent":
            bias = np.where(neg_valid, 0.0, -1e9).astype(R1.dtype)
            logits = tn.concat([pos.reshape(B, T, 1) * (1.0 / k), sims * (1.0 / k) + bias],
                               axis=-1)
            per_t = -tn.log_softmax(logits, axis=-1)[..., 0]
        elif form == "literal":
            selfsim = (na * na).sum(axis=-1)
            den = tn.exp(selfsim * (1.0 / k)) + (tn.exp(sims * (1.0 / k)) * neg_valid).sum(axis=-1)
            per_t = tn.exp(pos * (1.0 / k)) / den
        else:
            raise ContractError(f"unknown contrastive form {form!r}")
        term = (per_t * w).sum()
        total = term if total is None else total + term
    return total


def combined_loss(pred_loss: Tensor, contr_loss: Optional[Tensor], step: int,
                  schedule: LambdaSchedule) -> Tensor:
    lam = schedule(step)
    if contr_loss is None:
        return pred_loss
    return pred_loss + contr_loss * lam
