"""Training losses: in-batch negatives, external negatives, masked-token and
binary next-utterance objectives."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

# training batch size for cross-style external negatives: 15 negatives + 1 gold
DEFAULT_EXTERNAL_CANDIDATES = 16


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of each row of `logits` against its target column."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"need [B,N] logits and B targets, got {logits.shape} / {targets.shape}")
    lsm = T.log_softmax(logits)
    picked = T.take_pairs(lsm, np.arange(len(targets)), targets)
    return T.neg(T.tmean(picked))


def in_batch_loss(y_ctxt: Tensor, y_cand: Tensor) -> tuple[Tensor, Tensor]:
    """Score every context against every in-batch candidate; diagonal is gold.

    Returns (mean cross-entropy, the [B,B] logits).
    """
    if y_ctxt.data.ndim != 2 or y_ctxt.shape != y_cand.shape:
        raise ShapeError(f"need matching [B,H] embeddings, got {y_ctxt.shape} / {y_cand.shape}")
    b = y_ctxt.shape[0]
    if b < 2:
        raise ContractError(f"in-batch negatives need batch size >= 2, got {b}")
    logits = T.matmul(y_ctxt, T.transpose(y_cand))
    return cross_entropy_rows(logits, np.arange(b)), logits


def nll_from_logits(logits: Tensor, target: int) -> Tensor:
    """Negative log-likelihood of one target under a softmax over a vector."""
    n = logits.shape[0]
    if not 0 <= target < n:
        raise ContractError(f"target {target} out of range for {n} logits")
    row = T.reshape(logits, (1, n))
    return T.neg(T.reshape(T.take_pairs(T.log_softmax(row), [0], [target]), ()))


def external_neg_loss(scores: Tensor, correct_index: int = 0) -> Tensor:
    """Softmax cross-entropy over gold-plus-sampled-negative scores."""
    if scores.data.ndim != 1:
        raise ShapeError(f"scores must be a vector, got shape {scores.shape}")
    if scores.shape[0] < 2:
        raise ContractError(f"external negatives need >= 2 candidates, got {scores.shape[0]}")
    return nll_from_logits(scores, correct_index)


def binary_choice_loss(score: Tensor, label: int) -> Tensor:
    """Logistic loss on one scalar score: label 1 means 'is the continuation'."""
    if label not in (0, 1):
        raise ContractError(f"label must be 0 or 1, got {label}")
    zero = Tensor(np.zeros((), dtype=score.dtype))
    return nll_from_logits(T.stack([zero, T.reshape(score, ())]), label)


def masked_token_loss(logits: Tensor, target_ids) -> Tensor:
    """Mean cross-entropy over [T, vocab] logits at the corrupted positions."""
    return cross_entropy_rows(logits, target_ids)
