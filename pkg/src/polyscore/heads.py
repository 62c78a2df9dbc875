"""Bi-, Cross- and Poly-encoder scoring heads over transformer outputs.

All heads are pure given weights. Reduction kinds are carried as strings so
they serialize directly into checkpoint headers: "first", "avg_all" or
"avg_first:<m>". Poly variants: "learnt", "first_m", "last_m", "last_m_h1".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import TransformerOutput, TransformerWeights, forward
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor
from .text import TokenizedPair

REDUCTION_FIRST = "first"
REDUCTION_AVG_ALL = "avg_all"
POLY_VARIANTS = ("learnt", "first_m", "last_m", "last_m_h1")


def parse_reduction(kind: str) -> tuple[str, int | None]:
    """Validate a reduction spec string; returns (base kind, m or None)."""
    if kind in (REDUCTION_FIRST, REDUCTION_AVG_ALL):
        return kind, None
    if kind.startswith("avg_first:"):
        m = int(kind.split(":", 1)[1])
        if m < 1:
            raise ConfigError(f"avg_first reduction needs m >= 1, got {m}")
        return "avg_first", m
    raise ConfigError(f"unknown reduction kind {kind!r}")


def _mean_rows(rows: Tensor) -> Tensor:
    n = rows.shape[0]
    ones = Tensor(np.ones((1, n), dtype=rows.dtype))
    return T.reshape(T.scale(T.matmul(ones, rows), 1.0 / n), (rows.shape[1],))


def reduce_output(out: TransformerOutput, kind: str) -> Tensor:
    """Collapse h_1..h_N to one vector; averages ignore pad positions."""
    base, m = parse_reduction(kind)
    n = out.n_real
    if n < 1:
        raise ContractError("reduce needs at least one non-pad position")
    h = out.hidden_states
    if base == REDUCTION_FIRST:
        return T.reshape(T.slice_rows(h, 0, 1), (h.shape[1],))
    stop = n if base == REDUCTION_AVG_ALL else min(m, n)
    return _mean_rows(T.slice_rows(h, 0, stop))


def bi_score(y_ctxt: Tensor, y_cand: Tensor) -> Tensor:
    """Dot-product score between one context vector and one candidate vector."""
    return T.dot(y_ctxt, y_cand)


@dataclass(frozen=True)
class CrossHead:
    """Final linear layer mapping the joint embedding to a scalar score."""

    w: Tensor  # [hidden, 1]

    def __post_init__(self):
        if self.w.data.ndim != 2 or self.w.shape[1] != 1:
            raise ShapeError(f"cross head weight must be [hidden, 1], got {self.w.shape}")


def cross_score(pair: TokenizedPair, w: TransformerWeights, head: CrossHead,
                train_mode: bool = False, rng=None) -> Tensor:
    """Jointly encode (context, candidate) and score the first output."""
    out = forward(pair, w, train_mode=train_mode, rng=rng)
    h1 = T.slice_rows(out.hidden_states, 0, 1)
    return T.reshape(T.matmul(h1, head.w), ())


@dataclass
class PolyHeadState:
    """Variant selector plus the learnt context codes when applicable."""

    variant: str
    m: int
    codes: Tensor | None = None  # [m, hidden], learnt variant only

    def __post_init__(self):
        if self.variant not in POLY_VARIANTS:
            raise ConfigError(f"unknown poly variant {self.variant!r}")
        if self.m < 1:
            raise ConfigError(f"poly head needs m >= 1, got {self.m}")
        if self.variant == "learnt":
            if self.codes is None or self.codes.shape != (self.m, self.codes.shape[1]):
                raise ShapeError("learnt variant needs a codes tensor with m rows")
        elif self.codes is not None:
            raise ConfigError(f"variant {self.variant!r} takes no codes tensor")


def init_codes(m: int, hidden: int, rng: np.random.Generator, dtype=np.float64) -> Tensor:
    """Context codes start i.i.d. normal(0, 0.02), BERT-style."""
    return Tensor(rng.normal(0.0, 0.02, size=(m, hidden)).astype(dtype), requires_grad=True)


def poly_context_vectors(out: TransformerOutput, st: PolyHeadState) -> Tensor:
    """Extract the m' context vectors for one encoded context.

    learnt: each code attends over all non-pad outputs. first_m / last_m:
    min(m, N) raw output rows. last_m_h1: those rows prepended with h_1
    (h_1 may duplicate when N <= m).
    """
    n = out.n_real
    if n < 1:
        raise ContractError("poly head needs at least one non-pad position")
    h = T.slice_rows(out.hidden_states, 0, n) if n < out.hidden_states.shape[0] else out.hidden_states
    if st.variant == "learnt":
        logits = T.matmul(st.codes, T.transpose(h))  # [m, N], unscaled dot products
        weights = T.softmax(logits)
        return T.matmul(weights, h)
    mm = min(st.m, n)
    if st.variant == "first_m":
        return T.slice_rows(h, 0, mm)
    last = T.slice_rows(h, n - mm, n)
    if st.variant == "last_m":
        return last
    return T.concat_rows([T.slice_rows(h, 0, 1), last])


def poly_score(ctxt_vecs: Tensor, y_cand: Tensor) -> Tensor:
    """Attend over context vectors with the candidate as query, then dot."""
    m = ctxt_vecs.shape[0]
    hid = ctxt_vecs.shape[1]
    if y_cand.shape != (hid,):
        raise ShapeError(f"candidate vector {y_cand.shape} does not match context vectors {ctxt_vecs.shape}")
    logits = T.reshape(T.matmul(ctxt_vecs, T.reshape(y_cand, (hid, 1))), (m,))
    w = T.softmax(logits)
    pooled = T.reshape(T.matmul(T.reshape(w, (1, m)), ctxt_vecs), (hid,))
    return T.dot(pooled, y_cand)
