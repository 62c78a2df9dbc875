"""The shared transformer encoder: embedding sum plus post-norm block stack.

Architecture follows original BERT-base block ordering (attention, residual,
layer norm, GELU feed-forward, residual, layer norm) with an embedding layer
norm up front; dimensions come from ModelConfig so both the desk default and
BERT-base sizes are expressible. Attention logits at pad key positions are
forced to -inf before the softmax, so pad rows never leak into real ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor
from .text import TokenizedPair

INIT_STD = 0.02
LN_EPS = 1e-12

# desk defaults: small enough that every property is checkable in seconds
DESK_LAYERS = 2
DESK_HEADS = 2
DESK_HIDDEN = 32
DESK_FFN = 64
DESK_MAX_POSITIONS = 64


@dataclass(frozen=True)
class ModelConfig:
    layers: int = DESK_LAYERS
    heads: int = DESK_HEADS
    hidden: int = DESK_HIDDEN
    ffn_hidden: int = DESK_FFN
    vocab_size: int = 64
    max_positions: int = DESK_MAX_POSITIONS
    dropout_p: float = 0.1

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.heads < 1 or self.hidden % self.heads != 0:
            raise ConfigError(
                f"hidden ({self.hidden}) must be a positive multiple of heads ({self.heads})"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0,1), got {self.dropout_p}")
        if self.vocab_size < 5 or self.max_positions < 1 or self.ffn_hidden < 1:
            raise ConfigError("vocab_size/max_positions/ffn_hidden out of range")

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "heads": self.heads,
            "hidden": self.hidden,
            "ffn_hidden": self.ffn_hidden,
            "vocab_size": self.vocab_size,
            "max_positions": self.max_positions,
            "dropout_p": self.dropout_p,
        }


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Hierarchical name -> shape map for one encoder tower."""
    h, f = cfg.hidden, cfg.ffn_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "embeddings.token": (cfg.vocab_size, h),
        "embeddings.position": (cfg.max_positions, h),
        "embeddings.segment": (2, h),
        "embeddings.norm.gain": (h,),
        "embeddings.norm.bias": (h,),
    }
    for i in range(cfg.layers):
        p = f"layers.{i}"
        for proj in ("q", "k", "v", "out"):
            shapes[f"{p}.attn.{proj}.weight"] = (h, h)
            shapes[f"{p}.attn.{proj}.bias"] = (h,)
        shapes[f"{p}.attn_norm.gain"] = (h,)
        shapes[f"{p}.attn_norm.bias"] = (h,)
        shapes[f"{p}.ffn.inner.weight"] = (h, f)
        shapes[f"{p}.ffn.inner.bias"] = (f,)
        shapes[f"{p}.ffn.out.weight"] = (f, h)
        shapes[f"{p}.ffn.out.bias"] = (h,)
        shapes[f"{p}.ffn_norm.gain"] = (h,)
        shapes[f"{p}.ffn_norm.bias"] = (h,)
    return shapes


class TransformerWeights:
    """All learnable parameters of one tower, addressable by name."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        expected = parameter_shapes(cfg)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ShapeError(f"parameter name set mismatch: missing={missing} extra={extra}")
        for name, t in params.items():
            if t.shape != expected[name]:
                raise ShapeError(f"{name}: shape {t.shape} != expected {expected[name]}")
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float64):
        """BERT-style init: N(0, 0.02) matrices/embeddings, zero biases, unit gains."""
        params = {}
        for name, shape in parameter_shapes(cfg).items():
            if name.endswith(".gain"):
                data = np.ones(shape, dtype=dtype)
            elif name.endswith(".bias"):
                data = np.zeros(shape, dtype=dtype)
            else:
                data = rng.normal(0.0, INIT_STD, size=shape).astype(dtype)
            params[name] = Tensor(data, requires_grad=True)
        return cls(cfg, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return sorted(self.params)

    def copy(self) -> "TransformerWeights":
        return TransformerWeights(
            self.cfg,
            {n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self.params.items()},
        )

    @property
    def dtype(self):
        return self.params["embeddings.token"].dtype


@dataclass
class TransformerOutput:
    """Per-token hidden states h_1..h_N plus the pad mask they were built under."""

    hidden_states: Tensor  # [L, hidden]
    pad_mask: tuple[bool, ...]

    @property
    def n_real(self) -> int:
        return int(sum(self.pad_mask))


def embed(tp: TokenizedPair, w: TransformerWeights) -> Tensor:
    """Sum of token, position and segment embeddings, row per input position."""
    cfg = w.cfg
    ids = np.asarray(tp.token_ids)
    if ids.max(initial=0) >= cfg.vocab_size or ids.min(initial=0) < 0:
        raise ConfigError(f"token id out of range for vocab_size {cfg.vocab_size}")
    if len(tp) > cfg.max_positions:
        raise ConfigError(
            f"sequence length {len(tp)} exceeds max_positions {cfg.max_positions}"
        )
    tok = T.gather_rows(w["embeddings.token"], tp.token_ids)
    pos = T.gather_rows(w["embeddings.position"], tp.position_ids)
    seg = T.gather_rows(w["embeddings.segment"], tp.segment_ids)
    return T.add(T.add(tok, pos), seg)


def _maybe_dropout(x, p, train_mode, rng):
    if train_mode and p > 0.0:
        if rng is None:
            raise ContractError("train_mode forward needs an rng for dropout")
        return T.dropout(x, p, rng)
    return x


def forward(
    tp: TokenizedPair,
    w: TransformerWeights,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    taps: dict | None = None,
) -> TransformerOutput:
    """Full encoder pass over one sequence.

    `taps`, when given, receives intermediate tensors keyed by name
    (currently the last block's FFN output projection, pre-residual).
    """
    cfg = w.cfg
    n = len(tp)
    head_dim = cfg.hidden // cfg.heads
    inv_sqrt = 1.0 / math.sqrt(head_dim)
    pad = np.asarray(tp.pad_mask, dtype=bool)
    # keys at pad positions are masked for every query row
    key_keep = np.broadcast_to(pad, (n, n))

    x = embed(tp, w)
    x = T.layer_norm(x, w["embeddings.norm.gain"], w["embeddings.norm.bias"], LN_EPS)
    x = _maybe_dropout(x, cfg.dropout_p, train_mode, rng)

    for i in range(cfg.layers):
        p = f"layers.{i}"
        q = T.add(T.matmul(x, w[f"{p}.attn.q.weight"]), w[f"{p}.attn.q.bias"])
        k = T.add(T.matmul(x, w[f"{p}.attn.k.weight"]), w[f"{p}.attn.k.bias"])
        v = T.add(T.matmul(x, w[f"{p}.attn.v.weight"]), w[f"{p}.attn.v.bias"])
        ctx_heads = []
        for h in range(cfg.heads):
            lo, hi = h * head_dim, (h + 1) * head_dim
            qh = T.slice_cols(q, lo, hi)
            kh = T.slice_cols(k, lo, hi)
            vh = T.slice_cols(v, lo, hi)
            logits = T.scale(T.matmul(qh, T.transpose(kh)), inv_sqrt)
            logits = T.mask_fill(logits, key_keep, float("-inf"))
            probs = T.softmax(logits)
            probs = _maybe_dropout(probs, cfg.dropout_p, train_mode, rng)
            ctx_heads.append(T.matmul(probs, vh))
        ctx = ctx_heads[0] if cfg.heads == 1 else T.concat_cols(ctx_heads)
        attn_out = T.add(T.matmul(ctx, w[f"{p}.attn.out.weight"]), w[f"{p}.attn.out.bias"])
        attn_out = _maybe_dropout(attn_out, cfg.dropout_p, train_mode, rng)
        x = T.layer_norm(
            T.add(x, attn_out), w[f"{p}.attn_norm.gain"], w[f"{p}.attn_norm.bias"], LN_EPS
        )

        inner = T.gelu(T.add(T.matmul(x, w[f"{p}.ffn.inner.weight"]), w[f"{p}.ffn.inner.bias"]))
        ffn_out = T.add(T.matmul(inner, w[f"{p}.ffn.out.weight"]), w[f"{p}.ffn.out.bias"])
        if taps is not None and i == cfg.layers - 1:
            taps["last_ffn_out"] = ffn_out
        ffn_out = _maybe_dropout(ffn_out, cfg.dropout_p, train_mode, rng)
        x = T.layer_norm(
            T.add(x, ffn_out), w[f"{p}.ffn_norm.gain"], w[f"{p}.ffn_norm.bias"], LN_EPS
        )

    return TransformerOutput(hidden_states=x, pad_mask=tp.pad_mask)
