"""Pre-training and fine-tuning: task batch construction, parameter freezing,
final-layer rescaling and the step loops.

Pre-training strictly alternates masked-token batches with next-utterance
batches (M, N, M, N, ...). Fine-tuning trains one of the three scoring
architectures; Bi/Poly use in-batch negatives, Cross uses external negatives.
"""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import TransformerWeights, forward
from .errors import ConfigError, ContractError
from .heads import CrossHead, cross_score, poly_context_vectors
from .losses import (
    binary_choice_loss,
    cross_entropy_rows,
    external_neg_loss,
    in_batch_loss,
    masked_token_loss,
)
from .model import Model, Scorer
from .optim import Optimizer, OptimizerConfig
from .tensor import Tensor, backward
from .text import MASK_ID, PAD_ID, RESERVED, TokenizedPair, encode_pair

MLM_RATE = 0.15
MLM_MASK_FRACTION = 0.8
MLM_RANDOM_FRACTION = 0.1  # remaining 0.1 keeps the original token

FREEZE_SPECS = ("top_layer", "top4_layers", "all_but_embeddings", "every_layer")
EMBEDDING_TABLES = ("embeddings.token", "embeddings.position", "embeddings.segment")

_LAYER_RE = re.compile(r"(?:^|\.)layers\.(\d+)\.")


def batch_kind(step: int) -> str:
    """Strict M, N, M, N alternation; steps are 1-based."""
    if step < 1:
        raise ContractError(f"step must be >= 1, got {step}")
    return "mlm" if step % 2 == 1 else "next"


def mlm_corrupt(tp: TokenizedPair, rate: float, rng: np.random.Generator,
                vocab_size: int) -> tuple[TokenizedPair, list[tuple[int, int]]]:
    """BERT-style corruption: select non-special tokens with prob `rate`;
    of those 80% become MASK, 10% a random word, 10% stay put.

    Returns the corrupted pair and (position, original id) targets.
    """
    if not 0.0 < rate < 1.0:
        raise ContractError(f"corruption rate must be in (0,1), got {rate}")
    n_reserved = len(RESERVED)
    ids = list(tp.token_ids)
    targets = []
    picks = rng.random(len(ids))
    for pos, tok in enumerate(ids):
        if tok < n_reserved or not tp.pad_mask[pos]:
            continue
        if picks[pos] >= rate:
            continue
        targets.append((pos, tok))
        action = rng.random()
        if action < MLM_MASK_FRACTION:
            ids[pos] = MASK_ID
        elif action < MLM_MASK_FRACTION + MLM_RANDOM_FRACTION:
            ids[pos] = int(rng.integers(n_reserved, vocab_size))
    corrupted = TokenizedPair(tuple(ids), tp.position_ids, tp.segment_ids, tp.pad_mask)
    return corrupted, targets


def next_selection_batch(examples, rng: np.random.Generator,
                         batch_size: int) -> list[tuple[str, str, int]]:
    """Balanced positive/negative (input, candidate, label) triples.

    Negatives are other examples' gold labels, resampled on collision with
    the true continuation.
    """
    examples = list(examples)
    if len(examples) < 2:
        raise ContractError(f"next-selection batches need >= 2 examples, got {len(examples)}")
    batch = []
    for _ in range(batch_size):
        ex = examples[int(rng.integers(len(examples)))]
        if rng.random() < 0.5:
            batch.append((ex.context_text, ex.gold, 1))
        else:
            while True:
                neg = examples[int(rng.integers(len(examples)))].gold
                if neg != ex.gold:
                    break
            batch.append((ex.context_text, neg, 0))
    return batch


def freeze_filter(spec: str, names) -> set[str]:
    """Trainable parameter names under a freezing policy.

    Head parameters (anything outside the towers' layers/embeddings) are
    always trainable; `all_but_embeddings` freezes exactly the three
    embedding tables.
    """
    names = list(names)
    if spec not in FREEZE_SPECS:
        raise ConfigError(f"unknown freeze spec {spec!r}; choose from {FREEZE_SPECS}")
    if spec == "every_layer":
        return set(names)
    if spec == "all_but_embeddings":
        return {n for n in names if not n.endswith(EMBEDDING_TABLES)}
    layer_ids = [int(m.group(1)) for n in names for m in [_LAYER_RE.search(n)] if m]
    n_layers = max(layer_ids) + 1 if layer_ids else 0
    keep = 1 if spec == "top_layer" else min(4, n_layers)
    kept_layers = set(range(n_layers - keep, n_layers))
    out = set()
    for n in names:
        m = _LAYER_RE.search(n)
        if m:
            if int(m.group(1)) in kept_layers:
                out.add(n)
        elif ".embeddings." not in n and not n.startswith("embeddings."):
            out.add(n)  # head parameter
    return out


def apply_freeze(model: Model, spec: str) -> set[str]:
    """Mark trainable params per the spec; frozen ones never receive grads."""
    params = model.named_parameters()
    trainable = freeze_filter(spec, params)
    for name, t in params.items():
        t.requires_grad = name in trainable
    return trainable


def rescale_final_layer(w: TransformerWeights, target_std: float,
                        probes: list[TokenizedPair]) -> tuple[TransformerWeights, float]:
    """Scale the last block's FFN output projection so its output std on the
    probe batch equals target_std. Returns (new weights, applied factor)."""
    if target_std <= 0:
        raise ContractError(f"target_std must be positive, got {target_std}")
    if not probes:
        raise ContractError("rescaling needs a non-empty probe batch")
    outputs = []
    for tp in probes:
        taps: dict = {}
        forward(tp, w, taps=taps)
        outputs.append(taps["last_ffn_out"].data.ravel())
    flat = np.concatenate(outputs)
    std = float(flat.std())
    if std <= 0 or not np.isfinite(std):
        raise ContractError("probe output has zero variance; cannot rescale")
    factor = target_std / std
    last = w.cfg.layers - 1
    scaled = w.copy()
    scaled.params[f"layers.{last}.ffn.out.weight"].data *= factor
    scaled.params[f"layers.{last}.ffn.out.bias"].data *= factor
    return scaled, factor


class MetricsLog:
    """JSON-lines eval log: {step, train_loss, valid_loss, lr, wall_clock_s}."""

    def __init__(self, path=None):
        self.path = path
        self.rows: list[dict] = []
        self._start = time.perf_counter()

    def log(self, step: int, train_loss: float, valid_loss, lr: float) -> dict:
        row = {
            "step": step,
            "train_loss": float(train_loss),
            "valid_loss": None if valid_loss is None else float(valid_loss),
            "lr": float(lr),
            "wall_clock_s": time.perf_counter() - self._start,
        }
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(row) + "\n")
        return row


def _grads_by_name(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    marked = {n: t for n, t in params.items() if t.requires_grad}
    grads = backward(loss, list(marked.values()))
    return {n: grads[t] for n, t in marked.items()}


def _rngs(seed: int, n: int = 3):
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(n)]


# ---- pre-training ----


def mlm_logits(model: Model, rows: Tensor) -> Tensor:
    """Masked-token head: dense + GELU + layer norm, tied output projection."""
    e = model.extras
    x = T.add(T.matmul(rows, e["mlm.transform.weight"]), e["mlm.transform.bias"])
    x = T.layer_norm(T.gelu(x), e["mlm.norm.gain"], e["mlm.norm.bias"])
    tok = model.towers["enc"]["embeddings.token"]
    return T.add(T.matmul(x, T.transpose(tok)), e["mlm.out_bias"])


def mlm_batch_loss(model: Model, vocab, examples, data_rng, drop_rng=None,
                   train_mode=True) -> Tensor:
    """Mean masked-token loss over a batch of (context, gold) pairs."""
    enc = model.towers["enc"]
    row_blocks = []
    target_ids: list[int] = []
    for ex in examples:
        pair = encode_pair(ex.context_text, ex.gold, vocab, model.cfg.max_positions)
        corrupted, targets = mlm_corrupt(pair, MLM_RATE, data_rng, len(vocab))
        if not targets:
            continue
        out = forward(corrupted, enc, train_mode=train_mode, rng=drop_rng)
        positions = [p for p, _ in targets]
        row_blocks.append(T.gather_rows(out.hidden_states, positions))
        target_ids.extend(t for _, t in targets)
    if not row_blocks:
        raise ContractError("no maskable tokens in batch")
    rows = row_blocks[0] if len(row_blocks) == 1 else T.concat_rows(row_blocks)
    return masked_token_loss(mlm_logits(model, rows), target_ids)


def next_batch_loss(model: Model, vocab, triples, drop_rng=None, train_mode=True) -> Tensor:
    """Mean binary next-utterance loss over (input, candidate, label) triples."""
    enc = model.towers["enc"]
    head = CrossHead(model.extras["next.w"])
    losses = []
    for input_text, cand, label in triples:
        pair = encode_pair(input_text, cand, vocab, model.cfg.max_positions)
        score = cross_score(pair, enc, head, train_mode=train_mode, rng=drop_rng)
        losses.append(binary_choice_loss(score, label))
    return T.tmean(T.stack(losses))


def _token_buckets(examples, vocab, max_positions: int, batch_tokens: int):
    """Group length-sorted examples into batches of at most batch_tokens tokens."""
    lengths = []
    for idx, ex in enumerate(examples):
        pair = encode_pair(ex.context_text, ex.gold, vocab, max_positions)
        lengths.append((len(pair), idx))
    lengths.sort()
    buckets, current, total = [], [], 0
    for length, idx in lengths:
        if current and total + length > batch_tokens:
            buckets.append(current)
            current, total = [], 0
        current.append(idx)
        total += length
    if current:
        buckets.append(current)
    return buckets


def pretrain_loop(model: Model, vocab, examples, opt_cfg: OptimizerConfig, steps: int,
                  batch_size: int, seed: int, metrics_path=None, valid_examples=None,
                  batch_tokens: int | None = None) -> MetricsLog:
    """Alternating MLM / next-utterance pre-training over (input, next) pairs."""
    examples = list(examples)
    if len(examples) < 2:
        raise ContractError("pre-training needs at least two examples")
    data_rng, drop_rng, valid_seed_rng = _rngs(seed)
    valid_seed = int(valid_seed_rng.integers(2**31))
    params = model.named_parameters()
    for t in params.values():
        t.requires_grad = True
    opt = Optimizer(opt_cfg, params)
    log = MetricsLog(metrics_path)
    buckets = None
    if batch_tokens is not None:
        buckets = _token_buckets(examples, vocab, model.cfg.max_positions, batch_tokens)

    last_lr = 0.0
    running = []
    for step in range(1, steps + 1):
        if buckets is not None:
            batch_idx = buckets[int(data_rng.integers(len(buckets)))]
        else:
            batch_idx = data_rng.integers(len(examples), size=batch_size)
        batch = [examples[int(i)] for i in batch_idx]
        if batch_kind(step) == "mlm":
            loss = mlm_batch_loss(model, vocab, batch, data_rng, drop_rng)
        else:
            triples = next_selection_batch(examples, data_rng, len(batch))
            loss = next_batch_loss(model, vocab, triples, drop_rng)
        grads = _grads_by_name(loss, params)
        last_lr = opt.step(grads, step)
        running.append(loss.item())
        if step % opt_cfg.eval_interval == 0 or step == steps:
            valid_loss = None
            if valid_examples:
                valid_loss = pretrain_valid_loss(model, vocab, valid_examples, valid_seed)
            log.log(step, np.mean(running), valid_loss, last_lr)
            running = []
    return log


def pretrain_valid_loss(model: Model, vocab, valid_examples, valid_seed: int,
                        max_examples: int = 64) -> float:
    """Eval-mode MLM + next losses on a fixed validation sample."""
    rng = np.random.Generator(np.random.PCG64(valid_seed))
    sample = list(valid_examples)[:max_examples]
    mlm = mlm_batch_loss(model, vocab, sample, rng, train_mode=False)
    triples = next_selection_batch(sample if len(sample) > 1 else list(valid_examples),
                                   rng, min(len(sample), 16))
    nxt = next_batch_loss(model, vocab, triples, train_mode=False)
    return 0.5 * (mlm.item() + nxt.item())


# ---- fine-tuning ----


@dataclass
class FinetuneSettings:
    steps: int = 200
    batch_size: int = 32
    freeze: str = "every_layer"
    neg_mode: str = "sampled"  # cross only: "sampled" from train golds or "provided"
    n_candidates: int = 16  # cross only: gold + 15 negatives
    seed: int = 0

    def __post_init__(self):
        if self.neg_mode not in ("sampled", "provided"):
            raise ConfigError(f"unknown negatives mode {self.neg_mode!r}")
        if self.n_candidates < 2:
            raise ConfigError(f"n_candidates must be >= 2, got {self.n_candidates}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def _sample_negatives(gold: str, pool: list[str], rng, count: int) -> list[str]:
    negs = []
    while len(negs) < count:
        neg = pool[int(rng.integers(len(pool)))]
        if neg != gold:
            negs.append(neg)
    return negs


def bi_batch_loss(scorer: Scorer, batch, train_mode=True, rng=None) -> Tensor:
    y_ctxt = T.stack([scorer.context_vector(ex.context, train_mode, rng) for ex in batch])
    y_cand = T.stack([scorer.candidate_vector(ex.gold, train_mode, rng) for ex in batch])
    loss, _ = in_batch_loss(y_ctxt, y_cand)
    return loss


def poly_batch_loss(scorer: Scorer, batch, train_mode=True, rng=None) -> Tensor:
    """In-batch negatives with per-context candidate-as-query pooling."""
    if len(batch) < 2:
        raise ContractError(f"in-batch negatives need batch size >= 2, got {len(batch)}")
    y_cand = T.stack([scorer.candidate_vector(ex.gold, train_mode, rng) for ex in batch])
    rows = []
    for ex in batch:
        vecs = scorer.poly_vectors(ex.context, train_mode, rng)  # [m', H]
        attn = T.softmax(T.matmul(y_cand, T.transpose(vecs)))  # [B, m']
        pooled = T.matmul(attn, vecs)  # [B, H]
        rows.append(T.tsum(T.mul(pooled, y_cand), axis=-1))  # [B]
    logits = T.stack(rows)
    return cross_entropy_rows(logits, np.arange(len(batch)))


def cross_batch_loss(scorer: Scorer, batch, pool, settings: FinetuneSettings,
                     data_rng, train_mode=True, drop_rng=None) -> Tensor:
    losses = []
    for ex in batch:
        if settings.neg_mode == "provided" and len(ex.candidates) > 1:
            negs = [c for i, c in enumerate(ex.candidates) if i != ex.label_index]
            negs = negs[: settings.n_candidates - 1]
        else:
            negs = _sample_negatives(ex.gold, pool, data_rng, settings.n_candidates - 1)
        scores = [scorer.score_cross(ex.context, ex.gold, train_mode, drop_rng)]
        scores += [scorer.score_cross(ex.context, neg, train_mode, drop_rng) for neg in negs]
        losses.append(external_neg_loss(T.stack(scores), 0))
    return T.tmean(T.stack(losses))


def finetune_valid_loss(model: Model, scorer: Scorer, valid_examples, pool,
                        settings: FinetuneSettings, valid_seed: int,
                        max_examples: int = 64) -> float:
    rng = np.random.Generator(np.random.PCG64(valid_seed))
    sample = list(valid_examples)[:max_examples]
    if model.kind == "cross":
        loss = cross_batch_loss(scorer, sample, pool, settings, rng, train_mode=False)
        return loss.item()
    losses = []
    b = max(2, min(settings.batch_size, len(sample)))
    for start in range(0, len(sample) - b + 1, b):
        chunk = sample[start:start + b]
        fn = bi_batch_loss if model.kind == "bi" else poly_batch_loss
        losses.append(fn(scorer, chunk, train_mode=False).item())
    if not losses:
        raise ContractError("validation set too small for one in-batch step")
    return float(np.mean(losses))


def finetune_loop(model: Model, vocab, train_examples, valid_examples,
                  opt_cfg: OptimizerConfig, settings: FinetuneSettings,
                  metrics_path=None, scorer: Scorer | None = None) -> MetricsLog:
    """Fine-tune a bi/poly/cross model; freezing per settings.freeze."""
    if model.kind not in ("bi", "poly", "cross"):
        raise ConfigError(f"cannot fine-tune a {model.kind} model")
    train_examples = list(train_examples)
    if model.kind != "cross" and len(train_examples) < 2:
        raise ContractError("in-batch training needs at least two examples")
    scorer = scorer or Scorer(model, vocab)
    pool = [ex.gold for ex in train_examples]
    data_rng, drop_rng, valid_seed_rng = _rngs(settings.seed)
    valid_seed = int(valid_seed_rng.integers(2**31))
    trainable_names = apply_freeze(model, settings.freeze)
    params = model.named_parameters()
    opt = Optimizer(opt_cfg, {n: params[n] for n in sorted(trainable_names)})
    log = MetricsLog(metrics_path)

    b = settings.batch_size
    if model.kind != "cross":
        b = max(2, min(b, len(train_examples)))
    running = []
    for step in range(1, settings.steps + 1):
        if model.kind == "cross":
            idx = data_rng.integers(len(train_examples), size=b)
        else:
            idx = data_rng.choice(len(train_examples), size=b, replace=False)
        batch = [train_examples[int(i)] for i in idx]
        if model.kind == "bi":
            loss = bi_batch_loss(scorer, batch, train_mode=True, rng=drop_rng)
        elif model.kind == "poly":
            loss = poly_batch_loss(scorer, batch, train_mode=True, rng=drop_rng)
        else:
            loss = cross_batch_loss(scorer, batch, pool, settings, data_rng,
                                    train_mode=True, drop_rng=drop_rng)
        grads = _grads_by_name(loss, params)
        lr = opt.step(grads, step)
        running.append(loss.item())
        if step % opt_cfg.eval_interval == 0 or step == settings.steps:
            valid_loss = None
            if valid_examples:
                valid_loss = finetune_valid_loss(model, scorer, valid_examples, pool,
                                                 settings, valid_seed)
                opt.plateau.observe(valid_loss)
            log.log(step, np.mean(running), valid_loss, lr)
            running = []
    return log
