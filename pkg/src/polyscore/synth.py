"""Synthetic datasets: a token-overlap retrieval task and a toy utterance
chain for pre-training runs. Both are deterministic given a seed."""

from __future__ import annotations

import json

import numpy as np

from .text import Example


def _words(prefix: str, n: int) -> list[str]:
    return [f"{prefix}{i:03d}" for i in range(n)]


def make_overlap_dataset(n_train: int, n_test: int, seed: int = 0, n_candidates: int = 20,
                         content_vocab: int = 40, context_len: int = 6,
                         overlap: int = 4, cand_len: int = 5):
    """Retrieval task where the gold candidate copies >= `overlap` content
    tokens from its context and distractors are other examples' golds.

    Returns (train, test) lists of Examples; train examples carry only the
    gold candidate, test examples carry `n_candidates` with a random gold slot.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    words = _words("tok", content_vocab)

    def one(n):
        ctxs, golds = [], []
        for _ in range(n):
            ctx_ids = rng.choice(content_vocab, size=context_len, replace=False)
            ctx_words = [words[int(i)] for i in ctx_ids]
            shared = [ctx_words[int(i)] for i in rng.choice(context_len, size=overlap,
                                                            replace=False)]
            extra = [words[int(i)] for i in rng.choice(content_vocab,
                                                       size=cand_len - overlap)]
            gold = " ".join(shared + extra)
            half = context_len // 2
            ctxs.append((" ".join(ctx_words[:half]), " ".join(ctx_words[half:])))
            golds.append(gold)
        return ctxs, golds

    train_ctx, train_gold = one(n_train)
    train = [Example(context=ctx, candidates=(gold,), label_index=0)
             for ctx, gold in zip(train_ctx, train_gold)]

    test_ctx, test_gold = one(n_test)
    test = []
    for i, (ctx, gold) in enumerate(zip(test_ctx, test_gold)):
        others = [g for j, g in enumerate(test_gold) if j != i]
        # tiny test sets may reuse distractors
        distract_idx = rng.choice(len(others), size=n_candidates - 1,
                                  replace=len(others) < n_candidates - 1)
        cands = [others[int(j)] for j in distract_idx]
        slot = int(rng.integers(n_candidates))
        cands.insert(slot, gold)
        test.append(Example(context=ctx, candidates=tuple(cands), label_index=slot))
    return train, test


def make_chain_corpus(n_pairs: int, seed: int = 0, vocab_words: int = 30,
                      utterance_len: int = 6) -> list[Example]:
    """Consecutive (input, next) pairs from a random utterance chain."""
    rng = np.random.Generator(np.random.PCG64(seed))
    words = _words("w", vocab_words)
    utterances = []
    for _ in range(n_pairs + 1):
        ids = rng.choice(vocab_words, size=utterance_len)
        utterances.append(" ".join(words[int(i)] for i in ids))
    return [
        Example(context=(utterances[i],), candidates=(utterances[i + 1],), label_index=0)
        for i in range(n_pairs)
    ]


def write_jsonl(examples, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps({
                "context": list(ex.context),
                "candidates": list(ex.candidates),
                "label": ex.label_index,
            }) + "\n")
