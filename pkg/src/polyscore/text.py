"""Vocabulary, tokenization and dataset ingestion.

Tokenization is lowercase whitespace word-level. Dialogue context turns are
flattened into one token stream joined by the ordinary vocab word
``__turn__``; truncation always keeps the most recent context tokens.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Iterator

from .errors import ContractError, ParseError

PAD_ID = 0
S_ID = 1
MASK_ID = 2
UNK_ID = 3
RESERVED = ("<pad>", "<s>", "<mask>", "<unk>")
TURN_SEP = "__turn__"


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def flatten_context(turns: list[str]) -> str:
    """Join dialogue turns into one string with the turn separator word."""
    return f" {TURN_SEP} ".join(turns)


class Vocabulary:
    """Dense token ids with four reserved slots (PAD=0, S=1, MASK=2, UNK=3)."""

    def __init__(self, words: list[str]):
        self._id_to_token = list(RESERVED) + list(words)
        self._token_to_id = {t: i for i, t in enumerate(self._id_to_token)}
        if len(self._token_to_id) != len(self._id_to_token):
            raise ContractError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self._id_to_token)

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self._id_to_token[idx]

    def encode_tokens(self, tokens: list[str]) -> list[int]:
        get = self._token_to_id.get
        return [get(t, UNK_ID) for t in tokens]

    def save(self, path) -> None:
        """One non-reserved token per line; line number = id - 4."""
        with open(path, "w", encoding="utf-8") as f:
            for token in self._id_to_token[len(RESERVED):]:
                f.write(token + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            words = [line.rstrip("\n") for line in f]
        words = [w for w in words if w]
        return cls(words)


def build_vocab(corpus: Iterable[str], max_size: int) -> Vocabulary:
    """Frequency-ordered word vocab; ties broken lexicographically.

    `max_size` counts the four reserved ids.
    """
    if max_size < 5:
        raise ContractError(f"max_size must be >= 5, got {max_size}")
    counts = Counter()
    seen_any = False
    for line in corpus:
        seen_any = True
        counts.update(tokenize(line))
    if not seen_any:
        raise ParseError("empty corpus: no lines to build a vocabulary from")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    words = [w for w, _ in ranked[: max_size - len(RESERVED)]]
    return Vocabulary(words)


@dataclass(frozen=True)
class TokenizedPair:
    """Aligned id sequences for one encoder input.

    All four sequences share one length; pads sit at the tail with
    pad_mask False.
    """

    token_ids: tuple[int, ...]
    position_ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    pad_mask: tuple[bool, ...]

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def n_real(self) -> int:
        """Number of non-pad positions (pads are always trailing)."""
        return int(sum(self.pad_mask))


def _assemble(ids: list[int], segments: list[int]) -> TokenizedPair:
    n = len(ids)
    return TokenizedPair(
        token_ids=tuple(ids),
        position_ids=tuple(range(n)),
        segment_ids=tuple(segments),
        pad_mask=tuple(True for _ in range(n)),
    )


def encode_pair(input_text: str, label_text: str, vocab: Vocabulary, max_len: int) -> TokenizedPair:
    """Layout [S, input..., S, label...] within max_len.

    The input side is truncated first (oldest tokens dropped); if the label
    alone still does not fit, its tail is cut.
    """
    if max_len < 4:
        raise ContractError(f"max_len must be >= 4, got {max_len}")
    inp = vocab.encode_tokens(tokenize(input_text))
    lab = vocab.encode_tokens(tokenize(label_text))
    budget = max_len - 2
    keep_inp = min(len(inp), max(budget - len(lab), 1 if inp else 0))
    keep_lab = min(len(lab), budget - keep_inp)
    inp = inp[len(inp) - keep_inp:]
    lab = lab[:keep_lab]
    ids = [S_ID] + inp + [S_ID] + lab
    segments = [0] * (1 + len(inp)) + [1] * (1 + len(lab))
    return _assemble(ids, segments)


def encode_single(text: str, vocab: Vocabulary, max_len: int, segment: int = 0) -> TokenizedPair:
    """One-side encoding [S, tokens...]; all segment ids equal `segment`."""
    if max_len < 2:
        raise ContractError(f"max_len must be >= 2, got {max_len}")
    if segment not in (0, 1):
        raise ContractError(f"segment must be 0 or 1, got {segment}")
    toks = vocab.encode_tokens(tokenize(text))
    toks = toks[max(0, len(toks) - (max_len - 1)):]
    ids = [S_ID] + toks
    return _assemble(ids, [segment] * len(ids))


def pad_to(tp: TokenizedPair, length: int) -> TokenizedPair:
    """Right-pad with PAD tokens up to `length`."""
    extra = length - len(tp)
    if extra < 0:
        raise ContractError(f"cannot pad length {len(tp)} down to {length}")
    return TokenizedPair(
        token_ids=tp.token_ids + (PAD_ID,) * extra,
        position_ids=tuple(range(length)),
        segment_ids=tp.segment_ids + (tp.segment_ids[-1],) * extra,
        pad_mask=tp.pad_mask + (False,) * extra,
    )


@dataclass(frozen=True)
class Example:
    """One (context, candidates, gold index) selection example."""

    context: tuple[str, ...]
    candidates: tuple[str, ...]
    label_index: int

    @property
    def gold(self) -> str:
        return self.candidates[self.label_index]

    @property
    def context_text(self) -> str:
        return flatten_context(list(self.context))


def parse_example(obj, where: str) -> Example:
    if not isinstance(obj, dict):
        raise ParseError(f"{where}: expected a JSON object")
    for field in ("context", "candidates", "label"):
        if field not in obj:
            raise ParseError(f"{where}: missing field '{field}'")
    context = obj["context"]
    candidates = obj["candidates"]
    label = obj["label"]
    if not isinstance(context, list) or not all(isinstance(t, str) for t in context):
        raise ParseError(f"{where}: 'context' must be an array of strings")
    if not isinstance(candidates, list) or not candidates or not all(
        isinstance(c, str) for c in candidates
    ):
        raise ParseError(f"{where}: 'candidates' must be a non-empty array of strings")
    if not isinstance(label, int) or isinstance(label, bool) or not 0 <= label < len(candidates):
        raise ParseError(
            f"{where}: 'label' must be an integer in [0, {len(candidates)}), got {label!r}"
        )
    return Example(tuple(context), tuple(candidates), label)


def load_jsonl(path) -> Iterator[Example]:
    """Stream Examples from a JSON-lines file; errors carry line numbers."""
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
            yield parse_example(obj, f"{path}:{lineno}")


def example_token_stream(examples: Iterable[Example]) -> Iterator[str]:
    """Text stream for vocabulary building: flattened contexts plus candidates."""
    for ex in examples:
        yield ex.context_text
        for cand in ex.candidates:
            yield cand
