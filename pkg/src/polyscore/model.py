"""Model containers, checkpoint serialization and the text-level scorer.

A Model bundles one or two encoder towers with head parameters:

    pretrain  one tower "enc" + masked-token head + next-utterance head
    bi        towers "ctxt"/"cand", no head parameters
    poly      towers "ctxt"/"cand" + context codes for the learnt variant
    cross     one tower "enc" + scalar scoring layer

Checkpoints are single files: magic, version, a canonical JSON header
(ModelConfig plus head hyperparameters), then length-prefixed parameter
records sorted by name with 64-bit little-endian values. Re-saving a loaded
checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .encoder import ModelConfig, TransformerOutput, TransformerWeights, forward
from .errors import ConfigError, ParseError, ShapeError
from .heads import CrossHead, PolyHeadState, cross_score, init_codes, parse_reduction, \
    poly_context_vectors, poly_score, reduce_output, bi_score
from .tensor import Tensor
from .text import TokenizedPair, Vocabulary, encode_pair, encode_single, flatten_context

MAGIC = b"PLYSCKPT"
FORMAT_VERSION = 1
KINDS = ("pretrain", "bi", "poly", "cross")

# ingestion caps for context/candidate token counts
DEFAULT_MAX_CONTEXT_TOKENS = 360
DEFAULT_MAX_CANDIDATE_TOKENS = 72


def _pretrain_extra_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h = cfg.hidden
    return {
        "mlm.transform.weight": (h, h),
        "mlm.transform.bias": (h,),
        "mlm.norm.gain": (h,),
        "mlm.norm.bias": (h,),
        "mlm.out_bias": (cfg.vocab_size,),
        "next.w": (h, 1),
    }


class Model:
    """Architecture kind + towers + head parameters + head hyperparameters."""

    def __init__(
        self,
        cfg: ModelConfig,
        kind: str,
        towers: dict[str, TransformerWeights],
        extras: dict[str, Tensor],
        reduction: str = "first",
        poly_variant: str | None = None,
        poly_m: int | None = None,
        fingerprint: str | None = None,
    ):
        if kind not in KINDS:
            raise ConfigError(f"unknown model kind {kind!r}")
        expected_towers = {"pretrain": {"enc"}, "cross": {"enc"}, "bi": {"ctxt", "cand"},
                           "poly": {"ctxt", "cand"}}[kind]
        if set(towers) != expected_towers:
            raise ConfigError(f"kind {kind} needs towers {sorted(expected_towers)}, got {sorted(towers)}")
        parse_reduction(reduction)
        if kind == "poly":
            if poly_variant is None or poly_m is None:
                raise ConfigError("poly model needs poly_variant and poly_m")
        self.cfg = cfg
        self.kind = kind
        self.towers = towers
        self.extras = extras
        self.reduction = reduction
        self.poly_variant = poly_variant
        self.poly_m = poly_m
        self.fingerprint = fingerprint

    # ---- construction ----

    @classmethod
    def init_pretrain(cls, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float64) -> "Model":
        tower = TransformerWeights.init(cfg, rng, dtype)
        extras = {}
        for name, shape in _pretrain_extra_shapes(cfg).items():
            if name.endswith(".gain"):
                data = np.ones(shape, dtype=dtype)
            elif name.endswith((".bias", ".out_bias")):
                data = np.zeros(shape, dtype=dtype)
            else:
                data = rng.normal(0.0, 0.02, size=shape).astype(dtype)
            extras[name] = Tensor(data, requires_grad=True)
        return cls(cfg, "pretrain", {"enc": tower}, extras)

    def derive(self, kind: str, rng: np.random.Generator, reduction: str = "first",
               poly_variant: str | None = None, poly_m: int | None = None) -> "Model":
        """Fine-tune start: duplicate the encoder per side, init fresh heads."""
        if self.kind != "pretrain":
            raise ConfigError(f"can only derive from a pretrain model, not {self.kind}")
        base = self.towers["enc"]
        dtype = base.dtype
        if kind == "bi":
            return Model(self.cfg, "bi", {"ctxt": base.copy(), "cand": base.copy()}, {},
                         reduction=reduction)
        if kind == "poly":
            if poly_variant is None or poly_m is None:
                raise ConfigError("poly derivation needs poly_variant and poly_m")
            extras = {}
            if poly_variant == "learnt":
                extras["poly.codes"] = init_codes(poly_m, self.cfg.hidden, rng, dtype)
            return Model(self.cfg, "poly", {"ctxt": base.copy(), "cand": base.copy()}, extras,
                         reduction=reduction, poly_variant=poly_variant, poly_m=poly_m)
        if kind == "cross":
            w = Tensor(rng.normal(0.0, 0.02, size=(self.cfg.hidden, 1)).astype(dtype),
                       requires_grad=True)
            return Model(self.cfg, "cross", {"enc": base.copy()}, {"cross.w": w},
                         reduction=reduction)
        raise ConfigError(f"cannot derive model kind {kind!r}")

    # ---- parameter access ----

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, tower in sorted(self.towers.items()):
            for name, t in tower.params.items():
                out[f"{prefix}.{name}"] = t
        out.update(self.extras)
        return out

    @property
    def dtype(self):
        return next(iter(self.towers.values())).dtype

    def astype(self, dtype) -> "Model":
        towers = {
            p: TransformerWeights(
                tw.cfg,
                {n: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
                 for n, t in tw.params.items()},
            )
            for p, tw in self.towers.items()
        }
        extras = {n: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
                  for n, t in self.extras.items()}
        return Model(self.cfg, self.kind, towers, extras, self.reduction,
                     self.poly_variant, self.poly_m, self.fingerprint)

    # ---- heads ----

    @property
    def cross_head(self) -> CrossHead:
        key = "cross.w" if self.kind == "cross" else "next.w"
        return CrossHead(self.extras[key])

    def poly_state(self) -> PolyHeadState:
        if self.kind != "poly":
            raise ConfigError(f"model kind {self.kind} has no poly head")
        return PolyHeadState(self.poly_variant, self.poly_m, self.extras.get("poly.codes"))

    def context_tower(self) -> TransformerWeights:
        return self.towers["ctxt" if "ctxt" in self.towers else "enc"]

    def candidate_tower(self) -> TransformerWeights:
        return self.towers["cand" if "cand" in self.towers else "enc"]


# ---- checkpoint serialization ----


def _header_dict(model: Model) -> dict:
    return {
        "config": model.cfg.to_dict(),
        "kind": model.kind,
        "poly_m": model.poly_m,
        "poly_variant": model.poly_variant,
        "reduction": model.reduction,
        "version": FORMAT_VERSION,
    }


def save_checkpoint(model: Model, path) -> str:
    """Write the checkpoint; returns the file fingerprint (sha256 hex)."""
    header = json.dumps(_header_dict(model), sort_keys=True, separators=(",", ":")).encode()
    records = sorted(model.named_parameters().items())
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", FORMAT_VERSION)
    blob += struct.pack("<I", len(header))
    blob += header
    blob += struct.pack("<I", len(records))
    for name, t in records:
        nb = name.encode()
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        blob += struct.pack("<I", len(nb))
        blob += nb
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    data = bytes(blob)
    with open(path, "wb") as f:
        f.write(data)
    fp = hashlib.sha256(data).hexdigest()
    model.fingerprint = fp
    return fp


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise ParseError(f"checkpoint truncated while reading {what}")
    return data


def load_checkpoint(path, dtype=np.float64) -> Model:
    with open(path, "rb") as f:
        raw = f.read()
    fp = hashlib.sha256(raw).hexdigest()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(raw):
            raise ParseError(f"{path}: checkpoint truncated while reading {what}")
        piece = raw[off:off + n]
        off += n
        return piece

    if take(len(MAGIC), "magic") != MAGIC:
        raise ParseError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", take(4, "header length"))
    header = json.loads(take(hlen, "header").decode())
    cfg = ModelConfig(**header["config"])
    (count,) = struct.unpack("<I", take(4, "record count"))
    flat: dict[str, Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode()
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape")) if ndim else ()
        nvals = int(np.prod(shape)) if shape else 1
        vals = np.frombuffer(take(8 * nvals, f"values of {name}"), dtype="<f8").reshape(shape)
        flat[name] = Tensor(vals.astype(dtype), requires_grad=True)

    kind = header["kind"]
    prefixes = {"pretrain": ["enc"], "cross": ["enc"], "bi": ["ctxt", "cand"],
                "poly": ["ctxt", "cand"]}.get(kind)
    if prefixes is None:
        raise ParseError(f"{path}: unknown model kind {kind!r} in header")
    towers = {}
    extras = {}
    for name, t in flat.items():
        prefix, _, rest = name.partition(".")
        if prefix in prefixes:
            towers.setdefault(prefix, {})[rest] = t
        else:
            extras[name] = t
    try:
        tower_objs = {p: TransformerWeights(cfg, params) for p, params in towers.items()}
    except ShapeError as e:
        raise ParseError(f"{path}: {e}") from e
    model = Model(cfg, kind, tower_objs, extras, reduction=header["reduction"],
                  poly_variant=header["poly_variant"], poly_m=header["poly_m"],
                  fingerprint=fp)
    return model


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# ---- text-level scoring frontend ----


class Scorer:
    """Glue from raw text to scores for one model + vocabulary.

    Context turns are flattened, encoded on the context tower and reduced or
    expanded per the model's head; candidates always go through the candidate
    tower. Truncation caps default to 360 context / 72 candidate tokens,
    clamped to the model's position table.
    """

    def __init__(self, model: Model, vocab: Vocabulary,
                 max_context_tokens: int | None = None,
                 max_candidate_tokens: int | None = None):
        if len(vocab) != model.cfg.vocab_size:
            raise ConfigError(
                f"vocabulary size {len(vocab)} does not match model vocab_size {model.cfg.vocab_size}"
            )
        self.model = model
        self.vocab = vocab
        cap = model.cfg.max_positions
        self.max_context = min(max_context_tokens or DEFAULT_MAX_CONTEXT_TOKENS, cap)
        self.max_candidate = min(max_candidate_tokens or DEFAULT_MAX_CANDIDATE_TOKENS, cap)
        self.max_pair = cap

    # encoding

    def encode_context(self, turns) -> TokenizedPair:
        return encode_single(flatten_context(list(turns)), self.vocab, self.max_context, segment=0)

    def encode_candidate(self, text: str) -> TokenizedPair:
        return encode_single(text, self.vocab, self.max_candidate, segment=0)

    def encode_cross(self, turns, cand: str) -> TokenizedPair:
        return encode_pair(flatten_context(list(turns)), cand, self.vocab, self.max_pair)

    # vectors

    def context_output(self, turns, train_mode=False, rng=None) -> TransformerOutput:
        return forward(self.encode_context(turns), self.model.context_tower(),
                       train_mode=train_mode, rng=rng)

    def context_vector(self, turns, train_mode=False, rng=None) -> Tensor:
        return reduce_output(self.context_output(turns, train_mode, rng), self.model.reduction)

    def candidate_vector(self, text: str, train_mode=False, rng=None) -> Tensor:
        out = forward(self.encode_candidate(text), self.model.candidate_tower(),
                      train_mode=train_mode, rng=rng)
        return reduce_output(out, self.model.reduction)

    def poly_vectors(self, turns, train_mode=False, rng=None) -> Tensor:
        return poly_context_vectors(self.context_output(turns, train_mode, rng),
                                    self.model.poly_state())

    # scores

    def score_bi(self, turns, cand: str) -> float:
        return bi_score(self.context_vector(turns), self.candidate_vector(cand)).item()

    def score_poly(self, turns, cand: str) -> float:
        return poly_score(self.poly_vectors(turns), self.candidate_vector(cand)).item()

    def score_cross(self, turns, cand: str, train_mode=False, rng=None) -> Tensor:
        return cross_score(self.encode_cross(turns, cand), self.model.context_tower(),
                           self.model.cross_head, train_mode=train_mode, rng=rng)
