"""Toy personalized QA model with concept tokens and ReMoH cross-attention.

Layout of one assembled sequence::

    [PERSON] c_1 .. c_N [\\PERSON]   (per referenced concept)
    question tokens (padded to ``question_len`` when batched)
    answer slots 1..P                 (appended by ``forward``)

Even blocks cross-attend from the sequence to the encoded frames through a
ReMoH (or top-k / all-shared) layer; odd blocks run self-attention and a
feed-forward layer whose frozen weights carry low-rank adapters.  Logits at
the answer slots use the frozen token table (tied) plus an adapter.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .attention import (
    AttentionDims,
    AttentionWeights,
    RouterWeights,
    init_attention,
    relu_router,
    init_routers,
    mha_forward,
    moh_topk_forward,
    remoh_forward,
)
from .errors import ConfigurationError, DimensionError, RegistrationError
from .tensor import Tensor, add, add_const, concat, matmul, no_grad, relu, reshape, rms_norm, take, transpose

ATTENTION_MODES = ("remoh", "moh-topk", "baseline")
GROUPS = ("tokens", "remoh", "lora", "encoder", "base")
CHECKPOINT_MAGIC = b"REMOHCK1"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    d_model: int = 64
    vocab_size: int = 169
    n_layers: int = 4
    heads: int = 8
    shared: int = 2
    active: int = 3  # b, routed heads meant to fire per token
    attention: str = "remoh"
    lora_rank: int = 8
    lora_scale: float = 1.0
    frames: int = 8
    encoder_layers: int = 4
    tokens_per_concept: int = 16
    max_concepts: int = 4
    question_len: int = 12
    answer_len: int = 14
    ffn_mult: int = 2
    temporal: bool = True
    memory_sink: bool = False
    open_id: int = 3
    close_id: int = 4
    pad_id: int = 0

    def __post_init__(self):
        if self.attention not in ATTENTION_MODES:
            raise ConfigurationError(f"attention must be one of {ATTENTION_MODES}, got {self.attention!r}")
        if min(self.d_model, self.vocab_size, self.heads, self.frames, self.question_len, self.answer_len) < 1:
            raise ConfigurationError("sizes must be positive")
        if self.n_layers < 1 or self.encoder_layers < 0:
            raise ConfigurationError("need n_layers >= 1 and encoder_layers >= 0")
        if self.tokens_per_concept < 0 or self.max_concepts < 0:
            raise ConfigurationError("token and concept counts must be nonnegative")
        if self.attention != "baseline":
            if not 0 <= self.shared < self.heads:
                raise ConfigurationError("need 0 <= shared < heads so at least one head is routed")
            if not 1 <= self.active <= self.heads - self.shared:
                raise ConfigurationError("need 1 <= active <= routed heads")
        if not 1 <= self.lora_rank <= self.d_model:
            raise ConfigurationError(f"lora_rank {self.lora_rank} must lie in [1, {self.d_model}]")
        if self.d_model % self.heads:
            raise ConfigurationError("d_model must be divisible by heads")

    @property
    def routed(self) -> int:
        return 0 if self.attention == "baseline" else self.heads - self.shared

    @property
    def cross_dims(self) -> AttentionDims:
        if self.attention == "baseline":
            return AttentionDims(self.d_model, self.heads, self.heads, 0)
        return AttentionDims(self.d_model, self.heads, self.shared, self.routed)

    @property
    def self_dims(self) -> AttentionDims:
        return AttentionDims(self.d_model, self.heads, self.heads, 0)

    @property
    def cross_layers(self) -> list[int]:
        return list(range(0, self.n_layers, 2))

    @property
    def max_len(self) -> int:
        return self.max_concepts * (self.tokens_per_concept + 2) + self.question_len + self.answer_len


@dataclass
class ConceptProfile:
    name: str
    tokens: Tensor
    delimiter_open: int
    delimiter_close: int
    active: bool = True

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


@dataclass
class LowRankAdapter:
    down: Tensor
    up: Tensor
    scale: float = 1.0

    @property
    def rank(self) -> int:
        return self.down.shape[1]

    def delta(self) -> np.ndarray:
        return self.scale * (self.down.data @ self.up.data)


def make_adapter(d_in: int, d_out: int, rank: int, rng: np.random.Generator, scale: float = 1.0,
                 name: str = "") -> LowRankAdapter:
    """Random ``down``, zero ``up``: the effective weight starts equal to the base."""
    if not 1 <= rank <= min(d_in, d_out):
        raise ConfigurationError(f"adapter rank {rank} exceeds min({d_in}, {d_out})")
    a = 1.0 / math.sqrt(d_in)
    return LowRankAdapter(Tensor(rng.uniform(-a, a, (d_in, rank)), True, f"{name}.down"),
                          Tensor(np.zeros((rank, d_out)), True, f"{name}.up"), scale)


def apply_lora(weight: Tensor, adapter: LowRankAdapter) -> Tensor:
    """``W + scale * down @ up`` as a differentiable tensor."""
    if adapter.rank > min(weight.shape):
        raise ConfigurationError(f"adapter rank {adapter.rank} exceeds min{weight.shape}")
    if adapter.down.shape[0] != weight.shape[0] or adapter.up.shape[1] != weight.shape[1]:
        raise DimensionError(f"adapter {adapter.down.shape}x{adapter.up.shape} does not fit weight {weight.shape}")
    delta = matmul(adapter.down, adapter.up)
    if adapter.scale != 1.0:
        delta = delta * adapter.scale
    return add(weight, delta)


def lora_matmul(x: Tensor, weight: Tensor, adapter: LowRankAdapter) -> Tensor:
    """``x @ (W + scale down up)`` computed as ``x W + scale (x down) up``."""
    low = matmul(matmul(x, adapter.down), adapter.up)
    if adapter.scale != 1.0:
        low = low * adapter.scale
    return add(matmul(x, weight), low)


@dataclass
class ConceptMask:
    """Per-concept token blocks of one query and whether each may be attended."""
    length: int
    blocks: dict[str, tuple[int, int]]
    attend: dict[str, bool]

    def vector(self) -> np.ndarray:
        v = np.ones(self.length, dtype=bool)
        for name, (lo, hi) in self.blocks.items():
            if not self.attend[name]:
                v[lo:hi] = False
        return v


@dataclass
class AssembledQuery:
    """Row recipe for one sequence; ``embedded`` is built from current parameters."""
    kind: np.ndarray      # 0 vocab token, 1 concept token
    ref: np.ndarray       # vocab id, or concept ordinal * N + token index
    mask: ConceptMask
    question_len: int
    targets: tuple[str, ...]
    embedded: Tensor | None = None

    def __iter__(self) -> Iterator:
        yield self.embedded
        yield self.mask

    def __len__(self) -> int:
        return len(self.kind)


class Model:
    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        self.seed = int(seed)
        self.params: dict[str, Tensor] = {}
        self.groups: dict[str, str] = {}
        self.concepts: list[ConceptProfile] = []
        self.stage = 1
        self.temporal_on = False
        self._rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(1,)))

    # -- parameter registry -------------------------------------------------
    def add(self, name: str, t: Tensor, group: str) -> Tensor:
        if group not in GROUPS:
            raise ValueError(f"unknown group {group!r}")
        if name in self.params:
            raise RegistrationError(f"duplicate parameter {name!r}")
        t.name = name
        self.params[name] = t
        self.groups[name] = group
        return t

    def named(self, group: str | None = None) -> list[tuple[str, Tensor]]:
        return [(k, v) for k, v in self.params.items() if group is None or self.groups[k] == group]

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(k, v) for k, v in self.params.items() if v.requires_grad]

    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def concept(self, name: str) -> ConceptProfile:
        for c in self.concepts:
            if c.name == name:
                return c
        raise KeyError(f"unknown concept {name!r}")

    def concept_names(self) -> list[str]:
        return [c.name for c in self.concepts]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    # -- structured views -----------------------------------------------------
    def cross(self, layer: int) -> tuple[AttentionWeights, RouterWeights | None]:
        p = self.params
        w = AttentionWeights(*(p[f"blk{layer}.x.{n}"] for n in ("W_Q", "W_K", "W_V", "W_O")))
        if self.cfg.routed == 0:
            return w, None
        return w, RouterWeights(*(p[f"blk{layer}.router.{n}"] for n in ("W_r", "b_r", "W_h", "b_h")))

    def adapter(self, prefix: str) -> LowRankAdapter:
        return LowRankAdapter(self.params[f"{prefix}.down"], self.params[f"{prefix}.up"], self.cfg.lora_scale)


def _uniform(rng, shape, fan_in, gain=1.0) -> np.ndarray:
    a = gain / math.sqrt(fan_in)
    return rng.uniform(-a, a, shape)


def build_model(cfg: ModelConfig, seed: int) -> Model:
    """Initialise every parameter from ``seed``; concept tokens come later via :func:`register_concept`."""
    m = Model(cfg, seed)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0,)))
    d, r = cfg.d_model, cfg.lora_rank
    hidden = cfg.ffn_mult * d
    m.add("embed", Tensor(rng.normal(0.0, 2.0 / math.sqrt(d), (cfg.vocab_size, d))), "base")
    m.add("pos", Tensor(rng.normal(0.0, 0.5 / math.sqrt(d), (cfg.max_len, d))), "base")
    m.add("slots", Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (cfg.answer_len, d)), True), "tokens")

    for i in range(cfg.encoder_layers):
        w = init_attention(cfg.self_dims, rng)
        for n in ("W_Q", "W_K", "W_V", "W_O"):
            m.add(f"enc{i}.attn.{n}", Tensor(0.5 * getattr(w, n).data), "encoder")
        m.add(f"enc{i}.ffn.W1", Tensor(_uniform(rng, (d, hidden), d, 0.5)), "encoder")
        m.add(f"enc{i}.ffn.W2", Tensor(_uniform(rng, (hidden, d), hidden, 0.5)), "encoder")
    m.add("temporal", Tensor(rng.normal(0.0, 0.1, (cfg.frames, d)), True), "remoh")
    m.add("null", Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (1, d)), True), "remoh")
    m.add("W_vis", Tensor(np.eye(d), True), "remoh")

    for layer in range(cfg.n_layers):
        if layer % 2 == 0:
            dims = cfg.cross_dims
            w = init_attention(dims, rng)
            for n in ("W_Q", "W_K", "W_V", "W_O"):
                m.add(f"blk{layer}.x.{n}", Tensor(getattr(w, n).data, True), "remoh")
            if dims.m:
                rw = init_routers(dims, rng)
                for n in ("W_r", "b_r", "W_h", "b_h"):
                    m.add(f"blk{layer}.router.{n}", Tensor(getattr(rw, n).data, True), "remoh")
        else:
            w = init_attention(cfg.self_dims, rng)
            for n in ("W_Q", "W_K", "W_V", "W_O"):
                m.add(f"blk{layer}.sa.{n}", Tensor(getattr(w, n).data), "base")
            for n in ("W_Q", "W_V", "W_O"):
                ad = make_adapter(d, d, r, rng, cfg.lora_scale)
                m.add(f"blk{layer}.sa.{n}.lora.down", ad.down, "lora")
                m.add(f"blk{layer}.sa.{n}.lora.up", ad.up, "lora")
            m.add(f"blk{layer}.ffn.W1", Tensor(_uniform(rng, (d, hidden), d)), "base")
            m.add(f"blk{layer}.ffn.W2", Tensor(_uniform(rng, (hidden, d), hidden)), "base")
            for n, (a, b) in (("W1", (d, hidden)), ("W2", (hidden, d))):
                ad = make_adapter(a, b, r, rng, cfg.lora_scale)
                m.add(f"blk{layer}.ffn.{n}.lora.down", ad.down, "lora")
                m.add(f"blk{layer}.ffn.{n}.lora.up", ad.up, "lora")
    ad = make_adapter(d, cfg.vocab_size, r, rng, cfg.lora_scale)
    m.add("out.lora.down", ad.down, "lora")
    m.add("out.lora.up", ad.up, "lora")
    stage_freeze(m, 1)
    return m


def parameter_count(cfg: ModelConfig, n_concepts: int = 0) -> int:
    """Closed-form parameter count of :func:`build_model` plus registered concepts."""
    d, V, r, h = cfg.d_model, cfg.vocab_size, cfg.lora_rank, cfg.ffn_mult * cfg.d_model
    attn = 4 * d * d
    total = V * d + cfg.max_len * d + cfg.answer_len * d
    total += cfg.encoder_layers * (attn + 2 * d * h)
    total += cfg.frames * d + d + d * d
    m = cfg.routed
    n_cross = len(cfg.cross_layers)
    total += n_cross * (attn + (m * d + m + 2 * d + 2 if m else 0))
    n_self = cfg.n_layers - n_cross
    total += n_self * (attn + 3 * 2 * d * r + 2 * d * h + 2 * (d * r + r * h) + 0)
    total += d * r + r * V
    return total + n_concepts * cfg.tokens_per_concept * d


def register_concept(model: Model, name: str, n_tokens: int | None = None) -> ConceptProfile:
    """Append ``n_tokens`` trainable vectors for a new subject."""
    n = model.cfg.tokens_per_concept if n_tokens is None else n_tokens
    if n < 1:
        raise RegistrationError(f"a concept needs at least one token, got {n}")
    if n != model.cfg.tokens_per_concept:
        raise RegistrationError(f"this model uses {model.cfg.tokens_per_concept} tokens per concept, got {n}")
    if name in model.concept_names():
        raise RegistrationError(f"concept {name!r} already registered")
    if len(model.concepts) >= model.cfg.max_concepts:
        raise RegistrationError(f"model holds at most {model.cfg.max_concepts} concepts")
    # per-name stream keeps registration order from changing other concepts' init
    key = sum((i + 1) * ord(ch) for i, ch in enumerate(name))
    rng = np.random.default_rng(np.random.SeedSequence(model.seed, spawn_key=(2, key)))
    d = model.cfg.d_model
    t = model.add(f"concept.{name}", Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (n, d)), True), "tokens")
    prof = ConceptProfile(name, t, model.cfg.open_id, model.cfg.close_id)
    model.concepts.append(prof)
    return prof


def stage_freeze(model: Model, stage: int) -> None:
    """Stage 1: train tokens, ReMoH and adapters. Stage 2: also the last ceil(L/4) encoder blocks."""
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage!r}")
    L = model.cfg.encoder_layers
    open_blocks = set(range(L - math.ceil(L / 4), L)) if stage == 2 else set()
    for name, t in model.params.items():
        g = model.groups[name]
        if g == "encoder":
            t.requires_grad = int(name.split(".")[0][3:]) in open_blocks
        else:
            t.requires_grad = g != "base"
    model.stage = stage
    model.temporal_on = stage == 2 and model.cfg.temporal


def unfrozen_encoder_blocks(model: Model) -> list[int]:
    return sorted({int(n.split(".")[0][3:]) for n, t in model.named("encoder") if t.requires_grad})


def census(model: Model) -> dict[str, int]:
    """Trainable parameter count per group under the current freeze state."""
    out = {g: 0 for g in GROUPS}
    for name, t in model.params.items():
        if t.requires_grad:
            out[model.groups[name]] += t.size
    out["total"] = sum(out[g] for g in GROUPS)
    return out


# ---------------------------------------------------------------------------
# queries

def assemble_query(model: Model, question_ids: Sequence[int], targets: Sequence[str] = (),
                   referenced: Sequence[str] | None = None, pad_to: int | None = None,
                   embed: bool = True) -> AssembledQuery:
    """Concept blocks for ``referenced`` (default: the targets) then the question.

    Blocks of referenced concepts that are not targets are masked.  ``pad_to``
    pads the question with ``<pad>`` rows, which are masked as keys.
    """
    targets = tuple(targets)
    referenced = targets if referenced is None else tuple(referenced)
    missing = [t for t in targets if t not in referenced]
    if missing:
        raise KeyError(f"targets {missing} are not among the referenced concepts")
    names = model.concept_names()
    kind, ref = [], []
    blocks, attend = {}, {}
    N = model.cfg.tokens_per_concept
    for c in referenced:
        if c not in names:
            raise KeyError(f"unknown concept {c!r}")
        ordinal = names.index(c)
        start = len(kind)
        kind += [0] + [1] * N + [0]
        ref += [model.cfg.open_id] + [ordinal * N + j for j in range(N)] + [model.cfg.close_id]
        blocks[c] = (start, len(kind))
        attend[c] = c in targets
    q = [int(i) for i in question_ids]
    if any(not 0 <= i < model.cfg.vocab_size for i in q):
        raise IndexError("question token id outside the vocabulary")
    if pad_to is not None:
        if len(q) > pad_to:
            raise DimensionError(f"question of {len(q)} tokens exceeds {pad_to}")
        qlen = len(q)
        q = q + [model.cfg.pad_id] * (pad_to - len(q))
    else:
        qlen = len(q)
    kind += [0] * len(q)
    ref += q
    mask = ConceptMask(len(kind), blocks, attend)
    aq = AssembledQuery(np.array(kind, dtype=np.int64), np.array(ref, dtype=np.int64), mask, qlen, targets)
    if embed:
        if len(kind):
            X = embed_queries(model, [aq], slots=False)
            aq.embedded = reshape(X, X.shape[1:])
        else:
            aq.embedded = Tensor(np.zeros((0, model.cfg.d_model)))
    return aq


def _row_table(model: Model) -> tuple[Tensor, int, int]:
    parts = [model.params["embed"]]
    if model.concepts:
        parts += [c.tokens for c in model.concepts]
    parts.append(model.params["slots"])
    V = model.cfg.vocab_size
    return concat(parts, axis=0), V, V + len(model.concepts) * model.cfg.tokens_per_concept


def embed_queries(model: Model, queries: Sequence[AssembledQuery], slots: bool = True):
    """Embed a batch of equal-length queries; returns ``(X, key_mask, slot_index)``.

    With ``slots=False`` only the embedded batch ``B x T x d`` is returned.
    """
    lengths = {len(q) for q in queries}
    if len(lengths) != 1:
        raise DimensionError(f"queries in a batch must share a length, got {sorted(lengths)}")
    T = lengths.pop()
    P = model.cfg.answer_len if slots else 0
    if T + P > model.cfg.max_len:
        raise DimensionError(f"sequence of {T + P} rows exceeds max_len {model.cfg.max_len}")
    table, concept_off, slot_off = _row_table(model)
    idx = np.empty((len(queries), T + P), dtype=np.int64)
    key_mask = np.ones((len(queries), T + P), dtype=bool)
    for b, q in enumerate(queries):
        idx[b, :T] = np.where(q.kind == 1, concept_off + q.ref, q.ref)
        idx[b, T:] = slot_off + np.arange(P)
        key_mask[b, :T] = q.mask.vector()
        key_mask[b, _prefix_len(q) + q.question_len:T] = False
    X = reshape(take(table, idx.reshape(-1), axis=0), (len(queries), T + P, model.cfg.d_model))
    X = add_const(X, model.params["pos"].data[: T + P])
    if not slots:
        return X
    return X, key_mask, np.arange(T, T + P)


def _prefix_len(q: AssembledQuery) -> int:
    return max((hi for lo, hi in q.mask.blocks.values()), default=0)


# ---------------------------------------------------------------------------
# forward

@dataclass
class ForwardResult:
    logits: Tensor                   # B x P x V
    traces: list                     # one ActivationTrace per cross layer
    routed: list                     # per cross layer: routed gates B x T x m (Tensor) or None
    row_mask: np.ndarray             # B x T rows counted for sparsity and traces
    memory: Tensor | None = None
    local: list = field(default_factory=list)  # routed gates with the router input detached


def encode_frozen(model: Model, frames: np.ndarray) -> np.ndarray:
    """Run the frozen leading encoder blocks without building a graph."""
    frames = np.asarray(frames, dtype=np.float64)
    n = _frozen_prefix(model)
    x = Tensor(frames)
    with no_grad():
        for i in range(n):
            x = _encoder_block(model, i, x)
    return x.data


def _frozen_prefix(model: Model) -> int:
    n = 0
    for i in range(model.cfg.encoder_layers):
        if model.params[f"enc{i}.attn.W_Q"].requires_grad:
            break
        n += 1
    return n


def _encoder_block(model: Model, i: int, x: Tensor) -> Tensor:
    p = model.params
    w = AttentionWeights(*(p[f"enc{i}.attn.{n}"] for n in ("W_Q", "W_K", "W_V", "W_O")))
    hN = rms_norm(x)
    x = add(x, mha_forward(hN, hN, w, model.cfg.self_dims))
    return add(x, matmul(relu(matmul(rms_norm(x), p[f"enc{i}.ffn.W1"])), p[f"enc{i}.ffn.W2"]))


TRACE_ROWS = ("all", "concept", "question", "slots")


def _trace_mask(queries: Sequence[AssembledQuery], key_mask: np.ndarray, rows: str) -> np.ndarray:
    if rows not in TRACE_ROWS:
        raise ValueError(f"trace_rows must be one of {TRACE_ROWS}, got {rows!r}")
    if rows == "all":
        return key_mask
    out = np.zeros_like(key_mask)
    T = len(queries[0])
    for b, q in enumerate(queries):
        if rows == "slots":
            out[b, T:] = True
        elif rows == "question":
            lo = _prefix_len(q)
            out[b, lo:lo + q.question_len] = True
        else:
            for name, (lo, hi) in q.mask.blocks.items():
                if q.mask.attend[name]:
                    out[b, lo + 1:hi - 1] = True
    return out


def _target_pool(model: Model, queries: Sequence[AssembledQuery], T: int) -> np.ndarray | None:
    """``B x 1 x T`` averaging weights over the concept-token rows of targeted blocks."""
    w = np.zeros((len(queries), 1, T))
    for b, q in enumerate(queries):
        rows = [i for name, (lo, hi) in q.mask.blocks.items() if q.mask.attend[name] for i in range(lo + 1, hi - 1)]
        if rows:
            w[b, 0, rows] = 1.0 / len(rows)
    return w if w.any() else None


def _broadcast_rows(v: Tensor, B: int, T: int) -> Tensor:
    """``B x d`` -> ``B x T x d`` by repeating each row."""
    return matmul(Tensor(np.ones((B, T, 1))), reshape(v, (B, 1, v.shape[-1])))


def forward(model: Model, frames, queries: Sequence[AssembledQuery], temporal: bool | None = None,
            encoded: np.ndarray | None = None, trace_rows: str = "all") -> ForwardResult:
    """Answer-slot logits for a batch of clips (``B x F x d`` or ``F x d``) and queries.

    ``encoded`` may carry the output of :func:`encode_frozen` to skip the
    frozen encoder prefix.  ``trace_rows`` picks the rows counted in the
    activation traces: ``all`` valid rows, ``concept`` (targeted concept
    tokens), ``question`` or ``slots``.
    """
    cfg = model.cfg
    if isinstance(queries, AssembledQuery):
        queries = [queries]
    src = encoded if encoded is not None else frames
    src = np.asarray(src.data if isinstance(src, Tensor) else src, dtype=np.float64)
    if src.ndim == 2:
        src = src[None]
    if src.ndim != 3 or src.shape[-1] != cfg.d_model:
        raise DimensionError(f"frames must be B x F x {cfg.d_model}, got {src.shape}")
    B, F, d = src.shape
    if B != len(queries):
        raise DimensionError(f"{B} clips for {len(queries)} queries")
    if F > cfg.frames:
        raise DimensionError(f"{F} frames exceed the configured {cfg.frames}")
    temporal = model.temporal_on if temporal is None else temporal

    if encoded is None:
        src = encode_frozen(model, src)
    x = Tensor(src)
    for i in range(_frozen_prefix(model), cfg.encoder_layers):
        x = _encoder_block(model, i, x)
    summary = x.mean(axis=1) if x.requires_grad else Tensor(x.data.mean(axis=1))
    if temporal:
        x = add(x, reshape(take(model.params["temporal"], np.tile(np.arange(F), B), axis=0), (B, F, d)))
    if cfg.memory_sink:
        null = reshape(take(model.params["null"], np.zeros(B, dtype=np.int64), axis=0), (B, 1, d))
        memory = concat([x, null], axis=1)
    else:
        memory = x

    X, key_mask, slot_idx = embed_queries(model, queries)
    T = X.shape[1]
    pool = _target_pool(model, queries, T)
    if pool is not None:
        # answer slots start from the mean embedding of the targeted concept tokens
        pooled = matmul(Tensor(pool), X)
        slot_rows = np.zeros((B, T, 1))
        slot_rows[:, slot_idx, 0] = 1.0
        X = add(X, matmul(Tensor(slot_rows), pooled))
    X = add(X, _broadcast_rows(matmul(summary, model.params["W_vis"]), B, T))
    row_mask = key_mask
    trace_mask = _trace_mask(queries, key_mask, trace_rows)
    traces, routed, local = [], [], []
    for layer in range(cfg.n_layers):
        if layer % 2 == 0:
            w, routers = model.cross(layer)
            h = rms_norm(X)
            if cfg.attention == "moh-topk":
                out, tr, hs = moh_topk_forward(h, memory, w, routers, cfg.cross_dims, cfg.active,
                                               row_mask=trace_mask, layer=layer, return_scores=True)
                routed.append(None)
            else:
                out, tr, hs = remoh_forward(h, memory, w, routers, cfg.cross_dims, row_mask=trace_mask,
                                            layer=layer, return_scores=True)
                routed.append(hs.routed)
                # same gates, differentiable in router weights only
                local.append(None if hs.routed is None else relu_router(routers, h.detach()))
            traces.append(tr)
            X = add(X, out)
        else:
            X = _self_block(model, layer, X, key_mask)
    hS = rms_norm(take(X, slot_idx, axis=1))
    ad = model.adapter("out.lora")
    logits = add(matmul(hS, transpose(model.params["embed"])),
                 scale_low(matmul(matmul(hS, ad.down), ad.up), ad.scale))
    return ForwardResult(logits, traces, routed, row_mask, memory, local)


def scale_low(t: Tensor, s: float) -> Tensor:
    return t if s == 1.0 else t * s


def _self_block(model: Model, layer: int, X: Tensor, key_mask: np.ndarray) -> Tensor:
    p = model.params
    pre = f"blk{layer}.sa"
    h = rms_norm(X)
    B, T, d = X.shape
    dims = model.cfg.self_dims
    Wq = apply_lora(p[f"{pre}.W_Q"], model.adapter(f"{pre}.W_Q.lora"))
    Wv = apply_lora(p[f"{pre}.W_V"], model.adapter(f"{pre}.W_V.lora"))
    Wo = apply_lora(p[f"{pre}.W_O"], model.adapter(f"{pre}.W_O.lora"))
    w = AttentionWeights(Wq, p[f"{pre}.W_K"], Wv, Wo)
    X = add(X, mha_forward(h, h, w, dims, key_mask=key_mask))
    h2 = rms_norm(X)
    fp = f"blk{layer}.ffn"
    mid = relu(lora_matmul(h2, p[f"{fp}.W1"], model.adapter(f"{fp}.W1.lora")))
    return add(X, lora_matmul(mid, p[f"{fp}.W2"], model.adapter(f"{fp}.W2.lora")))


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: Model, path) -> Path:
    """Magic, 4-byte header length, JSON header, then little-endian float64 payloads."""
    entries, chunks, offset = [], [], 0
    for name, t in model.params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "group": model.groups[name], "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "seed": model.seed,
        "stage": model.stage,
        "concepts": model.concept_names(),
        "params": entries,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(chunks))
    return path


def load_checkpoint(path) -> Model:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (n,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + n])
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    model = build_model(ModelConfig(**header["config"]), header["seed"])
    for c in header["concepts"]:
        register_concept(model, c)
    payload = blob[12 + n:]
    for e in header["params"]:
        t = model.params.get(e["name"])
        if t is None:
            raise ValueError(f"{path}: unexpected parameter {e['name']!r}")
        size = int(np.prod(e["shape"])) * 8
        arr = np.frombuffer(payload[e["offset"]:e["offset"] + size], dtype="<f8").reshape(e["shape"]).copy()
        if arr.shape != t.shape:
            raise ValueError(f"{path}: shape mismatch for {e['name']}")
        t.data = _readonly(arr)
    stage_freeze(model, header["stage"])
    return model


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a
