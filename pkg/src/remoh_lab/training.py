"""Two-stage training with per-group RMSprop, sparsity control and telemetry."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, NumericError, TrainingDiverged
from .model import Model, assemble_query, encode_frozen, forward, register_concept, stage_freeze
from .objectives import SparsityState, counted_sparsity, layerwise, total_loss
from .synth import DatasetManifest
from .templates import QAItem, Vocabulary
from .tensor import cross_entropy, reshape

STAGE_CATEGORIES = {1: ("existence", "appearance"), 2: ("existence", "appearance", "action", "location")}


@dataclass
class TrainConfig:
    stage1_epochs: float = 1.0
    stage2_epochs: float = 7.0
    batch_size: int = 8
    lr_tokens: float = 1e-4
    lr_remoh: float = 1e-5
    lr_lora: float = 1e-5
    lr_encoder: float = 1e-5
    lr_scale: float = 300.0
    lr_floor: float = 0.05
    rho: float = 0.99
    eps: float = 1e-8
    clip_norm: float = 1.0
    use_spr: bool = True
    use_hae: bool = True
    beta0: float = 0.01
    k_scale: float = 2.0
    eps_indicator: float = 0.01
    max_steps: int | None = None
    sparsity_through_input: bool = False
    seed: int = 0

    def __post_init__(self):
        rates = (self.lr_tokens, self.lr_remoh, self.lr_lora, self.lr_encoder, self.lr_scale)
        if min(rates) <= 0 or not all(math.isfinite(r) for r in rates):
            raise ConfigurationError("learning rates must be finite and positive")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigurationError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if not 0 <= self.lr_floor <= 1:
            raise ConfigurationError("lr_floor must lie in [0, 1]")
        if not 0 < self.rho < 1 or self.eps <= 0 or self.clip_norm <= 0:
            raise ConfigurationError("need 0 < rho < 1, eps > 0, clip_norm > 0")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigurationError("max_steps must be nonnegative")

    def group_lr(self, group: str, progress: float = 0.0) -> float:
        """Rate for ``group`` at ``progress`` in [0, 1]: cosine decay down to ``lr_floor`` of the peak."""
        base = {"tokens": self.lr_tokens, "remoh": self.lr_remoh, "lora": self.lr_lora, "encoder": self.lr_encoder}
        decay = self.lr_floor + (1.0 - self.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * min(max(progress, 0.0), 1.0)))
        return base[group] * self.lr_scale * decay


class RMSProp:
    """Momentum-free RMSprop with one learning rate per parameter."""

    def __init__(self, rho: float = 0.99, eps: float = 1e-8):
        self.rho = rho
        self.eps = eps
        self.sq: dict[str, np.ndarray] = {}

    def step(self, params: Sequence[tuple[str, object, float]], grads: Sequence[np.ndarray]) -> None:
        for (name, t, lr), g in zip(params, grads):
            v = self.sq.get(name)
            v = (1 - self.rho) * g * g if v is None else self.rho * v + (1 - self.rho) * g * g
            self.sq[name] = v
            new = t.data - lr * g / (np.sqrt(v) + self.eps)
            new.setflags(write=False)
            t.data = new


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if norm > max_norm:
        f = max_norm / norm
        grads = [g * f for g in grads]
    return grads, norm


@dataclass
class Telemetry:
    records: list[dict] = field(default_factory=list)

    def append(self, rec: dict) -> None:
        self.records.append(rec)

    def column(self, key: str) -> list:
        return [r[key] for r in self.records]

    def __len__(self) -> int:
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl())
        return path

    @classmethod
    def read(cls, path) -> "Telemetry":
        return cls([json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()])

    def tail_activation(self, frac: float = 0.2) -> float | None:
        """Mean counted activation rate ``1 - R_s`` over the last ``frac`` of steps."""
        rs = [r["R_s"] for r in self.records if r.get("R_s") is not None]
        if not rs:
            return None
        k = max(1, int(math.ceil(frac * len(rs))))
        return 1.0 - float(np.mean(rs[-k:]))


@dataclass
class Batchable:
    item: QAItem
    clip_id: str
    query: object
    answer: np.ndarray


def answer_ids(vocab: Vocabulary, text: str, length: int) -> np.ndarray:
    ids = vocab.encode(text) + [vocab.eos_id]
    if len(ids) > length:
        raise ValueError(f"answer of {len(ids)} tokens exceeds {length} slots: {text!r}")
    return np.array(ids + [vocab.pad_id] * (length - len(ids)), dtype=np.int64)


def ensure_concepts(model: Model, names: Sequence[str]) -> None:
    """Register every manifest concept the model lacks (none when N is 0)."""
    if model.cfg.tokens_per_concept == 0:
        return
    have = set(model.concept_names())
    for n in names:
        if n not in have:
            register_concept(model, n)


def prepare(model: Model, vocab: Vocabulary, items: Sequence[QAItem]) -> list[Batchable]:
    names = model.concept_names()
    out = []
    for it in items:
        targets = [s for s in it.subjects if s in names]
        q = assemble_query(model, vocab.encode(it.question), targets, referenced=names,
                           pad_to=model.cfg.question_len, embed=False)
        out.append(Batchable(it, it.clip_id, q, answer_ids(vocab, it.answer, model.cfg.answer_len)))
    return out


class FrameCache:
    """Frozen-encoder outputs per (clip, frame count, frozen prefix)."""

    def __init__(self, model: Model, manifest: DatasetManifest):
        self.model = model
        self.manifest = manifest
        self.store: dict[tuple, np.ndarray] = {}

    def get(self, clip_id: str, frames: int) -> np.ndarray:
        prefix = sum(1 for n, t in self.model.named("encoder") if n.endswith("attn.W_Q") and not t.requires_grad)
        key = (clip_id, frames, prefix)
        hit = self.store.get(key)
        if hit is None:
            hit = encode_frozen(self.model, self.manifest.clip(clip_id).frames[:frames][None])[0]
            self.store[key] = hit
        return hit

    def batch(self, ids: Sequence[str], frames: int) -> np.ndarray:
        return np.stack([self.get(c, frames) for c in ids])


def stage_items(manifest: DatasetManifest, stage: int, split: str = "train") -> list[QAItem]:
    cats = STAGE_CATEGORIES[stage]
    return [q for q in manifest.qa if q.split == split and q.category in cats]


def train(model: Model, manifest: DatasetManifest, cfg: TrainConfig, telemetry_path=None,
          vocab: Vocabulary | None = None) -> tuple[Model, Telemetry]:
    """Stage 1 on first frames (existence/appearance), then stage 2 on full clips.

    Raises :class:`TrainingDiverged` when a loss term or gradient turns
    non-finite; the exception carries the last finite step and breakdown.
    """
    vocab = vocab or manifest.vocabulary()
    if len(vocab) != model.cfg.vocab_size:
        raise ConfigurationError(f"vocabulary has {len(vocab)} tokens, model expects {model.cfg.vocab_size}")
    if not any(q.split == "train" for q in manifest.qa):
        raise ValueError("manifest has no training split")
    ensure_concepts(model, manifest.names)
    tel = Telemetry()
    rng = np.random.default_rng(np.random.SeedSequence(int(cfg.seed), spawn_key=(7,)))
    routed = model.cfg.attention == "remoh"
    state = SparsityState(model.cfg.routed, model.cfg.active, cfg.beta0, cfg.k_scale, cfg.eps_indicator) if routed else None
    opt = RMSProp(cfg.rho, cfg.eps)
    cache = FrameCache(model, manifest)
    step = 0
    last = None
    budget = cfg.max_steps if cfg.max_steps is not None else math.inf
    planned = min(budget, sum(planned_batches(manifest, s, e, cfg.batch_size)
                              for s, e in ((1, cfg.stage1_epochs), (2, cfg.stage2_epochs))))

    for stage, epochs in ((1, cfg.stage1_epochs), (2, cfg.stage2_epochs)):
        if epochs <= 0 or step >= budget:
            continue
        stage_freeze(model, stage)
        frames = 1 if stage == 1 else model.cfg.frames
        data = prepare(model, vocab, stage_items(manifest, stage))
        if not data:
            continue
        n_batches = planned_batches(manifest, stage, epochs, cfg.batch_size)
        order = np.array([], dtype=np.int64)
        for _ in range(n_batches):
            if step >= budget:
                break
            if len(order) < cfg.batch_size:
                order = np.concatenate([order, rng.permutation(len(data))])
            idx, order = order[: cfg.batch_size], order[cfg.batch_size:]
            batch = [data[i] for i in idx]
            try:
                rec = _step(model, batch, cache, frames, cfg, state, opt, step, stage, step / max(planned, 1))
            except NumericError as e:
                raise TrainingDiverged(f"training diverged at step {step}: {e}",
                                       last_finite_step=None if last is None else last["step"], breakdown=last) from e
            tel.append(rec)
            last = rec
            step += 1
    if telemetry_path is not None:
        tel.write(telemetry_path)
    return model, tel


def planned_batches(manifest: DatasetManifest, stage: int, epochs: float, batch_size: int) -> int:
    n = len(stage_items(manifest, stage))
    if epochs <= 0 or n == 0:
        return 0
    return max(1, int(round(epochs * math.ceil(n / batch_size))))


def _clipped_grads(trainable, loss, max_norm):
    for _, t in trainable:
        t.grad = None
    loss.backward()
    grads = [t.grad if t.grad is not None else np.zeros(t.shape) for _, t in trainable]
    for _, t in trainable:
        t.grad = None
    return clip_global_norm(grads, max_norm)


def _step(model, batch, cache, frames, cfg, state, opt, step, stage, progress) -> dict:
    enc = cache.batch([b.clip_id for b in batch], frames)
    res = forward(model, None, [b.query for b in batch], encoded=enc)
    V = model.cfg.vocab_size
    targets = np.concatenate([b.answer for b in batch])
    lm = cross_entropy(reshape(res.logits, (-1, V)), targets)
    spr = hae = 0.0
    R_s = None
    if state is not None:
        masks = [res.row_mask] * len(res.routed)
        if cfg.use_spr or cfg.use_hae:
            gates = res.routed if cfg.sparsity_through_input else res.local
            spr, hae, R_s, _ = layerwise(gates, masks, state, cfg.use_spr, cfg.use_hae)
        else:
            R_s = counted_sparsity([r.data for r in res.routed], masks)
    elif model.cfg.routed:
        # top-k: fraction of routed gates that are zero, straight from the traces
        active = sum(int(t.active.sum()) for t in res.traces)
        total = sum(t.total * len(t.active) for t in res.traces)
        R_s = 1.0 - active / total if total else None
    br = total_loss(lm, spr, hae)
    trainable = model.trainable()
    grads, norm = _clipped_grads(trainable, lm, cfg.clip_norm)
    reg = [x for x in (spr, hae) if not isinstance(x, float)]
    if reg and not cfg.sparsity_through_input:
        # the router-local sparsity terms get their own clipping budget
        reg_t = reg[0] if len(reg) == 1 else reg[0] + reg[1]
        if reg_t.requires_grad:
            g2, _ = _clipped_grads(trainable, reg_t, cfg.clip_norm)
            grads = [a + b for a, b in zip(grads, g2)]
    elif reg:
        grads, norm = _clipped_grads(trainable, br.tensor, cfg.clip_norm)
    params = [(n, t, cfg.group_lr(model.groups[n], progress)) for n, t in trainable]
    opt.step(params, grads)
    for _, t in trainable:
        t.grad = None
        if not np.isfinite(t.data).all():
            raise NumericError(f"non-finite parameter {t.name}")
    beta = None
    if state is not None:
        beta = state.beta
        if cfg.use_spr and R_s is not None:
            state.advance(R_s)
    return {"step": step, "stage": stage, "lm": br.lm, "spr": br.spr, "hae": br.hae, "total": br.total,
            "beta": beta, "R_s": R_s, "T_s": None if state is None else state.T_s, "grad_norm": norm}
