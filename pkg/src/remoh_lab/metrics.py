"""Existence accuracy, BLEU, activation heatmaps and the metrics report."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .attention import HeatmapTable, merge_traces, trace_summary
from .model import Model, forward
from .synth import DatasetManifest
from .templates import QAItem, Vocabulary, polarity_of, tokenize
from .tensor import no_grad
from .training import FrameCache, Telemetry, ensure_concepts, prepare

DESCRIPTIVE = ("appearance", "action", "location")


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypothesis: Sequence[str], reference: Sequence[str], max_n: int = 4) -> float:
    """Sentence BLEU: geometric mean of clipped n-gram precisions times brevity penalty.

    For ``n >= 2`` a precision with zero matches becomes ``1 / (count + 1)``
    (add-one on the zero count); unigram precision is never smoothed, so a
    hypothesis with no shared word scores 0.
    """
    if not reference:
        raise ValueError("bleu needs a nonempty reference")
    if max_n < 1:
        raise ValueError("max_n must be at least 1")
    hyp, ref = list(hypothesis), list(reference)
    if not hyp:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        total = sum(h.values())
        match = sum(min(c, r[g]) for g, c in h.items())
        if n == 1:
            if match == 0:
                return 0.0
            p = match / total
        elif match == 0:
            p = 1.0 / (total + 1)
        else:
            p = match / total
        log_p += math.log(p)
    c, rl = len(hyp), len(ref)
    bp = 1.0 if c > rl else math.exp(1.0 - rl / c)
    return float(bp * math.exp(log_p / max_n))


def existence_accuracy(predictions: Sequence[Sequence[str]], items: Sequence[QAItem]) -> float:
    """Fraction of existence items whose predicted polarity matches the reference answer's."""
    pairs = [(p, it) for p, it in zip(predictions, items) if it.category == "existence"]
    if not pairs:
        raise ValueError("no existence items to score")
    hits = sum(polarity_of(p) == polarity_of(tokenize(it.answer)) for p, it in pairs)
    return hits / len(pairs)


Predictor = Callable[[Sequence[QAItem]], list[list[str]]]


def predict(model: Model, manifest: DatasetManifest, items: Sequence[QAItem], batch_size: int = 32,
            vocab: Vocabulary | None = None) -> list[list[str]]:
    """Greedy per-slot decode of every item on its full clip."""
    vocab = vocab or manifest.vocabulary()
    ensure_concepts(model, manifest.names)
    data = prepare(model, vocab, items)
    cache = FrameCache(model, manifest)
    out: list[list[str]] = []
    with no_grad():
        for s in range(0, len(data), batch_size):
            chunk = data[s:s + batch_size]
            enc = cache.batch([b.clip_id for b in chunk], model.cfg.frames)
            res = forward(model, None, [b.query for b in chunk], encoded=enc, temporal=model.cfg.temporal)
            ids = res.logits.data.argmax(axis=-1)
            out += [vocab.decode(row) for row in ids]
    return out


def eval_existence(model, items: Sequence[QAItem], manifest: DatasetManifest | None = None) -> float:
    """Existence accuracy of ``model`` (a :class:`Model` or a predictor callable) on ``items``."""
    items = [it for it in items if it.category == "existence"]
    if not items:
        raise ValueError("eval split has no existence items")
    if isinstance(model, Model):
        if manifest is None:
            raise ValueError("a manifest is needed to look up clips")
        preds = predict(model, manifest, items)
    else:
        preds = model(items)
    return existence_accuracy(preds, items)


@dataclass
class MetricsReport:
    accuracy: float
    bleu: float | None
    per_category: dict = field(default_factory=dict)
    negative_accuracy: float | None = None
    loss_curve: list = field(default_factory=list)
    activation_rate: float | None = None

    def __post_init__(self):
        for name in ("accuracy", "bleu", "negative_accuracy"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} {v} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def evaluate(model: Model, manifest: DatasetManifest, telemetry: Telemetry | None = None,
             split: str = "eval", curve_points: int = 50) -> MetricsReport:
    items = manifest.split(split)
    if not items:
        raise ValueError(f"manifest has no {split!r} items")
    preds = predict(model, manifest, items)
    ex = [(p, it) for p, it in zip(preds, items) if it.category == "existence"]
    acc = existence_accuracy([p for p, _ in ex], [it for _, it in ex])
    neg = [(p, it) for p, it in ex if polarity_of(tokenize(it.answer)) == "negative"]
    neg_acc = existence_accuracy([p for p, _ in neg], [it for _, it in neg]) if neg else None
    per = {"existence": acc}
    scores = []
    for cat in DESCRIPTIVE:
        s = [bleu(p, tokenize(it.answer)) for p, it in zip(preds, items) if it.category == cat]
        if s:
            per[cat] = float(np.mean(s))
            scores += s
    curve, rate = [], None
    if telemetry is not None and len(telemetry):
        tot = telemetry.column("total")
        stride = max(1, len(tot) // curve_points)
        curve = [float(x) for x in tot[::stride]]
        rate = telemetry.tail_activation()
    return MetricsReport(acc, float(np.mean(scores)) if scores else None, per, neg_acc, curve, rate)


def activation_heatmap(model: Model, manifest: DatasetManifest, concept: str, split: str | None = None,
                       batch_size: int = 32, rows: str = "all") -> HeatmapTable:
    """Per-layer, per-routed-head activation rates on clips with and without ``concept``.

    Uses every existence item about ``concept`` (optionally one split only);
    rows are all valid query positions of those sequences.
    """
    if model.cfg.routed == 0:
        raise ValueError("activation heatmaps need routed heads")
    items = [q for q in manifest.qa if q.category == "existence" and q.subjects == [concept]
             and (split is None or q.split == split)]
    labelled = {"present": [], "absent": []}
    for it in items:
        present = concept in manifest.clip(it.clip_id).identities
        labelled["present" if present else "absent"].append(it)
    missing = [k for k, v in labelled.items() if not v]
    if missing:
        raise ValueError(f"concept {concept!r} has no {missing[0]} clips")
    vocab = manifest.vocabulary()
    ensure_concepts(model, manifest.names)
    cache = FrameCache(model, manifest)
    traces = []
    with no_grad():
        for label, its in labelled.items():
            data = prepare(model, vocab, its)
            for s in range(0, len(data), batch_size):
                chunk = data[s:s + batch_size]
                enc = cache.batch([b.clip_id for b in chunk], model.cfg.frames)
                res = forward(model, None, [b.query for b in chunk], encoded=enc, temporal=model.cfg.temporal,
                              trace_rows=rows)
                for tr in res.traces:
                    tr.label = label
                    traces.append(tr)
    return trace_summary(merge_traces(traces))
