"""Synthetic identities, clips and QA datasets mirroring the composition axes.

A clip is an ``F x d`` float matrix.  Identity patterns are unit vectors;
everything that is not an identity (scenario, outfit, motion, noise) is
projected off the protected concept patterns so that presence is decided by
the identity strength alone.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .templates import ACTIONS, OUTFITS, SCENARIOS, QAItem, Vocabulary, qa_from_template

SCHEMA_VERSION = 1
TAU = 0.5
MARGIN = 0.1

# per-profile generator knobs
PROFILES = {
    "anchor": dict(strength=(1.0, 1.2), sigma=0.10, scenario=1.0, outfit=0.8, action=0.8),
    "context-rich": dict(strength=(0.7, 1.0), sigma=0.20, scenario=1.5, outfit=0.8, action=0.6),
    "high-fidelity-motion": dict(strength=(1.0, 1.4), sigma=0.05, scenario=0.6, outfit=0.8, action=1.0),
    "negative-hard": dict(strength=(0.8, 1.0), sigma=0.15, scenario=1.0, outfit=0.8, action=0.8),
    "negative-random": dict(strength=(0.8, 1.2), sigma=0.15, scenario=1.0, outfit=0.8, action=0.8),
}
POSITIVE_PROFILES = ("anchor", "context-rich", "high-fidelity-motion")

# dataset strata (the four ablation toggles) and the profile each draws from
STRATA = ("anchor", "negative", "context-rich", "high-fidelity")
STRATUM_PROFILE = {
    "anchor": "anchor",
    "context-rich": "context-rich",
    "high-fidelity": "high-fidelity-motion",
    "hard-negative": "negative-hard",
    "random-negative": "negative-random",
}
DATA_CONFIGS = {
    "one-positive": ("anchor",),
    "+negative": ("anchor", "negative"),
    "+context-rich": ("anchor", "negative", "context-rich"),
    "+high-fidelity": ("anchor", "negative", "context-rich", "high-fidelity"),
}
POSITIVES_ONLY = ("anchor", "context-rich", "high-fidelity")

_STREAMS = {"identity": 0, "basis": 1, "clip": 2, "qa": 3, "split": 4, "distractor": 5}


def substream(root: int, name: str, *idx: int) -> np.random.Generator:
    """Independent generator for a named stream and record index."""
    return np.random.default_rng(np.random.SeedSequence(int(root), spawn_key=(_STREAMS[name],) + tuple(idx)))


@dataclass
class IdentitySignature:
    id: str
    pattern: np.ndarray
    seed: int

    def __post_init__(self):
        self.pattern = np.asarray(self.pattern, dtype=np.float64)


def gen_identity(seed: int, d: int = 64, id: str | None = None) -> IdentitySignature:
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    v = rng.standard_normal(d)
    return IdentitySignature(id or f"id{seed}", v / np.linalg.norm(v), int(seed))


def orthonormalize(patterns: Sequence[np.ndarray], drop_dependent: bool = False) -> list[np.ndarray]:
    """Gram-Schmidt in order; raises on (near) linear dependence unless told to drop."""
    out: list[np.ndarray] = []
    for p in patterns:
        v = np.array(p, dtype=np.float64)
        for q in out:
            v = v - (v @ q) * q
        n = np.linalg.norm(v)
        if n < 1e-8:
            if drop_dependent:
                continue
            raise ValueError("patterns are linearly dependent")
        out.append(v / n)
    return out


def _projector_off(protect: Sequence[np.ndarray], d: int) -> np.ndarray:
    if not len(protect):
        return np.eye(d)
    Q = np.stack(orthonormalize(protect, drop_dependent=True), axis=1)
    return np.eye(d) - Q @ Q.T


@dataclass
class AttributeBasis:
    """Unit directions for every outfit, action and scenario tag."""
    outfits: dict[str, np.ndarray]
    actions: dict[str, np.ndarray]
    scenarios: dict[str, np.ndarray]

    @classmethod
    def generate(cls, d: int, rng: np.random.Generator, protect: Sequence[np.ndarray] = ()) -> "AttributeBasis":
        P = _projector_off(protect, d)

        def draw(tags):
            out = {}
            for t in tags:
                v = P @ rng.standard_normal(d)
                out[t] = v / np.linalg.norm(v)
            return out
        return cls(draw(OUTFITS), draw(ACTIONS), draw(SCENARIOS))


@dataclass
class SyntheticClip:
    id: str
    frames: np.ndarray
    identities: list[str]
    profile: str
    scenario: str | None
    attrs: dict = field(default_factory=dict)
    stratum: str = ""
    split: str = ""
    concept: str = ""

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def record(self, path: str) -> dict:
        return {
            "kind": "clip", "id": self.id, "path": path, "shape": list(self.frames.shape),
            "identities": self.identities, "profile": self.profile, "scenario": self.scenario,
            "attrs": self.attrs, "stratum": self.stratum, "split": self.split, "concept": self.concept,
        }


def render_clip(
    identities: Sequence[IdentitySignature],
    scenario: str | None,
    profile: str,
    sigma: float | None = None,
    seed=0,
    *,
    frames: int = 8,
    basis: AttributeBasis | None = None,
    attrs: dict | None = None,
    protect: Sequence[np.ndarray] = (),
    strengths: Sequence[float] | None = None,
    clip_id: str = "",
) -> SyntheticClip:
    """Compose a clip from identity patterns plus scenario, outfit, motion and noise.

    ``attrs`` maps identity id to ``{"outfit": tag, "action": tag}``; the
    motion component ramps from 0 at the first frame to full at the last.
    ``protect`` lists patterns that non-identity content must not touch
    (identities in the clip are always protected).
    """
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}")
    knobs = PROFILES[profile]
    if profile in POSITIVE_PROFILES and not identities:
        raise ValueError(f"profile {profile!r} needs at least one identity")
    rng = np.random.default_rng(seed)
    d = identities[0].pattern.shape[0] if identities else (len(protect[0]) if len(protect) else None)
    if d is None:
        if basis is None:
            raise ValueError("cannot infer width without identities, protected patterns or a basis")
        d = len(next(iter(basis.scenarios.values())))
    sigma = knobs["sigma"] if sigma is None else float(sigma)
    if strengths is None:
        lo, hi = knobs["strength"]
        strengths = rng.uniform(lo, hi, len(identities))
    if len(strengths) != len(identities):
        raise ValueError("one strength per identity")
    attrs = attrs or {}

    ramp = np.linspace(0.0, 1.0, frames) if frames > 1 else np.zeros(1)
    other = np.zeros((frames, d))
    if scenario is not None:
        if basis is None:
            raise ValueError("a scenario needs an attribute basis")
        other += knobs["scenario"] * basis.scenarios[scenario]
    for ident in identities:
        a = attrs.get(ident.id)
        if not a:
            continue
        if basis is None:
            raise ValueError("attributes need an attribute basis")
        other += knobs["outfit"] * basis.outfits[a["outfit"]]
        other += knobs["action"] * np.outer(ramp, basis.actions[a["action"]])
    if sigma > 0:
        other += sigma * rng.standard_normal((frames, d))
    P = _projector_off(list(protect) + [i.pattern for i in identities], d)
    out = other @ P.T
    # small per-frame jitter of the identity strength
    for ident, s in zip(identities, strengths):
        jitter = 1.0 + 0.05 * rng.uniform(-1.0, 1.0, frames) if sigma > 0 else np.ones(frames)
        out += np.outer(s * jitter, ident.pattern)
    return SyntheticClip(clip_id, out, [i.id for i in identities], profile, scenario, dict(attrs))


def projections(clip: SyntheticClip, pattern: np.ndarray) -> np.ndarray:
    """Per-frame projection of the clip onto a unit pattern."""
    return clip.frames @ pattern


def check_band(band) -> tuple[float, float]:
    lo, hi = float(band[0]), float(band[1])
    if not (0.0 <= lo <= hi < 1.0):
        raise ValueError(f"similarity band must satisfy 0 <= lo <= hi < 1, got {band}")
    return lo, hi


def similar_signature(identity: IdentitySignature, band, rng: np.random.Generator, id: str = "") -> tuple[IdentitySignature, float]:
    """A unit pattern whose cosine to ``identity`` is drawn uniformly from ``band``."""
    lo, hi = check_band(band)
    c = lo if lo == hi else float(rng.uniform(lo, hi))
    p = identity.pattern
    q = rng.standard_normal(p.shape[0])
    q -= (q @ p) * p
    q /= np.linalg.norm(q)
    v = c * p + math.sqrt(1.0 - c * c) * q
    return IdentitySignature(id or f"{identity.id}-hn", v / np.linalg.norm(v), identity.seed), c


def hard_negative(
    identity: IdentitySignature,
    band=(0.7, 0.95),
    seed=0,
    *,
    scenario: str | None = None,
    basis: AttributeBasis | None = None,
    attrs: dict | None = None,
    protect: Sequence[np.ndarray] = (),
    frames: int = 8,
    clip_id: str = "",
) -> SyntheticClip:
    """Clip of a distractor similar to ``identity``; the target is labeled absent.

    The distractor strength is capped so its projection on the target stays
    at most ``TAU - MARGIN``.
    """
    rng = np.random.default_rng(seed)
    sig, c = similar_signature(identity, band, rng, id=f"{clip_id or identity.id}-distractor")
    lo, hi = PROFILES["negative-hard"]["strength"]
    cap = 1.2 if c <= 0 else min(1.2, (TAU - MARGIN) / (c * 1.05))
    s = float(rng.uniform(lo, hi)) * cap
    if attrs is not None and identity.id in attrs:
        attrs = {sig.id: attrs[identity.id]}
    clip = render_clip([sig], scenario, "negative-hard", None, rng, frames=frames, basis=basis, attrs=attrs,
                       protect=[identity.pattern] + list(protect), strengths=[s], clip_id=clip_id)
    clip.attrs["cosine"] = c
    return clip


def random_negative(
    targets: Sequence[IdentitySignature],
    seed=0,
    *,
    max_cos: float = 0.25,
    scenario: str | None = None,
    basis: AttributeBasis | None = None,
    attrs: dict | None = None,
    frames: int = 8,
    clip_id: str = "",
) -> SyntheticClip:
    """Clip of an unrelated identity with ``|cos| <= max_cos`` to every target."""
    rng = np.random.default_rng(seed)
    d = targets[0].pattern.shape[0]
    for _ in range(10000):
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        if all(abs(v @ t.pattern) <= max_cos for t in targets):
            break
    else:  # pragma: no cover - practically unreachable for d >= 16
        raise RuntimeError("could not draw a random negative")
    sig = IdentitySignature(f"{clip_id or 'rnd'}-distractor", v, 0)
    if attrs is not None:
        attrs = {sig.id: next(iter(attrs.values()))}
    clip = render_clip([sig], scenario, "negative-random", None, rng, frames=frames, basis=basis, attrs=attrs,
                       protect=[t.pattern for t in targets], clip_id=clip_id)
    clip.attrs["cosine"] = float(max(abs(v @ t.pattern) for t in targets))
    return clip


# ---------------------------------------------------------------------------
# dataset composition

@dataclass
class CompositionConfig:
    concepts: int = 2
    d_model: int = 64
    frames: int = 8
    anchor: int = 1
    context_rich: int = 20
    high_fidelity: int = 20
    hard_negative: int = 20
    random_negative: int = 10
    two_entity: int = 0
    qa_per_clip: int = 18
    eval_fraction: float = 0.2
    hard_band: tuple = (0.7, 0.95)
    random_max_cos: float = 0.25

    def __post_init__(self):
        self.hard_band = tuple(float(x) for x in self.hard_band)
        counts = (self.concepts, self.anchor, self.context_rich, self.high_fidelity,
                  self.hard_negative, self.random_negative, self.two_entity, self.qa_per_clip)
        if min(counts) < 0:
            raise ValueError("counts must be nonnegative")
        if self.frames < 1 or self.d_model < 2:
            raise ValueError("frames and d_model must be positive")
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ValueError("eval_fraction must lie in [0, 1)")
        check_band(self.hard_band)

    def names(self) -> list[str]:
        return [f"sks{i + 1}" for i in range(self.concepts)]


@dataclass
class DatasetManifest:
    header: dict
    concepts: dict[str, IdentitySignature]
    clips: list[SyntheticClip]
    qa: list[QAItem]

    @property
    def names(self) -> list[str]:
        return list(self.concepts)

    def clip(self, clip_id: str) -> SyntheticClip:
        return self._by_id()[clip_id]

    def _by_id(self) -> dict[str, SyntheticClip]:
        cache = getattr(self, "_index", None)
        if cache is None or len(cache) != len(self.clips):
            cache = {c.id: c for c in self.clips}
            self._index = cache
        return cache

    def split(self, name: str) -> list[QAItem]:
        return [q for q in self.qa if q.split == name]

    def filter(self, strata: Sequence[str], splits: Sequence[str] = ("train",)) -> "DatasetManifest":
        """Keep ``splits`` QA restricted to ``strata``; QA of other splits is kept whole."""
        bad = set(strata) - set(STRATA)
        if bad:
            raise ValueError(f"unknown strata {sorted(bad)}")
        keep = set(strata)
        qa = [q for q in self.qa if q.split not in splits or q.stratum in keep]
        used = {q.clip_id for q in qa}
        clips = [c for c in self.clips if c.id in used]
        header = dict(self.header, strata=sorted(keep))
        return DatasetManifest(header, self.concepts, clips, qa)

    def counts(self) -> dict:
        out: dict[str, int] = {}
        for c in self.clips:
            key = f"{c.split}/{c.profile}"
            out[key] = out.get(key, 0) + 1
        return out

    def vocabulary(self) -> Vocabulary:
        return Vocabulary.build(self.names)

    # -- serialization -----------------------------------------------------
    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        (out / "clips").mkdir(parents=True, exist_ok=True)
        lines = [json.dumps(self._header_record(), sort_keys=True, separators=(",", ":"))]
        for c in self.clips:
            rel = f"clips/{c.id}.f64"
            (out / rel).write_bytes(np.ascontiguousarray(c.frames, dtype="<f8").tobytes())
            lines.append(json.dumps(c.record(rel), sort_keys=True, separators=(",", ":")))
        for q in self.qa:
            lines.append(json.dumps(q.to_record(), sort_keys=True, separators=(",", ":")))
        path = out / "manifest.jsonl"
        path.write_text("\n".join(lines) + "\n")
        return path

    def _header_record(self) -> dict:
        h = dict(self.header)
        h["kind"] = "header"
        h["schema_version"] = SCHEMA_VERSION
        h["concepts"] = {k: {"pattern": v.pattern.tolist(), "seed": v.seed} for k, v in self.concepts.items()}
        return h

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.jsonl"
        root = path.parent
        header = None
        clips, qa = [], []
        for n, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.get("kind")
            if kind == "header":
                if rec.get("schema_version") != SCHEMA_VERSION:
                    raise ValueError(f"unsupported manifest schema {rec.get('schema_version')!r}")
                header = rec
            elif kind == "clip":
                frames = np.frombuffer((root / rec["path"]).read_bytes(), dtype="<f8").reshape(rec["shape"]).copy()
                clips.append(SyntheticClip(rec["id"], frames, rec["identities"], rec["profile"], rec["scenario"],
                                           rec["attrs"], rec["stratum"], rec["split"], rec["concept"]))
            elif kind == "qa":
                qa.append(QAItem.from_record(rec))
            else:
                raise ValueError(f"{path}:{n}: unknown record kind {kind!r}")
        if header is None:
            raise ValueError(f"{path}: missing header record")
        concepts = {k: IdentitySignature(k, np.array(v["pattern"]), v["seed"]) for k, v in header.pop("concepts").items()}
        header = {k: v for k, v in header.items() if k not in ("kind", "schema_version")}
        return cls(header, concepts, clips, qa)


def _qa_plan(n: int, positive: bool, others: bool) -> list[tuple[str, bool]]:
    """Category schedule for one clip: ``(category, about_other_concept)`` pairs."""
    if positive:
        cycle = [("existence", False), ("appearance", False), ("existence", False), ("action", False),
                 ("location", False)] + ([("existence", True)] if others else [("existence", False)])
    else:
        cycle = [("existence", False), ("existence", False)] + ([("existence", True)] if others else [("existence", False)])
    return [cycle[i % len(cycle)] for i in range(n)]


def build_dataset(cfg: CompositionConfig | None = None, seed: int = 0) -> DatasetManifest:
    """Generate every stratum for every concept, split clips, and expand QA.

    QA about a concept absent from the clip (hard/random negatives and the
    cross-concept existence checks on positives) belongs to the ``negative``
    stratum so the ablation toggles can drop it.
    """
    cfg = cfg or CompositionConfig()
    names = cfg.names()
    d = cfg.d_model
    raw = [gen_identity(int(substream(seed, "identity", i).integers(2**31)), d, n).pattern for i, n in enumerate(names)]
    pats = orthonormalize(raw) if raw else []
    concepts = {n: IdentitySignature(n, p, i) for i, (n, p) in enumerate(zip(names, pats))}
    basis = AttributeBasis.generate(d, substream(seed, "basis"), protect=pats)
    protect = list(pats)

    clips: list[SyntheticClip] = []
    order = [("anchor", cfg.anchor), ("context-rich", cfg.context_rich), ("high-fidelity", cfg.high_fidelity),
             ("hard-negative", cfg.hard_negative), ("random-negative", cfg.random_negative)]
    for ci, name in enumerate(names):
        sig = concepts[name]
        for si, (kind, count) in enumerate(order):
            for j in range(count):
                rng = substream(seed, "clip", ci, si, j)
                cid = f"{name}-{kind}-{j:03d}"
                scen = SCENARIOS[int(rng.integers(len(SCENARIOS)))]
                att = {"outfit": OUTFITS[int(rng.integers(len(OUTFITS)))],
                       "action": ACTIONS[int(rng.integers(len(ACTIONS)))]}
                if kind == "hard-negative":
                    c = hard_negative(sig, cfg.hard_band, rng, scenario=scen, basis=basis, attrs={name: att},
                                      protect=protect, frames=cfg.frames, clip_id=cid)
                elif kind == "random-negative":
                    c = random_negative(list(concepts.values()), rng, max_cos=cfg.random_max_cos, scenario=scen,
                                        basis=basis, attrs={name: att}, frames=cfg.frames, clip_id=cid)
                else:
                    c = render_clip([sig], scen, STRATUM_PROFILE[kind], None, rng, frames=cfg.frames, basis=basis,
                                    attrs={name: att}, protect=protect, clip_id=cid)
                c.stratum = "negative" if kind.endswith("negative") else kind
                c.concept = name
                clips.append(c)
    for j in range(cfg.two_entity if len(names) >= 2 else 0):
        rng = substream(seed, "clip", len(names), 0, j)
        a, b = names[(2 * j) % len(names)], names[(2 * j + 1) % len(names)]
        scen = SCENARIOS[int(rng.integers(len(SCENARIOS)))]
        att = {n: {"outfit": OUTFITS[int(rng.integers(len(OUTFITS)))], "action": ACTIONS[int(rng.integers(len(ACTIONS)))]}
               for n in (a, b)}
        c = render_clip([concepts[a], concepts[b]], scen, "context-rich", None, rng, frames=cfg.frames,
                        basis=basis, attrs=att, protect=protect, clip_id=f"pair-{j:03d}")
        c.stratum, c.concept = "context-rich", a
        clips.append(c)

    # split: anchors always train, other clips held out per (concept, stratum) group
    groups: dict[tuple, list[SyntheticClip]] = {}
    for c in clips:
        groups.setdefault((c.concept, c.id.rsplit("-", 1)[0]), []).append(c)
    for gi, (key, members) in enumerate(sorted(groups.items())):
        n_eval = 0 if key[1].endswith("anchor") else int(round(cfg.eval_fraction * len(members)))
        pick = set(substream(seed, "split", gi).permutation(len(members))[:n_eval].tolist())
        for k, c in enumerate(members):
            c.split = "eval" if k in pick else "train"

    qa: list[QAItem] = []
    for k, c in enumerate(clips):
        positive = c.profile in POSITIVE_PROFILES
        others = [n for n in names if n != c.concept]
        rng = substream(seed, "qa", k)
        for cat, about_other in _qa_plan(cfg.qa_per_clip, positive, bool(others)):
            subj = others[int(rng.integers(len(others)))] if about_other else c.concept
            if c.id.startswith("pair-") and cat == "existence" and not about_other:
                subj = c.identities[int(rng.integers(len(c.identities)))]
            item = qa_from_template(c, cat, [subj], rng)
            item.split = c.split
            item.stratum = "negative" if item.polarity == "negative" else c.stratum
            qa.append(item)

    header = {"seed": int(seed), "config": _jsonable(asdict(cfg)), "strata": list(STRATA)}
    return DatasetManifest(header, concepts, clips, qa)


def _jsonable(x):
    if isinstance(x, tuple):
        return list(x)
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    return x


def presence_audit(manifest: DatasetManifest, tau: float = TAU) -> dict[str, int]:
    """Count label violations: listed concepts below ``tau`` or unlisted above it."""
    bad_pos = bad_neg = 0
    for c in manifest.clips:
        for name, sig in manifest.concepts.items():
            proj = projections(c, sig.pattern)
            if name in c.identities:
                bad_pos += int((proj <= tau).any())
            else:
                bad_neg += int((proj >= tau).any())
    return {"positive_violations": bad_pos, "negative_violations": bad_neg}


def default_out_root() -> Path:
    return Path(os.environ.get("REMOH_LAB_OUT", "runs"))
