"""Template binding, the closed vocabulary, and QA item construction."""
from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ._banks import (
    DESCRIPTIVE_QUESTIONS,
    EXISTENCE_NO,
    EXISTENCE_QUESTIONS,
    EXISTENCE_YES,
    PAIR_BOTH_NO,
    PAIR_BOTH_YES,
    PAIR_MIXED,
    PAIR_QUESTIONS,
)

CATEGORIES = ("existence", "appearance", "action", "location")

ACTION_ROWS = (0, 1, 2, 3, 4)
APPEARANCE_ROWS = (5, 6, 7, 8, 9, 11)  # row 12 of the bank is an appearance question
LOCATION_ROWS = (10, 12, 13, 14, 15)
DESCRIPTIVE_ROWS = {"action": ACTION_ROWS, "appearance": APPEARANCE_ROWS, "location": LOCATION_ROWS}

OUTFITS = ("red jacket", "blue shirt", "green coat", "black suit", "white dress", "yellow sweater")
ACTIONS = ("walking", "running", "waving", "dancing", "cooking", "reading")
SCENARIOS = (
    "gym", "restaurant", "school", "office", "park", "kitchen",
    "hospital", "library", "street", "beach", "laboratory", "living room",
)

DESCRIPTIVE_ANSWERS = {
    "appearance": "<sks> is wearing a {outfit}.",
    "action": "<sks> is {action} in this video.",
    "location": "<sks> is in the {scenario}.",
}

PAD, EOS, UNK = "<pad>", "<eos>", "<unk>"
PERSON_OPEN, PERSON_CLOSE = "[PERSON]", "[\\PERSON]"
SPECIALS = (PAD, EOS, UNK, PERSON_OPEN, PERSON_CLOSE)

NEGATION_WORDS = frozenset({"no", "not", "cannot", "absent", "neither", "nor"})

_TOKEN = re.compile(r"[a-z0-9]+|'[a-z]+|[^\sa-z0-9']")
_PLACEHOLDER = re.compile(r"<sks\d?>")


def bind(text: str, names: Sequence[str]) -> str:
    """Replace ``<sks>`` (or ``<sks1>``, ``<sks2>``) with concept names."""
    def sub(m):
        tag = m.group(0)
        idx = 0 if tag == "<sks>" else int(tag[4:-1]) - 1
        if idx >= len(names):
            raise ValueError(f"template needs {idx + 1} subjects, got {len(names)}")
        return names[idx]
    out = _PLACEHOLDER.sub(sub, text)
    if _PLACEHOLDER.search(out):
        raise ValueError(f"unbound placeholder in {out!r}")
    return out


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def polarity_of(tokens: Iterable[str]) -> str:
    """``"negative"`` if any negation word occurs, else ``"positive"``."""
    return "negative" if any(t in NEGATION_WORDS for t in tokens) else "positive"


@dataclass
class QAItem:
    category: str
    question: str
    answer: str
    polarity: str
    subjects: list[str]
    clip_id: str = ""
    template: int = 0
    stratum: str = ""
    split: str = ""

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["kind"] = "qa"
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "QAItem":
        rec = {k: v for k, v in rec.items() if k != "kind"}
        return cls(**rec)


def _present(clip, name: str, concept_ids: dict | None) -> bool:
    ident = concept_ids.get(name, name) if concept_ids else name
    return ident in clip.identities


def qa_from_template(clip, category: str, concepts: Sequence[str], seed, concept_ids: dict | None = None,
                     entities: int | None = None) -> QAItem:
    """Draw one templated QA pair about ``concepts`` for ``clip``.

    Existence items pick a question row and the answer from the same row of
    the yes/no (or two-subject) bank.  Descriptive items need the subject to
    be present and answer from the clip's attributes.
    """
    if category not in CATEGORIES:
        raise ValueError(f"unknown QA category {category!r}")
    entities = len(concepts) if entities is None else entities
    if entities not in (1, 2):
        raise ValueError("templates cover one or two subjects")
    if len(concepts) != entities:
        raise ValueError(f"{entities}-subject template needs {entities} subjects, got {len(concepts)}")
    rng = np.random.default_rng(seed)
    names = list(concepts)

    if category == "existence" and entities == 1:
        row = int(rng.integers(len(EXISTENCE_QUESTIONS)))
        present = _present(clip, names[0], concept_ids)
        bank = EXISTENCE_YES if present else EXISTENCE_NO
        return QAItem("existence", bind(EXISTENCE_QUESTIONS[row], names), bind(bank[row], names),
                      "positive" if present else "negative", names, clip.id, row)

    if category == "existence":
        p1, p2 = (_present(clip, n, concept_ids) for n in names)
        if p1 and p2:
            row = int(rng.integers(len(PAIR_BOTH_YES)))
            return QAItem("existence", bind(PAIR_QUESTIONS[row], names), bind(PAIR_BOTH_YES[row], names),
                          "positive", names, clip.id, row)
        row = int(rng.integers(len(PAIR_MIXED)))
        if not p1 and not p2:
            return QAItem("existence", bind(PAIR_QUESTIONS[row], names), bind(PAIR_BOTH_NO[row], names),
                          "negative", names, clip.id, row)
        # the mixed bank always names the present subject first
        if not p1:
            names = names[::-1]
        return QAItem("existence", bind(PAIR_QUESTIONS[row], names), bind(PAIR_MIXED[row], names),
                      "mixed", names, clip.id, row)

    if entities != 1:
        raise ValueError(f"{category} templates take one subject")
    if not _present(clip, names[0], concept_ids):
        raise ValueError(f"{category} question about absent subject {names[0]!r}")
    rows = DESCRIPTIVE_ROWS[category]
    row = int(rows[int(rng.integers(len(rows)))])
    ident = concept_ids.get(names[0], names[0]) if concept_ids else names[0]
    attrs = dict(clip.attrs.get(ident, {}))
    attrs.setdefault("scenario", clip.scenario)
    answer = DESCRIPTIVE_ANSWERS[category].format(**attrs)
    return QAItem(category, bind(DESCRIPTIVE_QUESTIONS[row], names), bind(answer, names), "positive",
                  names, clip.id, row)


@dataclass
class Vocabulary:
    tokens: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, names: Sequence[str]) -> "Vocabulary":
        """Closed vocabulary covering every bank bound to every name (and pair)."""
        seen: set[str] = set()
        texts: list[str] = []
        singles = [[n] for n in names] or [["sks"]]
        pairs = [[a, b] for a in names for b in names if a != b]
        for ns in singles:
            texts += [bind(t, ns) for t in EXISTENCE_QUESTIONS + EXISTENCE_YES + EXISTENCE_NO + DESCRIPTIVE_QUESTIONS]
            for cat, tmpl in DESCRIPTIVE_ANSWERS.items():
                texts += [bind(tmpl.format(outfit=o, action=a, scenario=s), ns)
                          for o in OUTFITS[:1] for a in ACTIONS[:1] for s in SCENARIOS[:1]]
        for ns in pairs:
            texts += [bind(t, ns) for t in PAIR_QUESTIONS + PAIR_BOTH_YES + PAIR_MIXED + PAIR_BOTH_NO]
        texts += list(OUTFITS) + list(ACTIONS) + list(SCENARIOS)
        for t in texts:
            seen.update(tokenize(t))
        return cls(list(SPECIALS) + sorted(seen - set(SPECIALS)))

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        unk = self.index[UNK]
        return [self.index.get(t, unk) for t in tokenize(text)]

    def decode(self, ids: Iterable[int], stop_at_eos: bool = True) -> list[str]:
        out = []
        for i in ids:
            tok = self.tokens[int(i)]
            if tok == EOS and stop_at_eos:
                break
            if tok == PAD:
                continue
            out.append(tok)
        return out

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def open_id(self) -> int:
        return self.index[PERSON_OPEN]

    @property
    def close_id(self) -> int:
        return self.index[PERSON_CLOSE]
