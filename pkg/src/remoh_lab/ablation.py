"""Ablation grid: attention variants, loss variants, data strata and concept-token counts.

Every row is an independent run.  Seeds for data, initialization and
training come from one root seed through named substreams, so all rows of
a grid share the same draws and differ only in the toggled setting.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import TrainingDiverged
from .metrics import evaluate
from .model import ModelConfig, build_model
from .synth import DATA_CONFIGS, CompositionConfig, build_dataset
from .training import TrainConfig, train

AXES: dict[str, tuple] = {
    "attention": ("baseline", "moh-topk", "remoh"),
    "losses": ("none", "spr-only", "spr+hae"),
    "data": tuple(DATA_CONFIGS),
    "tokens": (0, 4, 8, 12, 16, 20),
}
LOSS_FLAGS = {"none": (False, False), "spr-only": (True, False), "spr+hae": (True, True)}
SEED_STREAMS = ("data", "init", "training")

COLUMNS = ("axis", "value", "status", "accuracy", "negative_accuracy", "bleu", "activation_rate",
           "final_loss", "steps", "last_finite_step", "seconds")


def named_seeds(root: int) -> dict[str, int]:
    """One 32-bit seed per named stream, all derived from ``root``."""
    return {name: int(np.random.SeedSequence(int(root), spawn_key=(i,)).generate_state(1)[0])
            for i, name in enumerate(SEED_STREAMS)}


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: CompositionConfig = field(default_factory=CompositionConfig)
    strata: tuple | None = None  # restrict training QA to these strata; None keeps all
    seed: int = 0


def configure(base: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    """``base`` with one axis set to ``value``."""
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {sorted(AXES)}")
    if value not in AXES[axis]:
        raise ValueError(f"axis {axis!r} has no value {value!r}; expected one of {AXES[axis]}")
    if axis == "attention":
        return replace(base, model=replace(base.model, attention=value))
    if axis == "losses":
        spr, hae = LOSS_FLAGS[value]
        return replace(base, model=replace(base.model, attention="remoh"),
                       train=replace(base.train, use_spr=spr, use_hae=hae))
    if axis == "data":
        return replace(base, strata=DATA_CONFIGS[value])
    return replace(base, model=replace(base.model, tokens_per_concept=int(value)))


@dataclass
class AblationRow:
    axis: str
    value: str
    status: str  # "finite" or "diverged"
    accuracy: float | None = None
    negative_accuracy: float | None = None
    bleu: float | None = None
    activation_rate: float | None = None
    final_loss: float | None = None
    steps: int = 0
    last_finite_step: int | None = None
    seconds: float = 0.0

    def key(self) -> tuple:
        """Everything except wall time; equal keys mean a reproduced row."""
        d = asdict(self)
        d.pop("seconds")
        return tuple(d.values())


def run_experiment(exp: ExperimentConfig, axis: str = "", value="") -> AblationRow:
    seeds = named_seeds(exp.seed)
    manifest = build_dataset(exp.data, seeds["data"])
    vocab = manifest.vocabulary()
    if exp.strata is not None:
        manifest = manifest.filter(exp.strata)
    model = build_model(replace(exp.model, vocab_size=len(vocab)), seeds["init"])
    t0 = time.perf_counter()
    try:
        model, tel = train(model, manifest, replace(exp.train, seed=seeds["training"]), vocab=vocab)
    except TrainingDiverged as e:
        return AblationRow(axis, str(value), "diverged", last_finite_step=e.last_finite_step,
                           steps=0 if e.last_finite_step is None else e.last_finite_step + 1,
                           seconds=time.perf_counter() - t0)
    rep = evaluate(model, manifest, tel)
    final = tel.records[-1]["total"] if len(tel) else None
    return AblationRow(axis, str(value), "finite", rep.accuracy, rep.negative_accuracy, rep.bleu,
                       rep.activation_rate, final, len(tel), len(tel) - 1 if len(tel) else None,
                       time.perf_counter() - t0)


def _run_cell(args) -> AblationRow:
    base, axis, value = args
    return run_experiment(configure(base, axis, value), axis, value)


@dataclass
class AblationReport:
    rows: list[AblationRow]

    def axis(self, name: str) -> list[AblationRow]:
        return [r for r in self.rows if r.axis == name]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v
                        for v in (getattr(r, c) for c in COLUMNS)])
        return buf.getvalue()

    def to_json(self) -> str:
        rows = [{k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in asdict(r).items()}
                for r in self.rows]
        return json.dumps({"columns": list(COLUMNS), "rows": rows}, indent=2, sort_keys=True)

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        p_csv, p_json = out / "ablation.csv", out / "ablation.json"
        p_csv.write_text(self.to_csv())
        p_json.write_text(self.to_json())
        return p_csv, p_json


def run_ablation(axes: Iterable[str] | str, base: ExperimentConfig | None = None, workers: int = 1,
                 values: dict[str, Sequence] | None = None) -> AblationReport:
    """One row per (axis, value).  ``values`` narrows an axis to a subset of its settings."""
    base = base or ExperimentConfig()
    axes = [axes] if isinstance(axes, str) else list(axes)
    cells = []
    for a in axes:
        if a not in AXES:
            raise ValueError(f"unknown ablation axis {a!r}; expected one of {sorted(AXES)}")
        vals = AXES[a] if values is None or a not in values else tuple(values[a])
        for v in vals:
            configure(base, a, v)  # validate before any work starts
            cells.append((base, a, v))
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, cells))
    else:
        rows = [_run_cell(c) for c in cells]
    return AblationReport(rows)
