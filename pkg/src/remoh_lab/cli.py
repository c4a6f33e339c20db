"""``remoh-lab`` command line: gen-data, train, eval, ablate, trace.

Exit status is 0 on success, 2 on usage or configuration errors and 1 when
a run fails; failures print one JSON object to stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .ablation import AXES, named_seeds, run_ablation
from .config import ConfigError, RunConfig, load_config, replace_paths
from .errors import TrainingDiverged
from .metrics import activation_heatmap, evaluate
from .model import build_model, load_checkpoint, save_checkpoint
from .synth import DatasetManifest, build_dataset, default_out_root
from .training import Telemetry, train

COMMANDS = ("gen-data", "train", "eval", "ablate", "trace")


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="remoh-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True

    def common(sp, manifest=False, checkpoint=False):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration key (repeatable)")
        sp.add_argument("--seed", type=int, help="root seed (overrides the config)")
        sp.add_argument("--out", help="output directory (default: $REMOH_LAB_OUT/<command>)")
        if manifest:
            sp.add_argument("--manifest", help="dataset directory or manifest.jsonl")
        if checkpoint:
            sp.add_argument("--checkpoint", help="model checkpoint")

    common(sub.add_parser("gen-data", help="write a synthetic dataset manifest"))
    common(sub.add_parser("train", help="two-stage training"), manifest=True)
    common(sub.add_parser("eval", help="existence accuracy, BLEU and per-category report"),
           manifest=True, checkpoint=True)
    sp = sub.add_parser("ablate", help="run ablation rows")
    common(sp)
    sp.add_argument("--axis", action="append", choices=sorted(AXES), help="axis to sweep (repeatable)")
    sp.add_argument("--workers", type=int, help="parallel processes")
    sp = sub.add_parser("trace", help="per-head activation rates split by subject presence")
    common(sp, manifest=True, checkpoint=True)
    sp.add_argument("--concept", default="sks1")
    sp.add_argument("--rows", default="all", choices=("all", "concept", "question", "slots"))
    return p


def _resolve(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "workers", None) is not None:
        overrides.append(f"workers={args.workers}")
    if getattr(args, "axis", None):
        overrides.append("axes=" + json.dumps(args.axis))
    cfg = load_config(args.config, overrides, command=args.command)
    cfg = replace_paths(cfg, manifest=getattr(args, "manifest", None), checkpoint=getattr(args, "checkpoint", None),
                        out=args.out)
    if cfg.paths.out is None:
        cfg = replace_paths(cfg, out=default_out_root() / args.command)
    if cfg.model.d_model != cfg.data.d_model or cfg.model.frames != cfg.data.frames:
        raise ConfigError("model and data must agree on d_model and frames")
    return cfg


def _need(cfg: RunConfig, name: str) -> Path:
    v = getattr(cfg.paths, name)
    if v is None:
        raise UsageError(f"--{name} is required for {cfg.command}")
    return Path(v)


def _manifest_path(cfg: RunConfig) -> Path:
    p = _need(cfg, "manifest")
    if not p.exists():
        raise UsageError(f"manifest {str(p)!r} does not exist")
    return p


def _manifest(cfg: RunConfig) -> DatasetManifest:
    return DatasetManifest.read(_manifest_path(cfg))


def cmd_gen_data(cfg: RunConfig, out: Path) -> dict:
    man = build_dataset(cfg.data, named_seeds(cfg.seed)["data"])
    man.write(out)
    return {"manifest": str(out / "manifest.jsonl"), "counts": man.counts()}


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    man = _manifest(cfg)
    vocab = man.vocabulary()
    if cfg.strata is not None:
        man = man.filter(cfg.strata)
    seeds = named_seeds(cfg.seed)
    model = build_model(replace(cfg.model, vocab_size=len(vocab)), seeds["init"])
    try:
        model, tel = train(model, man, replace(cfg.train, seed=seeds["training"]), out / "telemetry.jsonl", vocab)
    except TrainingDiverged as e:
        raise RuntimeError(f"{e} (last finite step {e.last_finite_step})") from e
    ck = save_checkpoint(model, out / "model.ckpt")
    return {"checkpoint": str(ck), "steps": len(tel), "final_loss": tel.records[-1]["total"] if len(tel) else None,
            "activation_rate": tel.tail_activation()}


def cmd_eval(cfg: RunConfig, out: Path) -> dict:
    man = _manifest(cfg)
    ck = _need(cfg, "checkpoint")
    model = load_checkpoint(ck)
    tel_path = ck.parent / "telemetry.jsonl"
    tel = Telemetry.read(tel_path) if tel_path.exists() else None
    rep = evaluate(model, man, tel)
    (out / "metrics.json").write_text(rep.to_json())
    return {"metrics": str(out / "metrics.json"), "accuracy": rep.accuracy, "bleu": rep.bleu}


def cmd_ablate(cfg: RunConfig, out: Path) -> dict:
    rep = run_ablation(cfg.axes, cfg.experiment(), workers=cfg.workers)
    p_csv, p_json = rep.write(out)
    return {"csv": str(p_csv), "json": str(p_json), "rows": len(rep.rows)}


def cmd_trace(cfg: RunConfig, out: Path, concept: str, rows: str) -> dict:
    man = _manifest(cfg)
    model = load_checkpoint(_need(cfg, "checkpoint"))
    hm = activation_heatmap(model, man, concept, rows=rows)
    p = out / f"heatmap_{concept}.csv"
    p.write_text(hm.to_csv())
    return {"heatmap": str(p), "max_abs_delta": {int(l): hm.max_abs_delta(l) for l in hm.layers()},
            "mean_abs_delta": hm.mean_abs_delta()}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def dispatch(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = _resolve(args)
        if args.command in ("train", "eval", "trace"):
            _manifest_path(cfg)
        if args.command in ("eval", "trace"):
            _need(cfg, "checkpoint")
    except (ConfigError, UsageError) as e:
        return _fail("usage", e, 2)
    out = Path(cfg.paths.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        cfg.write_snapshot(out)
        if args.command == "gen-data":
            res = cmd_gen_data(cfg, out)
        elif args.command == "train":
            res = cmd_train(cfg, out)
        elif args.command == "eval":
            res = cmd_eval(cfg, out)
        elif args.command == "ablate":
            res = cmd_ablate(cfg, out)
        else:
            res = cmd_trace(cfg, out, args.concept, args.rows)
    except Exception as e:  # any downstream failure is reported, not raised
        return _fail("run", e, 1)
    print(json.dumps(res, sort_keys=True, default=str))
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
