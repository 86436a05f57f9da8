"""Command line entry point: ``styleagnostic <command> [options]``.

Commands print one JSON object on stdout. Failures exit with status 1 (2 for
usage errors) and print ``{"status": "error", ...}`` instead.
"""

import argparse
import json
import os
import sys
import traceback
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import experiments as ex
from .evaluation import bias_metrics, cross_domain_accuracy, source_target_discrepancy
from .network import (StageCNNConfig, build_model, inference_multiplies, load_checkpoint,
                      parameter_count, save_checkpoint)
from .plotting import render_report
from .synthdata import (SPLITS, LabeledSet, StyleShiftSpec, generate_cue_conflict, generate_dataset,
                        load_dataset, save_dataset)
from .training import VARIANTS, TrainConfig, train

OUT_ENV = "STYLEAGNOSTIC_OUT"


class CLIError(Exception):
    pass


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, "styleagnostic-runs"))


# spec flags -------------------------------------------------------------------------------

_SPEC_SKIP = {"split_fractions"}


def _add_spec_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("dataset")
    for f in fields(StyleShiftSpec):
        if f.name in _SPEC_SKIP:
            continue
        flag = "--" + f.name.replace("_", "-")
        # --seed belongs to the run; the dataset seed gets its own flag
        if f.name == "seed":
            flag = "--data-seed"
        g.add_argument(flag, dest="spec_" + f.name, type=type(f.default), default=None,
                       help=f"default {f.default}")


def _spec_from(args) -> StyleShiftSpec:
    kw = {k[5:]: v for k, v in vars(args).items() if k.startswith("spec_") and v is not None}
    return StyleShiftSpec(**kw)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--variant", choices=VARIANTS, default="full")
    g.add_argument("--lambda-adv", type=float, default=None)
    g.add_argument("--lambda-unl", type=float, default=None)
    g.add_argument("--lr", type=float, default=None)
    g.add_argument("--batch-size", type=int, default=None)
    g.add_argument("--iters", dest="total_iters", type=int, default=None)
    g.add_argument("--stage", type=int, default=None, help="randomization stage")
    g.add_argument("--channels", type=int, nargs="+", default=None)
    g.add_argument("--norm", choices=("layer", "instance"), default=None)
    g.add_argument("--unlabeled", action="store_true", help="use target-domain train images as unlabeled data")


def _add_domain_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--target-domain", type=int, default=3)
    p.add_argument("--source-domain", type=int, default=None, help="single source; default is all others")


def _sources(spec: StyleShiftSpec, target: int, single) -> list[int]:
    if not 0 <= target < spec.num_domains:
        raise CLIError(f"target domain {target} not in 0..{spec.num_domains - 1}")
    if single is not None:
        if single == target or not 0 <= single < spec.num_domains:
            raise CLIError("--source-domain must be an existing domain other than the target")
        return [single]
    return [d for d in range(spec.num_domains) if d != target]


def _domain_data(args, spec: StyleShiftSpec, domains) -> dict:
    if getattr(args, "data", None):
        root = Path(args.data)
        splits = {s: load_dataset(root / f"{s}.ssimg") for s in SPLITS}
        return {s: ds.select_domains(domains) for s, ds in splits.items()}
    return generate_dataset(spec, domains)


def _spec_for_data(args) -> StyleShiftSpec:
    if getattr(args, "data", None):
        side = json.loads((Path(args.data) / "train.ssimg.labels.json").read_text())
        return StyleShiftSpec.from_dict(side["meta"]["spec"])
    return _spec_from(args)


# commands ---------------------------------------------------------------------------------

def cmd_gen_data(args) -> dict:
    spec = _spec_from(args)
    out = Path(args.out) if args.out else default_out() / "data"
    domains = args.domains if args.domains is not None else list(range(spec.num_domains))
    splits = generate_dataset(spec, domains)
    files = {}
    for name, ds in splits.items():
        img, _ = save_dataset(ds, out / f"{name}.ssimg")
        files[name] = {"path": str(img), "n": len(ds)}
    if args.stimuli:
        stim = generate_cue_conflict(spec, args.stimuli, domains=domains)
        ds = LabeledSet(stim.images, stim.content_labels, stim.domains, stim.style_labels, None,
                        {"spec": spec.to_dict(), "split": "cue_conflict"})
        img, _ = save_dataset(ds, out / "cue_conflict.ssimg")
        files["cue_conflict"] = {"path": str(img), "n": len(ds)}
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
    return {"status": "ok", "command": "gen-data", "out": str(out), "files": files}


def _train_config(args, seed: int) -> TrainConfig:
    kw = {k: getattr(args, k) for k in ("lambda_adv", "lambda_unl", "lr", "batch_size", "total_iters")
          if getattr(args, k) is not None}
    return TrainConfig.for_variant(args.variant, seed=seed, **kw)


def _model_config(args, spec: StyleShiftSpec) -> StageCNNConfig:
    kw = dict(num_classes=spec.num_classes, input_shape=(3, spec.image_size, spec.image_size))
    if args.stage is not None:
        kw["randomization_stage"] = args.stage
    if args.channels:
        kw["channels"] = tuple(args.channels)
    if args.norm:
        kw["norm"] = args.norm
    return StageCNNConfig(**kw)


def cmd_train(args) -> dict:
    spec = _spec_for_data(args)
    sources = _sources(spec, args.target_domain, args.source_domain)
    src = _domain_data(args, spec, sources)["train"]
    unl = _domain_data(args, spec, [args.target_domain])["train"].images if args.unlabeled else None
    out = Path(args.out) if args.out else default_out() / "train"
    out.mkdir(parents=True, exist_ok=True)
    config = _train_config(args, args.seed)
    model = build_model(_model_config(args, spec), seed=args.seed)
    trace_path = out / "trace.jsonl"
    trace_path.unlink(missing_ok=True)
    result = train(model, src.images, src.labels, config, unlabeled=unl, trace_path=trace_path)
    ckpt = save_checkpoint(model, out / "model.ckpt", extra={
        "variant": args.variant, "train": config.to_dict(), "spec": spec.to_dict(),
        "target_domain": args.target_domain, "source_domains": sources})
    last = result.trace[-1] if result.trace else {}
    return {"status": "ok", "command": "train", "checkpoint": str(ckpt), "trace": str(trace_path),
            "variant": args.variant, "source_domains": sources, "final": last}


def cmd_evaluate(args) -> dict:
    model = load_checkpoint(args.checkpoint)
    meta = model.meta
    if any(getattr(args, k) is not None for k in vars(args) if k.startswith("spec_")) or args.data:
        spec = _spec_for_data(args)
    elif "spec" in meta:
        spec = StyleShiftSpec.from_dict(meta["spec"])
    else:
        spec = StyleShiftSpec()
    target = args.target_domain if args.target_domain is not None else meta.get("target_domain", 3)
    sources = _sources(spec, target, args.source_domain if args.source_domain is not None
                       else (meta["source_domains"][0] if len(meta.get("source_domains", [])) == 1 else None))
    src = _domain_data(args, spec, sources)
    tgt = _domain_data(args, spec, [target])
    tgt_all = LabeledSet.concat([tgt[s] for s in SPLITS])
    stim = generate_cue_conflict(spec, args.stimuli, domains=sources)
    bias = bias_metrics(model, stim)
    disc = source_target_discrepancy(model, src["train"].images, tgt_all.images, seed=args.seed)
    report = {
        "status": "ok", "command": "evaluate", "checkpoint": str(args.checkpoint),
        "target_domain": target, "source_domains": sources,
        "in_domain_accuracy": cross_domain_accuracy(model, src["test"].images, src["test"].labels),
        "target_accuracy": cross_domain_accuracy(model, tgt_all.images, tgt_all.labels),
        "bias": bias.to_dict(), "discrepancy": disc.to_dict(),
        "inference_parameters": parameter_count(model.inference_parameters()),
        "inference_multiplies": inference_multiplies(model),
    }
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def _summarize_dir(out: Path) -> dict:
    records = ex.load_records(out)
    if not records:
        raise CLIError(f"no records in {out}")
    summary = ex.summarize(records)
    paths = ex.write_summary(summary, out)
    data = json.loads(paths["json"].read_text())
    figures = render_report(data, out)
    return {"records": len(records), "csv": str(paths["csv"]), "json": str(paths["json"]),
            "figures": [str(f) for f in figures],
            "trends": [{"metric": t["metric"], "where": t["where"], "means": t["means"],
                        "strictly_ordered": t["strictly_ordered"],
                        "p_value": t.get("sign_test", {}).get("p_value")} for t in summary["trends"]]}


def cmd_run_plan(args) -> dict:
    plan = ex.ExperimentPlan.load(args.plan)
    if args.seeds:
        plan.seeds = list(args.seeds)
    out = Path(args.out) if args.out else default_out() / plan.name

    def progress(cid, err):
        status = "failed" if err else "done"
        print(f"{status} {cid}", file=sys.stderr, flush=True)

    result = ex.run_plan(plan, out, jobs=args.jobs, progress=progress)
    report = {"status": "ok" if not result.failed else "partial", "command": "run-plan", "out": str(out),
              "ran": len(result.ran), "skipped": len(result.skipped), "failed": result.failed}
    if result.records and not args.no_summary:
        report["summary"] = _summarize_dir(out)
    return report


def cmd_summarize(args) -> dict:
    out = Path(args.records) if args.records else default_out()
    return {"status": "ok", "command": "summarize", **_summarize_dir(out)}


def cmd_make_plan(args) -> dict:
    kw = {"kind": args.kind}
    for key in ("lambdas", "stages", "seeds", "variants", "target_domains"):
        if getattr(args, key) is not None:
            kw[key] = getattr(args, key)
    if args.source_domain is not None:
        kw["source_domain"] = args.source_domain
    if args.name:
        kw["name"] = args.name
    if args.iters is not None:
        kw["train"] = {"total_iters": args.iters}
    plan = ex.ExperimentPlan(**kw)
    path = plan.save(args.out)
    return {"status": "ok", "command": "make-plan", "plan": str(path), "cells": len(plan.cells())}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="styleagnostic", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the synthetic style-shift dataset")
    _add_spec_flags(g)
    g.add_argument("--domains", type=int, nargs="+", default=None)
    g.add_argument("--stimuli", type=int, default=0, help="also write N cue-conflict stimuli per class pair")
    g.add_argument("--out", default=None)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model on the source domains")
    _add_spec_flags(t)
    _add_train_flags(t)
    _add_domain_flags(t)
    t.add_argument("--data", default=None, help="directory written by gen-data (default: generate)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="accuracy, bias and discrepancy of a checkpoint")
    _add_spec_flags(e)
    e.add_argument("checkpoint")
    e.add_argument("--target-domain", type=int, default=None)
    e.add_argument("--source-domain", type=int, default=None)
    e.add_argument("--data", default=None)
    e.add_argument("--stimuli", type=int, default=10, help="cue-conflict stimuli per class pair")
    e.add_argument("--seed", type=int, default=0, help="seed of the discrepancy probe")
    e.add_argument("--out", default=None, help="also write the report to this JSON file")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("run-plan", help="run (or resume) an experiment plan")
    r.add_argument("plan")
    r.add_argument("--out", default=None)
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--seeds", type=int, nargs="+", default=None, help="override the plan's replicates")
    r.add_argument("--no-summary", action="store_true")
    r.set_defaults(func=cmd_run_plan)

    s = sub.add_parser("summarize", help="aggregate records into CSV, JSON and PNG figures")
    s.add_argument("records", nargs="?", default=None, help="plan output directory")
    s.set_defaults(func=cmd_summarize)

    m = sub.add_parser("make-plan", help="write a plan file with the defaults of an experiment kind")
    m.add_argument("kind", choices=ex.KINDS)
    m.add_argument("--out", required=True)
    m.add_argument("--name", default=None)
    m.add_argument("--lambdas", type=float, nargs="+", default=None)
    m.add_argument("--stages", type=int, nargs="+", default=None)
    m.add_argument("--seeds", type=int, nargs="+", default=None)
    m.add_argument("--variants", choices=VARIANTS, nargs="+", default=None)
    m.add_argument("--target-domains", type=int, nargs="+", default=None)
    m.add_argument("--source-domain", type=int, default=None)
    m.add_argument("--iters", type=int, default=None)
    m.set_defaults(func=cmd_make_plan)
    return p


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (Path, tuple)):
        return str(o) if isinstance(o, Path) else list(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        if e.code in (0, None):
            return 0
        print(json.dumps({"status": "error", "error": "UsageError", "message": "invalid arguments"}))
        return 2
    try:
        result = args.func(args)
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable record
        print(json.dumps({"status": "error", "command": args.command, "error": type(exc).__name__,
                          "message": str(exc), "traceback": traceback.format_exc(limit=5)}))
        return 1
    print(json.dumps(result, indent=2, sort_keys=True, default=_jsonable))
    return 0 if result.get("status") == "ok" else 1


if __name__ == "__main__":
    sys.exit(main())
