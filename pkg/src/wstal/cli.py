"""Command-line entry point: ``wstal <command> ...``.

Every command that produces files takes ``--out DIR`` and writes the fully
resolved configuration to ``DIR/config.json`` next to its outputs.

Exit codes: 0 success, 1 domain error (bad data, numeric failure, failed
check), 2 usage error (bad arguments or configuration).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck, study
from .data import SynthConfig, generate_synthetic, load_manifest
from .errors import ConfigError, UsageError, WstalError
from .infer import InferConfig, infer_manifest, load_detections, save_detections
from .losses import LADDER, LossConfig, ablation_config
from .metrics import evaluate, save_report
from .model import ModelConfig
from .train import TrainConfig, load_checkpoint, train

log = logging.getLogger("wstal")

SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "loss": LossConfig,
    "infer": InferConfig,
    "synth": SynthConfig,
}

# Desk-scale defaults layered over the dataclass defaults. The published
# setup stays reachable through --set train.iterations=20000 train.lr=1e-4
# loss.rank_tol=1e-9.
DESK_SCALE = {
    "train": {"iterations": 2000, "lr": 1e-3},
    "loss": {"rank_tol": 1e-2},
}


def _fields(cls):
    return {f.name: f for f in dataclasses.fields(cls)}


def default_config():
    cfg = {}
    for name, cls in SECTIONS.items():
        values = dataclasses.asdict(cls()) if name != "train" else {
            k: v for k, v in dataclasses.asdict(TrainConfig()).items() if k != "loss"}
        cfg[name] = values
    for name, over in DESK_SCALE.items():
        cfg[name].update(over)
    return _jsonable(cfg)


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=list))


def _check_keys(section, values):
    allowed = set(_fields(SECTIONS[section]))
    if section == "train":
        allowed.discard("loss")
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {section!r}: {', '.join(unknown)}")


def merge_config(base, override):
    for section, values in override.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        _check_keys(section, values)
        base[section].update(values)
    return base


def parse_override(text):
    """``section.key=value``; the value is parsed as JSON, else kept a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"override key {key!r} must look like section.key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return {parts[0]: {parts[1]: value}}


def resolve_config(path=None, overrides=()):
    cfg = default_config()
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        merge_config(cfg, user)
    for o in overrides:
        merge_config(cfg, parse_override(o))
    build(cfg)  # validate every section up front
    return cfg


def build(cfg):
    """Typed config objects from a resolved dict."""
    try:
        loss = LossConfig(**cfg["loss"])
        return {
            "model": ModelConfig(**cfg["model"]),
            "loss": loss,
            "train": TrainConfig(**cfg["train"], loss=loss),
            "infer": InferConfig(**cfg["infer"]),
            "synth": SynthConfig(**cfg["synth"]),
        }
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _out_dir(path):
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(out, cfg, extra=None):
    doc = dict(cfg)
    if extra:
        doc["run"] = extra
    with open(out / "config.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    cfg = resolve_config(args.config, args.set)
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = generate_synthetic(build(cfg)["synth"], out)
    _echo(out, cfg)
    print(f"wrote {len(manifest.videos)} videos, {manifest.num_classes} classes to {out}")


def cmd_train(args):
    cfg = resolve_config(args.config, args.set)
    objs = build(cfg)
    manifest = load_manifest(args.manifest)
    model_cfg = objs["model"]
    if manifest.num_classes != model_cfg.num_classes:
        raise ConfigError(f"model.num_classes={model_cfg.num_classes} but the manifest has "
                          f"{manifest.num_classes} classes")
    out = _out_dir(args.out)
    _echo(out, cfg, {"manifest": str(Path(args.manifest).resolve())})
    every = max(1, objs["train"].iterations // 20)

    def progress(it, scalars):
        if it % every == 0 or it == 1:
            log.info("iter %d  %s", it, "  ".join(f"{k}={v:.4f}" for k, v in scalars.items()))

    result = train(manifest, model_cfg, objs["train"], out_dir=out, progress=progress)
    last = result.log[-1]
    print(f"trained {result.iteration} iterations; final total loss {last['total']:.4f}; "
          f"checkpoint {out / 'checkpoint.d2ck'}")


def cmd_infer(args):
    cfg = resolve_config(args.config, args.set)
    objs = build(cfg)
    params, _, ema, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    out = _out_dir(args.out)
    dets = infer_manifest(params, ema.x_ref, manifest, objs["infer"], subset=args.subset or None,
                          workers=args.workers)
    save_detections(dets, out / "detections.json")
    _echo(out, cfg, {"checkpoint": str(Path(args.checkpoint).resolve()),
                     "manifest": str(Path(args.manifest).resolve()), "subset": args.subset})
    print(f"wrote {len(dets)} detections to {out / 'detections.json'}")


def cmd_eval(args):
    manifest = load_manifest(args.manifest, check_files=False)
    dets = load_detections(args.detections)
    ious = [float(x) for x in args.ious.split(",")] if args.ious else [0.1, 0.2, 0.3, 0.4, 0.5]
    report = evaluate(dets, manifest, ious, subset=args.subset or None)
    out = _out_dir(args.out)
    save_report(report, out / "report.json", out / "report.txt", ious)
    with open(out / "config.json", "w") as fh:
        json.dump({"run": {"detections": str(Path(args.detections).resolve()),
                           "manifest": str(Path(args.manifest).resolve()),
                           "ious": ious, "subset": args.subset}}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(report.table(ious), end="")


def cmd_gradcheck(args):
    seeds = tuple(int(s) for s in args.seeds.split(","))
    t0 = time.perf_counter()
    results = gradcheck.run_all(seeds=seeds, n_coords=args.coords)
    width = max(len(r.name) for r in results)
    failed = [r for r in results if not r.passed]
    lines = [f"{r.name.ljust(width)}  max_rel_err={r.max_rel_err:.3e}  {'ok' if r.passed else 'FAIL'}"
             for r in results]
    lines.append(f"{len(results) - len(failed)}/{len(results)} passed "
                 f"(tolerance {gradcheck.TOLERANCE:g}, {time.perf_counter() - t0:.1f}s)")
    print("\n".join(lines))
    if args.out:
        out = _out_dir(args.out)
        (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    if failed:
        print("failed: " + ", ".join(r.name for r in failed), file=sys.stderr)
        return 1
    return 0


def cmd_pdmi_study(args):
    rows = study.study_rows(args.num_samples, seed=args.seed, plant_identity=not args.no_plant)
    out = _out_dir(args.out)
    study.write_study(rows, out / "pdmi_study.csv")
    corr = study.pearson(rows)
    summary = {"num_samples": len(rows), "pearson_log_eta_log_det": corr, "seed": args.seed}
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(f"{len(rows)} samples, corr(log eta, log|det|) = {corr:.4f}")


def run_ablation(manifest, objs, seeds, variants=LADDER):
    """mAP@0.5 per (variant, seed) plus the full test reports."""
    results = {}
    for name in variants:
        for seed in seeds:
            loss = ablation_config(name, objs["loss"])
            tcfg = dataclasses.replace(objs["train"], loss=loss, seed=seed)
            mcfg = dataclasses.replace(objs["model"], seed=seed)
            res = train(manifest, mcfg, tcfg)
            dets = infer_manifest(res.params, res.ema.x_ref, manifest, objs["infer"])
            results[(name, seed)] = evaluate(dets, manifest)
    return results


def ablation_table(results, variants, seeds):
    lines = [f"{'variant':<8}" + "".join(f"{'seed ' + str(s):>10}" for s in seeds) + f"{'mean':>10}"]
    for name in variants:
        vals = [results[(name, s)].per_iou_map[0.5] for s in seeds]
        lines.append(f"{name:<8}" + "".join(f"{100 * v:>10.1f}" for v in vals)
                     + f"{100 * np.mean(vals):>10.1f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args):
    cfg = resolve_config(args.config, args.set)
    objs = build(cfg)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    variants = tuple(args.variants.split(","))
    for v in variants:
        ablation_config(v)  # validates the name
    out = _out_dir(args.out)
    if args.manifest:
        manifest = load_manifest(args.manifest)
    else:
        manifest = generate_synthetic(objs["synth"], out / "data")
    results = run_ablation(manifest, objs, seeds, variants)
    table = ablation_table(results, variants, seeds)
    (out / "ablation.txt").write_text(table)
    with open(out / "ablation.json", "w") as fh:
        json.dump({f"{n}/{s}": r.to_json() for (n, s), r in results.items()}, fh, indent=2)
        fh.write("\n")
    _echo(out, cfg, {"seeds": list(seeds), "variants": list(variants)})
    print(table, end="")


# ---------------------------------------------------------------------------


def _add_config_args(p):
    p.add_argument("--config", help="JSON config file with sections model/train/loss/infer/synth")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")


def make_parser():
    parser = argparse.ArgumentParser(prog="wstal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic feature dataset")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a manifest")
    _add_config_args(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="produce detections from a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--subset", default="test", help="manifest subset ('' for all videos)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--detections", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ious", default="0.1,0.2,0.3,0.4,0.5", help="comma-separated IoU thresholds")
    p.add_argument("--subset", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--coords", type=int, default=20)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("pdmi-study", help="condition number vs determinant sampling study")
    p.add_argument("--num-samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-plant", action="store_true", help="do not include the U = I row")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pdmi_study)

    p = sub.add_parser("ablate", help="train and score the loss ablation ladder")
    _add_config_args(p)
    p.add_argument("--manifest", help="existing manifest (default: synthesize one under --out)")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--variants", default=",".join(LADDER),
                   help="comma-separated presets: ce, focal, dis, full, l1, bce")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (WstalError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
