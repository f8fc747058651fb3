"""Command-line entry point.

Workflow: generate -> annotate -> pretrain-seg -> train -> predict ->
evaluate.  Options resolve as: built-in defaults < config file (--config,
`key = value` lines, '#' comments) < environment (BLOCKPRED_<KEY>) <
command-line flags.  Every command writes its resolved config into its
output directory.  Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import evaluation, pseudo_label, training, worldgen
from .training import TrainConfig
from .worldgen import WorldConfig

ENV_PREFIX = "BLOCKPRED_"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------

def parse_config_file(path):
    """`key = value` lines; blank lines and '#' comments ignored."""
    values = {}
    try:
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected 'key = value'")
                key, val = (s.strip() for s in line.split("=", 1))
                values[key] = val
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}")
    return values


def _coerce(value, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(float(v) for v in value.split(","))
    return value


def resolve_config(args):
    """Merged WorldConfig + TrainConfig + paths, with overrides applied."""
    merged = {**dataclasses.asdict(WorldConfig()), **dataclasses.asdict(TrainConfig())}
    file_vals = parse_config_file(args.config) if args.config else {}
    for key, val in file_vals.items():
        if key not in merged:
            raise UsageError(f"unknown config key: {key}")
        merged[key] = _coerce(val, merged[key])
    for key in list(merged):
        env = os.environ.get(ENV_PREFIX + key.upper())
        if env is not None:
            merged[key] = _coerce(env, merged[key])
    for key in list(merged):
        arg = getattr(args, key, None)
        if arg is not None:
            merged[key] = arg
    if args.seed is not None:
        merged["seed"] = args.seed
    world = WorldConfig(**{f.name: merged[f.name]
                           for f in dataclasses.fields(WorldConfig)})
    train = TrainConfig(**{f.name: merged[f.name]
                           for f in dataclasses.fields(TrainConfig)})
    return world, train, merged


def write_run_config(merged, out_dir, command):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "run_config.txt")
    with open(path, "w") as f:
        f.write(f"# resolved configuration for `blockpred {command}`\n")
        for key in sorted(merged):
            val = merged[key]
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            f.write(f"{key} = {val}\n")
    return path


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args):
    world, _, merged = resolve_config(args)
    if world.n_sequences < 1:
        raise UsageError("--n must be >= 1")
    world.validate()
    out = args.out or "dataset"
    manifest = worldgen.generate_dataset(world, out, seed=merged["seed"])
    write_run_config(merged, out, "generate")
    print(f"wrote {len(manifest.sequences)} sequences to {out}")
    return 0


def cmd_annotate(args):
    _, _, merged = resolve_config(args)
    manifest = worldgen.load_manifest(args.dataset)
    out = args.out or os.path.join(args.dataset, "annotations.json")
    if args.flow_source != "oracle":
        raise UsageError(f"unknown flow source: {args.flow_source}")
    records = pseudo_label.annotate_dataset(manifest, out, split=args.split)
    write_run_config(merged, os.path.dirname(os.path.abspath(out)), "annotate")
    n_inst = sum(len(r.instances) for r in records)
    print(f"wrote {len(records)} records ({n_inst} instances) to {out}")
    return 0


def cmd_pretrain_seg(args):
    _, train_cfg, merged = resolve_config(args)
    manifest = worldgen.load_manifest(args.dataset)
    records = pseudo_label.load_annotations(args.annotations)
    out = args.out or "runs/pretrain"
    write_run_config(merged, out, "pretrain-seg")
    result = training.train(train_cfg, manifest, records, out, phase="1")
    print(f"segmenter checkpoint: {result['segmenter_checkpoint']}")
    return 0


def cmd_train(args):
    _, train_cfg, merged = resolve_config(args)
    manifest = worldgen.load_manifest(args.dataset)
    records = pseudo_label.load_annotations(args.annotations)
    out = args.out or "runs/train"
    write_run_config(merged, out, "train")
    phase = "2" if args.seg_checkpoint else "both"
    result = training.train(train_cfg, manifest, records, out, phase=phase,
                            seg_checkpoint=args.seg_checkpoint)
    print(f"final checkpoint: {result['final_checkpoint']}")
    print(f"metrics: {result['metrics']}")
    return 0


def cmd_predict(args):
    _, train_cfg, merged = resolve_config(args)
    if args.horizon < 1:
        raise UsageError("--horizon must be >= 1")
    models = _load_models_or_fail(args.checkpoint, train_cfg.image_size)
    frame0 = worldgen.read_frame_png(args.frame)
    out = args.out or "predicted"
    os.makedirs(out, exist_ok=True)
    write_run_config(merged, out, "predict")
    frames, _ = evaluation.predict_rollout(models, frame0, args.horizon,
                                           train_cfg.detect_threshold)
    if frames is None:
        raise RuntimeError("no objects detected in the input frame; "
                           "nothing to roll out")
    for t, frame in enumerate(frames, start=1):
        worldgen.write_frame_png(frame, os.path.join(out, f"pred_{t}.png"))
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def cmd_evaluate(args):
    _, train_cfg, merged = resolve_config(args)
    models = _load_models_or_fail(args.checkpoint, train_cfg.image_size)
    manifest = worldgen.load_manifest(args.dataset)
    out = args.out or "runs/eval"
    write_run_config(merged, out, "evaluate")
    dump = os.path.join(out, "frames") if args.dump_frames else None
    report = evaluation.evaluate(models, manifest, split=args.split,
                                 horizon=args.horizon,
                                 detect_threshold=train_cfg.detect_threshold,
                                 dump_dir=dump)
    with open(os.path.join(out, "report.json"), "w") as f:
        f.write(report.to_json())
    print(report.to_text())
    return 0


def _load_models_or_fail(path, image_size):
    if not os.path.exists(path):
        raise RuntimeError(f"checkpoint not found: {path}. Run `blockpred train` "
                           "first or point --checkpoint at an existing file.")
    return training.load_models(path, image_size)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="blockpred",
                description="object-centric video prediction without annotations")
    p.add_argument("--config", help="config file (key = value lines)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="output directory")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--n", dest="n_sequences", type=int, default=None)
    g.add_argument("--blocks", dest="n_blocks", type=int, default=None)
    g.add_argument("--image-size", dest="image_size", type=int, default=None)
    g.set_defaults(fn=cmd_generate)

    a = sub.add_parser("annotate", help="pseudo-label a dataset from flow")
    a.add_argument("dataset")
    a.add_argument("--flow-source", default="oracle")
    a.add_argument("--split", default="train")
    a.set_defaults(fn=cmd_annotate)

    ps = sub.add_parser("pretrain-seg", help="phase 1: segmenter pre-training")
    ps.add_argument("dataset")
    ps.add_argument("annotations")
    ps.add_argument("--steps", dest="phase1_steps", type=int, default=None)
    ps.set_defaults(fn=cmd_pretrain_seg)

    t = sub.add_parser("train", help="full two-phase training")
    t.add_argument("dataset")
    t.add_argument("annotations")
    t.add_argument("--seg-checkpoint", default=None,
                   help="skip phase 1 and start from this segmenter checkpoint")
    t.add_argument("--phase1-steps", dest="phase1_steps", type=int, default=None)
    t.add_argument("--phase2-steps", dest="phase2_steps", type=int, default=None)
    t.set_defaults(fn=cmd_train)

    pr = sub.add_parser("predict", help="roll out from a single frame")
    pr.add_argument("checkpoint")
    pr.add_argument("frame", help="input frame PNG")
    pr.add_argument("--horizon", type=int, default=3)
    pr.set_defaults(fn=cmd_predict)

    e = sub.add_parser("evaluate", help="metrics on a held-out split")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--split", default="test")
    e.add_argument("--horizon", type=int, default=3)
    e.add_argument("--dump-frames", action="store_true")
    e.set_defaults(fn=cmd_evaluate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (worldgen.InvalidConfigError, ValueError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failures
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
