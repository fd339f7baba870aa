"""Command-line entry point wiring the pipeline into reproducible runs.

Every command takes its settings from config files plus flag overrides and
writes a manifest (flags, seeds, config hashes, package version) next to its
outputs, so a run can be reproduced byte-for-byte from the manifest alone.
Outputs carry no timestamps or absolute paths.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .character import CharacterModel
from .config import (
    CurationConfig,
    DistillConfig,
    EnvConfig,
    TrainConfig,
    config_from_file,
    file_sha256,
)
from .errors import MimicLabError
from .motion import load_clip_file, load_dataset, save_dataset, write_index
from .synthetic import generate_synthetic_dataset

WORKERS_ENV_VAR = "MIMIC_LAB_WORKERS"


def _write_manifest(out_dir, args, config_paths):
    os.makedirs(out_dir, exist_ok=True)
    lines = [f"mimic-lab {__version__}", f"command={args.command}"]
    for key, val in sorted(vars(args).items()):
        if key in ("command", "func"):
            continue
        lines.append(f"flag.{key}={val}")
    for name, path in config_paths.items():
        if path:
            lines.append(f"config.{name}.sha256={file_sha256(path)}")
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def _env_config(args):
    overrides = {}
    if getattr(args, "window_len", None) is not None:
        overrides["window_len"] = args.window_len
    return config_from_file(EnvConfig, getattr(args, "env_config", None), overrides)


def _progress(args):
    if getattr(args, "quiet", False):
        return None
    return lambda it, row: print(f"[{it}] {row}", file=sys.stderr)


# -- commands -----------------------------------------------------------------------


def cmd_gen_data(args):
    from .config import parse_kv_file

    raw = parse_kv_file(args.spec)
    n_clips = int(raw.pop("n_clips", args.n))
    spec = {k: float(v) for k, v in raw.items()}
    rng = np.random.default_rng(args.seed)
    clips = generate_synthetic_dataset(spec, n_clips, rng)
    save_dataset(clips, args.out)
    _write_manifest(args.out, args, {"spec": args.spec})
    print(f"wrote {len(clips)} clips to {args.out}")
    return 0


def cmd_curate(args):
    from .curation import completion_filter, rule_filter, write_report

    model = CharacterModel()
    env_cfg = _env_config(args)
    cur_cfg = config_from_file(CurationConfig, args.rules)
    clips = load_dataset(args.dataset, model.n_joints, model.n_keybodies)
    kept, rejected = rule_filter(clips, cur_cfg, model)
    if args.policy:
        kept, rej2 = completion_filter(kept, args.policy, env_cfg, cur_cfg, model, seed=args.seed)
        rejected = rejected + rej2
    os.makedirs(args.out, exist_ok=True)
    for clip in kept:
        from .motion import save_clip_file

        save_clip_file(clip, os.path.join(args.out, clip.id + ".clip"))
    write_index(kept, args.out)
    write_report(kept, rejected, os.path.join(args.out, "curation_report.tsv"))
    _write_manifest(args.out, args, {"rules": args.rules, "env": getattr(args, "env_config", None)})
    print(f"kept {len(kept)}, rejected {len(rejected)} (report in {args.out})")
    return 0


def cmd_train_teacher(args):
    from .ppo import train_teacher

    model = CharacterModel()
    env_cfg = _env_config(args)
    cfg = config_from_file(TrainConfig, args.config)
    clips = load_dataset(args.dataset, model.n_joints, model.n_keybodies)
    result = train_teacher(clips, env_cfg, cfg, args.seed, args.out, model=model, progress=_progress(args))
    _write_manifest(args.out, args, {"train": args.config, "env": getattr(args, "env_config", None)})
    print(f"final checkpoint: {result.final_checkpoint}")
    return 0


def cmd_distill(args):
    from .distill import train_student

    model = CharacterModel()
    env_cfg = _env_config(args)
    dcfg = config_from_file(DistillConfig, args.config)
    clips = load_dataset(args.dataset, model.n_joints, model.n_keybodies)
    result = train_student(args.teacher, clips, env_cfg, dcfg, args.seed, args.out,
                           model=model, progress=_progress(args))
    _write_manifest(args.out, args, {"distill": args.config, "env": getattr(args, "env_config", None)})
    print(f"student checkpoint: {result.checkpoint}")
    return 0


def cmd_eval(args):
    from .evaluate import evaluate_policy, metrics_table, percentile_report

    model = CharacterModel()
    env_cfg = _env_config(args)
    clips = load_dataset(args.dataset, model.n_joints, model.n_keybodies)
    results = _parallel_eval(args.policy, clips, model, env_cfg, args.seed, args.workers)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.tsv"), "w") as f:
        f.write(metrics_table(results))
    with open(os.path.join(args.out, "percentiles.tsv"), "w") as f:
        f.write(percentile_report(results))
    _write_manifest(args.out, args, {"env": getattr(args, "env_config", None)})
    mean_mpjpe = float(np.mean([m["mpjpe_rad"] for m in results]))
    print(f"evaluated {len(results)} clips; mean mpjpe {mean_mpjpe:.4f} rad; tables in {args.out}")
    return 0


def _parallel_eval(policy, clips, model, env_cfg, seed, workers):
    from .evaluate import evaluate_policy

    if workers <= 1 or len(clips) <= 1:
        return evaluate_policy(policy, clips, model, env_cfg, seed=seed)
    import multiprocessing as mp

    with mp.get_context("spawn").Pool(workers) as pool:
        chunks = pool.starmap(
            evaluate_policy, [(policy, [c], model, env_cfg, seed) for c in clips]
        )
    return [m for chunk in chunks for m in chunk]


def cmd_trace_gating(args):
    from .evaluate import gating_trace, write_gating_trace

    model = CharacterModel()
    env_cfg = _env_config(args)
    clip = load_clip_file(args.clip, model.n_joints, model.n_keybodies)
    rows, _ = gating_trace(args.policy, clip, model, env_cfg, seed=args.seed)
    write_gating_trace(rows, args.out)
    out_dir = os.path.dirname(args.out) or "."
    _write_manifest(out_dir, args, {"env": getattr(args, "env_config", None)})
    print(f"wrote {rows.shape[0]} gating rows to {args.out}")
    return 0


def cmd_compare(args):
    from .evaluate import RunSpec, compare_runs

    model = CharacterModel()
    env_cfg = _env_config(args)
    clips = load_dataset(args.dataset, model.n_joints, model.n_keybodies)
    runs = []
    with open(args.runs) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            name, paths = line.split("\t")
            runs.append(RunSpec(name=name, checkpoints=paths.split(",")))
    table = compare_runs(runs, clips, model, env_cfg, seed=args.seed)
    out_dir = os.path.dirname(args.out) or "."
    os.makedirs(out_dir, exist_ok=True)
    with open(args.out, "w") as f:
        f.write(table)
    _write_manifest(out_dir, args, {"env": getattr(args, "env_config", None)})
    print(f"wrote comparison of {len(runs)} runs to {args.out}")
    return 0


# -- parser -------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="mimic-lab", description="Desk-scale motion tracking lab")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, workers=False):
        sp.add_argument("--env-config", default=None, help="key=value environment config file")
        sp.add_argument("--quiet", action="store_true")
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        if workers:
            default = int(os.environ.get(WORKERS_ENV_VAR, "1"))
            sp.add_argument("--workers", type=int, default=default,
                            help=f"rollout parallelism (default ${WORKERS_ENV_VAR} or 1)")

    sp = sub.add_parser("gen-data", help="generate a synthetic clip dataset")
    sp.add_argument("--spec", required=True, help="category=proportion file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=20)
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("curate", help="two-stage dataset curation")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--rules", default=None, help="curation config file")
    sp.add_argument("--policy", default=None, help="preliminary policy checkpoint or 'playback'")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_curate)

    sp = sub.add_parser("train-teacher", help="PPO teacher training")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--config", default=None, help="training config file")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_train_teacher)

    sp = sub.add_parser("distill", help="DAgger student training")
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--config", default=None, help="distillation config file")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("eval", help="tracking metrics over a dataset")
    sp.add_argument("--policy", required=True, help="checkpoint path or 'playback'")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    common(sp, workers=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("trace-gating", help="gating probabilities over one clip")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--clip", required=True)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_trace_gating)

    sp = sub.add_parser("compare", help="compare runs over an eval dataset")
    sp.add_argument("--runs", required=True, help="file of: name<TAB>ckpt1,ckpt2,...")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MimicLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
