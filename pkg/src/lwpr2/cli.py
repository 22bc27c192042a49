"""Command-line entry points for dataset generation, initialization, the
three experiment modes, the soak run, and FLOP benches.

Configuration comes from an optional key=value file (see
``HarnessConfig`` fields; trainer fields are namespaced ``trainer.<name>``)
plus repeatable ``--set key=value`` overrides.
"""

from __future__ import annotations

import argparse
import json
import os
from dataclasses import replace

from lwpr2 import dynamics as dyn_mod
from lwpr2.harness import (
    ExperimentSpec,
    bench_flops,
    build_sysid_dataset,
    format_flops,
    format_metrics_table,
    load_config,
    run_experiment,
    soak_protocol,
)
from lwpr2.mlp import save_params
from lwpr2.trainer import initialize_joint


def _add_common(parser):
    parser.add_argument("--config", help="key=value configuration file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a configuration key (repeatable)",
    )
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="results", help="output directory")


def _config(args):
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k] = v
    return load_config(args.config, overrides)


def cmd_gen_data(args):
    cfg = _config(args)
    os.makedirs(args.out, exist_ok=True)
    if args.kind == "sysid":
        pairs = build_sysid_dataset(args.seed, cfg, regime=args.regime)
    else:
        track = cfg.make_track()
        params = dyn_mod.apply_regime(dyn_mod.VehicleParams(), args.regime)
        ep = dyn_mod.generate_dataset(
            track,
            args.direction,
            args.laps,
            params,
            dt=cfg.dt,
            noise_fraction=cfg.noise_fraction,
            seed=args.seed,
            target_speed=args.speed,
        )
        pairs = ep.pairs
        if not ep.completed:
            print(f"warning: episode terminated early ({ep.termination})")
    path = os.path.join(args.out, args.name)
    dyn_mod.save_pairs(pairs, path)
    print(f"wrote {len(pairs)} pairs to {path}")


def cmd_train_init(args):
    cfg = _config(args)
    os.makedirs(args.out, exist_ok=True)
    if args.dataset:
        pairs = dyn_mod.load_pairs(args.dataset)
    else:
        pairs = build_sysid_dataset(args.seed, cfg)
    models = initialize_joint(pairs, replace(cfg.trainer, seed=args.seed))
    save_params(models.net, os.path.join(args.out, "net.json"), models.standardizer)
    models.gmm.save(os.path.join(args.out, "gmm.json"))
    models.lwpr.save(os.path.join(args.out, "lwpr.npz"))
    print(
        f"initialized: gmm k={models.gmm.k}, "
        f"lwpr fields={models.lwpr_field_counts}, "
        f"final init mse={models.init_reports[-1].mse_real:.4f}"
    )


def _run_mode(args, mode):
    cfg = _config(args)
    spec = ExperimentSpec(
        mode=mode,
        method=args.method,
        seed=args.seed,
        dataset=getattr(args, "dataset", None),
        sysid=args.sysid,
        output_dir=args.out,
    )
    result = run_experiment(spec, cfg)
    if "table" in result:
        print(format_metrics_table(result["table"], f"{mode} / {args.method}"))
    else:
        print(json.dumps(result, indent=2))


def cmd_run_offline(args):
    _run_mode(args, "offline")


def cmd_run_online(args):
    _run_mode(args, "online")


def cmd_run_active(args):
    _run_mode(args, "active")


def cmd_run_soak(args):
    cfg = _config(args)
    result = soak_protocol(args.seed, cfg, checkpoint_dir=os.path.join(args.out, "checkpoints"))
    os.makedirs(args.out, exist_ok=True)
    doc = {
        "seed": result["seed"],
        "segments": result["segments"],
        "window_mse": result["window_mse"],
        "restores": result["restores"],
    }
    with open(os.path.join(args.out, "soak.json"), "w") as f:
        json.dump(doc, f, indent=2)
    for seg in result["segments"]:
        print(f"segment regime={seg['regime']:<8} total_mse={seg['total_mse']:.4f} n={seg['count']}")


def cmd_bench_flops(args):
    cfg = _config(args)
    pairs = build_sysid_dataset(args.seed, cfg)
    models = initialize_joint(pairs, replace(cfg.trainer, seed=args.seed))
    print(format_flops(bench_flops(models)))


def main(argv=None):
    parser = argparse.ArgumentParser(prog="lwpr2", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a dataset (JSON Lines)")
    _add_common(p)
    p.add_argument("--kind", choices=["sysid", "stream"], default="stream")
    p.add_argument("--direction", choices=["cw", "ccw"], default="cw")
    p.add_argument("--laps", type=int, default=5)
    p.add_argument("--speed", type=float, default=3.5)
    p.add_argument("--regime", default="nominal")
    p.add_argument("--name", default="dataset.jsonl")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-init", help="joint initialization on a sysid dataset")
    _add_common(p)
    p.add_argument("--dataset", help="sysid JSONL (generated if omitted)")
    p.set_defaults(func=cmd_train_init)

    for mode, fn in [("run-offline", cmd_run_offline), ("run-online", cmd_run_online)]:
        p = sub.add_parser(mode, help=f"{mode.split('-')[1]} evaluation of a stream")
        _add_common(p)
        p.add_argument("--dataset", required=True, help="stream JSONL")
        p.add_argument("--sysid", help="sysid JSONL for initialization")
        p.add_argument("--method", default="lwpr2", choices=["none", "sgd", "lwpr2", "lwpr-only"])
        p.set_defaults(func=fn)

    p = sub.add_parser("run-active", help="closed-loop MPC trial")
    _add_common(p)
    p.add_argument("--sysid", help="sysid JSONL for initialization")
    p.add_argument("--method", default="lwpr2", choices=["none", "sgd", "lwpr2"])
    p.set_defaults(func=cmd_run_active)

    p = sub.add_parser("run-soak", help="long alternating-regime run with restores")
    _add_common(p)
    p.set_defaults(func=cmd_run_soak)

    p = sub.add_parser("bench-flops", help="FLOP accounting tables")
    _add_common(p)
    p.set_defaults(func=cmd_bench_flops)

    args = parser.parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
