"""Command-line interface.

Subcommands: selfcheck, gen-phantom, train, eval, dwt, bench-scan.
Exit codes: 0 success, 1 invariant or validation failure, 2 usage error.
Flags are validated before any output file is created; single files are
written through a temp-and-rename so a failure never leaves partial
output behind.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np


def _parse_size(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3 or any(p < 1 for p in parts):
        raise argparse.ArgumentTypeError(f"size must be D or D,H,W of positive ints, got {text!r}")
    return tuple(parts)


def _parse_lengths(text: str) -> list[int]:
    try:
        vals = [int(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"lengths must be comma-separated ints, got {text!r}") from None
    if not vals or any(v < 2 for v in vals):
        raise argparse.ArgumentTypeError("lengths must be >= 2")
    return vals


def _write_json_atomic(path, payload) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmc", description="Volumetric segmentation engine and verification CLI")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("selfcheck", help="run the built-in invariant suite")
    p.add_argument("--inject-fault", choices=["wavelet-tap"], default=None, help=argparse.SUPPRESS)

    p = sub.add_parser("gen-phantom", help="generate a labeled phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=_parse_size, default=(24, 24, 24))
    p.add_argument("--classes", type=int, default=4, help="number of stacked bodies (labels 1..K)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blur", type=float, default=0.8)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--spacing-jitter", type=float, default=0.05)
    p.add_argument("--size-jitter", type=float, default=0.05)
    p.add_argument("--divisor", type=int, default=8, help="required divisor of every extent (2^stages)")

    p = sub.add_parser("train", help="train on a generated dataset")
    p.add_argument("--config", default=None, help="run config JSON; defaults derived from the dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory for checkpoint.fmck and metrics.jsonl")
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)

    p = sub.add_parser("dwt", help="decompose a volume into its eight subbands")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("bench-scan", help="time the scan kernels over a length sweep")
    p.add_argument("--length", type=_parse_lengths, default=[1024, 2048, 4096, 8192, 16384, 32768, 65536])
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--block", type=int, default=64)
    p.add_argument("--json", dest="json_out", default=None)
    return parser


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    return 0 if run_selfcheck(inject_fault=args.inject_fault) else 1


def cmd_gen_phantom(args) -> int:
    from .phantom import PhantomConfig, write_dataset

    cfg = PhantomConfig(
        extents=args.size,
        bodies=args.classes,
        spacing_jitter=args.spacing_jitter,
        size_jitter=args.size_jitter,
        blur_sigma=args.blur,
        noise_sigma=args.noise,
        seed=args.seed,
        divisor=args.divisor,
    )
    write_dataset(args.out, cfg, args.count)
    print(f"wrote {args.count} samples to {args.out}")
    return 0


def _load_run_config(path, meta) -> dict:
    defaults = {
        "variant": "full",
        "network": {
            "stages": 3,
            "base_channels": 8,
            "num_classes": meta["config"]["bodies"] + 1,
            "state_dim": 8,
            "dilations": [1, 2, 3],
        },
        "optimizer": {"learning_rate": 0.01, "momentum": 0.9, "poly_power": 0.9},
    }
    if path is None:
        return defaults
    with open(path) as fh:
        raw = json.load(fh)
    unknown = set(raw) - {"variant", "network", "optimizer"}
    if unknown:
        raise ValueError(f"unknown run config keys: {sorted(unknown)}")
    cfg = defaults
    cfg["variant"] = raw.get("variant", "full")
    if cfg["variant"] not in ("full", "baseline"):
        raise ValueError(f"variant must be 'full' or 'baseline', got {cfg['variant']!r}")
    cfg["network"].update(raw.get("network", {}))
    cfg["optimizer"].update(raw.get("optimizer", {}))
    return cfg


def cmd_train(args) -> int:
    from .checkpoint import network_checkpoint_config, save_checkpoint
    from .net import BaselineNet, FmcNet, NetworkConfig, TrainSettings, train_network
    from .phantom import load_dataset

    dataset, meta = load_dataset(args.data)
    run_cfg = _load_run_config(args.config, meta)
    net_cfg = NetworkConfig.from_dict(run_cfg["network"])
    expected_classes = meta["config"]["bodies"] + 1
    if net_cfg.num_classes != expected_classes:
        raise ValueError(
            f"config num_classes={net_cfg.num_classes} but the dataset has {expected_classes} classes "
            f"({meta['config']['bodies']} bodies plus background)"
        )
    settings = TrainSettings.from_dict(run_cfg["optimizer"])
    if run_cfg["variant"] == "baseline":
        net = BaselineNet(net_cfg, seed=args.seed)
    else:
        net = FmcNet(net_cfg, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    metrics_tmp = os.path.join(args.out, "metrics.jsonl.tmp")
    with open(metrics_tmp, "w") as fh:
        log = train_network(
            net,
            dataset,
            epochs=args.epochs,
            seed=args.seed,
            settings=settings,
            log_fn=lambda rec: (fh.write(json.dumps(rec, sort_keys=True) + "\n"), fh.flush()),
        )
    os.replace(metrics_tmp, os.path.join(args.out, "metrics.jsonl"))
    ckpt_path = os.path.join(args.out, "checkpoint.fmck")
    save_checkpoint(ckpt_path, network_checkpoint_config(net), net.named_parameters(), log.steps, args.seed)
    print(f"trained {log.steps} steps; final epoch loss {log.epochs[-1]['loss']:.4f}, "
          f"train DSC {log.epochs[-1]['train_dsc']:.3f}; checkpoint at {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import restore_network
    from .metrics import evaluation_report
    from .net import predict_labels
    from .phantom import load_dataset

    net, config, step, seed = restore_network(args.ckpt)
    dataset, meta = load_dataset(args.data)
    pairs = [(predict_labels(net, vol), lab) for vol, lab in dataset]
    report = evaluation_report(pairs, net.config.num_classes, spacing=meta["spacing"])
    report["checkpoint"] = {"path": str(args.ckpt), "step": step, "seed": seed, "variant": config.get("variant", "full")}
    report["dataset"] = {"path": str(args.data), "count": meta["count"]}
    _write_json_atomic(args.report, report)
    print(f"mean foreground DSC {report['mean_dsc']:.4f}; report at {args.report}")
    return 0


def cmd_dwt(args) -> int:
    from .phantom import read_volume, write_volume
    from .wavelet import BAND_NAMES, dwt3, idwt3

    volume, spacing, _ = read_volume(args.input)
    x = np.asarray(volume, dtype=np.float64)[None]
    bands = dwt3(x)
    recon = idwt3(bands).data[0]
    max_err = float(np.abs(recon - volume).max())
    energy_in = float((np.asarray(volume, dtype=np.float64) ** 2).sum())
    energy_bands = float((bands.stacked.data**2).sum())
    os.makedirs(args.out, exist_ok=True)
    half_spacing = tuple(2.0 * s for s in spacing)
    for name in BAND_NAMES:
        write_volume(
            os.path.join(args.out, f"band_{name}.vvol"),
            bands.band(name).data[0],
            spacing=half_spacing,
            semantic="intensity",
        )
    report = {
        "band_names": list(BAND_NAMES),
        "band_shape": list(bands.band_shape[1:]),
        "roundtrip_max_abs_error": max_err,
        "energy_relative_error": abs(energy_in - energy_bands) / energy_in if energy_in else 0.0,
    }
    _write_json_atomic(os.path.join(args.out, "roundtrip_report.json"), report)
    print(f"eight bands written to {args.out}; roundtrip max error {max_err:.3e}")
    return 0


def cmd_bench_scan(args) -> int:
    from .bench import format_table, run_scan_bench

    rows = run_scan_bench(args.length, channels=args.channels, repeats=args.repeats, block=args.block)
    print(format_table(rows))
    worst = max(r["blocked_vs_seq_max_err"] for r in rows)
    if args.json_out:
        _write_json_atomic(args.json_out, rows)
    if worst > 1e-10:
        print(f"blocked scan disagrees with sequential by {worst:.3e} (> 1e-10)", file=sys.stderr)
        return 1
    return 0


_COMMANDS = {
    "selfcheck": cmd_selfcheck,
    "gen-phantom": cmd_gen_phantom,
    "train": cmd_train,
    "eval": cmd_eval,
    "dwt": cmd_dwt,
    "bench-scan": cmd_bench_scan,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        code = _COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return code


if __name__ == "__main__":
    sys.exit(main())
