"""
Command-line entry point

    python cli.py verify --suite all
    python cli.py params --arch llama2-7b --method oft --check
    python cli.py train --config configs/rotation_recovery.cfg --seed 7
    python cli.py bench --dims 256,512,1024 --out bench.csv
    python cli.py quantize --input w.npy --out w.qnf4
    python cli.py merge --weight w.qnf4 --adapter id --out merged.npy
    python cli.py report --seed 3

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O error.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import load_dotenv

import bench
import numkit
import oftlayer
import quantkit
import trainer
import verify_suites
from baseline import LowRankAdapter, merge_gap_report
from data_models import BENCH_MODES, LR_SCHEDULES, TASKS, TrainConfig
from errors import ConfigError, ContainerError, OftError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_IO = 3

ROTATION_RATIO_MAX = 1e-2
ROTATION_MERGED_MAX = 0.05
TOY_MARGIN_MIN = 0.30
TOY_BASE_GAP_MAX = 0.05


def resolve_seed(seed: Optional[int]) -> int:
    """--seed, else OFT_SEED, else 0 (a config file seed is applied by the caller)"""
    if seed is not None:
        return seed
    env = os.getenv("OFT_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"OFT_SEED must be an integer, got {env!r}")
    return 0


def output_path(path: Optional[str], default_name: str) -> Path:
    if path:
        return Path(path)
    return Path(os.getenv("OFT_OUTPUT_DIR", ".")) / default_name


def _print_config(command: str, values: Dict[str, Any]) -> None:
    print("=" * 60)
    print(f"{command.upper()} (resolved config)")
    print("=" * 60)
    for key, value in values.items():
        print(f"{key} = {value}")
    print("=" * 60)


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _mode_list(text: str) -> List[str]:
    modes = [part.strip() for part in text.split(",") if part.strip()]
    for mode in modes:
        if mode not in BENCH_MODES:
            raise argparse.ArgumentTypeError(f"unknown mode {mode!r}; choose from {', '.join(BENCH_MODES)}")
    return modes


def cmd_verify(args: argparse.Namespace) -> int:
    _print_config("verify", {"suite": args.suite})
    results = verify_suites.run_suites(args.suite)
    table = pd.DataFrame([r.to_dict() for r in results], columns=["property", "status", "detail"])
    print(table.to_string(index=False))
    failed = [r.name for r in results if not r.passed]
    print("=" * 60)
    if failed:
        print(f"FAILED ({len(failed)}/{len(results)}): {', '.join(failed)}")
        return EXIT_VERIFY
    print(f"ALL {len(results)} PROPERTIES PASSED")
    return EXIT_OK


def cmd_params(args: argparse.Namespace) -> int:
    names = oftlayer.available_architectures() if args.arch == "all" else [args.arch]
    _print_config("params", {"arch": args.arch, "method": args.method, "b": args.b, "rank": args.rank,
                             "check": args.check})
    mismatches = []
    for name in names:
        arch = oftlayer.load_architecture(name)
        layers = oftlayer.architecture_layers(arch)
        expected = arch["expected"][args.method]
        if args.method == "oft":
            size = args.b or expected["b"]
            count = oftlayer.count_params(layers, size)
            label = f"b={size}"
            default_size = size == expected["b"]
        else:
            size = args.rank or expected["rank"]
            count = oftlayer.count_params_lora(layers, size)
            label = f"rank={size}"
            default_size = size == expected["rank"]
        millions = f"{count / 1e6:.2f}"
        print(f"{name:<12} {args.method:<5} {label:<8} {count:>14,d}  (~{millions}M, {len(layers)} layers)")
        if args.check:
            if not default_size:
                print(f"  no published value for {label}; expected {expected}")
                mismatches.append(name)
            elif millions != str(expected["millions"]):
                print(f"  MISMATCH: expected {expected['millions']}M")
                mismatches.append(name)
            else:
                print(f"  matches published {expected['millions']}M")
    return EXIT_VERIFY if mismatches else EXIT_OK


def _train_config(args: argparse.Namespace) -> TrainConfig:
    values: Dict[str, Any] = {}
    if args.config:
        cfg = TrainConfig.from_file(args.config)
        values = cfg.to_dict()
    overrides = {
        "task": args.task, "d": args.d, "n": args.n, "b": args.b, "k": args.k, "lora_rank": args.lora_rank,
        "alpha": args.alpha, "steps": args.steps, "lr": args.lr, "m": args.m, "adapter": args.adapter,
        "base": args.base, "lr_schedule": args.lr_schedule, "log_every": args.log_every,
    }
    values.update({key: value for key, value in overrides.items() if value is not None})
    if args.seed is not None or "seed" not in values:
        values["seed"] = resolve_seed(args.seed)
    return TrainConfig.from_dict(values)


def _train_checks(cfg: TrainConfig, trace) -> Dict[str, bool]:
    final = trace.final
    if trace.task == "rotation-recovery":
        return {
            "loss_ratio": final["loss_ratio"] <= ROTATION_RATIO_MAX,
            "merged_rel_error": final["merged_rel_error"] <= ROTATION_MERGED_MAX,
        }
    # same seed on the other base
    other = replace(cfg, base="full" if cfg.base == "nf4" else "nf4")
    logger.info("re-running toy-classify on the %s base for the base-gap check", other.base)
    other_acc = trainer.run_task(other).final["final_acc"]
    return {
        "margin_over_control": final["final_acc"] - final["control_acc"] >= TOY_MARGIN_MIN,
        "nf4_full_gap": abs(final["final_acc"] - other_acc) <= TOY_BASE_GAP_MAX,
    }


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _train_config(args)
    trace_path = output_path(args.out, f"trace_{cfg.task}_{cfg.adapter}_{cfg.base}_seed{cfg.seed}.csv")
    _print_config("train", {**cfg.to_dict(), "out": trace_path})

    trace = trainer.run_task(cfg)
    trainer.write_trace(trace, str(trace_path))
    print(trace.summary())
    print(f"trace written to {trace_path}")

    if args.probe:
        trainer.write_probe(trainer.stability_probe(trace), args.probe)
        print(f"stability probe written to {args.probe}")
    if args.save_adapter:
        if cfg.adapter != "oft":
            print("--save-adapter stores orthogonal adapters only; skipped")
        else:
            oftlayer.save_adapters(args.save_adapter, {"layer.0": trace.model})
            print(f"adapter written to {args.save_adapter}")

    if args.check:
        checks = _train_checks(cfg, trace)
        for name, passed in checks.items():
            print(f"{name}: {'PASS' if passed else 'FAIL'}")
        if not all(checks.values()):
            return EXIT_VERIFY
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    seed = resolve_seed(args.seed)
    out = output_path(args.out, "bench.csv")
    _print_config("bench", {"dims": args.dims, "modes": args.modes, "m": args.m, "b": args.b, "k": args.k,
                            "repeats": args.repeats, "staging": args.staging, "seed": seed, "out": out})

    dense_modes = [mode for mode in args.modes if mode in ("weight_centric", "input_centric", "lora")]
    quant_modes = [mode for mode in args.modes if mode in ("qoft", "qlora")]
    records = []
    if dense_modes:
        records += bench.run_forward_bench(args.dims, dense_modes, m=args.m, b=args.b, k=args.k,
                                           repeats=args.repeats, seed=seed)
    if quant_modes:
        # rows per d: one per dense mode plus one per (quant mode, staging)
        stagings = quantkit.STAGING_POLICIES if args.staging == "both" else (args.staging,)
        quant = bench.run_quant_bench(args.dims, m=args.m, b=args.b, k=args.k, repeats=args.repeats, seed=seed,
                                      stagings=stagings, include_passthrough=False)
        records += [r for r in quant if r.mode in quant_modes]
        print(bench.quant_summary(quant).to_string(index=False))

    bench.emit_csv(records, str(out))
    print(bench.to_frame(records).to_string(index=False))
    print(f"{len(records)} records written to {out}")

    if args.check_scaling:
        results = bench.check_scaling(records)
        print(f"wall-time slopes: {bench.scaling_slopes(records, 'wall_ns')}")
        print(f"map-flop slopes: {bench.scaling_slopes(records, 'map_flops')}")
        for name, passed in results.items():
            print(f"{name}: {'PASS' if passed else 'FAIL'}")
        if not results or not all(results.values()):
            return EXIT_VERIFY
    return EXIT_OK


def cmd_quantize(args: argparse.Namespace) -> int:
    out = output_path(args.out, Path(args.input).with_suffix(".qnf4").name)
    _print_config("quantize", {"input": args.input, "out": out, "blocksize": args.blocksize,
                               "group_size": args.group_size})
    w = _load_npy(args.input)
    q = quantkit.quantize(w, args.blocksize, args.group_size)
    quantkit.save_quantized(str(out), q)
    restored = q.dequantize()
    rms = float(np.sqrt(np.mean(np.square(restored - w)))) if w.size else 0.0
    print(f"{q.rows}x{q.cols}: {w.nbytes:,d} -> {q.nbytes:,d} bytes, round-trip RMS {rms:.6g}")
    print(f"written to {out}")
    return EXIT_OK


def _load_npy(path: str) -> np.ndarray:
    try:
        arr = np.load(path, allow_pickle=False)
    except OSError as e:
        raise OSError(f"cannot read weight {path}: {e}")
    except ValueError as e:
        raise ContainerError(f"{path} is not a numpy array file: {e}")
    return numkit.as_matrix(arr, dtype=np.float64)


def _load_weight(path: str) -> np.ndarray:
    if Path(path).suffix == ".qnf4":
        return quantkit.load_quantized(path).dequantize()
    return _load_npy(path)


def cmd_merge(args: argparse.Namespace) -> int:
    out = output_path(args.out, "merged.npy")
    _print_config("merge", {"weight": args.weight, "adapter": args.adapter, "layer": args.layer, "out": out})
    w = _load_weight(args.weight)

    if args.adapter == "id":
        merged = w.copy()
    else:
        adapters = oftlayer.load_adapters(args.adapter)
        name = args.layer or next(iter(adapters), None)
        if name not in adapters:
            print(f"layer {name!r} not in {args.adapter}; available: {', '.join(adapters)}", file=sys.stderr)
            return EXIT_USAGE
        adapter = adapters[name]
        merged = oftlayer.merge(adapter, w)
        drift = float(oftlayer.column_norm_drift(merged, w).max()) if w.size else 0.0
        print(f"layer {name}: max column-norm drift {drift:.3e}, "
              f"orthogonality error {oftlayer.adapter_orthogonality_error(adapter):.3e}")

    if out.suffix == ".qnf4":
        quantkit.save_quantized(str(out), quantkit.quantize(merged))
    else:
        try:
            np.save(out, merged)
        except OSError as e:
            raise OSError(f"cannot write merged weight {out}: {e}")
    print(f"merged weight written to {out}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    seed = resolve_seed(args.seed)
    _print_config("report", {"d": args.d, "n": args.n, "b": args.b, "rank": args.rank, "scale": args.scale,
                             "seed": seed, "out": args.out})
    rng = numkit.make_rng(seed)
    w = numkit.gaussian(rng, args.d, args.n)
    oft = oftlayer.BlockOrthogonalAdapter.random(args.d, args.b, rng, scale=args.scale)
    lora = LowRankAdapter.fresh(args.d, args.n, args.rank, rng)
    lora.b[:] = numkit.gaussian(rng, args.rank, args.n, scale=args.scale)

    text = merge_gap_report(w, oft, lora).to_text()
    print(text, end="")
    if args.out:
        try:
            Path(args.out).write_text(text)
        except OSError as e:
            raise OSError(f"cannot write report {args.out}: {e}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    formatter = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="oftkit", description="Orthogonal finetuning toolkit",
                                     formatter_class=formatter)
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run property suites", formatter_class=formatter)
    p.add_argument("--suite", choices=("all",) + verify_suites.SUITES, default="all", help="suite to run")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("params", help="count trainable parameters", formatter_class=formatter)
    p.add_argument("--arch", choices=["all"] + oftlayer.available_architectures(), default="llama2-7b",
                   help="bundled architecture table")
    p.add_argument("--method", choices=("oft", "lora"), default="oft", help="adapter kind")
    p.add_argument("--b", type=int, default=None, help="OFT block size (table default if omitted)")
    p.add_argument("--rank", type=int, default=None, help="LoRA rank (table default if omitted)")
    p.add_argument("--check", action="store_true", help="compare with the published count")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("train", help="run a synthetic training task", formatter_class=formatter)
    p.add_argument("--config", default=None, help="key=value TrainConfig file")
    p.add_argument("--task", choices=TASKS, default=None, help="task (config value if omitted)")
    p.add_argument("--adapter", choices=("oft", "lora"), default=None, help="adapter kind")
    p.add_argument("--base", choices=("full", "nf4"), default=None, help="frozen base precision")
    p.add_argument("--d", type=int, default=None, help="input dimension")
    p.add_argument("--n", type=int, default=None, help="output dimension / hidden width")
    p.add_argument("--b", type=int, default=None, help="OFT block size")
    p.add_argument("--k", type=int, default=None, help="Neumann order")
    p.add_argument("--lora-rank", type=int, default=None, help="LoRA rank")
    p.add_argument("--alpha", type=float, default=None, help="LoRA alpha (scaling = alpha / rank)")
    p.add_argument("--steps", type=int, default=None, help="optimizer steps")
    p.add_argument("--lr", type=float, default=None, help="Adam learning rate")
    p.add_argument("--lr-schedule", choices=LR_SCHEDULES, default=None, help="learning-rate schedule")
    p.add_argument("--m", type=int, default=None, help="batch size")
    p.add_argument("--log-every", type=int, default=None, help="trace logging interval")
    p.add_argument("--seed", type=int, default=None, help="random seed (config file seed, OFT_SEED, then 0)")
    p.add_argument("--out", default=None, help="trace CSV path")
    p.add_argument("--probe", default=None, help="stability probe CSV path")
    p.add_argument("--save-adapter", default=None, help="write the trained OFT adapter here")
    p.add_argument("--check", action="store_true", help="enforce the pinned convergence thresholds")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="time and meter forwards", formatter_class=formatter)
    p.add_argument("--dims", type=_int_list, default=bench.DEFAULT_DIMS, help="comma-separated d values (n = d)")
    p.add_argument("--modes", type=_mode_list, default=bench.FORWARD_MODES, help="comma-separated modes")
    p.add_argument("--m", type=int, default=8, help="batch size")
    p.add_argument("--b", type=int, default=32, help="OFT block size")
    p.add_argument("--k", type=int, default=5, help="Neumann order")
    p.add_argument("--repeats", type=int, default=bench.MIN_REPEATS, help="timed repeats per configuration")
    p.add_argument("--staging", choices=("full", "streamed", "both"), default="streamed",
                   help="dequantization staging for qoft/qlora modes; both writes one row per staging")
    p.add_argument("--seed", type=int, default=None, help="random seed (OFT_SEED, then 0)")
    p.add_argument("--out", default=None, help="CSV path")
    p.add_argument("--check-scaling", action="store_true", help="assert slope and peak-memory criteria")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("quantize", help="NF4-quantize a .npy weight", formatter_class=formatter)
    p.add_argument("--input", required=True, help=".npy weight matrix")
    p.add_argument("--out", default=None, help="QNF4 container path")
    p.add_argument("--blocksize", type=int, default=quantkit.DEFAULT_BLOCKSIZE, help="values per NF4 block")
    p.add_argument("--group-size", type=int, default=quantkit.DEFAULT_GROUP_SIZE, help="blocks per scale group")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("merge", help="fold an OFT adapter into a weight", formatter_class=formatter)
    p.add_argument("--weight", required=True, help=".npy or .qnf4 weight")
    p.add_argument("--adapter", required=True, help="OFT2 container, or 'id' for the identity")
    p.add_argument("--layer", default=None, help="layer name inside the container (first if omitted)")
    p.add_argument("--out", default=None, help=".npy output, or .qnf4 to requantize")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("report", help="merge/requantization gap on a random weight", formatter_class=formatter)
    p.add_argument("--d", type=int, default=64, help="input dimension")
    p.add_argument("--n", type=int, default=32, help="output dimension")
    p.add_argument("--b", type=int, default=8, help="OFT block size")
    p.add_argument("--rank", type=int, default=4, help="LoRA rank")
    p.add_argument("--scale", type=float, default=0.05, help="perturbation scale of both adapters")
    p.add_argument("--seed", type=int, default=None, help="random seed (OFT_SEED, then 0)")
    p.add_argument("--out", default=None, help="write the key=value report here")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except ContainerError as e:
        print(f"{args.command}: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"{args.command}: {e}", file=sys.stderr)
        return EXIT_IO
    except (OftError, ValueError) as e:
        print(f"{args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
