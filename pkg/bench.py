"""
Forward-pass benchmarks: time, metered flops and metered peak bytes

Each configuration is set up outside the timed region, run once under an
AllocMeter (flops and peak bytes), warmed up, then timed; wall_ns is the
median of the timed repeats. Constructions are never cached, so every
repeat pays the Cayley-Neumann cost.
"""

import logging
import time
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

import numkit
from baseline import LowRankAdapter, lora_forward
from data_models import BENCH_COLUMNS, BenchRecord, NeumannConfig
from errors import ConfigError, DataError
from oftlayer import BlockOrthogonalAdapter, forward_input_centric, forward_weight_centric
from quantkit import FullPrecisionWeight, qoft_forward, quantize

logger = logging.getLogger(__name__)

DEFAULT_DIMS = [256, 512, 1024, 2048, 4096]
FORWARD_MODES = ["weight_centric", "input_centric"]
WARMUP = 2
MIN_REPEATS = 5

WEIGHT_SLOPE_MIN = 2.6
INPUT_SLOPE_MAX = 2.3
FLOP_RATIO_SLOPE = (0.9, 1.1)
PEAK_GAP_FRACTION = 0.9


def cnp_flops(d: int, b: int, k: int) -> int:
    """k products of b x b matrices per block"""
    return 2 * k * d * b * b


def analytic_flops(mode: str, d: int, n: int, b: int, k: int, m: int, rank: int = 0) -> int:
    """Closed-form flop count of each benchmarked forward (matrix products only)"""
    if mode == "weight_centric":
        return cnp_flops(d, b, k) + 2 * n * d * d + 2 * n * d * m
    if mode in ("input_centric", "qoft"):
        return cnp_flops(d, b, k) + 2 * d * b * m + 2 * n * d * m
    if mode in ("lora", "qlora"):
        return 2 * n * d * m + 2 * rank * d * m + 2 * n * rank * m
    raise ConfigError(f"unknown bench mode {mode!r}")


def matched_lora_rank(d: int, n: int, b: int) -> int:
    """LoRA rank whose r (d + n) parameters come closest to d (b - 1) / 2"""
    return max(1, int(round(d * (b - 1) / 2 / (d + n))))


def _measure(fn: Callable[[], np.ndarray], name: str, repeats: int):
    """(median wall ns, metered flops, metered peak bytes)"""
    with numkit.AllocMeter(name) as meter:
        fn()
    for _ in range(WARMUP):
        fn()
    samples = []
    for _ in range(repeats):
        start = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - start)
    return max(1, int(np.median(samples))), meter.flops, meter.peak_bytes


def _check_dims(d: int, b: int) -> None:
    if d < 1 or b < 1 or d % b != 0:
        raise ConfigError(f"block size b={b} must divide d={d}")


def run_forward_bench(dims: Sequence[int], modes: Optional[Sequence[str]] = None, m: int = 8, b: int = 32,
                      k: int = 5, repeats: int = MIN_REPEATS, seed: int = 0,
                      dtype=numkit.BENCH_DTYPE) -> List[BenchRecord]:
    """
    Time dense forwards on square weights (n = d)

    Modes: weight_centric, input_centric, lora (rank matched to the OFT
    parameter budget).
    """
    modes = list(modes or FORWARD_MODES)
    for mode in modes:
        if mode not in ("weight_centric", "input_centric", "lora"):
            raise ConfigError(f"mode {mode!r} is not a dense forward; use run_quant_bench")
    if repeats < 1 or m < 1:
        raise ConfigError("repeats and m must be >= 1")

    records = []
    for d in dims:
        _check_dims(d, b)
        n = d
        rng = numkit.make_rng(seed + d)
        w0 = numkit.gaussian(rng, d, n, scale=1.0 / np.sqrt(d), dtype=dtype)
        x = numkit.gaussian(rng, d, m, dtype=dtype)
        adapter = BlockOrthogonalAdapter.random(d, b, rng, scale=0.02, neumann=NeumannConfig(k=k), dtype=dtype)
        rank = matched_lora_rank(d, n, b)
        lora = LowRankAdapter(numkit.gaussian(rng, d, rank, dtype=dtype),
                              numkit.gaussian(rng, rank, n, scale=0.01, dtype=dtype))

        runners = {
            "weight_centric": lambda: forward_weight_centric(adapter, w0, x, use_cache=False),
            "input_centric": lambda: forward_input_centric(adapter, w0, x, use_cache=False),
            "lora": lambda: lora_forward(w0, lora, x),
        }
        for mode in modes:
            wall, flops, peak = _measure(runners[mode], f"{mode}@{d}", repeats)
            lora_row = mode == "lora"
            records.append(BenchRecord(
                mode=mode, d=d, n=n, b=b, k=0 if lora_row else k, m=m, wall_ns=wall, flops_est=flops,
                cnp_flops=0 if lora_row else cnp_flops(d, b, k), peak_bytes=peak, repeats=repeats,
            ))
            logger.info("%s d=%d: %.3f ms, %d flops, %d peak bytes", mode, d, wall / 1e6, flops, peak)
    return records


def run_quant_bench(dims: Sequence[int], m: int = 8, b: int = 32, k: int = 5, repeats: int = MIN_REPEATS,
                    seed: int = 0, stagings: Sequence[str] = ("full", "streamed"),
                    include_passthrough: bool = True) -> List[BenchRecord]:
    """
    qoft_forward vs QLoRA forward on NF4 weights, plus the dense input-centric reference

    Every staging policy is measured for both adapters; with
    include_passthrough the pass-through codec is run through the same
    streamed path so its timing can be compared with the dense forward.
    """
    if repeats < 1 or m < 1:
        raise ConfigError("repeats and m must be >= 1")
    records = []
    for d in dims:
        _check_dims(d, b)
        n = d
        rng = numkit.make_rng(seed + d)
        w0 = numkit.gaussian(rng, d, n, scale=1.0 / np.sqrt(d))
        x = numkit.gaussian(rng, d, m)
        adapter = BlockOrthogonalAdapter.random(d, b, rng, scale=0.02, neumann=NeumannConfig(k=k))
        rank = matched_lora_rank(d, n, b)
        lora = LowRankAdapter(numkit.gaussian(rng, d, rank), numkit.gaussian(rng, rank, n, scale=0.01))
        q = quantize(w0)
        passthrough = FullPrecisionWeight(w0)

        cases = [("input_centric", "dense", "-", lambda: forward_input_centric(adapter, w0, x, use_cache=False))]
        for staging in stagings:
            cases.append(("qoft", "nf4", staging,
                          lambda s=staging: qoft_forward(q, adapter, x, staging=s, use_cache=False)))
            cases.append(("qlora", "nf4", staging, lambda s=staging: lora_forward(q, lora, x, staging=s)))
        if include_passthrough:
            cases.append(("qoft", "passthrough", "streamed",
                          lambda: qoft_forward(passthrough, adapter, x, staging="streamed", use_cache=False)))

        for mode, codec, staging, fn in cases:
            wall, flops, peak = _measure(fn, f"{mode}/{codec}/{staging}@{d}", repeats)
            lora_row = mode == "qlora"
            records.append(BenchRecord(
                mode=mode, d=d, n=n, b=b, k=0 if lora_row else k, m=m, wall_ns=wall, flops_est=flops,
                cnp_flops=0 if lora_row else cnp_flops(d, b, k), peak_bytes=peak, repeats=repeats,
                codec=codec, staging=staging,
            ))
            logger.info("%s %s/%s d=%d: %.3f ms, %d peak bytes", mode, codec, staging, d, wall / 1e6, peak)
    return records


def to_frame(records: Sequence[BenchRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.to_dict() for r in records], columns=BENCH_COLUMNS)


def quant_summary(records: Sequence[BenchRecord]) -> pd.DataFrame:
    """
    Per (d, staging): dequantization overhead of qoft over the dense
    input-centric forward, and the qoft / qlora wall-time ratio
    """
    frame = to_frame(records)
    rows = []
    dense = frame[(frame["mode"] == "input_centric") & (frame["codec"] == "dense")].set_index("d")["wall_ns"]
    nf4 = frame[frame["codec"] == "nf4"]
    for (d, staging), group in nf4.groupby(["d", "staging"]):
        walls = group.set_index("mode")["wall_ns"]
        if "qoft" not in walls or "qlora" not in walls:
            continue
        qoft = float(walls["qoft"])
        rows.append({
            "d": int(d),
            "staging": staging,
            "dequant_overhead": (qoft - float(dense[d])) / qoft if d in dense.index else float("nan"),
            "qoft_over_qlora": qoft / float(walls["qlora"]),
        })
    return pd.DataFrame(rows, columns=["d", "staging", "dequant_overhead", "qoft_over_qlora"])


def emit_csv(records: Sequence[BenchRecord], path: str) -> None:
    """
    Write records with a header row in BENCH_COLUMNS order

    Raises:
        DataError: records is empty
        OSError: the file cannot be written (message carries the path)
    """
    if not records:
        raise DataError("no benchmark records to write")
    try:
        to_frame(records).to_csv(path, index=False)
    except OSError as e:
        raise OSError(f"cannot write benchmark CSV {path}: {e}")


def read_csv(path: str) -> List[BenchRecord]:
    try:
        frame = pd.read_csv(path, dtype={"codec": str, "staging": str}, keep_default_na=False)
    except OSError as e:
        raise OSError(f"cannot read benchmark CSV {path}: {e}")
    if list(frame.columns) != BENCH_COLUMNS:
        raise DataError(f"{path}: columns {list(frame.columns)} do not match {BENCH_COLUMNS}")
    if frame.empty:
        raise DataError(f"{path} holds no records")
    records = []
    for row in frame.to_dict(orient="records"):
        typed = {key: (value if key in ("mode", "codec", "staging") else int(value)) for key, value in row.items()}
        records.append(BenchRecord(**typed))
    return records


def _slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    slope, _ = np.polyfit(np.log(np.asarray(xs, dtype=float)), np.log(np.asarray(ys, dtype=float)), 1)
    return float(slope)


def scaling_slopes(records: Sequence[BenchRecord], metric: str = "wall_ns") -> Dict[str, float]:
    """
    Least-squares log-log slope of metric versus d, per dense mode

    metric is a BenchRecord column or "map_flops".
    """
    by_mode: Dict[str, Dict[int, float]] = {}
    for r in records:
        if r.codec != "dense":
            continue
        value = r.map_flops if metric == "map_flops" else getattr(r, metric)
        by_mode.setdefault(r.mode, {})[r.d] = float(value)
    slopes = {}
    for mode, points in by_mode.items():
        if len(points) >= 2:
            ds = sorted(points)
            slopes[mode] = _slope(ds, [points[d] for d in ds])
    return slopes


def flop_ratio_slope(records: Sequence[BenchRecord]) -> float:
    """Log-log slope of weight-centric over input-centric map flops versus d"""
    weight = {r.d: r.map_flops for r in records if r.mode == "weight_centric"}
    inputs = {r.d: r.map_flops for r in records if r.mode == "input_centric" and r.codec == "dense"}
    ds = sorted(set(weight) & set(inputs))
    if len(ds) < 2:
        raise DataError("need weight- and input-centric records at two or more dims")
    return _slope(ds, [weight[d] / inputs[d] for d in ds])


def check_scaling(records: Sequence[BenchRecord]) -> Dict[str, bool]:
    """Named pass/fail results for the scaling and memory criteria"""
    results: Dict[str, bool] = {}
    walls = scaling_slopes(records, "wall_ns")
    if "weight_centric" in walls:
        results["wall_slope.weight_centric"] = walls["weight_centric"] >= WEIGHT_SLOPE_MIN
    if "input_centric" in walls:
        results["wall_slope.input_centric"] = walls["input_centric"] <= INPUT_SLOPE_MAX
    try:
        lo, hi = FLOP_RATIO_SLOPE
        results["flop_ratio_slope"] = lo <= flop_ratio_slope(records) <= hi
    except DataError:
        pass

    peaks = {(r.mode, r.d): r for r in records if r.codec == "dense"}
    for (mode, d), weight in peaks.items():
        if mode != "weight_centric" or ("input_centric", d) not in peaks:
            continue
        itemsize = np.dtype(numkit.BENCH_DTYPE).itemsize
        gap = weight.peak_bytes - peaks[("input_centric", d)].peak_bytes
        results[f"peak_gap@{d}"] = gap >= PEAK_GAP_FRACTION * itemsize * d * weight.n
    return results


if __name__ == "__main__":
    print("Testing bench...")
    print("=" * 50)

    recs = run_forward_bench([64, 128, 256], b=16, repeats=3)
    print(to_frame(recs))
    print(f"map-flop slopes: {scaling_slopes(recs, 'map_flops')}")
    print(f"flop ratio slope: {flop_ratio_slope(recs):.3f}")

    quant = run_quant_bench([128], b=16, repeats=3)
    print(quant_summary(quant))

    print("=" * 50)
    print("bench: READY")
