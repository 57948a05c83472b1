"""
Property suites run by `cli verify`

Each suite returns a list of PropertyResult; a property that raises counts
as failed with the exception text as its detail. Library functions are
looked up through their modules at call time so that a patched function is
what gets verified.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

import baseline
import cayley
import numkit
import oftlayer
import quantkit
import skewcore
import trainer
from data_models import NeumannConfig
from errors import DivergenceRiskError

logger = logging.getLogger(__name__)

SUITES = ("cayley", "skew", "layer", "quant", "grad", "baseline")
RMS_LIMIT = 0.12


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str = ""

    def to_dict(self) -> Dict[str, str]:
        return {"property": self.name, "status": "PASS" if self.passed else "FAIL", "detail": self.detail}


def _run(name: str, check: Callable[[], Tuple[bool, str]]) -> PropertyResult:
    try:
        passed, detail = check()
    except Exception as e:
        logger.debug("property %s raised", name, exc_info=True)
        return PropertyResult(name, False, f"{type(e).__name__}: {e}")
    return PropertyResult(name, bool(passed), detail)


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / denom) if denom else float(np.linalg.norm(a - b))


def _skew(rng: np.random.Generator, n: int, norm: float) -> np.ndarray:
    q = rng.standard_normal((n, n))
    q = q - q.T
    return q * (norm / np.linalg.norm(q, 2))


# cayley


def _exact_orthogonality() -> Tuple[bool, str]:
    rng = numkit.make_rng(1)
    worst_orth, worst_det = 0.0, 0.0
    for _ in range(20):
        r = cayley.cayley_exact(_skew(rng, 8, rng.uniform(0.1, 3.0)))
        worst_orth = max(worst_orth, cayley.orthogonality_error(r))
        worst_det = max(worst_det, abs(cayley.rotation_determinant(r) - 1.0))
    return worst_orth <= 1e-10 and worst_det <= 1e-10, f"max orth err {worst_orth:.2e}, max |det - 1| {worst_det:.2e}"


def _closed_form_2x2() -> Tuple[bool, str]:
    a = 0.1
    r = cayley.cayley_exact(np.array([[0.0, a], [-a, 0.0]]))
    c, s = (1 - a * a) / (1 + a * a), 2 * a / (1 + a * a)
    err = float(np.abs(r - np.array([[c, s], [-s, c]])).max())
    return err <= 1e-14, f"max entry error {err:.2e}"


def _tail_bound() -> Tuple[bool, str]:
    rng = numkit.make_rng(2)
    violations = 0
    for _ in range(100):
        norm = rng.uniform(0.05, 0.9)
        k = int(rng.integers(1, 9))
        q = _skew(rng, 6, norm)
        err = float(np.linalg.norm(cayley.cayley_neumann(q, NeumannConfig(k=k)) - cayley.cayley_exact(q), 2))
        if err > cayley.tail_bound(norm, k) + 1e-12:
            violations += 1
    return violations == 0, f"{violations} of 100 instances exceed the tail bound"


def _neumann_convergence() -> Tuple[bool, str]:
    q = _skew(numkit.make_rng(3), 8, 0.3)
    err = float(np.linalg.norm(cayley.cayley_neumann(q, NeumannConfig(k=30)) - cayley.cayley_exact(q)))
    return err <= 1e-12, f"k=30 error {err:.2e}"


def _monotone_in_k() -> Tuple[bool, str]:
    q = _skew(numkit.make_rng(4), 8, 0.9)
    exact = cayley.cayley_exact(q)
    errs = [float(np.linalg.norm(cayley.cayley_neumann(q, NeumannConfig(k=k)) - exact)) for k in range(1, 12)]
    ok = all(later <= earlier + 1e-12 for earlier, later in zip(errs, errs[1:]))
    return ok, f"errors k=1..11: {errs[0]:.2e} .. {errs[-1]:.2e}"


def _zero_is_identity() -> Tuple[bool, str]:
    eye = np.eye(5)
    zero = np.zeros((5, 5))
    ok = np.array_equal(cayley.cayley_exact(zero), eye) and np.array_equal(cayley.cayley_neumann(zero), eye)
    return ok, "both paths return I for Q = 0"


def _norm_guard() -> Tuple[bool, str]:
    # rotation generators with known singular values 0.95, 0.3, 0.1
    q = np.zeros((6, 6))
    for i, a in enumerate((0.95, 0.3, 0.1)):
        q[2 * i, 2 * i + 1], q[2 * i + 1, 2 * i] = a, -a
    try:
        cayley.cayley_neumann(q, NeumannConfig(k=5, norm_guard=0.9))
    except DivergenceRiskError as e:
        return abs(e.norm_estimate - 0.95) < 1e-6, f"guard fired at estimate {e.norm_estimate:.4f}"
    return False, "guard did not fire"


def suite_cayley() -> List[PropertyResult]:
    return [
        _run("cayley.exact_orthogonality", _exact_orthogonality),
        _run("cayley.closed_form_2x2", _closed_form_2x2),
        _run("cayley.tail_bound", _tail_bound),
        _run("cayley.neumann_convergence", _neumann_convergence),
        _run("cayley.monotone_in_k", _monotone_in_k),
        _run("cayley.zero_is_identity", _zero_is_identity),
        _run("cayley.norm_guard", _norm_guard),
    ]


# skew


def _round_trip() -> Tuple[bool, str]:
    rng = numkit.make_rng(6)
    for n in (1, 2, 3, 5, 8, 32):
        q = skewcore.unpack(skewcore.random_skew(rng, n))
        if not np.array_equal(skewcore.unpack(skewcore.pack(q)), q):
            return False, f"pack/unpack changed a {n}x{n} block"
        s = skewcore.random_skew(rng, n)
        if not np.array_equal(skewcore.pack(skewcore.unpack(s)).u, s.u):
            return False, f"unpack/pack changed a compact vector of side {n}"
    return True, "bit-exact for n in 1, 2, 3, 5, 8, 32"


def _layout() -> Tuple[bool, str]:
    q = np.array([[0.0, 1.0, 2.0], [-1.0, 0.0, 3.0], [-2.0, -3.0, 0.0]])
    ok = np.array_equal(skewcore.pack(q).u, [1.0, 2.0, 3.0])
    ok = ok and skewcore.compact_length(32) == 496
    ok = ok and np.array_equal(skewcore.unpack(skewcore.CompactSkew(2, np.array([0.5]))), [[0.0, 0.5], [-0.5, 0.0]])
    return ok, "row-major strict upper triangle"


def _antisymmetry() -> Tuple[bool, str]:
    rng = numkit.make_rng(7)
    for n in (2, 5, 8):
        q = skewcore.unpack(skewcore.random_skew(rng, n))
        if np.any(q + q.T != 0.0):
            return False, f"unpack(s) + unpack(s)^T != 0 for n={n}"
    return True, "exact"


def _apply_blocks() -> Tuple[bool, str]:
    rng = numkit.make_rng(8)
    worst = 0.0
    for sides in ([1, 2, 3, 5, 8], [2, 2], [8]):
        blocks = [skewcore.random_skew(rng, n) for n in sides]
        dense = np.zeros((sum(sides), sum(sides)))
        offset = 0
        for s in blocks:
            dense[offset:offset + s.n, offset:offset + s.n] = skewcore.unpack(s)
            offset += s.n
        for m in (1, 7):
            x = rng.standard_normal((sum(sides), m))
            worst = max(worst, float(np.abs(skewcore.apply_blocks(blocks, x) - dense @ x).max()))
    return worst <= 1e-12, f"max deviation from dense oracle {worst:.2e}"


def suite_skew() -> List[PropertyResult]:
    return [
        _run("skew.round_trip", _round_trip),
        _run("skew.layout", _layout),
        _run("skew.antisymmetry", _antisymmetry),
        _run("skew.apply_blocks", _apply_blocks),
    ]


# layer


def _forward_equivalence() -> Tuple[bool, str]:
    rng = numkit.make_rng(9)
    worst = 0.0
    for _ in range(200):
        d = int(rng.choice([4, 8, 32, 64]))
        divisors = [b for b in range(1, d + 1) if d % b == 0]
        b = int(rng.choice(divisors))
        n = int(rng.choice([3, 16]))
        m = int(rng.choice([1, 8]))
        k = int(rng.choice([1, 3, 5]))
        a = oftlayer.BlockOrthogonalAdapter.random(d, b, rng, scale=0.1, neumann=NeumannConfig(k=k))
        w0 = rng.standard_normal((d, n))
        x = rng.standard_normal((d, m))
        worst = max(worst, _rel(oftlayer.forward_input_centric(a, w0, x), oftlayer.forward_weight_centric(a, w0, x)))
    return worst <= 1e-11, f"max relative Frobenius gap {worst:.2e} over 200 configs"


def _identity_noop() -> Tuple[bool, str]:
    rng = numkit.make_rng(10)
    w0 = rng.standard_normal((16, 5))
    x = rng.standard_normal((16, 3))
    z = oftlayer.forward_input_centric(oftlayer.BlockOrthogonalAdapter(16, 4), w0, x)
    return np.array_equal(z, w0.T @ x), "fresh adapter forward equals W0^T x"


def _merge_forward() -> Tuple[bool, str]:
    rng = numkit.make_rng(11)
    worst_fwd, worst_drift = 0.0, 0.0
    for _ in range(20):
        a = oftlayer.BlockOrthogonalAdapter.random(12, 3, rng, scale=0.3)
        w0 = rng.standard_normal((12, 7))
        x = rng.standard_normal((12, 4))
        merged = oftlayer.merge(a, w0)
        worst_fwd = max(worst_fwd, _rel(merged.T @ x, oftlayer.forward_input_centric(a, w0, x)))
        bound = oftlayer.adapter_orthogonality_error(a) * np.linalg.norm(w0, axis=0)
        excess = oftlayer.column_norm_drift(merged, w0) - bound
        worst_drift = max(worst_drift, float(excess.max()))
    ok = worst_fwd <= 1e-11 and worst_drift <= 1e-12
    return ok, f"merge gap {worst_fwd:.2e}, drift above bound {max(worst_drift, 0.0):.2e}"


def _param_counts() -> Tuple[bool, str]:
    mismatches = []
    for name in oftlayer.available_architectures():
        arch = oftlayer.load_architecture(name)
        layers = oftlayer.architecture_layers(arch)
        expected = arch["expected"]
        got_oft = oftlayer.count_params(layers, expected["oft"]["b"]) / 1e6
        got_lora = oftlayer.count_params_lora(layers, expected["lora"]["rank"]) / 1e6
        if f"{got_oft:.2f}" != str(expected["oft"]["millions"]):
            mismatches.append(f"{name} oft {got_oft:.2f}")
        if f"{got_lora:.2f}" != str(expected["lora"]["millions"]):
            mismatches.append(f"{name} lora {got_lora:.2f}")
    return not mismatches, ", ".join(mismatches) or "all bundled tables match"


def _energy_invariance() -> Tuple[bool, str]:
    rng = numkit.make_rng(12)
    w = rng.standard_normal((8, 6))
    base = oftlayer.hyperspherical_energy(w)
    r = cayley.cayley_exact(_skew(rng, 8, 0.7))
    gap = abs(oftlayer.hyperspherical_energy(r @ w) - base) / base
    return gap <= 1e-9, f"relative energy change {gap:.2e}"


def _container_round_trip() -> Tuple[bool, str]:
    rng = numkit.make_rng(13)
    adapters = {"layer.0.q": oftlayer.BlockOrthogonalAdapter.random(8, 4, rng),
                "layer.0.v": oftlayer.BlockOrthogonalAdapter.random(6, 3, rng, neumann=NeumannConfig(k=2))}
    restored = oftlayer.adapter_from_bytes(oftlayer.adapter_to_bytes(adapters))
    ok = list(restored) == list(adapters)
    for name, a in adapters.items():
        r = restored[name]
        ok = ok and (r.d, r.b, r.neumann.k) == (a.d, a.b, a.neumann.k)
        ok = ok and all(np.array_equal(x.u, y.u.astype(np.float32)) for x, y in zip(r.blocks, a.blocks))
    return ok, "lossless at 32-bit precision"


def suite_layer() -> List[PropertyResult]:
    return [
        _run("layer.forward_equivalence", _forward_equivalence),
        _run("layer.identity_noop", _identity_noop),
        _run("layer.merge_forward", _merge_forward),
        _run("layer.param_counts", _param_counts),
        _run("layer.energy_invariance", _energy_invariance),
        _run("layer.container_round_trip", _container_round_trip),
    ]


# quant


def _codebook() -> Tuple[bool, str]:
    levels = quantkit.build_codebook().levels
    ok = levels[0] == -1.0 and levels[-1] == 1.0 and np.all(np.diff(levels) > 0)
    ok = ok and np.count_nonzero(levels == 0.0) == 1
    ok = ok and (np.count_nonzero(levels < 0), np.count_nonzero(levels > 0)) == (8, 7)
    return bool(ok), "16 increasing levels, 8 negative, exact zero, 7 positive, endpoints +-1"


def _level_exactness() -> Tuple[bool, str]:
    # absmax is stored through a float32 offset, so exactness needs a float32-representable absmax
    exact = True
    for absmax in (2.0, float(np.float32(1.3)), float(np.float32(0.0371))):
        w = np.tile(quantkit.NF4.levels * absmax, 4).reshape(1, 64)
        exact = exact and np.array_equal(quantkit.dequantize(quantkit.quantize(w)), w)
    w = np.tile(quantkit.NF4.levels * 1.3, 4).reshape(1, 64)
    close = np.allclose(quantkit.dequantize(quantkit.quantize(w)), w, rtol=1e-7, atol=0.0)
    return bool(exact and close), "exact for float32 absmax, within float32 precision otherwise"


def _code_idempotence() -> Tuple[bool, str]:
    w = numkit.make_rng(14).standard_normal((1000, 64))
    first = quantkit.quantize(w)
    second = quantkit.quantize(quantkit.dequantize(first))
    return np.array_equal(first.codes, second.codes), "codes stable over 1,000 Gaussian blocks"


def _scale_invariance() -> Tuple[bool, str]:
    w = numkit.make_rng(15).standard_normal((32, 64))
    codes = quantkit.quantize(w).codes
    ok = all(np.array_equal(quantkit.quantize(alpha * w).codes, codes) for alpha in (0.25, 2.0, 8.0))
    return ok, "codes unchanged under positive power-of-two scaling"


def _roundtrip_rms() -> Tuple[bool, str]:
    rng = numkit.make_rng(16)
    worst = 0.0
    for sigma in (0.02, 1.0, 5.0):
        w = sigma * rng.standard_normal((256, 256))
        worst = max(worst, quantkit.roundtrip_rms(w) / sigma)
    return worst <= RMS_LIMIT, f"max RMS / sigma {worst:.4f} (limit {RMS_LIMIT})"


def _qoft_composition() -> Tuple[bool, str]:
    rng = numkit.make_rng(17)
    w = rng.standard_normal((32, 48))
    q = quantkit.quantize(w)
    a = oftlayer.BlockOrthogonalAdapter.random(32, 8, rng, scale=0.2)
    x = rng.standard_normal((32, 5))
    oracle = oftlayer.forward_input_centric(a, quantkit.dequantize(q), x)
    gaps = [_rel(quantkit.qoft_forward(q, a, x, staging=s), oracle) for s in quantkit.STAGING_POLICIES]
    passthrough = quantkit.qoft_forward(quantkit.FullPrecisionWeight(w), a, x)
    ok = max(gaps) <= 1e-12 and np.array_equal(passthrough, oftlayer.forward_input_centric(a, w, x))
    return ok, f"max gap to dequantize-then-forward {max(gaps):.2e}"


def _container() -> Tuple[bool, str]:
    q = quantkit.quantize(numkit.make_rng(18).standard_normal((33, 17)))
    data = quantkit.quantized_to_bytes(q)
    return quantkit.quantized_to_bytes(quantkit.quantized_from_bytes(data)) == data, "bit-exact"


def _frozen_base() -> Tuple[bool, str]:
    rng = numkit.make_rng(19)
    q = quantkit.quantize(rng.standard_normal((16, 8)))
    before = quantkit.quantized_to_bytes(q)
    a = oftlayer.BlockOrthogonalAdapter.random(16, 4, rng)
    x = rng.standard_normal((16, 3))
    z = quantkit.qoft_forward(q, a, x)
    quantkit.qoft_backward(q, a, x, z)
    return quantkit.quantized_to_bytes(q) == before, "forward and backward leave the codes untouched"


def _staging_peak() -> Tuple[bool, str]:
    rng = numkit.make_rng(20)
    d = 1024
    q = quantkit.quantize(rng.standard_normal((d, d)))
    a = oftlayer.BlockOrthogonalAdapter.random(d, 32, rng, scale=0.02)
    x = rng.standard_normal((d, 8))
    peaks = {}
    for staging in quantkit.STAGING_POLICIES:
        with numkit.AllocMeter(staging) as meter:
            quantkit.qoft_forward(q, a, x, staging=staging, use_cache=False)
        peaks[staging] = meter.peak_bytes
    return peaks["streamed"] < peaks["full"], f"peak bytes {peaks}"


def suite_quant() -> List[PropertyResult]:
    return [
        _run("quant.codebook", _codebook),
        _run("quant.level_exactness", _level_exactness),
        _run("quant.code_idempotence", _code_idempotence),
        _run("quant.scale_invariance", _scale_invariance),
        _run("quant.roundtrip_rms", _roundtrip_rms),
        _run("quant.qoft_composition", _qoft_composition),
        _run("quant.container", _container),
        _run("quant.frozen_base", _frozen_base),
        _run("quant.staging_peak", _staging_peak),
    ]


# grad

GRAD_LIMITS = {"oft": 1e-6, "oft_x": 1e-6, "oft_init": 1e-12, "qoft": 1e-6, "lora": 1e-8}


def suite_grad() -> List[PropertyResult]:
    try:
        report = trainer.gradcheck()
    except Exception as e:
        return [PropertyResult("grad.gradcheck", False, f"{type(e).__name__}: {e}")]
    results = []
    for kind, limit in GRAD_LIMITS.items():
        err = report.max_error(kind)
        results.append(PropertyResult(f"grad.{kind}", err <= limit, f"max rel err {err:.2e} (limit {limit:.0e})"))
    return results


# baseline


def _lora_case(rng: np.random.Generator, d: int = 12, n: int = 9, rank: int = 3):
    w = rng.standard_normal((d, n))
    lora = baseline.LowRankAdapter(rng.standard_normal((d, rank)), rng.standard_normal((rank, n)), scaling=0.5)
    return w, lora, rng.standard_normal((d, 4))


def _zero_b_noop() -> Tuple[bool, str]:
    rng = numkit.make_rng(21)
    w = rng.standard_normal((12, 9))
    x = rng.standard_normal((12, 4))
    lora = baseline.LowRankAdapter.fresh(12, 9, 3, rng)
    return np.array_equal(baseline.lora_forward(w, lora, x), w.T @ x), "fresh LoRA forward equals W^T x"


def _merged_oracle() -> Tuple[bool, str]:
    w, lora, x = _lora_case(numkit.make_rng(22))
    gap = _rel(baseline.lora_forward(w, lora, x), baseline.merge_lora(w, lora).T @ x)
    q = quantkit.quantize(w)
    qgap = _rel(baseline.lora_forward(q, lora, x), baseline.lora_forward(quantkit.dequantize(q), lora, x))
    return gap <= 1e-12 and qgap <= 1e-12, f"merged gap {gap:.2e}, quantized-path gap {qgap:.2e}"


def _full_rank_fit() -> Tuple[bool, str]:
    rng = numkit.make_rng(23)
    w = rng.standard_normal((10, 6))
    delta = rng.standard_normal((10, 6))
    x = rng.standard_normal((10, 5))
    lora = baseline.LowRankAdapter.from_delta(delta, rank=6, scaling=2.0)
    gap = _rel(baseline.lora_forward(w, lora, x), (w + delta).T @ x)
    return gap <= 1e-10, f"relative gap {gap:.2e}"


def _merge_report() -> Tuple[bool, str]:
    rng = numkit.make_rng(24)
    w = rng.standard_normal((16, 12))
    fresh = baseline.merge_gap_report(w, oftlayer.BlockOrthogonalAdapter(16, 4), baseline.LowRankAdapter.fresh(16, 12, 2, rng))
    ok = fresh.lora_max_dev == 0.0 and fresh.oft_max_dev == 0.0 and fresh.oft_col_norm_drift == 0.0
    ok = ok and fresh.lora_requant_rms == fresh.base_requant_rms == fresh.oft_requant_rms

    oft = oftlayer.BlockOrthogonalAdapter.random(16, 4, rng, scale=0.2)
    _, lora, _ = _lora_case(rng, 16, 12, 2)
    report = baseline.merge_gap_report(w, oft, lora)
    ok = ok and report.lora_max_dev == float(np.abs(lora.scaling * (lora.a @ lora.b)).max())
    ok = ok and report.oft_col_norm_drift <= report.drift_bound() + 1e-12
    return ok, f"drift {report.oft_col_norm_drift:.2e} <= bound {report.drift_bound():.2e}"


def _init_gradients() -> Tuple[bool, str]:
    rng = numkit.make_rng(25)
    w = rng.standard_normal((12, 9))
    x = rng.standard_normal((12, 4))
    lora = baseline.LowRankAdapter.fresh(12, 9, 3, rng)
    g_a, g_b, _ = baseline.lora_backward(w, lora, x, rng.standard_normal((9, 4)))
    return not np.any(g_a) and bool(np.any(g_b)), "g_A = 0 and g_B != 0 at B = 0"


def suite_baseline() -> List[PropertyResult]:
    return [
        _run("baseline.zero_b_noop", _zero_b_noop),
        _run("baseline.merged_oracle", _merged_oracle),
        _run("baseline.full_rank_fit", _full_rank_fit),
        _run("baseline.merge_report", _merge_report),
        _run("baseline.init_gradients", _init_gradients),
    ]


SUITE_RUNNERS: Dict[str, Callable[[], List[PropertyResult]]] = {
    "cayley": suite_cayley,
    "skew": suite_skew,
    "layer": suite_layer,
    "quant": suite_quant,
    "grad": suite_grad,
    "baseline": suite_baseline,
}


def run_suites(suite: str = "all") -> List[PropertyResult]:
    """Run one suite, or every suite in order for "all" """
    names = SUITES if suite == "all" else (suite,)
    results: List[PropertyResult] = []
    for name in names:
        logger.info("running %s suite", name)
        results.extend(SUITE_RUNNERS[name]())
    return results
