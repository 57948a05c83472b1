"""
Desk-scale training harness

Adam over adapter parameters, two synthetic tasks (rotation recovery and a
4-class toy classifier), finite-difference gradient checks and the
per-step stability probe. Every random draw comes from one seeded
generator, so a TrainConfig fully determines its trace.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import numkit
from baseline import LowRankAdapter, lora_backward, lora_forward
from cayley import cayley_exact
from data_models import NeumannConfig, TRACE_COLUMNS, GradcheckReport, TrainConfig, TrainTrace
from errors import ConfigError, DataError, ShapeError, SingularEnergyError
from oftlayer import (
    BlockOrthogonalAdapter,
    adapter_orthogonality_error,
    backward,
    column_norm_drift,
    forward_input_centric,
    hyperspherical_energy,
    merge,
)
from quantkit import FrozenWeight, dequantize, qoft_backward, qoft_forward, quantize
from skewcore import unpack

logger = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0
TOY_CLASSES = 4
CONTROL_CEILING = 0.6
REDRAW_ATTEMPTS = 8


@dataclass
class AdamState:
    """First/second moments per parameter tensor plus the step counter"""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float, **kwargs) -> "AdamState":
        return cls(lr=lr, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kwargs)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              lr: Optional[float] = None) -> Sequence[np.ndarray]:
    """
    Bias-corrected Adam update, applied to params in place

    Args:
        lr: overrides state.lr for this step (learning-rate schedules)

    Returns:
        params, updated
    """
    if not len(params) == len(grads) == len(state.m):
        raise ShapeError(f"got {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"parameter {p.shape}, gradient {g.shape} and moment {m.shape} differ")

    lr = state.lr if lr is None else lr
    state.step += 1
    correct1 = 1.0 - state.beta1 ** state.step
    correct2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / correct1) / (np.sqrt(v / correct2) + state.eps)
    return params


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate for a 0-based step under cfg.lr_schedule"""
    if cfg.lr_schedule == "cosine" and cfg.steps > 0:
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / cfg.steps))
    return cfg.lr


def _block_rotation(rng: np.random.Generator, d: int, b: int, norm: float) -> np.ndarray:
    """Dense exact-Cayley block rotation, every block generator scaled to ||Q_i||_2 = norm"""
    r = np.eye(d)
    if norm == 0.0:
        return r
    for offset in range(0, d, b):
        q = rng.standard_normal((b, b))
        q = q - q.T
        spectral = np.linalg.norm(q, 2)
        if spectral > 0:
            q *= norm / spectral
        r[offset:offset + b, offset:offset + b] = cayley_exact(q)
    return r


def _frozen_base(w: np.ndarray, base: str) -> Tuple[FrozenWeight, np.ndarray]:
    """(weight handed to the forwards, its full-precision view)"""
    if base == "nf4":
        q = quantize(w)
        return q, dequantize(q)
    return w, w


def _grad_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def _diagnostics(adapter, w_eff: np.ndarray, energy0: float) -> Dict[str, float]:
    """Orthogonality, drift and energy measurements of the current adapter"""
    if isinstance(adapter, BlockOrthogonalAdapter):
        merged = merge(adapter, w_eff)
        q_norm = max((numkit.spectral_norm_est(unpack(s)) for s in adapter.blocks), default=0.0)
        orth = adapter_orthogonality_error(adapter)
    else:
        merged = w_eff + adapter.delta()
        q_norm = float("nan")
        orth = float("nan")
    try:
        energy_gap = abs(hyperspherical_energy(merged) - energy0) / energy0 if energy0 else 0.0
    except SingularEnergyError:
        energy_gap = float("nan")
    return {
        "q_norm": float(q_norm),
        "orth_err": float(orth),
        "col_drift": float(column_norm_drift(merged, w_eff).max()),
        "energy_gap": float(energy_gap),
    }


def _is_divergent(loss: float, initial: float) -> bool:
    return not math.isfinite(loss) or (initial > 0 and loss > DIVERGENCE_FACTOR * initial)


def _new_trace(cfg: TrainConfig) -> TrainTrace:
    trace = TrainTrace(task=cfg.task, adapter=cfg.adapter, base=cfg.base, seed=cfg.seed)
    trace.final["config"] = cfg.to_dict()
    return trace


def task_rotation_recovery(cfg: TrainConfig) -> TrainTrace:
    """
    Learn a hidden block rotation R* from input/output pairs

    The target maps x to (R* W0)^T x; the trained model is a fresh OFT adapter on
    the same frozen W0 (or its NF4 quantization, in which case the target
    uses the dequantized weight so the target stays reachable).
    """
    if cfg.task != "rotation-recovery":
        raise ConfigError(f"config is for task {cfg.task!r}")
    if cfg.adapter != "oft":
        raise ConfigError("rotation-recovery trains an orthogonal adapter only (adapter=oft)")

    rng = numkit.make_rng(cfg.seed)
    w0 = numkit.gaussian(rng, cfg.d, cfg.n)
    base, w_eff = _frozen_base(w0, cfg.base)
    r_star = _block_rotation(rng, cfg.d, cfg.b, cfg.target_norm)
    w_star = w_eff if cfg.target_norm == 0.0 else r_star @ w_eff

    adapter = BlockOrthogonalAdapter(cfg.d, cfg.b, NeumannConfig(k=cfg.k))
    params = adapter.parameters()
    state = AdamState.for_params(params, cfg.lr)
    energy0 = hyperspherical_energy(w_eff)

    trace = _new_trace(cfg)
    trace.final["max_col_norm"] = float(np.linalg.norm(w_eff, axis=0).max())
    initial = None
    scale = 2.0 / (cfg.n * cfg.m)

    for step in range(cfg.steps + 1):
        x = numkit.gaussian(rng, cfg.d, cfg.m)
        target = numkit.matmul(w_star.T, x)
        z = qoft_forward(base, adapter, x)
        residual = z - target
        loss = float(np.mean(residual * residual))
        initial = loss if initial is None else initial

        diverged = _is_divergent(loss, initial)
        if step == cfg.steps or diverged:
            grads, grad_norm = None, float("nan")
        else:
            grads, _ = qoft_backward(base, adapter, x, scale * residual)
            grad_norm = _grad_norm(grads)

        if step % cfg.log_every == 0 or step == cfg.steps or diverged:
            trace.log(step=step, loss=loss, grad_norm=grad_norm, diverged=diverged,
                      **_diagnostics(adapter, w_eff, energy0))
            logger.info("rotation-recovery step %d loss %.6g", step, loss)
        if diverged:
            logger.warning("loss diverged at step %d (%.6g vs initial %.6g)", step, loss, initial)
            if not math.isfinite(loss):
                break
        if grads is not None:
            adam_step(state, params, grads, lr=lr_at(cfg, step))

    merged = merge(adapter, w_eff)
    denom = float(np.linalg.norm(w_eff))
    trace.final.update({
        "initial_loss": initial,
        "final_loss": trace.rows[-1]["loss"],
        "loss_ratio": trace.rows[-1]["loss"] / initial if initial else 0.0,
        "merged_rel_error": float(np.linalg.norm(merged - w_star)) / denom if denom else 0.0,
        "orth_err": adapter_orthogonality_error(adapter),
        "workspace": adapter.workspace.get_stats(),
    })
    trace.model = adapter
    return trace


def _make_blobs(rng: np.random.Generator, centers: np.ndarray, per_class: int,
                sigma: float) -> Tuple[np.ndarray, np.ndarray]:
    classes = centers.shape[1]
    labels = np.repeat(np.arange(classes), per_class)
    labels = labels[rng.permutation(labels.shape[0])]
    x = centers[:, labels] + sigma * rng.standard_normal((centers.shape[0], labels.shape[0]))
    return x, labels


def _relu_features(w1_eff: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.maximum(w1_eff.T @ x, 0.0)


def _fit_readout(h: np.ndarray, labels: np.ndarray, classes: int) -> np.ndarray:
    """Ridge least-squares readout from features to one-hot targets"""
    y = np.eye(classes)[labels].T
    gram = h @ h.T
    ridge = 1e-3 * max(float(np.trace(gram)) / gram.shape[0], 1e-12)
    return numkit.solve(gram + ridge * np.eye(gram.shape[0]), h @ y.T)


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=0) == labels))


def _softmax_xent(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits"""
    shifted = logits - logits.max(axis=0, keepdims=True)
    expz = np.exp(shifted)
    probs = expz / expz.sum(axis=0, keepdims=True)
    m = logits.shape[1]
    cols = np.arange(m)
    loss = float(-np.mean(np.log(probs[labels, cols] + 1e-300)))
    grad = probs
    grad[labels, cols] -= 1.0
    return loss, grad / m


def task_toy_classify(cfg: TrainConfig) -> TrainTrace:
    """
    Adapter-only training of the first layer of a frozen two-layer network

    The readout was fit to inputs seen through a hidden block rotation R*,
    so the frozen network does poorly on the raw inputs; the rotation is
    redrawn with a growing norm until the control accuracy is at most 0.6.
    cfg.n is the hidden width.
    """
    if cfg.task != "toy-classify":
        raise ConfigError(f"config is for task {cfg.task!r}")

    rng = numkit.make_rng(cfg.seed)
    per_class = max(1, cfg.samples // TOY_CLASSES)
    centers = numkit.gaussian(rng, cfg.d, TOY_CLASSES)
    x_train, y_train = _make_blobs(rng, centers, per_class, cfg.blobs_sigma)
    x_test, y_test = _make_blobs(rng, centers, per_class, cfg.blobs_sigma)

    w1 = numkit.gaussian(rng, cfg.d, cfg.n, scale=1.0 / math.sqrt(cfg.d))
    base, w1_eff = _frozen_base(w1, cfg.base)

    h_raw = _relu_features(w1_eff, x_train)
    for attempt in range(REDRAW_ATTEMPTS):
        rotation_norm = 0.4 + 0.2 * attempt
        r_star = _block_rotation(rng, cfg.d, cfg.b, rotation_norm)
        w2 = _fit_readout(_relu_features(w1_eff, r_star.T @ x_train), y_train, TOY_CLASSES)
        control = _accuracy(w2.T @ h_raw, y_train)
        if control <= CONTROL_CEILING:
            break
    logger.info("toy-classify hidden rotation norm %.2f, frozen control accuracy %.3f", rotation_norm, control)

    if cfg.adapter == "oft":
        adapter = BlockOrthogonalAdapter(cfg.d, cfg.b, NeumannConfig(k=cfg.k))
    else:
        adapter = LowRankAdapter.fresh(cfg.d, cfg.n, cfg.lora_rank, rng, cfg.alpha)
    params = adapter.parameters()
    state = AdamState.for_params(params, cfg.lr)
    energy0 = hyperspherical_energy(w1_eff)

    def hidden(x: np.ndarray) -> np.ndarray:
        if isinstance(adapter, BlockOrthogonalAdapter):
            return qoft_forward(base, adapter, x)
        return lora_forward(base, adapter, x)

    def evaluate(x: np.ndarray, labels: np.ndarray) -> float:
        return _accuracy(w2.T @ np.maximum(hidden(x), 0.0), labels)

    trace = _new_trace(cfg)
    trace.final.update({
        "control_acc": control,
        "oracle_acc": _accuracy(w2.T @ _relu_features(w1_eff, r_star.T @ x_train), y_train),
        "rotation_norm": rotation_norm,
        "max_col_norm": float(np.linalg.norm(w1_eff, axis=0).max()),
    })

    initial = None
    m = min(cfg.m, x_train.shape[1])
    for step in range(cfg.steps + 1):
        idx = rng.choice(x_train.shape[1], size=m, replace=False)
        xb, yb = x_train[:, idx], y_train[idx]
        pre = hidden(xb)
        logits = w2.T @ np.maximum(pre, 0.0)
        loss, g_logits = _softmax_xent(logits, yb)
        initial = loss if initial is None else initial
        diverged = _is_divergent(loss, initial)

        grads = None
        grad_norm = float("nan")
        if step < cfg.steps and not diverged:
            g_pre = (w2 @ g_logits) * (pre > 0.0)
            if isinstance(adapter, BlockOrthogonalAdapter):
                grads, _ = qoft_backward(base, adapter, xb, g_pre)
            else:
                g_a, g_b, _ = lora_backward(base, adapter, xb, g_pre)
                grads = [g_a, g_b]
            grad_norm = _grad_norm(grads)

        if step % cfg.log_every == 0 or step == cfg.steps or diverged:
            trace.log(step=step, loss=loss, acc=evaluate(x_train, y_train), grad_norm=grad_norm,
                      diverged=diverged, **_diagnostics(adapter, w1_eff, energy0))
            logger.info("toy-classify step %d loss %.6g acc %.3f", step, loss, trace.rows[-1]["acc"])
        if diverged:
            logger.warning("loss diverged at step %d (%.6g vs initial %.6g)", step, loss, initial)
            if not math.isfinite(loss):
                break
        if grads is not None:
            adam_step(state, params, grads, lr=lr_at(cfg, step))

    trace.final.update({
        "initial_loss": initial,
        "final_loss": trace.rows[-1]["loss"],
        "final_acc": trace.rows[-1]["acc"],
        "test_acc": evaluate(x_test, y_test),
    })
    trace.model = adapter
    return trace


TASK_RUNNERS: Dict[str, Callable[[TrainConfig], TrainTrace]] = {
    "rotation-recovery": task_rotation_recovery,
    "toy-classify": task_toy_classify,
}


def run_task(cfg: TrainConfig) -> TrainTrace:
    return TASK_RUNNERS[cfg.task](cfg)


GRADCHECK_FLOOR = 1e-8


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - f|| / max(||a||, ||f||, GRADCHECK_FLOOR); the floor only matters for all-zero gradients"""
    if analytic.size == 0:
        return 0.0
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), GRADCHECK_FLOOR)
    return float(np.linalg.norm(analytic - numeric) / denom)


def _central_difference(loss: Callable[[], float], param: np.ndarray, h: float) -> np.ndarray:
    """Perturbs param in place, one coordinate at a time, restoring it afterwards"""
    flat = param.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.shape[0]):
        saved = flat[i]
        flat[i] = saved + h
        plus = loss()
        flat[i] = saved - h
        minus = loss()
        flat[i] = saved
        numeric[i] = (plus - minus) / (2.0 * h)
    return numeric.reshape(param.shape)


OFT_GRADCHECK_SHAPES = [
    # d, b, n, m
    (6, 3, 4, 2),
    (8, 4, 8, 3),
    (8, 2, 5, 1),
]

LORA_GRADCHECK_SHAPES = [
    # d, n, rank, m
    (6, 4, 2, 2),
    (8, 8, 3, 3),
]


def gradcheck(seed: int = 0, ks: Sequence[int] = (1, 3, 5), h: float = 1e-5,
              include_quantized: bool = True) -> GradcheckReport:
    """
    Central finite differences of L = 1/2 ||z||^2 against the analytic backward

    Kinds: "oft" (adapter parameters), "oft_x" (input), "oft_init" (the
    factor-2 identity at Q = 0), "qoft" (NF4 base) and "lora" (A, B, x).
    """
    rng = numkit.make_rng(seed)
    report = GradcheckReport()

    for k in ks:
        for d, b, n, m in OFT_GRADCHECK_SHAPES:
            label = f"d={d} b={b} n={n} m={m} k={k}"
            w0 = numkit.gaussian(rng, d, n, scale=1.0 / math.sqrt(d))
            x = numkit.gaussian(rng, d, m)
            a = BlockOrthogonalAdapter.random(d, b, rng, scale=0.2, neumann=NeumannConfig(k=k))

            def oft_loss() -> float:
                z = forward_input_centric(a, w0, x, use_cache=False)
                return 0.5 * float(np.sum(z * z))

            z = forward_input_centric(a, w0, x)
            grads, g_x = backward(a, w0, x, z)
            worst = max(_relative_error(g, _central_difference(oft_loss, u, h))
                        for g, u in zip(grads, a.parameters()))
            report.add("oft", label, worst)
            report.add("oft_x", label, _relative_error(g_x, _central_difference(oft_loss, x, h)))

    d, b, n, m = OFT_GRADCHECK_SHAPES[0]
    w0 = numkit.gaussian(rng, d, n)
    x = numkit.gaussian(rng, d, m)
    fresh = BlockOrthogonalAdapter(d, b)
    g_z = numkit.gaussian(rng, n, m)
    grads, _ = backward(fresh, w0, x, g_z)
    g_y = w0 @ g_z
    worst = 0.0
    for index, offset in enumerate(fresh.offsets()):
        rows = slice(offset, offset + b)
        g_r = x[rows] @ g_y[rows].T
        expected = np.array([2.0 * (g_r[i, j] - g_r[j, i]) for i, j in zip(*np.triu_indices(b, 1))])
        worst = max(worst, _relative_error(grads[index], expected))
    report.add("oft_init", f"d={d} b={b} n={n} m={m}", worst)

    if include_quantized:
        d, b, n, m = 8, 4, 16, 2
        q = quantize(numkit.gaussian(rng, d, n))
        x = numkit.gaussian(rng, d, m)
        a = BlockOrthogonalAdapter.random(d, b, rng, scale=0.2)

        def qoft_loss() -> float:
            z = qoft_forward(q, a, x, use_cache=False)
            return 0.5 * float(np.sum(z * z))

        z = qoft_forward(q, a, x)
        grads, _ = qoft_backward(q, a, x, z)
        worst = max(_relative_error(g, _central_difference(qoft_loss, u, h))
                    for g, u in zip(grads, a.parameters()))
        report.add("qoft", f"d={d} b={b} n={n} m={m} nf4", worst)

    for d, n, rank, m in LORA_GRADCHECK_SHAPES:
        label = f"d={d} n={n} rank={rank} m={m}"
        w = numkit.gaussian(rng, d, n, scale=1.0 / math.sqrt(d))
        x = numkit.gaussian(rng, d, m)
        lora = LowRankAdapter(numkit.gaussian(rng, d, rank, scale=0.5),
                              numkit.gaussian(rng, rank, n, scale=0.5), scaling=0.5)

        def lora_loss() -> float:
            z = lora_forward(w, lora, x)
            return 0.5 * float(np.sum(z * z))

        z = lora_forward(w, lora, x)
        g_a, g_b, g_x = lora_backward(w, lora, x, z)
        worst = max(
            _relative_error(g_a, _central_difference(lora_loss, lora.a, h)),
            _relative_error(g_b, _central_difference(lora_loss, lora.b, h)),
            _relative_error(g_x, _central_difference(lora_loss, x, h)),
        )
        report.add("lora", label, worst)

    for kind in ("oft", "oft_x", "oft_init", "qoft", "lora"):
        logger.debug("gradcheck %s: max rel err %.3e", kind, report.max_error(kind))
    return report


def stability_probe(trace: TrainTrace) -> pd.DataFrame:
    """
    Per-logged-step stability metrics with the column-drift bound

    drift_bound = orth_err * max column norm of the frozen weight; the
    bound only exists for orthogonal adapters (NaN for LoRA traces).
    """
    frame = trace.to_frame()
    probe = frame[["step", "q_norm", "orth_err", "col_drift", "grad_norm"]].copy()
    max_col_norm = float(trace.final.get("max_col_norm", float("nan")))
    probe["drift_bound"] = probe["orth_err"] * max_col_norm
    probe["within_bound"] = probe["col_drift"] <= probe["drift_bound"] + 1e-12
    return probe


def write_trace(trace: TrainTrace, path: str) -> None:
    """CSV with TRACE_COLUMNS in order"""
    try:
        trace.to_frame().to_csv(path, index=False)
    except OSError as e:
        raise OSError(f"cannot write trace {path}: {e}")


def read_trace(path: str) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path)
    except OSError as e:
        raise OSError(f"cannot read trace {path}: {e}")
    if list(frame.columns) != TRACE_COLUMNS:
        raise DataError(f"{path} does not carry the trace columns")
    return frame


def write_probe(probe: pd.DataFrame, path: str) -> None:
    try:
        probe.to_csv(path, index=False)
    except OSError as e:
        raise OSError(f"cannot write stability probe {path}: {e}")


if __name__ == "__main__":
    print("Testing trainer...")
    print("=" * 50)

    report = gradcheck(ks=(1, 3))
    print(report.to_frame().groupby("kind")["max_rel_err"].max())

    cfg = TrainConfig(task="rotation-recovery", d=16, n=8, b=4, steps=200, lr_schedule="cosine", log_every=50)
    trace = task_rotation_recovery(cfg)
    print(trace.summary())
    print(stability_probe(trace).tail())

    print("=" * 50)
    print("trainer: READY")
