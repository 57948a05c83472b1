from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd
from dotenv import dotenv_values

from errors import ConfigError

TASKS = ("rotation-recovery", "toy-classify")
ADAPTER_KINDS = ("oft", "lora")
BASE_KINDS = ("full", "nf4")
LR_SCHEDULES = ("constant", "cosine")
BENCH_MODES = ("weight_centric", "input_centric", "qoft", "lora", "qlora")

TRACE_COLUMNS = [
    "step", "loss", "acc", "q_norm", "orth_err", "col_drift", "grad_norm", "energy_gap", "diverged",
]


@dataclass(frozen=True)
class NeumannConfig:
    """
    Truncation settings for the Cayley-Neumann parameterization

    k counts the Neumann terms beyond the identity; norm_guard, when set,
    makes cayley_neumann refuse any Q whose spectral norm estimate exceeds it.
    """
    k: int = 5
    norm_guard: Optional[float] = None

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ConfigError(f"Neumann order k must be an integer >= 1, got {self.k}")
        if self.norm_guard is not None and not 0.0 < self.norm_guard <= 1.0:
            raise ConfigError(f"norm_guard must lie in (0, 1], got {self.norm_guard}")


@dataclass(frozen=True)
class LayerSpec:
    """One adapted linear layer: z = W^T x with W of shape d_in x d_out"""
    name: str
    d_in: int
    d_out: int

    def __post_init__(self):
        if self.d_in < 1 or self.d_out < 1:
            raise ConfigError(f"layer {self.name!r} needs positive dims, got {self.d_in}x{self.d_out}")


@dataclass
class TrainConfig:
    """
    Everything a training run depends on

    For toy-classify, n is the hidden width of the frozen first layer.
    Loaded from flat key=value files with from_file(); every key must be a
    field name.
    """
    task: str = "rotation-recovery"
    d: int = 64
    n: int = 32
    b: int = 8
    k: int = 5
    lora_rank: int = 4
    alpha: Optional[float] = None
    steps: int = 2000
    lr: float = 1e-2
    m: int = 32
    seed: int = 0
    adapter: str = "oft"
    base: str = "full"
    lr_schedule: str = "constant"
    log_every: int = 10
    target_norm: float = 0.3
    blobs_sigma: float = 0.3
    samples: int = 400

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.adapter not in ADAPTER_KINDS:
            raise ConfigError(f"unknown adapter {self.adapter!r}; expected one of {ADAPTER_KINDS}")
        if self.base not in BASE_KINDS:
            raise ConfigError(f"unknown base {self.base!r}; expected one of {BASE_KINDS}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        for name in ("d", "n", "b", "k", "lora_rank", "m", "log_every", "samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.d % self.b != 0:
            raise ConfigError(f"block size b={self.b} does not divide d={self.d}")
        if self.target_norm < 0:
            raise ConfigError("target_norm must be non-negative")

    @property
    def scaling(self) -> float:
        alpha = self.lora_rank if self.alpha is None else self.alpha
        return alpha / self.lora_rank

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary"""
        return asdict(self)

    def summary(self) -> str:
        """Get human-readable summary"""
        return "\n".join(f"{key} = {value}" for key, value in self.to_dict().items())

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "TrainConfig":
        """Build a config from string or typed values, rejecting unknown keys"""
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

        defaults = cls()
        typed: Dict[str, Any] = {}
        for key, raw in values.items():
            if raw is None:
                continue
            current = getattr(defaults, key)
            if isinstance(raw, str):
                raw = raw.strip()
                if key == "alpha":
                    typed[key] = None if raw.lower() in ("", "none") else float(raw)
                    continue
            try:
                if isinstance(current, bool):
                    typed[key] = str(raw).lower() in ("1", "true", "yes")
                elif isinstance(current, int):
                    typed[key] = int(raw)
                elif isinstance(current, float) or key == "alpha":
                    typed[key] = float(raw)
                else:
                    typed[key] = str(raw)
            except ValueError as e:
                raise ConfigError(f"bad value for {key}: {raw!r} ({e})")
        return cls(**typed)

    @classmethod
    def from_file(cls, path: str) -> "TrainConfig":
        """Parse a flat key=value config file"""
        config_path = Path(path)
        if not config_path.exists():
            raise OSError(f"config file not found: {config_path}")
        return cls.from_dict(dict(dotenv_values(config_path)))


@dataclass
class BenchRecord:
    """
    One benchmark measurement row; column order is the CSV schema

    For lora/qlora rows b is the OFT block size whose parameter budget the
    LoRA rank was matched to, and k is 0. codec is dense, nf4 or passthrough;
    staging is full or streamed for quantized-path rows, "-" otherwise.
    """
    mode: str
    d: int
    n: int
    b: int
    k: int
    m: int
    wall_ns: int
    flops_est: int
    cnp_flops: int
    peak_bytes: int
    repeats: int
    codec: str = "dense"
    staging: str = "-"

    def __post_init__(self):
        if self.mode not in BENCH_MODES:
            raise ConfigError(f"unknown bench mode {self.mode!r}")
        if self.wall_ns <= 0:
            raise ConfigError(f"wall_ns must be positive, got {self.wall_ns}")

    @property
    def map_flops(self) -> int:
        """Flops of the linear maps alone, without the shared CNP construction"""
        return self.flops_est - self.cnp_flops

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary"""
        return asdict(self)


BENCH_COLUMNS = [f.name for f in fields(BenchRecord)]


@dataclass
class MergeGapReport:
    """
    Merge and requantization measurements for one weight

    lora_max_dev: max |scaling * (AB)_ij|
    oft_col_norm_drift: max_i | ||(RW)_:,i|| - ||W_:,i|| |
    oft_max_dev: max |(RW - W)_ij| (reported, not claimed small)
    *_requant_rms: RMS of dequantize(quantize(merged)) - merged
    """
    lora_max_dev: float
    oft_col_norm_drift: float
    oft_max_dev: float
    oft_orth_error: float
    base_requant_rms: float
    lora_requant_rms: float
    oft_requant_rms: float
    max_col_norm: float

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary"""
        return asdict(self)

    def to_text(self) -> str:
        """Flat key=value lines, field order fixed"""
        return "\n".join(f"{key}={value:.12g}" for key, value in self.to_dict().items()) + "\n"

    def drift_bound(self) -> float:
        """Column-norm drift allowed by the measured orthogonality error"""
        return self.oft_orth_error * self.max_col_norm


@dataclass
class TrainTrace:
    """
    Per-step log of a training run

    rows holds one dict per logged step keyed by TRACE_COLUMNS; final keeps
    end-of-run diagnostics (accuracies, merged-weight error, ...); model is
    the trained adapter, kept in memory only.
    """
    task: str
    adapter: str
    base: str
    seed: int
    rows: List[Dict[str, Any]] = field(default_factory=list)
    final: Dict[str, Any] = field(default_factory=dict)
    model: Any = field(default=None, repr=False, compare=False)

    def log(self, **values: Any) -> None:
        row = {column: values.get(column, float("nan")) for column in TRACE_COLUMNS}
        row["diverged"] = bool(values.get("diverged", False))
        self.rows.append(row)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=TRACE_COLUMNS)

    def losses(self) -> List[float]:
        return [row["loss"] for row in self.rows]

    def summary(self) -> str:
        """Get human-readable summary"""
        first = self.rows[0]["loss"] if self.rows else float("nan")
        last = self.rows[-1]["loss"] if self.rows else float("nan")
        return f"""
{self.task} ({self.adapter} on {self.base} base, seed {self.seed})
Logged steps: {len(self.rows)}
Loss: {first:.6g} -> {last:.6g}
Final: {self.final}
"""


@dataclass
class GradcheckReport:
    """Finite-difference comparison results, one entry per checked case"""
    entries: List[Dict[str, Any]] = field(default_factory=list)

    def add(self, kind: str, label: str, max_rel_err: float) -> None:
        self.entries.append({"kind": kind, "case": label, "max_rel_err": float(max_rel_err)})

    def max_error(self, kind: str) -> float:
        errors = [e["max_rel_err"] for e in self.entries if e["kind"] == kind]
        return max(errors) if errors else 0.0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.entries, columns=["kind", "case", "max_rel_err"])
