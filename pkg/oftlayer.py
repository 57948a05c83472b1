"""
Block-diagonal orthogonal adapter over a frozen weight

The adapter holds one compact skew generator per b x b block and realizes
R = Diag(R_1, ..., R_r), each R_i the Cayley-Neumann image of its generator.
R acts on the input dimension of the frozen weight W0 (d x n):

    weight-centric:  z = (R W0)^T x          -- forms a d x d and a d x n matrix
    input-centric:   z = W0^T (R^T x)        -- two matrix-vector style maps

Gradients are derived by hand (no autodiff) and summed over the batch.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import pdist

import numkit
from cache_manager import WorkspaceCache, cache_construction
from cayley import matrix_powers, neumann_factors, neumann_power_factors, orthogonality_error
from data_models import LayerSpec, NeumannConfig
from errors import ConfigError, ContainerError, SingularEnergyError, check_shape
from skewcore import CompactSkew, blockwise_apply, compact_length, project_to_compact, random_skew, unpack

logger = logging.getLogger(__name__)

ARCH_DIR = Path(__file__).resolve().parent / "archs"

ADAPTER_MAGIC = b"OFT2"
ADAPTER_VERSION = 1


class BlockOrthogonalAdapter:
    """
    Trainable block-diagonal rotation for one layer

    A fresh adapter has all-zero generators, so R = I and every forward
    equals the frozen layer. The workspace caches per-block constructions
    between a forward and its backward.
    """

    def __init__(self, d: int, b: int, neumann: Optional[NeumannConfig] = None,
                 blocks: Optional[List[CompactSkew]] = None, dtype: Any = np.float64):
        if b < 1 or d < 1 or d % b != 0:
            raise ConfigError(f"block size b={b} must divide d={d}")
        self.d = d
        self.b = b
        self.block_count = d // b
        self.neumann = neumann or NeumannConfig()
        self.dtype = np.dtype(dtype)
        if blocks is None:
            blocks = [CompactSkew.zeros(b) for _ in range(self.block_count)]
        if len(blocks) != self.block_count or any(s.n != b for s in blocks):
            raise ConfigError(f"expected {self.block_count} blocks of side {b}")
        self.blocks = blocks
        self.workspace = WorkspaceCache()

    @classmethod
    def random(cls, d: int, b: int, rng: np.random.Generator, scale: float = 0.1,
               neumann: Optional[NeumannConfig] = None, dtype: Any = np.float64) -> "BlockOrthogonalAdapter":
        if b < 1 or d % b != 0:
            raise ConfigError(f"block size b={b} must divide d={d}")
        blocks = [random_skew(rng, b, scale) for _ in range(d // b)]
        return cls(d, b, neumann, blocks, dtype=dtype)

    @property
    def num_params(self) -> int:
        return self.block_count * compact_length(self.b)

    def parameters(self) -> List[np.ndarray]:
        """Compact vectors, in block order; updating them in place is allowed"""
        return [s.u for s in self.blocks]

    def offsets(self) -> range:
        return range(0, self.d, self.b)

    @cache_construction()
    def block_factors(self, index: int, cached: bool = False) -> Dict[str, Any]:
        """Q, P = I + Q + ... + Q^k and R = (I + Q) P for one block, plus Q^0..Q^{k-1} when cached"""
        q = unpack(self.blocks[index]).astype(self.dtype, copy=False)
        if cached:
            p, r, powers = neumann_power_factors(q, self.neumann.k)
            return {"q": q, "p": p, "r": r, "powers": powers}
        p, r = neumann_factors(q, self.neumann.k)
        return {"q": q, "p": p, "r": r, "powers": None}

    def rotations(self, use_cache: bool = True) -> List[np.ndarray]:
        rots = []
        for i in range(self.block_count):
            entry = self.block_factors(i, use_cache=use_cache)
            rots.append(entry["r"])
            if not entry["cached"]:
                numkit.record_free(entry["p"])
        return rots

    def summary(self) -> str:
        """Get human-readable summary"""
        return (
            f"BlockOrthogonalAdapter d={self.d} b={self.b} blocks={self.block_count} "
            f"k={self.neumann.k} params={self.num_params}"
        )


def _release(entries: Sequence[Dict[str, Any]]) -> None:
    for entry in entries:
        if not entry["cached"]:
            numkit.record_free(entry["p"], entry["r"])


def _check_forward(a: BlockOrthogonalAdapter, w0: np.ndarray, x: np.ndarray) -> None:
    check_shape(w0.ndim == 2 and w0.shape[0] == a.d, f"w0 must be {a.d} x n, got {w0.shape}")
    check_shape(x.ndim == 2 and x.shape[0] == a.d, f"x must be {a.d} x m, got {x.shape}")


def materialize_r(a: BlockOrthogonalAdapter, use_cache: bool = True) -> np.ndarray:
    """Dense d x d block-diagonal R (tests, merging and the weight-centric path only)"""
    entries = [a.block_factors(i, use_cache=use_cache) for i in range(a.block_count)]
    r = numkit.zeros(a.d, a.d, dtype=a.dtype)
    for offset, entry in zip(a.offsets(), entries):
        r[offset:offset + a.b, offset:offset + a.b] = entry["r"]
    _release(entries)
    return r


def rotate_input(a: BlockOrthogonalAdapter, x: np.ndarray, use_cache: bool = True) -> np.ndarray:
    """y = R^T x, one b-slice of x at a time"""
    check_shape(x.ndim == 2 and x.shape[0] == a.d, f"x must be {a.d} x m, got {x.shape}")
    entries = [a.block_factors(i, use_cache=use_cache) for i in range(a.block_count)]
    y = blockwise_apply([entry["r"] for entry in entries], x, transpose=True)
    _release(entries)
    return y


def forward_input_centric(a: BlockOrthogonalAdapter, w0: np.ndarray, x: np.ndarray,
                          use_cache: bool = True) -> np.ndarray:
    """
    z = W0^T (R^T x)

    Flops: CNP construction + 2*d*b*m + 2*d*n*m. The only temporary beyond
    the per-block rotations is y (d x m).
    """
    _check_forward(a, w0, x)
    y = rotate_input(a, x, use_cache=use_cache)
    z = numkit.matmul(w0.T, y)
    numkit.record_free(y)
    return z


def forward_weight_centric(a: BlockOrthogonalAdapter, w0: np.ndarray, x: np.ndarray,
                           use_cache: bool = True) -> np.ndarray:
    """
    z = (W0^T R^T) x with W_OFT^T formed explicitly

    Reference path: 2*n*d*d flops for the weight transform, then 2*n*d*m.
    """
    _check_forward(a, w0, x)
    r = materialize_r(a, use_cache=use_cache)
    w_oft_t = numkit.matmul(w0.T, r.T)
    numkit.record_free(r)
    z = numkit.matmul(w_oft_t, x)
    numkit.record_free(w_oft_t)
    return z


def _neumann_backward(entry: Dict[str, Any], g_r: np.ndarray, k: int) -> np.ndarray:
    """
    dL/dQ for R = (I + Q) P(Q), P(Q) = I + Q + ... + Q^k, given G = dL/dR

        dR = dQ P + (I + Q) dP,   dP = sum_i sum_{j<i} Q^j dQ Q^{i-1-j}

    so with H = (I + Q)^T G and A = Q^T:
        dL/dQ = G P^T + sum_{j=0}^{k-1} A^j H (A^0 + ... + A^{k-1-j})
    """
    q, p = entry["q"], entry["p"]
    powers = entry["powers"]
    if powers is None:
        powers = matrix_powers(q, k - 1)

    eye = np.eye(q.shape[0], dtype=q.dtype)
    m = g_r @ p.T
    h = (eye + q).T @ g_r

    a_pow = [pw.T for pw in powers]
    partial = [eye]
    for j in range(1, k):
        partial.append(partial[-1] + a_pow[j])
    for j in range(k):
        m += a_pow[j] @ h @ partial[k - 1 - j]
    return m


def backward(a: BlockOrthogonalAdapter, w0: np.ndarray, x: np.ndarray,
             g_z: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
    """
    Gradients of a scalar loss through forward_input_centric

    Args:
        g_z: dL/dz, n x m

    Returns:
        (per-block dL/du in compact order, dL/dx)
    """
    _check_forward(a, w0, x)
    check_shape(g_z.shape == (w0.shape[1], x.shape[1]), f"g_z must be {(w0.shape[1], x.shape[1])}, got {g_z.shape}")

    g_y = numkit.matmul(w0, g_z)
    grads, g_x = rotation_backward(a, x, g_y)
    numkit.record_free(g_y)
    return grads, g_x


def rotation_backward(a: BlockOrthogonalAdapter, x: np.ndarray,
                      g_y: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
    """
    Backward through y = R^T x alone, given g_y = dL/dy

    Per block G_R = x_i g_y,i^T; g_x = R g_y.
    """
    check_shape(g_y.shape == x.shape, f"g_y must match x {x.shape}, got {g_y.shape}")
    g_x = numkit.zeros(a.d, x.shape[1], dtype=g_y.dtype)
    grads: List[np.ndarray] = []
    for index, offset in enumerate(a.offsets()):
        entry = a.block_factors(index)
        rows = slice(offset, offset + a.b)
        g_r = x[rows] @ g_y[rows].T
        m_full = _neumann_backward(entry, g_r, a.neumann.k)
        grads.append(project_to_compact(m_full))
        numkit.matmul(entry["r"], g_y[rows], out=g_x[rows])
    return grads, g_x


def merge(a: BlockOrthogonalAdapter, w0: np.ndarray) -> np.ndarray:
    """R W0, so that merge(a, w0)^T x equals the adapter forward"""
    check_shape(w0.ndim == 2 and w0.shape[0] == a.d, f"w0 must be {a.d} x n, got {w0.shape}")
    entries = [a.block_factors(i) for i in range(a.block_count)]
    merged = blockwise_apply([entry["r"] for entry in entries], w0)
    _release(entries)
    return merged


def adapter_orthogonality_error(a: BlockOrthogonalAdapter) -> float:
    """||R^T R - I||_F of the whole block-diagonal R, block by block"""
    errs = [orthogonality_error(r) for r in a.rotations()]
    return float(np.sqrt(np.sum(np.square(errs))))


def column_norm_drift(merged: np.ndarray, w0: np.ndarray) -> np.ndarray:
    """Per-column | ||merged_:,i|| - ||w0_:,i|| |"""
    return np.abs(np.linalg.norm(merged, axis=0) - np.linalg.norm(w0, axis=0))


def count_params(layers: Sequence[LayerSpec], b: int) -> int:
    """Trainable OFT parameters: sum of d_in (b - 1) / 2 over layers"""
    total = 0
    for layer in layers:
        if b < 1 or layer.d_in % b != 0:
            raise ConfigError(f"block size {b} does not divide d_in={layer.d_in} of layer {layer.name!r}")
        total += (layer.d_in // b) * compact_length(b)
    return total


def count_params_lora(layers: Sequence[LayerSpec], rank: int) -> int:
    """Trainable LoRA parameters: sum of rank (d_in + d_out) over layers"""
    if rank < 1:
        raise ConfigError(f"LoRA rank must be >= 1, got {rank}")
    return sum(rank * (layer.d_in + layer.d_out) for layer in layers)


def available_architectures(arch_dir: Path = ARCH_DIR) -> List[str]:
    return sorted(p.stem for p in Path(arch_dir).glob("*.json"))


def load_architecture(name: str, arch_dir: Path = ARCH_DIR) -> Dict[str, Any]:
    """Read a bundled shape table"""
    path = Path(arch_dir) / f"{name}.json"
    if not path.exists():
        raise ConfigError(f"unknown architecture {name!r}; available: {', '.join(available_architectures(arch_dir))}")
    with open(path, "r") as f:
        return json.load(f)


def architecture_layers(arch: Dict[str, Any]) -> List[LayerSpec]:
    """Expand repeated groups into one LayerSpec per adapted linear layer"""
    layers = []
    for group in arch["groups"]:
        for index in range(group["repeat"]):
            for layer in group["layers"]:
                layers.append(LayerSpec(
                    name=f"{group['prefix']}.{index}.{layer['name']}",
                    d_in=int(layer["d_in"]),
                    d_out=int(layer["d_out"]),
                ))
    return layers


def hyperspherical_energy(w: np.ndarray) -> float:
    """
    Sum over ordered pairs i != j of 1 / ||w_i - w_j|| for unit-normalized columns

    Raises:
        SingularEnergyError: a column is zero or two normalized columns coincide
    """
    check_shape(w.ndim == 2, "hyperspherical_energy expects a matrix")
    norms = np.linalg.norm(w, axis=0)
    if np.any(norms == 0.0):
        raise SingularEnergyError(f"column {int(np.argmin(norms))} is zero")
    if w.shape[1] < 2:
        return 0.0
    unit = (w / norms).T
    dist = pdist(unit)
    if dist.min() <= 1e-9:
        raise SingularEnergyError(f"normalized columns coincide (min distance {dist.min():.3e})")
    return float(2.0 * np.sum(1.0 / dist))


def adapter_to_bytes(adapters: Dict[str, BlockOrthogonalAdapter]) -> bytes:
    """
    Serialize named adapters

    Layout (little-endian): b"OFT2", version u8, then per layer:
    name length u16, utf-8 name, d u32, b u32, k u32, block_count u32, and
    block_count * b(b-1)/2 float32 values.
    """
    parts = [ADAPTER_MAGIC, struct.pack("<B", ADAPTER_VERSION)]
    for name, a in adapters.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<IIII", a.d, a.b, a.neumann.k, a.block_count))
        for s in a.blocks:
            parts.append(s.u.astype("<f4").tobytes())
    return b"".join(parts)


def adapter_from_bytes(data: bytes) -> Dict[str, BlockOrthogonalAdapter]:
    if len(data) < 5 or data[:4] != ADAPTER_MAGIC:
        raise ContainerError("not an OFT2 container (bad magic)")
    version = data[4]
    if version != ADAPTER_VERSION:
        raise ContainerError(f"unsupported OFT2 version {version}")

    adapters: Dict[str, BlockOrthogonalAdapter] = {}
    pos = 5
    try:
        while pos < len(data):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            if len(name.encode("utf-8")) != name_len:
                raise ContainerError("truncated layer name")
            pos += name_len
            d, b, k, block_count = struct.unpack_from("<IIII", data, pos)
            pos += 16
            size = compact_length(b)
            blocks = []
            for _ in range(block_count):
                end = pos + 4 * size
                if end > len(data):
                    raise ContainerError(f"truncated block data in layer {name!r}")
                u = np.frombuffer(data, dtype="<f4", count=size, offset=pos).astype(np.float64)
                blocks.append(CompactSkew(b, u))
                pos = end
            adapters[name] = BlockOrthogonalAdapter(d, b, NeumannConfig(k=k), blocks)
    except struct.error as e:
        raise ContainerError(f"truncated OFT2 container: {e}")
    return adapters


def save_adapters(path: str, adapters: Dict[str, BlockOrthogonalAdapter]) -> None:
    try:
        Path(path).write_bytes(adapter_to_bytes(adapters))
    except OSError as e:
        raise OSError(f"cannot write adapter container {path}: {e}")


def load_adapters(path: str) -> Dict[str, BlockOrthogonalAdapter]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"cannot read adapter container {path}: {e}")
    return adapter_from_bytes(data)


if __name__ == "__main__":
    print("Testing oftlayer...")
    print("=" * 50)

    rng = numkit.make_rng(0)
    adapter = BlockOrthogonalAdapter.random(64, 8, rng, scale=0.05)
    w0 = numkit.gaussian(rng, 64, 32)
    x = numkit.gaussian(rng, 64, 16)
    print(adapter.summary())

    with numkit.AllocMeter("input") as m_in:
        z_in = forward_input_centric(adapter, w0, x)
    with numkit.AllocMeter("weight") as m_w:
        z_w = forward_weight_centric(adapter, w0, x)
    print(f"forward gap: {np.linalg.norm(z_in - z_w) / np.linalg.norm(z_w):.2e}")
    print(f"input-centric: {m_in.to_dict()}")
    print(f"weight-centric: {m_w.to_dict()}")
    print(f"merge col-norm drift: {column_norm_drift(merge(adapter, w0), w0).max():.2e}")
    print(f"workspace: {adapter.workspace.get_stats()}")

    for name in available_architectures():
        layers = architecture_layers(load_architecture(name))
        print(f"{name}: oft(b=32) {count_params(layers, 32):,d}  lora(r=16) {count_params_lora(layers, 16):,d}")

    print("\n" + "=" * 50)
    print("oftlayer: READY")
