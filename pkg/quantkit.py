"""
Blockwise 4-bit NormalFloat quantization with double-quantized scales

Weights are flattened row-major and cut into blocks of `blocksize` values.
Each block is normalized by its absolute maximum and every value is coded as
the index of the nearest of 16 NormalFloat levels. The per-block absmax values
are themselves quantized to 8 bits, affinely, in groups of `group_size`.

The frozen-weight forwards only need .shape and .dequantize_rows(), so any
object with that interface (see FullPrecisionWeight) can stand in for the
codec.
"""

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.stats import norm

import numkit
from errors import ConfigError, ContainerError, DataError, check_shape
from oftlayer import BlockOrthogonalAdapter, rotate_input, rotation_backward

logger = logging.getLogger(__name__)

DEFAULT_BLOCKSIZE = 64
DEFAULT_GROUP_SIZE = 256
NF4_OFFSET = 0.9677083
STAGING_POLICIES = ("full", "streamed")

QUANT_MAGIC = b"QNF4"
QUANT_VERSION = 1


@dataclass(frozen=True, eq=False)
class Nf4Codebook:
    """16 strictly increasing levels in [-1, 1] with an exact zero"""
    levels: np.ndarray

    def __post_init__(self):
        levels = self.levels
        if levels.shape != (16,):
            raise ConfigError(f"codebook needs 16 levels, got {levels.shape}")
        if not np.all(np.diff(levels) > 0):
            raise ConfigError("codebook levels must be strictly increasing")
        if levels[0] != -1.0 or levels[-1] != 1.0:
            raise ConfigError("codebook endpoints must be -1 and +1")
        if np.count_nonzero(levels == 0.0) != 1:
            raise ConfigError("codebook must contain exactly one zero level")
        levels.setflags(write=False)

    @property
    def zero_index(self) -> int:
        return int(np.flatnonzero(self.levels == 0.0)[0])

    @property
    def midpoints(self) -> np.ndarray:
        return (self.levels[:-1] + self.levels[1:]) / 2.0

    def encode(self, normalized: np.ndarray) -> np.ndarray:
        """Nearest level index; a value exactly between two levels takes the lower one"""
        return np.searchsorted(self.midpoints, normalized, side="left").astype(np.uint8)


def build_codebook(offset: float = NF4_OFFSET) -> Nf4Codebook:
    """
    NormalFloat4 levels from evenly spaced standard-normal quantiles

    Eight quantiles on the negative side and seven on the positive side plus
    an exact zero, rescaled so the extremes are exactly -1 and +1.
    """
    scale = norm.ppf(offset)
    negative = -norm.ppf(np.linspace(offset, 0.5, 9)[:-1]) / scale
    positive = norm.ppf(np.linspace(offset, 0.5, 8)[:-1]) / scale
    levels = np.sort(np.concatenate([negative, [0.0], positive]))
    levels[0], levels[-1] = -1.0, 1.0
    return Nf4Codebook(levels)


NF4 = build_codebook()


def pack_nibbles(codes: np.ndarray) -> np.ndarray:
    """Two 4-bit codes per byte, first code in the low nibble"""
    codes = codes.astype(np.uint8)
    if codes.shape[0] % 2:
        codes = np.concatenate([codes, np.zeros(1, dtype=np.uint8)])
    return (codes[0::2] & 0x0F) | (codes[1::2] << 4)


def unpack_nibbles(packed: np.ndarray, count: int) -> np.ndarray:
    out = np.empty(packed.shape[0] * 2, dtype=np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out[:count]


def _double_quantize(absmax: np.ndarray, group_size: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """8-bit affine code per absmax value, with float32 scale/offset per group"""
    starts = np.arange(0, absmax.shape[0], group_size)
    lo = np.minimum.reduceat(absmax, starts).astype(np.float32)
    hi = np.maximum.reduceat(absmax, starts).astype(np.float32)
    scale = ((hi.astype(np.float64) - lo) / 255.0).astype(np.float32)

    group = np.arange(absmax.shape[0]) // group_size
    safe = np.where(scale > 0, scale, 1.0).astype(np.float64)
    q = np.rint((absmax - lo[group].astype(np.float64)) / safe[group])
    q = np.where(scale[group] > 0, q, 0.0)
    return np.clip(q, 0, 255).astype(np.uint8), scale, lo


@dataclass(frozen=True, eq=False)
class QuantizedMatrix:
    """NF4 codes (two per byte) plus double-quantized per-block absmax"""
    rows: int
    cols: int
    blocksize: int
    group_size: int
    codes: np.ndarray
    absmax_q: np.ndarray
    absmax_scale: np.ndarray
    absmax_offset: np.ndarray

    materializes = True

    def __post_init__(self):
        if self.codes.shape[0] != (self.numel + 1) // 2:
            raise DataError(f"expected {(self.numel + 1) // 2} code bytes, got {self.codes.shape[0]}")
        if self.absmax_q.shape[0] != self.n_blocks:
            raise DataError(f"expected {self.n_blocks} absmax codes, got {self.absmax_q.shape[0]}")
        groups = math.ceil(self.n_blocks / self.group_size) if self.n_blocks else 0
        if self.absmax_scale.shape[0] != groups or self.absmax_offset.shape[0] != groups:
            raise DataError(f"expected {groups} scale groups")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def numel(self) -> int:
        return self.rows * self.cols

    @property
    def n_blocks(self) -> int:
        return math.ceil(self.numel / self.blocksize)

    @property
    def nbytes(self) -> int:
        return self.codes.nbytes + self.absmax_q.nbytes + self.absmax_scale.nbytes + self.absmax_offset.nbytes

    def block_absmax(self) -> np.ndarray:
        """Dequantized absmax of every block"""
        return self.block_absmax_range(0, self.n_blocks)

    def block_absmax_range(self, b0: int, b1: int) -> np.ndarray:
        group = np.arange(b0, b1) // self.group_size
        return (self.absmax_offset[group].astype(np.float64)
                + self.absmax_q[b0:b1].astype(np.float64) * self.absmax_scale[group].astype(np.float64))

    def codes_range(self, start: int, end: int) -> np.ndarray:
        """Unpacked codes for flat positions [start, end)"""
        lo_byte = start // 2
        hi_byte = (end + 1) // 2
        nibbles = unpack_nibbles(self.codes[lo_byte:hi_byte], 2 * (hi_byte - lo_byte))
        skip = start - 2 * lo_byte
        return nibbles[skip:skip + (end - start)]

    def dequantize_rows(self, r0: int, r1: int, codebook: Nf4Codebook = NF4) -> np.ndarray:
        """Dequantize rows [r0, r1) into a new (metered) float64 buffer"""
        start, end = r0 * self.cols, r1 * self.cols
        if end <= start:
            return numkit.record_alloc(np.zeros((max(r1 - r0, 0), self.cols)))
        b0 = start // self.blocksize
        absmax = self.block_absmax_range(b0, (end - 1) // self.blocksize + 1)
        block = np.arange(start, end) // self.blocksize - b0
        values = codebook.levels[self.codes_range(start, end)] * absmax[block]
        return numkit.record_alloc(values.reshape(r1 - r0, self.cols))

    def dequantize(self, codebook: Nf4Codebook = NF4) -> np.ndarray:
        return self.dequantize_rows(0, self.rows, codebook)


class FullPrecisionWeight:
    """Pass-through codec: same interface as QuantizedMatrix, no quantization"""

    materializes = False

    def __init__(self, w: np.ndarray):
        self.w = numkit.as_matrix(w)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.w.shape

    def dequantize_rows(self, r0: int, r1: int) -> np.ndarray:
        return self.w[r0:r1]

    def dequantize(self) -> np.ndarray:
        return self.w


FrozenWeight = Union[np.ndarray, QuantizedMatrix, FullPrecisionWeight]


def quantize(w: np.ndarray, blocksize: int = DEFAULT_BLOCKSIZE, group_size: int = DEFAULT_GROUP_SIZE,
             codebook: Nf4Codebook = NF4) -> QuantizedMatrix:
    """
    Blockwise NF4 quantization

    Raises:
        ConfigError: blocksize or group_size < 1
        DataError: w has non-finite entries
    """
    if blocksize < 1 or group_size < 1:
        raise ConfigError(f"blocksize and group_size must be >= 1, got {blocksize}, {group_size}")
    w = np.asarray(w, dtype=np.float64)
    check_shape(w.ndim == 2, f"quantize expects a matrix, got {w.ndim}-D")
    if not np.all(np.isfinite(w)):
        raise DataError("cannot quantize non-finite values")

    rows, cols = w.shape
    flat = w.ravel()
    numel = flat.shape[0]
    n_blocks = math.ceil(numel / blocksize)
    padded = np.zeros(n_blocks * blocksize)
    padded[:numel] = flat
    blocks = padded.reshape(n_blocks, blocksize)

    absmax = np.abs(blocks).max(axis=1) if n_blocks else np.zeros(0)
    safe = np.where(absmax > 0, absmax, 1.0)
    codes = codebook.encode(blocks / safe[:, None]).ravel()[:numel]

    if n_blocks:
        absmax_q, scale, offset = _double_quantize(absmax, group_size)
    else:
        absmax_q = np.zeros(0, dtype=np.uint8)
        scale = offset = np.zeros(0, dtype=np.float32)

    return QuantizedMatrix(rows, cols, blocksize, group_size, pack_nibbles(codes), absmax_q, scale, offset)


def dequantize(q: QuantizedMatrix, codebook: Nf4Codebook = NF4) -> np.ndarray:
    """entry = level[code] * dequantized absmax of its block"""
    return q.dequantize(codebook)


def _default_chunk_rows(weight: FrozenWeight) -> int:
    rows, cols = weight.shape
    blocksize = getattr(weight, "blocksize", DEFAULT_BLOCKSIZE)
    return max(1, min(rows, -(-blocksize // cols)))


def base_product(weight: FrozenWeight, x: np.ndarray, staging: str = "streamed",
                 chunk_rows: Optional[int] = None) -> np.ndarray:
    """
    W^T x for a dense, quantized or pass-through frozen weight

    staging="full" dequantizes the whole weight once; "streamed" dequantizes
    chunk_rows rows at a time and accumulates partial products, so no d x n
    buffer ever exists.
    """
    if staging not in STAGING_POLICIES:
        raise ConfigError(f"unknown staging policy {staging!r}")
    if isinstance(weight, np.ndarray):
        check_shape(weight.shape[0] == x.shape[0], f"weight rows {weight.shape[0]} != x rows {x.shape[0]}")
        return numkit.matmul(weight.T, x)

    rows, cols = weight.shape
    check_shape(rows == x.shape[0], f"weight rows {rows} != x rows {x.shape[0]}")

    # a pass-through weight already is its own staging buffer
    if staging == "full" or (not weight.materializes and chunk_rows is None):
        w = weight.dequantize()
        z = numkit.matmul(w.T, x)
        if weight.materializes:
            numkit.record_free(w)
        return z

    step = chunk_rows or _default_chunk_rows(weight)
    z = numkit.zeros(cols, x.shape[1], dtype=x.dtype)
    for r0 in range(0, rows, step):
        r1 = min(rows, r0 + step)
        chunk = weight.dequantize_rows(r0, r1)
        partial = numkit.matmul(chunk.T, x[r0:r1])
        z += partial
        numkit.record_free(partial)
        if weight.materializes:
            numkit.record_free(chunk)
    return z


def apply_weight(weight: FrozenWeight, g: np.ndarray, staging: str = "streamed",
                 chunk_rows: Optional[int] = None) -> np.ndarray:
    """W g (the input-gradient direction), with the same staging policies as base_product"""
    if staging not in STAGING_POLICIES:
        raise ConfigError(f"unknown staging policy {staging!r}")
    if isinstance(weight, np.ndarray):
        check_shape(weight.shape[1] == g.shape[0], f"weight cols {weight.shape[1]} != g rows {g.shape[0]}")
        return numkit.matmul(weight, g)

    rows, cols = weight.shape
    check_shape(cols == g.shape[0], f"weight cols {cols} != g rows {g.shape[0]}")
    if staging == "full" or (not weight.materializes and chunk_rows is None):
        w = weight.dequantize()
        out = numkit.matmul(w, g)
        if weight.materializes:
            numkit.record_free(w)
        return out

    step = chunk_rows or _default_chunk_rows(weight)
    out = numkit.zeros(rows, g.shape[1], dtype=g.dtype)
    for r0 in range(0, rows, step):
        r1 = min(rows, r0 + step)
        chunk = weight.dequantize_rows(r0, r1)
        numkit.matmul(chunk, g, out=out[r0:r1])
        if weight.materializes:
            numkit.record_free(chunk)
    return out


def qoft_forward(q: FrozenWeight, a: BlockOrthogonalAdapter, x: np.ndarray, staging: str = "streamed",
                 use_cache: bool = True) -> np.ndarray:
    """
    z = Dequant(W)^T R^T x

    R^T x is computed blockwise first; the frozen weight is then applied with
    the chosen staging policy. q is never modified.
    """
    check_shape(q.shape[0] == a.d, f"adapter acts on d={a.d} but weight has {q.shape[0]} rows")
    y = rotate_input(a, x, use_cache=use_cache)
    z = base_product(q, y, staging=staging)
    numkit.record_free(y)
    return z


def qoft_backward(q: FrozenWeight, a: BlockOrthogonalAdapter, x: np.ndarray, g_z: np.ndarray,
                  staging: str = "streamed") -> Tuple[List[np.ndarray], np.ndarray]:
    """
    Gradients through qoft_forward; only the adapter receives updates

    g_y = Dequant(W) g_z is staged exactly like the forward product.
    """
    check_shape(q.shape[0] == a.d, f"adapter acts on d={a.d} but weight has {q.shape[0]} rows")
    check_shape(g_z.shape == (q.shape[1], x.shape[1]), f"g_z must be {(q.shape[1], x.shape[1])}, got {g_z.shape}")
    g_y = apply_weight(q, g_z, staging=staging)
    grads, g_x = rotation_backward(a, x, g_y)
    numkit.record_free(g_y)
    return grads, g_x


def roundtrip_rms(w: np.ndarray, blocksize: int = DEFAULT_BLOCKSIZE) -> float:
    """RMS of dequantize(quantize(w)) - w"""
    if w.size == 0:
        return 0.0
    restored = quantize(w, blocksize).dequantize()
    return float(np.sqrt(np.mean(np.square(restored - w))))


def quantized_to_bytes(q: QuantizedMatrix) -> bytes:
    """
    Layout (little-endian): b"QNF4", version u8, rows u32, cols u32,
    blocksize u32, group_size u32, packed codes, absmax codes (u8 per block),
    group scales (f32), group offsets (f32).
    """
    header = QUANT_MAGIC + struct.pack("<BIIII", QUANT_VERSION, q.rows, q.cols, q.blocksize, q.group_size)
    return b"".join([
        header,
        q.codes.astype(np.uint8).tobytes(),
        q.absmax_q.astype(np.uint8).tobytes(),
        q.absmax_scale.astype("<f4").tobytes(),
        q.absmax_offset.astype("<f4").tobytes(),
    ])


def quantized_from_bytes(data: bytes) -> QuantizedMatrix:
    header_size = 4 + struct.calcsize("<BIIII")
    if len(data) < header_size or data[:4] != QUANT_MAGIC:
        raise ContainerError("not a QNF4 container (bad magic)")
    version, rows, cols, blocksize, group_size = struct.unpack_from("<BIIII", data, 4)
    if version != QUANT_VERSION:
        raise ContainerError(f"unsupported QNF4 version {version}")
    if blocksize < 1 or group_size < 1:
        raise ContainerError("QNF4 header carries a zero blocksize or group size")

    numel = rows * cols
    n_blocks = math.ceil(numel / blocksize)
    n_groups = math.ceil(n_blocks / group_size) if n_blocks else 0
    sizes = [(numel + 1) // 2, n_blocks, 4 * n_groups, 4 * n_groups]
    if len(data) != header_size + sum(sizes):
        raise ContainerError(f"QNF4 payload has {len(data) - header_size} bytes, expected {sum(sizes)}")

    pos = header_size
    fields = []
    for size in sizes:
        fields.append(data[pos:pos + size])
        pos += size
    return QuantizedMatrix(
        rows, cols, blocksize, group_size,
        np.frombuffer(fields[0], dtype=np.uint8).copy(),
        np.frombuffer(fields[1], dtype=np.uint8).copy(),
        np.frombuffer(fields[2], dtype="<f4").astype(np.float32),
        np.frombuffer(fields[3], dtype="<f4").astype(np.float32),
    )


def save_quantized(path: str, q: QuantizedMatrix) -> None:
    try:
        Path(path).write_bytes(quantized_to_bytes(q))
    except OSError as e:
        raise OSError(f"cannot write QNF4 container {path}: {e}")


def load_quantized(path: str) -> QuantizedMatrix:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"cannot read QNF4 container {path}: {e}")
    return quantized_from_bytes(data)


if __name__ == "__main__":
    print("Testing quantkit...")
    print("=" * 50)

    print(f"NF4 levels: {np.array2string(NF4.levels, precision=4)}")
    rng = numkit.make_rng(0)
    w = numkit.gaussian(rng, 256, 128)
    q = quantize(w)
    print(f"{q.numel} values in {q.nbytes} bytes ({8 * q.nbytes / q.numel:.3f} bits/value)")
    print(f"round-trip RMS / sigma: {roundtrip_rms(w):.4f}")

    adapter = BlockOrthogonalAdapter.random(256, 16, rng, scale=0.05)
    x = numkit.gaussian(rng, 256, 8)
    for staging in STAGING_POLICIES:
        with numkit.AllocMeter(staging) as meter:
            qoft_forward(q, adapter, x, staging=staging)
        print(f"qoft {staging}: peak {meter.peak_bytes:,d} bytes")

    print("\n" + "=" * 50)
    print("quantkit: READY")
