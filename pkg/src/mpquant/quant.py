"""Quantization tables, nearest-code mapping, scales, and size accounting.

A cluster of weights shares one table ``{bits n, scale alpha}`` whose
representable values are ``{-a, +a}`` for 1-bit and
``{0, +/-a, ..., +/-a*(2**(n-1)-1)}`` for n >= 2 (symmetric, no zero-point).
Weights are stored as small signed integer codes; the dequantized value is
exactly ``alpha * code``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, DegenerateCodesError, NumericError
from .params import ParamVector

BIT_WIDTHS = (1, 2, 4, 8)

# Byte layout of the MPQ1 container (normative; packio writes/reads it).
PACK_MAGIC = b"MPQ1"
PACK_VERSION = 1
PACK_HEADER_BYTES = 4 + 2 + 1 + 1 + 6 * 4 + 32 + 4
PACK_TRAILER_BYTES = 4
PACK_CLUSTER_FIXED_BYTES = 2 + 1 + 4 + 8  # id length + bits + scale + code count


def code_limit(bits: int) -> int:
    """Largest code magnitude representable at this bit-width."""
    if bits == 1:
        return 1
    return (1 << (bits - 1)) - 1


@dataclass(frozen=True)
class QuantTable:
    bits: int
    scale: float

    def __post_init__(self):
        if self.bits not in BIT_WIDTHS:
            raise ConfigError(f"unsupported bit-width {self.bits}")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ConfigError("quantization scale must be a positive finite float")

    def codebook(self) -> np.ndarray:
        """All representable values, ascending."""
        if self.bits == 1:
            codes = np.array([-1, 1])
        else:
            m = code_limit(self.bits)
            codes = np.arange(-m, m + 1)
        return self.scale * codes

    @property
    def vmax(self) -> int:
        return code_limit(self.bits)


def quantize_nearest(values: np.ndarray, table: QuantTable) -> np.ndarray:
    """Nearest-value codes for ``values``; ties break toward the smaller
    absolute value, then toward the negative code."""
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NumericError("quantize_nearest: non-finite input values")
    return kernels.quantize_codes(values.ravel(), table.scale, table.bits)


def dequantize(codes: np.ndarray, table: QuantTable) -> np.ndarray:
    return table.scale * codes.astype(np.float64)


def dequantize_stored(codes: np.ndarray, scale32: np.float32) -> np.ndarray:
    """Canonical inference-side dequantization path.

    Scales live as float32 in the container; evaluation always widens that
    exact float32 so packed and in-memory models agree bit-for-bit.
    """
    return np.float64(np.float32(scale32)) * codes.astype(np.float64)


def fit_scale(values: np.ndarray, codes: np.ndarray) -> float:
    """Least-squares-optimal scale for fixed codes: (values . codes)/(codes . codes)."""
    values = np.asarray(values, dtype=np.float64).ravel()
    codes = np.asarray(codes, dtype=np.float64).ravel()
    if values.shape != codes.shape:
        raise ConfigError("fit_scale: values and codes length mismatch")
    denom = float(np.dot(codes, codes))
    if denom == 0.0:
        raise DegenerateCodesError("all codes are zero; widen the table or keep the previous scale")
    return float(np.dot(values, codes)) / denom


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Bit-pack codes.

    1-bit: eight codes per byte, bit set => +1, LSB is the first code.
    2/4-bit: offset-binary fields (code + (2**(bits-1)-1)) packed little-endian
    within each byte. 8-bit: one signed byte per code. Round-trips exactly.
    """
    if bits not in BIT_WIDTHS:
        raise ConfigError(f"unsupported bit-width {bits}")
    codes = np.asarray(codes)
    limit = code_limit(bits)
    if codes.size and int(np.abs(codes).max()) > limit:
        raise ConfigError(f"code out of range for {bits}-bit table")
    if bits == 1 and codes.size and np.any(codes == 0):
        raise ConfigError("1-bit codes must be -1 or +1")
    return kernels.pack_codes(codes.astype(np.int8).ravel(), bits)


def unpack_codes(buf: bytes, bits: int, count: int) -> np.ndarray:
    if bits not in BIT_WIDTHS:
        raise ConfigError(f"unsupported bit-width {bits}")
    need = packed_payload_bytes(bits, count)
    if len(buf) < need:
        raise ConfigError(f"buffer too short: {len(buf)} bytes for {count} {bits}-bit codes")
    codes = kernels.unpack_codes(buf, bits, count)
    if bits == 8 and codes.size and int(codes.min()) == -128:
        raise ConfigError("invalid 8-bit code -128")
    return codes


def packed_payload_bytes(bits: int, count: int) -> int:
    return (bits * count + 7) // 8


@dataclass
class PrecisionAssignment:
    """Per-cluster bit-width choices."""

    bits: dict[str, int]

    def __post_init__(self):
        for cid, n in self.bits.items():
            if n not in BIT_WIDTHS:
                raise ConfigError(f"cluster {cid!r}: unsupported bit-width {n}")

    @classmethod
    def uniform(cls, layout, n: int) -> "PrecisionAssignment":
        return cls({c.cluster_id: n for c in layout.clusters})

    def require_covers(self, layout):
        ids = {c.cluster_id for c in layout.clusters}
        if set(self.bits) != ids:
            missing = ids - set(self.bits)
            extra = set(self.bits) - ids
            raise ConfigError(
                f"assignment does not match layout (missing={sorted(missing)}, extra={sorted(extra)})"
            )

    def avg_bits(self, layout) -> float:
        self.require_covers(layout)
        total = sum(c.count for c in layout.clusters)
        return sum(self.bits[c.cluster_id] * c.count for c in layout.clusters) / total

    def save(self, path, layout=None, note: str = ""):
        lines = []
        if note:
            lines.append(f"# {note}")
        if layout is not None:
            ratio = model_size_bytes(self, layout)[1]
            lines.append(f"# avg_bits={self.avg_bits(layout):.6f} predicted_compression={ratio:.3f}")
            order = [c.cluster_id for c in layout.clusters]
        else:
            order = sorted(self.bits)
        for cid in order:
            lines.append(f"{cid}\t{self.bits[cid]}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "PrecisionAssignment":
        bits = {}
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                cid, _, n = line.partition("\t")
                if not n:
                    raise ConfigError(f"malformed assignment line: {line!r}")
                bits[cid] = int(n)
        return cls(bits)


def model_size_bytes(assignment: PrecisionAssignment, layout) -> tuple[int, float]:
    """Exact packed-container size and compression ratio vs 32-bit floats."""
    assignment.require_covers(layout)
    total = PACK_HEADER_BYTES + PACK_TRAILER_BYTES
    param_count = 0
    for c in layout.clusters:
        n = assignment.bits[c.cluster_id]
        total += PACK_CLUSTER_FIXED_BYTES + len(c.cluster_id.encode("utf-8"))
        total += packed_payload_bytes(n, c.count)
        param_count += c.count
    baseline = 4 * param_count  # 32-bit float reference
    return total, baseline / total


@dataclass
class QuantizedCluster:
    cluster_id: str
    bits: int
    scale32: np.float32
    codes: np.ndarray  # int8, length == cluster parameter count

    def __post_init__(self):
        self.scale32 = np.float32(self.scale32)
        if not (np.isfinite(self.scale32) and self.scale32 > 0):
            raise ConfigError(f"cluster {self.cluster_id!r}: bad scale")
        self.codes = np.asarray(self.codes, dtype=np.int8)
        if self.codes.size and int(np.abs(self.codes).max()) > code_limit(self.bits):
            raise ConfigError(f"cluster {self.cluster_id!r}: code out of range")

    def dequantize(self) -> np.ndarray:
        return dequantize_stored(self.codes, self.scale32)


@dataclass
class QuantizedModel:
    """Bit-exact quantized model: spec + per-cluster codes and scales."""

    spec: "object"  # models.ModelSpec; kept loose to avoid an import cycle
    clusters: dict[str, QuantizedCluster]
    method: str = "admm"
    vocab_hash: bytes = b"\x00" * 32
    extra: dict = field(default_factory=dict)

    def assignment(self) -> PrecisionAssignment:
        return PrecisionAssignment({cid: c.bits for cid, c in self.clusters.items()})

    def param_vector(self) -> ParamVector:
        """Dequantized weights via the canonical float32-scale path."""
        from .models import cluster_layout, zero_params

        layout = cluster_layout(self.spec)
        pv = zero_params(self.spec)
        for c in layout.clusters:
            qc = self.clusters.get(c.cluster_id)
            if qc is None:
                raise ConfigError(f"quantized model missing cluster {c.cluster_id!r}")
            if qc.codes.size != c.count:
                raise ConfigError(f"cluster {c.cluster_id!r}: code count mismatch")
            layout.scatter(pv, c.cluster_id, qc.dequantize())
        return pv

    def size_bytes(self) -> tuple[int, float]:
        from .models import cluster_layout

        return model_size_bytes(self.assignment(), cluster_layout(self.spec))
