"""Bit-exact model containers.

``MPQ1`` packed format (little-endian):

    header   : magic "MPQ1" | version u16 | kind u8 | tie u8
               | vocab u32 | embed u32 | hidden u32 | layers u32
               | heads u32 | max_context u32 | vocab sha256 (32 bytes)
               | cluster count u32
    clusters : id length u16 | id utf-8 | bits u8 | scale f32
               | code count u64 | packed code bytes
    trailer  : CRC32 u32 over all preceding bytes

Clusters are written in layout order, so save -> load -> save is
byte-identical. Full-precision checkpoints use a separate npz container
with float32 weights plus JSON metadata.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct

import numpy as np

from .corpus import Vocab
from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .models import ModelSpec, cluster_layout
from .params import ParamVector
from .quant import (
    PACK_MAGIC,
    PACK_VERSION,
    QuantizedCluster,
    QuantizedModel,
    pack_codes,
    packed_payload_bytes,
    unpack_codes,
)

import zlib

_KINDS = ("lstm", "transformer")
_TIES = ("layer", "node")


def vocab_sha256(vocab: Vocab) -> bytes:
    return hashlib.sha256("\n".join(vocab.tokens).encode("utf-8")).digest()


def save_packed(qm: QuantizedModel, path, vocab_hash: bytes | None = None):
    spec = qm.spec
    layout = cluster_layout(spec)
    if vocab_hash is None:
        vocab_hash = qm.vocab_hash
    if len(vocab_hash) != 32:
        raise ConfigError("vocab hash must be 32 bytes")
    buf = io.BytesIO()
    buf.write(PACK_MAGIC)
    buf.write(struct.pack("<H", PACK_VERSION))
    buf.write(struct.pack("<BB", _KINDS.index(spec.kind), _TIES.index(spec.tie_granularity)))
    buf.write(
        struct.pack(
            "<6I",
            spec.vocab_size,
            spec.embed_dim,
            spec.hidden_dim,
            spec.num_layers,
            spec.num_heads,
            spec.max_context,
        )
    )
    buf.write(vocab_hash)
    buf.write(struct.pack("<I", len(layout.clusters)))
    for c in layout.clusters:
        qc = qm.clusters.get(c.cluster_id)
        if qc is None:
            raise ConfigError(f"model is not fully quantized: missing {c.cluster_id!r}")
        if qc.codes.size != c.count:
            raise ConfigError(f"cluster {c.cluster_id!r}: wrong code count")
        cid = c.cluster_id.encode("utf-8")
        buf.write(struct.pack("<H", len(cid)))
        buf.write(cid)
        buf.write(struct.pack("<B", qc.bits))
        buf.write(struct.pack("<f", float(qc.scale32)))
        buf.write(struct.pack("<Q", qc.codes.size))
        buf.write(pack_codes(qc.codes, qc.bits))
    body = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError("file ends inside a declared structure")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_packed(path) -> QuantizedModel:
    with open(path, "rb") as fh:
        data = fh.read()
    min_len = 4 + 2 + 4
    if len(data) < min_len:
        raise TruncatedFileError("file shorter than the minimal container")
    if data[:4] != PACK_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    (version,) = struct.unpack("<H", data[4:6])
    if version != PACK_VERSION:
        raise UnsupportedVersionError(f"unsupported container version {version}")

    # Structural walk first (payloads skipped): a file cut short is reported
    # as truncation; any in-place corruption then fails the CRC check below.
    r = _Reader(data[: len(data) - 4])
    r.take(6)  # magic + version
    kind_b, tie_b = r.unpack("<BB")
    vocab, embed, hidden, layers, heads, max_ctx = r.unpack("<6I")
    vocab_hash = r.take(32)
    (n_clusters,) = r.unpack("<I")
    records = []
    for _ in range(n_clusters):
        (id_len,) = r.unpack("<H")
        cid = r.take(id_len).decode("utf-8", errors="replace")
        (bits,) = r.unpack("<B")
        (scale,) = r.unpack("<f")
        (count,) = r.unpack("<Q")
        if bits not in (1, 2, 4, 8):
            raise ChecksumError(f"invalid bit-width byte {bits}")
        payload = r.take(packed_payload_bytes(bits, count))
        records.append((cid, bits, scale, count, payload))
    if r.pos != len(r.data):
        raise TruncatedFileError("trailing bytes after the declared clusters")

    (crc_stored,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc_stored:
        raise ChecksumError("CRC32 mismatch")

    if kind_b >= len(_KINDS) or tie_b >= len(_TIES):
        raise ConfigError("unknown architecture fields in header")
    clusters: dict[str, QuantizedCluster] = {}
    order = []
    for cid, bits, scale, count, payload in records:
        codes = unpack_codes(payload, bits, count)
        clusters[cid] = QuantizedCluster(cid, bits, np.float32(scale), codes)
        order.append(cid)

    spec = ModelSpec(
        kind=_KINDS[kind_b],
        vocab_size=vocab,
        embed_dim=embed,
        hidden_dim=hidden,
        num_layers=layers,
        num_heads=heads,
        max_context=max_ctx,
        tie_granularity=_TIES[tie_b],
    )
    layout = cluster_layout(spec)
    if order != list(layout.ids):
        raise ChecksumError("cluster inventory does not match the architecture")
    for c in layout.clusters:
        if clusters[c.cluster_id].codes.size != c.count:
            raise ChecksumError(f"cluster {c.cluster_id!r}: wrong code count")
    return QuantizedModel(spec=spec, clusters=clusters, vocab_hash=vocab_hash)


# -- full-precision checkpoints ---------------------------------------------------


def save_checkpoint(path, spec: ModelSpec, params: ParamVector, vocab: Vocab):
    """npz with float32 weights plus JSON metadata (spec, vocab)."""
    meta = json.dumps(
        {"spec": spec.to_dict(), "vocab": list(vocab.tokens), "vocab_mode": vocab.mode}
    )
    arrays = {f"w_{name}": arr.astype(np.float32) for name, arr in params.items()}
    np.savez(path, meta=np.frombuffer(meta.encode("utf-8"), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> tuple[ModelSpec, ParamVector, Vocab]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        spec = ModelSpec.from_dict(meta["spec"])
        vocab = Vocab(tuple(meta["vocab"]), meta["vocab_mode"])
        names = [n for n, _ in _ordered_names(spec)]
        tensors = {n: data[f"w_{n}"].astype(np.float64) for n in names}
    return spec, ParamVector(tuple(names), tensors), vocab


def _ordered_names(spec: ModelSpec):
    from .models import param_shapes

    return param_shapes(spec)


def save_admm_sidecar(path, lam: ParamVector, alphas: dict[str, float]):
    """Multipliers and float64 scales from an ADMM run, for later fine-tuning."""
    arrays = {f"lam_{name}": arr for name, arr in lam.items()}
    meta = json.dumps({"names": list(lam.names), "alphas": alphas})
    np.savez(path, meta=np.frombuffer(meta.encode("utf-8"), dtype=np.uint8), **arrays)


def load_admm_sidecar(path) -> tuple[ParamVector, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        names = tuple(meta["names"])
        lam = ParamVector(names, {n: data[f"lam_{n}"].astype(np.float64) for n in names})
    return lam, meta["alphas"]
