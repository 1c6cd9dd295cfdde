"""LSTM and Transformer language models and their weight-cluster layout.

Conventions:
  * Activations are row vectors; weights multiply on the right (``x @ W``).
  * LSTM gate matrices are augmented: the gate input is ``[x_t, h_{t-1}, 1]``
    so the bias is the last row of the gate matrix and quantizes with it.
  * Transformer blocks follow q/k/v projection -> causal scaled dot-product
    attention over the cached history -> output projection + residual ->
    layer norm -> GELU feed-forward + residual -> layer norm. Attention is
    evaluated strictly per position against cached keys/values, so outputs
    at position t never depend on later tokens. Layer norm carries no
    learned affine, and the learned positional table belongs to the
    embedding cluster; every trainable parameter therefore lands in exactly
    one quantization cluster.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .params import ParamVector

FF_MULT = 4  # feed-forward width multiplier

LSTM_GATES = ("forget_gate", "input_gate", "cell_gate", "output_gate")
ATTN_TENSORS = ("attn_q", "attn_k", "attn_v", "attn_out")


@dataclass(frozen=True)
class ModelSpec:
    kind: str  # "lstm" | "transformer"
    vocab_size: int
    embed_dim: int
    hidden_dim: int
    num_layers: int
    num_heads: int = 1
    max_context: int = 128
    tie_granularity: str = "layer"  # "layer" | "node"

    def __post_init__(self):
        if self.kind not in ("lstm", "transformer"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.tie_granularity not in ("layer", "node"):
            raise ConfigError(f"unknown tie granularity {self.tie_granularity!r}")
        for name in ("vocab_size", "embed_dim", "hidden_dim", "num_layers", "max_context"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.kind == "transformer":
            if self.hidden_dim % self.num_heads != 0:
                raise ConfigError("hidden_dim must be divisible by num_heads")
            if self.embed_dim != self.hidden_dim:
                raise ConfigError("transformer requires embed_dim == hidden_dim")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "max_context": self.max_context,
            "tie_granularity": self.tie_granularity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


# -- parameter inventory -----------------------------------------------------


def param_shapes(spec: ModelSpec) -> list[tuple[str, tuple[int, int]]]:
    """Ordered (tensor name, shape) inventory for a spec."""
    n, m, d, L = spec.vocab_size, spec.embed_dim, spec.hidden_dim, spec.num_layers
    shapes: list[tuple[str, tuple[int, int]]] = [("embedding", (n, m))]
    if spec.kind == "lstm":
        for layer in range(1, L + 1):
            fan_in = m if layer == 1 else d
            for gate in LSTM_GATES:
                shapes.append((f"layer{layer}.{gate}", (fan_in + d + 1, d)))
        shapes.append(("output", (d + 1, n)))
    else:
        shapes.append(("positional", (spec.max_context, m)))
        for layer in range(1, L + 1):
            for t in ATTN_TENSORS:
                shapes.append((f"layer{layer}.{t}", (d, d)))
            shapes.append((f"layer{layer}.ffn_in", (d, FF_MULT * d)))
            shapes.append((f"layer{layer}.ffn_out", (FF_MULT * d, d)))
        shapes.append(("output", (d + 1, n)))
    return shapes


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Deterministic Glorot-style initialization; bias rows start at zero."""
    rng = np.random.Generator(np.random.PCG64(seed))
    tensors = {}
    names = []
    for name, shape in param_shapes(spec):
        if name == "embedding":
            arr = rng.normal(0.0, 0.1, size=shape)
        elif name == "positional":
            arr = rng.normal(0.0, 0.02, size=shape)
        else:
            fan_in = shape[0]
            bias_row = None
            if name == "output" or ".gate" in name or name.endswith("_gate"):
                fan_in = shape[0] - 1
                bias_row = shape[0] - 1
            bound = np.sqrt(6.0 / (fan_in + shape[1]))
            arr = rng.uniform(-bound, bound, size=shape)
            if bias_row is not None:
                arr[bias_row] = 0.0
        names.append(name)
        tensors[name] = arr
    return ParamVector(tuple(names), tensors)


def zero_params(spec: ModelSpec) -> ParamVector:
    names, tensors = [], {}
    for name, shape in param_shapes(spec):
        names.append(name)
        tensors[name] = np.zeros(shape)
    return ParamVector(tuple(names), tensors)


# -- cluster layout ------------------------------------------------------------


@dataclass(frozen=True)
class TensorRef:
    tensor: str
    axis: int = 0
    start: int | None = None  # None -> whole tensor
    stop: int | None = None


@dataclass(frozen=True)
class WeightCluster:
    cluster_id: str
    name: str
    count: int
    refs: tuple[TensorRef, ...]


def _node_axis(tensor: str) -> int:
    # Output-unit axis: columns for weight matrices, rows for lookup tables.
    return 0 if tensor in ("embedding", "positional") else 1


@dataclass(frozen=True)
class ClusterLayout:
    clusters: tuple[WeightCluster, ...]

    def __post_init__(self):
        ids = [c.cluster_id for c in self.clusters]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate cluster ids in layout")

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(c.cluster_id for c in self.clusters)

    @property
    def total_count(self) -> int:
        return sum(c.count for c in self.clusters)

    def cluster(self, cid: str) -> WeightCluster:
        for c in self.clusters:
            if c.cluster_id == cid:
                return c
        raise ConfigError(f"unknown cluster {cid!r}")

    def _pieces(self, pv: ParamVector, ref: TensorRef) -> np.ndarray:
        arr = pv.tensors[ref.tensor]
        if ref.start is None:
            return arr
        idx = [slice(None)] * arr.ndim
        idx[ref.axis] = slice(ref.start, ref.stop)
        return arr[tuple(idx)]

    def gather(self, pv: ParamVector, cid: str) -> np.ndarray:
        """Cluster values as a flat copy, in ref order."""
        c = self.cluster(cid)
        return np.concatenate([self._pieces(pv, r).ravel() for r in c.refs])

    def scatter(self, pv: ParamVector, cid: str, flat: np.ndarray):
        """Write a flat cluster back into the tensors of ``pv`` (in place)."""
        c = self.cluster(cid)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != c.count:
            raise ConfigError(f"cluster {cid!r}: expected {c.count} values, got {flat.size}")
        pos = 0
        for r in c.refs:
            piece = self._pieces(pv, r)
            size = piece.size
            target = pv.tensors[r.tensor]
            if r.start is None:
                target[...] = flat[pos : pos + size].reshape(piece.shape)
            else:
                idx = [slice(None)] * target.ndim
                idx[r.axis] = slice(r.start, r.stop)
                target[tuple(idx)] = flat[pos : pos + size].reshape(piece.shape)
            pos += size


def cluster_layout(spec: ModelSpec) -> ClusterLayout:
    """Partition of all trainable parameters into quantization clusters.

    Layer granularity: one cluster per named sublayer; the positional table
    shares the embedding cluster. Node granularity: one cluster per output
    unit (matrix column / table row).
    """
    shapes = dict(param_shapes(spec))
    groups: list[tuple[str, list[str]]] = []
    if spec.kind == "lstm":
        groups.append(("embedding", ["embedding"]))
        for layer in range(1, spec.num_layers + 1):
            for gate in LSTM_GATES:
                t = f"layer{layer}.{gate}"
                groups.append((t, [t]))
        groups.append(("output", ["output"]))
    else:
        groups.append(("embedding", ["embedding", "positional"]))
        for layer in range(1, spec.num_layers + 1):
            for t in ATTN_TENSORS + ("ffn_in", "ffn_out"):
                name = f"layer{layer}.{t}"
                groups.append((name, [name]))
        groups.append(("output", ["output"]))

    clusters = []
    if spec.tie_granularity == "layer":
        for cid, tensors in groups:
            refs = tuple(TensorRef(t) for t in tensors)
            count = sum(int(np.prod(shapes[t])) for t in tensors)
            clusters.append(WeightCluster(cid, cid, count, refs))
    else:
        for _, tensors in groups:
            for t in tensors:
                axis = _node_axis(t)
                units = shapes[t][axis]
                per = int(np.prod(shapes[t])) // units
                for j in range(units):
                    ref = TensorRef(t, axis=axis, start=j, stop=j + 1)
                    clusters.append(WeightCluster(f"{t}[{j}]", f"{t}[{j}]", per, (ref,)))
    return ClusterLayout(tuple(clusters))


# -- parameter sources ----------------------------------------------------------


class PlainSource:
    """Weights straight from leaf Variables (or constant arrays)."""

    fused_gates = True  # LSTM may concatenate gate matrices per layer

    def __init__(self, tensors: dict):
        self.tensors = tensors

    def embed_tokens(self, name, ids):
        return ad.embedding(self.tensors[name], ids)

    def pos_slice(self, name, length):
        return ad.narrow(self.tensors[name], 0, 0, length)

    def linear(self, name, x):
        return ad.linear(x, self.tensors[name])

    def affine(self, name, x):
        return ad.affine(x, self.tensors[name])

    def gated(self, name, x, act: str, bias: bool = True):
        pre = self.affine(name, x) if bias else self.linear(name, x)
        return _ACT[act](pre)


class MixSource:
    """Branch-mixing source for the precision-search super-network.

    For every tensor it holds one frozen weight array per candidate
    bit-width plus a per-cluster vector of mixing coefficients (softmax of
    the architecture logits). Purely linear uses mix the weights themselves
    (equivalent to mixing the outputs); activation-wrapped uses mix the
    post-activation branch outputs.
    """

    fused_gates = False  # gates mix post-activation, so no fusion

    def __init__(self, branches: dict, mix_weights: dict, tensor_cluster: dict, bit_set):
        self.branches = branches  # tensor -> {bits: ndarray}
        self.mix = mix_weights  # cluster_id -> {bits: 0-d Variable}
        self.tensor_cluster = tensor_cluster
        self.bit_set = bit_set

    def _mixed_tensor(self, name):
        cid = self.tensor_cluster[name]
        parts = [
            ad.scalar_mul(self.mix[cid][n], self.branches[name][n])
            for n in self.bit_set
        ]
        out = parts[0]
        for p in parts[1:]:
            out = ad.add(out, p)
        return out

    def embed_tokens(self, name, ids):
        return ad.embedding(self._mixed_tensor(name), ids)

    def pos_slice(self, name, length):
        return ad.narrow(self._mixed_tensor(name), 0, 0, length)

    def linear(self, name, x):
        return ad.linear(x, self._mixed_tensor(name))

    def affine(self, name, x):
        return ad.affine(x, self._mixed_tensor(name))

    def gated(self, name, x, act: str, bias: bool = True):
        cid = self.tensor_cluster[name]
        out = None
        for n in self.bit_set:
            w = self.branches[name][n]
            pre = ad.affine(x, w) if bias else ad.linear(x, w)
            branch = ad.scalar_mul(self.mix[cid][n], _ACT[act](pre))
            out = branch if out is None else ad.add(out, branch)
        return out


_ACT = {"sigmoid": ad.sigmoid, "tanh": ad.tanh, "gelu": ad.gelu}


# -- LSTM ------------------------------------------------------------------------


@dataclass
class LstmState:
    """Per-layer cell and hidden vectors."""

    cells: list
    hiddens: list


class LstmLM:
    def __init__(self, spec: ModelSpec):
        if spec.kind != "lstm":
            raise ConfigError("LstmLM requires an lstm spec")
        self.spec = spec

    # core recurrence ------------------------------------------------------

    def _cell(self, source, layer: int, inp, c_prev, h_prev, fused_w=None):
        d = self.spec.hidden_dim
        u = ad.concat([inp, h_prev], axis=-1)
        if fused_w is not None:
            # One affine over the four concatenated gate matrices.
            pre = ad.affine(u, fused_w)
            f = ad.sigmoid(ad.narrow(pre, -1, 0, d))
            i = ad.sigmoid(ad.narrow(pre, -1, d, d))
            c_tilde = ad.tanh(ad.narrow(pre, -1, 2 * d, d))
            o = ad.sigmoid(ad.narrow(pre, -1, 3 * d, d))
        else:
            f = source.gated(f"layer{layer}.forget_gate", u, "sigmoid")
            i = source.gated(f"layer{layer}.input_gate", u, "sigmoid")
            c_tilde = source.gated(f"layer{layer}.cell_gate", u, "tanh")
            o = source.gated(f"layer{layer}.output_gate", u, "sigmoid")
        c = ad.add(ad.mul(f, c_prev), ad.mul(i, c_tilde))
        h = ad.mul(o, ad.tanh(c))
        return c, h

    def _fused_weights(self, source):
        """Per-layer concatenation of the gate matrices (once per forward)."""
        if not getattr(source, "fused_gates", False):
            return [None] * self.spec.num_layers
        return [
            ad.concat(
                [source.tensors[f"layer{l}.{g}"] for g in LSTM_GATES], axis=1
            )
            for l in range(1, self.spec.num_layers + 1)
        ]

    def logits_var(self, source, inputs: np.ndarray):
        """(B, S, N) next-token logits for input ids (B, S)."""
        inputs = np.asarray(inputs)
        B, S = inputs.shape
        d = self.spec.hidden_dim
        x = source.embed_tokens("embedding", inputs)
        fused = self._fused_weights(source)
        cells = [np.zeros((B, d)) for _ in range(self.spec.num_layers)]
        hiddens = [np.zeros((B, d)) for _ in range(self.spec.num_layers)]
        tops = []
        for t in range(S):
            inp = ad.reshape(ad.narrow(x, 1, t, 1), (B, self.spec.embed_dim))
            for l in range(self.spec.num_layers):
                cells[l], hiddens[l] = self._cell(
                    source, l + 1, inp, cells[l], hiddens[l], fused[l]
                )
                inp = hiddens[l]
            tops.append(ad.reshape(inp, (B, 1, d)))
        h_top = ad.concat(tops, axis=1)
        return source.affine("output", h_top)

    def loss_from_source(self, source, batch):
        logits = self.logits_var(source, batch.inputs)
        return ad.cross_entropy(logits, batch.targets, batch.target_mask)

    def loss_var(self, leaves: dict, batch):
        return self.loss_from_source(PlainSource(leaves), batch)

    # public helpers -------------------------------------------------------

    def init_state(self, batch_size: int = 1) -> LstmState:
        d = self.spec.hidden_dim
        zeros = lambda: np.zeros((batch_size, d))
        return LstmState(
            cells=[zeros() for _ in range(self.spec.num_layers)],
            hiddens=[zeros() for _ in range(self.spec.num_layers)],
        )

    def step(self, params: ParamVector, x_t: np.ndarray, state: LstmState):
        """One recurrence step on an embedded input; returns (logits, state)."""
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        if x_t.shape[1] != self.spec.embed_dim:
            raise ConfigError("lstm step: embedding width mismatch")
        if len(state.cells) != self.spec.num_layers or state.cells[0].shape != (
            x_t.shape[0],
            self.spec.hidden_dim,
        ):
            raise ConfigError("lstm step: state dimensions do not match the spec")
        source = PlainSource({k: v for k, v in params.items()})
        inp = x_t
        new_cells, new_hiddens = [], []
        for l in range(self.spec.num_layers):
            c, h = self._cell(source, l + 1, inp, state.cells[l], state.hiddens[l])
            new_cells.append(c.value)
            new_hiddens.append(h.value)
            inp = h
        logits = source.affine("output", inp)
        return logits.value, LstmState(new_cells, new_hiddens)

    def next_log_probs(self, params: ParamVector, batch) -> np.ndarray:
        source = PlainSource({k: v for k, v in params.items()})
        logits = self.logits_var(source, batch.inputs)
        return ad.log_softmax_np(logits.value)


# -- Transformer -------------------------------------------------------------------


class TransformerLM:
    def __init__(self, spec: ModelSpec):
        if spec.kind != "transformer":
            raise ConfigError("TransformerLM requires a transformer spec")
        self.spec = spec

    def _block_tail(self, source, l: int, x, y):
        """Residual + norm + feed-forward half of one block."""
        z = ad.add(source.linear(f"layer{l}.attn_out", y), x)
        o = ad.layer_norm(z)
        ff = source.linear(
            f"layer{l}.ffn_out", source.gated(f"layer{l}.ffn_in", o, "gelu", bias=False)
        )
        return ad.layer_norm(ad.add(ff, o))

    def _embed(self, source, inputs):
        S = inputs.shape[1]
        if S > self.spec.max_context:
            raise ConfigError(
                f"sequence length {S} exceeds max_context {self.spec.max_context}"
            )
        return ad.add(
            source.embed_tokens("embedding", inputs),
            source.pos_slice("positional", S),
        )

    def _heads(self, source, name, x, B, S):
        H, dk = self.spec.num_heads, self.spec.hidden_dim // self.spec.num_heads
        proj = source.linear(name, x)
        return ad.transpose(ad.reshape(proj, (B, S, H, dk)), (0, 2, 1, 3))

    def logits_var(self, source, inputs: np.ndarray):
        """Batched forward: causally masked attention (columns past the row
        index carry exactly zero probability, matching the cached-history
        evaluation of :meth:`logits_var_stepwise` up to summation order)."""
        spec = self.spec
        inputs = np.asarray(inputs)
        B, S = inputs.shape
        dk = spec.hidden_dim // spec.num_heads
        inv_sqrt_dk = 1.0 / np.sqrt(dk)

        x = self._embed(source, inputs)
        for l in range(1, spec.num_layers + 1):
            q = self._heads(source, f"layer{l}.attn_q", x, B, S)
            k = self._heads(source, f"layer{l}.attn_k", x, B, S)
            v = self._heads(source, f"layer{l}.attn_v", x, B, S)
            att = ad.causal_softmax(
                ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), inv_sqrt_dk)
            )
            y = ad.reshape(
                ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, S, spec.hidden_dim)
            )
            x = self._block_tail(source, l, x, y)
        return source.affine("output", x)

    def logits_var_stepwise(self, source, inputs: np.ndarray):
        """Per-position forward over cached keys/values; position t literally
        never touches later tokens, so prefixes evaluate bit-identically."""
        spec = self.spec
        inputs = np.asarray(inputs)
        B, S = inputs.shape
        dk = spec.hidden_dim // spec.num_heads
        inv_sqrt_dk = 1.0 / np.sqrt(dk)

        x = self._embed(source, inputs)
        for l in range(1, spec.num_layers + 1):
            q = self._heads(source, f"layer{l}.attn_q", x, B, S)
            k = self._heads(source, f"layer{l}.attn_k", x, B, S)
            v = self._heads(source, f"layer{l}.attn_v", x, B, S)
            outs = []
            for t in range(S):
                qt = ad.narrow(q, 2, t, 1)
                kt = ad.narrow(k, 2, 0, t + 1)
                vt = ad.narrow(v, 2, 0, t + 1)
                att = ad.softmax(
                    ad.scale(ad.matmul(qt, ad.transpose(kt, (0, 1, 3, 2))), inv_sqrt_dk)
                )
                outs.append(ad.matmul(att, vt))
            y = ad.reshape(
                ad.transpose(ad.concat(outs, axis=2), (0, 2, 1, 3)), (B, S, spec.hidden_dim)
            )
            x = self._block_tail(source, l, x, y)
        return source.affine("output", x)

    def loss_from_source(self, source, batch):
        logits = self.logits_var(source, batch.inputs)
        return ad.cross_entropy(logits, batch.targets, batch.target_mask)

    def loss_var(self, leaves: dict, batch):
        return self.loss_from_source(PlainSource(leaves), batch)

    def step(self, params: ParamVector, history: np.ndarray, truncate: bool = False) -> np.ndarray:
        """Next-token logits given the full token history (1-D ids)."""
        history = np.asarray(history).ravel()
        if history.size == 0:
            raise ConfigError("transformer step: empty history")
        if history.size > self.spec.max_context:
            if not truncate:
                raise ConfigError(
                    f"history length {history.size} exceeds max_context "
                    f"{self.spec.max_context} (pass truncate=True to allow)"
                )
            warnings.warn("history truncated to max_context", stacklevel=2)
            history = history[-self.spec.max_context :]
        source = PlainSource({k: v for k, v in params.items()})
        logits = self.logits_var_stepwise(source, history[None, :])
        return logits.value[0, -1]

    def next_log_probs(self, params: ParamVector, batch) -> np.ndarray:
        source = PlainSource({k: v for k, v in params.items()})
        logits = self.logits_var(source, batch.inputs)
        return ad.log_softmax_np(logits.value)


def build_model(spec: ModelSpec):
    return LstmLM(spec) if spec.kind == "lstm" else TransformerLM(spec)
