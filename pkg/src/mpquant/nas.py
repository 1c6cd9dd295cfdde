"""Differentiable mixed-precision search over a branch-mixing super-network.

Every cluster holds one frozen weight branch per candidate bit-width (taken
from the uniform-precision prototypes). A per-cluster softmax over learned
selection logits mixes branch outputs; search runs gradient descent on the
logits against cross entropy plus a complexity penalty
``beta * sum softmax(a)_n * sqrt(n)`` that pushes probability mass toward
narrow branches. The final assignment is the per-cluster argmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import corpus as corpus_mod
from .errors import ConfigError, NumericError
from .models import MixSource, cluster_layout, param_shapes
from .quant import BIT_WIDTHS, PrecisionAssignment
from .sensitivity import PrototypeSet


@dataclass
class Supernet:
    model: object  # LstmLM | TransformerLM
    branches: dict  # tensor name -> {bits: ndarray}
    tensor_cluster: dict  # tensor name -> cluster id
    logits: dict  # cluster id -> ndarray (len(bit_set),)
    beta: float = 0.0
    bit_set: tuple = BIT_WIDTHS

    @property
    def cluster_ids(self):
        return tuple(self.logits.keys())

    def selection_weights(self) -> dict:
        out = {}
        for cid, a in self.logits.items():
            e = np.exp(a - a.max())
            out[cid] = e / e.sum()
        return out

    def argmax_assignment(self) -> PrecisionAssignment:
        # ties toward the narrower branch
        bits = {}
        for cid, w in self.selection_weights().items():
            best = max(range(len(self.bit_set)), key=lambda i: (w[i], -self.bit_set[i]))
            bits[cid] = self.bit_set[best]
        return PrecisionAssignment(bits)

    def avg_bits(self) -> float:
        layout = cluster_layout(self.model.spec)
        return self.argmax_assignment().avg_bits(layout)


def build_supernet(model, prototypes: PrototypeSet, beta: float = 0.0, bit_set=BIT_WIDTHS) -> Supernet:
    spec = model.spec
    if spec.tie_granularity != "layer":
        raise ConfigError("precision search supports layer-granularity clusters")
    prototypes.require(bit_set)
    layout = cluster_layout(spec)
    branch_params = {n: prototypes.models[n].param_vector() for n in bit_set}
    tensor_cluster = {}
    for c in layout.clusters:
        for ref in c.refs:
            tensor_cluster[ref.tensor] = c.cluster_id
    branches = {
        name: {n: branch_params[n].tensors[name] for n in bit_set}
        for name, _ in param_shapes(spec)
    }
    logits = {c.cluster_id: np.zeros(len(bit_set)) for c in layout.clusters}
    return Supernet(model, branches, tensor_cluster, logits, beta, tuple(bit_set))


def _mix_vars(sn: Supernet):
    """Leaf logit Variables plus per-cluster softmax weight Variables."""
    leaf = {cid: ad.Variable(a, op="leaf") for cid, a in sn.logits.items()}
    mix = {}
    for cid, var in leaf.items():
        s = ad.softmax(var)
        if not np.isclose(s.value.sum(), 1.0, atol=1e-9):
            raise NumericError("selection weights do not normalize")
        mix[cid] = {n: ad.narrow(s, 0, i, 1) for i, n in enumerate(sn.bit_set)}
        # 0-d views for scalar_mul
        mix[cid] = {n: ad.reshape(v, ()) for n, v in mix[cid].items()}
    return leaf, mix


def supernet_forward(sn: Supernet, batch):
    """CE loss of the branch-mixed model; returns (loss Variable, leaf logits)."""
    leaf, mix = _mix_vars(sn)
    source = MixSource(sn.branches, mix, sn.tensor_cluster, sn.bit_set)
    loss = sn.model.loss_from_source(source, batch)
    return loss, leaf


def nas_objective(sn: Supernet, batch):
    """CE plus the selection-weighted bit-cost penalty."""
    loss, leaf = supernet_forward(sn, batch)
    if sn.beta != 0.0:
        sqrt_n = np.sqrt(np.array(sn.bit_set, dtype=np.float64))
        for cid, var in leaf.items():
            pen = ad.vsum(ad.mul(ad.softmax(var), sqrt_n))
            loss = ad.add(loss, ad.scale(pen, sn.beta))
    return loss, leaf


def search(
    sn: Supernet,
    windows: np.ndarray,
    mask: np.ndarray,
    steps: int = 2000,
    lr: float = 0.01,
    batch_size: int = 32,
    seed: int = 0,
) -> tuple[PrecisionAssignment, list]:
    """Gradient descent on the selection logits; branches stay frozen."""
    rng = np.random.Generator(np.random.PCG64(seed))
    history = []
    for step in range(steps):
        batch = corpus_mod.sample_batch(windows, mask, batch_size, rng)
        obj, leaf = nas_objective(sn, batch)
        ad.backward(obj)
        for cid, var in leaf.items():
            if var.grad is not None:
                sn.logits[cid] = sn.logits[cid] - lr * var.grad
        if not all(np.all(np.isfinite(a)) for a in sn.logits.values()):
            raise NumericError(f"selection logits diverged at step {step}")
        if step % 50 == 0 or step == steps - 1:
            history.append(
                {
                    "step": step,
                    "objective": float(obj.value),
                    "avg_bits": sn.avg_bits(),
                    "logits": {cid: a.tolist() for cid, a in sn.logits.items()},
                }
            )
    assignment = sn.argmax_assignment()
    return assignment, history


def search_for_target(
    model,
    prototypes: PrototypeSet,
    windows,
    mask,
    target_avg_bits: float,
    steps: int = 400,
    lr: float = 0.01,
    batch_size: int = 32,
    seed: int = 0,
    beta_lo: float = 1e-4,
    beta_hi: float = 16.0,
    rounds: int = 8,
) -> tuple[PrecisionAssignment, float, list]:
    """Bisect the penalty coefficient until the searched assignment's average
    bit-width lands at (or just under) the target."""
    best = None
    history = []
    lo, hi = beta_lo, beta_hi
    for _ in range(rounds):
        beta = float(np.sqrt(lo * hi))  # geometric midpoint
        sn = build_supernet(model, prototypes, beta)
        assignment, h = search(sn, windows, mask, steps, lr, batch_size, seed)
        avg = assignment.avg_bits(cluster_layout(model.spec))
        history.append({"beta": beta, "avg_bits": avg})
        if avg <= target_avg_bits + 1e-9:
            if best is None or avg > best[1]:
                best = (assignment, avg, beta)
            hi = beta  # try weaker penalty for a closer fit
        else:
            lo = beta
    if best is None:
        # even the strongest sweep stayed above target; return the last run
        best = (assignment, avg, beta)
    return best[0], best[2], history
