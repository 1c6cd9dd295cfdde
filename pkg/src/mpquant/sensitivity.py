"""Per-cluster quantization sensitivity metrics.

Two interchangeable measures over the candidate bit-width grid:

  * KL: divergence between the full-precision model's next-token
    distribution and that of a hybrid model where exactly one cluster is
    replaced by its quantized counterpart from a uniform-precision
    prototype. Computed over sampled minibatches with a full-vocabulary
    inner sum.
  * Curvature: estimated Hessian trace of the loss restricted to the
    cluster, times the squared quantization error of the cluster.

Traces come from a Hutchinson estimator with cluster-masked probe vectors
and finite-difference Hessian-vector products.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import corpus as corpus_mod
from .errors import ConfigError, NumericError
from .models import ClusterLayout, cluster_layout
from .params import ParamVector
from .quant import BIT_WIDTHS, QuantizedModel

PROB_FLOOR = 1e-12
_KL_NEG_TOL = 1e-9


@dataclass(frozen=True)
class SampleSpec:
    num_batches: int = 1
    batch_size: int = 32
    seed: int = 0


@dataclass
class SensitivityReport:
    method: str  # "kl" | "hessian"
    entries: dict  # (cluster_id, bits) -> omega
    sample: SampleSpec
    flags: list = field(default_factory=list)

    def omega(self, cid: str, bits: int) -> float:
        return self.entries[(cid, bits)]

    def require_grid(self, layout: ClusterLayout, bit_set=BIT_WIDTHS):
        want = {(c.cluster_id, n) for c in layout.clusters for n in bit_set}
        if set(self.entries) != want:
            raise ConfigError("sensitivity report does not cover clusters x bit-widths")

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(
                f"# method={self.method} num_batches={self.sample.num_batches} "
                f"batch_size={self.sample.batch_size} seed={self.sample.seed}\n"
            )
            for flag in self.flags:
                fh.write(f"# flag: {flag}\n")
            fh.write("cluster\tbits\tomega\n")
            for (cid, n), om in self.entries.items():
                fh.write(f"{cid}\t{n}\t{om!r}\n")

    @classmethod
    def load(cls, path) -> "SensitivityReport":
        method, sample, entries, flags = "kl", SampleSpec(), {}, []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line.startswith("# flag:"):
                    flags.append(line[len("# flag:") :].strip())
                    continue
                if line.startswith("#"):
                    kv = dict(p.split("=", 1) for p in line[1:].split())
                    method = kv.get("method", method)
                    sample = SampleSpec(
                        int(kv.get("num_batches", 1)),
                        int(kv.get("batch_size", 32)),
                        int(kv.get("seed", 0)),
                    )
                    continue
                if not line or line.startswith("cluster\t"):
                    continue
                cid, n, om = line.split("\t")
                entries[(cid, int(n))] = float(om)
        return cls(method, entries, sample, flags)


@dataclass
class PrototypeSet:
    """Uniform-precision quantized models keyed by bit-width."""

    models: dict[int, QuantizedModel]

    def __post_init__(self):
        specs = {qm.spec for qm in self.models.values()}
        if len(specs) > 1:
            raise ConfigError("prototypes must share one architecture")

    def require(self, bit_set=BIT_WIDTHS):
        missing = [n for n in bit_set if n not in self.models]
        if missing:
            raise ConfigError(f"missing prototypes for bit-widths {missing}")

    def cluster_weights(self, bits: int, layout: ClusterLayout, cid: str) -> np.ndarray:
        qm = self.models[bits]
        qc = qm.clusters.get(cid)
        if qc is None:
            raise ConfigError(f"prototype {bits}-bit has no cluster {cid!r}")
        return qc.dequantize()


def hybrid_params(
    full: ParamVector, layout: ClusterLayout, cid: str, quant_flat: np.ndarray
) -> ParamVector:
    """Full-precision weights with one cluster replaced by quantized values."""
    pv = full.clone()
    layout.scatter(pv, cid, quant_flat)
    return pv


def kl_divergence(model, params_p: ParamVector, params_q: ParamVector, batches) -> float:
    """Sum over batch positions of full-vocabulary KL(P || Q).

    Both distributions are floored at ``PROB_FLOOR`` inside the log ratio to
    guard underflow; identical weights yield exactly zero.
    """
    log_floor = np.log(PROB_FLOOR)
    total = 0.0
    for batch in batches:
        logp = model.next_log_probs(params_p, batch)
        logq = model.next_log_probs(params_q, batch)
        lp = np.maximum(logp, log_floor)
        lq = np.maximum(logq, log_floor)
        contrib = np.exp(logp) * (lp - lq)
        total += float(contrib[batch.target_mask].sum())
    if total < 0.0:
        if total < -_KL_NEG_TOL:
            raise NumericError(f"KL divergence came out negative: {total}")
        total = 0.0
    return total


def kl_sensitivity(
    model,
    full: ParamVector,
    prototypes: PrototypeSet,
    layout: ClusterLayout,
    cid: str,
    bits: int,
    batches,
) -> float:
    quant = prototypes.cluster_weights(bits, layout, cid)
    hybrid = hybrid_params(full, layout, cid, quant)
    return kl_divergence(model, full, hybrid, batches)


# -- curvature -----------------------------------------------------------------


def _cluster_probe(template: ParamVector, layout: ClusterLayout, cid: str, flat: np.ndarray) -> ParamVector:
    pv = template.zeros_like()
    layout.scatter(pv, cid, flat)
    return pv


def hutchinson_trace(
    model,
    params: ParamVector,
    batch,
    layout: ClusterLayout,
    cid: str,
    m: int = 50,
    seed: int = 0,
    distribution: str = "rademacher",
    probes: np.ndarray | str | None = None,
    eps: float | None = None,
) -> float:
    """(1/m) sum of z^T H z with probes supported on one cluster.

    ``probes`` may be an explicit (m, cluster_size) array or the string
    ``"basis"`` to sweep standard basis vectors (exact diagonal sum for
    quadratics; intended for verification).
    """
    if m < 1:
        raise ConfigError("hutchinson_trace requires m >= 1")
    c = layout.cluster(cid)
    if isinstance(probes, str):
        if probes != "basis":
            raise ConfigError(f"unknown probe mode {probes!r}")
        probe_arr = np.eye(c.count)
    elif probes is not None:
        probe_arr = np.asarray(probes, dtype=np.float64)
        if probe_arr.ndim != 2 or probe_arr.shape[1] != c.count:
            raise ConfigError("explicit probes must be (m, cluster_size)")
    else:
        rng = np.random.Generator(np.random.PCG64(seed))
        if distribution == "rademacher":
            probe_arr = rng.integers(0, 2, size=(m, c.count)).astype(np.float64) * 2.0 - 1.0
        elif distribution == "gaussian":
            probe_arr = rng.normal(size=(m, c.count))
        else:
            raise ConfigError(f"unknown probe distribution {distribution!r}")

    estimates = []
    for z_flat in probe_arr:
        z = _cluster_probe(params, layout, cid, z_flat)
        hz = ad.hvp(model, params, batch, z, eps=eps)
        estimates.append(z.dot(hz))
    return float(np.mean(estimates))


def quant_error_sq(
    full: ParamVector, layout: ClusterLayout, cid: str, quant_flat: np.ndarray
) -> float:
    diff = layout.gather(full, cid) - quant_flat
    return float(np.dot(diff, diff))


def hessian_sensitivity(trace: float, err_sq: float) -> float:
    """Trace-weighted squared quantization error; negative traces pass through."""
    return trace * err_sq


# -- report construction ----------------------------------------------------------


def draw_batches(windows, mask, sample: SampleSpec):
    rng = np.random.Generator(np.random.PCG64(sample.seed))
    return [
        corpus_mod.sample_batch(windows, mask, sample.batch_size, rng)
        for _ in range(sample.num_batches)
    ]


def build_report(
    model,
    full: ParamVector,
    prototypes: PrototypeSet,
    method: str,
    sample: SampleSpec,
    windows: np.ndarray,
    mask: np.ndarray,
    m: int = 50,
    bit_set=BIT_WIDTHS,
    all_batches: bool = False,
) -> SensitivityReport:
    """Evaluate the chosen metric for every (cluster, bit-width) pair.

    ``all_batches`` evaluates over the whole corpus instead of sampled
    minibatches (slower; used for metric-stability studies).
    """
    if method not in ("kl", "hessian"):
        raise ConfigError(f"unknown sensitivity method {method!r}")
    prototypes.require(bit_set)
    layout = cluster_layout(model.spec)
    if all_batches:
        batches = list(corpus_mod.iter_batches(windows, mask, sample.batch_size))
    else:
        batches = draw_batches(windows, mask, sample)

    entries: dict = {}
    flags: list = []
    if method == "kl":
        for c in layout.clusters:
            for n in bit_set:
                entries[(c.cluster_id, n)] = kl_sensitivity(
                    model, full, prototypes, layout, c.cluster_id, n, batches
                )
    else:
        batch = batches[0]
        for c in layout.clusters:
            trace = hutchinson_trace(
                model, full, batch, layout, c.cluster_id, m=m, seed=sample.seed
            )
            if trace < 0:
                flags.append(f"negative_trace cluster={c.cluster_id} trace={trace!r}")
            for n in bit_set:
                quant = prototypes.cluster_weights(n, layout, c.cluster_id)
                err = quant_error_sq(full, layout, c.cluster_id, quant)
                entries[(c.cluster_id, n)] = hessian_sensitivity(trace, err)
    return SensitivityReport(method, entries, sample, flags)
