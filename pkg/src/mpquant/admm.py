"""Quantized-model training.

The main trainer runs a three-stage alternating loop per outer iteration:

  A. full-precision weight update by extra-gradient steps on the augmented
     objective  F_ce(w) + (g/2)||w - q + u||^2 - (g/2)||u||^2, with the
     quantized reference q frozen from the previous outer iteration;
  B. quantization-variable refresh: per cluster, alternate the closed-form
     scale fit and nearest-code mapping on (w + u) until the codes stop
     changing (the squared residual never increases across iterations);
  C. multiplier update  u <- u + w - q  accumulating quantization error.

Also provided: a plain SGD baseline trainer, the straight-through trainer
(quantized forward, full-precision backward) used as a comparison point,
and offline post-training quantization (stage B alone).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import corpus as corpus_mod
from .errors import ConfigError, DegenerateCodesError, TrainingDivergedError
from .models import ClusterLayout, ModelSpec, cluster_layout
from .params import ParamVector
from .quant import (
    PrecisionAssignment,
    QuantTable,
    QuantizedCluster,
    QuantizedModel,
    dequantize,
    fit_scale,
    quantize_nearest,
)


@dataclass
class ADMMConfig:
    gamma: float = 1e-3
    eta1: float = 0.02
    eta2: float = 0.001
    max_outer: int = 20
    max_inner: int = 20
    inner_tol: float = 1e-9
    batch_size: int = 32
    seq_len: int = 32
    steps_per_outer: int | None = None  # None -> one pass over the windows
    patience: int = 3
    divergence_factor: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not (self.gamma >= 0 and np.isfinite(self.gamma)):
            raise ConfigError("gamma must be non-negative")
        if self.eta1 < 0 or self.eta2 < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.max_inner < 1:
            raise ConfigError("max_inner must be >= 1")


@dataclass
class ADMMState:
    theta: ParamVector
    lam: ParamVector
    alphas: dict[str, float]
    codes: dict[str, np.ndarray]
    f_ref: ParamVector
    outer: int = 0
    history: list = field(default_factory=list)


@dataclass
class TrainReport:
    method: str
    iterations: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def log(self, **entry):
        self.iterations.append(entry)

    def to_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for entry in self.iterations:
                fh.write(json.dumps(entry) + "\n")

    @property
    def final_val_ppl(self) -> float:
        return self.iterations[-1]["val_ppl"]


# -- stage B: quantization variables -----------------------------------------


def inner_loop_update(
    x: np.ndarray,
    bits: int,
    alpha0: float,
    max_inner: int = 20,
    inner_tol: float = 1e-9,
):
    """Alternating scale/code refinement minimizing ||x - alpha*V||^2.

    Starts from codes nearest under ``alpha0``; each scale update is the
    least-squares optimum for the current codes and each code update is the
    nearest mapping under the current scale, so the objective is
    non-increasing. Returns (alpha, codes, objectives per iteration).
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    alpha = float(alpha0)
    codes = quantize_nearest(x, QuantTable(bits, alpha))
    if bits > 1 and not codes.any():
        # Inherited scale dwarfs every value (all codes rounded to zero);
        # rescale to the cluster's dynamic range so the alternation can start.
        # Falls back to the previous scale only if the values are all zero.
        top = float(np.max(np.abs(x)))
        if top > 0.0:
            alpha = top / ((1 << (bits - 1)) - 1)
            codes = quantize_nearest(x, QuantTable(bits, alpha))
        else:
            warnings.warn("all-zero cluster; keeping previous scale", stacklevel=2)
            return alpha, codes, [0.0]
    objs = [float(np.sum((x - alpha * codes) ** 2))]
    for _ in range(max_inner):
        try:
            new_alpha = fit_scale(x, codes)
        except DegenerateCodesError:
            warnings.warn("all-zero codes in scale update; keeping previous scale", stacklevel=2)
            break
        if not new_alpha > 0:
            # Cannot happen after a nearest-code step unless x is all zero.
            warnings.warn("non-positive scale fit; keeping previous scale", stacklevel=2)
            break
        alpha = new_alpha
        new_codes = quantize_nearest(x, QuantTable(bits, alpha))
        obj = float(np.sum((x - alpha * new_codes) ** 2))
        if obj > objs[-1] * (1.0 + 1e-12) + 1e-300:
            raise AssertionError("inner-loop objective increased")
        unchanged = np.array_equal(new_codes, codes)
        codes = new_codes
        improved = objs[-1] - obj
        objs.append(obj)
        if unchanged or improved < inner_tol * max(objs[0], 1e-30):
            break
    return alpha, codes, objs


def quantization_update(
    theta: ParamVector,
    lam: ParamVector,
    layout: ClusterLayout,
    assignment: PrecisionAssignment,
    alphas: dict[str, float],
    cfg: ADMMConfig,
):
    """Stage B across clusters; returns (alphas, codes, dequantized reference)."""
    assignment.require_covers(layout)
    target = theta.add(lam)
    new_alphas: dict[str, float] = {}
    codes: dict[str, np.ndarray] = {}
    f_ref = theta.zeros_like()
    for c in layout.clusters:
        x = layout.gather(target, c.cluster_id)
        alpha, v, _ = inner_loop_update(
            x,
            assignment.bits[c.cluster_id],
            alphas.get(c.cluster_id, 1.0),
            cfg.max_inner,
            cfg.inner_tol,
        )
        new_alphas[c.cluster_id] = alpha
        codes[c.cluster_id] = v
        layout.scatter(f_ref, c.cluster_id, alpha * v.astype(np.float64))
    return new_alphas, codes, f_ref


# -- stage A: full-precision weights ------------------------------------------


def augmented_loss(
    model, theta: ParamVector, f_theta: ParamVector, lam: ParamVector, gamma: float, batch
) -> float:
    """F_ce(theta) + (gamma/2)||theta - f + lam||^2 - (gamma/2)||lam||^2."""
    ce = ad.loss_only(model, theta, batch)
    resid = theta.sub(f_theta).add(lam)
    return ce + 0.5 * gamma * resid.sq_norm() - 0.5 * gamma * lam.sq_norm()


def _aug_grad(model, theta, f_ref, lam, gamma, batch):
    ce, g = ad.forward_backward(model, theta, batch)
    if gamma != 0.0:
        g = g.add(theta.sub(f_ref).add(lam).scale(gamma))
    return ce, g


def extra_gradient_step(
    model, theta: ParamVector, f_ref: ParamVector, lam: ParamVector, cfg: ADMMConfig, batch
) -> tuple[ParamVector, float]:
    """Two-step lookahead update; both steps start from the incoming weights.

    Returns the updated weights and the cross-entropy at the incoming point.
    """
    ce, g1 = _aug_grad(model, theta, f_ref, lam, cfg.gamma, batch)
    lookahead = theta.add_scaled(g1, -cfg.eta1)
    _, g2 = _aug_grad(model, lookahead, f_ref, lam, cfg.gamma, batch)
    return theta.add_scaled(g2, -cfg.eta2), ce


# -- stage C -------------------------------------------------------------------


def multiplier_update(lam: ParamVector, theta: ParamVector, f_theta: ParamVector) -> ParamVector:
    return lam.add(theta.sub(f_theta))


# -- packaging -----------------------------------------------------------------


def package_quantized(
    spec: ModelSpec,
    layout: ClusterLayout,
    assignment: PrecisionAssignment,
    alphas: dict[str, float],
    codes: dict[str, np.ndarray],
    method: str,
) -> QuantizedModel:
    clusters = {
        c.cluster_id: QuantizedCluster(
            c.cluster_id,
            assignment.bits[c.cluster_id],
            np.float32(alphas[c.cluster_id]),
            codes[c.cluster_id],
        )
        for c in layout.clusters
    }
    return QuantizedModel(spec=spec, clusters=clusters, method=method)


def offline_quantize(
    spec: ModelSpec,
    theta: ParamVector,
    assignment: PrecisionAssignment,
    cfg: ADMMConfig | None = None,
) -> QuantizedModel:
    """Post-training quantization: stage B on trained weights, no gradients."""
    cfg = cfg or ADMMConfig()
    layout = cluster_layout(spec)
    alphas, codes, _ = quantization_update(
        theta, theta.zeros_like(), layout, assignment, {}, cfg
    )
    return package_quantized(spec, layout, assignment, alphas, codes, "offline")


# -- trainers --------------------------------------------------------------------


def _num_steps(cfg: ADMMConfig, n_windows: int) -> int:
    if cfg.steps_per_outer is not None:
        return cfg.steps_per_outer
    return max(1, n_windows // cfg.batch_size)


def _val_ppl(model, params, val_windows, val_mask) -> float:
    return corpus_mod.perplexity_windows(model, params, val_windows, val_mask)


def train_quantized(
    model,
    theta0: ParamVector,
    assignment: PrecisionAssignment,
    train_windows: np.ndarray,
    train_mask: np.ndarray,
    val_windows: np.ndarray,
    val_mask: np.ndarray,
    cfg: ADMMConfig,
    init_state: ADMMState | None = None,
    method_label: str = "admm",
    state_out: dict | None = None,
) -> tuple[QuantizedModel, TrainReport]:
    """Full three-stage loop; returns the packaged model and a report.

    ``init_state`` seeds scales/codes/multipliers (used when fine-tuning a
    stitched mixed-precision model); with ``max_outer == 0`` the seeded (or
    freshly fitted) quantization is returned untouched. ``state_out``, if
    given, receives the final :class:`ADMMState` under the key ``"state"``.
    """
    spec = model.spec
    layout = cluster_layout(spec)
    assignment.require_covers(layout)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    report = TrainReport(method=method_label)

    if init_state is None:
        theta = theta0.clone()
        lam = theta0.zeros_like()
        alphas, codes, f_ref = quantization_update(theta, lam, layout, assignment, {}, cfg)
        state = ADMMState(theta, lam, alphas, codes, f_ref)
    else:
        state = init_state

    ppl0 = _val_ppl(model, _dequant_live(state, layout), val_windows, val_mask)
    report.log(outer=0, train_ce=None, val_ppl=ppl0,
               residual=state.theta.sub(state.f_ref).norm2(),
               alphas=dict(state.alphas))

    best = ppl0
    since_best = 0
    steps = _num_steps(cfg, train_windows.shape[0])
    for k in range(1, cfg.max_outer + 1):
        ce_sum = 0.0
        for _ in range(steps):
            batch = corpus_mod.sample_batch(train_windows, train_mask, cfg.batch_size, rng)
            state.theta, ce = extra_gradient_step(
                model, state.theta, state.f_ref, state.lam, cfg, batch
            )
            ce_sum += ce
        state.alphas, state.codes, f_new = quantization_update(
            state.theta, state.lam, layout, assignment, state.alphas, cfg
        )
        state.lam = multiplier_update(state.lam, state.theta, f_new)
        state.f_ref = f_new
        state.outer = k

        val_ppl = _val_ppl(model, _dequant_live(state, layout), val_windows, val_mask)
        residual = state.theta.sub(state.f_ref).norm2()
        report.log(outer=k, train_ce=ce_sum / steps, val_ppl=val_ppl,
                   residual=residual, alphas=dict(state.alphas))
        if val_ppl > cfg.divergence_factor * ppl0:
            raise TrainingDivergedError(
                f"validation perplexity {val_ppl:.2f} exceeded {cfg.divergence_factor}x initial",
                report=report,
            )
        if val_ppl < best - 1e-12:
            best = val_ppl
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                report.notes.append(f"early stop at outer {k}")
                break

    qm = package_quantized(spec, layout, assignment, state.alphas, state.codes, method_label)
    report.log(outer="final", val_ppl=corpus_mod.perplexity_windows(
        model, qm.param_vector(), val_windows, val_mask))
    if state_out is not None:
        state_out["state"] = state
    return qm, report


def _dequant_live(state: ADMMState, layout: ClusterLayout) -> ParamVector:
    """Training-side dequantized weights (float64 scales)."""
    pv = state.theta.zeros_like()
    for c in layout.clusters:
        layout.scatter(pv, c.cluster_id, state.alphas[c.cluster_id] * state.codes[c.cluster_id].astype(np.float64))
    return pv


@dataclass
class BaselineConfig:
    lr: float = 0.5
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 32
    steps_per_epoch: int | None = None
    patience: int = 3
    seed: int = 0


def train_baseline(
    model,
    theta0: ParamVector,
    train_windows: np.ndarray,
    train_mask: np.ndarray,
    val_windows: np.ndarray,
    val_mask: np.ndarray,
    cfg: BaselineConfig,
) -> tuple[ParamVector, TrainReport]:
    """SGD-with-momentum full-precision training, early stopping on val PPL."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    report = TrainReport(method="baseline")
    theta = theta0.clone()
    velocity = theta0.zeros_like()
    best_theta = theta.clone()
    best = _val_ppl(model, theta, val_windows, val_mask)
    report.log(outer=0, val_ppl=best)
    since_best = 0
    steps = cfg.steps_per_epoch or max(1, train_windows.shape[0] // cfg.batch_size)
    for epoch in range(1, cfg.epochs + 1):
        ce_sum = 0.0
        for _ in range(steps):
            batch = corpus_mod.sample_batch(train_windows, train_mask, cfg.batch_size, rng)
            ce, grads = ad.forward_backward(model, theta, batch)
            ce_sum += ce
            velocity = velocity.scale(cfg.momentum).add_scaled(grads, -cfg.lr)
            theta = theta.add(velocity)
        val_ppl = _val_ppl(model, theta, val_windows, val_mask)
        report.log(outer=epoch, train_ce=ce_sum / steps, val_ppl=val_ppl)
        if val_ppl < best - 1e-12:
            best = val_ppl
            best_theta = theta.clone()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                report.notes.append(f"early stop at epoch {epoch}")
                break
    return best_theta, report


def train_modbp(
    model,
    theta0: ParamVector,
    assignment: PrecisionAssignment,
    train_windows: np.ndarray,
    train_mask: np.ndarray,
    val_windows: np.ndarray,
    val_mask: np.ndarray,
    cfg: ADMMConfig,
) -> tuple[QuantizedModel, TrainReport]:
    """Straight-through comparison trainer.

    Per step the forward pass uses the quantized weights (one scale/code
    alternation per cluster, no multipliers) while the gradient updates the
    full-precision weights.
    """
    spec = model.spec
    layout = cluster_layout(spec)
    assignment.require_covers(layout)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    report = TrainReport(method="modbp")
    theta = theta0.clone()
    alphas: dict[str, float] = {c.cluster_id: 1.0 for c in layout.clusters}

    def quantize_now(theta_now):
        fq = theta_now.zeros_like()
        for c in layout.clusters:
            x = layout.gather(theta_now, c.cluster_id)
            v = quantize_nearest(x, QuantTable(assignment.bits[c.cluster_id], alphas[c.cluster_id]))
            try:
                alphas[c.cluster_id] = fit_scale(x, v)
                v = quantize_nearest(x, QuantTable(assignment.bits[c.cluster_id], alphas[c.cluster_id]))
            except DegenerateCodesError:
                pass
            layout.scatter(fq, c.cluster_id, alphas[c.cluster_id] * v.astype(np.float64))
        return fq

    ppl0 = _val_ppl(model, quantize_now(theta), val_windows, val_mask)
    report.log(outer=0, val_ppl=ppl0)
    steps = _num_steps(cfg, train_windows.shape[0])
    for k in range(1, cfg.max_outer + 1):
        for _ in range(steps):
            batch = corpus_mod.sample_batch(train_windows, train_mask, cfg.batch_size, rng)
            fq = quantize_now(theta)
            _, grads = ad.forward_backward(model, fq, batch)
            theta = theta.add_scaled(grads, -cfg.eta1)
        val_ppl = _val_ppl(model, quantize_now(theta), val_windows, val_mask)
        report.log(outer=k, val_ppl=val_ppl)
        if val_ppl > cfg.divergence_factor * ppl0:
            raise TrainingDivergedError("modbp diverged", report=report)

    alphas_f, codes_f, _ = quantization_update(theta, theta.zeros_like(), layout, assignment, alphas, cfg)
    qm = package_quantized(spec, layout, assignment, alphas_f, codes_f, "modbp")
    report.log(outer="final", val_ppl=corpus_mod.perplexity_windows(
        model, qm.param_vector(), val_windows, val_mask))
    return qm, report
