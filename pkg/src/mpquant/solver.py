"""Budget-constrained bit-width assignment.

Chooses per-cluster bit-widths minimizing total sensitivity subject to a
parameter-count-weighted average-bits budget. Solved exactly by a sparse
dynamic program over achievable total bit counts (one state per reachable
sum); a greedy refinement pass takes over only if the state table would
explode. Ties prefer smaller models, then the lexicographically smallest
choice vector, so results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .models import ClusterLayout
from .quant import BIT_WIDTHS, PrecisionAssignment
from .sensitivity import SensitivityReport

MAX_DP_STATES = 4_000_000


@dataclass(frozen=True)
class BudgetSpec:
    target_avg_bits: float
    hard_cap: bool = True  # False -> minimize |avg - target| first, omega second

    def __post_init__(self):
        if not (1.0 <= self.target_avg_bits <= 8.0):
            raise ConfigError("target average bits must lie in [1, 8]")


def _bit_budget(layout: ClusterLayout, target: float) -> int:
    total = layout.total_count
    return int(np.floor(target * total + 1e-9))


def solve(
    report: SensitivityReport,
    layout: ClusterLayout,
    budget: BudgetSpec,
    bit_set=BIT_WIDTHS,
) -> PrecisionAssignment:
    """Minimize total sensitivity under the average-bits budget."""
    report.require_grid(layout, bit_set)
    clusters = layout.clusters
    counts = [c.count for c in clusters]
    cap = _bit_budget(layout, budget.target_avg_bits)
    if cap < min(bit_set) * sum(counts):
        raise ConfigError(
            f"infeasible budget: {budget.target_avg_bits} avg bits cannot cover "
            f"the minimum {min(bit_set)}-bit assignment"
        )

    # state: total bit-count -> (objective, choice tuple); exact while small.
    states: dict[int, tuple[float, tuple[int, ...]]] = {0: (0.0, ())}
    exact = True
    for c, cnt in zip(clusters, counts):
        nxt: dict[int, tuple[float, tuple[int, ...]]] = {}
        for used, (obj, picks) in states.items():
            for n in sorted(bit_set):
                nu = used + n * cnt
                if budget.hard_cap and nu > cap:
                    continue
                cand = (obj + report.omega(c.cluster_id, n), picks + (n,))
                cur = nxt.get(nu)
                if cur is None or cand < cur:
                    nxt[nu] = cand
        states = nxt
        if not states:
            raise ConfigError("budget admits no assignment")
        if len(states) > MAX_DP_STATES:
            exact = False
            break

    if exact:
        if budget.hard_cap:
            best = min((obj, used, picks) for used, (obj, picks) in states.items())
        else:
            total = layout.total_count
            best = min(
                (abs(used / total - budget.target_avg_bits), obj, used, picks)
                for used, (obj, picks) in states.items()
            )[1:]
        picks = best[-1]
    else:
        picks = _greedy(report, clusters, counts, cap, bit_set)

    return PrecisionAssignment({c.cluster_id: n for c, n in zip(clusters, picks)})


def _greedy(report, clusters, counts, cap, bit_set):
    """Approximate fallback: start at max precision, repeatedly downgrade the
    cluster with the least sensitivity increase per bit saved."""
    order = sorted(bit_set)
    picks = [len(order) - 1] * len(clusters)  # index into order
    used = sum(order[p] * c for p, c in zip(picks, counts))
    while used > cap:
        best = None
        for i, c in enumerate(clusters):
            if picks[i] == 0:
                continue
            cur, nxt = order[picks[i]], order[picks[i] - 1]
            d_obj = report.omega(c.cluster_id, nxt) - report.omega(c.cluster_id, cur)
            saved = (cur - nxt) * counts[i]
            key = (d_obj / saved, -saved, i)
            if best is None or key < best[0]:
                best = (key, i)
        if best is None:
            raise ConfigError("budget admits no assignment")
        i = best[1]
        used -= (order[picks[i]] - order[picks[i] - 1]) * counts[i]
        picks[i] -= 1
    return tuple(order[p] for p in picks)


def assignment_objective(report: SensitivityReport, assignment: PrecisionAssignment) -> float:
    return sum(report.omega(cid, n) for cid, n in assignment.bits.items())


def stitch_state(model, full_params, prototypes, assignment, lam_sources=None):
    """Seed ADMM state from per-cluster prototype scales/codes/multipliers.

    ``lam_sources`` optionally maps bit-width -> ParamVector of multipliers
    saved from the prototype runs; clusters without one start at zero.
    """
    from .admm import ADMMState
    from .models import cluster_layout

    layout = cluster_layout(model.spec)
    assignment.require_covers(layout)
    prototypes.require(set(assignment.bits.values()))
    theta = full_params.clone()
    lam = full_params.zeros_like()
    alphas, codes = {}, {}
    f_ref = full_params.zeros_like()
    for c in layout.clusters:
        n = assignment.bits[c.cluster_id]
        qc = prototypes.models[n].clusters[c.cluster_id]
        alphas[c.cluster_id] = float(qc.scale32)
        codes[c.cluster_id] = qc.codes.copy()
        layout.scatter(f_ref, c.cluster_id, qc.dequantize())
        if lam_sources and n in lam_sources:
            layout.scatter(lam, c.cluster_id, layout.gather(lam_sources[n], c.cluster_id))
    return ADMMState(theta, lam, alphas, codes, f_ref)


def finetune_assignment(
    model,
    full_params,
    prototypes,
    assignment: PrecisionAssignment,
    train_windows,
    train_mask,
    val_windows,
    val_mask,
    cfg=None,
    outers: int = 3,
    lam_sources=None,
):
    """Assemble the mixed model from prototypes, then fine-tune briefly.

    With ``outers == 0`` the stitched model is packaged as-is (bit-exact
    reproducible); otherwise a short ADMM schedule refines codes and scales.
    """
    from dataclasses import replace

    from .admm import ADMMConfig, train_quantized

    cfg = cfg or ADMMConfig()
    cfg = replace(cfg, max_outer=outers)
    state = stitch_state(model, full_params, prototypes, assignment, lam_sources)
    return train_quantized(
        model,
        full_params,
        assignment,
        train_windows,
        train_mask,
        val_windows,
        val_mask,
        cfg,
        init_state=state,
        method_label="finetune",
    )
