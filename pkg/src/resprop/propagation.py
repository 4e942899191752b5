"""Numerical verification of signal propagation through unit chains.

Three checks, all operating on within-stage slices [l, L) of a built network
(dimension-changing boundary units are excluded, since the additive algebra
only holds where the shortcut preserves shape):

* ``telescope_check``: how far x_L deviates from x_l plus the sum of traced
  branch outputs. Zero (to rounding) for identity shortcuts with an identity
  after-addition function; positive once the merged signal is transformed.
* ``gradient_decompose``: splits dE/dx_l into the part that flows through the
  bare shortcut path and the part that flows through branch weights, by
  re-running backward with every branch contribution in the slice detached.
* ``lambda_product_check``: with constant-scaled shortcuts and zeroed
  branches, the gradient ratio across the slice must equal lambda^(L-l).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, backward, fresh_graph
from .network import Network
from .ops import softmax_xent
from .units import ConstantScale, UnitTrace


class SliceError(ValueError):
    pass


@dataclass
class StageSlice:
    """Contiguous run [lo, hi) of same-shape units inside one stage."""

    stage: int
    lo: int
    hi: int
    traces: list[UnitTrace]


@dataclass
class GradDecomposition:
    total: np.ndarray           # dE/dx_l
    direct: np.ndarray          # dE/dx_l with branch contributions detached
    through_weights: np.ndarray  # total - direct


def validate_slice(net: Network, l: int, L: int) -> int:
    """Check [l, L) stays inside one stage and crosses no shape-changing unit.

    Returns the stage index. l == L is allowed anywhere in range.
    """
    units = net.unit_list()
    if not 0 <= l <= L <= len(units):
        raise SliceError(f"slice [{l}, {L}) out of range for {len(units)} units")
    if l == L:
        return units[min(l, len(units) - 1)][0] if units else 0
    stages = {units[i][0] for i in range(l, L)}
    if len(stages) > 1:
        raise SliceError(f"slice [{l}, {L}) crosses a stage boundary (stages {sorted(stages)})")
    for i in range(l, L):
        _, cfg, _ = units[i]
        if cfg.stride != 1 or cfg.in_channels != cfg.out_channels:
            raise SliceError(
                f"unit {i} changes shape ({cfg.in_channels}->{cfg.out_channels}, stride {cfg.stride}); "
                "propagation checks require same-shape slices")
    return units[l][0]


def stage_slices(net: Network) -> list[tuple[int, int, int]]:
    """Largest valid (stage, lo, hi) slice per stage."""
    out = []
    units = net.unit_list()
    i = 0
    for s in range(len(net.stages)):
        n = len(net.stages[s])
        lo = i
        if n and (net.stages[s][0][0].stride != 1
                  or net.stages[s][0][0].in_channels != net.stages[s][0][0].out_channels):
            lo = i + 1
        out.append((s, lo, i + n))
        i += n
    return out


def telescope_residual_from_traces(traces: list[UnitTrace], l: int, L: int) -> float:
    """Residual computed from captured traces (no extra forward pass)."""
    if l == L:
        return 0.0
    x_L = traces[L - 1].x_out.data
    acc = traces[l].x_in.data.copy()
    for i in range(l, L):
        acc += traces[i].branch_out.data
    return float(np.linalg.norm(x_L - acc) / np.linalg.norm(x_L))


def telescope_check(net: Network, x: Tensor, l: int, L: int, mode: str = "eval") -> float:
    """Relative residual ||x_L - (x_l + sum of branch outputs)||_2 / ||x_L||_2."""
    validate_slice(net, l, L)
    if l == L:
        return 0.0
    with fresh_graph():
        _, traces = net.forward(x, mode, with_traces=True)
    return telescope_residual_from_traces(traces, l, L)


def gradient_decompose(net: Network, x: Tensor, labels: np.ndarray, l: int, L: int,
                       mode: str = "eval", seed: int = 0) -> GradDecomposition:
    """Two-term split of dE/dx_l with a softmax cross-entropy head at the output.

    Both passes replay the same forward (the seed pins any stochastic
    shortcut), so the only difference is which gradients are allowed to flow.
    """
    validate_slice(net, l, L)
    with fresh_graph():
        logits, traces = net.forward(x, mode, with_traces=True, rng=np.random.default_rng(seed))
        backward(softmax_xent(logits, labels))
        total = traces[l].x_in.grad.copy()
    with fresh_graph():
        logits, traces = net.forward(x, mode, with_traces=True, rng=np.random.default_rng(seed))
        blocked = [traces[i].branch_out for i in range(l, L)]
        backward(softmax_xent(logits, labels), blocked=blocked)
        direct = traces[l].x_in.grad.copy()
    return GradDecomposition(total=total, direct=direct, through_weights=total - direct)


def lambda_product_check(net: Network, x: Tensor, labels: np.ndarray, l: int, L: int,
                         mode: str = "eval") -> float:
    """Measured gradient-norm ratio ||dE/dx_l|| / ||dE/dx_L|| across the slice.

    Requires every unit in [l, L) to carry the same constant-scale shortcut
    with positive lambda and a branch whose traced output is exactly zero.
    """
    validate_slice(net, l, L)
    units = net.unit_list()
    lams = set()
    for i in range(l, L):
        _, cfg, _ = units[i]
        if not isinstance(cfg.shortcut, ConstantScale):
            raise SliceError(f"unit {i} has shortcut {type(cfg.shortcut).__name__}; "
                             "the scaling law check needs constant-scale shortcuts")
        lams.add(cfg.shortcut.lam)
    if len(lams) > 1:
        raise SliceError(f"slice mixes scale factors {sorted(lams)}; a uniform factor is required")
    lam = lams.pop() if lams else 1.0
    if lam <= 0:
        raise SliceError(f"scale factor must be positive, got {lam}")

    with fresh_graph():
        logits, traces = net.forward(x, mode, with_traces=True)
        for i in range(l, L):
            peak = float(np.abs(traces[i].branch_out.data).max())
            if peak != 0.0:
                raise SliceError(f"branch output of unit {i} is not zeroed (max abs {peak:g}); "
                                 "zero the final branch convs first")
        backward(softmax_xent(logits, labels))
        g_l = traces[l].x_in.grad
        g_L = traces[L - 1].x_out.grad
    return float(np.linalg.norm(g_l) / np.linalg.norm(g_L))


def signal_magnitude_profile(net: Network, x: Tensor, labels: np.ndarray | None = None,
                             mode: str = "eval") -> list[dict]:
    """Per-unit L2 norms of the input, branch, and shortcut signals.

    When labels are given, a backward pass also fills in the gradient norm at
    each unit input.
    """
    with fresh_graph():
        logits, traces = net.forward(x, mode, with_traces=True)
        if labels is not None:
            backward(softmax_xent(logits, labels))
        rows = []
        for i, tr in enumerate(traces):
            g = tr.x_in.grad if labels is not None else None
            rows.append({
                "unit_index": i,
                "x_norm": float(np.linalg.norm(tr.x_in.data)),
                "F_norm": float(np.linalg.norm(tr.branch_out.data)),
                "h_norm": float(np.linalg.norm(tr.shortcut_out.data)),
                "grad_norm": float(np.linalg.norm(g)) if g is not None else None,
            })
    return rows


def zero_branches(net: Network) -> None:
    """Zero the final conv of every unit branch, forcing all branch outputs to 0."""
    for _, _, params in net.unit_list():
        params.convs[-1].weight.data = np.zeros_like(params.convs[-1].weight.data)


def write_profile_csv(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("unit_index,x_norm,F_norm,h_norm,grad_norm\n")
        for r in rows:
            grad = "" if r["grad_norm"] is None else f"{r['grad_norm']:.9g}"
            f.write(f"{r['unit_index']},{r['x_norm']:.9g},{r['F_norm']:.9g},{r['h_norm']:.9g},{grad}\n")
