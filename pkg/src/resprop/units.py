"""Residual units in every studied variant.

A unit computes ``x_out = f(h(x_in) + F(x_in))`` where ``h`` is one of seven
shortcut transforms, ``F`` is a basic / bottleneck / single-layer conv branch,
and ``f`` is fixed by the activation ordering. The five orderings permute the
same conv/BN/ReLU components; the two pre-activation orderings make ``f`` the
identity.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, add, affine, mul, scale
from .ops import (
    BatchNormParams,
    Conv2dParams,
    GateParams,
    batchnorm,
    conv2d,
    dropout,
    relu,
    sigmoid,
    zero_pad_shortcut,
)


class UnitConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Shortcut catalog
# ---------------------------------------------------------------------------

class ShortcutKind:
    """Base class for the shortcut-transform catalog."""


@dataclass(frozen=True)
class Identity(ShortcutKind):
    pass


@dataclass(frozen=True)
class ConstantScale(ShortcutKind):
    lam: float = 0.5


@dataclass(frozen=True)
class ExclusiveGate(ShortcutKind):
    """Highway-style gate: branch scaled by g(x), shortcut by 1-g(x)."""

    init_bias: float = 0.0


@dataclass(frozen=True)
class ShortcutOnlyGate(ShortcutKind):
    """Only the shortcut is scaled, by 1-g(x); the branch passes unscaled."""

    init_bias: float = 0.0


@dataclass(frozen=True)
class Conv1x1(ShortcutKind):
    pass


@dataclass(frozen=True)
class DropoutShortcut(ShortcutKind):
    rate: float = 0.5


@dataclass(frozen=True)
class Projection(ShortcutKind):
    """1x1 strided conv; the only shortcut allowed where dimensions change."""


@dataclass(frozen=True)
class ZeroPadBoundary(ShortcutKind):
    """Parameter-free boundary shortcut: strided subsample + channel zero-pad."""


GATED_KINDS = (ExclusiveGate, ShortcutOnlyGate)
BOUNDARY_KINDS = (Projection, ZeroPadBoundary)


class ActivationOrder(enum.Enum):
    ORIGINAL = "original"
    BN_AFTER_ADD = "bn-after-add"
    RELU_BEFORE_ADD = "relu-before-add"
    RELU_ONLY_PREACT = "relu-only-preact"
    FULL_PREACT = "full-preact"


PREACT_ORDERS = (ActivationOrder.RELU_ONLY_PREACT, ActivationOrder.FULL_PREACT)


class BranchShape(enum.Enum):
    BASIC = "basic"           # two 3x3 convs
    BOTTLENECK = "bottleneck"  # 1x1 reduce, 3x3, 1x1 restore
    SINGLE_LAYER = "single"    # one 3x3 conv


@dataclass
class ResidualUnitConfig:
    shortcut: ShortcutKind
    order: ActivationOrder
    branch: BranchShape
    in_channels: int
    out_channels: int
    stride: int = 1
    branch_scale: float | None = None
    mid_channels: int | None = None
    # Set by the network builder on the first unit of a pre-activation net:
    # its leading activation lives right after the stem conv instead.
    hoist_first_activation: bool = False


@dataclass
class UnitParams:
    convs: list[Conv2dParams]
    bns: list[BatchNormParams]
    post_bn: BatchNormParams | None = None
    gate: GateParams | None = None
    shortcut_conv: Conv2dParams | None = None


@dataclass
class UnitTrace:
    """Per-unit signals captured during a forward pass."""

    x_in: Tensor
    branch_out: Tensor     # branch contribution as merged (after gating / scaling)
    shortcut_out: Tensor
    pre_merge_sum: Tensor
    x_out: Tensor


def he_std(kernel: int, in_channels: int) -> float:
    """He-normal std with fan-in convention: sqrt(2 / (k*k*in_channels))."""
    return float(np.sqrt(2.0 / (kernel * kernel * in_channels)))


def branch_conv_plan(cfg: ResidualUnitConfig) -> list[tuple[int, int, int, int]]:
    """(in_ch, out_ch, kernel, stride) for each branch conv, in order."""
    ic, oc, s = cfg.in_channels, cfg.out_channels, cfg.stride
    if cfg.branch is BranchShape.BASIC:
        return [(ic, oc, 3, s), (oc, oc, 3, 1)]
    if cfg.branch is BranchShape.BOTTLENECK:
        mid = cfg.mid_channels if cfg.mid_channels is not None else oc // 4
        if mid < 1:
            raise UnitConfigError(f"bottleneck needs out_channels >= 4, got {oc}")
        return [(ic, mid, 1, s), (mid, mid, 3, 1), (mid, oc, 1, 1)]
    return [(ic, oc, 3, s)]


def validate_unit_config(cfg: ResidualUnitConfig) -> None:
    if cfg.in_channels < 1 or cfg.out_channels < 1:
        raise UnitConfigError(f"channel counts must be positive, got {cfg.in_channels}->{cfg.out_channels}")
    if cfg.stride not in (1, 2):
        raise UnitConfigError(f"unit stride must be 1 or 2, got {cfg.stride}")
    if not isinstance(cfg.order, ActivationOrder) or not isinstance(cfg.branch, BranchShape):
        raise UnitConfigError("order/branch must come from the ActivationOrder/BranchShape catalogs")
    changes_shape = cfg.stride != 1 or cfg.in_channels != cfg.out_channels
    if changes_shape and not isinstance(cfg.shortcut, BOUNDARY_KINDS):
        raise UnitConfigError(
            f"stride {cfg.stride} with channels {cfg.in_channels}->{cfg.out_channels} requires a "
            f"Projection (or ZeroPadBoundary) shortcut, got {type(cfg.shortcut).__name__}")
    if isinstance(cfg.shortcut, DropoutShortcut) and not 0.0 <= cfg.shortcut.rate < 1.0:
        raise UnitConfigError(f"dropout shortcut rate must lie in [0,1), got {cfg.shortcut.rate}")
    if cfg.hoist_first_activation and cfg.order not in PREACT_ORDERS:
        raise UnitConfigError("hoist_first_activation only applies to pre-activation orders")


def _bn_channel_plan(cfg: ResidualUnitConfig) -> tuple[list[int], int | None]:
    """Channel widths for the branch BNs plus the after-addition BN if any."""
    plan = branch_conv_plan(cfg)
    order = cfg.order
    if order is ActivationOrder.FULL_PREACT:
        chans = [ic for (ic, _, _, _) in plan]
        if cfg.hoist_first_activation:
            chans = chans[1:]
        return chans, None
    if order is ActivationOrder.RELU_ONLY_PREACT:
        return [oc for (_, oc, _, _) in plan], None
    if order is ActivationOrder.BN_AFTER_ADD:
        return [oc for (_, oc, _, _) in plan[:-1]], cfg.out_channels
    # ORIGINAL and RELU_BEFORE_ADD: one BN after every conv.
    return [oc for (_, oc, _, _) in plan], None


def _make_bn(channels: int, dtype) -> BatchNormParams:
    return BatchNormParams(
        gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
        running_mean=np.zeros(channels, dtype=np.float64),
        running_var=np.ones(channels, dtype=np.float64),
    )


def build_unit(cfg: ResidualUnitConfig, rng: np.random.Generator, dtype=np.float64) -> UnitParams:
    """He-initialized parameters for one unit: conv weights ~ N(0, sqrt(2/fan_in)),
    BN gamma=1 beta=0, gate bias at its configured init value."""
    validate_unit_config(cfg)

    convs = []
    for ic, oc, k, s in branch_conv_plan(cfg):
        w = rng.normal(0.0, he_std(k, ic), size=(oc, ic, k, k)).astype(dtype)
        convs.append(Conv2dParams(Tensor(w, requires_grad=True), stride=s, padding=k // 2))

    bn_chans, post_chan = _bn_channel_plan(cfg)
    bns = [_make_bn(c, dtype) for c in bn_chans]
    post_bn = _make_bn(post_chan, dtype) if post_chan is not None else None

    gate = None
    if isinstance(cfg.shortcut, GATED_KINDS):
        c = cfg.in_channels
        gw = rng.normal(0.0, he_std(1, c), size=(c, c, 1, 1)).astype(dtype)
        gate = GateParams(
            weight=Tensor(gw, requires_grad=True),
            bias=Tensor(np.full(c, cfg.shortcut.init_bias, dtype=dtype), requires_grad=True),
        )

    shortcut_conv = None
    if isinstance(cfg.shortcut, (Conv1x1, Projection)):
        w = rng.normal(0.0, he_std(1, cfg.in_channels),
                       size=(cfg.out_channels, cfg.in_channels, 1, 1)).astype(dtype)
        shortcut_conv = Conv2dParams(Tensor(w, requires_grad=True), stride=cfg.stride, padding=0)

    return UnitParams(convs=convs, bns=bns, post_bn=post_bn, gate=gate, shortcut_conv=shortcut_conv)


def gate_coefficients(gate: GateParams, x: Tensor):
    """g(x) = sigmoid(1x1 conv + bias) and its complement 1 - g(x)."""
    pre = conv2d(x, Conv2dParams(gate.weight, bias=gate.bias, stride=1, padding=0))
    g = sigmoid(pre)
    return g, affine(g, -1.0, 1.0)


def shortcut_apply(kind: ShortcutKind, params: UnitParams, x: Tensor, mode: str = "train",
                   rng: np.random.Generator | None = None) -> Tensor:
    """Apply one shortcut transform to ``x``."""
    if isinstance(kind, Identity):
        return x
    if isinstance(kind, ConstantScale):
        return scale(x, kind.lam)
    if isinstance(kind, GATED_KINDS):
        _, one_minus_g = gate_coefficients(params.gate, x)
        return mul(one_minus_g, x)
    if isinstance(kind, (Conv1x1, Projection)):
        return conv2d(x, params.shortcut_conv)
    if isinstance(kind, DropoutShortcut):
        return dropout(x, kind.rate, mode, rng)
    if isinstance(kind, ZeroPadBoundary):
        # The branch's first conv carries the unit stride; its last conv fixes the width.
        return zero_pad_shortcut(x, params.convs[0].stride, params.convs[-1].weight.shape[0])
    raise UnitConfigError(f"unknown shortcut kind {type(kind).__name__}")


def _branch_forward(cfg: ResidualUnitConfig, params: UnitParams, x: Tensor, mode: str):
    """Run the weighted branch; returns (branch_out, preactivated_signal)."""
    order = cfg.order
    convs = params.convs
    bns = params.bns
    k_total = len(convs)

    if order is ActivationOrder.FULL_PREACT:
        if cfg.hoist_first_activation:
            a0 = x
            bn_at = 0
        else:
            a0 = relu(batchnorm(x, bns[0], mode))
            bn_at = 1
        t = conv2d(a0, convs[0])
        for k in range(1, k_total):
            t = relu(batchnorm(t, bns[bn_at], mode))
            bn_at += 1
            t = conv2d(t, convs[k])
        return t, a0

    if order is ActivationOrder.RELU_ONLY_PREACT:
        a0 = x if cfg.hoist_first_activation else relu(x)
        t = a0
        for k in range(k_total):
            t = conv2d(t, convs[k])
            t = batchnorm(t, bns[k], mode)
            if k < k_total - 1:
                t = relu(t)
        return t, a0

    if order is ActivationOrder.ORIGINAL:
        t = x
        for k in range(k_total):
            t = conv2d(t, convs[k])
            t = batchnorm(t, bns[k], mode)
            if k < k_total - 1:
                t = relu(t)
        return t, x

    if order is ActivationOrder.BN_AFTER_ADD:
        t = x
        for k in range(k_total):
            t = conv2d(t, convs[k])
            if k < k_total - 1:
                t = batchnorm(t, bns[k], mode)
                t = relu(t)
        return t, x

    # RELU_BEFORE_ADD: conv/BN/ReLU for every layer, so the branch output is
    # non-negative and the after-addition function is the identity.
    t = x
    for k in range(k_total):
        t = conv2d(t, convs[k])
        t = batchnorm(t, bns[k], mode)
        t = relu(t)
    return t, x


def unit_forward(cfg: ResidualUnitConfig, params: UnitParams, x: Tensor, mode: str = "train",
                 rng: np.random.Generator | None = None) -> tuple[Tensor, UnitTrace]:
    """One residual unit: shortcut + branch, merge, after-addition function."""
    if x.shape[1] != cfg.in_channels:
        raise UnitConfigError(f"unit expects {cfg.in_channels} input channels, got {x.shape[1]}")

    branch, preact = _branch_forward(cfg, params, x, mode)

    if isinstance(cfg.shortcut, GATED_KINDS):
        g, one_minus_g = gate_coefficients(params.gate, x)
        h = mul(one_minus_g, x)
        if isinstance(cfg.shortcut, ExclusiveGate):
            branch = mul(g, branch)
    elif isinstance(cfg.shortcut, Projection) and cfg.order in PREACT_ORDERS:
        # Projection shortcuts read the pre-activated signal in pre-activation nets.
        h = conv2d(preact, params.shortcut_conv)
    else:
        h = shortcut_apply(cfg.shortcut, params, x, mode, rng)

    if cfg.branch_scale is not None:
        branch = scale(branch, cfg.branch_scale)

    y = add(h, branch)

    if cfg.order is ActivationOrder.ORIGINAL:
        out = relu(y)
    elif cfg.order is ActivationOrder.BN_AFTER_ADD:
        out = relu(batchnorm(y, params.post_bn, mode))
    else:
        out = y

    return out, UnitTrace(x_in=x, branch_out=branch, shortcut_out=h, pre_merge_sum=y, x_out=out)


def unit_param_tensors(params: UnitParams) -> list[tuple[str, Tensor, bool]]:
    """(name, tensor, gets_weight_decay) triples for every trainable tensor."""
    out: list[tuple[str, Tensor, bool]] = []
    for i, c in enumerate(params.convs):
        out.append((f"conv{i}.weight", c.weight, True))
        if c.bias is not None:
            out.append((f"conv{i}.bias", c.bias, False))
    for i, bn in enumerate(params.bns):
        out.append((f"bn{i}.gamma", bn.gamma, False))
        out.append((f"bn{i}.beta", bn.beta, False))
    if params.post_bn is not None:
        out.append(("post_bn.gamma", params.post_bn.gamma, False))
        out.append(("post_bn.beta", params.post_bn.beta, False))
    if params.gate is not None:
        out.append(("gate.weight", params.gate.weight, True))
        out.append(("gate.bias", params.gate.bias, False))
    if params.shortcut_conv is not None:
        out.append(("shortcut.weight", params.shortcut_conv.weight, True))
    return out


def unit_state_arrays(params: UnitParams) -> list[tuple[str, np.ndarray]]:
    """(name, array) pairs for the unit's non-trainable running statistics."""
    out: list[tuple[str, np.ndarray]] = []
    for i, bn in enumerate(params.bns):
        out.append((f"bn{i}.running_mean", bn.running_mean))
        out.append((f"bn{i}.running_var", bn.running_var))
    if params.post_bn is not None:
        out.append(("post_bn.running_mean", params.post_bn.running_mean))
        out.append(("post_bn.running_var", params.post_bn.running_var))
    return out


# ---------------------------------------------------------------------------
# Asymmetric after-addition activation and its pre-activation rewiring
# ---------------------------------------------------------------------------

@dataclass
class AsymmetricUnit:
    """One step of the asymmetric form y <- y + F(act(y)) where the activation
    (BN then ReLU) touches only the branch input, never the merged signal."""

    act_bn: BatchNormParams
    conv1: Conv2dParams
    mid_bn: BatchNormParams
    conv2: Conv2dParams


@dataclass
class AsymmetricChain:
    channels: int
    units: list[AsymmetricUnit] = field(default_factory=list)


def build_asymmetric_chain(n_units: int, channels: int, rng: np.random.Generator,
                           dtype=np.float64) -> AsymmetricChain:
    if n_units < 1:
        raise UnitConfigError(f"chain needs at least one unit, got {n_units}")
    chain = AsymmetricChain(channels=channels)
    for _ in range(n_units):
        w1 = rng.normal(0.0, he_std(3, channels), size=(channels, channels, 3, 3)).astype(dtype)
        w2 = rng.normal(0.0, he_std(3, channels), size=(channels, channels, 3, 3)).astype(dtype)
        chain.units.append(AsymmetricUnit(
            act_bn=_make_bn(channels, dtype),
            conv1=Conv2dParams(Tensor(w1, requires_grad=True), stride=1, padding=1),
            mid_bn=_make_bn(channels, dtype),
            conv2=Conv2dParams(Tensor(w2, requires_grad=True), stride=1, padding=1),
        ))
    return chain


def asymmetric_chain_forward(chain: AsymmetricChain, x: Tensor, mode: str = "train") -> Tensor:
    y = x
    for u in chain.units:
        a = relu(batchnorm(y, u.act_bn, mode))
        t = conv2d(a, u.conv1)
        t = relu(batchnorm(t, u.mid_bn, mode))
        t = conv2d(t, u.conv2)
        y = add(y, t)
    return y


def rewire_preactivation(chain: AsymmetricChain) -> list[tuple[ResidualUnitConfig, UnitParams]]:
    """Repackage an asymmetric chain as standard pre-activation units.

    The parameters are shared (same tensors), only the wiring changes: each
    unit's branch-side activation becomes the leading pre-activation of the
    corresponding rewired unit.
    """
    if len(chain.units) == 0:
        raise UnitConfigError("cannot rewire an empty chain")
    c = chain.channels
    rewired = []
    for u in chain.units:
        cfg = ResidualUnitConfig(
            shortcut=Identity(), order=ActivationOrder.FULL_PREACT, branch=BranchShape.BASIC,
            in_channels=c, out_channels=c, stride=1)
        params = UnitParams(convs=[u.conv1, u.conv2], bns=[u.act_bn, u.mid_bn])
        rewired.append((cfg, params))
    return rewired


def chain_forward(units: list[tuple[ResidualUnitConfig, UnitParams]], x: Tensor,
                  mode: str = "train") -> Tensor:
    for cfg, params in units:
        x, _ = unit_forward(cfg, params, x, mode)
    return x
