"""Assembly of CIFAR-style residual networks from depth / variant parameters.

A network is a 3x3 stem conv (+BN+ReLU), three stages of residual units with
stride-2 first units at stages 2 and 3, and a classifier head (global average
pool + fully connected). Dimension-changing units at stage boundaries always
use a projection shortcut (or the optional zero-padded identity); the
configured ablation shortcut applies to all other units.

Pre-activation nets get the first/last special handling: the first unit's
leading activation is hoisted to sit right after the stem conv, and an extra
BN+ReLU (or plain ReLU) follows the last unit before pooling.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor
from .ops import BatchNormParams, Conv2dParams, batchnorm, conv2d, fully_connected, global_avg_pool, relu
from .units import (
    ActivationOrder,
    BranchShape,
    Identity,
    PREACT_ORDERS,
    Projection,
    ResidualUnitConfig,
    ShortcutKind,
    UnitParams,
    UnitTrace,
    ZeroPadBoundary,
    branch_conv_plan,
    build_unit,
    he_std,
    unit_forward,
    unit_param_tensors,
    unit_state_arrays,
)


class NetworkConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class NetworkConfig:
    depth: int = 20
    branch: BranchShape = BranchShape.BASIC
    shortcut: ShortcutKind = field(default_factory=Identity)
    order: ActivationOrder = ActivationOrder.FULL_PREACT
    widths: tuple[int, int, int] = (16, 32, 64)
    num_classes: int = 10
    input_size: tuple[int, int] = (32, 32)
    branch_scale: float | None = None
    zero_pad_boundary: bool = False


def units_per_stage(depth: int, branch: BranchShape) -> int:
    """Depth arithmetic: 6n+2 basic, 9n+2 bottleneck, 3n+2 single-layer."""
    layers_per_unit = {BranchShape.BASIC: 2, BranchShape.BOTTLENECK: 3, BranchShape.SINGLE_LAYER: 1}[branch]
    per_stage = 3 * layers_per_unit
    if depth < per_stage + 2 or (depth - 2) % per_stage != 0:
        raise NetworkConfigError(
            f"depth {depth} invalid for {branch.value} units: depth must satisfy "
            f"depth = {per_stage}n+2 (e.g. basic 6n+2, bottleneck 9n+2, single 3n+2)")
    return (depth - 2) // per_stage


@dataclass
class Network:
    cfg: NetworkConfig
    dtype: np.dtype
    stem_conv: Conv2dParams
    stem_bn: BatchNormParams
    stages: list[list[tuple[ResidualUnitConfig, UnitParams]]]
    head_bn: BatchNormParams | None
    head_relu: bool
    fc_w: Tensor
    fc_b: Tensor
    params: dict[str, Tensor]
    state: dict[str, np.ndarray]
    decay: set[str]
    layer_table: list[dict]

    def unit_list(self) -> list[tuple[int, ResidualUnitConfig, UnitParams]]:
        """Flat (stage_index, cfg, params) list in forward order."""
        out = []
        for s, stage in enumerate(self.stages):
            for cfg, params in stage:
                out.append((s, cfg, params))
        return out

    def forward(self, x: Tensor, mode: str = "train", with_traces: bool = False,
                rng: np.random.Generator | None = None):
        """Run the network; returns (logits, traces-or-None)."""
        if x.shape[1] != 3:
            raise NetworkConfigError(f"network expects 3 input channels, got {x.shape[1]}")
        t = relu(batchnorm(conv2d(x, self.stem_conv), self.stem_bn, mode))
        traces: list[UnitTrace] | None = [] if with_traces else None
        for stage in self.stages:
            for cfg, params in stage:
                t, tr = unit_forward(cfg, params, t, mode, rng)
                if traces is not None:
                    traces.append(tr)
        if self.head_bn is not None:
            t = relu(batchnorm(t, self.head_bn, mode))
        elif self.head_relu:
            t = relu(t)
        pooled = global_avg_pool(t)
        logits = fully_connected(pooled, self.fc_w, self.fc_b)
        return logits, traces

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    def clone(self) -> "Network":
        return copy.deepcopy(self)


def _stage_channels(cfg: NetworkConfig) -> tuple[list[int], list[int | None]]:
    if cfg.branch is BranchShape.BOTTLENECK:
        return [4 * w for w in cfg.widths], list(cfg.widths)
    return list(cfg.widths), [None, None, None]


def build_network(cfg: NetworkConfig, rng: np.random.Generator | int, dtype=np.float32) -> Network:
    """He-initialized network; rebuilding with the same seed is bit-identical."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    n = units_per_stage(cfg.depth, cfg.branch)
    stage_out, stage_mid = _stage_channels(cfg)
    preact = cfg.order in PREACT_ORDERS

    params: dict[str, Tensor] = {}
    state: dict[str, np.ndarray] = {}
    decay: set[str] = set()
    table: list[dict] = []

    def register(prefix: str, tensors, states) -> None:
        for name, t, dec in tensors:
            full = f"{prefix}.{name}"
            params[full] = t
            if dec:
                decay.add(full)
        for name, arr in states:
            state[f"{prefix}.{name}"] = arr

    h, w = cfg.input_size

    stem_w = rng.normal(0.0, he_std(3, 3), size=(cfg.widths[0], 3, 3, 3)).astype(dtype)
    stem_conv = Conv2dParams(Tensor(stem_w, requires_grad=True), stride=1, padding=1)
    stem_bn = BatchNormParams(
        gamma=Tensor(np.ones(cfg.widths[0], dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros(cfg.widths[0], dtype=dtype), requires_grad=True),
        running_mean=np.zeros(cfg.widths[0], dtype=np.float64),
        running_var=np.ones(cfg.widths[0], dtype=np.float64),
    )
    register("stem", [("conv.weight", stem_conv.weight, True),
                      ("bn.gamma", stem_bn.gamma, False), ("bn.beta", stem_bn.beta, False)],
             [("bn.running_mean", stem_bn.running_mean), ("bn.running_var", stem_bn.running_var)])
    table.append({"name": "stem.conv", "shape": tuple(stem_w.shape),
                  "params": stem_w.size, "flops": 2 * 9 * 3 * cfg.widths[0] * h * w})

    stages: list[list[tuple[ResidualUnitConfig, UnitParams]]] = []
    in_ch = cfg.widths[0]
    for s in range(3):
        out_ch = stage_out[s]
        stage_units: list[tuple[ResidualUnitConfig, UnitParams]] = []
        for u in range(n):
            stride = 2 if (s > 0 and u == 0) else 1
            boundary = stride != 1 or in_ch != out_ch
            if boundary:
                shortcut: ShortcutKind = ZeroPadBoundary() if cfg.zero_pad_boundary else Projection()
            else:
                shortcut = cfg.shortcut
            ucfg = ResidualUnitConfig(
                shortcut=shortcut, order=cfg.order, branch=cfg.branch,
                in_channels=in_ch, out_channels=out_ch, stride=stride,
                branch_scale=None if boundary else cfg.branch_scale,
                mid_channels=stage_mid[s],
                hoist_first_activation=(preact and s == 0 and u == 0),
            )
            uparams = build_unit(ucfg, rng, dtype)
            prefix = f"stage{s + 1}.unit{u + 1}"
            register(prefix, unit_param_tensors(uparams), unit_state_arrays(uparams))
            if stride == 2:
                h, w = (h + 1) // 2, (w + 1) // 2
            for k, (cic, coc, ck, _) in enumerate(branch_conv_plan(ucfg)):
                table.append({"name": f"{prefix}.conv{k}", "shape": (coc, cic, ck, ck),
                              "params": coc * cic * ck * ck, "flops": 2 * ck * ck * cic * coc * h * w})
            if uparams.shortcut_conv is not None:
                sw = uparams.shortcut_conv.weight
                table.append({"name": f"{prefix}.shortcut", "shape": tuple(sw.shape),
                              "params": sw.size, "flops": 2 * out_ch * in_ch * h * w})
            if uparams.gate is not None:
                table.append({"name": f"{prefix}.gate", "shape": tuple(uparams.gate.weight.shape),
                              "params": uparams.gate.weight.size + uparams.gate.bias.size,
                              "flops": 2 * in_ch * in_ch * h * w})
            stage_units.append((ucfg, uparams))
            in_ch = out_ch
        stages.append(stage_units)

    head_bn = None
    head_relu = False
    if cfg.order is ActivationOrder.FULL_PREACT:
        head_bn = BatchNormParams(
            gamma=Tensor(np.ones(in_ch, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(in_ch, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(in_ch, dtype=np.float64),
            running_var=np.ones(in_ch, dtype=np.float64),
        )
        register("head", [("bn.gamma", head_bn.gamma, False), ("bn.beta", head_bn.beta, False)],
                 [("bn.running_mean", head_bn.running_mean), ("bn.running_var", head_bn.running_var)])
    elif cfg.order is ActivationOrder.RELU_ONLY_PREACT:
        head_relu = True

    fc_w = Tensor(rng.normal(0.0, np.sqrt(2.0 / in_ch), size=(in_ch, cfg.num_classes)).astype(dtype),
                  requires_grad=True)
    fc_b = Tensor(np.zeros(cfg.num_classes, dtype=dtype), requires_grad=True)
    params["head.fc.weight"] = fc_w
    params["head.fc.bias"] = fc_b
    decay.add("head.fc.weight")
    table.append({"name": "head.fc", "shape": (in_ch, cfg.num_classes),
                  "params": in_ch * cfg.num_classes + cfg.num_classes,
                  "flops": 2 * in_ch * cfg.num_classes})

    # BN/gate-bias parameter counts, aggregated for the summary.
    bn_like = sum(t.size for name, t in params.items() if name not in decay)
    table.append({"name": "(bn/bias params)", "shape": (), "params": bn_like, "flops": 0})

    return Network(cfg=cfg, dtype=np.dtype(dtype), stem_conv=stem_conv, stem_bn=stem_bn,
                   stages=stages, head_bn=head_bn, head_relu=head_relu, fc_w=fc_w, fc_b=fc_b,
                   params=params, state=state, decay=decay, layer_table=table)


def count_params(net: Network) -> int:
    """Exact count of trainable scalars."""
    return int(sum(t.size for t in net.params.values()))


def count_flops(net: Network) -> int:
    """Per-sample forward multiply-add count (x2), from the layer table."""
    return int(sum(row["flops"] for row in net.layer_table))


def param_summary(net: Network) -> str:
    lines = [f"{'layer':<28}{'shape':<20}{'params':>10}{'flops':>14}"]
    for row in net.layer_table:
        shape = "x".join(str(d) for d in row["shape"]) if row["shape"] else "-"
        lines.append(f"{row['name']:<28}{shape:<20}{row['params']:>10}{row['flops']:>14}")
    lines.append(f"{'total':<28}{'':<20}{count_params(net):>10}{count_flops(net):>14}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Checkpoints: 8-byte magic, 1 version byte, then length-prefixed records of
# (u32 name length, name bytes, u8 ndim, u32 dims..., float64 little-endian data).
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"RESPROPC"
CHECKPOINT_VERSION = 1


def save_checkpoint(net: Network, path) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(bytes([CHECKPOINT_VERSION]))
        for name, arr in _checkpoint_entries(net):
            data = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def _checkpoint_entries(net: Network):
    for name, t in net.params.items():
        yield name, t.data
    for name, arr in net.state.items():
        yield name, arr


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:8]!r}, expected {CHECKPOINT_MAGIC!r}")
    if blob[8] != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob[8]}")
    out: dict[str, np.ndarray] = {}
    pos = 9
    while pos < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        ndim = blob[pos]
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        out[name] = arr.copy()
    return out


def load_checkpoint(net: Network, path) -> None:
    """Load a checkpoint into an already-built network, matching by name."""
    loaded = read_checkpoint(path)
    expected = dict(_checkpoint_entries(net))
    missing = sorted(set(expected) - set(loaded))
    extra = sorted(set(loaded) - set(expected))
    if missing or extra:
        raise CheckpointError(f"checkpoint does not match network: missing={missing[:5]} extra={extra[:5]}")
    for name, t in net.params.items():
        arr = loaded[name]
        if arr.shape != t.data.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {arr.shape} vs network {t.data.shape}")
        t.data = np.ascontiguousarray(arr.astype(net.dtype))
    for name, arr in net.state.items():
        src = loaded[name]
        if src.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {src.shape} vs network {arr.shape}")
        arr[:] = src
