"""SGD training loop with the reference hyper-parameter schedule.

Schedule: lr 0.1 divided by 10 at 32k and 48k iterations, 64k total, with an
optional warm-up at lr 0.01 for the first 400 iterations; momentum 0.9, weight
decay 1e-4, batch 128. Weight decay applies to conv/FC weights only (BN
gamma/beta and gate biases are exempt) unless uniform decay is requested.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, backward, no_record, reset_graph
from .data import Dataset
from .network import Network
from .ops import softmax_xent


class TrainError(RuntimeError):
    pass


class TrainDivergence(TrainError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainConfig:
    lr_initial: float = 0.1
    warmup: bool = True
    warmup_lr: float = 0.01
    warmup_iters: int = 400
    decay_points: tuple[int, ...] = (32000, 48000)
    decay_factor: float = 0.1
    total_iters: int = 64000
    weight_decay: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 128
    seed: int = 0
    augment: bool = True
    uniform_decay: bool = False
    log_every: int = 100
    eval_every: int = 1000

    def __post_init__(self):
        if list(self.decay_points) != sorted(set(self.decay_points)):
            raise TrainError(f"decay points must be strictly increasing, got {self.decay_points}")


@dataclass
class MetricsRow:
    iter: int
    epoch: int
    lr: float
    train_loss: float
    train_err_pct: float
    test_err_pct: float | None
    wall_ms: float


def lr_at(it: int, cfg: TrainConfig) -> float:
    """Piecewise-constant learning rate at a given iteration."""
    if it < 0:
        raise TrainError(f"iteration must be >= 0, got {it}")
    if cfg.warmup and it < cfg.warmup_iters:
        return cfg.warmup_lr
    lr = cfg.lr_initial
    for point in cfg.decay_points:
        if it >= point:
            lr *= cfg.decay_factor
    return lr


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
             state: dict[str, np.ndarray], lr: float, momentum: float,
             weight_decay: float, decay_names: set[str] | None = None) -> None:
    """Momentum SGD: v <- momentum*v + grad + wd*param; param <- param - lr*v.

    ``decay_names`` restricts weight decay to the named parameters; None
    applies it uniformly.
    """
    if lr <= 0:
        raise TrainError(f"learning rate must be positive, got {lr}")
    for name, t in params.items():
        g = grads.get(name)
        if g is None:
            raise TrainError(f"gradient missing for parameter {name!r}")
        v = state.get(name)
        if v is None:
            v = np.zeros_like(t.data)
            state[name] = v
        v *= momentum
        v += g
        if weight_decay and (decay_names is None or name in decay_names):
            v += weight_decay * t.data
        t.data = t.data - t.data.dtype.type(lr) * v


def pad_crop(image: np.ndarray, oy: int, ox: int, pad: int = 4) -> np.ndarray:
    """Crop the original size out of a zero-padded image at offset (oy, ox)."""
    _, h, w = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    return padded[:, oy:oy + h, ox:ox + w]


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1]


def augment(image: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Translation + flip: zero-pad, random crop, horizontal flip with p=0.5."""
    oy, ox = rng.integers(0, 2 * pad + 1, size=2)
    out = pad_crop(image, int(oy), int(ox), pad)
    if rng.random() < 0.5:
        out = hflip(out)
    return np.ascontiguousarray(out)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches; reshuffles each epoch, drops remainders."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start:start + batch_size]


def evaluate(net: Network, ds: Dataset, batch_size: int = 500) -> float:
    """Test error percentage with BN in eval mode and no augmentation."""
    wrong = 0
    with no_record():
        for start in range(0, ds.n, batch_size):
            stop = min(start + batch_size, ds.n)
            x = Tensor(ds.images[start:stop].astype(net.dtype))
            logits, _ = net.forward(x, mode="eval")
            pred = logits.data.argmax(axis=1)
            wrong += int((pred != ds.labels[start:stop]).sum())
    return 100.0 * wrong / ds.n


def train(net: Network, train_set: Dataset, cfg: TrainConfig,
          test_set: Dataset | None = None, deterministic: bool = False):
    """Yield a MetricsRow every ``log_every`` iterations (and at the end).

    Evaluation runs every ``eval_every`` iterations and at the final row;
    other rows carry test_err_pct=None. In deterministic mode wall_ms is
    reported as 0 so the metrics stream is bit-reproducible.
    """
    ss = np.random.SeedSequence(cfg.seed)
    shuffle_rng, augment_rng, dropout_rng = [np.random.default_rng(s) for s in ss.spawn(3)]
    batches = _batches(train_set.n, cfg.batch_size, shuffle_rng)

    state: dict[str, np.ndarray] = {}
    grads_seen = 0
    loss_acc = 0.0
    err_acc = 0
    t0 = time.perf_counter()

    for it in range(cfg.total_iters):
        idx = next(batches)
        images = train_set.images[idx]
        if cfg.augment:
            images = np.stack([augment(im, augment_rng) for im in images])
        x = Tensor(images.astype(net.dtype))
        labels = train_set.labels[idx]

        reset_graph()
        logits, _ = net.forward(x, mode="train", rng=dropout_rng)
        loss = softmax_xent(logits, labels)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise TrainDivergence(f"non-finite training loss at iteration {it}")
        net.zero_grads()
        backward(loss)
        lr = lr_at(it, cfg)
        sgd_step(net.params, {k: t.grad for k, t in net.params.items()}, state,
                 lr, cfg.momentum, cfg.weight_decay,
                 None if cfg.uniform_decay else net.decay)

        loss_acc += loss_val
        err_acc += int((logits.data.argmax(axis=1) != labels).sum())
        grads_seen += 1

        last = it == cfg.total_iters - 1
        if (it + 1) % cfg.log_every == 0 or last:
            test_err = None
            if test_set is not None and ((it + 1) % cfg.eval_every == 0 or last):
                test_err = evaluate(net, test_set)
            wall = 0.0 if deterministic else (time.perf_counter() - t0) * 1000.0
            yield MetricsRow(
                iter=it + 1,
                epoch=(it + 1) * cfg.batch_size // train_set.n,
                lr=lr,
                train_loss=loss_acc / grads_seen,
                train_err_pct=100.0 * err_acc / (grads_seen * cfg.batch_size),
                test_err_pct=test_err,
                wall_ms=wall,
            )
            loss_acc = 0.0
            err_acc = 0
            grads_seen = 0
    reset_graph()


METRICS_HEADER = "iter,epoch,lr,train_loss,train_err,test_err,wall_ms"


def format_metrics_row(row: MetricsRow) -> str:
    test = "" if row.test_err_pct is None else f"{row.test_err_pct:.4f}"
    return (f"{row.iter},{row.epoch},{row.lr:.6g},{row.train_loss:.6f},"
            f"{row.train_err_pct:.4f},{test},{row.wall_ms:.1f}")


def read_metrics_csv(path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header != METRICS_HEADER:
            raise TrainError(f"unexpected metrics header {header!r}")
        for line in f:
            it, epoch, lr, loss, terr, test, wall = line.strip().split(",")
            rows.append({
                "iter": int(it), "epoch": int(epoch), "lr": float(lr),
                "train_loss": float(loss), "train_err": float(terr),
                "test_err": float(test) if test else None, "wall_ms": float(wall),
            })
    return rows
