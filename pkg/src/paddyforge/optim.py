"""Plain SGD, the training loop, gradient accumulation, mixed precision,
the learning-rate sweep and the progressive-resizing controller."""
from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from .augment import AugPolicy, augment_batch, mixup_batch
from .data import Dataset, batch_iterator
from .errors import ConfigError, NoValleyError, NumericError
from .evaluation import evaluate
from .loss import cross_entropy, softmax, softmax_xent_grad
from .nn import Network, Parameter, set_trainable
from .tensor import Shape2D

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ResizeSchedule:
    small: Shape2D
    switch_epoch: int
    large: Shape2D

    def __post_init__(self):
        if not self.small <= self.large:
            raise ConfigError(f"large size {self.large} is smaller than small size {self.small}")
        if self.switch_epoch < 0:
            raise ConfigError("switch epoch must be >= 0")

    @classmethod
    def parse(cls, text: str) -> "ResizeSchedule":
        """Parse ``SMALL:EPOCH:LARGE`` such as ``16:3:32`` or ``16x16:3:32x32``."""
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"bad resize schedule {text!r}, expected SMALL:EPOCH:LARGE")
        return cls(Shape2D.parse(parts[0]), int(parts[1]), Shape2D.parse(parts[2]))


@dataclass
class TrainConfig:
    lr: float = 0.01
    batch_size: int = 64
    accum_factor: int = 1
    precision: str = "full"
    epochs: int = 1
    seed: int = 0
    mixup: float | None = None
    aug_policy: AugPolicy = AugPolicy.NONE
    resize_schedule: ResizeSchedule | None = None
    loss_scale: float = 1.0

    def __post_init__(self):
        self.aug_policy = AugPolicy(self.aug_policy)
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ConfigError(f"learning rate must be finite and non-negative, got {self.lr}")
        if self.batch_size < 1 or self.accum_factor < 1:
            raise ConfigError("batch_size and accum_factor must be >= 1")
        if self.batch_size % self.accum_factor:
            raise ConfigError(f"batch size {self.batch_size} is not divisible by accumulation factor {self.accum_factor}")
        if self.precision not in ("full", "mixed"):
            raise ConfigError(f"precision must be 'full' or 'mixed', got {self.precision!r}")
        if self.mixup is not None and self.mixup <= 0:
            raise ConfigError("mixup alpha must be positive")
        if not self.loss_scale > 0:
            raise ConfigError("loss_scale must be positive")

    @property
    def micro_batch_size(self):
        return self.batch_size // self.accum_factor

    def to_dict(self):
        d = asdict(self)
        d["aug_policy"] = self.aug_policy.value
        if self.resize_schedule is not None:
            s = self.resize_schedule
            d["resize_schedule"] = f"{s.small}:{s.switch_epoch}:{s.large}"
        return d

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    wall_seconds: float
    skipped_steps: int = 0


# ---------------------------------------------------------------------------
# steps


def _trainable(params: Iterable[Parameter]):
    return [p for p in params if p.trainable]


def sgd_step(params, lr, half=False):
    """``master -= lr * grad`` for trainable parameters, resync working copies, zero grads."""
    params = list(params)
    for p in _trainable(params):
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {p.name}")
    lr32 = np.float32(lr)
    for p in _trainable(params):
        p.master -= lr32 * p.grad
        p.sync(half)
    for p in params:
        p.zero_grad()


def mixed_precision_step(params, lr, loss_scale=1.0) -> bool:
    """Unscale gradients and update the float32 masters; refresh the half working copies.

    The master update uses compensated (Kahan) summation, so a long run of
    updates far below the float32 spacing of the weight still adds up to the
    right total instead of drifting by one rounding error per step.

    Returns False (and leaves every master untouched) when any gradient
    overflowed; gradients are zeroed either way.
    """
    params = list(params)
    ok = all(np.all(np.isfinite(p.grad)) for p in _trainable(params))
    if ok:
        lr32 = np.float32(lr)
        inv = np.float32(1.0 / loss_scale)
        for p in _trainable(params):
            y = -(lr32 * (p.grad * inv)) - p.comp
            t = p.master + y
            p.comp[...] = (t - p.master) - y
            p.master[...] = t
            p.sync(True)
    for p in params:
        p.zero_grad()
    return ok


# ---------------------------------------------------------------------------
# training loop


def train_epoch(net: Network, data: Dataset, config: TrainConfig, epoch=0, val: Dataset | None = None) -> EpochMetrics:
    """One pass over ``data`` in seeded-shuffle order.

    Each batch is augmented (and mixed up) as a whole, then split into
    ``accum_factor`` micro-batches whose mean-loss gradients are weighted by
    their share of the batch before a single optimizer step.
    """
    if len(data) == 0:
        raise ConfigError("training dataset is empty")
    if data.num_classes != net.num_classes:
        raise ConfigError(f"dataset has {data.num_classes} classes, network predicts {net.num_classes}")
    t0 = time.perf_counter()
    half = config.precision == "mixed"
    if net.half != half:
        net.set_precision(half)
    params = net.parameters()
    total_loss, counted, skipped = 0.0, 0, 0
    micro = config.micro_batch_size
    batches = batch_iterator(data, config.batch_size, config.seed, net.input_size, epoch)
    for b, (x, y) in enumerate(batches):
        x = augment_batch(x, config.aug_policy, config.seed, epoch, b * config.batch_size)
        if config.mixup is not None and len(x) >= 2:
            mixed = mixup_batch(x, y, np.random.default_rng([config.seed, 0x313, epoch, b]), config.mixup)
            x, y = mixed.x.astype(np.float32), mixed.y
        n = len(x)
        overflow = False
        # half-precision overflow is detected and handled below, not warned about
        with np.errstate(over="ignore", invalid="ignore") if half else contextlib.nullcontext():
            for s in range(0, n, micro):
                xs, ys = x[s:s + micro], y[s:s + micro]
                logits, ctx = net.forward(xs)
                if half and not np.all(np.isfinite(logits)):
                    overflow = True
                    break
                m = len(xs)
                total_loss += cross_entropy(softmax(logits), ys) * m
                counted += m
                grad = softmax_xent_grad(logits, ys) * np.float32(m / n)
                if config.loss_scale != 1.0:
                    grad = grad * np.float32(config.loss_scale)
                net.backward(ctx, grad)
        if half:
            if overflow:
                net.zero_grad()
                applied = False
            else:
                applied = mixed_precision_step(params, config.lr, config.loss_scale)
            skipped += not applied
        else:
            sgd_step(params, config.lr)
    train_loss = total_loss / counted if counted else float("nan")
    val_loss = val_acc = float("nan")
    if val is not None and len(val):
        report = evaluate(net, val)
        val_loss, val_acc = report.loss, report.accuracy
    return EpochMetrics(epoch, train_loss, val_loss, val_acc, time.perf_counter() - t0, skipped)


def progressive_schedule(config: TrainConfig, epoch, default: Shape2D | None = None):
    """Return ``(image size, freeze_body)`` for ``epoch`` (0-based).

    The body-freeze instruction is emitted only on the switch epoch itself.
    """
    sched = config.resize_schedule
    if sched is None:
        return default, False
    if not sched.small <= sched.large:
        raise ConfigError(f"large size {sched.large} is smaller than small size {sched.small}")
    if epoch < sched.switch_epoch:
        return sched.small, False
    return sched.large, epoch == sched.switch_epoch


def fit(net: Network, train: Dataset, val: Dataset | None, config: TrainConfig,
        on_epoch: Callable[[EpochMetrics], None] | None = None) -> list[EpochMetrics]:
    """Train for ``config.epochs`` epochs, applying the progressive-resize schedule if any."""
    if config.resize_schedule is not None and not net.global_pooled:
        raise ConfigError(f"progressive resizing needs a globally pooled architecture, not {net.arch}")
    history = []
    for epoch in range(config.epochs):
        if config.resize_schedule is not None:
            size, freeze = progressive_schedule(config, epoch)
            net.set_input_size(size)
            if freeze:
                log.info("epoch %d: switching to %s and freezing the body", epoch, size)
                set_trainable(net, "body")
        m = train_epoch(net, train, config, epoch, val)
        history.append(m)
        if on_epoch is not None:
            on_epoch(m)
    return history


# ---------------------------------------------------------------------------
# learning-rate sweep


@dataclass
class SweepRecord:
    lrs: list = field(default_factory=list)
    losses: list = field(default_factory=list)  # bias-corrected smoothed losses
    raw_losses: list = field(default_factory=list)
    lr_min: float = 0.0
    lr_max: float = 0.0
    aborted: bool = False


def geometric_lrs(lr_min, lr_max, steps):
    k = np.arange(steps, dtype=np.float64)
    return lr_min * (lr_max / lr_min) ** (k / (steps - 1))


def run_sweep(step_fn: Callable[[float], float], lr_min=1e-7, lr_max=10.0, steps=100, beta=0.98) -> SweepRecord:
    """Drive ``step_fn(lr) -> loss`` over geometrically increasing rates.

    Stops once the smoothed loss exceeds four times the best seen, or on a
    non-finite loss.
    """
    if not 0 < lr_min < lr_max:
        raise ConfigError("need 0 < lr_min < lr_max")
    if steps < 10:
        raise ConfigError("a sweep needs at least 10 steps")
    if not 0 <= beta < 1:
        raise ConfigError("smoothing factor must be in [0, 1)")
    rec = SweepRecord(lr_min=lr_min, lr_max=lr_max)
    avg, best = 0.0, math.inf
    for k, lr in enumerate(geometric_lrs(lr_min, lr_max, steps)):
        loss = step_fn(float(lr))
        if not math.isfinite(loss):
            rec.aborted = True
            break
        avg = beta * avg + (1 - beta) * loss
        smoothed = avg / (1 - beta ** (k + 1))
        rec.lrs.append(float(lr))
        rec.losses.append(smoothed)
        rec.raw_losses.append(loss)
        best = min(best, smoothed)
        if smoothed > 4 * best:
            rec.aborted = True
            break
    return rec


def _cycle_batches(data, batch_size, seed, size):
    epoch = 0
    while True:
        yield from batch_iterator(data, batch_size, seed, size, epoch)
        epoch += 1


def lr_sweep(net: Network, data: Dataset, lr_min=1e-7, lr_max=10.0, steps=100, beta=0.98,
             batch_size=64, seed=0) -> SweepRecord:
    """Learning-rate range test on a throwaway copy of ``net``: one mini-batch per rate."""
    model = net.copy()
    batches = _cycle_batches(data, batch_size, seed, model.input_size)

    def step(lr):
        x, y = next(batches)
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                logits, ctx = model.forward(x)
                loss = cross_entropy(softmax(logits), y)
                model.backward(ctx, softmax_xent_grad(logits, y))
                sgd_step(model.parameters(), lr)
            except NumericError:
                return math.inf
        return loss

    return run_sweep(step, lr_min, lr_max, steps, beta)


def suggest_lr_valley(record: SweepRecord) -> float:
    """One decade below the rate at the smoothed-loss minimum, clamped into the swept range."""
    if len(record.losses) < 10:
        raise NoValleyError(f"sweep recorded only {len(record.losses)} points; need at least 10")
    idx = int(np.argmin(record.losses))
    if idx == 0:
        raise NoValleyError("smoothed loss never fell below its starting value")
    lo = record.lr_min or record.lrs[0]
    hi = record.lr_max or record.lrs[-1]
    return float(min(max(record.lrs[idx] / 10.0, lo), hi))
