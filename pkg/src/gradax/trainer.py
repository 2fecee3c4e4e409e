"""Desk-scale data-parallel training.

An MLP stands in for the convolutional models: it has matrix weights to
compress and bias vectors that travel uncompressed. Every worker holds a
full replica, trains on its own shard and applies SGD with momentum to the
decoded global gradient.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .collectives import ProcessGroup, TrafficStats, inproc_groups, run_workers
from .compressors import CompressorConfig, Kind, make_compressor
from .data import Dataset
from .overlap import DEFAULT_BUFFER, OverlapEngine, ScheduleMode
from .timeline import UPDATE, Timeline

log = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e6


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged in epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class ModelSpec:
    widths: Sequence[int]
    activation: str = "relu"
    loss: str = "cross-entropy"
    seed: int = 0

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError(f"need at least one layer with positive widths, got {self.widths}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.loss not in ("cross-entropy", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")


class MLP:
    """Fully connected network with per-layer backward steps.

    Parameters are ``fc{i}.weight`` of shape (out, in) and ``fc{i}.bias``.
    ``bp_delay_s`` adds a sleep to each backward layer to mimic heavier compute.
    """

    def __init__(self, spec: ModelSpec, bp_delay_s: float = 0.0):
        self.spec = spec
        self.bp_delay_s = bp_delay_s
        rng = np.random.default_rng([spec.seed, 0x1417])
        self.params: dict[str, np.ndarray] = {}
        for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            self.params[f"fc{i}.weight"] = rng.uniform(-bound, bound, (fan_out, fan_in)).astype(np.float32)
            self.params[f"fc{i}.bias"] = rng.uniform(-bound, bound, fan_out).astype(np.float32)

    @property
    def num_layers(self) -> int:
        return len(self.spec.widths) - 1

    def ready_order(self) -> list[str]:
        out = []
        for i in reversed(range(self.num_layers)):
            out += [f"fc{i}.weight", f"fc{i}.bias"]
        return out

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n, self.params[n].shape) for n in self.ready_order()]

    def _act(self, z):
        return np.maximum(z, 0) if self.spec.activation == "relu" else np.tanh(z)

    def _act_grad(self, z, a):
        return (z > 0).astype(np.float32) if self.spec.activation == "relu" else 1 - a * a

    def logits(self, x):
        a = np.asarray(x, dtype=np.float32)
        for i in range(self.num_layers):
            z = a @ self.params[f"fc{i}.weight"].T + self.params[f"fc{i}.bias"]
            a = z if i == self.num_layers - 1 else self._act(z)
        return a

    def _loss(self, out, y):
        n = len(y)
        if self.spec.loss == "cross-entropy":
            z = out - out.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            loss = -logp[np.arange(n), y].mean()
            grad = np.exp(logp)
            grad[np.arange(n), y] -= 1
            return float(loss), (grad / n).astype(np.float32)
        target = np.zeros_like(out)
        target[np.arange(n), y] = 1
        diff = out - target
        return float(0.5 * np.mean(np.sum(diff * diff, axis=1))), (diff / n).astype(np.float32)

    def forward(self, x, y):
        a = np.asarray(x, dtype=np.float32)
        acts, pre = [a], []
        for i in range(self.num_layers):
            z = a @ self.params[f"fc{i}.weight"].T + self.params[f"fc{i}.bias"]
            pre.append(z)
            a = z if i == self.num_layers - 1 else self._act(z)
            acts.append(a)
        loss, dout = self._loss(a, np.asarray(y))
        return loss, (acts, pre, dout)

    def backward(self, cache):
        """Yield ``(layer_id, [(name, grad), ...])`` from the last layer to the first."""
        acts, pre, delta = cache
        for i in reversed(range(self.num_layers)):
            if i != self.num_layers - 1:
                delta = delta * self._act_grad(pre[i], acts[i + 1])
            dW = delta.T @ acts[i]
            db = delta.sum(axis=0)
            if i:
                delta = delta @ self.params[f"fc{i}.weight"]
            if self.bp_delay_s:
                time.sleep(self.bp_delay_s)
            yield f"fc{i}", [(f"fc{i}.weight", dW.astype(np.float32)), (f"fc{i}.bias", db.astype(np.float32))]

    def gradients(self, x, y) -> tuple[float, dict[str, np.ndarray]]:
        loss, cache = self.forward(x, y)
        return loss, {n: g for _, grads in self.backward(cache) for n, g in grads}

    def evaluate(self, data: Dataset) -> tuple[float, float]:
        out = self.logits(data.X)
        loss, _ = self._loss(out, data.y)
        return loss, float(np.mean(out.argmax(axis=1) == data.y))


# --------------------------------------------------------------------------
# optimizer and schedule


def sgd_momentum_update(weights, grad, lr: float, momentum: float, velocity):
    """v' = momentum * v + g ; w' = w - lr * v'."""
    grad = np.asarray(grad, dtype=np.float32)
    if grad.shape != np.shape(weights) or np.shape(velocity) != grad.shape:
        raise ValueError(f"shape mismatch: w{np.shape(weights)} g{grad.shape} v{np.shape(velocity)}")
    bad = ~np.isfinite(grad)
    if bad.any():
        raise NonFiniteGradientError(
            f"{int(bad.sum())} non-finite gradient entries (first at flat index {int(np.flatnonzero(bad)[0])})")
    v = (momentum * velocity + grad).astype(np.float32)
    return (weights - lr * v).astype(np.float32), v


class SGDMomentum:
    def __init__(self, params: dict[str, np.ndarray], momentum: float = 0.9):
        if not 0 <= momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        self.params = params
        self.momentum = momentum
        self.velocity = {n: np.zeros_like(p) for n, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            try:
                self.params[name], self.velocity[name] = sgd_momentum_update(
                    self.params[name], g, lr, self.momentum, self.velocity[name])
            except NonFiniteGradientError as e:
                raise NonFiniteGradientError(f"{name}: {e}") from None


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 0.1
    momentum: float = 0.9
    warmup_epochs: int = 5
    decay_epochs: Sequence[int] = (150, 220)
    decay_factor: float = 0.1
    kind: Kind | str = Kind.IDENTITY
    rank: int = 4
    topk_density: float = 0.001
    ef: bool | None = None
    reuse: bool = True
    mode: ScheduleMode | str = ScheduleMode.WFBP_TF
    buffer_bytes: float = DEFAULT_BUFFER
    scale_buffer: bool = True
    world_size: int = 1
    seed: int = 1

    def __post_init__(self):
        self.kind = Kind.parse(self.kind)
        self.mode = ScheduleMode.parse(self.mode)
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError("decay_epochs must be strictly increasing")
        if self.base_lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.rank < 1:
            raise ValueError("rank must be ≥ 1")
        if self.world_size < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("epochs, batch size and world size must be ≥ 1")

    def compressor_config(self) -> CompressorConfig:
        return CompressorConfig(kind=self.kind, rank=self.rank, topk_density=self.topk_density,
                                ef=self.ef, reuse=self.reuse, seed=self.seed)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    drops = sum(1 for e in cfg.decay_epochs if e <= epoch)
    return cfg.base_lr * cfg.decay_factor ** drops


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    final_accuracy: float = 0.0
    final_loss: float = 0.0
    wall_seconds: float = 0.0
    traffic: list[TrafficStats] = field(default_factory=list)
    timeline: Timeline = field(default_factory=Timeline)
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def to_dict(self) -> dict:
        """JSON-ready summary; leaves out wall-clock fields so reruns compare equal."""
        return {
            "epochs": self.epochs,
            "final_accuracy": self.final_accuracy,
            "final_loss": self.final_loss,
            "traffic": [{"worker": w, "bytes_sent": t.bytes_sent, "bytes_received": t.bytes_received,
                         "launch_count": t.launch_count} for w, t in enumerate(self.traffic)],
        }


StepCallback = Callable[[int, int, MLP, OverlapEngine, object], None]


def train_worker(group: ProcessGroup, spec: ModelSpec, data: Dataset, cfg: TrainConfig,
                 eval_data: Dataset | None = None, on_step: StepCallback | None = None,
                 bp_delay_s: float = 0.0) -> TrainReport:
    """The loop run by one worker; every worker must call it with the same arguments."""
    p, rank = group.world_size, group.rank
    model = MLP(spec, bp_delay_s)
    opt = SGDMomentum(model.params, cfg.momentum)
    comp = make_compressor(cfg.compressor_config(), p)
    comp.setup(model.param_shapes())
    shard = data.shard(rank, p, cfg.seed)
    if shard.num_batches(cfg.batch_size) == 0:
        raise ValueError(f"shard of {len(shard)} samples is smaller than batch size {cfg.batch_size}")
    eval_data = eval_data if eval_data is not None else data
    report = TrainReport()
    step = 0
    t_start = time.perf_counter()
    with OverlapEngine(comp, group, cfg.mode, cfg.buffer_bytes, cfg.scale_buffer) as engine:
        for epoch in range(cfg.epochs):
            lr = lr_schedule(epoch, cfg)
            for xb, yb in shard.batches(cfg.batch_size, epoch, cfg.seed, rank):
                step += 1
                res = engine.run_iteration(model, xb, yb, step)
                if not np.isfinite(res.loss) or res.loss > DIVERGENCE_LOSS:
                    raise DivergenceError(epoch, res.loss)
                t0 = engine.now()
                opt.step(res.grads, lr)
                res.timeline.add(rank, UPDATE, "sgd", t0, engine.now())
                report.timeline = res.timeline
                if on_step is not None:
                    on_step(rank, step, model, engine, res)
            loss, acc = model.evaluate(eval_data)
            if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
                raise DivergenceError(epoch, loss)
            report.epochs.append({"epoch": epoch, "lr": lr, "train_loss": model.evaluate(data)[0],
                                  "eval_loss": loss, "eval_accuracy": acc})
            log.debug("rank %d epoch %d loss %.4f acc %.4f", rank, epoch, loss, acc)
    report.final_accuracy = report.epochs[-1]["eval_accuracy"]
    report.final_loss = report.epochs[-1]["train_loss"]
    report.wall_seconds = time.perf_counter() - t_start
    report.traffic = [group.traffic_report()]
    report.weights = {n: w.copy() for n, w in model.params.items()}
    return report


def train(spec: ModelSpec, data: Dataset, cfg: TrainConfig, eval_data: Dataset | None = None,
          groups: Sequence[ProcessGroup] | None = None, on_step: StepCallback | None = None,
          bp_delay_s: float = 0.0) -> TrainReport:
    """Train with ``cfg.world_size`` in-process workers and merge their reports."""
    groups = groups if groups is not None else inproc_groups(cfg.world_size)
    reports = run_workers(groups, train_worker, spec, data, cfg, eval_data, on_step, bp_delay_s)
    merged = reports[0]
    merged.traffic = [r.traffic[0] for r in reports]
    merged.timeline = Timeline([e for r in reports for e in r.timeline.events])
    return merged
