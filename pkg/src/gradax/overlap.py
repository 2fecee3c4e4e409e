"""Wait-free back-propagation with tensor fusion.

Gradients become ready layer by layer during the backward pass. Each one is
encoded right away and dropped into a fusion bucket of its stream; a sealed
bucket is handed to the worker's communication thread, which runs the
collective while the backward pass carries on. At the end of backward the
compute thread waits for all buckets and decodes.
"""
from __future__ import annotations

import enum
import math
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import timeline as T
from .compressors import DENSE_STREAM, Compressor, Message
from .timeline import Timeline

KB = 1 << 10
MB = 1 << 20
DEFAULT_BUFFER = 25 * MB
MIN_BUFFER = KB


class ScheduleMode(enum.Enum):
    NAIVE = "naive"
    WFBP = "wfbp"
    WFBP_TF = "wfbp-tf"

    @classmethod
    def parse(cls, v) -> "ScheduleMode":
        if isinstance(v, ScheduleMode):
            return v
        for m in cls:
            if v in (m.value, m.name):
                return m
        raise ValueError(f"unknown schedule mode {v!r}")


class PlanError(ValueError):
    pass


def compressed_buffer_size(default_bytes: float, compression_rate: float) -> int:
    """Scale the fusion buffer by the compressed/uncompressed size ratio."""
    if default_bytes <= 0:
        raise ValueError("default buffer size must be positive")
    if not 0 < compression_rate <= 1:
        raise ValueError(f"compression rate must be in (0, 1], got {compression_rate}")
    return max(MIN_BUFFER, math.ceil(default_bytes * compression_rate))


@dataclass(frozen=True)
class BucketEntry:
    layer_id: str
    elements: int
    nbytes: int


@dataclass
class BucketPlan:
    buckets: list[list[BucketEntry]]
    buffer_size_bytes: float
    stream: str = DENSE_STREAM

    def layers(self) -> list[str]:
        return [e.layer_id for b in self.buckets for e in b]

    def bucket_of(self) -> dict[str, int]:
        return {e.layer_id: i for i, b in enumerate(self.buckets) for e in b}

    def totals(self) -> list[int]:
        return [sum(e.nbytes for e in b) for b in self.buckets]

    def __len__(self):
        return len(self.buckets)


def plan_buckets(ready_order: Sequence[tuple], buffer_size: float, stream: str = DENSE_STREAM) -> BucketPlan:
    """Greedy fusion: fill buckets in ready order, seal once total >= buffer_size.

    Entries are ``(layer_id, nbytes)`` or ``(layer_id, nbytes, elements)``.
    """
    if not ready_order:
        raise PlanError("nothing to plan")
    buckets: list[list[BucketEntry]] = []
    cur: list[BucketEntry] = []
    total = 0
    for item in ready_order:
        layer, nbytes = item[0], int(item[1])
        elements = int(item[2]) if len(item) > 2 else nbytes // 4
        cur.append(BucketEntry(layer, elements, nbytes))
        total += nbytes
        if total >= buffer_size:
            buckets.append(cur)
            cur, total = [], 0
    if cur:
        buckets.append(cur)
    return BucketPlan(buckets, buffer_size, stream)


def stream_buffer_sizes(compressor: Compressor, buffer_bytes: float, scale: bool) -> dict[str, float]:
    """Buffer size per stream, optionally scaled by that stream's compression rate.

    The rate of a stream is its payload bytes over the float32 size of the
    tensors it carries, so uncompressed streams keep the default size.
    """
    names = list(compressor.shapes)
    sizes: dict[str, float] = {}
    for parity in (1, 2):
        for stream, entries in compressor.stream_items(names, parity).items():
            if not scale or not math.isfinite(buffer_bytes) or buffer_bytes <= 0:
                sizes[stream] = buffer_bytes
                continue
            full = sum(4 * compressor.shapes[name].numel for name, _ in entries)
            rate = min(1.0, sum(nb for _, nb in entries) / full)
            sizes[stream] = compressed_buffer_size(buffer_bytes, rate)
    return sizes


def build_plans(compressor: Compressor, ready_order: Sequence[str], step: int, mode: ScheduleMode,
                buffer_bytes: float = DEFAULT_BUFFER, scale_buffer: bool = False) -> dict[str, BucketPlan]:
    mode = ScheduleMode.parse(mode)
    sizes = stream_buffer_sizes(compressor, buffer_bytes, scale_buffer)
    plans = {}
    for stream, items in compressor.stream_items(ready_order, step).items():
        if mode is ScheduleMode.NAIVE:
            size = math.inf
        elif mode is ScheduleMode.WFBP:
            size = 0
        else:
            size = sizes.get(stream, buffer_bytes)
        plans[stream] = plan_buckets(items, size, stream)
    return plans


class DependencyGraph:
    """Collective-to-collective data dependencies recorded in one iteration."""

    def __init__(self):
        self.deps: dict[str, tuple[str, ...]] = {}

    def add(self, node: str, depends_on: Sequence[str] = ()) -> None:
        self.deps[node] = tuple(depends_on)

    def depth(self) -> int:
        memo: dict[str, int] = {}

        def d(n):
            if n not in memo:
                memo[n] = 1 + max((d(x) for x in self.deps.get(n, ())), default=0)
            return memo[n]

        return max((d(n) for n in self.deps), default=0)

    def __len__(self):
        return len(self.deps)


@dataclass
class IterationResult:
    grads: dict[str, np.ndarray]
    loss: float
    timeline: Timeline
    deps: DependencyGraph
    launches: int
    extra: dict = field(default_factory=dict)


class _Bucket:
    __slots__ = ("stream", "index", "expected", "msgs", "node")

    def __init__(self, stream, index, expected):
        self.stream = stream
        self.index = index
        self.expected = expected
        self.msgs: dict[str, Message] = {}
        self.node = f"{stream}#{index}"


class OverlapEngine:
    """Per-worker driver for one training iteration.

    ``plans`` may be passed to override the bucket layout; otherwise it is
    derived from the mode and buffer size.
    """

    def __init__(self, compressor: Compressor, group, mode=ScheduleMode.WFBP_TF,
                 buffer_bytes: float = DEFAULT_BUFFER, scale_buffer: bool = False, plans=None,
                 clock=time.perf_counter):
        self.compressor = compressor
        self.group = group
        self.mode = ScheduleMode.parse(mode)
        self.buffer_bytes = buffer_bytes
        self.scale_buffer = scale_buffer
        self.fixed_plans = plans
        self.clock = clock
        self._plans: dict[int, dict[str, BucketPlan]] = {}
        self._comm = ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"comm{group.rank}")
        self._t0 = clock()

    def close(self):
        self._comm.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def now(self):
        return self.clock() - self._t0

    def plans_for(self, ready_order: Sequence[str], step: int) -> dict[str, BucketPlan]:
        key = step % 2
        if key not in self._plans:
            expected = self.compressor.stream_items(ready_order, step)
            if self.fixed_plans is not None:
                plans = self.fixed_plans
                for stream, items in expected.items():
                    want = [name for name, _ in items]
                    if stream not in plans or plans[stream].layers() != want:
                        raise PlanError(f"plan for {stream} does not cover the tensors in ready order")
                plans = {s: plans[s] for s in expected}
            else:
                plans = build_plans(self.compressor, ready_order, step, self.mode,
                                    self.buffer_bytes, self.scale_buffer)
            self._plans[key] = plans
        return self._plans[key]

    def run_iteration(self, model, x, y, step: int) -> IterationResult:
        comp, group, rank = self.compressor, self.group, self.group.rank
        tl = Timeline()
        deps = DependencyGraph()
        launches0 = group.traffic_report().launch_count
        ready_order = model.ready_order()
        plans = self.plans_for(ready_order, step)

        buckets: dict[str, list[_Bucket]] = {}
        where: dict[tuple[str, str], _Bucket] = {}
        for stream, plan in plans.items():
            bs = [_Bucket(stream, i, [e.layer_id for e in b]) for i, b in enumerate(plan.buckets)]
            buckets[stream] = bs
            for b in bs:
                for layer in b.expected:
                    where[(stream, layer)] = b
        futures: list[Future] = []
        follow = comp.follow_up_streams()

        def run_bucket(b: _Bucket):
            msgs = [b.msgs[name] for name in b.expected]
            start = self.now()
            sent0 = group.traffic_report().bytes_sent
            if comp.collective == "all_reduce":
                total = group.ring_all_reduce(np.concatenate([m.data for m in msgs]), stream=b.stream)
                parts = np.split(total, np.cumsum([m.data.size for m in msgs])[:-1])
            else:
                gathered = group.all_gather(comp.pack(msgs), stream=b.stream)
                parts = comp.unpack(msgs, gathered)
            end = self.now()
            tl.add(rank, T.COLLECTIVE, b.node, start, end, T.COMM_CONTEXT,
                   group.traffic_report().bytes_sent - sent0)
            for m, part in zip(msgs, parts):
                t0 = self.now()
                more = comp.aggregated(m, part, step)
                kind = T.COMPRESS if more else T.DECODE
                tl.add(rank, kind, m.layer, t0, self.now(), T.COMM_CONTEXT)
                for nm in more:
                    nb = where[(nm.stream, nm.layer)]
                    nb.msgs[nm.layer] = nm
                    if len(nb.msgs) == len(nb.expected):
                        deps.add(nb.node, sorted({where[(b.stream, layer)].node for layer in nb.expected
                                                  if (b.stream, layer) in where}))
                        run_bucket(nb)

        def put(msgs: list[Message]):
            for m in msgs:
                b = where.get((m.stream, m.layer))
                if b is None:
                    raise PlanError(f"no bucket for {m.layer} on {m.stream}")
                b.msgs[m.layer] = m
                if len(b.msgs) == len(b.expected):
                    deps.add(b.node)
                    futures.append(self._comm.submit(run_bucket, b))

        def encode(name, g):
            t0 = self.now()
            msgs = comp.encode(name, g, step)
            tl.add(rank, T.COMPRESS, name, t0, self.now())
            put(msgs)

        t0 = self.now()
        loss, cache = model.forward(x, y)
        tl.add(rank, T.FF, "forward", t0, self.now())

        held: list[tuple[str, np.ndarray]] = []
        layers = model.backward(cache)
        while True:
            t0 = self.now()
            try:
                layer_id, grads = next(layers)
            except StopIteration:
                break
            tl.add(rank, T.BP, layer_id, t0, self.now())
            for name, g in grads:
                if self.mode is ScheduleMode.NAIVE:
                    held.append((name, g))
                else:
                    encode(name, g)
        for name, g in held:
            encode(name, g)

        for f in futures:
            f.result()
        # follow-up streams are driven from the comm thread; every bucket must have run
        for stream in follow:
            for b in buckets.get(stream, ()):
                if b.node not in deps.deps:
                    raise PlanError(f"bucket {b.node} never filled")

        out = {}
        for name in ready_order:
            t0 = self.now()
            out[name] = comp.decode(name)
            tl.add(rank, T.DECODE, name, t0, self.now())
        launches = group.traffic_report().launch_count - launches0
        return IterationResult(out, float(loss), tl, deps, launches)


def run_iteration(model, compressor, group, mode, plan=None, x=None, y=None, step: int = 1, **kw) -> IterationResult:
    """One-shot form of :meth:`OverlapEngine.run_iteration`."""
    with OverlapEngine(compressor, group, mode, plans=plan, **kw) as eng:
        return eng.run_iteration(model, x, y, step)
