"""Alpha-beta communication cost model and iteration-time simulator.

A collective costs a start-up term ``alpha`` per ring hop plus ``beta``
seconds per byte moved. Ring all-reduce makes ``2(p-1)`` hops moving
``2(p-1)/p`` of the buffer; all-gather makes ``p-1`` hops moving ``p-1``
payloads.

:func:`predict_iteration` replays one training iteration on a compute
context and a communication context and returns the same
:class:`~gradax.timeline.Timeline` a live run produces.
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import timeline as T
from .compressors import DENSE_STREAM, P_STREAM, Q_STREAM, Kind
from .overlap import DEFAULT_BUFFER, BucketPlan, ScheduleMode, compressed_buffer_size, plan_buckets
from .timeline import Timeline, measure_breakdown

INTERFERENCE = 1.13
# defaults for predictions: 50 us per hop, 10 Gb/s links
DEFAULT_ALPHA = 50e-6
DEFAULT_BETA = 8e-10


class ModelError(ValueError):
    pass


@dataclass
class CostModel:
    alpha: float
    beta: float
    p: int = 1
    residual: float = 0.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.p < 1:
            raise ModelError(f"invalid cost model alpha={self.alpha} beta={self.beta} p={self.p}")


def allreduce_time(nbytes: float, cm: CostModel) -> float:
    p = cm.p
    if p == 1:
        return 0.0
    return 2 * (p - 1) * cm.alpha + 2 * (p - 1) / p * nbytes * cm.beta


def allgather_time(nbytes: float, cm: CostModel) -> float:
    p = cm.p
    return (p - 1) * cm.alpha + (p - 1) * nbytes * cm.beta


def comm_volume(kind, N: int = 0, p: int = 1, k: int = 0, r: int = 0, shapes: Sequence[tuple[int, int]] = ()) -> float:
    """Elements sent per worker per iteration.

    ``shapes`` lists the (n, m) of compressible layers for the low-rank kinds;
    the ACP-SGD figure is the two-iteration average.
    """
    kind = Kind.parse(kind)
    if p == 1:
        return 0.0
    if kind is Kind.IDENTITY:
        return 2 * (p - 1) / p * N
    if kind is Kind.SIGN_MAJORITY:
        return (p - 1) * N / 32
    if kind is Kind.TOPK_SAMPLED:
        return (p - 1) * 2 * k
    n_c = sum((n + m) * min(r, n, m) for n, m in shapes)
    if kind is Kind.POWERSGD:
        return 2 * (p - 1) / p * n_c
    return 2 * (p - 1) / p * n_c / 2


def fit_alpha_beta(measurements: Sequence[tuple[float, float]], p: int) -> CostModel:
    """Least-squares fit of seconds = A + B * bytes, mapped onto the all-reduce model."""
    if p < 2:
        raise ModelError("fitting needs p >= 2")
    x = np.array([m[0] for m in measurements], dtype=np.float64)
    y = np.array([m[1] for m in measurements], dtype=np.float64)
    if len(np.unique(x)) < 2:
        raise ModelError("need at least two distinct message sizes")
    design = np.column_stack([np.ones_like(x), x])
    (A, B), *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = float(np.sqrt(np.mean((design @ np.array([A, B]) - y) ** 2)))
    alpha = A / (2 * (p - 1))
    beta = B * p / (2 * (p - 1))
    return CostModel(max(float(alpha), 0.0), max(float(beta), 0.0), p, resid)


# --------------------------------------------------------------------------
# layer profiles


@dataclass
class LayerProfile:
    """Per-tensor costs for the simulator.

    ``p_elems``/``q_elems`` are zero for tensors that are not compressed
    (biases). ``compress_s`` is the cost of one encode pass over the tensor:
    computing one low-rank factor, or one sign/top-k encode. Power-SGD pays
    it twice per iteration (P then Q), ACP-SGD once.
    """

    name: str
    bp_s: float
    m_elems: int
    p_elems: int = 0
    q_elems: int = 0
    compress_s: float = 0.0
    decode_s: float = 0.0

    def __post_init__(self):
        if min(self.bp_s, self.compress_s, self.decode_s) < 0 or min(self.m_elems, self.p_elems, self.q_elems) < 0:
            raise ModelError(f"negative entry in profile for {self.name}")

    @property
    def compressible(self) -> bool:
        return self.p_elems > 0


def profiles_to_json(profiles: Sequence[LayerProfile]) -> str:
    return json.dumps([asdict(p) for p in profiles], indent=1)


def profiles_from_json(text: str) -> list[LayerProfile]:
    data = json.loads(text)
    if isinstance(data, dict):
        data = data["layers"]
    return [LayerProfile(**d) for d in data]


def load_profiles(path) -> list[LayerProfile]:
    return profiles_from_json(Path(path).read_text())


def mlp_profiles(widths: Sequence[int], rank: int, flops_per_s: float = 1e12, batch: int = 32) -> list[LayerProfile]:
    """Profiles for an MLP, backward cost ~ 4 * batch * n * m flops per layer."""
    out = []
    for i, (fin, fout) in enumerate(zip(widths[:-1], widths[1:])):
        r = min(rank, fin, fout)
        bp = 4 * batch * fin * fout / flops_per_s
        comp = 2 * fin * fout * r / flops_per_s
        out.append(LayerProfile(f"fc{i}.weight", bp, fin * fout, fout * r, fin * r, comp))
        out.append(LayerProfile(f"fc{i}.bias", 0.0, fout))
    return out


def transformer_profiles(layers: int = 24, hidden: int = 1024, rank: int = 256, flops_per_s: float = 14e12,
                         tokens: int = 4096, compress_flops_per_s: float | None = None) -> list[LayerProfile]:
    """A BERT-Large-like stack: per block QKV/out projections and a 4x MLP, forward order.

    Backward time is taken as 4 * tokens * n * m flops per weight; compression
    as 2 * n * m * r flops (one matmul pass plus orthogonalization, roughly).
    """
    cf = compress_flops_per_s or flops_per_s
    mats = [(hidden, hidden)] * 4 + [(4 * hidden, hidden), (hidden, 4 * hidden)]
    out = []
    for b in range(layers):
        for j, (n, m) in enumerate(mats):
            r = min(rank, n, m)
            out.append(LayerProfile(f"block{b}.w{j}", 4 * tokens * n * m / flops_per_s, n * m, n * r, m * r,
                                    2 * n * m * r / cf))
            out.append(LayerProfile(f"block{b}.b{j}", 0.0, n))
    return out


# --------------------------------------------------------------------------
# simulator


@dataclass
class _Msg:
    layer: str
    stream: str
    nbytes: int


@dataclass
class Prediction:
    timeline: Timeline
    breakdown: dict
    iteration_s: float
    launches: int
    comm_bytes: int
    plans: dict = field(default_factory=dict)


def _topk_k(pr, density):
    return max(1, math.ceil(density * pr.m_elems))


def _stream_items(profiles, kind: Kind, step: int, density: float = 0.001):
    items: dict[str, list[tuple[str, int]]] = {}

    def add(stream, name, nbytes):
        items.setdefault(stream, []).append((name, nbytes))

    for pr in reversed(profiles):
        if kind is Kind.IDENTITY:
            add(DENSE_STREAM, pr.name, 4 * pr.m_elems)
        elif kind is Kind.SIGN_MAJORITY:
            add(DENSE_STREAM, pr.name, math.ceil(pr.m_elems / 8))
        elif kind is Kind.TOPK_SAMPLED:
            add(DENSE_STREAM, pr.name, 4 + 8 * _topk_k(pr, density))
        elif not pr.compressible:
            add(DENSE_STREAM, pr.name, 4 * pr.m_elems)
        elif kind is Kind.POWERSGD:
            add(P_STREAM, pr.name, 4 * pr.p_elems)
            add(Q_STREAM, pr.name, 4 * pr.q_elems)
        else:
            side = pr.p_elems if step % 2 == 1 else pr.q_elems
            add(P_STREAM if step % 2 == 1 else Q_STREAM, pr.name, 4 * side)
    return items


def predict_plans(profiles, kind, mode, buffer_bytes: float = DEFAULT_BUFFER, step: int = 1,
                  scale_buffer: bool = True, topk_density: float = 0.001) -> dict[str, BucketPlan]:
    kind, mode = Kind.parse(kind), ScheduleMode.parse(mode)
    plans = {}
    full = {pr.name: 4 * pr.m_elems for pr in profiles}
    for stream, items in _stream_items(profiles, kind, step, topk_density).items():
        if mode is ScheduleMode.NAIVE:
            size = math.inf
        elif mode is ScheduleMode.WFBP:
            size = 0
        elif scale_buffer and math.isfinite(buffer_bytes) and buffer_bytes > 0:
            rate = min(1.0, sum(nb for _, nb in items) / sum(full[n] for n, _ in items))
            size = compressed_buffer_size(buffer_bytes, rate)
        else:
            size = buffer_bytes
        plans[stream] = plan_buckets(items, size, stream)
    return plans


def predict_iteration(profiles: Sequence[LayerProfile], kind, mode, cm: CostModel,
                      buffer_bytes: float = DEFAULT_BUFFER, plans: dict[str, BucketPlan] | None = None,
                      step: int = 1, interference: float = INTERFERENCE, scale_buffer: bool = True,
                      ff_s: float = 0.0, topk_density: float = 0.001) -> Prediction:
    """Simulate one iteration on a single worker's compute and comm contexts.

    Backward tasks run in reverse layer order. A tensor is compressed right
    after its gradient (or after the whole backward pass in NAIVE mode);
    a bucket's collective is queued once its last tensor is in and the comm
    context runs queued collectives one at a time, in order. Power-SGD
    computes Q for a bucket only after that bucket's aggregated P comes
    back, and with overlap enabled its compute tasks are stretched by
    ``interference``.
    """
    kind, mode = Kind.parse(kind), ScheduleMode.parse(mode)
    if not profiles:
        raise ModelError("empty profile")
    plans = plans if plans is not None else predict_plans(profiles, kind, mode, buffer_bytes, step, scale_buffer,
                                                          topk_density)
    by_name = {pr.name: pr for pr in profiles}
    expected = _stream_items(profiles, kind, step, topk_density)
    for stream, items in expected.items():
        if stream not in plans or plans[stream].layers() != [n for n, _ in items]:
            raise ModelError(f"plan for {stream} is inconsistent with the profile")
    slow = interference if (kind is Kind.POWERSGD and mode is not ScheduleMode.NAIVE) else 1.0
    tl = Timeline()

    bucket_of = {s: pl.bucket_of() for s, pl in plans.items()}
    fill = {s: [0] * len(pl) for s, pl in plans.items()}
    sizes = {s: [len(b) for b in pl.buckets] for s, pl in plans.items()}
    bbytes = {s: pl.totals() for s, pl in plans.items()}
    launches = 0
    comm_bytes = 0

    comp_free = ff_s
    if ff_s:
        tl.add(0, T.FF, "forward", 0.0, ff_s)
    comm_free = 0.0
    comm_queue: list = []  # (ready time, seq, stream, index)
    seq = 0
    done_at: dict[tuple[str, int], float] = {}

    def coll_time(nbytes):
        if kind in (Kind.SIGN_MAJORITY, Kind.TOPK_SAMPLED):
            return allgather_time(nbytes, cm)
        return allreduce_time(nbytes, cm)

    def arrive(stream, name, t):
        nonlocal seq
        i = bucket_of[stream][name]
        fill[stream][i] += 1
        if fill[stream][i] == sizes[stream][i]:
            heapq.heappush(comm_queue, (t, seq, stream, i))
            seq += 1

    def drain(until=math.inf):
        """Run queued collectives that are ready before ``until``; returns finished buckets."""
        nonlocal comm_free, launches, comm_bytes
        finished = []
        while comm_queue and comm_queue[0][0] <= until:
            ready, _, stream, i = heapq.heappop(comm_queue)
            start = max(comm_free, ready)
            end = start + coll_time(bbytes[stream][i])
            tl.add(0, T.COLLECTIVE, f"{stream}#{i}", start, end, T.COMM_CONTEXT, bbytes[stream][i])
            comm_free = end
            launches += 1
            comm_bytes += bbytes[stream][i]
            done_at[(stream, i)] = end
            finished.append((stream, i, end))
        return finished

    first_stream = P_STREAM if kind is Kind.POWERSGD else None
    pending_q: list = []  # (ready time, layer) Power-SGD Q work unlocked by a finished P bucket

    def unlock(finished):
        for stream, i, end in finished:
            if stream == first_stream:
                for e in plans[stream].buckets[i]:
                    pending_q.append((end, e.layer_id))

    def run_q(now, limit=math.inf):
        """Run unlocked Power-SGD Q tasks on the compute context up to ``limit``."""
        nonlocal comp_free
        pending_q.sort()
        while pending_q and max(comp_free, pending_q[0][0]) < limit:
            ready, layer = pending_q.pop(0)
            start = max(comp_free, ready)
            dur = by_name[layer].compress_s * slow
            tl.add(0, T.COMPRESS, f"{layer}:Q", start, start + dur)
            comp_free = start + dur
            arrive(Q_STREAM, layer, comp_free)
            unlock(drain(comp_free))

    def compress(pr):
        nonlocal comp_free
        dur = pr.compress_s * slow if pr.compressible or kind in (Kind.SIGN_MAJORITY, Kind.TOPK_SAMPLED) else 0.0
        if kind is not Kind.IDENTITY and dur > 0:
            tl.add(0, T.COMPRESS, pr.name, comp_free, comp_free + dur)
            comp_free += dur
        for stream, items in expected.items():
            if stream == Q_STREAM and kind is Kind.POWERSGD:
                continue
            if any(n == pr.name for n, _ in items):
                arrive(stream, pr.name, comp_free)

    order = list(reversed(profiles))
    for pr in order:
        if mode is not ScheduleMode.NAIVE and kind is Kind.POWERSGD:
            unlock(drain(comp_free))
            run_q(comp_free, comp_free + 1e-15)
        dur = pr.bp_s * slow
        if dur > 0:
            tl.add(0, T.BP, pr.name, comp_free, comp_free + dur)
        comp_free += dur
        if mode is not ScheduleMode.NAIVE:
            compress(pr)
            unlock(drain(comp_free))
    if mode is ScheduleMode.NAIVE:
        for pr in order:
            compress(pr)
    # finish communication and any remaining Q work
    while True:
        unlock(drain(comp_free))
        if pending_q:
            run_q(comp_free)
            continue
        if comm_queue:
            unlock(drain())
            continue
        break
    end_comm = max([e.end for e in tl.of_kind(T.COLLECTIVE)], default=0.0)
    t = max(comp_free, end_comm)
    for pr in profiles:
        if pr.decode_s:
            tl.add(0, T.DECODE, pr.name, t, t + pr.decode_s)
            t += pr.decode_s
    return Prediction(tl, measure_breakdown(tl), t, launches, comm_bytes, plans)


def predict_average(profiles, kind, mode, cm, **kw) -> float:
    """Mean predicted iteration time over an odd and an even step."""
    return 0.5 * sum(predict_iteration(profiles, kind, mode, cm, step=s, **kw).iteration_s for s in (1, 2))


def predicted_volume(profiles, kind, cm: CostModel, rank_steps: Sequence[int] = (1, 2)) -> float:
    """Bytes sent per worker per iteration averaged over ``rank_steps``, from the plans' payloads."""
    kind = Kind.parse(kind)
    total = 0.0
    for s in rank_steps:
        for stream, items in _stream_items(profiles, kind, s).items():
            nb = sum(b for _, b in items)
            if kind in (Kind.SIGN_MAJORITY, Kind.TOPK_SAMPLED):
                total += (cm.p - 1) * nb
            else:
                total += 2 * (cm.p - 1) / cm.p * nb
    return total / len(rank_steps)
