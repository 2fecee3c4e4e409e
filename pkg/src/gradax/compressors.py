"""Gradient aggregation strategies.

Each strategy works layer by layer: encode the local gradient into one or
more messages, let the engine communicate them (all-reduce for additive
kinds, all-gather otherwise), then decode the global gradient. Low-rank
kinds keep a :class:`LowRankState` per layer.

All-reduce sums are divided by the world size here, so decoded gradients
are means over workers.
"""
from __future__ import annotations

import enum
import math
import struct
import warnings
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import DTYPE, ShapePolicy, matmul, orthogonalize, reshape_to_matrix, seeded_normal

P_STREAM = "P-stream"
Q_STREAM = "Q-stream"
DENSE_STREAM = "dense-stream"


class CompressionError(ValueError):
    pass


class Kind(enum.Enum):
    IDENTITY = "ssgd"
    SIGN_MAJORITY = "sign"
    TOPK_SAMPLED = "topk"
    POWERSGD = "powersgd"
    ACPSGD_EF = "acpsgd"

    @property
    def additive(self) -> bool:
        return self not in (Kind.SIGN_MAJORITY, Kind.TOPK_SAMPLED)

    @property
    def non_blocking(self) -> bool:
        return self is not Kind.POWERSGD

    @classmethod
    def parse(cls, name) -> "Kind":
        if isinstance(name, Kind):
            return name
        for k in cls:
            if name in (k.value, k.name):
                return k
        raise CompressionError(f"unknown compressor kind {name!r}")


def layer_seed(seed: int, layer: str, *extra: int) -> list[int]:
    """Seed sequence shared by all workers for one layer (and optionally a step)."""
    return [seed, zlib.crc32(layer.encode()), *extra]


# --------------------------------------------------------------------------
# sign quantization


@dataclass
class SignPayload:
    bits: bytes
    count: int

    @property
    def nbytes(self) -> int:
        return len(self.bits)


def sign_encode(g) -> SignPayload:
    """One bit per element, little bit order: 1 for g >= 0, 0 for g < 0."""
    g = np.asarray(g, dtype=DTYPE).reshape(-1)
    return SignPayload(np.packbits(g >= 0, bitorder="little").tobytes(), g.size)


def sign_unpack(payload: SignPayload) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(payload.bits, dtype=np.uint8), count=payload.count, bitorder="little")
    return bits.astype(DTYPE) * 2 - 1


def sign_majority_decode(payloads: Sequence[SignPayload]) -> np.ndarray:
    if not payloads:
        raise CompressionError("no payloads to decode")
    counts = {pl.count for pl in payloads}
    if len(counts) != 1:
        raise CompressionError(f"sign payloads disagree on element count: {sorted(counts)}")
    total = np.zeros(payloads[0].count, dtype=np.int64)
    for pl in payloads:
        total += sign_unpack(pl).astype(np.int64)
    # ties go to +1, same as a zero gradient on encode
    return np.where(total >= 0, 1.0, -1.0).astype(DTYPE)


# --------------------------------------------------------------------------
# sampled top-k


@dataclass
class SparsePayload:
    indices: np.ndarray  # uint32, strictly increasing
    values: np.ndarray  # float32

    @property
    def k(self) -> int:
        return int(self.indices.size)

    def to_bytes(self) -> bytes:
        return (struct.pack("<I", self.k) + self.indices.astype("<u4").tobytes()
                + self.values.astype("<f4").tobytes())

    @classmethod
    def from_bytes(cls, b: bytes) -> "SparsePayload":
        (k,) = struct.unpack_from("<I", b)
        if len(b) != 4 + 8 * k:
            raise CompressionError(f"sparse payload of {len(b)} bytes cannot hold k={k}")
        idx = np.frombuffer(b, dtype="<u4", count=k, offset=4).astype(np.uint32)
        val = np.frombuffer(b, dtype="<f4", count=k, offset=4 + 4 * k).astype(DTYPE)
        return cls(idx, val)

    def densify(self, n: int) -> np.ndarray:
        out = np.zeros(n, dtype=DTYPE)
        out[self.indices] = self.values
        return out


def _count_at_least(a, th):
    return int(np.count_nonzero(a >= th))


def _search_threshold(a, lo, hi, k, k_hi, rounds, scale=1.0):
    """Bisect a magnitude threshold until scale * count(a >= th) is in [k, k_hi].

    Returns (threshold, rounds used). ``hi`` starts as a threshold with too
    few hits, ``lo`` as one with enough.
    """
    th = lo
    used = 0
    while used < rounds:
        mid = 0.5 * (lo + hi)
        used += 1
        c = scale * _count_at_least(a, mid)
        if c < k:
            hi = mid
        elif c > k_hi:
            lo = mid
        else:
            return mid, used
        th = lo
        if hi - lo <= np.spacing(np.float32(hi)):
            break
    return th, used


def topk_encode(g, k: int, sample_fraction: float = 1.0, max_rounds: int | float = 32, rng=None) -> SparsePayload:
    """Select about the k largest-magnitude entries through a sampled threshold search.

    A magnitude threshold is bisected on a uniform sample until the scaled
    hit count falls in [k, ceil(1.5k)]. If the full vector then has fewer than
    k hits the search continues on the full vector, and as a last resort
    falls back to an exact partition. The candidate set is cut to exactly k
    by magnitude (ties by ascending index); indices come out sorted.
    """
    g = np.asarray(g, dtype=DTYPE).reshape(-1)
    n = g.size
    if not 1 <= k <= n:
        raise CompressionError(f"k must be in [1, {n}], got {k}")
    if not 0 < sample_fraction <= 1:
        raise CompressionError(f"sample_fraction must be in (0, 1], got {sample_fraction}")
    a = np.abs(g)
    top = float(a.max())
    if top == 0.0:
        return SparsePayload(np.arange(k, dtype=np.uint32), np.zeros(k, dtype=DTYPE))
    k_hi = math.ceil(1.5 * k)
    rounds = max_rounds if math.isfinite(max_rounds) else 10**6

    s = min(n, max(64, math.ceil(sample_fraction * n)))
    if s < n:
        rng = rng if rng is not None else np.random.default_rng(0)
        sample = a[rng.choice(n, size=s, replace=False)]
    else:
        sample = a
    th, used = _search_threshold(sample, 0.0, top * (1 + 1e-6), k, k_hi, rounds, scale=n / s)
    if _count_at_least(a, th) < k and sample is not a:
        th, _ = _search_threshold(a, 0.0, th, k, k_hi, max(rounds - used, 1))
    cand = np.flatnonzero(a >= th)
    if cand.size < k:
        cand = np.sort(np.argpartition(-a, k - 1)[:k])
    # stable sort on -|g| keeps ascending index among equal magnitudes
    keep = cand[np.argsort(-a[cand], kind="stable")[:k]]
    keep = np.sort(keep)
    return SparsePayload(keep.astype(np.uint32), g[keep].copy())


def topk_decode(gathered: Sequence[SparsePayload], n: int) -> np.ndarray:
    acc = np.zeros(n, dtype=np.float64)
    for pl in gathered:
        if pl.k and int(pl.indices.max()) >= n:
            raise CompressionError(f"sparse index {int(pl.indices.max())} out of range for n={n}")
        np.add.at(acc, pl.indices.astype(np.int64), pl.values.astype(np.float64))
    return (acc / len(gathered)).astype(DTYPE)


# --------------------------------------------------------------------------
# low-rank power iteration


@dataclass
class LowRankState:
    P: np.ndarray
    Q: np.ndarray
    E: np.ndarray
    t: int
    rank: int

    @classmethod
    def init(cls, n: int, m: int, rank: int, seed) -> "LowRankState":
        if not 1 <= rank <= min(n, m):
            raise CompressionError(f"rank {rank} outside [1, {min(n, m)}] for a {n}x{m} matrix")
        rng_seed = seed if isinstance(seed, list) else [seed]
        return cls(P=seeded_normal(n, rank, rng_seed + [1]), Q=seeded_normal(m, rank, rng_seed + [2]),
                   E=np.zeros((n, m), dtype=DTYPE), t=0, rank=rank)

    def copy(self) -> "LowRankState":
        return LowRankState(self.P.copy(), self.Q.copy(), self.E.copy(), self.t, self.rank)


def _check_shapes(state: LowRankState, M: np.ndarray):
    n, m = M.shape
    if state.P.shape != (n, state.rank) or state.Q.shape != (m, state.rank) or state.E.shape != (n, m):
        raise CompressionError(f"state shapes P{state.P.shape} Q{state.Q.shape} E{state.E.shape} do not fit M{M.shape}")


def acp_uses_p(t_next: int) -> bool:
    """Odd steps compute and communicate P, even steps Q."""
    return t_next % 2 == 1


def acpsgd_encode(state: LowRankState, M, ef: bool = True, reuse: bool = True, seed=None):
    """Local half of an ACP-SGD step: returns (local factor to all-reduce, partial state).

    The returned state already holds the orthogonalized reused factor and the
    updated error; the communicated factor is filled in by :func:`acpsgd_finish`.
    """
    M = np.asarray(M, dtype=DTYPE)
    _check_shapes(state, M)
    t = state.t + 1
    seed = [0] if seed is None else list(seed)
    acc = M + state.E if ef else M
    new = state.copy()
    if acp_uses_p(t):
        base = state.Q if reuse else seeded_normal(*state.Q.shape, seed + [t, 2])
        Q = orthogonalize(base, seed=seed + [t, 3])
        local = matmul(acc, Q)
        new.Q = Q
        approx = matmul(local, Q, transpose_b=True)
    else:
        base = state.P if reuse else seeded_normal(*state.P.shape, seed + [t, 1])
        P = orthogonalize(base, seed=seed + [t, 3])
        local = matmul(acc, P, transpose_a=True)
        new.P = P
        approx = matmul(P, local, transpose_b=True)
    if ef:
        new.E = (acc - approx).astype(DTYPE)
    return local, new, approx


def acpsgd_finish(state: LowRankState, factor_mean) -> tuple[np.ndarray, LowRankState]:
    new = state.copy()
    t = state.t + 1
    if acp_uses_p(t):
        new.P = np.asarray(factor_mean, dtype=DTYPE).reshape(state.P.shape)
    else:
        new.Q = np.asarray(factor_mean, dtype=DTYPE).reshape(state.Q.shape)
    new.t = t
    return matmul(new.P, new.Q, transpose_b=True), new


def acpsgd_step(state: LowRankState, M, group, ef: bool = True, reuse: bool = True, seed=None):
    """One alternating step: exactly one all-reduce of either P or Q."""
    local, partial, _ = acpsgd_encode(state, M, ef, reuse, seed)
    stream = P_STREAM if acp_uses_p(state.t + 1) else Q_STREAM
    total = group.ring_all_reduce(local.reshape(-1), stream=stream)
    return acpsgd_finish(partial, total / group.world_size)


def powersgd_encode(state: LowRankState, M, ef: bool = False, reuse: bool = True, seed=None):
    M = np.asarray(M, dtype=DTYPE)
    _check_shapes(state, M)
    seed = [0] if seed is None else list(seed)
    acc = M + state.E if ef else M
    Q = state.Q if reuse else seeded_normal(*state.Q.shape, seed + [state.t + 1, 2])
    return acc, matmul(acc, Q)


def powersgd_compute_q(acc, p_mean, seed=None, t: int = 0):
    seed = [0] if seed is None else list(seed)
    P = orthogonalize(p_mean, seed=seed + [t, 3])
    return P, matmul(acc, P, transpose_a=True)


def powersgd_finish(state: LowRankState, acc, P, q_mean, ef: bool = False):
    new = state.copy()
    new.P = P
    new.Q = np.asarray(q_mean, dtype=DTYPE).reshape(state.Q.shape)
    new.t = state.t + 1
    decoded = matmul(new.P, new.Q, transpose_b=True)
    if ef:
        new.E = (acc - decoded).astype(DTYPE)
    return decoded, new


def powersgd_step(state: LowRankState, M, group, ef: bool = False, reuse: bool = True, seed=None):
    """Compute P, aggregate P, orthogonalize, compute Q, aggregate Q."""
    p = group.world_size
    acc, P = powersgd_encode(state, M, ef, reuse, seed)
    P = group.ring_all_reduce(P.reshape(-1), stream=P_STREAM).reshape(P.shape) / p
    P, Q = powersgd_compute_q(acc, P, seed, state.t + 1)
    Q = group.ring_all_reduce(Q.reshape(-1), stream=Q_STREAM).reshape(Q.shape) / p
    return powersgd_finish(state, acc, P, Q, ef)


# --------------------------------------------------------------------------
# compression ratio


def compression_ratio(shapes: Sequence[ShapePolicy], kind, rank: int | None = None, k: int | None = None) -> float:
    kind = Kind.parse(kind)
    if not shapes:
        raise CompressionError("no shapes given")
    total = sum(s.numel for s in shapes)
    if kind is Kind.IDENTITY:
        return 1.0
    if kind is Kind.SIGN_MAJORITY:
        return 32.0
    if kind is Kind.TOPK_SAMPLED:
        if k is None or not 1 <= k <= total:
            raise CompressionError(f"k must be in [1, {total}]")
        return total / k
    if rank is None or rank < 1:
        raise CompressionError("rank must be >= 1")
    compressed = 0
    for s in shapes:
        if not s.compressible:
            compressed += s.numel
            continue
        if rank > min(s.n, s.m):
            raise CompressionError(f"rank {rank} exceeds min({s.n}, {s.m}) for shape {s.shape}")
        compressed += (s.n + s.m) * rank
    ratio = total / compressed
    if ratio < 1:
        warnings.warn(f"rank {rank} expands the gradient (ratio {ratio:.3f})", stacklevel=2)
    return ratio


# --------------------------------------------------------------------------
# per-layer compressors driven by the overlap engine


@dataclass
class Message:
    layer: str
    stream: str
    data: object
    nbytes: int
    phase: int = 0
    elements: int = 0


@dataclass
class CompressorConfig:
    kind: Kind = Kind.IDENTITY
    rank: int = 4
    topk_density: float = 0.001
    sample_fraction: float = 0.01
    max_rounds: int = 32
    ef: bool | None = None  # None picks the per-kind default
    reuse: bool = True
    seed: int = 0

    def __post_init__(self):
        self.kind = Kind.parse(self.kind)
        if self.rank < 1:
            raise CompressionError("rank must be >= 1")
        if not 0 < self.topk_density <= 1:
            raise CompressionError("topk density must be in (0, 1]")

    @property
    def error_feedback(self) -> bool:
        if self.ef is not None:
            return self.ef
        return self.kind in (Kind.TOPK_SAMPLED, Kind.POWERSGD, Kind.ACPSGD_EF)


class Compressor:
    """Base class: plain mean all-reduce of every gradient (S-SGD)."""

    collective = "all_reduce"

    def __init__(self, config: CompressorConfig, world_size: int = 1):
        self.config = config
        self.kind = config.kind
        self.world_size = world_size
        self.shapes: dict[str, ShapePolicy] = {}
        self.decoded: dict[str, np.ndarray] = {}

    def setup(self, params: Sequence[tuple[str, tuple[int, ...]]]) -> None:
        for name, shape in params:
            self.shapes[name] = reshape_to_matrix(shape)

    def stream_items(self, ready_order: Sequence[str], step: int) -> dict[str, list[tuple[str, int]]]:
        """Per stream, the (layer, payload bytes) messages encoded at this step, in ready order."""
        return {DENSE_STREAM: [(name, 4 * self.shapes[name].numel) for name in ready_order]}

    def follow_up_streams(self) -> set[str]:
        """Streams whose messages are produced from another collective's result."""
        return set()

    def encode(self, name: str, grad: np.ndarray, step: int) -> list[Message]:
        flat = np.asarray(grad, dtype=DTYPE).reshape(-1)
        return [Message(name, DENSE_STREAM, flat, 4 * flat.size, elements=flat.size)]

    def aggregated(self, msg: Message, result: np.ndarray, step: int) -> list[Message]:
        """Consume a message's all-reduce SUM (or decoded all-gather mean)."""
        self.decoded[msg.layer] = result / self.world_size
        return []

    def decode(self, name: str) -> np.ndarray:
        return self.decoded.pop(name).reshape(self.shapes[name].shape)

    # all-gather kinds override these
    def pack(self, msgs: Sequence[Message]) -> bytes:
        raise NotImplementedError

    def unpack(self, msgs: Sequence[Message], gathered: Sequence[bytes]) -> list[np.ndarray]:
        raise NotImplementedError


class SignCompressor(Compressor):
    collective = "all_gather"

    def __init__(self, config, world_size=1):
        super().__init__(config, world_size)
        self.errors: dict[str, np.ndarray] = {}

    def stream_items(self, ready_order, step):
        return {DENSE_STREAM: [(n, math.ceil(self.shapes[n].numel / 8)) for n in ready_order]}

    def encode(self, name, grad, step):
        acc = np.asarray(grad, dtype=DTYPE).reshape(-1)
        if self.config.error_feedback:
            acc = acc + self.errors.get(name, 0)
            self.errors[name] = acc - np.where(acc >= 0, 1.0, -1.0).astype(DTYPE)
        return [Message(name, DENSE_STREAM, acc, math.ceil(acc.size / 8), elements=acc.size)]

    def pack(self, msgs):
        return sign_encode(np.concatenate([m.data for m in msgs])).bits

    def unpack(self, msgs, gathered):
        count = sum(m.data.size for m in msgs)
        votes = sign_majority_decode([SignPayload(b, count) for b in gathered])
        return np.split(votes, np.cumsum([m.data.size for m in msgs])[:-1])

    def aggregated(self, msg, result, step):
        self.decoded[msg.layer] = result
        return []


class TopKCompressor(Compressor):
    collective = "all_gather"

    def __init__(self, config, world_size=1):
        super().__init__(config, world_size)
        self.errors: dict[str, np.ndarray] = {}

    def k_for(self, name: str) -> int:
        n = self.shapes[name].numel
        return min(n, max(1, math.ceil(self.config.topk_density * n)))

    def stream_items(self, ready_order, step):
        return {DENSE_STREAM: [(n, 8 * self.k_for(n)) for n in ready_order]}

    def encode(self, name, grad, step):
        acc = np.asarray(grad, dtype=DTYPE).reshape(-1)
        if self.config.error_feedback:
            acc = acc + self.errors.get(name, 0)
        rng = np.random.default_rng(layer_seed(self.config.seed, name, step))
        sel = topk_encode(acc, self.k_for(name), self.config.sample_fraction, self.config.max_rounds, rng)
        if self.config.error_feedback:
            self.errors[name] = acc - sel.densify(acc.size)
        return [Message(name, DENSE_STREAM, sel, 8 * sel.k, elements=2 * sel.k)]

    def _sizes(self, msgs):
        return [self.shapes[m.layer].numel for m in msgs]

    def pack(self, msgs):
        offsets = np.concatenate([[0], np.cumsum(self._sizes(msgs))[:-1]])
        idx = np.concatenate([m.data.indices.astype(np.int64) + off for m, off in zip(msgs, offsets)])
        val = np.concatenate([m.data.values for m in msgs])
        return SparsePayload(idx.astype(np.uint32), val).to_bytes()

    def unpack(self, msgs, gathered):
        sizes = self._sizes(msgs)
        dense = topk_decode([SparsePayload.from_bytes(b) for b in gathered], sum(sizes))
        return np.split(dense, np.cumsum(sizes)[:-1])

    def aggregated(self, msg, result, step):
        self.decoded[msg.layer] = result
        return []


class _LowRankBase(Compressor):
    def __init__(self, config, world_size=1):
        super().__init__(config, world_size)
        self.states: dict[str, LowRankState] = {}
        self.last_local: dict[str, np.ndarray] = {}

    def setup(self, params):
        super().setup(params)
        for name, _ in params:
            s = self.shapes[name]
            if s.compressible:
                r = min(self.config.rank, s.n, s.m)
                self.states[name] = LowRankState.init(s.n, s.m, r, layer_seed(self.config.seed, name))

    def rank_of(self, name):
        return self.states[name].rank

    def _dense(self, name, grad):
        flat = np.asarray(grad, dtype=DTYPE).reshape(-1)
        return [Message(name, DENSE_STREAM, flat, 4 * flat.size, elements=flat.size)]

    def _matrix(self, name, grad):
        s = self.shapes[name]
        return np.asarray(grad, dtype=DTYPE).reshape(s.n, s.m)


class PowerSGDCompressor(_LowRankBase):
    def __init__(self, config, world_size=1):
        super().__init__(config, world_size)
        self._acc: dict[str, np.ndarray] = {}
        self._P: dict[str, np.ndarray] = {}

    def stream_items(self, ready_order, step):
        items = {P_STREAM: [], Q_STREAM: [], DENSE_STREAM: []}
        for name in ready_order:
            s = self.shapes[name]
            if s.compressible:
                r = self.rank_of(name)
                items[P_STREAM].append((name, 4 * s.n * r))
                items[Q_STREAM].append((name, 4 * s.m * r))
            else:
                items[DENSE_STREAM].append((name, 4 * s.numel))
        return {k: v for k, v in items.items() if v}

    def follow_up_streams(self):
        return {Q_STREAM}

    def encode(self, name, grad, step):
        if not self.shapes[name].compressible:
            return self._dense(name, grad)
        st = self.states[name]
        acc, P = powersgd_encode(st, self._matrix(name, grad), self.config.error_feedback,
                                 self.config.reuse, layer_seed(self.config.seed, name))
        self._acc[name] = acc
        return [Message(name, P_STREAM, P.reshape(-1), 4 * P.size, elements=P.size)]

    def aggregated(self, msg, result, step):
        name = msg.layer
        if msg.stream == DENSE_STREAM:
            return super().aggregated(msg, result, step)
        st = self.states[name]
        p = self.world_size
        if msg.stream == P_STREAM:
            P, Q = powersgd_compute_q(self._acc[name], result.reshape(st.P.shape) / p,
                                      layer_seed(self.config.seed, name), st.t + 1)
            self._P[name] = P
            return [Message(name, Q_STREAM, Q.reshape(-1), 4 * Q.size, phase=1, elements=Q.size)]
        decoded, self.states[name] = powersgd_finish(
            st, self._acc.pop(name), self._P.pop(name), result.reshape(st.Q.shape) / p, self.config.error_feedback)
        self.decoded[name] = decoded
        return []


class ACPSGDCompressor(_LowRankBase):
    def stream_items(self, ready_order, step):
        stream = P_STREAM if acp_uses_p(step) else Q_STREAM
        items = {stream: [], DENSE_STREAM: []}
        for name in ready_order:
            s = self.shapes[name]
            if s.compressible:
                side = s.n if stream == P_STREAM else s.m
                items[stream].append((name, 4 * side * self.rank_of(name)))
            else:
                items[DENSE_STREAM].append((name, 4 * s.numel))
        return {k: v for k, v in items.items() if v}

    def encode(self, name, grad, step):
        if not self.shapes[name].compressible:
            return self._dense(name, grad)
        st = self.states[name]
        if st.t + 1 != step:
            raise CompressionError(f"layer {name} is at step {st.t}, engine asked for step {step}")
        local, self.states[name], approx = acpsgd_encode(
            st, self._matrix(name, grad), self.config.error_feedback, self.config.reuse,
            layer_seed(self.config.seed, name))
        self.last_local[name] = approx
        stream = P_STREAM if acp_uses_p(step) else Q_STREAM
        return [Message(name, stream, local.reshape(-1), 4 * local.size, elements=local.size)]

    def aggregated(self, msg, result, step):
        if msg.stream == DENSE_STREAM:
            return super().aggregated(msg, result, step)
        decoded, self.states[msg.layer] = acpsgd_finish(self.states[msg.layer], result / self.world_size)
        self.decoded[msg.layer] = decoded
        return []


_CLASSES = {
    Kind.IDENTITY: Compressor,
    Kind.SIGN_MAJORITY: SignCompressor,
    Kind.TOPK_SAMPLED: TopKCompressor,
    Kind.POWERSGD: PowerSGDCompressor,
    Kind.ACPSGD_EF: ACPSGDCompressor,
}


def make_compressor(config: CompressorConfig, world_size: int = 1) -> Compressor:
    return _CLASSES[config.kind](config, world_size)
