import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradax.collectives import inproc_groups, run_workers
from gradax.compressors import (CompressionError, CompressorConfig, Kind, LowRankState, SignPayload,
                                SparsePayload, acpsgd_step, compression_ratio, make_compressor, powersgd_step,
                                sign_encode, sign_majority_decode, sign_unpack, topk_decode, topk_encode)
from gradax.tensor import frobenius_distance, reshape_to_matrix, seeded_normal


def test_capability_flags():
    flags = {k: (k.additive, k.non_blocking) for k in Kind}
    assert flags == {
        Kind.IDENTITY: (True, True),
        Kind.SIGN_MAJORITY: (False, True),
        Kind.TOPK_SAMPLED: (False, True),
        Kind.POWERSGD: (True, False),
        Kind.ACPSGD_EF: (True, True),
    }
    assert Kind.parse("acpsgd") is Kind.ACPSGD_EF
    with pytest.raises(CompressionError):
        Kind.parse("svd")


# -- sign


def test_sign_encode_bits():
    pl = sign_encode([0.5, -0.2, 0.0, -3.0])
    assert pl.bits == bytes([0b0101])
    np.testing.assert_array_equal(sign_unpack(pl), [1, -1, 1, -1])


def test_sign_majority_and_tie():
    plus, minus = sign_encode([1.0]), sign_encode([-1.0])
    assert sign_majority_decode([plus, plus, minus])[0] == 1
    assert sign_majority_decode([plus, minus])[0] == 1
    assert sign_majority_decode([minus, minus, plus])[0] == -1


def test_sign_count_mismatch():
    with pytest.raises(CompressionError):
        sign_majority_decode([sign_encode([1.0]), sign_encode([1.0, 2.0])])


@given(st.lists(st.floats(-1e6, 1e6, width=32), min_size=1, max_size=200))
def test_sign_round_trip(xs):
    g = np.array(xs, dtype=np.float32)
    pl = sign_encode(g)
    assert pl.nbytes == math.ceil(g.size / 8)
    np.testing.assert_array_equal(sign_majority_decode([pl]), np.where(g >= 0, 1, -1))


# -- top-k


def exact_topk(g, k):
    order = np.lexsort((np.arange(g.size), -np.abs(g)))
    return np.sort(order[:k])


def test_topk_small_example():
    pl = topk_encode([0.1, -5, 3, 0.2], 2)
    assert pl.indices.tolist() == [1, 2]
    assert pl.values.tolist() == [-5, 3]


def test_topk_sampled_overlap_with_oracle():
    rng = np.random.default_rng(0)
    g = rng.standard_normal(10**5).astype(np.float32)
    pl = topk_encode(g, 100, sample_fraction=0.01, rng=np.random.default_rng(1))
    assert pl.k == 100
    assert np.all(np.diff(pl.indices.astype(np.int64)) > 0)
    overlap = len(set(pl.indices.tolist()) & set(exact_topk(g, 100).tolist()))
    assert overlap >= 90


@settings(max_examples=50)
@given(st.integers(1, 400), st.data())
def test_topk_full_sampling_is_exact(n, data):
    k = data.draw(st.integers(1, n))
    # small integers force ties
    g = np.array(data.draw(st.lists(st.integers(-5, 5), min_size=n, max_size=n)), dtype=np.float32)
    if not np.any(g):
        return
    pl = topk_encode(g, k, sample_fraction=1.0, max_rounds=math.inf)
    np.testing.assert_array_equal(pl.indices, exact_topk(g, k))
    np.testing.assert_array_equal(pl.values, g[pl.indices])


def test_topk_all_zero_and_errors():
    pl = topk_encode(np.zeros(10), 3)
    assert pl.indices.tolist() == [0, 1, 2] and not pl.values.any()
    with pytest.raises(CompressionError):
        topk_encode(np.ones(3), 4)
    with pytest.raises(CompressionError):
        topk_encode(np.ones(3), 1, sample_fraction=0)


def test_topk_decode_mean():
    a = SparsePayload(np.array([0], np.uint32), np.array([1.0], np.float32))
    b = SparsePayload(np.array([0], np.uint32), np.array([3.0], np.float32))
    np.testing.assert_array_equal(topk_decode([a, b], 3), [2, 0, 0])


def test_sparse_payload_bytes_round_trip():
    pl = topk_encode(np.arange(20, dtype=np.float32) - 7, 5)
    back = SparsePayload.from_bytes(pl.to_bytes())
    np.testing.assert_array_equal(back.indices, pl.indices)
    np.testing.assert_array_equal(back.values, pl.values)
    with pytest.raises(CompressionError):
        SparsePayload.from_bytes(pl.to_bytes()[:-1])


# -- low rank


class Solo:
    """Single-worker stand-in for a process group."""

    world_size = 1

    def ring_all_reduce(self, x, stream=None):
        return np.array(x, dtype=np.float32)


def test_powersgd_rank1_converges_to_best_error():
    M = np.diag([3.0, 2.0, 1.0]).astype(np.float32)
    st_ = LowRankState.init(3, 3, 1, seed=[5])
    errs = []
    for _ in range(20):
        dec, st_ = powersgd_step(st_, M, Solo())
        errs.append(frobenius_distance(M, dec))
    assert abs(errs[-1] - math.sqrt(5)) < 1e-3
    assert all(b <= a + 1e-6 for a, b in zip(errs, errs[1:]))


def test_powersgd_full_rank_is_exact():
    M = seeded_normal(6, 4, 3)
    dec, _ = powersgd_step(LowRankState.init(6, 4, 4, seed=[1]), M, Solo())
    assert frobenius_distance(M, dec) <= 1e-4 * np.linalg.norm(M)


def test_acpsgd_full_rank_odd_step():
    M = seeded_normal(5, 3, 2)
    E = seeded_normal(5, 3, 9) * 0.1
    state = LowRankState.init(5, 3, 3, seed=[1])
    state.E = E
    dec, new = acpsgd_step(state, M, Solo())
    np.testing.assert_allclose(dec, M + E, atol=1e-4)
    assert np.abs(new.E).max() < 1e-4
    assert new.t == 1


def test_acpsgd_alternates_factors():
    state = LowRankState.init(8, 6, 2, seed=[1])
    sizes = []

    class Counting(Solo):
        def ring_all_reduce(self, x, stream=None):
            sizes.append((stream, np.asarray(x).size))
            return super().ring_all_reduce(x)

    for s in range(4):
        _, state = acpsgd_step(state, seeded_normal(8, 6, s), Counting())
    assert sizes == [("P-stream", 16), ("Q-stream", 12), ("P-stream", 16), ("Q-stream", 12)]


def test_acpsgd_ef_telescoping():
    rng = np.random.default_rng(0)
    state = LowRankState.init(10, 7, 2, seed=[3])
    sum_m = np.zeros((10, 7))
    sum_d = np.zeros((10, 7))
    for _ in range(50):
        M = rng.standard_normal((10, 7)).astype(np.float32)
        dec, state = acpsgd_step(state, M, Solo())
        sum_m += M
        sum_d += dec
    np.testing.assert_allclose(state.E, sum_m - sum_d, atol=1e-4)


def test_halving_per_layer_counts():
    n = m = 1024
    r = 32
    counts = {}

    def counter(key):
        class Counting(Solo):
            def ring_all_reduce(self, x, stream=None):
                counts[key] = counts.get(key, 0) + np.asarray(x).size
                return super().ring_all_reduce(x)
        return Counting()

    M = seeded_normal(n, m, 0)
    for key, fn in (("acp", acpsgd_step), ("psgd", powersgd_step)):
        state = LowRankState.init(n, m, r, seed=[1])
        for _ in range(2):
            _, state = fn(state, M, counter(key))
    assert counts == {"acp": 65536, "psgd": 131072}


@pytest.mark.parametrize("step_fn", [powersgd_step, acpsgd_step])
def test_identical_inputs_match_single_worker(step_fn):
    Ms = [seeded_normal(6, 5, s) for s in range(6)]

    def trajectory(group):
        state = LowRankState.init(6, 5, 2, seed=[7])
        out = []
        for M in Ms:
            dec, state = step_fn(state, M, group)
            out.append(dec)
        return out

    solo = trajectory(Solo())
    for traj in run_workers(inproc_groups(2), trajectory):
        for a, b in zip(traj, solo):
            np.testing.assert_allclose(a, b, atol=1e-5)


def test_low_rank_state_validation():
    with pytest.raises(CompressionError):
        LowRankState.init(3, 2, 3, seed=0)
    state = LowRankState.init(3, 2, 1, seed=0)
    with pytest.raises(CompressionError):
        acpsgd_step(state, np.ones((2, 3)), Solo())


# -- compression ratio


def test_compression_ratio_examples():
    sq = [reshape_to_matrix((1024, 1024))]
    assert compression_ratio(sq, Kind.POWERSGD, rank=32) == 16.0
    assert compression_ratio(sq, Kind.SIGN_MAJORITY) == 32.0
    assert compression_ratio(sq, Kind.IDENTITY) == 1.0
    assert compression_ratio(sq, Kind.TOPK_SAMPLED, k=1024) == 1024.0
    with pytest.warns(UserWarning):
        assert compression_ratio([reshape_to_matrix((8, 8))], Kind.ACPSGD_EF, rank=8) == 0.5
    with pytest.raises(CompressionError):
        compression_ratio(sq, Kind.POWERSGD, rank=2000)


def test_compression_ratio_counts_vectors_at_full_size():
    shapes = [reshape_to_matrix((100, 50)), reshape_to_matrix((100,))]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert compression_ratio(shapes, Kind.POWERSGD, rank=2) == pytest.approx(5100 / (300 + 100))


# -- layer compressors


def test_default_error_feedback_per_kind():
    on = {k for k in Kind if CompressorConfig(kind=k).error_feedback}
    assert on == {Kind.TOPK_SAMPLED, Kind.POWERSGD, Kind.ACPSGD_EF}
    assert CompressorConfig(kind="acpsgd", ef=False).error_feedback is False


def test_rank_is_clamped_per_layer():
    comp = make_compressor(CompressorConfig(kind="acpsgd", rank=8), 1)
    comp.setup([("w", (2, 64)), ("b", (2,))])
    assert comp.rank_of("w") == 2
    assert "b" not in comp.states


def test_bias_travels_dense_under_low_rank():
    comp = make_compressor(CompressorConfig(kind="powersgd", rank=2), 1)
    comp.setup([("w", (6, 4)), ("b", (6,))])
    items = comp.stream_items(["w", "b"], 1)
    assert items == {"P-stream": [("w", 48)], "Q-stream": [("w", 32)], "dense-stream": [("b", 24)]}


def test_sign_payload_has_no_hidden_state_without_ef():
    comp = make_compressor(CompressorConfig(kind="sign"), 1)
    comp.setup([("w", (3, 3))])
    comp.encode("w", np.ones((3, 3)), 1)
    assert comp.errors == {}
    assert isinstance(SignPayload(b"", 0).nbytes, int)
