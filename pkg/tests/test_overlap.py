import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradax import timeline as T
from gradax.collectives import inproc_groups, run_workers
from gradax.compressors import CompressorConfig, Kind, make_compressor
from gradax.overlap import (KB, MB, BucketPlan, OverlapEngine, PlanError, ScheduleMode, build_plans,
                            compressed_buffer_size, plan_buckets, run_iteration)
from gradax.timeline import measure_breakdown
from gradax.trainer import MLP, ModelSpec


def batch(rank, step, d=8, n=16, classes=3):
    rng = np.random.default_rng([rank, step])
    return rng.standard_normal((n, d)).astype(np.float32), rng.integers(0, classes, n)


def run_engine(kind, p, mode, buffer_bytes, steps=2, widths=(8, 16, 12, 3), bp_delay_s=0.0, **cfg):
    """Run ``steps`` iterations on p workers; returns per-rank lists of IterationResult."""
    spec = ModelSpec(list(widths), seed=3)

    def body(group):
        model = MLP(spec, bp_delay_s)
        comp = make_compressor(CompressorConfig(kind=kind, rank=2, topk_density=0.2, seed=1, **cfg), group.world_size)
        comp.setup(model.param_shapes())
        out = []
        with OverlapEngine(comp, group, mode, buffer_bytes) as eng:
            for s in range(1, steps + 1):
                x, y = batch(group.rank, s, widths[0], classes=widths[-1])
                out.append(eng.run_iteration(model, x, y, s))
        return out

    return run_workers(inproc_groups(p), body)


# -- buffer sizing and planning


def test_compressed_buffer_examples():
    assert round(compressed_buffer_size(25 * MB, 0.0064) / MB, 2) == 0.16
    assert round(compressed_buffer_size(25 * MB, 0.0107) / MB, 2) == 0.27
    assert compressed_buffer_size(25 * MB, 1.0) == 25 * MB
    assert compressed_buffer_size(25 * MB, 1e-9) == KB


@pytest.mark.parametrize("rate", [0, -0.1, 1.5])
def test_compressed_buffer_rejects_rates(rate):
    with pytest.raises(ValueError):
        compressed_buffer_size(25 * MB, rate)


def test_plan_examples():
    items = [("t1", int(0.10 * MB)), ("t2", int(0.10 * MB)), ("t3", int(0.05 * MB))]
    names = lambda plan: [[e.layer_id for e in b] for b in plan.buckets]
    assert names(plan_buckets(items, 0.16 * MB)) == [["t1", "t2"], ["t3"]]
    assert names(plan_buckets(items, 0)) == [["t1"], ["t2"], ["t3"]]
    assert names(plan_buckets(items, 1e9)) == [["t1", "t2", "t3"]]
    with pytest.raises(PlanError):
        plan_buckets([], 1)


def test_resnet50_like_model_gives_four_buckets():
    # 97.5 MB of gradients in many small tensors fuse into 4 buckets at 25 MB
    sizes = [int(97.5 * MB / 160)] * 160
    plan = plan_buckets([(f"t{i}", b) for i, b in enumerate(sizes)], 25 * MB)
    assert len(plan) == 4


@given(st.lists(st.integers(1, 5000), min_size=1, max_size=40), st.integers(0, 20000))
def test_plan_invariants(sizes, buf):
    plan = plan_buckets([(f"t{i}", b) for i, b in enumerate(sizes)], buf)
    assert plan.layers() == [f"t{i}" for i in range(len(sizes))]
    totals = plan.totals()
    assert all(t >= buf for t in totals[:-1])
    # sealing happens at the first tensor that reaches the buffer size
    for b in plan.buckets[:-1]:
        assert sum(e.nbytes for e in b[:-1]) < buf or len(b) == 1


# -- engine behaviour


@pytest.mark.parametrize("kind", [k.value for k in Kind])
def test_launch_counts_per_mode(kind):
    def launches(mode, buf):
        return run_engine(kind, 2, mode, buf, steps=2)[0]

    model = MLP(ModelSpec([8, 16, 12, 3]))
    comp = make_compressor(CompressorConfig(kind=kind, rank=2, topk_density=0.2), 2)
    comp.setup(model.param_shapes())
    for s, res in enumerate(launches(ScheduleMode.WFBP, 0), 1):
        assert res.launches == sum(len(v) for v in comp.stream_items(model.ready_order(), s).values())
    for s, res in enumerate(launches(ScheduleMode.NAIVE, 0), 1):
        assert res.launches == len(comp.stream_items(model.ready_order(), s))
    for s, res in enumerate(launches(ScheduleMode.WFBP_TF, 300), 1):
        plans = build_plans(comp, model.ready_order(), s, ScheduleMode.WFBP_TF, 300)
        assert res.launches == sum(len(pl) for pl in plans.values())


def test_acpsgd_uses_one_factor_stream_per_iteration():
    res = run_engine("acpsgd", 2, "wfbp", 0, steps=4)[0]
    for s, r in enumerate(res, 1):
        streams = {e.id.split("#")[0] for e in r.timeline.of_kind(T.COLLECTIVE)}
        assert streams == {"P-stream" if s % 2 else "Q-stream", "dense-stream"}


@pytest.mark.parametrize("kind,depth", [("powersgd", 2), ("acpsgd", 1), ("ssgd", 1), ("sign", 1), ("topk", 1)])
def test_dependency_depth(kind, depth):
    for r in run_engine(kind, 2, "wfbp-tf", 100, steps=2)[0]:
        assert r.deps.depth() == depth


def test_wfbp_overlaps_collective_with_backward():
    res = run_engine("ssgd", 2, "wfbp", 0, steps=1, widths=(8, 16, 3), bp_delay_s=0.05)
    tl = res[0][0].timeline
    bp0 = next(e for e in tl.of_kind(T.BP) if e.id == "fc0")
    coll = [e for e in tl.of_kind(T.COLLECTIVE) if e.start < bp0.end and e.end > bp0.start]
    assert coll, "the last layer's collective should run during the first layer's backward"
    assert measure_breakdown(tl)["nonoverlapped_comm_s"] < sum(e.duration for e in tl.of_kind(T.COLLECTIVE))


def test_naive_issues_nothing_during_backward():
    res = run_engine("ssgd", 2, "naive", 0, steps=1, widths=(8, 16, 3), bp_delay_s=0.01)
    tl = res[0][0].timeline
    bp_end = max(e.end for e in tl.of_kind(T.BP))
    assert min(e.start for e in tl.of_kind(T.COLLECTIVE)) >= bp_end


def test_single_worker_has_no_collective_bytes():
    for r in run_engine("acpsgd", 1, "wfbp-tf", 0)[0]:
        assert all(e.bytes == 0 for e in r.timeline.of_kind(T.COLLECTIVE))


@pytest.mark.parametrize("kind", [k.value for k in Kind])
def test_naive_and_fused_decode_the_same(kind):
    base = run_engine(kind, 2, "naive", math.inf, steps=3)
    fused = run_engine(kind, 2, "wfbp-tf", 200, steps=3)
    for a_rank, b_rank in zip(base, fused):
        for a, b in zip(a_rank, b_rank):
            for name in a.grads:
                np.testing.assert_allclose(a.grads[name], b.grads[name], atol=1e-5)


def test_fixed_plan_must_match_tensors():
    (g,) = inproc_groups(1)
    model = MLP(ModelSpec([4, 5, 2]))
    comp = make_compressor(CompressorConfig(), 1)
    comp.setup(model.param_shapes())
    bad = {"dense-stream": plan_buckets([("fc1.weight", 40)], 0)}
    x, y = batch(0, 1, 4, classes=2)
    with pytest.raises(PlanError):
        run_iteration(model, comp, g, "wfbp-tf", plan=bad, x=x, y=y)
    good = build_plans(comp, model.ready_order(), 1, "wfbp-tf", 0)
    res = run_iteration(model, comp, g, "wfbp-tf", plan=good, x=x, y=y)
    assert set(res.grads) == set(model.params)
    assert isinstance(good["dense-stream"], BucketPlan)


def test_timelines_are_well_formed():
    for r in run_engine("powersgd", 2, "wfbp-tf", 64, steps=2)[0]:
        T.check_well_formed(r.timeline)
        kinds = {e.kind for e in r.timeline.events}
        assert {T.FF, T.BP, T.COMPRESS, T.COLLECTIVE, T.DECODE} <= kinds


@settings(max_examples=10)
@given(st.sampled_from([k.value for k in Kind]), st.sampled_from(["naive", "wfbp", "wfbp-tf"]),
       st.integers(0, 400))
def test_mode_never_changes_values_single_worker(kind, mode, buf):
    ref = run_engine(kind, 1, "naive", math.inf, steps=2)[0]
    got = run_engine(kind, 1, mode, buf, steps=2)[0]
    for a, b in zip(ref, got):
        for name in a.grads:
            np.testing.assert_allclose(a.grads[name], b.grads[name], atol=1e-5)
