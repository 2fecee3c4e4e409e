import numpy as np
import pytest
from hypothesis import given, strategies as st

from gradax import timeline as T
from gradax.timeline import MalformedTimelineError, Timeline, measure_breakdown


def test_collective_inside_bp_is_hidden():
    tl = Timeline()
    tl.add(0, T.BP, "fc0", 0, 5)
    tl.add(0, T.COLLECTIVE, "b0", 1, 3, T.COMM_CONTEXT)
    assert measure_breakdown(tl) == {"compute_s": 5, "compress_s": 0, "nonoverlapped_comm_s": 0}


def test_partial_overlap():
    tl = Timeline()
    tl.add(0, T.COLLECTIVE, "b0", 0, 4, T.COMM_CONTEXT)
    tl.add(0, T.BP, "fc0", 0, 1)
    assert measure_breakdown(tl)["nonoverlapped_comm_s"] == 3


def test_concurrent_collectives_are_unioned():
    tl = Timeline()
    tl.add(0, T.COLLECTIVE, "P#0", 0, 3, T.COMM_CONTEXT)
    tl.add(0, T.COLLECTIVE, "dense#0", 2, 4, T.COMM_CONTEXT)
    tl.add(0, T.DECODE, "fc0", 3.5, 4, T.COMM_CONTEXT)
    # decode time does not hide communication
    assert measure_breakdown(tl)["nonoverlapped_comm_s"] == 4


def test_overlapping_compute_is_malformed():
    tl = Timeline()
    tl.add(0, T.BP, "fc1", 0, 2)
    tl.add(0, T.BP, "fc0", 1, 3)
    with pytest.raises(MalformedTimelineError):
        measure_breakdown(tl)
    tl = Timeline()
    tl.add(0, "NAP", "x", 0, 1)
    with pytest.raises(MalformedTimelineError):
        measure_breakdown(tl)


def sweep_oracle(tl, worker=0, step=1e-3):
    end = max(e.end for e in tl.events)
    ts = np.arange(0, end, step) + step / 2
    comm = np.zeros_like(ts, bool)
    busy = np.zeros_like(ts, bool)
    for e in tl.events:
        if e.worker != worker:
            continue
        inside = (ts >= e.start) & (ts < e.end)
        if e.kind == T.COLLECTIVE:
            comm |= inside
        elif e.kind in (T.FF, T.BP, T.COMPRESS):
            busy |= inside
    return float(np.count_nonzero(comm & ~busy)) * step


compute_events = st.lists(st.tuples(st.sampled_from([T.FF, T.BP, T.COMPRESS]), st.integers(0, 300)),
                          min_size=0, max_size=8)
comm_events = st.lists(st.tuples(st.integers(0, 400), st.integers(0, 200)), min_size=1, max_size=6)


@given(compute_events, comm_events)
def test_breakdown_matches_sweep_oracle(compute, comm):
    tl = Timeline()
    t = 0.0
    for kind, ms in compute:  # back to back on the compute context
        tl.add(0, kind, "x", t, t + ms / 1000)
        t += ms / 1000
    for start, ms in comm:
        tl.add(0, T.COLLECTIVE, "c", start / 1000, (start + ms) / 1000, T.COMM_CONTEXT)
    assert abs(measure_breakdown(tl)["nonoverlapped_comm_s"] - sweep_oracle(tl)) <= 1e-3


def test_csv_and_json_round_trip(tmp_path):
    tl = Timeline()
    tl.add(1, T.COLLECTIVE, "P-stream#0", 0.1, 0.30000000000000004, T.COMM_CONTEXT, 96)
    tl.add(0, T.BP, "fc,0", 1 / 3, 2 / 3)
    path = tmp_path / "t.csv"
    tl.to_csv(path)
    assert path.read_text().splitlines()[0] == "worker,kind,id,start_s,end_s,context,bytes"
    assert Timeline.from_csv(path) == tl
    assert Timeline.from_json(tl.to_json()) == tl


def test_parse_csv_accepts_five_column_files():
    text = "worker,kind,id,start_s,end_s\n0,BP,fc0,0.0,1.5\n"
    (e,) = Timeline.parse_csv(text).events
    assert (e.context, e.bytes, e.duration) == (T.COMPUTE_CONTEXT, 0, 1.5)


def test_shift_and_span():
    tl = Timeline()
    tl.add(0, T.FF, "f", 1, 2)
    tl.add(1, T.BP, "b", 2, 4)
    assert tl.span() == 3
    assert tl.shifted(1).events[0].start == 2
    assert tl.workers() == [0, 1]
    assert measure_breakdown(tl, worker=1)["compute_s"] == 2
