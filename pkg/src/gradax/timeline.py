"""Per-worker task timelines and the non-overlapped time breakdown.

Live runs and the cost-model simulator both produce :class:`Timeline`
objects, so the same CSV/JSON exports and breakdown apply to either.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

FF = "FF"
BP = "BP"
COMPRESS = "COMPRESS"
COLLECTIVE = "COLLECTIVE"
DECODE = "DECODE"
UPDATE = "UPDATE"
KINDS = (FF, BP, COMPRESS, COLLECTIVE, DECODE, UPDATE)

COMPUTE_CONTEXT = "compute"
COMM_CONTEXT = "comm"

CSV_FIELDS = ["worker", "kind", "id", "start_s", "end_s", "context", "bytes"]


class MalformedTimelineError(ValueError):
    pass


@dataclass
class Event:
    worker: int
    kind: str
    id: str
    start: float
    end: float
    context: str = COMPUTE_CONTEXT
    bytes: int = 0

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class Timeline:
    events: list[Event] = field(default_factory=list)

    def add(self, worker, kind, id, start, end, context=COMPUTE_CONTEXT, nbytes=0) -> Event:
        ev = Event(worker, kind, str(id), float(start), float(end), context, int(nbytes))
        self.events.append(ev)
        return ev

    def extend(self, other: "Timeline") -> None:
        self.events.extend(other.events)

    def of_kind(self, *kinds, worker=None) -> list[Event]:
        return [e for e in self.events if e.kind in kinds and (worker is None or e.worker == worker)]

    def workers(self) -> list[int]:
        return sorted({e.worker for e in self.events})

    def span(self) -> float:
        if not self.events:
            return 0.0
        return max(e.end for e in self.events) - min(e.start for e in self.events)

    def shifted(self, offset: float) -> "Timeline":
        return Timeline([Event(e.worker, e.kind, e.id, e.start + offset, e.end + offset, e.context, e.bytes)
                         for e in self.events])

    # -- export

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for e in self.events:
            w.writerow([e.worker, e.kind, e.id, repr(e.start), repr(e.end), e.context, e.bytes])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "Timeline":
        return cls.parse_csv(Path(path).read_text())

    @classmethod
    def parse_csv(cls, text: str) -> "Timeline":
        rows = csv.DictReader(io.StringIO(text))
        return cls([Event(int(r["worker"]), r["kind"], r["id"], float(r["start_s"]), float(r["end_s"]),
                          r.get("context") or COMPUTE_CONTEXT, int(r.get("bytes") or 0)) for r in rows])

    def to_json(self, path=None) -> str:
        text = json.dumps([asdict(e) for e in self.events], indent=1)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text: str) -> "Timeline":
        return cls([Event(**d) for d in json.loads(text)])


def _union(intervals):
    out = []
    for s, e in sorted(intervals):
        if e <= s:
            continue
        if out and s <= out[-1][1]:
            out[-1][1] = max(out[-1][1], e)
        else:
            out.append([s, e])
    return out


def _length(intervals) -> float:
    return sum(e - s for s, e in intervals)


def _subtract(a, b):
    """Measure of union(a) minus union(b)."""
    a, b = _union(a), _union(b)
    total = 0.0
    j = 0
    for s, e in a:
        cur = s
        while j < len(b) and b[j][1] <= cur:
            j += 1
        k = j
        while k < len(b) and b[k][0] < e:
            if b[k][0] > cur:
                total += b[k][0] - cur
            cur = max(cur, b[k][1])
            k += 1
        if cur < e:
            total += e - cur
    return total


def check_well_formed(tl: Timeline) -> None:
    by_ctx: dict[tuple[int, str], list[Event]] = {}
    for e in tl.events:
        if e.kind not in KINDS:
            raise MalformedTimelineError(f"unknown event kind {e.kind!r}")
        if e.end < e.start:
            raise MalformedTimelineError(f"event {e.kind}:{e.id} ends before it starts")
        if e.kind != COLLECTIVE:
            by_ctx.setdefault((e.worker, e.context), []).append(e)
    for (worker, ctx), evs in by_ctx.items():
        evs.sort(key=lambda e: (e.start, e.end))
        for a, b in zip(evs, evs[1:]):
            if b.start < a.end - 1e-12:
                raise MalformedTimelineError(
                    f"worker {worker} {ctx} context: {a.kind}:{a.id} overlaps {b.kind}:{b.id}")


def measure_breakdown(tl: Timeline, worker: int | None = None) -> dict[str, float]:
    """Compute, compression and non-overlapped communication seconds for one worker.

    Communication only counts while some collective is active and no
    FF/BP/COMPRESS task is running on that worker.
    """
    check_well_formed(tl)
    if worker is None:
        ws = tl.workers()
        worker = ws[0] if ws else 0
    evs = [e for e in tl.events if e.worker == worker]
    compute = sum(e.duration for e in evs if e.kind in (FF, BP))
    compress = sum(e.duration for e in evs if e.kind in (COMPRESS, DECODE))
    comm = [(e.start, e.end) for e in evs if e.kind == COLLECTIVE]
    busy = [(e.start, e.end) for e in evs if e.kind in (FF, BP, COMPRESS)]
    return {"compute_s": compute, "compress_s": compress, "nonoverlapped_comm_s": _subtract(comm, busy)}
