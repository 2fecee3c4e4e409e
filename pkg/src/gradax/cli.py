"""``gradax`` command line: train, bench, predict, sweep and stats.

Exit codes: 0 ok, 1 usage or invalid configuration, 2 training diverged,
3 transport failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import perfmodel as pm
from .collectives import CollectiveError, ProcessGroup, TcpTransport, inproc_groups, run_workers
from .compressors import Kind
from .data import DataError, load_dataset, parse_synthetic, synthetic_gaussian
from .overlap import MB, ScheduleMode
from .timeline import Timeline
from .trainer import DivergenceError, ModelSpec, TrainConfig, TrainReport, train, train_worker

log = logging.getLogger("gradax")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_TRANSPORT = 0, 1, 2, 3

# class-mean distance of the default synthetic task
DEFAULT_SEPARATION = 3.0

TRAFFIC_FIELDS = ["worker", "op", "stream", "calls", "elements", "bytes_sent", "bytes_received"]
BENCH_FIELDS = ["op", "bytes", "workers", "repeats", "median_s", "iqr_s", "unfused_pair_median_s", "bytes_sent"]
CDF_FIELDS = ["series", "tensor", "elements", "cumulative_fraction"]
SWEEP_FIELDS = ["axis", "value", "method", "mode", "rank", "workers", "buffer_bytes", "iteration_s",
                "compute_s", "compress_s", "nonoverlapped_comm_s", "launches", "volume_elements"]


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# CSV helpers: floats are written with repr so they read back bit-exact


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_csv(path, fields, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_cell(r[k]) for k in fields])


def _parse_cell(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def read_csv(path) -> list[dict]:
    """Rows of a CSV written by this tool, with int/float columns converted back."""
    with open(path, newline="") as f:
        return [{k: _parse_cell(v) for k, v in row.items()} for row in csv.DictReader(f)]


def _dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    vals = _floats(text)
    if any(v != int(v) for v in vals):
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}")
    return [int(v) for v in vals]


def _common(p: argparse.ArgumentParser, method_default="acpsgd"):
    p.add_argument("--method", choices=[k.value for k in Kind], default=method_default)
    p.add_argument("--rank", type=int, default=4, help="low-rank factor width r")
    p.add_argument("--topk", type=float, default=0.001, help="top-k density k/N")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--mode", choices=[m.value for m in ScheduleMode], default="wfbp-tf")
    p.add_argument("--buffer-mb", type=float, default=25.0, help="fusion buffer, 'inf' for one bucket")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", type=Path, default=Path("."))


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="gradax", description="Compressed data-parallel SGD experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train an MLP with simulated or TCP workers")
    _common(t)
    t.add_argument("--transport", choices=["inproc", "tcp"], default="inproc")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch", type=int, default=32, help="per-worker batch size")
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--warmup", type=int, default=5)
    t.add_argument("--hidden", type=_ints, default=[64], help="hidden widths, e.g. 64,64")
    t.add_argument("--data", default=None, help="synthetic:..., a CSV file or an IDX image file")
    t.add_argument("--labels", default=None, help="label file for CSV/IDX input")
    t.add_argument("--eval-data", default=None)
    t.add_argument("--eval-labels", default=None)
    t.add_argument("--no-ef", dest="ef", action="store_false", default=None)
    t.add_argument("--ef", dest="ef", action="store_true")
    t.add_argument("--no-reuse", dest="reuse", action="store_false", default=True)
    t.add_argument("--timeout", type=float, default=30.0)
    # set on subprocesses spawned by --transport tcp
    t.add_argument("--worker-rank", type=int, default=None, help=argparse.SUPPRESS)
    t.add_argument("--world", type=int, default=None, help=argparse.SUPPRESS)

    b = sub.add_parser("bench", help="time collectives over a size grid")
    b.add_argument("--workers", type=int, default=2)
    b.add_argument("--sizes-kb", type=_floats, default=[32.0, 64.0])
    b.add_argument("--repeats", type=int, default=20)
    b.add_argument("--op", choices=["allreduce", "allgather", "both"], default="allreduce")
    b.add_argument("--out", type=Path, default=Path("."))

    pr = sub.add_parser("predict", help="cost-model prediction of one iteration")
    _common(pr)
    _model_args(pr)

    s = sub.add_parser("sweep", help="cost-model sweep over one axis")
    _common(s)
    _model_args(s)
    s.add_argument("--axis", choices=["buffer-size", "rank", "workers", "alpha", "beta"], required=True)
    s.add_argument("--values", type=_floats, required=True,
                   help="grid points; buffer-size in MB ('inf' allowed), alpha/beta in seconds")
    s.add_argument("--methods", default=None, help="comma separated methods, default --method")

    st = sub.add_parser("stats", help="tensor-size CDF of M, P and Q")
    st.add_argument("--widths", type=_ints, default=[32, 64, 64, 2])
    st.add_argument("--rank", type=int, default=4)
    st.add_argument("--out", type=Path, default=Path("."))
    return ap


def _model_args(p):
    p.add_argument("--profile", type=Path, default=None, help="layer profile JSON")
    p.add_argument("--model", choices=["bert-large", "mlp"], default="bert-large")
    p.add_argument("--widths", type=_ints, default=[32, 64, 64, 2], help="widths for --model mlp")
    p.add_argument("--alpha", type=float, default=pm.DEFAULT_ALPHA)
    p.add_argument("--beta", type=float, default=pm.DEFAULT_BETA)
    p.add_argument("--interference", type=float, default=pm.INTERFERENCE)


def _buffer_bytes(mb: float) -> float:
    if mb < 0:
        raise UsageError("buffer size must be nonnegative")
    return math.inf if math.isinf(mb) else mb * MB


# --------------------------------------------------------------------------
# train


def _train_setup(a):
    if a.workers < 1:
        raise UsageError("workers must be ≥ 1")
    if a.rank < 1:
        raise UsageError("rank must be ≥ 1")
    if not 0 < a.topk <= 1:
        raise UsageError("topk density must be in (0, 1]")
    if a.data is None:
        data = synthetic_gaussian(seed=a.seed, separation=DEFAULT_SEPARATION)
        eval_data = synthetic_gaussian(seed=a.seed, separation=DEFAULT_SEPARATION, draw=1)
    else:
        data = load_dataset(a.data, a.labels)
        if a.eval_data is not None:
            eval_data = load_dataset(a.eval_data, a.eval_labels)
        elif a.data.startswith("synthetic"):
            eval_data = synthetic_gaussian(**{**parse_synthetic(a.data), "draw": 1})
        else:
            eval_data = data
    spec = ModelSpec([data.dim, *a.hidden, data.num_classes], seed=a.seed)
    try:
        cfg = TrainConfig(epochs=a.epochs, batch_size=a.batch, base_lr=a.lr, momentum=a.momentum,
                          warmup_epochs=a.warmup, kind=a.method, rank=a.rank, topk_density=a.topk, ef=a.ef,
                          reuse=a.reuse, mode=a.mode, buffer_bytes=_buffer_bytes(a.buffer_mb),
                          world_size=a.workers, seed=a.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    return spec, data, eval_data, cfg


def traffic_rows(report: TrainReport) -> list[dict]:
    rows = []
    for w, stats in enumerate(report.traffic):
        agg: dict[tuple[str, str], dict] = {}
        for r in stats.records:
            d = agg.setdefault((r.op, r.stream), {"worker": w, "op": r.op, "stream": r.stream, "calls": 0,
                                                  "elements": 0, "bytes_sent": 0, "bytes_received": 0})
            d["calls"] += 1
            d["elements"] += r.elements
            d["bytes_sent"] += r.bytes_sent
            d["bytes_received"] += r.bytes_received
        rows += [agg[k] for k in sorted(agg)]
    return rows


def write_train_outputs(out: Path, report: TrainReport) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "report.json", report.to_dict())
    write_csv(out / "traffic.csv", TRAFFIC_FIELDS, traffic_rows(report))
    report.timeline.to_csv(out / "timeline.csv")
    _dump_json(out / "timing.json", {"wall_seconds": report.wall_seconds})


def cmd_train(a, argv) -> int:
    spec, data, eval_data, cfg = _train_setup(a)
    if a.worker_rank is not None:
        return _tcp_worker(a, spec, data, eval_data, cfg)
    if a.transport == "tcp" and a.workers > 1:
        return _tcp_launch(a, argv)
    report = train(spec, data, cfg, eval_data, groups=inproc_groups(a.workers, a.timeout))
    write_train_outputs(a.out, report)
    print(f"final_accuracy={report.final_accuracy:.4f} final_loss={report.final_loss:.6f}")
    return EXIT_OK


def _tcp_worker(a, spec, data, eval_data, cfg) -> int:
    world = a.world or a.workers
    transport = TcpTransport(a.worker_rank, world, timeout=a.timeout)
    group = ProcessGroup(a.worker_rank, world, transport, a.timeout)
    try:
        report = train_worker(group, spec, data, cfg, eval_data)
    finally:
        group.close()
    write_train_outputs(a.out / f"worker{a.worker_rank}", report)
    return EXIT_OK


def _tcp_launch(a, argv) -> int:
    """Spawn one subprocess per rank and merge their outputs."""
    cmd = [sys.executable, "-m", "gradax.cli", "train", *argv]
    procs = [subprocess.Popen(cmd + ["--worker-rank", str(r), "--world", str(a.workers)])
             for r in range(a.workers)]
    codes = [p.wait() for p in procs]
    bad = [c for c in codes if c != 0]
    if bad:
        return EXIT_DIVERGED if EXIT_DIVERGED in bad else max(bad)
    rep0 = json.loads((a.out / "worker0" / "report.json").read_text())
    traffic, timeline = [], Timeline()
    for r in range(a.workers):
        wdir = a.out / f"worker{r}"
        for row in read_csv(wdir / "traffic.csv"):
            traffic.append({**row, "worker": r})
        timeline.extend(Timeline.from_csv(wdir / "timeline.csv"))
    rep0["traffic"] = [json.loads((a.out / f"worker{r}" / "report.json").read_text())["traffic"][0] | {"worker": r}
                       for r in range(a.workers)]
    _dump_json(a.out / "report.json", rep0)
    write_csv(a.out / "traffic.csv", TRAFFIC_FIELDS, traffic)
    timeline.to_csv(a.out / "timeline.csv")
    print(f"final_accuracy={rep0['final_accuracy']:.4f} final_loss={rep0['final_loss']:.6f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# bench


def _time_op(group, op, nbytes, repeats, split=1):
    n = max(1, int(nbytes) // 4)
    buf = np.ones(n, dtype=np.float32)
    parts = np.array_split(buf, split)
    times = []
    for _ in range(repeats):
        group.barrier()
        t0 = time.perf_counter()
        for part in parts:
            if op == "allreduce":
                group.ring_all_reduce(part)
            else:
                group.all_gather(part.tobytes())
        times.append(time.perf_counter() - t0)
    return times


def cmd_bench(a, argv) -> int:
    if a.workers < 1 or a.repeats < 1 or not a.sizes_kb:
        raise UsageError("need workers ≥ 1, repeats ≥ 1 and a nonempty size grid")
    ops = ["allreduce", "allgather"] if a.op == "both" else [a.op]
    groups = inproc_groups(a.workers)

    def body(group):
        out = []
        for op in ops:
            for kb in a.sizes_kb:
                nbytes = int(kb * 1024)
                sent0 = group.traffic_report().bytes_sent
                fused = _time_op(group, op, nbytes, a.repeats)
                sent = (group.traffic_report().bytes_sent - sent0) // a.repeats
                unfused = _time_op(group, op, nbytes, a.repeats, split=2)
                out.append((op, nbytes, fused, unfused, sent))
        return out

    results = run_workers(groups, body)[0]
    rows = []
    for op, nbytes, fused, unfused, sent in results:
        q1, med, q3 = np.percentile(fused, [25, 50, 75])
        rows.append({"op": op, "bytes": nbytes, "workers": a.workers, "repeats": a.repeats, "median_s": float(med),
                     "iqr_s": float(q3 - q1), "unfused_pair_median_s": float(np.median(unfused)), "bytes_sent": sent})
    a.out.mkdir(parents=True, exist_ok=True)
    write_csv(a.out / "bench.csv", BENCH_FIELDS, rows)
    ar = [(r["bytes"], r["median_s"]) for r in rows if r["op"] == "allreduce"]
    if a.workers >= 2 and len({b for b, _ in ar}) >= 2:
        cm = pm.fit_alpha_beta(ar, a.workers)
        _dump_json(a.out / "fit.json", {"alpha": cm.alpha, "beta": cm.beta, "p": cm.p, "residual": cm.residual})
    for r in rows:
        print(f"{r['op']} {r['bytes']} B median {r['median_s'] * 1e3:.3f} ms")
    return EXIT_OK


# --------------------------------------------------------------------------
# predict / sweep


def _profiles(a, rank=None):
    rank = a.rank if rank is None else rank
    if a.profile is not None:
        return pm.load_profiles(a.profile)
    if a.model == "mlp":
        return pm.mlp_profiles(a.widths, rank)
    return pm.transformer_profiles(rank=rank)


def _predict_row(profiles, method, mode, cm, buffer_bytes, interference, topk, scale_buffer=True):
    kw = dict(buffer_bytes=buffer_bytes, interference=interference, topk_density=topk, scale_buffer=scale_buffer)
    preds = [pm.predict_iteration(profiles, method, mode, cm, step=s, **kw) for s in (1, 2)]
    avg = {k: sum(p.breakdown[k] for p in preds) / 2 for k in preds[0].breakdown}
    return preds, {"iteration_s": sum(p.iteration_s for p in preds) / 2, **avg,
                   "launches": sum(p.launches for p in preds) / 2,
                   "volume_elements": pm.predicted_volume(profiles, method, cm) / 4}


def cmd_predict(a, argv) -> int:
    cm = pm.CostModel(a.alpha, a.beta, a.workers)
    profiles = _profiles(a)
    preds, row = _predict_row(profiles, a.method, a.mode, cm, _buffer_bytes(a.buffer_mb), a.interference, a.topk)
    a.out.mkdir(parents=True, exist_ok=True)
    preds[0].timeline.to_csv(a.out / "timeline.csv")
    _dump_json(a.out / "predict.json", {"method": a.method, "mode": a.mode, "workers": a.workers,
                                        "alpha": a.alpha, "beta": a.beta, **row})
    print(f"predicted iteration {row['iteration_s'] * 1e3:.3f} ms")
    return EXIT_OK


def cmd_sweep(a, argv) -> int:
    if not a.values:
        raise UsageError("empty sweep grid")
    methods = a.methods.split(",") if a.methods else [a.method]
    for m in methods:
        Kind.parse(m)
    rows = []
    for method in methods:
        for v in a.values:
            rank, workers, alpha, beta, buf = a.rank, a.workers, a.alpha, a.beta, _buffer_bytes(a.buffer_mb)
            if a.axis == "buffer-size":
                buf = _buffer_bytes(v)
            elif a.axis == "rank":
                rank = int(v)
            elif a.axis == "workers":
                workers = int(v)
            elif a.axis == "alpha":
                alpha = v
            else:
                beta = v
            if rank < 1 or workers < 1:
                raise UsageError("rank and workers must be ≥ 1")
            cm = pm.CostModel(alpha, beta, workers)
            # a swept buffer size is taken literally rather than scaled by the compression rate
            _, row = _predict_row(_profiles(a, rank), method, a.mode, cm, buf, a.interference, a.topk,
                                  scale_buffer=a.axis != "buffer-size")
            rows.append({"axis": a.axis, "value": v, "method": method, "mode": a.mode, "rank": rank,
                         "workers": workers, "buffer_bytes": buf, **row})
    a.out.mkdir(parents=True, exist_ok=True)
    write_csv(a.out / "sweep.csv", SWEEP_FIELDS, rows)
    for r in rows:
        print(f"{r['method']} {a.axis}={r['value']:g}: {r['iteration_s'] * 1e3:.3f} ms")
    return EXIT_OK


# --------------------------------------------------------------------------
# stats


def cdf_rows(widths, rank: int) -> list[dict]:
    """Element counts of every weight/bias (series M) and P/Q factor (series PQ), each with its CDF."""
    if rank < 1:
        raise UsageError("rank must be ≥ 1")
    spec = ModelSpec(widths)
    m_rows, pq_rows = [], []
    for i, (fin, fout) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        m_rows.append((f"fc{i}.weight", fin * fout))
        m_rows.append((f"fc{i}.bias", fout))
        r = min(rank, fin, fout)
        pq_rows.append((f"fc{i}.weight.P", fout * r))
        pq_rows.append((f"fc{i}.weight.Q", fin * r))
    out = []
    for series, items in (("M", m_rows), ("PQ", pq_rows)):
        items = sorted(items, key=lambda t: (t[1], t[0]))
        for j, (name, n) in enumerate(items, 1):
            out.append({"series": series, "tensor": name, "elements": n,
                        "cumulative_fraction": j / len(items)})
    return out


def cmd_stats(a, argv) -> int:
    rows = cdf_rows(a.widths, a.rank)
    a.out.mkdir(parents=True, exist_ok=True)
    write_csv(a.out / "cdf.csv", CDF_FIELDS, rows)
    print(f"{len(rows)} rows written to {a.out / 'cdf.csv'}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "bench": cmd_bench, "predict": cmd_predict, "sweep": cmd_sweep, "stats": cmd_stats}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        a = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[a.command](a, argv[argv.index(a.command) + 1:] if a.command in argv else argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CollectiveError, ConnectionError) as e:
        print(f"error: transport failure: {e}", file=sys.stderr)
        return EXIT_TRANSPORT


if __name__ == "__main__":
    sys.exit(main())
