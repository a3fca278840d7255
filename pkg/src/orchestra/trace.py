"""Cluster event traces: CSV parsing, serialization and synthetic workloads.

Two event streams describe a trace. Machine events carry capacities and task
events carry resource demands, both as fractions of a reference machine.
Timestamps are integral seconds.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from orchestra.errors import ConfigError, OrderingError, ParseError, ValidationError

RESOURCES = ("cpu", "mem", "io")

MACHINE_HEADER = ("timestamp", "machine_id", "kind", "cpu_capacity", "mem_capacity", "io_capacity")
TASK_HEADER = (
    "timestamp", "job_id", "task_id", "tenant_id", "kind",
    "cpu_demand", "mem_demand", "io_demand", "duration",
)
MACHINE_KINDS = ("ADD", "REMOVE", "UPDATE")
TASK_KINDS = ("SUBMIT", "FINISH", "KILL")

MACHINE_FILE = "machine_events.csv"
TASK_FILE = "task_events.csv"

# same-second tie order: lifecycle starts before updates before ends
_MACHINE_RANK = {"ADD": 0, "UPDATE": 1, "REMOVE": 2}
_TASK_RANK = {"SUBMIT": 0, "FINISH": 1, "KILL": 1}


@dataclass(frozen=True)
class MachineEvent:
    timestamp: int
    machine_id: str
    kind: str
    cpu_capacity: float
    mem_capacity: float
    io_capacity: float

    @property
    def capacity(self):
        return (self.cpu_capacity, self.mem_capacity, self.io_capacity)


@dataclass(frozen=True)
class TaskEvent:
    timestamp: int
    job_id: str
    task_id: str
    tenant_id: str
    kind: str
    cpu_demand: float
    mem_demand: float
    io_demand: float
    duration: int | None = None

    @property
    def key(self):
        return (self.job_id, self.task_id)

    @property
    def demand(self):
        return (self.cpu_demand, self.mem_demand, self.io_demand)


@dataclass(frozen=True)
class Trace:
    machine_events: tuple[MachineEvent, ...] = ()
    task_events: tuple[TaskEvent, ...] = ()
    horizon: int = 0

    def submits(self):
        return [ev for ev in self.task_events if ev.kind == "SUBMIT"]

    def machine_ids(self):
        """Machine ids in order of first appearance."""
        seen = {}
        for ev in self.machine_events:
            seen.setdefault(ev.machine_id, None)
        return list(seen)

    def tenant_ids(self):
        seen = {}
        for ev in self.task_events:
            seen.setdefault(ev.tenant_id, None)
        return sorted(seen, key=_natural_key)


@dataclass(frozen=True)
class TraceSummary:
    n_tasks: int = 0
    n_machines: int = 0
    n_tenants: int = 0
    total_cpu_demand: float = 0.0
    total_mem_demand: float = 0.0
    total_io_demand: float = 0.0
    horizon: int = 0
    tasks_per_tenant: Mapping[str, int] = field(default_factory=dict)


def _natural_key(s):
    head = s.rstrip("0123456789")
    tail = s[len(head):]
    return (head, int(tail) if tail else -1, s)


# ---------------------------------------------------------------------------
# parsing


def _rows(stream):
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    return csv.reader(stream)


def _parse_int_seconds(text, row, name):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"{name} is not numeric: {text!r}", row) from None
    if not math.isfinite(value):
        raise ParseError(f"{name} is not finite: {text!r}", row)
    if value != int(value):
        raise ParseError(f"{name} has sub-second resolution: {text!r}", row)
    return int(value)


def _parse_float(text, row, name):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"{name} is not numeric: {text!r}", row) from None
    if not math.isfinite(value):
        raise ValidationError(f"row {row}: {name} is not finite")
    return value


def _check_header(reader, expected, label):
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError(f"{label}: missing header", 1) from None
    if tuple(h.strip() for h in header) != expected:
        raise ParseError(f"{label}: expected header {','.join(expected)}", 1)


def _parse_machine_rows(stream):
    reader = _rows(stream)
    _check_header(reader, MACHINE_HEADER, "machine events")
    events = []
    for row_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(MACHINE_HEADER):
            raise ParseError(f"expected {len(MACHINE_HEADER)} fields, got {len(row)}", row_no)
        ts = _parse_int_seconds(row[0], row_no, "timestamp")
        if ts < 0:
            raise ValidationError(f"row {row_no}: negative timestamp")
        kind = row[2].strip()
        if kind not in MACHINE_KINDS:
            raise ParseError(f"unknown machine event kind {kind!r}", row_no)
        caps = [_parse_float(row[3 + i], row_no, f"{r}_capacity") for i, r in enumerate(RESOURCES)]
        if any(c < 0 for c in caps):
            raise ValidationError(f"row {row_no}: negative capacity")
        events.append(MachineEvent(ts, row[1].strip(), kind, *caps))
    return events


def _parse_task_rows(stream):
    reader = _rows(stream)
    _check_header(reader, TASK_HEADER, "task events")
    events = []
    for row_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(TASK_HEADER):
            raise ParseError(f"expected {len(TASK_HEADER)} fields, got {len(row)}", row_no)
        ts = _parse_int_seconds(row[0], row_no, "timestamp")
        if ts < 0:
            raise ValidationError(f"row {row_no}: negative timestamp")
        kind = row[4].strip()
        if kind not in TASK_KINDS:
            raise ParseError(f"unknown task event kind {kind!r}", row_no)
        demands = [_parse_float(row[5 + i], row_no, f"{r}_demand") for i, r in enumerate(RESOURCES)]
        if any(d < 0 or d > 1 for d in demands):
            raise ValidationError(f"row {row_no}: demand outside [0, 1]")
        duration = None
        if row[8].strip():
            duration = _parse_int_seconds(row[8], row_no, "duration")
            if duration < 0:
                raise ValidationError(f"row {row_no}: negative duration")
        events.append(TaskEvent(ts, row[1].strip(), row[2].strip(), row[3].strip(), kind, *demands, duration))
    return events


def _validate_machine_order(events):
    live = set()
    for ev in events:
        if ev.kind == "ADD":
            if ev.machine_id in live:
                raise OrderingError(f"machine {ev.machine_id} added twice at t={ev.timestamp}")
            live.add(ev.machine_id)
        elif ev.machine_id not in live:
            raise OrderingError(f"machine {ev.machine_id}: {ev.kind} before ADD at t={ev.timestamp}")
        elif ev.kind == "REMOVE":
            live.discard(ev.machine_id)


def _derive_durations(events):
    submitted = {}
    ended = set()
    end_time = {}
    for ev in events:
        if ev.kind == "SUBMIT":
            if ev.key in submitted or ev.key in ended:
                raise OrderingError(f"task {ev.key} submitted twice")
            submitted[ev.key] = ev
        else:
            if ev.key not in submitted:
                raise OrderingError(f"task {ev.key}: {ev.kind} before SUBMIT at t={ev.timestamp}")
            if ev.key in ended:
                raise OrderingError(f"task {ev.key} ended twice")
            ended.add(ev.key)
            end_time[ev.key] = ev.timestamp
    out = []
    for ev in events:
        if ev.kind == "SUBMIT" and ev.duration is None and ev.key in end_time:
            ev = TaskEvent(**{**ev.__dict__, "duration": end_time[ev.key] - ev.timestamp})
        out.append(ev)
    return out


def _horizon(machine_events, task_events):
    h = 0
    for ev in machine_events:
        h = max(h, ev.timestamp)
    for ev in task_events:
        h = max(h, ev.timestamp)
        if ev.kind == "SUBMIT" and ev.duration is not None:
            h = max(h, ev.timestamp + ev.duration)
    return h


def build_trace(machine_events: Iterable[MachineEvent], task_events: Iterable[TaskEvent]) -> Trace:
    """Sort, validate and close a pair of event sequences into a Trace."""
    machines = sorted(machine_events, key=lambda ev: (ev.timestamp, _MACHINE_RANK[ev.kind]))
    tasks = sorted(task_events, key=lambda ev: (ev.timestamp, _TASK_RANK[ev.kind]))
    _validate_machine_order(machines)
    tasks = _derive_durations(tasks)
    return Trace(tuple(machines), tuple(tasks), _horizon(machines, tasks))


def parse_trace(machine_stream, task_stream) -> Trace:
    """Parse the two CSV streams (text or iterables of lines) into a validated Trace.

    Raises ParseError (with row number) for malformed rows, ValidationError for
    out-of-range values and OrderingError for impossible lifecycles.
    """
    return build_trace(_parse_machine_rows(machine_stream), _parse_task_rows(task_stream))


def _fmt(x):
    return repr(float(x))


def serialize_trace(trace: Trace) -> tuple[str, str]:
    """Render a trace as (machine_csv, task_csv) text; inverse of parse_trace."""
    mbuf, tbuf = io.StringIO(), io.StringIO()
    mw = csv.writer(mbuf, lineterminator="\n")
    mw.writerow(MACHINE_HEADER)
    for ev in trace.machine_events:
        mw.writerow([ev.timestamp, ev.machine_id, ev.kind, *map(_fmt, ev.capacity)])
    tw = csv.writer(tbuf, lineterminator="\n")
    tw.writerow(TASK_HEADER)
    for ev in trace.task_events:
        duration = "" if ev.duration is None else ev.duration
        tw.writerow([ev.timestamp, ev.job_id, ev.task_id, ev.tenant_id, ev.kind, *map(_fmt, ev.demand), duration])
    return mbuf.getvalue(), tbuf.getvalue()


def write_trace(trace: Trace, out_dir) -> tuple[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    machine_text, task_text = serialize_trace(trace)
    paths = (os.path.join(out_dir, MACHINE_FILE), os.path.join(out_dir, TASK_FILE))
    for path, text in zip(paths, (machine_text, task_text)):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    return paths


def read_trace(trace_dir) -> Trace:
    with open(os.path.join(trace_dir, MACHINE_FILE), encoding="utf-8", newline="") as mf, \
            open(os.path.join(trace_dir, TASK_FILE), encoding="utf-8", newline="") as tf:
        return parse_trace(mf, tf)


def trace_stats(trace: Trace) -> TraceSummary:
    submits = trace.submits()
    if not submits and not trace.machine_events:
        return TraceSummary(horizon=trace.horizon)
    per_tenant = Counter(ev.tenant_id for ev in submits)
    return TraceSummary(
        n_tasks=len(submits),
        n_machines=len({ev.machine_id for ev in trace.machine_events if ev.kind == "ADD"}),
        n_tenants=len(per_tenant),
        total_cpu_demand=math.fsum(ev.cpu_demand for ev in submits),
        total_mem_demand=math.fsum(ev.mem_demand for ev in submits),
        total_io_demand=math.fsum(ev.io_demand for ev in submits),
        horizon=trace.horizon,
        tasks_per_tenant=dict(sorted(per_tenant.items(), key=lambda kv: _natural_key(kv[0]))),
    )


# ---------------------------------------------------------------------------
# synthetic workloads

_DIST_PARAMS = {
    "constant": ("value",),
    "uniform": ("low", "high"),
    "exponential": ("mean",),
    "normal": ("mean", "std"),
}


def _check_dist(d, where):
    if not isinstance(d, Mapping) or "kind" not in d:
        raise ConfigError(f"{where}: distribution must be an object with a 'kind'")
    kind = d["kind"]
    if kind not in _DIST_PARAMS:
        raise ConfigError(f"{where}: unknown distribution kind {kind!r}")
    expected = set(_DIST_PARAMS[kind]) | {"kind"}
    if set(d) != expected:
        raise ConfigError(f"{where}: {kind} takes exactly {sorted(expected - {'kind'})}")
    for k in _DIST_PARAMS[kind]:
        v = d[k]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ConfigError(f"{where}.{k} must be a finite number")
    if kind == "uniform" and d["low"] > d["high"]:
        raise ConfigError(f"{where}: low > high")
    if kind == "exponential" and d["mean"] <= 0:
        raise ConfigError(f"{where}: mean must be > 0")
    if kind == "normal" and d["std"] < 0:
        raise ConfigError(f"{where}: std must be >= 0")


def _per_resource(d, where):
    """Accept one distribution for all resources or a {cpu, mem, io} mapping."""
    if isinstance(d, Mapping) and "kind" not in d:
        if set(d) != set(RESOURCES):
            raise ConfigError(f"{where}: per-resource mapping needs exactly {RESOURCES}")
        for r in RESOURCES:
            _check_dist(d[r], f"{where}.{r}")
        return {r: dict(d[r]) for r in RESOURCES}
    _check_dist(d, where)
    return {r: dict(d) for r in RESOURCES}


def _draw(rng, d, n):
    kind = d["kind"]
    if kind == "constant":
        return np.full(n, float(d["value"]))
    if kind == "uniform":
        return rng.uniform(d["low"], d["high"], n)
    if kind == "exponential":
        return rng.exponential(d["mean"], n)
    return rng.normal(d["mean"], d["std"], n)


@dataclass(frozen=True)
class WorkloadSpec:
    n_machines: int
    machine_capacity_distribution: Mapping
    task_arrival_rate: float
    n_tasks: int
    demand_distribution: Mapping
    duration_distribution: Mapping
    n_tenants: int
    tenant_skew: float

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("n_machines", "n_tasks", "n_tenants"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be an integer >= 1")
        rate = self.task_arrival_rate
        if isinstance(rate, bool) or not isinstance(rate, (int, float)) or not rate > 0 or not math.isfinite(rate):
            raise ConfigError("task_arrival_rate must be > 0")
        skew = self.tenant_skew
        if isinstance(skew, bool) or not isinstance(skew, (int, float)) or not skew >= 0 or not math.isfinite(skew):
            raise ConfigError("tenant_skew must be >= 0")
        _per_resource(self.machine_capacity_distribution, "machine_capacity_distribution")
        _per_resource(self.demand_distribution, "demand_distribution")
        _check_dist(self.duration_distribution, "duration_distribution")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "WorkloadSpec":
        names = set(cls.__dataclass_fields__)
        if not isinstance(doc, Mapping):
            raise ConfigError("workload spec must be a JSON object")
        unknown, missing = set(doc) - names, names - set(doc)
        if unknown:
            raise ConfigError(f"unknown workload spec fields: {sorted(unknown)}")
        if missing:
            raise ConfigError(f"missing workload spec fields: {sorted(missing)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> "WorkloadSpec":
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self):
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    def replace(self, **changes) -> "WorkloadSpec":
        return WorkloadSpec(**{**self.to_dict(), **changes})


def zipf_weights(n, skew):
    w = np.arange(1, n + 1, dtype=float) ** -float(skew)
    return w / w.sum()


def generate_synthetic(spec: WorkloadSpec, seed: int) -> Trace:
    """Draw a deterministic trace: machines at t=0, Poisson arrivals, Zipf tenants."""
    spec.validate()
    rng = np.random.default_rng(seed)
    cap_dists = _per_resource(spec.machine_capacity_distribution, "machine_capacity_distribution")
    dem_dists = _per_resource(spec.demand_distribution, "demand_distribution")

    caps = np.column_stack([np.clip(_draw(rng, cap_dists[r], spec.n_machines), 0.0, None) for r in RESOURCES])
    machines = [MachineEvent(0, f"m{i}", "ADD", *map(float, caps[i])) for i in range(spec.n_machines)]

    gaps = rng.exponential(1.0 / spec.task_arrival_rate, spec.n_tasks)
    arrivals = np.floor(np.cumsum(gaps)).astype(np.int64)
    demands = np.column_stack([np.clip(_draw(rng, dem_dists[r], spec.n_tasks), 0.0, 1.0) for r in RESOURCES])
    durations = np.maximum(1, np.ceil(_draw(rng, spec.duration_distribution, spec.n_tasks))).astype(np.int64)
    tenants = rng.choice(spec.n_tenants, size=spec.n_tasks, p=zipf_weights(spec.n_tenants, spec.tenant_skew)) + 1

    tasks = [
        TaskEvent(int(arrivals[i]), f"j{i}", "0", f"tenant-{tenants[i]}", "SUBMIT",
                  *map(float, demands[i]), int(durations[i]))
        for i in range(spec.n_tasks)
    ]
    return build_trace(machines, tasks)
