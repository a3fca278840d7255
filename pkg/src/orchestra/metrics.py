"""Episode records and the aggregate metrics reported for runs and sweeps."""

from __future__ import annotations

import csv
import io
import math
import statistics
from dataclasses import dataclass, field, fields

import numpy as np

from orchestra.errors import ContractViolation


@dataclass
class EpisodeRecord:
    """Raw measurements accumulated while an episode runs.

    ``utilization`` holds one cluster-wide cpu utilization sample per simulated
    second, ``latencies`` one placement delay (seconds) per placed task, and
    ``tenant_cpu_time`` the cpu-seconds each tenant's running tasks held.
    """

    utilization: list = field(default_factory=list)
    latencies: list = field(default_factory=list)
    tenant_cpu_time: dict = field(default_factory=dict)
    update_durations: list = field(default_factory=list)
    finished: int = 0
    sim_seconds: int = 0

    def merge(self, other: "EpisodeRecord") -> "EpisodeRecord":
        tenants = dict(self.tenant_cpu_time)
        for k, v in other.tenant_cpu_time.items():
            tenants[k] = tenants.get(k, 0.0) + v
        return EpisodeRecord(
            self.utilization + other.utilization,
            self.latencies + other.latencies,
            tenants,
            self.update_durations + other.update_durations,
            self.finished + other.finished,
            self.sim_seconds + other.sim_seconds,
        )


def merge_records(records) -> EpisodeRecord:
    out = EpisodeRecord()
    for r in records:
        out = out.merge(r)
    return out


@dataclass
class MetricsReport:
    resource_utilization_pct: float | None = None
    avg_scheduling_latency_ms: float | None = None
    convergence_epoch: int | None = None
    usage_stddev: float | None = None
    allocation_variance: float | None = None
    min_tenant_share_pct: float | None = None
    throughput_tasks_per_s: float | None = None
    policy_update_time_s: float | None = None

    @classmethod
    def header(cls):
        return [f.name for f in fields(cls)]

    def row(self):
        return [_cell(getattr(self, name)) for name in self.header()]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        w.writerow(self.row())
        return buf.getvalue()

    @classmethod
    def from_row(cls, row: dict) -> "MetricsReport":
        kwargs = {}
        for name in cls.header():
            text = row.get(name, "")
            if text == "":
                kwargs[name] = None
            elif name == "convergence_epoch":
                kwargs[name] = int(text)
            else:
                kwargs[name] = float(text)
        return cls(**kwargs)


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


def utilization(record: EpisodeRecord) -> float:
    """Time-averaged cluster cpu utilization, in percent."""
    if not record.utilization:
        raise ContractViolation("utilization needs at least one sample")
    return 100.0 * math.fsum(record.utilization) / len(record.utilization)


def avg_latency_ms(record: EpisodeRecord) -> float | None:
    """Mean placement delay in milliseconds; ``None`` when nothing was placed."""
    if not record.latencies:
        return None
    return 1000.0 * math.fsum(record.latencies) / len(record.latencies)


def convergence_epoch(curve, window=20, tol=0.01) -> int | None:
    """First epoch whose trailing ``window`` utilization range is within ``tol`` x the final value."""
    curve = np.asarray(curve, dtype=float)
    if window < 1 or len(curve) < window:
        raise ContractViolation(f"curve of length {len(curve)} is shorter than window {window}")
    bound = tol * abs(curve[-1])
    for end in range(window - 1, len(curve)):
        seg = curve[end - window + 1:end + 1]
        if seg.max() - seg.min() <= bound:
            return end
    return None


def usage_stddev(record: EpisodeRecord) -> float:
    """Population standard deviation of per-step utilization (fraction units)."""
    if len(record.utilization) < 2:
        raise ContractViolation("usage_stddev needs at least two samples")
    return float(statistics.pstdev(map(float, record.utilization)))


def tenant_shares(record: EpisodeRecord) -> np.ndarray:
    values = np.array([record.tenant_cpu_time[k] for k in sorted(record.tenant_cpu_time)], dtype=float)
    total = values.sum()
    if values.size == 0 or not total > 0:
        raise ContractViolation("fairness needs a nonzero total allocation")
    return values / total


def fairness(record: EpisodeRecord) -> tuple[float, float]:
    """(population variance of tenant cpu-time shares, minimum share in percent)."""
    shares = tenant_shares(record)
    return float(np.var(shares)), float(shares.min() * 100.0)


def scalability(record: EpisodeRecord) -> tuple[float, float | None]:
    """(finished tasks per simulated second, mean wall-clock update duration or ``None``)."""
    throughput = record.finished / record.sim_seconds if record.sim_seconds > 0 and record.finished else 0.0
    update = None
    if record.update_durations:
        update = math.fsum(record.update_durations) / len(record.update_durations)
    return throughput, update


def build_report(record: EpisodeRecord, curve=None, window=20, tol=0.01) -> MetricsReport:
    """Aggregate everything measurable from ``record`` (and a learning curve, if given)."""
    report = MetricsReport()
    if record.utilization:
        report.resource_utilization_pct = utilization(record)
    report.avg_scheduling_latency_ms = avg_latency_ms(record)
    if curve is not None and len(curve) >= window:
        report.convergence_epoch = convergence_epoch(curve, window, tol)
    if len(record.utilization) >= 2:
        report.usage_stddev = usage_stddev(record)
    if record.tenant_cpu_time and sum(record.tenant_cpu_time.values()) > 0:
        report.allocation_variance, report.min_tenant_share_pct = fairness(record)
    report.throughput_tasks_per_s, report.policy_update_time_s = scalability(record)
    return report


def mean_reports(reports) -> MetricsReport:
    """Field-wise mean over replicate reports, skipping absent values."""
    out = MetricsReport()
    for name in MetricsReport.header():
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if vals:
            mean = math.fsum(vals) / len(vals)
            setattr(out, name, round(mean) if name == "convergence_epoch" else mean)
    return out
