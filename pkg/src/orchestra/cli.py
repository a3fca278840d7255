"""Command-line driver: trace generation, training, evaluation, ablations, sweeps, reports.

Every command writes into an output directory and exits 0 only when all of
its artifacts were written. Run configs are JSON with exactly these keys::

    {"seed": 0, "trace": null, "workload": {...WorkloadSpec...},
     "roles": {"compute": 2, "storage": 1, "scheduler": 1},
     "train": {...TrainConfig...}, "info_loss_rate": 0.0,
     "n_tenants": null, "out": "runs/toy"}

Exactly one of ``trace`` (directory holding the two event CSVs, relative to
the config file) and ``workload`` must be given.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import spearmanr

from orchestra import agents as ag
from orchestra import marl
from orchestra import trace as tr
from orchestra.errors import ConfigError, OrchestraError
from orchestra.metrics import MetricsReport, build_report, mean_reports, merge_records

AXES = ("info_loss", "tenants", "agents")
HEADLINE = {"info_loss": "avg_scheduling_latency_ms", "tenants": "min_tenant_share_pct",
            "agents": "throughput_tasks_per_s"}
ABLATION_COLUMNS = ("variant", "resource_utilization_pct", "avg_scheduling_latency_ms", "convergence_epoch")
REFERENCE_FOOTER = (
    "Reference annotation (published large-scale run, not reproduced here): "
    "Baseline 76.2% utilization / 294.7 ms latency / 910 epochs."
)
RUN_CONFIG_FILE = "config.json"
REPORT_FILE = "report.csv"
EVAL_FILE = "eval.csv"
SWEEP_FILE = "sweep.csv"
TREND_FILE = "trend.csv"
ABLATION_FILE = "ablation.csv"
ABLATION_NOTES = "ablation.md"


# -- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    trace: str | None = None
    workload: tr.WorkloadSpec | None = None
    roles: dict = field(default_factory=lambda: {"compute": 2, "storage": 1, "scheduler": 1})
    train: marl.TrainConfig = field(default_factory=marl.TrainConfig)
    info_loss_rate: float = 0.0
    n_tenants: int | None = None
    out: str | None = None

    def __post_init__(self):
        if (self.trace is None) == (self.workload is None):
            raise ConfigError("exactly one of 'trace' and 'workload' must be set")
        if not 0.0 <= self.info_loss_rate <= 1.0:
            raise ConfigError("info_loss_rate must lie in [0, 1]")
        if self.n_tenants is not None:
            if self.workload is None:
                raise ConfigError("n_tenants overrides a workload spec; it cannot resize a recorded trace")
            if self.n_tenants < 1:
                raise ConfigError("n_tenants must be >= 1")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")

    @classmethod
    def from_dict(cls, doc, base_dir="."):
        allowed = {"seed", "trace", "workload", "roles", "train", "info_loss_rate", "n_tenants", "out"}
        unknown = set(doc) - allowed
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(doc)
        if kwargs.get("workload") is not None:
            kwargs["workload"] = tr.WorkloadSpec.from_dict(kwargs["workload"])
        if kwargs.get("trace") is not None:
            kwargs["trace"] = os.path.normpath(os.path.join(base_dir, kwargs["trace"]))
        kwargs["train"] = marl.TrainConfig.from_dict(kwargs.get("train", {}))
        if "roles" in kwargs:
            kwargs["roles"] = dict(kwargs["roles"])
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(doc, os.path.dirname(os.path.abspath(path)))

    def to_dict(self):
        return {
            "seed": self.seed,
            "trace": self.trace,
            "workload": None if self.workload is None else self.workload.to_dict(),
            "roles": dict(self.roles),
            "train": self.train.to_dict(),
            "info_loss_rate": self.info_loss_rate,
            "n_tenants": self.n_tenants,
            "out": self.out,
        }

    def workload_spec(self):
        if self.workload is None:
            return None
        if self.n_tenants is None:
            return self.workload
        return self.workload.replace(n_tenants=self.n_tenants)

    def load_trace(self, seed=None):
        """The recorded trace, or the workload drawn with ``seed`` (default: the config seed)."""
        if self.trace is not None:
            return tr.read_trace(self.trace)
        return tr.generate_synthetic(self.workload_spec(), self.seed if seed is None else seed)


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple
    seeds: tuple

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}; expected one of {AXES}")
        if len(self.values) < 2:
            raise ConfigError("a sweep needs at least two values")
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ConfigError("sweep values must be strictly increasing")
        if not self.seeds:
            raise ConfigError("a sweep needs at least one seed")
        if self.axis == "info_loss" and not all(0.0 <= v <= 1.0 for v in self.values):
            raise ConfigError("info-loss values must lie in [0, 1]")
        if self.axis in ("tenants", "agents") and not all(float(v).is_integer() and v >= 1 for v in self.values):
            raise ConfigError(f"{self.axis} values must be positive integers")


def parse_values(text, axis):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"could not parse sweep values {text!r}") from None
    if axis in ("tenants", "agents"):
        if not all(v.is_integer() for v in vals):
            raise ConfigError(f"{axis} values must be integers")
        vals = [int(v) for v in vals]
    return tuple(vals)


def scale_roles(base, n_agents, n_machines):
    """Spread ``n_agents`` over roles in the base proportions.

    Compute and storage agents are capped at the machine count; whatever is
    left over becomes schedulers.
    """
    counts = {k.lower(): int(v) for k, v in base.items()}
    total = sum(counts.values())
    out = {}
    for role in ("compute", "storage"):
        out[role] = min(n_machines, max(1, round(counts[role] * n_agents / total)))
    out["scheduler"] = n_agents - out["compute"] - out["storage"]
    if out["scheduler"] < 1:
        raise ConfigError(f"{n_agents} agents leave no scheduler after compute/storage assignment")
    return out


# -- run building blocks -------------------------------------------------------


@dataclass
class RunResult:
    artifacts: marl.RunArtifacts
    report: MetricsReport
    records: list


def evaluate_report(artifacts, trace, config: RunConfig, info_loss_rate=None, seed=None):
    """Evaluation rollouts of a trained run, summarized as a MetricsReport."""
    t = config.train
    seed = artifacts.seed if seed is None else seed
    rate = config.info_loss_rate if info_loss_rate is None else info_loss_rate
    records = marl.evaluate(artifacts, trace, marl.eval_seeds(seed, t.eval_episodes), rate)
    merged = merge_records(records)
    merged.update_durations = list(artifacts.update_times)
    curve = artifacts.utilization_curve()
    report = build_report(merged, curve, t.convergence_window, t.convergence_tol)
    return report, records


def train_and_evaluate(config: RunConfig, out_dir=None, seed=None, on_epoch=None) -> RunResult:
    seed = config.seed if seed is None else seed
    trace = config.load_trace()
    role_map = ag.assign_roles(config.roles, trace.machine_ids())
    artifacts = marl.train(config.train, trace, role_map, seed=seed, info_loss_rate=config.info_loss_rate,
                           out_dir=out_dir, on_epoch=on_epoch)
    report, records = evaluate_report(artifacts, trace, config)
    if out_dir:
        write_reports([report], os.path.join(out_dir, REPORT_FILE))
    return RunResult(artifacts, report, records)


def write_reports(reports, path, lead=None):
    """CSV of MetricsReport rows, optionally prefixed by (name, value) columns per row."""
    lead = lead or []
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([name for name, _ in lead[0]] + MetricsReport.header() if lead else MetricsReport.header())
        for i, rep in enumerate(reports):
            w.writerow(([str(v) for _, v in lead[i]] if lead else []) + rep.row())


def read_reports(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def run_ablation(config: RunConfig, out_dir):
    """Train and evaluate all four variants over the config's seeds; returns {label: mean report}."""
    rows = {}
    for variant in marl.VARIANTS:
        cfg = replace(config, train=marl.ablation_variant(config.train, variant))
        reports = []
        for s in config.train.seeds:
            run_dir = os.path.join(out_dir, variant.lower(), f"seed-{s}")
            reports.append(train_and_evaluate(cfg, run_dir, seed=s).report)
        rows[marl.VARIANT_LABELS[variant]] = mean_reports(reports)
    write_ablation(rows, out_dir)
    return rows


def ablation_flags(rows):
    """Ordering checks on mean utilization: (FULL > BASELINE, FULL >= both single mechanisms)."""
    u = {k: (v.resource_utilization_pct or 0.0) for k, v in rows.items()}
    return u["FULL"] > u["BASELINE"], u["FULL"] >= max(u["+HRAC"], u["+LGRS"])


def write_ablation(rows, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, ABLATION_FILE), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for label, rep in rows.items():
            cells = dict(zip(MetricsReport.header(), rep.row()))
            w.writerow([label] + [cells[c] for c in ABLATION_COLUMNS[1:]])
    beats_baseline, beats_singles = ablation_flags(rows)
    lines = [
        "# Ablation",
        "",
        f"- FULL utilization above BASELINE: {'yes' if beats_baseline else 'NO'}",
        f"- FULL utilization at or above both single-mechanism variants: "
        f"{'yes' if beats_singles else 'NO (flag: single-mechanism variant ahead)'}",
        "",
        REFERENCE_FOOTER,
        "",
    ]
    with open(os.path.join(out_dir, ABLATION_NOTES), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines))


def spearman(x, y):
    """Rank correlation; ``nan`` when either side is constant."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    ok = ~(np.isnan(x) | np.isnan(y))
    if ok.sum() < 2 or np.ptp(x[ok]) == 0 or np.ptp(y[ok]) == 0:
        return float("nan")
    return float(spearmanr(x[ok], y[ok])[0])


def run_sweep(config: RunConfig, spec: SweepSpec, out_dir):
    """Per-point mean MetricsReports along one axis plus Spearman trends; returns (points, trends)."""
    os.makedirs(out_dir, exist_ok=True)
    per_point = {v: [] for v in spec.values}
    if spec.axis == "info_loss":
        trace = config.load_trace()
        role_map = ag.assign_roles(config.roles, trace.machine_ids())
        for s in spec.seeds:
            artifacts = marl.train(config.train, trace, role_map, seed=s, info_loss_rate=config.info_loss_rate,
                                   out_dir=os.path.join(out_dir, f"seed-{s}"))
            for v in spec.values:
                per_point[v].append(evaluate_report(artifacts, trace, config, info_loss_rate=v)[0])
    else:
        for v in spec.values:
            if spec.axis == "tenants":
                if config.workload is None:
                    raise ConfigError("the tenants axis regenerates the workload; the config needs 'workload'")
                cfg = replace(config, n_tenants=int(v))
            else:
                n_machines = len(config.load_trace().machine_ids())
                cfg = replace(config, roles=scale_roles(config.roles, int(v), n_machines))
            for s in spec.seeds:
                run_dir = os.path.join(out_dir, f"{spec.axis}-{v}", f"seed-{s}")
                per_point[v].append(train_and_evaluate(cfg, run_dir, seed=s).report)
    points = [(v, mean_reports(per_point[v])) for v in spec.values]
    write_reports([r for _, r in points], os.path.join(out_dir, SWEEP_FILE),
                  lead=[[("axis", spec.axis), ("value", v)] for v, _ in points])
    trends = {}
    for name in MetricsReport.header():
        ys = [getattr(r, name) for _, r in points]
        ys = [float("nan") if y is None else y for y in ys]
        trends[name] = spearman(spec.values, ys)
    with open(os.path.join(out_dir, TREND_FILE), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("axis", "metric", "spearman", "headline"))
        for name, rho in trends.items():
            w.writerow((spec.axis, name, "" if math.isnan(rho) else repr(rho), int(name == HEADLINE[spec.axis])))
    return points, trends


# -- reports -------------------------------------------------------------------


def svg_line_chart(xs, ys, title, x_label, y_label, width=480, height=320):
    """Minimal standalone SVG: axes, one polyline with a vertex per point, labels."""
    pad = 48
    xs = [float(x) for x in xs]
    ys = [float(y) for y in ys]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
    out = io.StringIO()
    out.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
              f'viewBox="0 0 {width} {height}">\n')
    out.write(f'<rect width="{width}" height="{height}" fill="white"/>\n')
    out.write(f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>\n')
    out.write(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>\n')
    out.write(f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{pts}"/>\n')
    out.write(f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>\n')
    out.write(f'<text x="{width / 2:.1f}" y="{height - 10}" text-anchor="middle" font-size="12">'
              f'{_esc(x_label)}</text>\n')
    out.write(f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" font-size="12" '
              f'transform="rotate(-90 14 {height / 2:.1f})">{_esc(y_label)}</text>\n')
    out.write(f'<text x="{pad}" y="{height - pad + 16}" font-size="10">{x0:g}</text>\n')
    out.write(f'<text x="{width - pad}" y="{height - pad + 16}" text-anchor="end" font-size="10">{x1:g}</text>\n')
    out.write(f'<text x="{pad - 4}" y="{height - pad}" text-anchor="end" font-size="10">{y0:.4g}</text>\n')
    out.write(f'<text x="{pad - 4}" y="{pad + 4}" text-anchor="end" font-size="10">{y1:.4g}</text>\n')
    out.write("</svg>\n")
    return out.getvalue()


def _esc(text):
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _series(rows, x_key, y_key):
    xs, ys = [], []
    for r in rows:
        if r.get(y_key, "") != "":
            xs.append(float(r[x_key]))
            ys.append(float(r[y_key]))
    return xs, ys


def build_report_files(run_dir, fmt):
    """Render the CSVs found in ``run_dir``; returns the written paths."""
    sources = {}
    for name in (marl.CURVE_FILE, SWEEP_FILE, ABLATION_FILE, REPORT_FILE, EVAL_FILE):
        path = os.path.join(run_dir, name)
        if os.path.exists(path):
            sources[name] = read_reports(path)
    if not sources:
        raise ConfigError(f"{run_dir}: no curve, sweep, ablation or report CSV to render")
    written = []
    if fmt == "csv":
        path = os.path.join(run_dir, "consolidated.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("source", "row", "metric", "value"))
            for name, rows in sources.items():
                for i, r in enumerate(rows):
                    for k, v in r.items():
                        w.writerow((name, i, k, v))
        written.append(path)
    elif fmt == "svg":
        if marl.CURVE_FILE in sources:
            for metric in marl.CURVE_HEADER[2:6]:
                xs, ys = _series(sources[marl.CURVE_FILE], "epoch", metric)
                if xs:
                    written.append(_write_svg(run_dir, f"curve_{metric}.svg", xs, ys, metric, "epoch", metric))
        if SWEEP_FILE in sources:
            rows = sources[SWEEP_FILE]
            axis = rows[0]["axis"]
            for metric in MetricsReport.header():
                xs, ys = _series(rows, "value", metric)
                if xs:
                    written.append(_write_svg(run_dir, f"sweep_{metric}.svg", xs, ys, f"{metric} vs {axis}",
                                              axis, metric))
        if not written:
            raise ConfigError(f"{run_dir}: nothing plottable (need curve.csv or sweep.csv)")
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    return written


def _write_svg(run_dir, name, xs, ys, title, x_label, y_label):
    path = os.path.join(run_dir, name)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(svg_line_chart(xs, ys, title, x_label, y_label))
    return path


# -- commands ------------------------------------------------------------------


def _config(args):
    if not args.config:
        raise ConfigError("--config is required")
    config = RunConfig.from_json(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "trace", None):
        changes.update(trace=os.path.abspath(args.trace), workload=None, n_tenants=None)
    return replace(config, **changes) if changes else config


def _out_dir(args, config):
    out = args.out or config.out
    if not out:
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    return out


def cmd_gen_trace(args):
    if not args.config:
        raise ConfigError("--config is required")
    try:
        with open(args.config, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"spec file not found: {args.config}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
    seed = 0 if args.seed is None else args.seed
    if isinstance(doc, dict) and "workload" in doc:
        config = RunConfig.from_dict(doc, os.path.dirname(os.path.abspath(args.config)))
        spec = config.workload_spec()
        if spec is None:
            raise ConfigError("config has no workload to generate from")
        if args.seed is None:
            seed = config.seed
    else:
        spec = tr.WorkloadSpec.from_dict(doc)
    if not args.out:
        raise ConfigError("--out is required")
    paths = tr.write_trace(tr.generate_synthetic(spec, seed), args.out)
    for p in paths:
        print(p)
    return 0


def _write_run_config(config, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, RUN_CONFIG_FILE), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_train(args):
    config = _config(args)
    out_dir = _out_dir(args, config)
    _write_run_config(config, out_dir)
    result = train_and_evaluate(config, out_dir)
    print(result.report.to_csv(), end="")
    return 0


def cmd_eval(args):
    config = _config(args)
    out_dir = _out_dir(args, config)
    ckpt = os.path.join(out_dir, marl.CHECKPOINT_FILE)
    if not os.path.exists(ckpt):
        raise ConfigError(f"no checkpoint in {out_dir}; run 'train' first")
    trace = config.load_trace()
    role_map = ag.assign_roles(config.roles, trace.machine_ids())
    with open(ckpt, encoding="utf-8") as fh:
        doc = json.load(fh)
    state = marl.load_checkpoint(doc, role_map, len(trace.tenant_ids()))
    curve_path = os.path.join(out_dir, marl.CURVE_FILE)
    curve = marl.read_curve(curve_path) if os.path.exists(curve_path) else []
    artifacts = marl.RunArtifacts(state, curve, [], int(doc["seed"]))
    report, _ = evaluate_report(artifacts, trace, config)
    write_reports([report], os.path.join(out_dir, EVAL_FILE))
    print(report.to_csv(), end="")
    return 0


def cmd_ablate(args):
    config = _config(args)
    out_dir = _out_dir(args, config)
    _write_run_config(config, out_dir)
    rows = run_ablation(config, out_dir)
    with open(os.path.join(out_dir, ABLATION_FILE), encoding="utf-8") as fh:
        print(fh.read(), end="")
    beats_baseline, beats_singles = ablation_flags(rows)
    if not beats_singles:
        print("flag: a single-mechanism variant matched or beat FULL", file=sys.stderr)
    return 0


def cmd_sweep(args):
    config = _config(args)
    out_dir = _out_dir(args, config)
    if not args.axis or not args.values:
        raise ConfigError("sweep needs --axis and --values")
    spec = SweepSpec(args.axis, parse_values(args.values, args.axis), config.train.seeds)
    _write_run_config(config, out_dir)
    _, trends = run_sweep(config, spec, out_dir)
    with open(os.path.join(out_dir, SWEEP_FILE), encoding="utf-8") as fh:
        print(fh.read(), end="")
    print(f"spearman({spec.axis}, {HEADLINE[spec.axis]}) = {trends[HEADLINE[spec.axis]]:.4f}")
    return 0


def cmd_report(args):
    if not args.out:
        raise ConfigError("--out (the run directory) is required")
    if not os.path.isdir(args.out):
        raise ConfigError(f"run directory not found: {args.out}")
    for p in build_report_files(args.out, args.format):
        print(p)
    return 0


COMMANDS = {
    "gen-trace": cmd_gen_trace,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="orchestra", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="run config JSON (gen-trace also takes a bare workload spec)")
        p.add_argument("--trace", help="directory holding machine_events.csv and task_events.csv")
        p.add_argument("--out", help="output / run directory")
        p.add_argument("--seed", type=int)
        if name == "sweep":
            p.add_argument("--axis", choices=AXES)
            p.add_argument("--values", help="comma-separated, strictly increasing")
        if name == "report":
            p.add_argument("--format", choices=("csv", "svg"), default="csv")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (OrchestraError, ValueError, KeyError, OSError) as exc:
        print(f"orchestra {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
