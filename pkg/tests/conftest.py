import os

import numpy as np
import pytest

from orchestra import agents as ag
from orchestra import trace as tr

CONFIG_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "src", "orchestra", "configs")


def config_path(name):
    return os.path.normpath(os.path.join(CONFIG_DIR, name))


def machines(caps, t=0):
    """ADD events for machines m0..m{n-1}; ``caps`` holds (cpu, mem, io) per machine."""
    return [tr.MachineEvent(t, f"m{i}", "ADD", *map(float, c)) for i, c in enumerate(caps)]


def submit(t, i, demand, duration, tenant="tenant-1"):
    return tr.TaskEvent(t, f"j{i}", "0", tenant, "SUBMIT", *map(float, demand), duration)


def small_trace(n_machines=4, n_tasks=30, seed=0, rate=1.0, duration=6.0, n_tenants=2):
    spec = tr.WorkloadSpec(
        n_machines=n_machines,
        machine_capacity_distribution={"kind": "constant", "value": 1.0},
        task_arrival_rate=rate,
        n_tasks=n_tasks,
        demand_distribution={"kind": "uniform", "low": 0.1, "high": 0.4},
        duration_distribution={"kind": "exponential", "mean": duration},
        n_tenants=n_tenants,
        tenant_skew=1.0,
    )
    return tr.generate_synthetic(spec, seed)


@pytest.fixture
def toy_roles():
    return {"compute": 2, "storage": 1, "scheduler": 1}


@pytest.fixture
def trace4():
    return small_trace()


@pytest.fixture
def role_map4(trace4, toy_roles):
    return ag.assign_roles(toy_roles, trace4.machine_ids())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    """Remember one acceptance verdict; all of them are printed in the session summary."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
