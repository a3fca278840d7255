"""Discrete-event cluster simulator driven by a Trace, one simulated second per step.

State is held in flat numpy arrays indexed by machine and task position so a
step costs a handful of vector operations. ``machine()`` and ``task()`` return
read-only snapshots for callers that want records.

Within a step, actions are applied scheduler -> compute -> storage, each phase
in ascending agent id. The k-th scheduler proposes the k-th pending task.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field

import numpy as np

from orchestra import agents as ag
from orchestra import kernels
from orchestra.errors import ConfigError, ContractViolation, UnknownIdError
from orchestra.metrics import EpisodeRecord
from orchestra.trace import Trace

PENDING, RUNNING, FINISHED, UNSUBMITTED = 0, 1, 2, -1
STATUS_NAMES = {PENDING: "PENDING", RUNNING: "RUNNING", FINISHED: "FINISHED", UNSUBMITTED: "UNSUBMITTED"}

CAPACITY_TOL = 1e-9
INVALID_ACTION_PENALTY = 1.0
OVERLOAD_REJECTION_PENALTY = 2.0
THROTTLE_CHURN_PENALTY = 0.1
LOG_HEADER = ("clock", "event", "task_id", "machine_id", "agent_id")


@dataclass(frozen=True)
class MachineState:
    machine_id: str
    capacity: tuple
    allocated: tuple
    resident_tasks: frozenset
    role_owner: int
    active: bool


@dataclass(frozen=True)
class TaskState:
    task_id: tuple
    tenant_id: str
    demands: tuple
    submit_time: int
    place_time: int | None
    finish_time: int | None
    remaining_work: float
    status: str


@dataclass
class StepOutcome:
    local_rewards: dict
    global_signal: float
    placed: list = field(default_factory=list)
    invalid_actions: list = field(default_factory=list)
    done: bool = False


@dataclass(frozen=True)
class PlaceResult:
    ok: bool
    reason: str = ""


class ClusterState:
    """World state: machines, tasks, pending FIFO, clock and per-episode record."""

    def __init__(self, trace: Trace, role_map: ag.RoleMap, seed: int, log_events=False):
        self.trace = trace
        self.role_map = role_map
        self.horizon = max(int(trace.horizon), 1)
        self.clock = 0
        self.rng = np.random.default_rng(seed)

        self.machine_ids = list(role_map.machine_ids)
        self.machine_index = {m: i for i, m in enumerate(self.machine_ids)}
        n_m = len(self.machine_ids)
        self.capacity = np.zeros((n_m, 3))
        self.target = np.zeros((n_m, 3))
        self.allocated = np.zeros((n_m, 3))
        self.active = np.zeros(n_m, dtype=bool)
        self.owner = np.array([role_map.machine_ownership[m] for m in self.machine_ids], dtype=np.int64)
        storage_of = {}
        for agent, group in role_map.storage_groups.items():
            for m in group:
                storage_of[m] = agent
        self.storage_of = np.array([storage_of[m] for m in self.machine_ids], dtype=np.int64)

        submits = trace.submits()
        self.task_keys = [ev.key for ev in submits]
        self.task_index = {k: i for i, k in enumerate(self.task_keys)}
        self.tenant_ids = trace.tenant_ids()
        tenant_pos = {t: i for i, t in enumerate(self.tenant_ids)}
        n_t = len(submits)
        self.n_tasks = n_t
        self.demand = np.array([ev.demand for ev in submits], dtype=float).reshape(n_t, 3)
        self.submit = np.array([ev.timestamp for ev in submits], dtype=np.int64)
        self.work = np.array(
            [ev.duration if ev.duration is not None else max(self.horizon - ev.timestamp, 1) for ev in submits],
            dtype=float,
        )
        self.tenant_of = np.array([tenant_pos[ev.tenant_id] for ev in submits], dtype=np.int64)
        self.place_time = np.full(n_t, -1, dtype=np.int64)
        self.finish_time = np.full(n_t, -1, dtype=np.int64)
        self.remaining = self.work.copy()
        self.status = np.full(n_t, UNSUBMITTED, dtype=np.int8)
        self.machine_of = np.full(n_t, -1, dtype=np.int64)
        self.pending: list[int] = []
        self.n_finished = 0

        self.throttle = {a: ag.THROTTLE_LEVELS[ag.DEFAULT_THROTTLE_INDEX] for a in role_map.storage_groups}
        self.machine_throttle = np.array([self.throttle[a] for a in self.storage_of], dtype=float)

        self.obs_memory: dict[int, np.ndarray] = {}
        self.record = EpisodeRecord(tenant_cpu_time={t: 0.0 for t in self.tenant_ids})
        self.log = [] if log_events else None

        self._machine_events = trace.machine_events
        self._m_cursor = 0
        self._t_cursor = 0
        self._inject_events()

    # -- event injection -----------------------------------------------------

    def _inject_events(self):
        evs = self._machine_events
        while self._m_cursor < len(evs) and evs[self._m_cursor].timestamp <= self.clock:
            self._apply_machine_event(evs[self._m_cursor])
            self._m_cursor += 1
        while self._t_cursor < self.n_tasks and self.submit[self._t_cursor] <= self.clock:
            i = self._t_cursor
            self.status[i] = PENDING
            self.pending.append(i)
            self._log("submit", i, None, None)
            self._t_cursor += 1

    def _apply_machine_event(self, ev):
        try:
            m = self.machine_index[ev.machine_id]
        except KeyError:
            raise ConfigError(f"machine {ev.machine_id!r} has no compute-agent owner") from None
        if ev.kind == "ADD":
            self.target[m] = ev.capacity
            self.active[m] = True
        elif ev.kind == "UPDATE":
            self.target[m] = ev.capacity
        else:
            self.target[m] = 0.0
            self.active[m] = False
        # capacity never drops below what is already allocated; shrinkage waits for releases
        self.capacity[m] = np.maximum(self.target[m], self.allocated[m])
        self._log(ev.kind.lower(), None, m, None)

    def _log(self, event, task, machine, agent):
        if self.log is not None:
            self.log.append((
                self.clock, event,
                "" if task is None else "/".join(self.task_keys[task]),
                "" if machine is None else self.machine_ids[machine],
                "" if agent is None else agent,
            ))

    # -- views ---------------------------------------------------------------

    def clone(self) -> "ClusterState":
        return copy.deepcopy(self)

    def machine(self, machine_id) -> MachineState:
        m = self._machine(machine_id)
        resident = frozenset(self.task_keys[i] for i in np.flatnonzero((self.machine_of == m) & (self.status == RUNNING)))
        return MachineState(machine_id, tuple(self.capacity[m]), tuple(self.allocated[m]), resident,
                            int(self.owner[m]), bool(self.active[m]))

    def task(self, task_id) -> TaskState:
        i = self._task(task_id)
        return TaskState(
            self.task_keys[i], self.tenant_ids[self.tenant_of[i]], tuple(self.demand[i]), int(self.submit[i]),
            None if self.place_time[i] < 0 else int(self.place_time[i]),
            None if self.finish_time[i] < 0 else int(self.finish_time[i]),
            float(max(self.remaining[i], 0.0)), STATUS_NAMES[int(self.status[i])],
        )

    def _machine(self, machine_id):
        try:
            return self.machine_index[machine_id]
        except KeyError:
            raise UnknownIdError(f"unknown machine {machine_id!r}") from None

    def _task(self, task_id):
        try:
            return self.task_index[tuple(task_id)]
        except (KeyError, TypeError):
            raise UnknownIdError(f"unknown task {task_id!r}") from None

    @property
    def done(self):
        return self.n_finished == self.n_tasks or self.clock > self.horizon

    def cluster_utilization(self):
        total = self.capacity[:, 0].sum()
        return float(self.allocated[:, 0].sum() / total) if total > 0 else 0.0

    def status_counts(self):
        return {name: int(np.count_nonzero(self.status == code)) for code, name in STATUS_NAMES.items()}

    def submitted_by_clock(self):
        return int(np.count_nonzero(self.submit <= self.clock))


def init_state(trace: Trace, role_map: ag.RoleMap, seed: int, log_events=False) -> ClusterState:
    """Fresh state at clock 0 with every event stamped t=0 applied."""
    trace_machines = trace.machine_ids()
    if not trace_machines:
        raise ConfigError("trace has no machines")
    missing = [m for m in trace_machines if m not in role_map.machine_ownership]
    if missing:
        raise ConfigError(f"machines without a compute-agent owner: {missing[:5]}")
    return ClusterState(trace, role_map, seed, log_events)


def _place(state: ClusterState, i: int, m: int) -> bool:
    if not state.active[m]:
        return False
    new_alloc = state.allocated[m] + state.demand[i]
    if np.any(new_alloc > state.capacity[m] + CAPACITY_TOL):
        return False
    state.allocated[m] = new_alloc
    state.status[i] = RUNNING
    state.place_time[i] = state.clock
    state.machine_of[i] = m
    state.pending.remove(i)
    state.record.latencies.append(float(state.clock - state.submit[i]))
    return True


def place_task(state: ClusterState, task_id, machine_id) -> PlaceResult:
    """Place a pending task; over-capacity or inactive targets are rejected with state unchanged."""
    i = state._task(task_id)
    m = state._machine(machine_id)
    if state.status[i] != PENDING:
        raise ContractViolation(f"task {task_id!r} is {STATUS_NAMES[int(state.status[i])]}, not PENDING")
    if not state.active[m]:
        return PlaceResult(False, "machine inactive")
    if not _place(state, i, m):
        return PlaceResult(False, "capacity exceeded")
    state._log("place", i, m, None)
    return PlaceResult(True)


def _is_legal_shape(action, role):
    return (isinstance(action, ag.Action) and action.role == role.tag
            and isinstance(action.index, (int, np.integer)) and 0 <= action.index < role.action_space_size)


def step(state: ClusterState, joint_action) -> StepOutcome:
    """Advance one simulated second under ``joint_action`` (agent id -> Action)."""
    rm = state.role_map
    if set(joint_action) != set(rm.assignments):
        raise ContractViolation("joint action must hold exactly one action per agent")
    if state.done:
        raise ContractViolation("episode already finished")

    clock = state.clock
    local = {a: 0.0 for a in rm.agents}
    invalid = []
    n_m = len(state.machine_ids)

    # schedulers propose
    queue = list(state.pending)
    proposals = []
    for k, a in enumerate(rm.agents_of(ag.SCHEDULER)):
        act, role = joint_action[a], rm.assignments[a]
        if not _is_legal_shape(act, role):
            local[a] -= INVALID_ACTION_PENALTY
            invalid.append(a)
            continue
        if act.index == n_m:
            continue
        if k >= len(queue) or not state.active[act.index]:
            local[a] -= INVALID_ACTION_PENALTY
            invalid.append(a)
            continue
        proposals.append((a, queue[k], int(act.index)))

    # compute agents admit or bounce
    admit = {}
    for a in rm.agents_of(ag.COMPUTE):
        act, role = joint_action[a], rm.assignments[a]
        if not _is_legal_shape(act, role):
            local[a] -= INVALID_ACTION_PENALTY
            invalid.append(a)
            admit[a] = False
        else:
            admit[a] = act.index == ag.ADMIT
    rejections = dict.fromkeys(admit, 0)
    placed = []
    for a, i, m in proposals:
        owner = int(state.owner[m])
        if not admit[owner]:
            state._log("bounce", i, m, owner)
            continue
        if _place(state, i, m):
            local[a] -= (clock - state.submit[i]) / state.horizon
            placed.append((state.task_keys[i], state.machine_ids[m]))
            state._log("place", i, m, a)
        else:
            local[a] -= INVALID_ACTION_PENALTY
            invalid.append(a)
            rejections[owner] += 1
            state._log("reject", i, m, a)

    # storage agents set io throttles
    churn = {}
    for a in rm.agents_of(ag.STORAGE):
        act, role = joint_action[a], rm.assignments[a]
        if not _is_legal_shape(act, role):
            local[a] -= INVALID_ACTION_PENALTY
            invalid.append(a)
            churn[a] = 0
            continue
        level = ag.THROTTLE_LEVELS[act.index]
        churn[a] = int(level != state.throttle[a])
        state.throttle[a] = level
    state.machine_throttle = np.array([state.throttle[a] for a in state.storage_of], dtype=float)

    # the second [clock, clock + 1) elapses
    running = np.flatnonzero(state.status == RUNNING)
    cap_cpu = state.capacity[:, 0]
    machine_util = np.divide(state.allocated[:, 0], cap_cpu, out=np.zeros(n_m), where=cap_cpu > 0)
    total_cap = cap_cpu.sum()
    util = float(state.allocated[:, 0].sum() / total_cap) if total_cap > 0 else 0.0
    rec = state.record
    rec.utilization.append(util)
    if running.size:
        cpu_time = np.bincount(state.tenant_of[running], weights=state.demand[running, 0],
                               minlength=len(state.tenant_ids))
        for t, name in enumerate(state.tenant_ids):
            rec.tenant_cpu_time[name] += float(cpu_time[t])

    for a in rm.agents_of(ag.COMPUTE):
        owned = np.flatnonzero((state.owner == a) & state.active)
        u = float(machine_util[owned].mean()) if owned.size else 0.0
        local[a] += u - OVERLOAD_REJECTION_PENALTY * rejections[a]
    running_machines = state.machine_of[running]
    for a in rm.agents_of(ag.STORAGE):
        governed = np.count_nonzero(state.storage_of[running_machines] == a) if running.size else 0
        progress = state.throttle[a] if governed else 0.0
        local[a] += progress - THROTTLE_CHURN_PENALTY * churn[a]

    if running.size:
        state.remaining[running] -= state.machine_throttle[running_machines]
        done_now = running[state.remaining[running] <= 1e-12]
        for i in done_now:
            m = state.machine_of[i]
            state.allocated[m] = np.maximum(state.allocated[m] - state.demand[i], 0.0)
            state.capacity[m] = np.maximum(state.target[m], state.allocated[m])
            state.status[i] = FINISHED
            state.finish_time[i] = clock + 1
            state._log("finish", i, m, None)
        state.n_finished += len(done_now)
        rec.finished += len(done_now)

    global_signal = util - len(state.pending) / max(state.n_tasks, 1)
    state.clock = clock + 1
    rec.sim_seconds += 1
    state._inject_events()
    return StepOutcome(local, global_signal, placed, invalid, state.done)


# -- observations ------------------------------------------------------------


def _utilization(alloc, cap):
    return np.divide(alloc, cap, out=np.zeros_like(alloc), where=cap > 0)


def local_features(state: ClusterState, agent_id) -> np.ndarray:
    """Ground-truth feature vector for an agent, laid out per FEATURE_SCHEMA_VERSION."""
    rm = state.role_map
    role = rm.role_of(agent_id)
    queue_frac = len(state.pending) / max(state.n_tasks, 1)
    clock_frac = min(state.clock / state.horizon, 1.0)
    x = np.zeros(role.observation_size)

    if role.tag == ag.SCHEDULER:
        slot = rm.scheduler_slot(agent_id)
        residual = state.capacity - state.allocated
        base = ag.SCHEDULER_TASK_FEATURES
        n_m = len(state.machine_ids)
        if slot < len(state.pending):
            i = state.pending[slot]
            x[0] = 1.0
            x[1:4] = state.demand[i]
            x[4] = min((state.clock - state.submit[i]) / state.horizon, 1.0)
            flags = kernels.fits(residual, state.demand[i], state.active)
        else:
            flags = np.zeros(n_m)
        block = np.zeros((n_m, ag.SCHEDULER_MACHINE_FEATURES))
        block[:, :3] = np.where(state.active[:, None], residual, 0.0)
        block[:, 3] = flags
        x[base:base + block.size] = block.ravel()
    elif role.tag == ag.COMPUTE:
        owned = [state.machine_index[m] for m in rm.owned_machines(agent_id)]
        util = _utilization(state.allocated[owned], state.capacity[owned])
        block = np.zeros((len(owned), ag.COMPUTE_SLOT_FEATURES))
        block[:, :3] = util
        block[:, 3] = state.active[owned]
        x[:block.size] = block.ravel()
        j = (role.observation_size - 2 - ag.CONTEXT_FEATURES)
        if state.pending:
            head = state.pending[0]
            residual = state.capacity[owned] - state.allocated[owned]
            x[j] = float(kernels.fits(residual, state.demand[head], state.active[owned]).any())
            x[j + 1] = state.demand[head, 0]
    else:
        group = [state.machine_index[m] for m in rm.storage_groups[agent_id]]
        running = state.status == RUNNING
        counts = np.array([np.count_nonzero(running & (state.machine_of == m)) for m in group], dtype=float)
        util = _utilization(state.allocated[group], state.capacity[group])
        block = np.zeros((len(group), ag.STORAGE_SLOT_FEATURES))
        block[:, 0] = counts / 10.0
        block[:, 1] = util[:, 0]
        block[:, 2] = util[:, 2]
        x[:block.size] = block.ravel()
        x[role.observation_size - 1 - ag.CONTEXT_FEATURES] = state.throttle[agent_id]
    x[-2] = queue_frac
    x[-1] = clock_frac
    return x


def observe_local(state: ClusterState, agent_id, info_loss_rate=0.0, rng=None) -> ag.Observation:
    """Agent's view with each feature independently lost with probability ``info_loss_rate``.

    A lost feature repeats the agent's last observed value for it (zero if
    never observed) and raises its staleness flag.
    """
    if not 0.0 <= info_loss_rate <= 1.0:
        raise ContractViolation("info_loss_rate must lie in [0, 1]")
    role = state.role_map.role_of(agent_id)
    truth = local_features(state, agent_id)
    memory = state.obs_memory.get(agent_id)
    if memory is None:
        memory = np.zeros_like(truth)
    if info_loss_rate == 0.0:
        lost = np.zeros(truth.shape, dtype=bool)
    elif info_loss_rate == 1.0:
        lost = np.ones(truth.shape, dtype=bool)
    else:
        rng = state.rng if rng is None else rng
        lost = rng.random(truth.shape[0]) < info_loss_rate
    features = np.where(lost, memory, truth)
    state.obs_memory[agent_id] = features
    return ag.Observation(role.tag, features, lost.astype(np.float64))


def global_size(n_machines, n_tenants):
    return 2 * n_machines + 1 + n_tenants + 1


def observe_global(state: ClusterState) -> np.ndarray:
    """Critic input: per-machine cpu and mem utilization, queue fraction, tenant running shares, clock fraction."""
    util = _utilization(state.allocated[:, :2], state.capacity[:, :2])
    n_ten = len(state.tenant_ids)
    shares = np.zeros(n_ten)
    total_cap = state.capacity[:, 0].sum()
    running = np.flatnonzero(state.status == RUNNING)
    if running.size and total_cap > 0:
        shares = np.bincount(state.tenant_of[running], weights=state.demand[running, 0], minlength=n_ten) / total_cap
    return np.concatenate([
        util[:, 0], util[:, 1],
        [len(state.pending) / max(state.n_tasks, 1)],
        shares,
        [min(state.clock / state.horizon, 1.0)],
    ])


def check_invariants(state: ClusterState):
    """Raise AssertionError if capacity safety or task conservation is broken."""
    assert np.all(state.allocated <= state.capacity + CAPACITY_TOL), "allocation exceeds capacity"
    assert np.all(state.allocated >= -CAPACITY_TOL), "negative allocation"
    counts = state.status_counts()
    live = counts["PENDING"] + counts["RUNNING"] + counts["FINISHED"]
    assert live == state.submitted_by_clock(), "task conservation violated"
    assert counts["PENDING"] == len(state.pending) == len(set(state.pending)), "pending queue out of sync"
    assert np.all(state.remaining[state.status == RUNNING] > -1.0), "remaining work underflow"


def write_episode_log(state: ClusterState, path):
    if state.log is None:
        raise ContractViolation("state was created without event logging")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        w.writerows(state.log)

