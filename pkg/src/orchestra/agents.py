"""Role assignment, legal-action masks and role-shared policy sampling.

Every agent belongs to exactly one of three roles. Agents of a role share one
policy network, so the role map is all a caller needs to find the parameters
an agent samples from.

Action layouts per role:

* SCHEDULER: ``0..M-1`` place the scheduler's queue-slot task on machine ``m``;
  ``M`` defers.
* COMPUTE: ``0`` admits placements targeting owned machines this step, ``1`` defers them.
* STORAGE: index into ``THROTTLE_LEVELS`` for the governed machine group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from orchestra import kernels
from orchestra.errors import ConfigError, ContractViolation, UnknownIdError

COMPUTE = "COMPUTE"
STORAGE = "STORAGE"
SCHEDULER = "SCHEDULER"
ROLE_TAGS = (COMPUTE, STORAGE, SCHEDULER)

THROTTLE_LEVELS = (0.5, 0.75, 1.0)
ADMIT, COMPUTE_DEFER = 0, 1
DEFAULT_THROTTLE_INDEX = len(THROTTLE_LEVELS) - 1

# bump when any local feature layout below changes
FEATURE_SCHEMA_VERSION = 1
SCHEDULER_TASK_FEATURES = 5      # has_task, cpu, mem, io, wait fraction
SCHEDULER_MACHINE_FEATURES = 4   # residual cpu/mem/io, fits flag
COMPUTE_SLOT_FEATURES = 4        # cpu/mem/io utilization, active flag
STORAGE_SLOT_FEATURES = 3        # running count / 10, cpu utilization, io utilization
CONTEXT_FEATURES = 2             # queue fraction, clock fraction


def scheduler_obs_size(n_machines):
    return SCHEDULER_TASK_FEATURES + SCHEDULER_MACHINE_FEATURES * n_machines + CONTEXT_FEATURES


def compute_obs_size(slots):
    # + head-fits-owned flag, head cpu demand
    return COMPUTE_SLOT_FEATURES * slots + 2 + CONTEXT_FEATURES


def storage_obs_size(slots):
    # + current throttle
    return STORAGE_SLOT_FEATURES * slots + 1 + CONTEXT_FEATURES


@dataclass(frozen=True)
class Role:
    tag: str
    action_space_size: int
    observation_size: int

    def __post_init__(self):
        if self.tag not in ROLE_TAGS:
            raise ConfigError(f"unknown role {self.tag!r}")
        if self.action_space_size < 1 or self.observation_size < 1:
            raise ConfigError("role sizes must be >= 1")


@dataclass(frozen=True)
class Action:
    role: str
    index: int


@dataclass(eq=False)
class Observation:
    role: str
    features: np.ndarray
    staleness: np.ndarray

    def __post_init__(self):
        if len(self.features) != len(self.staleness):
            raise ContractViolation("features and staleness flags differ in length")


@dataclass(frozen=True)
class RoleMap:
    """The total agent -> role function plus machine ownership.

    Agent ids are consecutive integers: compute agents first, then storage,
    then schedulers.
    """

    assignments: Mapping[int, Role]
    machine_ownership: Mapping[str, int]
    storage_groups: Mapping[int, tuple[str, ...]]
    machine_ids: tuple[str, ...]

    @property
    def agents(self):
        return tuple(sorted(self.assignments))

    @property
    def n_machines(self):
        return len(self.machine_ids)

    def role_of(self, agent_id) -> Role:
        try:
            return self.assignments[agent_id]
        except KeyError:
            raise UnknownIdError(f"unknown agent {agent_id!r}") from None

    def agents_of(self, tag):
        return tuple(a for a in self.agents if self.assignments[a].tag == tag)

    def roles(self):
        """Role tag -> Role, in canonical order, for roles present."""
        out = {}
        for tag in ROLE_TAGS:
            members = self.agents_of(tag)
            if members:
                out[tag] = self.assignments[members[0]]
        return out

    def counts(self):
        return {tag: len(self.agents_of(tag)) for tag in ROLE_TAGS}

    def owned_machines(self, agent_id):
        return tuple(m for m in self.machine_ids if self.machine_ownership[m] == agent_id)

    def scheduler_slot(self, agent_id):
        return self.agents_of(SCHEDULER).index(agent_id)

    def storage_agent_of(self, machine_id):
        for agent, group in self.storage_groups.items():
            if machine_id in group:
                return agent
        raise UnknownIdError(f"machine {machine_id!r} has no storage group")


def assign_roles(config: Mapping[str, int], machines: Sequence[str]) -> RoleMap:
    """Deterministically map agents to roles and partition machines round-robin.

    ``config`` holds agent counts keyed by role (case-insensitive), e.g.
    ``{"compute": 2, "storage": 1, "scheduler": 1}``.
    """
    counts = {}
    for key, value in config.items():
        tag = str(key).upper()
        if tag not in ROLE_TAGS:
            raise ConfigError(f"unknown role {key!r}")
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"role count for {key!r} must be an integer")
        counts[tag] = value
    for tag in ROLE_TAGS:
        if counts.get(tag, 0) < 1:
            raise ConfigError(f"role {tag} needs at least one agent")
    machines = tuple(machines)
    if not machines:
        raise ConfigError("cannot assign roles over an empty machine list")
    if len(set(machines)) != len(machines):
        raise ConfigError("duplicate machine ids")
    for tag in (COMPUTE, STORAGE):
        if counts[tag] > len(machines):
            raise ConfigError(f"{counts[tag]} {tag} agents but only {len(machines)} machines to govern")

    n_m = len(machines)
    n_c, n_s = counts[COMPUTE], counts[STORAGE]
    compute_ids = list(range(n_c))
    storage_ids = list(range(n_c, n_c + n_s))
    scheduler_ids = list(range(n_c + n_s, n_c + n_s + counts[SCHEDULER]))

    ownership = {m: compute_ids[j % n_c] for j, m in enumerate(machines)}
    groups = {a: tuple(m for j, m in enumerate(machines) if j % n_s == i) for i, a in enumerate(storage_ids)}

    roles = {
        SCHEDULER: Role(SCHEDULER, n_m + 1, scheduler_obs_size(n_m)),
        COMPUTE: Role(COMPUTE, 2, compute_obs_size(math.ceil(n_m / n_c))),
        STORAGE: Role(STORAGE, len(THROTTLE_LEVELS), storage_obs_size(math.ceil(n_m / n_s))),
    }
    assignments = {}
    for a in compute_ids:
        assignments[a] = roles[COMPUTE]
    for a in storage_ids:
        assignments[a] = roles[STORAGE]
    for a in scheduler_ids:
        assignments[a] = roles[SCHEDULER]
    return RoleMap(assignments, ownership, groups, machines)


def noop_index(role: Role):
    if role.tag == SCHEDULER:
        return role.action_space_size - 1
    if role.tag == COMPUTE:
        return COMPUTE_DEFER
    return DEFAULT_THROTTLE_INDEX


def legal_mask(state, agent_id, role_map: RoleMap) -> np.ndarray:
    """Feasibility mask over the agent's role action space (uint8, defer always legal)."""
    role = role_map.role_of(agent_id)
    if role.tag != SCHEDULER:
        return np.ones(role.action_space_size, dtype=np.uint8)
    mask = np.zeros(role.action_space_size, dtype=np.uint8)
    mask[-1] = 1
    slot = role_map.scheduler_slot(agent_id)
    if slot < len(state.pending):
        task = state.pending[slot]
        mask[:-1] = kernels.fits(state.capacity - state.allocated, state.demand[task], state.active)
    return mask


def observed_mask(obs: Observation, role: Role) -> np.ndarray:
    """Mask an agent can derive from its own (possibly stale) observation.

    Equals ``legal_mask`` whenever the observation is fresh.
    """
    if role.tag != SCHEDULER:
        return np.ones(role.action_space_size, dtype=np.uint8)
    mask = np.zeros(role.action_space_size, dtype=np.uint8)
    mask[-1] = 1
    if obs.features[0] > 0.5:
        n = role.action_space_size - 1
        flags = obs.features[SCHEDULER_TASK_FEATURES + 3:SCHEDULER_TASK_FEATURES + SCHEDULER_MACHINE_FEATURES * n:
                             SCHEDULER_MACHINE_FEATURES]
        mask[:-1] = flags > 0.5
    return mask


def policy_input(obs: Observation, width=None) -> np.ndarray:
    """Network input: features then staleness flags, each zero-padded to ``width``."""
    n = len(obs.features)
    width = n if width is None else width
    if width < n:
        raise ContractViolation(f"observation of size {n} does not fit input width {width}")
    x = np.zeros(2 * width)
    x[:n] = obs.features
    x[width:width + n] = obs.staleness
    return x


def sample_from_input(policy, x, mask, rng):
    """Draw an index from the masked softmax over ``policy``'s logits; returns (index, log-prob)."""
    mask = np.asarray(mask, dtype=np.uint8)
    if not mask.any():
        raise ContractViolation("mask has no legal action")
    logits = kernels.mlp_forward(policy.weights, policy.biases, x)
    probs = kernels.masked_softmax(logits, mask)
    idx = kernels.sample_index(probs, rng.random())
    return idx, math.log(probs[idx])


def action_distribution(policy, obs: Observation, mask) -> np.ndarray:
    logits = kernels.mlp_forward(policy.weights, policy.biases, policy_input(obs))
    return kernels.masked_softmax(logits, np.asarray(mask, dtype=np.uint8))


def sample_action(policy, obs: Observation, mask, rng) -> tuple[Action, float]:
    """Sample ``a ~ pi_role(. | obs)`` restricted to legal actions."""
    idx, logp = sample_from_input(policy, policy_input(obs), mask, rng)
    return Action(obs.role, idx), logp
