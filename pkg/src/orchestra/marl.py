"""Off-policy actor-critic training with role-shared actors and one centralized critic.

Per epoch: roll out episodes with a frozen parameter snapshot, append the
transitions to a staleness-bounded replay buffer, then take gradient steps on
uniformly drawn batches. Rewards are fused (local/global), normalized within
each role's slice of the batch, and turned into one-step TD advantages by the
critic, which sees the global state.
"""

from __future__ import annotations

import csv
import json
import math
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from orchestra import agents as ag
from orchestra import policy as pol
from orchestra import sim
from orchestra.errors import ConfigError, ContractViolation, NumericalError
from orchestra.metrics import EpisodeRecord, merge_records

SHARED = "SHARED"
ROLE_CODE = {tag: i for i, tag in enumerate(ag.ROLE_TAGS)}

VARIANTS = ("BASELINE", "HRAC_ONLY", "LGRS_ONLY", "FULL")
VARIANT_LABELS = {"BASELINE": "BASELINE", "HRAC_ONLY": "+HRAC", "LGRS_ONLY": "+LGRS", "FULL": "FULL"}

CURVE_HEADER = ("epoch", "lr", "mean_utilization", "mean_latency_s", "actor_loss", "critic_loss", "episodes")
CHECKPOINT_FILE = "checkpoint.json"
BUFFER_FILE = "buffer.npz"
CURVE_FILE = "curve.csv"

# SeedSequence stream tags
_INIT_STREAM = 7_000_001
_BATCH_STREAM = 7_000_002
_EVAL_STREAM = 7_000_003


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    alpha_fusion: float = 0.5
    eps_norm: float = 1e-8
    batch_size: int = 64
    buffer_capacity: int = 200_000
    staleness_limit: int = 5
    total_epochs: int = 500
    episodes_per_epoch: int = 1
    rollout_workers: int = 1
    seeds: tuple = (0,)
    lr_initial: float = 1e-4
    lr_floor: float = 1e-5
    hidden_sizes: tuple = (64, 64)
    updates_per_epoch: int = 1
    batch_per_agent: bool = False   # draw batch_size rows per agent instead of in total
    role_policies: bool = True
    normalize_rewards: bool = True
    checkpoint_every: int = 50
    eval_episodes: int = 5
    convergence_window: int = 20
    convergence_tol: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if not 0.0 <= self.alpha_fusion <= 1.0:
            raise ConfigError("alpha_fusion must lie in [0, 1]")
        if not self.eps_norm > 0:
            raise ConfigError("eps_norm must be > 0")
        for name in ("batch_size", "buffer_capacity", "staleness_limit", "episodes_per_epoch",
                     "rollout_workers", "updates_per_epoch", "checkpoint_every", "eval_episodes",
                     "convergence_window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.total_epochs < 0:
            raise ConfigError("total_epochs must be >= 0")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ConfigError("hidden_sizes must be positive")
        if not 0 <= self.lr_floor <= self.lr_initial:
            raise ConfigError("need 0 <= lr_floor <= lr_initial")

    @classmethod
    def from_dict(cls, doc) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self):
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


def ablation_variant(config: TrainConfig, variant: str) -> TrainConfig:
    """Switch the role-partitioned policies and the reward fusion/normalization on or off."""
    if variant == "FULL":
        return config
    if variant == "BASELINE":
        return replace(config, role_policies=False, alpha_fusion=1.0, normalize_rewards=False)
    if variant == "HRAC_ONLY":
        return replace(config, role_policies=True, alpha_fusion=1.0, normalize_rewards=False)
    if variant == "LGRS_ONLY":
        return replace(config, role_policies=False, alpha_fusion=0.5, normalize_rewards=True)
    raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


# -- reward shaping ----------------------------------------------------------


def shape_reward(local, global_signal, alpha_fusion):
    """Convex fusion of an agent's local reward with the shared global signal."""
    return alpha_fusion * local + (1.0 - alpha_fusion) * global_signal


def normalize_rewards_per_role(rewards, eps_norm=1e-8):
    """Standardize one role's batch rewards with the population mean and std."""
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise ContractViolation("cannot normalize an empty batch")
    return (r - r.mean()) / (r.std() + eps_norm)


def normalize_by_role(rewards, role_codes, eps_norm=1e-8):
    out = np.empty(len(rewards))
    role_codes = np.asarray(role_codes)
    for code in np.unique(role_codes):
        sel = role_codes == code
        out[sel] = normalize_rewards_per_role(np.asarray(rewards)[sel], eps_norm)
    return out


def advantage(reward, v_t, v_t1, gamma, done):
    """One-step TD residual; a terminal transition drops the bootstrap term."""
    return reward + gamma * v_t1 * (1.0 - np.asarray(done, dtype=float)) - v_t


# -- policy layout -----------------------------------------------------------


@dataclass(frozen=True)
class PolicyLayout:
    """Which network each agent uses, and how its inputs and actions map onto it.

    With role policies every role owns a network sized to the role. Without,
    one network serves all agents: observations are zero-padded to the widest
    role and actions live in the disjoint union of the role action spaces,
    with other roles' segments masked out.
    """

    role_map: ag.RoleMap
    shared: bool

    @property
    def roles(self):
        return self.role_map.roles()

    @property
    def groups(self):
        return (SHARED,) if self.shared else tuple(self.roles)

    def group_of(self, role_tag):
        return SHARED if self.shared else role_tag

    @property
    def width(self):
        return max(r.observation_size for r in self.roles.values())

    def offsets(self):
        out, pos = {}, 0
        for tag, role in self.roles.items():
            out[tag] = pos
            pos += role.action_space_size
        return out, pos

    def architecture(self, group, hidden):
        if group == SHARED:
            return (2 * self.width, *hidden, self.offsets()[1])
        role = self.roles[group]
        return (2 * role.observation_size, *hidden, role.action_space_size)

    def input(self, obs, role):
        return ag.policy_input(obs, self.width if self.shared else None)

    def mask(self, mask, role):
        if not self.shared:
            return mask
        offsets, total = self.offsets()
        out = np.zeros(total, dtype=np.uint8)
        out[offsets[role.tag]:offsets[role.tag] + role.action_space_size] = mask
        return out

    def local_index(self, idx, role):
        return idx - self.offsets()[0][role.tag] if self.shared else idx

    def init_params(self, hidden, seed):
        return {g: pol.init_params(self.architecture(g, hidden), np.random.SeedSequence([seed, _INIT_STREAM, i]))
                for i, g in enumerate(self.groups)}


def critic_architecture(role_map, n_tenants, hidden):
    return (sim.global_size(role_map.n_machines, n_tenants), *hidden, 1)


# -- transitions and replay --------------------------------------------------


_BLOCK_FIELDS = ("agent", "role", "obs", "next_obs", "mask", "action", "logp",
                 "local", "global_signal", "g", "g_next", "done", "epoch")


@dataclass
class Transition:
    agent_id: int
    role: str
    observation: np.ndarray
    global_state: np.ndarray
    action: int
    log_prob: float
    local_reward: float
    global_signal: float
    next_observation: np.ndarray
    next_global_state: np.ndarray
    done: bool
    epoch: int


def _empty_block():
    return {k: [] for k in _BLOCK_FIELDS}


def _finish_block(block):
    return {k: np.asarray(v) for k, v in block.items()}


def _concat_blocks(blocks_list, groups):
    out = {}
    for g in groups:
        parts = [b[g] for b in blocks_list if g in b and len(b[g]["agent"])]
        if parts:
            out[g] = {k: np.concatenate([p[k] for p in parts]) for k in _BLOCK_FIELDS}
    return out


class ReplayBuffer:
    """Bounded FIFO of per-epoch transition chunks; oldest rows leave first."""

    def __init__(self, capacity, staleness_limit):
        if capacity < 1 or staleness_limit < 1:
            raise ConfigError("buffer capacity and staleness limit must be >= 1")
        self.capacity = capacity
        self.staleness_limit = staleness_limit
        self.chunks = []   # [(epoch, {group: block})]
        self._index = None

    def __len__(self):
        return sum(len(b["agent"]) for _, blocks in self.chunks for b in blocks.values())

    def add(self, epoch, blocks):
        self.chunks.append((epoch, blocks))
        self._index = None
        excess = len(self) - self.capacity
        while excess > 0:
            ep, oldest = self.chunks[0]
            n_old = sum(len(b["agent"]) for b in oldest.values())
            if n_old <= excess:
                self.chunks.pop(0)
                excess -= n_old
                continue
            trimmed = {}
            for g, b in oldest.items():
                cut = min(excess, len(b["agent"]))
                excess -= cut
                trimmed[g] = {k: v[cut:] for k, v in b.items()}
            self.chunks[0] = (ep, trimmed)

    def evict_stale(self, current_epoch):
        """Keep only chunks collected within the last ``staleness_limit`` epochs."""
        keep = [(e, b) for e, b in self.chunks if current_epoch - e < self.staleness_limit]
        if len(keep) != len(self.chunks):
            self.chunks = keep
            self._index = None

    def oldest_epoch(self):
        return min((e for e, _ in self.chunks), default=None)

    def _build_index(self, groups):
        cat = _concat_blocks([b for _, b in self.chunks], groups)
        group_ids, rows = [], []
        offsets = {g: 0 for g in cat}
        for _, blocks in self.chunks:
            for gi, g in enumerate(groups):
                if g in blocks and len(blocks[g]["agent"]):
                    n = len(blocks[g]["agent"])
                    group_ids.append(np.full(n, gi))
                    rows.append(np.arange(offsets[g], offsets[g] + n))
                    offsets[g] += n
        if group_ids:
            self._index = (cat, np.concatenate(group_ids), np.concatenate(rows))
        else:
            self._index = (cat, np.zeros(0, dtype=int), np.zeros(0, dtype=int))

    def sample(self, batch_size, rng, groups):
        """Uniform draw without replacement; returns {group: block of selected rows}."""
        if self._index is None:
            self._build_index(groups)
        cat, group_ids, rows = self._index
        n = len(group_ids)
        if n == 0:
            raise ContractViolation("cannot sample from an empty buffer")
        pick = np.sort(rng.choice(n, size=min(batch_size, n), replace=False))
        out = {}
        for gi, g in enumerate(groups):
            sel = rows[pick[group_ids[pick] == gi]]
            if sel.size:
                out[g] = {k: v[sel] for k, v in cat[g].items()}
        return out

    def transitions(self):
        for _, blocks in self.chunks:
            for b in blocks.values():
                for i in range(len(b["agent"])):
                    yield Transition(
                        int(b["agent"][i]), ag.ROLE_TAGS[int(b["role"][i])], b["obs"][i], b["g"][i],
                        int(b["action"][i]), float(b["logp"][i]), float(b["local"][i]),
                        float(b["global_signal"][i]), b["next_obs"][i], b["g_next"][i],
                        bool(b["done"][i]), int(b["epoch"][i]),
                    )

    def save(self, path):
        arrays = {"capacity": np.array(self.capacity), "staleness_limit": np.array(self.staleness_limit)}
        manifest = []
        for ci, (epoch, blocks) in enumerate(self.chunks):
            for g, b in blocks.items():
                manifest.append([ci, epoch, g])
                for k, v in b.items():
                    arrays[f"c{ci}:{g}:{k}"] = v
        arrays["manifest"] = np.array(json.dumps(manifest))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as data:
            buf = cls(int(data["capacity"]), int(data["staleness_limit"]))
            chunks = {}
            for ci, epoch, g in json.loads(str(data["manifest"])):
                chunks.setdefault(ci, (epoch, {}))[1][g] = {k: data[f"c{ci}:{g}:{k}"] for k in _BLOCK_FIELDS}
            buf.chunks = [chunks[ci] for ci in sorted(chunks)]
        return buf


# -- rollouts ----------------------------------------------------------------


def episode_streams(seed, epoch, episode):
    """(simulator seed, policy rng) for one episode, independent of worker assignment."""
    env_ss, pol_ss = np.random.SeedSequence([seed, epoch, episode]).spawn(2)
    return int(env_ss.generate_state(1)[0]), np.random.default_rng(pol_ss)


def rollout(trace, layout: PolicyLayout, params, env_seed, rng, info_loss_rate=0.0, epoch=0, collect=True):
    """Run one episode with the given policies; returns (EpisodeRecord, {group: block} or None)."""
    rm = layout.role_map
    state = sim.init_state(trace, rm, env_seed)
    agent_ids = rm.agents
    roles = [rm.assignments[a] for a in agent_ids]
    groups = [layout.group_of(r.tag) for r in roles]
    codes = [ROLE_CODE[r.tag] for r in roles]
    blocks = {g: _empty_block() for g in layout.groups} if collect else None
    g_now = sim.observe_global(state) if collect else None

    def observe():
        xs, masks = [], []
        for a, role in zip(agent_ids, roles):
            obs = sim.observe_local(state, a, info_loss_rate)
            mask = ag.legal_mask(state, a, rm) if info_loss_rate == 0.0 else ag.observed_mask(obs, role)
            xs.append(layout.input(obs, role))
            masks.append(layout.mask(mask, role))
        return xs, masks

    xs, masks = observe()
    while not state.done:
        joint, picks = {}, []
        for k, (a, role) in enumerate(zip(agent_ids, roles)):
            idx, logp = ag.sample_from_input(params[groups[k]], xs[k], masks[k], rng)
            joint[a] = ag.Action(role.tag, layout.local_index(idx, role))
            picks.append((idx, logp))
        out = sim.step(state, joint)
        next_xs, next_masks = observe()
        if collect:
            g_next = sim.observe_global(state)
            for k, a in enumerate(agent_ids):
                b = blocks[groups[k]]
                b["agent"].append(a)
                b["role"].append(codes[k])
                b["obs"].append(xs[k])
                b["next_obs"].append(next_xs[k])
                b["mask"].append(masks[k])
                b["action"].append(picks[k][0])
                b["logp"].append(picks[k][1])
                b["local"].append(out.local_rewards[a])
                b["global_signal"].append(out.global_signal)
                b["g"].append(g_now)
                b["g_next"].append(g_next)
                b["done"].append(out.done)
                b["epoch"].append(epoch)
            g_now = g_next
        xs, masks = next_xs, next_masks
    if collect:
        blocks = {g: _finish_block(b) for g, b in blocks.items() if b["agent"]}
    return state.record, blocks


def _rollout_job(args):
    trace, layout, params, seed, epoch, episode, info_loss_rate = args
    env_seed, rng = episode_streams(seed, epoch, episode)
    return rollout(trace, layout, params, env_seed, rng, info_loss_rate, epoch)


def worker_cap():
    env = os.environ.get("ORCHESTRA_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"ORCHESTRA_WORKERS must be an integer, got {env!r}") from None
    return None


def _executor(workers):
    cap = worker_cap()
    if cap is not None:
        workers = min(workers, cap)
    if workers <= 1:
        return None
    return ProcessPoolExecutor(max_workers=workers, mp_context=multiprocessing.get_context("fork"))


# -- baseline controllers ------------------------------------------------------


def random_controller(state, rm, rng):
    """Uniform over each agent's legal actions."""
    joint = {}
    for a in rm.agents:
        role = rm.assignments[a]
        legal = np.flatnonzero(ag.legal_mask(state, a, rm))
        joint[a] = ag.Action(role.tag, int(legal[rng.integers(len(legal))]))
    return joint


def greedy_controller(state, rm, rng=None):
    """First-fit: each scheduler places its slot task on the first machine with room; always admit; full io."""
    joint = {}
    residual = state.capacity - state.allocated
    n_m = rm.n_machines
    for k, a in enumerate(rm.agents_of(ag.SCHEDULER)):
        choice = n_m
        if k < len(state.pending):
            d = state.demand[state.pending[k]]
            for m in range(n_m):
                if state.active[m] and np.all(residual[m] + 1e-12 >= d):
                    choice = m
                    residual[m] -= d
                    break
        joint[a] = ag.Action(ag.SCHEDULER, choice)
    for a in rm.agents_of(ag.COMPUTE):
        joint[a] = ag.Action(ag.COMPUTE, ag.ADMIT)
    for a in rm.agents_of(ag.STORAGE):
        joint[a] = ag.Action(ag.STORAGE, ag.DEFAULT_THROTTLE_INDEX)
    return joint


def run_controller(trace, role_map, controller, seed) -> EpisodeRecord:
    env_seed, rng = episode_streams(seed, _EVAL_STREAM, 0)
    state = sim.init_state(trace, role_map, env_seed)
    while not state.done:
        sim.step(state, controller(state, role_map, rng))
    return state.record


# -- updates -----------------------------------------------------------------


@dataclass
class Batch:
    obs: np.ndarray
    mask: np.ndarray
    action: np.ndarray
    role: np.ndarray
    reward: np.ndarray
    g: np.ndarray
    g_next: np.ndarray
    done: np.ndarray
    advantage: np.ndarray | None = None

    def __len__(self):
        return len(self.action)


def update_critic(critic, batch: Batch, gamma, lr, adam_state):
    """One Adam step on the mean squared TD error with the bootstrap target held fixed.

    Returns (critic, adam_state, loss before the step).
    """
    if len(batch) == 0:
        raise ContractViolation("empty batch")
    v_next = pol.values(critic, batch.g_next)
    targets = batch.reward + gamma * v_next * (1.0 - batch.done.astype(float))
    loss, grad = pol.value_loss_and_grad(critic, batch.g, targets)
    critic, adam_state = pol.adam_step(critic, grad, adam_state, lr)
    return critic, adam_state, loss


def update_actor(role, params, batch: Batch, lr, adam_state):
    """One Adam ascent step on mean(advantage * log pi) pooled over the role's agents.

    ``role`` is a role tag, or ``SHARED`` for the single all-role network.
    Returns (params, adam_state, actor loss before the step).
    """
    if batch.advantage is None:
        raise ContractViolation("advantages must be computed before the actor update")
    if role != SHARED and np.any(batch.role != ROLE_CODE[role]):
        raise ContractViolation(f"batch contains transitions outside role {role}")
    grad, logp = pol.policy_gradient(params, batch.obs, batch.mask, batch.action, batch.advantage)
    loss = -float(np.mean(batch.advantage * logp))
    if not math.isfinite(loss):
        raise NumericalError("actor loss is not finite")
    params, adam_state = pol.adam_step(params, grad.scaled(-1.0), adam_state, lr)
    return params, adam_state, loss


def _fused_rewards(sample, config):
    fused = {}
    for g, b in sample.items():
        fused[g] = shape_reward(b["local"], b["global_signal"], config.alpha_fusion)
    if config.normalize_rewards:
        order = list(sample)
        flat = np.concatenate([fused[g] for g in order])
        codes = np.concatenate([sample[g]["role"] for g in order])
        normed = normalize_by_role(flat, codes, config.eps_norm)
        pos = 0
        for g in order:
            n = len(fused[g])
            fused[g] = normed[pos:pos + n]
            pos += n
    return fused


def _batch_of(block, reward):
    return Batch(block["obs"], block["mask"].astype(bool), block["action"], block["role"], reward,
                 block["g"], block["g_next"], block["done"])


def update_step(state: "TrainerState", sample, config: TrainConfig, lr):
    """Critic first, then every policy group, on one sampled batch; returns (actor_loss, critic_loss)."""
    fused = _fused_rewards(sample, config)
    order = [g for g in state.layout.groups if g in sample]
    joint = Batch(
        obs=None, mask=None, action=np.concatenate([sample[g]["action"] for g in order]),
        role=np.concatenate([sample[g]["role"] for g in order]),
        reward=np.concatenate([fused[g] for g in order]),
        g=np.concatenate([sample[g]["g"] for g in order]),
        g_next=np.concatenate([sample[g]["g_next"] for g in order]),
        done=np.concatenate([sample[g]["done"] for g in order]),
    )
    state.critic, state.critic_adam, critic_loss = update_critic(
        state.critic, joint, config.gamma, lr, state.critic_adam)

    total, weighted = 0, 0.0
    for g in order:
        batch = _batch_of(sample[g], fused[g])
        batch.advantage = advantage(batch.reward, pol.values(state.critic, batch.g),
                                    pol.values(state.critic, batch.g_next), config.gamma, batch.done)
        state.params[g], state.adams[g], loss = update_actor(g, state.params[g], batch, lr, state.adams[g])
        weighted += loss * len(batch)
        total += len(batch)
    return weighted / total, critic_loss


# -- training loop -------------------------------------------------------------


@dataclass
class CurveRow:
    epoch: int
    lr: float
    mean_utilization: float
    mean_latency_s: float | None
    actor_loss: float
    critic_loss: float
    episodes: int

    def cells(self):
        def f(x):
            return "" if x is None else repr(float(x))
        return [str(self.epoch), f(self.lr), f(self.mean_utilization), f(self.mean_latency_s),
                f(self.actor_loss), f(self.critic_loss), str(self.episodes)]

    @classmethod
    def from_cells(cls, row):
        def f(x):
            return None if x == "" else float(x)
        return cls(int(row["epoch"]), f(row["lr"]), f(row["mean_utilization"]), f(row["mean_latency_s"]),
                   f(row["actor_loss"]), f(row["critic_loss"]), int(row["episodes"]))


def write_curve(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for r in rows:
            w.writerow(r.cells())


def read_curve(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CURVE_HEADER:
            raise ConfigError(f"{path}: unexpected learning-curve header")
        return [CurveRow.from_cells(r) for r in reader]


@dataclass
class TrainerState:
    layout: PolicyLayout
    params: dict
    adams: dict
    critic: pol.NetParams
    critic_adam: pol.AdamState
    epoch: int = -1   # last completed epoch


@dataclass
class RunArtifacts:
    """Everything a finished (or resumed) run leaves behind."""

    state: TrainerState
    curve: list = field(default_factory=list)
    update_times: list = field(default_factory=list)
    seed: int = 0

    @property
    def layout(self):
        return self.state.layout

    @property
    def params(self):
        return self.state.params

    @property
    def critic(self):
        return self.state.critic

    def utilization_curve(self):
        return [r.mean_utilization for r in self.curve]

    def checkpoint(self, config: TrainConfig):
        return checkpoint_dict(self.state, config, self.seed)


def init_trainer(config: TrainConfig, role_map, n_tenants, seed) -> TrainerState:
    layout = PolicyLayout(role_map, shared=not config.role_policies)
    params = layout.init_params(config.hidden_sizes, seed)
    critic = pol.init_params(critic_architecture(role_map, n_tenants, config.hidden_sizes),
                             np.random.SeedSequence([seed, _INIT_STREAM, 99]))
    return TrainerState(layout, params, {g: pol.adam_init(p) for g, p in params.items()},
                        critic, pol.adam_init(critic))


def checkpoint_dict(state: TrainerState, config: TrainConfig, seed):
    return {
        "version": pol.CHECKPOINT_VERSION,
        "epoch": state.epoch,
        "seed": seed,
        "shared": state.layout.shared,
        "role_counts": state.layout.role_map.counts(),
        "machine_ids": list(state.layout.role_map.machine_ids),
        "config": config.to_dict(),
        "policies": {g: pol.params_to_dict(p) for g, p in state.params.items()},
        "critic": pol.params_to_dict(state.critic),
        "adam": {g: pol.adam_to_dict(a) for g, a in state.adams.items()},
        "critic_adam": pol.adam_to_dict(state.critic_adam),
    }


def load_checkpoint(doc, role_map, n_tenants) -> TrainerState:
    """Rebuild trainer state, validating every network shape against the role map."""
    if doc.get("version") != pol.CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')!r}")
    config = TrainConfig.from_dict(doc["config"])
    state = init_trainer(config, role_map, n_tenants, int(doc["seed"]))
    if bool(doc["shared"]) != state.layout.shared:
        raise ConfigError("checkpoint policy sharing does not match the config")
    if set(doc["policies"]) != set(state.params):
        raise ConfigError("checkpoint policy groups do not match the role map")
    for g in state.params:
        p = pol.params_from_dict(doc["policies"][g])
        if p.architecture != state.params[g].architecture:
            raise ConfigError(f"checkpoint policy {g} has architecture {p.architecture}, "
                              f"expected {state.params[g].architecture}")
        state.params[g] = p
        state.adams[g] = pol.adam_from_dict(doc["adam"][g])
    critic = pol.params_from_dict(doc["critic"])
    if critic.architecture != state.critic.architecture:
        raise ConfigError("checkpoint critic shape does not match the global state layout")
    state.critic = critic
    state.critic_adam = pol.adam_from_dict(doc["critic_adam"])
    state.epoch = int(doc["epoch"])
    return state


def save_run(out_dir, artifacts: RunArtifacts, buffer: ReplayBuffer, config: TrainConfig):
    os.makedirs(out_dir, exist_ok=True)
    tmp = os.path.join(out_dir, CHECKPOINT_FILE + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(artifacts.checkpoint(config), fh)
    buffer.save(os.path.join(out_dir, BUFFER_FILE))
    write_curve(artifacts.curve, os.path.join(out_dir, CURVE_FILE))
    os.replace(tmp, os.path.join(out_dir, CHECKPOINT_FILE))


def _resume(out_dir, config, role_map, n_tenants, seed):
    path = os.path.join(out_dir, CHECKPOINT_FILE)
    if not os.path.exists(path):
        return None
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if TrainConfig.from_dict(doc["config"]) != config or int(doc["seed"]) != seed:
        raise ConfigError(f"{out_dir} holds a checkpoint from a different config or seed")
    state = load_checkpoint(doc, role_map, n_tenants)
    curve = [r for r in read_curve(os.path.join(out_dir, CURVE_FILE)) if r.epoch <= state.epoch]
    buffer = ReplayBuffer.load(os.path.join(out_dir, BUFFER_FILE))
    return RunArtifacts(state, curve, [], seed), buffer


def train(config: TrainConfig, trace, role_map, seed=None, info_loss_rate=0.0, out_dir=None,
          on_epoch=None) -> RunArtifacts:
    """Run ``config.total_epochs`` epochs of collection and updates.

    With ``out_dir`` the run checkpoints every ``checkpoint_every`` epochs and
    resumes from an existing checkpoint there. ``on_epoch(epoch, artifacts)``
    is called after each epoch.
    """
    seed = config.seeds[0] if seed is None else int(seed)
    n_tenants = len(trace.tenant_ids())
    resumed = _resume(out_dir, config, role_map, n_tenants, seed) if out_dir else None
    if resumed is not None:
        artifacts, buffer = resumed
    else:
        artifacts = RunArtifacts(init_trainer(config, role_map, n_tenants, seed), seed=seed)
        buffer = ReplayBuffer(config.buffer_capacity, config.staleness_limit)
    state = artifacts.state
    if config.total_epochs == 0:
        if out_dir:
            save_run(out_dir, artifacts, buffer, config)
        return artifacts

    schedule = pol.LrSchedule(config.lr_initial, config.lr_floor, config.total_epochs)
    batch_size = config.batch_size * (len(role_map.agents) if config.batch_per_agent else 1)
    pool = _executor(config.rollout_workers)
    try:
        for epoch in range(state.epoch + 1, config.total_epochs):
            lr = pol.lr_at(schedule, epoch)
            jobs = [(trace, state.layout, state.params, seed, epoch, j, info_loss_rate)
                    for j in range(config.episodes_per_epoch)]
            results = list(pool.map(_rollout_job, jobs)) if pool else [_rollout_job(j) for j in jobs]
            records = [r for r, _ in results]
            buffer.add(epoch, _concat_blocks([b for _, b in results], state.layout.groups))
            buffer.evict_stale(epoch)

            t0 = time.perf_counter()
            actor_losses, critic_losses = [], []
            for u in range(config.updates_per_epoch):
                rng = np.random.default_rng([seed, _BATCH_STREAM, epoch, u])
                sample = buffer.sample(batch_size, rng, state.layout.groups)
                a_loss, c_loss = update_step(state, sample, config, lr)
                actor_losses.append(a_loss)
                critic_losses.append(c_loss)
            artifacts.update_times.append(time.perf_counter() - t0)
            state.epoch = epoch

            merged = merge_records(records)
            latency = float(np.mean(merged.latencies)) if merged.latencies else None
            artifacts.curve.append(CurveRow(
                epoch, lr, float(np.mean([np.mean(r.utilization) for r in records])), latency,
                float(np.mean(actor_losses)), float(np.mean(critic_losses)), len(records),
            ))
            if out_dir and ((epoch + 1) % config.checkpoint_every == 0 or epoch == config.total_epochs - 1):
                save_run(out_dir, artifacts, buffer, config)
            if on_epoch is not None:
                on_epoch(epoch, artifacts)
    finally:
        if pool is not None:
            pool.shutdown()
    return artifacts


# -- evaluation ----------------------------------------------------------------


def evaluate(artifacts_or_state, trace, seeds, info_loss_rate=0.0):
    """Roll out the current policies once per seed without collecting transitions."""
    state = artifacts_or_state.state if isinstance(artifacts_or_state, RunArtifacts) else artifacts_or_state
    records = []
    for s in seeds:
        env_seed, rng = episode_streams(s, _EVAL_STREAM, 1)
        record, _ = rollout(trace, state.layout, state.params, env_seed, rng, info_loss_rate, collect=False)
        records.append(record)
    return records


def eval_seeds(seed, n):
    return [int(x) for x in np.random.SeedSequence([seed, _EVAL_STREAM]).generate_state(n)]


def controller_utilization(trace, role_map, controller, seeds):
    return float(np.mean([np.mean(run_controller(trace, role_map, controller, s).utilization) for s in seeds]))
