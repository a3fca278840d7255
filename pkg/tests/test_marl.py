import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orchestra import agents as ag
from orchestra import marl
from orchestra import policy as pol
from orchestra import sim
from orchestra.errors import ConfigError, ContractViolation
from conftest import small_trace
from oracles import bandit_probability

ROLES = {"compute": 2, "storage": 1, "scheduler": 1}
finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_shape_reward_examples():
    assert marl.shape_reward(-0.3, 5.0, 1.0) == -0.3
    assert marl.shape_reward(-0.3, 5.0, 0.0) == 5.0
    assert marl.shape_reward(2.0, 4.0, 0.5) == 3.0


def test_normalize_examples():
    out = marl.normalize_rewards_per_role([1.0, 2.0, 3.0])
    assert np.allclose(out, [-1.2247, 0.0, 1.2247], atol=1e-3)
    assert np.array_equal(marl.normalize_rewards_per_role([5.0, 5.0, 5.0]), [0.0, 0.0, 0.0])
    assert np.array_equal(marl.normalize_rewards_per_role([7.0]), [0.0])
    with pytest.raises(ContractViolation):
        marl.normalize_rewards_per_role([])


@given(st.lists(finite, min_size=2, max_size=200))
def test_normalized_batches_are_standardized(rs):
    out = marl.normalize_rewards_per_role(rs)
    assert abs(out.mean()) <= 1e-6
    if np.std(rs) > 1e-3:
        assert abs(out.std() - 1.0) <= 1e-3


def test_normalize_by_role_is_per_role():
    r = np.array([1.0, 10.0, 2.0, 20.0, 3.0, 30.0])
    codes = np.array([0, 1, 0, 1, 0, 1])
    out = marl.normalize_by_role(r, codes)
    assert np.allclose(out[codes == 0], marl.normalize_rewards_per_role([1, 2, 3]))
    assert np.allclose(out[codes == 1], marl.normalize_rewards_per_role([10, 20, 30]))


def test_advantage_examples():
    assert marl.advantage(1.0, 0.0, 0.0, 0.99, 0) == 1.0
    assert marl.advantage(0.0, 1.0, 1.0, 0.99, 0) == pytest.approx(-0.01, abs=1e-15)
    assert marl.advantage(0.5, 0.2, 99.0, 0.99, 1) == pytest.approx(0.3, abs=1e-15)


@given(finite, finite, finite, st.floats(0, 1), st.booleans())
def test_advantage_linear_in_reward(r, v, v1, gamma, done):
    diff = marl.advantage(2 * r, v, v1, gamma, done) - marl.advantage(r, v, v1, gamma, done)
    assert diff == pytest.approx(r, rel=1e-12, abs=1e-9)


def _critic_batch(G, G1, r, done):
    n = len(r)
    return marl.Batch(None, None, np.zeros(n, dtype=int), np.zeros(n, dtype=int), np.asarray(r, dtype=float),
                      np.asarray(G, dtype=float), np.asarray(G1, dtype=float), np.asarray(done))


def test_critic_loss_hand_batch():
    critic = pol.zero_params((3, 2, 1))
    critic.biases[-1][0] = 0.5                     # V == 0.5 everywhere
    batch = _critic_batch(np.ones((2, 3)), np.zeros((2, 3)), [1.0, 0.0], [0, 1])
    _, _, loss = marl.update_critic(critic, batch, 0.9, 1e-3, pol.adam_init(critic))
    # targets 1 + 0.9 * 0.5 = 1.45 and 0; errors -0.95, 0.5
    assert loss == pytest.approx((0.95 ** 2 + 0.5 ** 2) / 2, abs=1e-9)


def test_critic_at_targets_is_unchanged():
    critic = pol.zero_params((3, 2, 1))
    batch = _critic_batch(np.ones((2, 3)), np.ones((2, 3)), [0.0, 0.0], [0, 0])
    new, state, loss = marl.update_critic(critic, batch, 0.99, 1e-2, pol.adam_init(critic))
    assert loss == 0.0 and np.array_equal(new.flat(), critic.flat()) and state.t == 1


def test_critic_update_decreases_loss_at_small_lr():
    rng = np.random.default_rng(0)
    critic = pol.init_params((5, 8, 1), 0)
    batch = _critic_batch(rng.normal(size=(32, 5)), rng.normal(size=(32, 5)), rng.normal(size=32),
                          rng.random(32) < 0.1)
    new, _, before = marl.update_critic(critic, batch, 0.99, 1e-5, pol.adam_init(critic))
    v1 = pol.values(critic, batch.g_next)
    targets = batch.reward + 0.99 * v1 * (1.0 - batch.done)
    after, _ = pol.value_loss_and_grad(new, batch.g, targets)
    assert after < before


def _actor_batch(X, masks, actions, adv, role_code=0):
    n = len(actions)
    b = marl.Batch(np.asarray(X, dtype=float), np.asarray(masks, dtype=bool), np.asarray(actions),
                   np.full(n, role_code), np.zeros(n), np.zeros((n, 1)), np.zeros((n, 1)), np.zeros(n))
    b.advantage = np.asarray(adv, dtype=float)
    return b


def test_actor_zero_advantage_unchanged():
    p = pol.init_params((2, 4, 3), 0)
    b = _actor_batch(np.ones((3, 2)), np.ones((3, 3)), [0, 1, 2], [0.0, 0.0, 0.0])
    new, _, _ = marl.update_actor(ag.COMPUTE, p, b, 1e-2, pol.adam_init(p))
    assert np.array_equal(new.flat(), p.flat())


def test_actor_positive_advantage_raises_probability():
    p = pol.init_params((1, 4, 3), 1)
    x = np.ones((1, 1))
    mask = np.ones((1, 3))
    before = np.exp(pol.masked_log_softmax(pol.forward_actor(p, x[0]), mask[0]))[2]
    new, _, _ = marl.update_actor(ag.COMPUTE, p, _actor_batch(x, mask, [2], [1.0]), 1e-3, pol.adam_init(p))
    after = np.exp(pol.masked_log_softmax(pol.forward_actor(new, x[0]), mask[0]))[2]
    assert after > before


def test_actor_update_duplication_invariant():
    rng = np.random.default_rng(2)
    p = pol.init_params((3, 5, 4), 2)
    X, masks = rng.normal(size=(4, 3)), np.ones((4, 4))
    acts, adv = np.array([0, 3, 1, 1]), rng.normal(size=4)
    a, _, _ = marl.update_actor(ag.COMPUTE, p, _actor_batch(X, masks, acts, adv), 1e-3, pol.adam_init(p))
    b, _, _ = marl.update_actor(ag.COMPUTE, p, _actor_batch(np.vstack([X, X]), np.vstack([masks, masks]),
                                                            np.tile(acts, 2), np.tile(adv, 2)),
                                1e-3, pol.adam_init(p))
    assert np.allclose(a.flat(), b.flat(), rtol=0, atol=1e-15)


def test_actor_rejects_foreign_role_and_missing_advantage():
    p = pol.init_params((1, 2), 0)
    b = _actor_batch(np.ones((1, 1)), np.ones((1, 2)), [0], [1.0], role_code=marl.ROLE_CODE[ag.STORAGE])
    with pytest.raises(ContractViolation):
        marl.update_actor(ag.COMPUTE, p, b, 1e-3, pol.adam_init(p))
    marl.update_actor(marl.SHARED, p, b, 1e-3, pol.adam_init(p))   # shared network takes any role
    b.advantage = None
    with pytest.raises(ContractViolation):
        marl.update_actor(ag.STORAGE, p, b, 1e-3, pol.adam_init(p))


def test_bandit_improves_quickly():
    assert bandit_probability(200) > bandit_probability(0)


def test_ablation_variants():
    base = marl.TrainConfig()
    assert marl.ablation_variant(base, "FULL") == base
    b = marl.ablation_variant(base, "BASELINE")
    assert b.alpha_fusion == 1.0 and not b.role_policies and not b.normalize_rewards
    h = marl.ablation_variant(base, "HRAC_ONLY")
    assert h.role_policies and h.alpha_fusion == 1.0
    g = marl.ablation_variant(base, "LGRS_ONLY")
    assert not g.role_policies and g.alpha_fusion == 0.5 and g.normalize_rewards
    with pytest.raises(ConfigError):
        marl.ablation_variant(base, "NONE")


@pytest.mark.parametrize("bad", [{"gamma": 1.5}, {"alpha_fusion": -0.1}, {"batch_size": 0}, {"seeds": []},
                                 {"lr_floor": 1.0}, {"hidden_sizes": [0]}])
def test_train_config_validation(bad):
    with pytest.raises(ConfigError):
        marl.TrainConfig(**bad)
    with pytest.raises(ConfigError):
        marl.TrainConfig.from_dict({"unknown": 1})


def _blocks(epoch, n, group="G", role=0, start=0):
    b = {k: np.zeros(n) for k in marl._BLOCK_FIELDS}
    b["agent"] = np.arange(start, start + n)
    b["role"] = np.full(n, role)
    b["epoch"] = np.full(n, epoch)
    b["obs"] = np.zeros((n, 2))
    b["next_obs"] = np.zeros((n, 2))
    b["mask"] = np.ones((n, 2), dtype=np.uint8)
    b["g"] = np.zeros((n, 3))
    b["g_next"] = np.zeros((n, 3))
    b["done"] = np.zeros(n, dtype=bool)
    return {group: b}


def test_buffer_staleness_and_capacity():
    buf = marl.ReplayBuffer(capacity=25, staleness_limit=2)
    for e in range(5):
        buf.add(e, _blocks(e, 10, start=100 * e))
        buf.evict_stale(e)
        assert len(buf) <= 25
        assert all(e - t.epoch < 2 for t in buf.transitions())
    assert buf.oldest_epoch() == 3
    buf = marl.ReplayBuffer(capacity=25, staleness_limit=10)
    for e in range(3):
        buf.add(e, _blocks(e, 10, start=100 * e))
    agents = sorted(t.agent_id for t in buf.transitions())
    assert len(agents) == 25 and agents[0] == 5   # oldest five rows dropped


def test_buffer_sample_without_replacement():
    buf = marl.ReplayBuffer(100, 5)
    buf.add(0, {**_blocks(0, 10, "A", 0), **_blocks(0, 7, "B", 1, start=50)})
    out = buf.sample(12, np.random.default_rng(0), ("A", "B"))
    ids = np.concatenate([out[g]["agent"] for g in out])
    assert len(ids) == len(set(ids)) == 12
    everything = buf.sample(1000, np.random.default_rng(0), ("A", "B"))
    assert sum(len(everything[g]["agent"]) for g in everything) == 17
    with pytest.raises(ContractViolation):
        marl.ReplayBuffer(5, 1).sample(1, np.random.default_rng(0), ("A",))


def test_buffer_save_load(tmp_path):
    buf = marl.ReplayBuffer(100, 5)
    buf.add(3, _blocks(3, 4))
    buf.add(4, _blocks(4, 2, start=10))
    buf.save(tmp_path / "b.npz")
    again = marl.ReplayBuffer.load(tmp_path / "b.npz")
    assert [t.agent_id for t in again.transitions()] == [t.agent_id for t in buf.transitions()]
    assert again.capacity == 100 and again.staleness_limit == 5


@pytest.fixture(scope="module")
def tiny():
    t = small_trace(n_machines=3, n_tasks=12, rate=2.0, duration=3.0)
    rm = ag.assign_roles(ROLES, t.machine_ids())
    cfg = marl.TrainConfig(total_epochs=4, episodes_per_epoch=2, batch_size=32, updates_per_epoch=2,
                           hidden_sizes=(8,), lr_initial=1e-3, lr_floor=1e-4, checkpoint_every=2)
    return t, rm, cfg


def test_rollout_records_every_agent_every_step(tiny):
    t, rm, cfg = tiny
    state = marl.init_trainer(cfg, rm, len(t.tenant_ids()), 0)
    env_seed, rng = marl.episode_streams(0, 0, 0)
    record, blocks = marl.rollout(t, state.layout, state.params, env_seed, rng)
    steps = record.sim_seconds
    assert sum(len(b["agent"]) for b in blocks.values()) == steps * len(rm.agents)
    assert set(blocks) == set(rm.roles())
    for g, b in blocks.items():
        assert np.all(b["mask"][np.arange(len(b["action"])), b["action"]] == 1)
        assert np.all(b["logp"] <= 0.0)
        assert b["done"][-1]


def test_shared_layout_pads_and_offsets(tiny):
    t, rm, cfg = tiny
    layout = marl.PolicyLayout(rm, shared=True)
    offsets, total = layout.offsets()
    assert total == sum(r.action_space_size for r in rm.roles().values())
    role = rm.role_of(3)
    m = layout.mask(np.ones(role.action_space_size, dtype=np.uint8), role)
    assert m.sum() == role.action_space_size and m[offsets[ag.SCHEDULER]] == 1
    assert layout.local_index(offsets[ag.SCHEDULER] + 2, role) == 2
    state = marl.init_trainer(marl.ablation_variant(cfg, "BASELINE"), rm, len(t.tenant_ids()), 0)
    env_seed, rng = marl.episode_streams(0, 0, 0)
    _, blocks = marl.rollout(t, state.layout, state.params, env_seed, rng)
    assert set(blocks) == {marl.SHARED}
    assert set(blocks[marl.SHARED]["role"]) == {0, 1, 2}


def test_train_zero_epochs(tiny, tmp_path):
    t, rm, cfg = tiny
    from dataclasses import replace
    art = marl.train(replace(cfg, total_epochs=0), t, rm, out_dir=tmp_path)
    assert art.curve == [] and art.state.epoch == -1
    assert (tmp_path / marl.CHECKPOINT_FILE).exists()


def test_train_worker_count_invariance(tiny, tmp_path):
    t, rm, cfg = tiny
    from dataclasses import replace
    marl.train(cfg, t, rm, out_dir=tmp_path / "r1")
    marl.train(replace(cfg, rollout_workers=2), t, rm, out_dir=tmp_path / "r2")
    a = (tmp_path / "r1" / marl.CURVE_FILE).read_bytes()
    b = (tmp_path / "r2" / marl.CURVE_FILE).read_bytes()
    assert a == b and len(a.splitlines()) == cfg.total_epochs + 1


def test_resume_matches_uninterrupted(tiny, tmp_path):
    t, rm, cfg = tiny
    full = marl.train(cfg, t, rm, out_dir=tmp_path / "full")

    class Stop(Exception):
        pass

    def interrupt(epoch, _):
        if epoch == 2:
            raise Stop

    with pytest.raises(Stop):
        marl.train(cfg, t, rm, out_dir=tmp_path / "cut", on_epoch=interrupt)
    resumed = marl.train(cfg, t, rm, out_dir=tmp_path / "cut")
    assert (tmp_path / "full" / marl.CURVE_FILE).read_bytes() == (tmp_path / "cut" / marl.CURVE_FILE).read_bytes()
    for g in full.params:
        assert np.array_equal(full.params[g].flat(), resumed.params[g].flat())


def test_resume_refuses_other_config(tiny, tmp_path):
    t, rm, cfg = tiny
    from dataclasses import replace
    marl.train(replace(cfg, total_epochs=2), t, rm, out_dir=tmp_path)
    with pytest.raises(ConfigError):
        marl.train(replace(cfg, total_epochs=2, gamma=0.5), t, rm, out_dir=tmp_path)


def test_checkpoint_shape_validation(tiny, tmp_path):
    t, rm, cfg = tiny
    from dataclasses import replace
    marl.train(replace(cfg, total_epochs=1), t, rm, out_dir=tmp_path)
    doc = json.loads((tmp_path / marl.CHECKPOINT_FILE).read_text())
    state = marl.load_checkpoint(doc, rm, len(t.tenant_ids()))
    assert state.epoch == 0
    other = ag.assign_roles(ROLES, t.machine_ids()[:2])
    with pytest.raises(ConfigError):
        marl.load_checkpoint(doc, other, len(t.tenant_ids()))
    with pytest.raises(ConfigError):
        marl.load_checkpoint(doc, rm, len(t.tenant_ids()) + 1)


def test_controllers_produce_legal_joint_actions(tiny):
    t, rm, _ = tiny
    rng = np.random.default_rng(0)
    for controller in (marl.random_controller, marl.greedy_controller):
        s = sim.init_state(t, rm, 0)
        while not s.done:
            joint = controller(s, rm, rng)
            for a, act in joint.items():
                assert ag.legal_mask(s, a, rm)[act.index] == 1
            out = sim.step(s, joint)
            assert out.invalid_actions == []


def test_greedy_places_everything_on_easy_trace():
    t = small_trace(n_machines=4, n_tasks=10, rate=0.5, duration=2.0)
    rm = ag.assign_roles(ROLES, t.machine_ids())
    record = marl.run_controller(t, rm, marl.greedy_controller, 0)
    assert record.finished == 10


def test_curve_csv_roundtrip(tmp_path):
    rows = [marl.CurveRow(0, 1e-3, 0.5, None, -0.1, 0.2, 1), marl.CurveRow(1, 9e-4, 0.6, 12.5, 0.1, 0.3, 1)]
    marl.write_curve(rows, tmp_path / "c.csv")
    assert marl.read_curve(tmp_path / "c.csv") == rows
