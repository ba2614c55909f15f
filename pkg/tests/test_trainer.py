import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from entropylab.diagnostics import enumerate_distribution, format_mass
from entropylab.env import demonstrations, make_episode, micro_spec, score_format
from entropylab.numerics import ParamVector, Tape, finite_difference_check, inner
from entropylab.policy import PolicyArchitecture, greedy, init_snapshot, trajectory_gradient
from entropylab.trainer import (Group, NonFiniteLoss, TrainConfig, compute_advantages, group_loss, initial_state,
                                init_seal_head, kl_anchor_loss, kl_categorical, mid_train, rl_loss, rollout,
                                seal_loss, supervised_loss, train_step)

from conftest import random_snapshot

S = micro_spec()
PROMPT = [S.bos, S.keys[0]]
RESPONSES = [[2, 4, 5, 3, 7, 1], [2, 4, 6, 3, 8, 1], [7, 1], [2, 4, 5, 3, 8, 1]]


def make_group(responses=RESPONSES, advantages=None, prompt=PROMPT):
    eps = [make_episode(S, prompt, r) for r in responses]
    if advantages is None:
        advantages = compute_advantages([e.reward for e in eps], "standardized")
    return Group(list(prompt), eps, np.asarray(advantages, dtype=np.float64))


# ---------------------------------------------------------------- advantages

def test_advantage_examples():
    np.testing.assert_array_equal(compute_advantages([10, 10, 0, 0], "centered"), [5, 5, -5, -5])
    np.testing.assert_allclose(compute_advantages([10, 10, 0, 0], "standardized"), [1, 1, -1, -1], rtol=0, atol=1e-15)
    for mode in ("centered", "standardized"):
        np.testing.assert_array_equal(compute_advantages([3, 3, 3], mode), [0, 0, 0])


def test_advantage_validation():
    with pytest.raises(ValueError):
        compute_advantages([1.0])
    with pytest.raises(ValueError):
        compute_advantages([1.0, 2.0], "ranked")


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=16), st.sampled_from(["centered", "standardized"]))
def test_advantages_are_centered(rewards, mode):
    assert abs(np.sum(compute_advantages(rewards, mode))) < 1e-12


# ---------------------------------------------------------------- RL loss

def test_zero_advantages_give_zero_loss_and_gradient(arch):
    snap = random_snapshot(arch, 0)
    loss, tape = rl_loss(make_group(advantages=np.zeros(4)), snap)
    assert float(loss.value) == 0.0
    assert tape.backward(loss).norm() == 0.0


def test_two_trajectory_gradient_is_difference(arch):
    snap = random_snapshot(arch, 1)
    g = make_group(RESPONSES[:2], [1.0, -1.0])
    loss, tape = rl_loss(g, snap)
    grad = tape.backward(loss)
    g1 = trajectory_gradient(snap, PROMPT, RESPONSES[0]).g
    g2 = trajectory_gradient(snap, PROMPT, RESPONSES[1]).g
    expected = -(g1 - g2)
    assert (grad - expected).norm() <= 1e-10 * expected.norm()


def test_batch_gradient_is_advantage_weighted_sum(arch):
    snap = random_snapshot(arch, 2)
    group = make_group(advantages=[0.7, -0.2, -1.1, 0.6])
    loss, tape = rl_loss(group, snap)
    grad = tape.backward(loss)
    expected = snap.params.zeros_like()
    for a, r in zip(group.advantages, RESPONSES):
        expected = expected - trajectory_gradient(snap, PROMPT, r).g * a
    assert (grad - expected).norm() <= 1e-10 * expected.norm()


def test_doubling_advantages_doubles_gradient(arch):
    snap = random_snapshot(arch, 3)
    a = np.array([0.5, -0.25, -1.0, 0.75])
    l1, t1 = rl_loss(make_group(advantages=a), snap)
    l2, t2 = rl_loss(make_group(advantages=2 * a), snap)
    g1, g2 = t1.backward(l1), t2.backward(l2)
    assert g2.bit_equal(g1 * 2.0)


def test_reward_scaling_preserves_update_direction(arch):
    snap = random_snapshot(arch, 4)
    eps = [make_episode(S, PROMPT, r) for r in RESPONSES]
    rewards = np.array([e.reward for e in eps])
    grads = []
    for c in (1.0, 3.5):
        adv = compute_advantages(c * rewards, "centered")
        loss, tape = rl_loss(Group(PROMPT, eps, adv), snap)
        grads.append(tape.backward(loss))
    cos = inner(grads[0], grads[1]) / (grads[0].norm() * grads[1].norm())
    assert abs(cos - 1.0) < 1e-12


# ---------------------------------------------------------------- SEAL

def _zero_head(d):
    head = init_seal_head(d, 0)
    return head.zeros_like()


def test_seal_loss_is_ln2_for_constant_half(arch):
    snap = random_snapshot(arch, 0)
    loss, _ = seal_loss(make_group(), snap, _zero_head(arch.model_dim))
    assert abs(float(loss.value) - np.log(2)) < 1e-15


def test_seal_loss_vanishes_when_head_outputs_the_label(arch):
    snap = random_snapshot(arch, 0)
    positives = make_group([RESPONSES[0]] * 2, [0.0, 0.0])
    assert list(positives.labels) == [1.0, 1.0]
    losses = []
    for bias in (5.0, 20.0, 40.0):
        head = ParamVector({**dict(_zero_head(arch.model_dim).items()), "seal.b2": np.array([[bias]])})
        losses.append(float(seal_loss(positives, snap, head)[0].value))
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-15


def test_seal_gradient_matches_finite_differences(arch):
    snap = random_snapshot(arch, 5)
    head = init_seal_head(arch.model_dim, 3, 0.5)
    group = make_group()
    loss, tape = seal_loss(group, snap, head)
    grad = tape.backward(loss)
    joint = ParamVector({**dict(snap.params.items()), **dict(head.items())})
    names = list(snap.params.keys())

    def f(pv):
        return float(seal_loss(group, snap.with_params(pv.select(names)), pv.without(names))[0].value)

    rng = np.random.default_rng(0)
    n_policy = snap.params.size
    coords = np.concatenate([rng.choice(n_policy, 1500, replace=False), np.arange(n_policy, joint.size)])
    rep = finite_difference_check(f, joint, grad=grad, coords=coords)
    assert rep.max_rel_error < 1e-6


def test_seal_gradient_on_output_matrix_is_zero(arch):
    snap = random_snapshot(arch, 6)
    loss, tape = seal_loss(make_group(), snap, init_seal_head(arch.model_dim, 1, 0.5))
    g = tape.backward(loss)
    assert np.all(g["W"] == 0.0)
    assert g.without(["W"]).norm() > 0


def test_seal_loss_rejects_empty_responses(arch):
    with pytest.raises(ValueError):
        seal_loss(make_group([[], []], [1.0, -1.0]), random_snapshot(arch, 0), _zero_head(arch.model_dim))


# ---------------------------------------------------------------- KL anchor

def test_kl_closed_form():
    assert abs(kl_categorical([0.5, 0.5], [0.75, 0.25]) - (0.5 * np.log(2 / 3) + 0.5 * np.log(2))) < 1e-15
    assert abs(kl_categorical([0.5, 0.5], [0.75, 0.25]) - 0.14384) < 1e-5


def test_kl_to_self_is_zero(arch):
    snap = random_snapshot(arch, 0)
    loss, _ = kl_anchor_loss(make_group(), snap, snap)
    assert abs(float(loss.value)) < 1e-12


def test_kl_nonnegative_over_random_snapshot_pairs():
    tiny = PolicyArchitecture(vocab_size=10, model_dim=4, num_heads=2, ffn_dim=4)
    group = make_group()
    rng = np.random.default_rng(0)
    worst = np.inf
    for k in range(1000):
        a = init_snapshot(tiny, [k, 0], *rng.uniform(0.05, 2.0, size=2))
        b = init_snapshot(tiny, [k, 1], *rng.uniform(0.05, 2.0, size=2))
        worst = min(worst, float(kl_anchor_loss(group, a, b)[0].value))
    assert worst >= -1e-15


def test_kl_rejects_architecture_mismatch(arch):
    other = init_snapshot(PolicyArchitecture(vocab_size=10, model_dim=16), 0)
    with pytest.raises(ValueError):
        kl_anchor_loss(make_group(), random_snapshot(arch, 0), other)


# ---------------------------------------------------------------- train step

def test_all_equal_rewards_leave_parameters_unchanged(arch):
    state = initial_state(random_snapshot(arch, 0))
    cfg = TrainConfig(kl_coef=0.0, seal_weight=0.0)
    group = make_group([RESPONSES[2]] * 4)
    new, rec = train_step(state, S, cfg, group)
    assert new.snapshot.params.bit_equal(state.snapshot.params)
    assert rec.grad_norm == 0.0


def test_train_step_is_deterministic(arch):
    cfg = TrainConfig(seal_weight=0.5, seed=3)
    runs = []
    for _ in range(2):
        state = initial_state(random_snapshot(arch, 1), 3)
        new, rec = train_step(state, S, cfg)
        runs.append((new, rec))
    (a, ra), (b, rb) = runs
    assert a.snapshot.params.bit_equal(b.snapshot.params) and a.head.bit_equal(b.head)
    assert ra.losses == rb.losses
    assert [e.response for e in ra.episodes] == [e.response for e in rb.episodes]
    assert np.array_equal(ra.log_likelihoods, rb.log_likelihoods)


def test_halving_learning_rate_halves_update(arch):
    state = initial_state(random_snapshot(arch, 2))
    group = make_group()
    deltas = []
    for eta in (0.02, 0.01):
        new, _ = train_step(state, S, TrainConfig(learning_rate=eta, seal_weight=0.3), group)
        deltas.append(new.snapshot.params - state.snapshot.params)
    assert (deltas[0] * 0.5 - deltas[1]).norm() <= 1e-10 * deltas[1].norm()


def test_pure_rl_update_is_bit_identical_to_reference_path(arch):
    snap = random_snapshot(arch, 3)
    state = initial_state(snap)
    group = make_group()
    new, _ = train_step(state, S, TrainConfig(learning_rate=0.03, seal_weight=0.0, kl_coef=0.0), group)
    loss, tape = rl_loss(group, snap)
    reference = snap.params - tape.backward(loss) * 0.03
    assert new.snapshot.params.bit_equal(reference)
    assert new.head.bit_equal(state.head)


def test_seal_start_step_delays_head_updates(arch):
    state = initial_state(random_snapshot(arch, 4))
    cfg = TrainConfig(seal_weight=1.0, seal_start_step=1)
    s1, r1 = train_step(state, S, cfg, make_group())
    assert s1.head.bit_equal(state.head) and "seal" not in r1.losses
    s2, r2 = train_step(s1, S, cfg, make_group())
    assert not s2.head.bit_equal(s1.head) and "seal" in r2.losses


def test_non_finite_loss_is_surfaced_without_update(arch):
    state = initial_state(random_snapshot(arch, 5))
    group = make_group(advantages=[np.inf, -np.inf, 0.0, 0.0])
    with pytest.raises(NonFiniteLoss), np.errstate(invalid="ignore"):
        train_step(state, S, TrainConfig(), group)


def test_rollout_round_robins_prompts(arch):
    state = initial_state(random_snapshot(arch, 0))
    cfg = TrainConfig(group_size=3)
    g0 = rollout(state, S, cfg)
    s1, _ = train_step(state, S, cfg, g0)
    g1 = rollout(s1, S, cfg)
    assert g0.prompt != g1.prompt and g0.size == 3


def test_config_validation():
    for bad in ({"learning_rate": 0}, {"group_size": 1}, {"seal_weight": -1}, {"kl_coef": -0.1},
                {"temperature": 0}, {"advantage_mode": "x"}, {"steps": -1}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# ---------------------------------------------------------------- mid-training

def test_zero_epochs_leave_snapshot_unchanged(arch):
    snap = random_snapshot(arch, 0)
    assert mid_train(snap, demonstrations(S, 4), 0, 0.1) is snap
    with pytest.raises(ValueError):
        mid_train(snap, [], 1, 0.1)


def test_mid_training_loss_is_monotone_for_small_step(arch):
    snap = init_snapshot(arch, 0)
    _, losses = mid_train(snap, demonstrations(S, 8), 30, 0.01, return_losses=True)
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_mid_training_raises_exact_format_mass(arch):
    snap = init_snapshot(arch, 0)
    after = mid_train(snap, demonstrations(S, 8), 200, 0.05)
    before_p = format_mass(enumerate_distribution(snap, S, PROMPT), S).p_fmt
    after_p = format_mass(enumerate_distribution(after, S, PROMPT), S).p_fmt
    assert after_p > before_p


def test_mid_training_default_budget_gives_valid_greedy_actions(arch):
    from entropylab.config import MidTrainSection
    mt = MidTrainSection()
    demos = demonstrations(S, mt.demos, rng_seed=1)
    trained = mid_train(init_snapshot(arch, 0), demos, mt.epochs, mt.learning_rate)
    valid = [score_format(S, greedy(trained, p, S.max_response_len, S.eos)) for p, _ in demos]
    assert np.mean(valid) >= 0.9


def test_supervised_loss_is_mean_token_cross_entropy(arch):
    snap = random_snapshot(arch, 0)
    demos = demonstrations(S, 3)
    from entropylab.policy import log_likelihood
    expected = -sum(log_likelihood(snap, p, r) for p, r in demos) / sum(len(r) for _, r in demos)
    assert abs(float(supervised_loss(snap, demos).value) - expected) < 1e-13
