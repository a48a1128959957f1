import math

import numpy as np
import pytest

from symrl.envs import cartpole_group, make_env, planar_reach_group
from symrl.errors import ConfigurationError, NumericError
from symrl.learner import (Minibatch, TrainConfig, default_config, entropy_term, mirror_loss,
                           naive_augment_logp, orbit_minibatches, ppo_surrogate, update, value_loss)
from symrl.numkit import (AdamState, GaussianPolicy, MlpParams, gradient_check,
                          init_uniform, mlp_forward)
from symrl.rollout import augment, collect, compute_gae
from symrl.symmdp import SymmetryGroup

LOG_2PI = math.log(2 * math.pi)


def zero_bias_policy(sizes, scale=0.5, seed=0):
    pol = GaussianPolicy.create(sizes, scale, np.random.default_rng(seed))
    net = pol.mean_net
    net = MlpParams(net.layer_sizes, net.activation, net.weights, [np.zeros_like(b) for b in net.biases])
    return GaussianPolicy(net, pol.log_std)


def constant_policy(obs_dim, b):
    b = np.asarray(b, float)
    net = init_uniform([obs_dim, 4, len(b)], 0.0, np.random.default_rng(0))
    net.biases[-1] = b.copy()
    return GaussianPolicy(net, np.zeros(len(b)))


def one_sample(policy, obs, action, ratio, adv):
    obs, action = np.atleast_2d(obs), np.atleast_2d(action)
    logp = policy.log_prob(obs, action)
    return Minibatch(obs, action, logp - math.log(ratio), np.array([adv], float), np.zeros(1), np.zeros(1, int))


@pytest.mark.parametrize("ratio,adv,objective", [(1.3, 1.0, 1.2), (0.5, -1.0, -0.8), (1.1, 1.0, 1.1), (0.5, 1.0, 0.5)])
def test_clipped_objective_values(ratio, adv, objective):
    pol = GaussianPolicy.create([3, 4, 1], 0.3, np.random.default_rng(0))
    loss, _, _ = ppo_surrogate(pol, one_sample(pol, [0.1, 0.2, 0.3], [0.4], ratio, adv), 0.2)
    assert loss == pytest.approx(-objective, abs=1e-12)


def test_unit_ratio_gives_vanilla_policy_gradient():
    rng = np.random.default_rng(1)
    pol = GaussianPolicy.create([3, 8, 1], 0.5, rng)
    obs, act, adv = rng.normal(size=(16, 3)), rng.normal(size=(16, 1)), rng.normal(size=16)
    mb = Minibatch(obs, act, pol.log_prob(obs, act), adv, np.zeros(16), np.zeros(16, int))
    loss, grad, _ = ppo_surrogate(pol, mb, 0.2)
    assert loss == pytest.approx(-adv.mean(), abs=1e-12)

    def vanilla(theta):
        return -float(np.mean(adv * pol.with_flat(theta).log_prob(obs, act))), grad

    assert gradient_check(vanilla, pol.flat(), 1e-5) < 1e-6


def test_surrogate_rejects_non_finite_ratio():
    pol = GaussianPolicy.create([3, 4, 1], 0.3, np.random.default_rng(0))
    mb = one_sample(pol, [0, 0, 0], [0.0], 1.0, 1.0)
    mb.logp_old[:] = -1e6
    with pytest.raises(NumericError, match="logp"):
        ppo_surrogate(pol, mb, 0.2)


def test_mirror_loss_zero_for_odd_policy():
    pol = zero_bias_policy([3, 16, 16, 1])
    states = np.random.default_rng(0).normal(size=(50, 3))
    loss, _ = mirror_loss(pol, states, cartpole_group())
    assert loss <= 1e-12


def test_mirror_loss_constant_policy():
    b = np.array([0.7])
    loss, _ = mirror_loss(constant_policy(3, b), np.random.default_rng(0).normal(size=(5, 3)), cartpole_group())
    assert loss == pytest.approx(2 * float(b @ b), abs=1e-14)


def test_mirror_loss_identity_group_is_zero():
    pol = GaussianPolicy.create([6, 8, 2], 1.0, np.random.default_rng(0))
    loss, grad = mirror_loss(pol, np.ones((4, 6)), SymmetryGroup.trivial(6, 2))
    assert loss == 0.0 and not grad.any()


def test_value_loss_cases():
    net = init_uniform([2, 5, 1], 0.4, np.random.default_rng(0))
    obs = np.random.default_rng(1).normal(size=(9, 2))
    v = mlp_forward(net, obs)[:, 0]
    assert value_loss(net, obs, v)[0] == 0.0
    zero = init_uniform([2, 5, 1], 0.0, np.random.default_rng(0))
    assert value_loss(zero, obs, np.full(9, 3.0))[0] == pytest.approx(9.0)
    targets = np.random.default_rng(2).normal(size=9)
    assert value_loss(net, obs, targets)[0] == pytest.approx(sum((a - b) ** 2 for a, b in zip(v, targets)) / 9)


# -- gradient suite ---------------------------------------------------------

def random_minibatch(pol, rng, n=12, aug=True):
    obs = rng.normal(size=(n, pol.obs_dim))
    act = rng.normal(size=(n, pol.act_dim))
    logp_old = pol.log_prob(obs, act) + rng.normal(scale=0.4, size=n)
    tags = (rng.random(n) < 0.5).astype(int) if aug else np.zeros(n, int)
    return Minibatch(obs, act, logp_old, rng.normal(size=n), rng.normal(size=n), tags)


@pytest.mark.parametrize("seed", range(4))
def test_surrogate_gradient(seed):
    rng = np.random.default_rng(seed)
    pol = GaussianPolicy.create([6, 16, 4], 0.7, rng)
    pol = pol.with_flat(np.r_[pol.mean_net.flat(), rng.uniform(-0.5, 0.5, 4)])
    mb = random_minibatch(pol, rng)

    def f(theta):
        loss, grad, _ = ppo_surrogate(pol.with_flat(theta), mb, 0.2)
        return loss, grad

    assert gradient_check(f, pol.flat(), 1e-5) < 1e-4


def test_entropy_gradient():
    pol = GaussianPolicy.create([3, 4, 2], 0.5, np.random.default_rng(0))
    assert gradient_check(lambda th: entropy_term(pol.with_flat(th)), pol.flat(), 1e-5) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_value_gradient(seed):
    rng = np.random.default_rng(seed)
    net = init_uniform([6, 16, 1], 0.7, rng)
    obs, targets = rng.normal(size=(10, 6)), rng.normal(size=10)
    assert gradient_check(lambda p: value_loss(net.with_flat(p), obs, targets), net.flat(), 1e-5) < 1e-4


@pytest.mark.parametrize("group", [cartpole_group(), planar_reach_group()], ids=["N2", "N4"])
def test_mirror_gradient_is_detached(group):
    rng = np.random.default_rng(5)
    pol = GaussianPolicy.create([group.obs_dim, 16, group.act_dim], 0.8, rng)
    states = rng.normal(size=(7, group.obs_dim))
    _, grad = mirror_loss(pol, states, group)
    labels = [pol.mean(states) @ g.action_map.T for g in group]   # frozen at theta_0

    def detached(theta):
        p = pol.with_flat(theta)
        total = sum(np.sum((lab - p.mean(states @ g.state_map.T)) ** 2) for g, lab in zip(group, labels))
        return float(total) / (len(states) * len(group)), grad

    assert gradient_check(detached, pol.flat(), 1e-5) < 1e-4

    def undetached(theta):
        return mirror_loss(pol.with_flat(theta), states, group)[0], grad

    assert gradient_check(undetached, pol.flat(), 1e-5) > 1e-2


def test_total_objective_gradient():
    rng = np.random.default_rng(9)
    group = planar_reach_group()
    pol = GaussianPolicy.create([6, 16, 2], 0.6, rng)
    mb = random_minibatch(pol, rng)
    w, ce = 0.7, 0.01
    labels = [pol.mean(mb.obs[mb.group_tag == 0]) @ g.action_map.T for g in group]

    def total(theta):
        p = pol.with_flat(theta)
        s, gs, _ = ppo_surrogate(p, mb, 0.2)
        e, ge = entropy_term(p)
        _, gm = mirror_loss(p, mb.obs[mb.group_tag == 0], group)
        orig = mb.obs[mb.group_tag == 0]
        m = sum(np.sum((lab - p.mean(orig @ g.state_map.T)) ** 2) for g, lab in zip(group, labels))
        m = float(m) / (len(orig) * len(group))
        return s - ce * e + w * m, gs - ce * ge + w * gm

    assert gradient_check(total, pol.flat(), 1e-5) < 1e-4


# -- naive vs corrected denominators ----------------------------------------

def test_naive_logp_matches_for_equivariant_policy():
    pol = zero_bias_policy([3, 8, 1])
    buf = collect(lambda: make_env("cartpole"), pol, 2, 10, np.random.default_rng(0))
    buf = augment(compute_gae(buf, lambda o: np.zeros(len(o)), 0.99, 0.95), cartpole_group())
    naive = naive_augment_logp(pol, buf)
    np.testing.assert_allclose(naive.logp_old, buf.logp_old, rtol=0, atol=1e-10)


def test_naive_logp_constant_policy():
    b = 0.8
    pol = constant_policy(3, [b])
    buf = collect(lambda: make_env("cartpole"), pol, 1, 1, np.random.default_rng(0))
    buf.actions[:] = b
    buf.logp_old[:] = pol.log_prob(buf.obs, buf.actions)
    buf = augment(compute_gae(buf, lambda o: np.zeros(len(o)), 0.99, 0.95), cartpole_group())
    assert buf.logp_old[1] == pytest.approx(-0.5 * LOG_2PI, abs=1e-14)
    naive = naive_augment_logp(pol, buf)
    assert naive.logp_old[1] == pytest.approx(-0.5 * LOG_2PI - 2 * b * b, abs=1e-14)
    assert naive.logp_old[0] == buf.logp_old[0]


def test_naive_mean_logp_below_corrected_for_asymmetric_policy():
    pol = GaussianPolicy.create([3, 16, 1], 1.0, np.random.default_rng(3))
    buf = collect(lambda: make_env("cartpole"), pol, 8, 64, np.random.default_rng(1))
    buf = augment(compute_gae(buf, lambda o: np.zeros(len(o)), 0.99, 0.95), cartpole_group())
    naive = naive_augment_logp(pol, buf)
    mask = buf.augmented_mask
    assert naive.logp_old[mask].mean() < buf.logp_old[mask].mean()


# -- update ------------------------------------------------------------------

def small_config(**kw):
    base = dict(num_envs=2, horizon=32, minibatch_size=16, epochs_per_iter=2, hidden_sizes=(8,))
    return default_config("cartpole", **{**base, **kw})


def run_update(config, policy=None, seed=0, group=None, lr=None):
    env = make_env(config.env_id)
    group = group if group is not None else env.group
    rng = np.random.default_rng(seed)
    if policy is None:
        policy = GaussianPolicy.create([3, 8, 1], 0.3, rng)
    value_net = init_uniform([3, 8, 1], 0.3, rng)
    buf = collect(lambda: make_env(config.env_id), policy, config.num_envs, config.horizon, rng,
                  lambda o: mlp_forward(value_net, o)[:, 0], config.reward_scale)
    buf = compute_gae(buf, lambda o: mlp_forward(value_net, o)[:, 0], config.gamma, config.lam)
    if config.uses_augmentation:
        buf = augment(buf, group)
    out = update(policy, value_net, buf, config, AdamState.zeros(policy.n_params),
                 AdamState.zeros(value_net.n_params), group, np.random.default_rng(seed + 100), lr)
    return out, buf


def test_mode_none_ignores_group():
    a, _ = run_update(small_config(), group=cartpole_group())
    b, _ = run_update(small_config(), group=SymmetryGroup.trivial(3, 1))
    assert np.array_equal(a.policy.flat(), b.policy.flat())
    assert np.array_equal(a.value_net.flat(), b.value_net.flat())


def test_zero_weight_loss_mode_equals_none():
    a, _ = run_update(small_config(symmetry_mode="none"))
    b, _ = run_update(small_config(symmetry_mode="loss", mirror_weight=0.0))
    assert np.array_equal(a.policy.flat(), b.policy.flat())


def test_zero_weight_both_equals_aug():
    a, _ = run_update(small_config(symmetry_mode="aug"))
    b, _ = run_update(small_config(symmetry_mode="both", mirror_weight=0.0))
    assert np.array_equal(a.policy.flat(), b.policy.flat())
    assert np.array_equal(a.value_net.flat(), b.value_net.flat())


def bias_grad(policy, buf, rows):
    adv = np.random.default_rng(0).normal(size=buf.n_original)
    adv = np.tile(adv, buf.n_copies)[rows]
    mb = Minibatch(buf.obs[rows], buf.actions[rows], buf.logp_old[rows], adv, np.zeros(len(rows)),
                   buf.group_tag[rows])
    _, grad, _ = ppo_surrogate(policy, mb, 0.2)
    return max(np.abs(b).max() for b in policy.with_flat(grad).mean_net.biases)


def test_orbit_gradient_stays_equivariant():
    # An odd policy stays odd iff the bias gradient vanishes. Whole orbits give exactly that,
    # a lone original does not. Adam's per-coordinate scaling amplifies the residual roundoff
    # over many steps, so the check is on the gradient itself.
    pol = zero_bias_policy([3, 8, 1], scale=0.5)
    buf = collect(lambda: make_env("cartpole"), pol, 2, 32, np.random.default_rng(0))
    buf.logp_old += np.random.default_rng(1).normal(scale=0.3, size=len(buf))
    buf = augment(compute_gae(buf, lambda o: np.zeros(len(o)), 0.99, 0.95), cartpole_group())
    assert bias_grad(pol, buf, np.arange(len(buf))) < 1e-14
    assert bias_grad(pol, buf, np.arange(buf.n_original)) > 1e-3


def test_loss_mode_reduces_asymmetry():
    pol = GaussianPolicy.create([3, 8, 1], 1.0, np.random.default_rng(2))
    cfg = small_config(symmetry_mode="loss", mirror_weight=50.0, epochs_per_iter=8, lr=3e-3)
    out, buf = run_update(cfg, policy=pol)
    states = buf.obs[:buf.n_original]
    assert mirror_loss(out.policy, states, cartpole_group())[0] < mirror_loss(pol, states, cartpole_group())[0]


def test_loss_breakdown_composition():
    cfg = small_config(symmetry_mode="both", mirror_weight=2.5, entropy_coef=0.01)
    out, _ = run_update(cfg)
    for e in out.epochs:
        expected = e.surrogate + cfg.value_coef * e.value_loss - cfg.entropy_coef * e.entropy + 2.5 * e.mirror
        assert e.total == pytest.approx(expected, rel=1e-12, abs=1e-14)


def test_update_does_not_touch_stored_denominators():
    cfg = small_config(symmetry_mode="aug")
    out, buf = run_update(cfg)
    before = buf.logp_old.copy()
    # the stored values on the augmented rows are the sources' own log-probs
    n = buf.n_original
    assert np.array_equal(buf.logp_old[n:], np.tile(buf.logp_old[:n], 1))
    assert np.array_equal(before, buf.logp_old)


def test_first_ratio_uses_source_denominator():
    rng = np.random.default_rng(0)
    pol = GaussianPolicy.create([3, 8, 1], 0.8, rng)
    buf = collect(lambda: make_env("cartpole"), pol, 1, 4, rng)
    buf = augment(compute_gae(buf, lambda o: np.zeros(len(o)), 0.99, 0.95), cartpole_group())
    mb = Minibatch(buf.obs, buf.actions, buf.logp_old, buf.advantage, buf.return_target, buf.group_tag)
    _, _, logp_new = ppo_surrogate(pol, mb, 0.2)
    aug = buf.group_tag == 1
    expected = pol.log_prob(-buf.obs[:4], -buf.actions[:4]) - pol.log_prob(buf.obs[:4], buf.actions[:4])
    np.testing.assert_allclose((logp_new - buf.logp_old)[aug], expected, rtol=0, atol=1e-12)


def test_orbit_minibatches_hold_whole_orbits():
    batches = orbit_minibatches(10, 4, 8, np.random.default_rng(0))
    assert len(batches) == 5
    for idx in batches:
        sources = set(idx % 10)
        assert len(idx) == 8 and len(sources) == 2
        assert sorted(idx) == sorted(s + k * 10 for s in sources for k in range(4))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(symmetry_mode="mirror")
    with pytest.raises(ConfigurationError):
        TrainConfig(clip_eps=1.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(symmetry_mode="none", naive_aug_ablation=True)
    assert TrainConfig(symmetry_mode="loss", mirror_weight=4.0).method_label == "loss-4"


def test_config_rejects_unknown_schedule_and_init_rule():
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_schedule="cosine")
    with pytest.raises(ConfigurationError):
        TrainConfig(init_rule="xavier")
    with pytest.raises(ConfigurationError):
        TrainConfig(max_grad_norm=-1.0)


def test_linear_schedule_decays_to_zero():
    cfg = TrainConfig(lr=1e-3, total_iters=4)
    assert [cfg.lr_at(i) for i in range(4)] == pytest.approx([1e-3, 7.5e-4, 5e-4, 2.5e-4], rel=1e-15)
    flat = TrainConfig(lr=1e-3, total_iters=4, lr_schedule="constant")
    assert all(flat.lr_at(i) == 1e-3 for i in range(4))


def test_update_uses_supplied_learning_rate():
    cfg = small_config(symmetry_mode="none")
    a, _ = run_update(cfg)
    b, _ = run_update(TrainConfig(**{**cfg.__dict__, "lr": cfg.lr * 0.5}))
    c, _ = run_update(cfg, lr=cfg.lr * 0.5)
    assert np.array_equal(b.policy.flat(), c.policy.flat())
    assert not np.array_equal(a.policy.flat(), c.policy.flat())
