import math

import numpy as np
import pytest

from flowvi.dag_env import PointedDag, RewardTable, enumerate_complete_trajectories
from flowvi.exact import (
    expected_balance_gradient,
    forward_trajectory_distribution,
    backward_trajectory_distribution,
    kl_with_grad,
    random_instance,
    solve_tabular_policy,
    subnvi_scored_pair,
    trajectory_scored_pair,
    ExactDistribution,
)
from flowvi.grads import max_abs, max_abs_diff
from flowvi.objectives import (
    BaselineState,
    ObjectiveSpec,
    c_values,
    db_loss,
    f_divergence,
    forward_kl_grad,
    reverse_kl_grad,
    subnvi_distributions,
    subtb_loss,
    tb_batch,
    tb_loss,
    update_global_baseline,
    wake_sleep_step,
)
from flowvi.policy import TabularPolicySet, Trajectory


def two_chain_dag():
    # two parallel chains: s0 -> a -> x1 and s0 -> b -> x2 (unique parents)
    return PointedDag(["s0", "a", "b", "x1", "x2"],
                      [(0, 1), (0, 2), (1, 3), (2, 4)], 0, [3, 4])


def full_support_batch(dag, policy):
    """All complete trajectories with unit behavior density (log_behavior=0)."""
    out = []
    for states in enumerate_complete_trajectories(dag):
        t = Trajectory(states)
        t.log_behavior = 0.0
        out.append(t)
    policy.refresh_caches(out)
    return out


class TestTbLoss:
    def test_balanced_trajectory_zero(self):
        rng = np.random.default_rng(0)
        dag, rewards, policy = random_instance(rng)
        solved = solve_tabular_policy(dag, rewards, backward=policy)
        for states in enumerate_complete_trajectories(dag):
            loss, grads = tb_loss(Trajectory(states), solved, rewards)
            assert loss < 1e-16
            assert max_abs(grads) < 1e-7

    def test_half_probability_example(self):
        dag = two_chain_dag()
        policy = TabularPolicySet(dag)  # uniform: P_F(tau)=0.5, P_B(tau|x)=1
        rewards = RewardTable({3: 1.0, 4: 1.0})
        loss, _ = tb_loss(Trajectory((0, 1, 3)), policy, rewards)
        assert loss == pytest.approx(math.log(0.5) ** 2, abs=1e-12)
        assert loss == pytest.approx(0.4805, abs=1e-4)

    def test_log_z_gradient_finite_difference(self):
        rng = np.random.default_rng(1)
        dag, rewards, policy = random_instance(rng)
        t = Trajectory(enumerate_complete_trajectories(dag)[0])
        _, grads = tb_loss(t, policy, rewards)
        h = 1e-6
        base = policy.log_Z
        policy.set_log_Z(base + h)
        up = tb_loss(t, policy, rewards)[0]
        policy.set_log_Z(base - h)
        dn = tb_loss(t, policy, rewards)[0]
        policy.set_log_Z(base)
        assert grads["logZ"][0] == pytest.approx((up - dn) / (2 * h), rel=1e-6)

    def test_incomplete_trajectory_rejected(self):
        dag = two_chain_dag()
        policy = TabularPolicySet(dag)
        with pytest.raises(ValueError):
            tb_loss(Trajectory((0, 1)), policy, RewardTable({3: 1.0, 4: 1.0}))


class TestDbSubtb:
    def make_chain_policy(self, log_z, flow_a):
        # s0 -> {a, b}; a -> x1; b -> x2; flows parametrized at layer 1
        dag = PointedDag(["s0", "a", "b", "x1", "x2"],
                         [(0, 1), (0, 2), (1, 3), (2, 4)], 0, [3, 4],
                         layer_index=[0, 1, 1, 2, 2])
        policy = TabularPolicySet(dag, hub_layers=[0, 1, 2])
        policy.set_log_Z(log_z)
        policy.set_log_flows({1: flow_a, 2: 0.0})
        rewards = RewardTable({3: 1.0, 4: 1.0})
        return dag, policy, rewards

    def test_db_zero_when_balanced(self):
        # F(s0)=2, P_F(a|s0)=0.5, F(a)=1, P_B forced: residual log(2*.5/1) = 0
        dag, policy, rewards = self.make_chain_policy(math.log(2.0), 0.0)
        loss, grads = db_loss((0, 1), policy, rewards)
        assert loss == pytest.approx(0.0, abs=1e-24)

    def test_db_half_probability(self):
        dag, policy, rewards = self.make_chain_policy(0.0, 0.0)  # F(s0)=1
        loss, _ = db_loss((0, 1), policy, rewards)
        assert loss == pytest.approx(math.log(0.5) ** 2, abs=1e-12)

    def test_edge_not_in_dag(self):
        dag, policy, rewards = self.make_chain_policy(0.0, 0.0)
        with pytest.raises(ValueError):
            db_loss((0, 3), policy, rewards)

    def test_subtb_full_trajectory_reduces_to_tb(self):
        rng = np.random.default_rng(2)
        dag, rewards, policy = random_instance(rng, hubs="ends")
        for states in enumerate_complete_trajectories(dag):
            tb_val, tb_grads = tb_loss(Trajectory(states), policy, rewards)
            sub_val, sub_grads = subtb_loss(states, policy, rewards)
            assert sub_val == pytest.approx(tb_val, rel=1e-12, abs=1e-12)
            assert max_abs_diff(tb_grads, sub_grads) < 1e-12

    def test_subtb_single_edge_is_db(self):
        rng = np.random.default_rng(3)
        dag, rewards, policy = random_instance(rng, hubs="all")
        for edge in dag.edges:
            db_val, db_grads = db_loss(edge, policy, rewards)
            sub_val, sub_grads = subtb_loss(tuple(edge), policy, rewards)
            assert db_val == sub_val  # same code path, bitwise
            assert all(np.array_equal(db_grads[k], sub_grads[k]) for k in db_grads)

    def test_subtb_endpoint_not_hub(self):
        rng = np.random.default_rng(4)
        dag, rewards, policy = random_instance(rng, hubs="ends")
        trajs = enumerate_complete_trajectories(dag)
        with pytest.raises(ValueError, match="hub"):
            subtb_loss(trajs[0][:2], policy, rewards)  # interior endpoint, no flow

    def test_three_layer_hand_example(self):
        dag, policy, rewards = self.make_chain_policy(0.4, -0.3)
        # segment s0->a: r = logZ + log .5 - F(a) - 0; segment a->x1:
        # r = F(a) + 0 - log R(x1) - 0
        r1 = 0.4 + math.log(0.5) - (-0.3)
        r2 = -0.3 - 0.0
        l1, _ = subtb_loss((0, 1), policy, rewards)
        l2, _ = subtb_loss((1, 3), policy, rewards)
        assert l1 == pytest.approx(r1 ** 2, abs=1e-12)
        assert l2 == pytest.approx(r2 ** 2, abs=1e-12)


class TestReverseKl:
    def test_zero_gradient_at_optimum(self):
        rng = np.random.default_rng(5)
        dag, rewards, policy = random_instance(rng)
        solved = solve_tabular_policy(dag, rewards, backward=policy)
        batch = full_support_batch(dag, solved)
        grads, info = reverse_kl_grad(batch, solved, rewards, weighted=True,
                                      train_pb=True)
        assert max_abs(grads) < 1e-8

    def test_local_baseline_identical_batch(self):
        rng = np.random.default_rng(6)
        dag, rewards, policy = random_instance(rng)
        states = enumerate_complete_trajectories(dag)[0]
        batch = [Trajectory(states) for _ in range(8)]
        grads, _ = reverse_kl_grad(batch, policy, rewards, baseline="local")
        assert max_abs(grads) < 1e-14

    def test_matches_exact_kl_gradient(self):
        rng = np.random.default_rng(7)
        dag, rewards, policy = random_instance(rng)
        batch = full_support_batch(dag, policy)  # weights ~ exact P_F
        grads, _ = reverse_kl_grad(batch, policy, rewards, weighted=True,
                                   train_pb=True)
        p_hat, p_check = trajectory_scored_pair(dag, policy, rewards)
        _, exact = kl_with_grad(p_hat, p_check)
        assert np.max(np.abs(grads["pf"] - exact["pf"])) < 1e-8
        assert np.max(np.abs(grads["pb"] - exact["pb"])) < 1e-8

    def test_empty_batch(self):
        rng = np.random.default_rng(8)
        dag, rewards, policy = random_instance(rng)
        with pytest.raises(ValueError):
            reverse_kl_grad([], policy, rewards)

    def test_nonfinite_weights_rejected(self):
        rng = np.random.default_rng(9)
        dag, rewards, policy = random_instance(rng)
        batch = full_support_batch(dag, policy)
        batch[0].log_behavior = math.nan
        with pytest.raises(ValueError):
            reverse_kl_grad(batch, policy, rewards, weighted=True)


class TestForwardKl:
    def test_exact_backward_behavior_gives_uniform_weights(self):
        rng = np.random.default_rng(10)
        dag, rewards, policy = random_instance(rng)
        log_zhat = rewards.log_partition()
        batch = []
        for states in enumerate_complete_trajectories(dag):
            t = Trajectory(states)
            t.log_behavior = (rewards.log_reward(states[-1])
                              + policy.backward_logprob(states) - log_zhat)
            batch.append(t)
        grads, info = forward_kl_grad(batch, policy, rewards)
        assert np.allclose(info.weights, 1.0 / len(batch), atol=1e-12)
        manual = policy.weighted_score_sum(
            batch, -np.full(len(batch), 1.0 / len(batch)), "forward")
        assert np.max(np.abs(grads["pf"] - manual["pf"])) < 1e-15

    def test_single_trajectory_dag_zero_gradient(self):
        dag = PointedDag(["s0", "a", "x"], [(0, 1), (1, 2)], 0, [2])
        policy = TabularPolicySet(dag)
        rewards = RewardTable({2: 2.0})
        batch = full_support_batch(dag, policy)
        grads, _ = forward_kl_grad(batch, policy, rewards, train_pb=True)
        assert max_abs(grads) < 1e-15

    def test_matches_exact_kl_gradient(self):
        rng = np.random.default_rng(11)
        dag, rewards, policy = random_instance(rng)
        batch = full_support_batch(dag, policy)  # weights ~ exact P_B(tau)
        grads, _ = forward_kl_grad(batch, policy, rewards, train_pb=True)
        p_hat, p_check = trajectory_scored_pair(dag, policy, rewards)
        _, exact = kl_with_grad(p_check, p_hat)
        assert np.max(np.abs(grads["pf"] - exact["pf"])) < 1e-8
        assert np.max(np.abs(grads["pb"] - exact["pb"])) < 1e-8

    def test_degenerate_weight_flag(self):
        rng = np.random.default_rng(12)
        dag, rewards, policy = random_instance(rng)
        batch = full_support_batch(dag, policy)
        batch[0].log_behavior = -200.0  # one dominating weight
        _, info = forward_kl_grad(batch, policy, rewards)
        assert info.degenerate and info.max_weight > 0.999


class TestWakeSleep:
    def test_joint_optimum_vanishes(self):
        rng = np.random.default_rng(13)
        dag, rewards, policy = random_instance(rng)
        solved = solve_tabular_policy(dag, rewards, backward=policy)
        batch = full_support_batch(dag, solved)
        for variant in ("WS", "ReverseWS"):
            grads, _ = wake_sleep_step(batch, solved, rewards, variant=variant,
                                       weighted=True)
            assert max_abs(grads) < 1e-8

    def test_ws_pb_update_zero_on_chain(self):
        dag = PointedDag(["s0", "a", "x"], [(0, 1), (1, 2)], 0, [2])
        policy = TabularPolicySet(dag)  # every state has one parent: P_B forced
        rewards = RewardTable({2: 1.0})
        batch = full_support_batch(dag, policy)
        grads, _ = wake_sleep_step(batch, policy, rewards, variant="WS")
        assert max_abs(grads) < 1e-15

    def test_reverse_ws_pb_matches_prop1_expectation(self):
        rng = np.random.default_rng(14)
        dag, rewards, policy = random_instance(rng)
        batch = full_support_batch(dag, policy)
        grads, _ = wake_sleep_step(batch, policy, rewards, variant="ReverseWS",
                                   weighted=True)
        p_hat, p_check = trajectory_scored_pair(dag, policy, rewards)
        half_expected = expected_balance_gradient(p_hat, p_check, "check")["pb"] / 2.0
        assert np.max(np.abs(grads["pb"] - half_expected)) < 1e-8


class TestGlobalBaseline:
    def test_eta_one_is_local_mean(self):
        state = BaselineState(5.0, eta=1.0)
        new = update_global_baseline(state, np.array([1.0, 3.0]))
        assert new.b_global == 2.0

    def test_half_step(self):
        state = BaselineState(0.0, eta=0.5)
        assert update_global_baseline(state, np.array([2.0])).b_global == 1.0

    def test_geometric_convergence(self):
        state = BaselineState(0.0, eta=0.25)
        for _ in range(200):
            state = update_global_baseline(state, np.array([4.0]))
        assert state.b_global == pytest.approx(4.0, abs=1e-12)

    def test_eta_validation(self):
        with pytest.raises(ValueError):
            BaselineState(0.0, eta=0.0)
        with pytest.raises(ValueError):
            BaselineState(0.0, eta=1.5)


class TestFDivergence:
    P = ExactDistribution((0, 1), np.array([0.5, 0.5]))
    Q = ExactDistribution((0, 1), np.array([0.75, 0.25]))

    def test_identity_zero(self):
        for kind in ("tlogt", "neglogt", "log2"):
            assert f_divergence(self.P, self.P, kind) == pytest.approx(0.0, abs=1e-15)

    def test_neglogt_is_kl_q_p(self):
        val = f_divergence(self.P, self.Q, "neglogt")
        assert val == pytest.approx(0.75 * math.log(1.5) + 0.25 * math.log(0.5),
                                    abs=1e-12)
        assert val == pytest.approx(0.1308, abs=1e-4)

    def test_tlogt_is_kl_p_q(self):
        val = f_divergence(self.P, self.Q, "tlogt")
        assert val == pytest.approx(0.5 * math.log(2 / 3) + 0.5 * math.log(2),
                                    abs=1e-12)
        assert val == pytest.approx(0.1438, abs=1e-4)

    def test_support_violations(self):
        spike = ExactDistribution((0, 1), np.array([1.0, 0.0]))
        with pytest.raises(ValueError):
            f_divergence(self.P, spike, "tlogt")  # q must cover p
        with pytest.raises(ValueError):
            f_divergence(spike, self.P, "neglogt")  # p must cover q
        with pytest.raises(ValueError):
            f_divergence(spike, self.P, "log2")

    def test_support_mismatch(self):
        other = ExactDistribution((0, 2), np.array([0.5, 0.5]))
        with pytest.raises(ValueError):
            f_divergence(self.P, other, "tlogt")


class TestSubnviDistributions:
    def test_ends_reduce_to_trajectory_distributions(self):
        rng = np.random.default_rng(15)
        dag, rewards, policy = random_instance(rng, hubs="ends")
        p_hat, p_check = subnvi_distributions(policy, rewards, 0)
        fwd = forward_trajectory_distribution(dag, policy)
        bwd = backward_trajectory_distribution(dag, policy, rewards)
        assert p_hat.support == fwd.support
        assert np.allclose(p_hat.probs, fwd.probs, atol=1e-12)
        assert np.allclose(p_check.probs, bwd.probs, atol=1e-12)

    def test_partition_chain(self):
        # Zcheck_k = sum of flows at layer m_{k+1} = Zhat_{k+1}
        rng = np.random.default_rng(16)
        dag, rewards, policy = random_instance(rng, hubs="mid")
        k_max = len(policy.hub_layers) - 1
        for k in range(k_max - 1):
            _, p_check = subnvi_distributions(policy, rewards, k)
            p_hat_next, _ = subnvi_distributions(policy, rewards, k + 1)
            assert p_check.log_partition == pytest.approx(p_hat_next.log_partition,
                                                          abs=1e-10)
            hub_layer = policy.hub_layers[k + 1]
            flows = sum(math.exp(policy.log_flow(s, rewards))
                        for s in range(dag.n_states)
                        if dag.layer_index[s] == hub_layer)
            assert p_check.log_partition == pytest.approx(math.log(flows), abs=1e-10)

    def test_two_layer_hand_arithmetic(self):
        dag = PointedDag(["s0", "a", "b", "x1", "x2"],
                         [(0, 1), (0, 2), (1, 3), (2, 4), (1, 4)], 0, [3, 4],
                         layer_index=[0, 1, 1, 2, 2])
        policy = TabularPolicySet(dag, hub_layers=[0, 1, 2])
        policy.set_log_flows({1: math.log(2.0), 2: math.log(1.0)})
        rewards = RewardTable({3: 3.0, 4: 1.0})
        # k=1 segments: (a,x1), (a,x2), (b,x2); uniform P_F at a: 1/2 each
        p_hat, p_check = subnvi_distributions(policy, rewards, 1)
        assert p_hat.support == ((1, 3), (1, 4), (2, 4))
        hat = np.array([2 * 0.5, 2 * 0.5, 1 * 1.0])
        assert np.allclose(p_hat.probs, hat / hat.sum(), atol=1e-12)
        # P_B at x2 (parents a,b) uniform: 1/2; at x1 forced
        check = np.array([3 * 1.0, 1 * 0.5, 1 * 0.5])
        assert np.allclose(p_check.probs, check / check.sum(), atol=1e-12)

    def test_requires_hub_configuration(self):
        rng = np.random.default_rng(17)
        dag, rewards, policy = random_instance(rng)
        with pytest.raises(ValueError):
            subnvi_distributions(policy, rewards, 0)


def test_objective_spec_validation():
    with pytest.raises(ValueError):
        ObjectiveSpec(pf_loss="nope")
    with pytest.raises(ValueError):
        ObjectiveSpec(baseline="global", eta=0.0)
    with pytest.raises(ValueError):
        ObjectiveSpec(hub_layers=(1, 2))
    ObjectiveSpec(pf_loss="SubTB", hub_layers=(0, 2, 4))


def test_tb_batch_mean_and_c_values():
    rng = np.random.default_rng(18)
    dag, rewards, policy = random_instance(rng)
    batch = full_support_batch(dag, policy)
    loss, grads, c = tb_batch(batch, policy, rewards)
    manual_c = c_values(batch, policy, rewards)
    assert np.array_equal(c, manual_c)
    res = policy.log_Z + c
    assert loss == pytest.approx(float(np.mean(res ** 2)), abs=1e-12)
    assert grads["logZ"][0] == pytest.approx(2 * (policy.log_Z + np.mean(c)), abs=1e-12)
