"""Numerical verification suites for the gradient-equivalence identities.

Each suite draws seeded random enumerable instances, evaluates both sides of
an identity exactly (expectations and divergence gradients via enumeration),
and reports per-instance discrepancies. A suite passes when every discrepancy
is below its tolerance: 1e-8 for tabular policies, 1e-5 for MLP policies
(accumulated backprop rounding).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dag_env import HypergridSpec, build_hypergrid, enumerate_complete_trajectories
from .exact import (
    expected_balance_gradient,
    expected_c,
    flow_propagate,
    jsd,
    kl_with_grad,
    log2_with_grad,
    optimal_baseline,
    pearson_log_correlation,
    random_layered_dag,
    random_instance,
    reinforce_covariance_trace,
    solve_tabular_policy,
    subnvi_scored_pair,
    target_distribution,
    trajectory_scored_pair,
)
from .nn import MomentumSgdState, momentum_sgd_step
from .objectives import (
    BaselineState,
    f_divergence,
    reverse_kl_grad,
    tb_batch,
    tb_loss,
    update_global_baseline,
)
from .policy import (
    BehaviorConfig,
    HypergridMlpPolicySet,
    TabularPolicySet,
    Trajectory,
    sample_batch,
)

TOL_TABULAR = 1e-8
TOL_MLP = 1e-5


@dataclass
class SuiteResult:
    """Per-instance discrepancy rows with a tolerance for each metric."""

    name: str
    tols: dict[str, float]
    rows: list[dict]

    def tol_for(self, key: str) -> float:
        return self.tols.get(key, self.tols["*"])

    def worst(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for row in self.rows:
            for k, v in row.items():
                out[k] = max(out.get(k, 0.0), v)
        return out

    def failures(self) -> list[tuple[int, str, float]]:
        return [(i, k, v) for i, row in enumerate(self.rows)
                for k, v in row.items() if not v < self.tol_for(k)]

    @property
    def ok(self) -> bool:
        return not self.failures()


def _mlp_grid_instance(rng: np.random.Generator):
    """A small hypergrid with randomly initialized MLP policies."""
    spec = HypergridSpec(H=3, D=2, R0=0.1)
    dag, rewards = build_hypergrid(spec)
    policy = HypergridMlpPolicySet(spec, dag, rng=rng, hidden=(24, 24))
    policy.params["logZ"][0] = rng.normal()
    policy.bump_version()
    return dag, rewards, policy


def _draw_instance(rng: np.random.Generator, policy_kind: str, hubs: str | None):
    if policy_kind == "mlp":
        return _mlp_grid_instance(rng)
    return random_instance(rng, hubs=hubs)


def suite_prop1(seed: int = 0, instances: int = 20, policy_kind: str = "tabular"
                ) -> SuiteResult:
    """Both trajectory-level gradient identities, plus log-partition invariance.

    Checks, per instance: the expected balance-loss gradient for the sampler
    equals twice the mode-seeking KL gradient; the expected gradient for the
    posterior under the target-trajectory distribution equals twice the
    mean-seeking KL gradient; and the sampler expectation is unchanged by
    shifting log Z by +-5.
    """
    rng = np.random.default_rng(seed)
    tol = TOL_TABULAR if policy_kind == "tabular" else TOL_MLP
    rows = []
    for _ in range(instances):
        dag, rewards, policy = _draw_instance(rng, policy_kind, hubs="ends")

        def theta_expectation():
            p_hat, p_check = trajectory_scored_pair(dag, policy, rewards)
            return p_hat, p_check, expected_balance_gradient(p_hat, p_check, "hat")["pf"]

        p_hat, p_check, e_theta = theta_expectation()
        _, grad_fb = kl_with_grad(p_hat, p_check)   # KL(sampler || target)
        _, grad_bf = kl_with_grad(p_check, p_hat)   # KL(target || sampler)
        e_phi = expected_balance_gradient(p_hat, p_check, "check").get("pb", np.zeros(0))
        row = {
            "eq_sampler": float(np.max(np.abs(e_theta - 2.0 * grad_fb["pf"]))),
            "eq_posterior": float(np.max(np.abs(e_phi - 2.0 * grad_bf.get("pb", np.zeros(0)))))
            if e_phi.size else 0.0,
        }
        base_log_z = policy.log_Z
        shift = 0.0
        for delta in (5.0, -5.0):
            policy.set_log_Z(base_log_z + delta)
            _, _, e_shifted = theta_expectation()
            shift = max(shift, float(np.max(np.abs(e_shifted - e_theta))))
        policy.set_log_Z(base_log_z)
        row["logZ_invariance"] = shift
        rows.append(row)
    return SuiteResult("prop1", {"*": tol}, rows)


def suite_surrogate(seed: int = 0, instances: int = 20, policy_kind: str = "tabular"
                    ) -> SuiteResult:
    """On-policy posterior gradient against its surrogate-divergence form,
    for three values of log Z per instance."""
    rng = np.random.default_rng(seed)
    tol = TOL_TABULAR if policy_kind == "tabular" else TOL_MLP
    rows = []
    for _ in range(instances):
        dag, rewards, policy = _draw_instance(rng, policy_kind, hubs="ends")
        if "pb" not in policy.params:
            raise ValueError("surrogate suite needs a learned backward policy")
        log_zhat = rewards.log_partition()
        worst = 0.0
        base = policy.log_Z
        for log_z in (base, base + 1.5, base - 2.5):
            policy.set_log_Z(log_z)
            p_hat, p_check = trajectory_scored_pair(dag, policy, rewards)
            lhs = expected_balance_gradient(p_hat, p_check, "hat")["pb"]
            _, g_log2 = log2_with_grad(p_check, p_hat)
            _, g_kl = kl_with_grad(p_hat, p_check)
            rhs = g_log2["pb"] + 2.0 * (log_z - log_zhat) * g_kl["pb"]
            worst = max(worst, float(np.max(np.abs(lhs - rhs))))
        policy.set_log_Z(base)
        rows.append({"surrogate": worst})
    return SuiteResult("surrogate", {"*": tol}, rows)


def suite_subnvi(seed: int = 0, instances: int = 20) -> SuiteResult:
    """Per-junction subtrajectory identities, with both reduction checks.

    For hubs {0, mid, L}: at every junction the expected subtrajectory-balance
    gradients match twice the corresponding divergence gradients. Reduction:
    with hubs {0, L} the machinery reproduces the trajectory-level numbers
    bitwise, and single-edge segments reproduce the edge-balance loss.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(instances):
        dag, rewards, policy = random_instance(rng, hubs="mid")
        hubs = policy.hub_layers
        row_val = 0.0
        for k in range(len(hubs) - 1):
            p_hat, p_check = subnvi_scored_pair(dag, policy, rewards, hubs, k)
            e_phi = expected_balance_gradient(p_hat, p_check, "check")["pb"]
            _, g_cf = kl_with_grad(p_check, p_hat)
            row_val = max(row_val, float(np.max(np.abs(e_phi - 2.0 * g_cf["pb"]))))
            e_theta = expected_balance_gradient(p_hat, p_check, "hat")["pf"]
            _, g_fc = kl_with_grad(p_hat, p_check)
            row_val = max(row_val, float(np.max(np.abs(e_theta - 2.0 * g_fc["pf"]))))

        # Reduction to the trajectory-level identities must be bitwise: the
        # hub set {0, L} runs the very same code path.
        ends = TabularPolicySet(dag, backward="tabular", hub_layers=[0, hubs[-1]])
        for g in ("pf", "pb", "logZ"):
            ends.params[g][:] = policy.params[g]
        ends.bump_version()
        ph_a, pc_a = trajectory_scored_pair(dag, ends, rewards)
        ph_b, pc_b = subnvi_scored_pair(dag, ends, rewards, [0, hubs[-1]], 0)
        a = expected_balance_gradient(ph_a, pc_a, "hat")["pf"]
        b = expected_balance_gradient(ph_b, pc_b, "hat")["pf"]
        bitwise = 0.0 if np.array_equal(a, b) else float(np.max(np.abs(a - b))) + 1.0
        rows.append({"junction_identities": row_val, "ends_reduction": bitwise})
    return SuiteResult("subnvi", {"*": TOL_TABULAR, "ends_reduction": 1e-300}, rows)


def suite_dpi(seed: int = 0, instances: int = 20) -> SuiteResult:
    """Data-processing inequality for both KLs: the divergence between the
    terminating-state marginals never exceeds the trajectory-level one."""
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(instances):
        dag, rewards, policy = random_instance(rng, hubs="ends")
        p_hat, p_check = trajectory_scored_pair(dag, policy, rewards)
        marg_f = flow_propagate(dag, policy)
        marg_target = target_distribution(dag, rewards)
        row = {}
        for fkind in ("tlogt", "neglogt"):
            traj_div = f_divergence(p_check.plain(), p_hat.plain(), fkind)
            marg_div = f_divergence(marg_target, marg_f, fkind)
            row[f"dpi_{fkind}"] = max(0.0, marg_div - traj_div)
        rows.append(row)
    return SuiteResult("dpi", {"*": 1e-12}, rows)


def suite_baseline(seed: int = 0, instances: int = 20, steps: int = 100
                   ) -> SuiteResult:
    """Running-baseline vs log-partition equivalence, plus variance ordering.

    Lockstep check: training the sampler with the baselined score-function
    estimator (global baseline, step eta) and with the balance loss (log Z by
    SGD at eta/2, sampler at half the learning rate) from a shared RNG yields
    identical parameter sequences, with the running baseline tracking -log Z.
    Variance rows: exact covariance traces satisfy
    trace(b*) <= trace(mean signal) <= trace(0).
    """
    rows = [_baseline_lockstep(seed, steps)]
    rng = np.random.default_rng(seed)
    for _ in range(instances):
        # Policies at uniform initialization (random backward): the mean-signal
        # baseline provably beats no baseline here; for arbitrary random logits
        # the second inequality is not a theorem and can fail.
        dag, rewards = random_layered_dag(rng)
        policy = TabularPolicySet(dag, rng=rng, backward="tabular")
        policy.params["pf"][:] = 0.0
        policy.bump_version()
        b_star = optimal_baseline(dag, policy, rewards)
        b_mean = expected_c(dag, policy, rewards)
        t_star = reinforce_covariance_trace(dag, policy, rewards, b_star)
        t_mean = reinforce_covariance_trace(dag, policy, rewards, b_mean)
        t_zero = reinforce_covariance_trace(dag, policy, rewards, 0.0)
        rows.append({
            "ordering_star_le_mean": max(0.0, t_star - t_mean),
            "ordering_mean_le_zero": max(0.0, t_mean - t_zero),
        })
    return SuiteResult("baseline", {"*": 1e-10, "ordering_star_le_mean": 1e-12,
                                    "ordering_mean_le_zero": 1e-12}, rows)


def _baseline_lockstep(seed: int, steps: int, batch_size: int = 64,
                       eta: float = 0.1) -> dict:
    spec = HypergridSpec(H=4, D=2, R0=0.1)
    dag, rewards = build_hypergrid(spec)

    def fresh_policy():
        return HypergridMlpPolicySet(spec, dag, rng=np.random.default_rng(seed + 1),
                                     hidden=(32, 32), backward="uniform")

    kl_pol, tb_pol = fresh_policy(), fresh_policy()
    kl_rng, tb_rng = np.random.default_rng(seed), np.random.default_rng(seed)
    behavior = BehaviorConfig(mode="on_policy")
    baseline = BaselineState(0.0, eta)
    kl_sgd = MomentumSgdState.init(kl_pol.params["pf"].size, lr=2 * 0.05)
    tb_sgd = MomentumSgdState.init(tb_pol.params["pf"].size, lr=0.05)
    logz_sgd = MomentumSgdState.init(1, lr=0.05)

    param_gap = 0.0
    tracking_gap = 0.0
    for t in range(steps):
        kl_batch = sample_batch(kl_pol, behavior, t, kl_rng, batch_size)
        grad, info = reverse_kl_grad(kl_batch, kl_pol, rewards, baseline=baseline)
        new, kl_sgd, _ = momentum_sgd_step(kl_sgd, kl_pol.params["pf"], grad["pf"])
        kl_pol.assign("pf", new)
        baseline = update_global_baseline(baseline, info.c_batch)

        tb_batch_trajs = sample_batch(tb_pol, behavior, t, tb_rng, batch_size)
        _, tb_grad, _ = tb_batch(tb_batch_trajs, tb_pol, rewards, train_pb=False)
        new, tb_sgd, _ = momentum_sgd_step(tb_sgd, tb_pol.params["pf"], tb_grad["pf"])
        tb_pol.assign("pf", new)
        new_z, logz_sgd, _ = momentum_sgd_step(logz_sgd, tb_pol.params["logZ"],
                                               tb_grad["logZ"])
        tb_pol.assign("logZ", new_z)

        param_gap = max(param_gap, float(np.max(np.abs(
            kl_pol.params["pf"] - tb_pol.params["pf"]))))
        tracking_gap = max(tracking_gap, abs(baseline.b_global + tb_pol.log_Z))
    return {"lockstep_params": param_gap, "lockstep_baseline": tracking_gap}


def suite_lemma_c1(seed: int = 0, instances: int = 10) -> SuiteResult:
    """Exactly solved flows: matched junction distributions imply a matched
    terminating marginal (and zero balance loss implies near-zero JSD)."""
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(instances):
        while True:
            dag, rewards = random_layered_dag(rng, n_mid_layers=(1, 2), width=(2, 3))
            if len(enumerate_complete_trajectories(dag)) <= 20:
                break
        top = max(dag.layer_index)
        reference = TabularPolicySet(dag, rng=rng, backward="tabular")
        solved = solve_tabular_policy(dag, rewards, backward=reference,
                                      hub_layers=[0, (top + 1) // 2, top])
        max_loss = max(tb_loss(Trajectory(t), solved, rewards)[0]
                       for t in enumerate_complete_trajectories(dag))
        pair_gap = 0.0
        for k in range(len(solved.hub_layers) - 1):
            p_hat, p_check = subnvi_scored_pair(dag, solved, rewards,
                                                solved.hub_layers, k)
            pair_gap = max(pair_gap, float(np.max(np.abs(p_hat.probs - p_check.probs))))
        marginal = flow_propagate(dag, solved)
        divergence = jsd(marginal, target_distribution(dag, rewards))
        pearson_gap = abs(pearson_log_correlation(marginal, rewards) - 1.0)
        rows.append({"max_tb_loss": max_loss, "pair_gap": pair_gap,
                     "jsd": divergence, "pearson_gap": pearson_gap})
    return SuiteResult("lemma-c1", {"max_tb_loss": 1e-16, "pair_gap": 1e-12,
                                    "jsd": 1e-6, "pearson_gap": 1e-9, "*": 1e-12}, rows)


SUITES = {
    "prop1": suite_prop1,
    "subnvi": suite_subnvi,
    "surrogate": suite_surrogate,
    "baseline": suite_baseline,
    "dpi": suite_dpi,
    "lemma-c1": suite_lemma_c1,
}


def run_suite(name: str, seed: int = 0, instances: int = 20, **kwargs) -> SuiteResult:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    return SUITES[name](seed=seed, instances=instances, **kwargs)
