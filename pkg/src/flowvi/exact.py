"""Exact computations on enumerable instances.

Everything here is deterministic and enumeration-based: dynamic-programming
flow propagation for the terminating-state marginal, exact trajectory
distributions, divergence values with exact parameter gradients (obtained by
differentiating the enumerated sums directly), expected loss gradients under
exact sampling distributions, and exact variance computations for baseline
comparisons. These are the instruments against which the stochastic training
estimators are checked.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dag_env import (
    PointedDag,
    RewardTable,
    TRAJECTORY_CAP,
    enumerate_complete_trajectories,
    enumerate_partial_trajectories,
    require_valid,
)
from .grads import GradDict
from .policy import PolicySet, TabularPolicySet


@dataclass
class ExactDistribution:
    """A normalized probability table over states or trajectories."""

    support: tuple
    probs: np.ndarray
    log_partition: float = 0.0

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if np.any(self.probs < 0):
            raise ValueError("negative probability")
        if abs(float(self.probs.sum()) - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {self.probs.sum()}, not 1")

    def to_json(self) -> dict:
        return {"support": [list(s) if isinstance(s, tuple) else s for s in self.support],
                "probs": self.probs.tolist(),
                "log_partition": self.log_partition}


def _logsumexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    return m + math.log(float(np.sum(np.exp(x - m))))


# ---------------------------------------------------------------------------
# Marginals, trajectory distributions, metrics
# ---------------------------------------------------------------------------

def flow_propagate(dag: PointedDag, policy: PolicySet) -> ExactDistribution:
    """Terminating-state marginal of the forward policy by topological DP.

    F(initial)=1 and F(s') = sum over parents s of F(s) P_F(s'|s); the value at
    a terminating state is its marginal probability. Linear in states + edges.
    """
    require_valid(dag)
    probs_map = policy.forward_probs_map()
    F = np.zeros(dag.n_states)
    F[dag.initial] = 1.0
    for s in dag.topological_order():
        if dag.is_terminating(s) or F[s] == 0.0:
            continue
        for c, p in zip(dag.children(s), probs_map[s]):
            F[c] += F[s] * p
    support = dag.terminating_sorted()
    return ExactDistribution(support, F[list(support)] / F[list(support)].sum())


def target_distribution(dag: PointedDag, rewards: RewardTable) -> ExactDistribution:
    """R / sum(R) over terminating states."""
    support = dag.terminating_sorted()
    vals = np.array([rewards.reward(x) for x in support])
    return ExactDistribution(support, vals / vals.sum(), math.log(vals.sum()))


def forward_trajectory_distribution(dag: PointedDag, policy: PolicySet,
                                    cap: int = TRAJECTORY_CAP) -> ExactDistribution:
    trajs = enumerate_complete_trajectories(dag, cap)
    lp = np.array([policy.forward_logprob(t) for t in trajs])
    z = _logsumexp(lp)
    return ExactDistribution(tuple(trajs), np.exp(lp - z), 0.0)


def backward_trajectory_distribution(dag: PointedDag, policy: PolicySet,
                                     rewards: RewardTable,
                                     cap: int = TRAJECTORY_CAP) -> ExactDistribution:
    """P_B(tau) = R(x_tau) P_B(tau|x_tau) / Zhat, with Zhat = sum of rewards."""
    trajs = enumerate_complete_trajectories(dag, cap)
    log_zhat = rewards.log_partition()
    lp = np.array([rewards.log_reward(t[-1]) + policy.backward_logprob(t) - log_zhat
                   for t in trajs])
    return ExactDistribution(tuple(trajs), np.exp(lp), log_zhat)


def jsd(p: ExactDistribution, q: ExactDistribution) -> float:
    """Jensen-Shannon divergence in nats; supports must match exactly."""
    if p.support != q.support:
        raise ValueError("support mismatch")
    a, b = p.probs, q.probs
    m = 0.5 * (a + b)
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = np.where(a > 0, a * (np.log(np.where(a > 0, a, 1.0)) - np.log(m)), 0.0)
        tb = np.where(b > 0, b * (np.log(np.where(b > 0, b, 1.0)) - np.log(m)), 0.0)
    return max(0.0, 0.5 * float(ta.sum() + tb.sum()))  # provably >= 0; clamp roundoff


def pearson_log_correlation(policy_dist: ExactDistribution, rewards: RewardTable) -> float:
    """Pearson correlation of log marginal probability against log reward."""
    if len(policy_dist.support) < 2:
        raise ValueError("need at least two states")
    if np.any(policy_dist.probs <= 0):
        raise ValueError("all probabilities must be positive on the evaluation set")
    x = np.log(policy_dist.probs)
    y = np.array([rewards.log_reward(s) for s in policy_dist.support])
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(xc @ xc)), math.sqrt(float(yc @ yc))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("zero variance in a log vector")
    return float((xc @ yc) / (sx * sy))


# ---------------------------------------------------------------------------
# Scored distributions: normalized tables with exact parameter gradients
# ---------------------------------------------------------------------------

@dataclass
class ScoredDistribution:
    """A distribution whose items carry gradients of their log-probabilities.

    ``raw_lp``/``raw_scores`` describe the unnormalized form (used by the
    balance residuals, whose normalizers cancel); ``log_probs``/``scores``
    include the enumerated normalizer, i.e. they differentiate the normalized
    table exactly.
    """

    support: tuple
    probs: np.ndarray
    log_probs: np.ndarray
    raw_lp: np.ndarray
    raw_scores: dict[str, np.ndarray]
    scores: dict[str, np.ndarray] = field(init=False)
    log_partition: float = field(init=False)

    def __post_init__(self):
        self.log_partition = _logsumexp(self.raw_lp)
        mean = {g: self.probs @ S for g, S in self.raw_scores.items()}
        self.scores = {g: S - mean[g] for g, S in self.raw_scores.items()}

    def plain(self) -> ExactDistribution:
        return ExactDistribution(self.support, self.probs, self.log_partition)


def _make_scored(support: tuple, raw_lp: np.ndarray,
                 raw_scores: dict[str, np.ndarray]) -> ScoredDistribution:
    z = _logsumexp(raw_lp)
    lp = raw_lp - z
    return ScoredDistribution(support, np.exp(lp), lp, raw_lp, raw_scores)


def subnvi_scored_pair(dag: PointedDag, policy: PolicySet, rewards: RewardTable,
                       hub_layers: list[int], k: int, cap: int = TRAJECTORY_CAP
                       ) -> tuple[ScoredDistribution, ScoredDistribution]:
    """The junction-k pair: forward-flow and backward-flow distributions over
    the partial trajectories between hub layers k and k+1.

    With hub layers [0, L] this is the pair (P_F over complete trajectories,
    normalized R * P_B), which also covers non-graded DAGs.
    """
    K = len(hub_layers) - 1
    if not 0 <= k < K:
        raise ValueError(f"junction index {k} out of range for {K} segments")
    if K == 1:
        segments = enumerate_complete_trajectories(dag, cap)
    else:
        segments = enumerate_partial_trajectories(dag, hub_layers[k], hub_layers[k + 1], cap)
    sizes = policy.group_sizes()
    n = len(segments)
    lp_hat, lp_check = np.empty(n), np.empty(n)
    sc_hat = {g: np.zeros((n, d)) for g, d in sizes.items()}
    sc_check = {g: np.zeros((n, d)) for g, d in sizes.items()}
    for i, seg in enumerate(segments):
        lp_hat[i] = policy.log_flow(seg[0], rewards) + policy.forward_logprob(seg)
        g = policy.segment_score(seg, "forward")
        policy.flow_score_into(g, seg[0], 1.0)
        for name in sizes:
            sc_hat[name][i] = g[name]
        lp_check[i] = policy.log_flow(seg[-1], rewards) + policy.backward_logprob(seg)
        g = policy.segment_score(seg, "backward")
        policy.flow_score_into(g, seg[-1], 1.0)
        for name in sizes:
            sc_check[name][i] = g[name]
    support = tuple(segments)
    return _make_scored(support, lp_hat, sc_hat), _make_scored(support, lp_check, sc_check)


def trajectory_scored_pair(dag: PointedDag, policy: PolicySet, rewards: RewardTable,
                           cap: int = TRAJECTORY_CAP
                           ) -> tuple[ScoredDistribution, ScoredDistribution]:
    """(P_F over trajectories, normalized R*P_B) with exact scores."""
    top = max(dag.layer_index) if dag.layer_index is not None else 1
    return subnvi_scored_pair(dag, policy, rewards, [0, max(top, 1)], 0, cap)


def kl_with_grad(p: ScoredDistribution, q: ScoredDistribution) -> tuple[float, GradDict]:
    """KL(p || q) of two enumerated distributions, with its exact gradient."""
    if p.support != q.support:
        raise ValueError("support mismatch")
    ell = p.log_probs - q.log_probs
    value = float(p.probs @ ell)
    grads = {g: (p.probs * (1.0 + ell)) @ p.scores[g] - p.probs @ q.scores[g]
             for g in p.scores}
    return value, grads


def log2_with_grad(p: ScoredDistribution, q: ScoredDistribution) -> tuple[float, GradDict]:
    """E_q[(log(p/q))^2] (the squared-log pseudo-divergence), with gradient."""
    if p.support != q.support:
        raise ValueError("support mismatch")
    ell = p.log_probs - q.log_probs
    value = float(q.probs @ ell ** 2)
    grads = {g: (q.probs * ell ** 2) @ q.scores[g]
             + (2.0 * q.probs * ell) @ (p.scores[g] - q.scores[g])
             for g in q.scores}
    return value, grads


def expected_balance_gradient(p_hat: ScoredDistribution, p_check: ScoredDistribution,
                              side: str) -> GradDict:
    """Exact expectation of the squared balance-residual gradient.

    The residual of an item is the gap between its unnormalized forward-flow
    and backward-flow log-masses; ``side`` picks the sampling distribution
    ("hat" = forward-flow, "check" = backward-flow).
    """
    r = p_hat.raw_lp - p_check.raw_lp
    if side == "hat":
        w = p_hat.probs
    elif side == "check":
        w = p_check.probs
    else:
        raise ValueError(f"unknown side {side!r}")
    coef = 2.0 * w * r
    return {g: coef @ (p_hat.raw_scores[g] - p_check.raw_scores[g])
            for g in p_hat.raw_scores}


def expected_gradient_oracle(dag: PointedDag, policy: PolicySet, rewards: RewardTable,
                             loss_kind: str = "tb",
                             sampling: str | tuple = "forward",
                             cap: int = TRAJECTORY_CAP) -> GradDict:
    """Exact E[grad loss] under an exact sampling distribution.

    loss_kind "tb" with sampling "forward"/"backward" takes expectations over
    the forward / backward trajectory distributions; loss_kind "subtb" takes
    sampling=("subnvi", k, side) over the junction-k pair of the policy's hub
    configuration (loss_kind "db" is "subtb" with every layer a hub).
    """
    if loss_kind == "tb":
        p_hat, p_check = trajectory_scored_pair(dag, policy, rewards, cap)
        side = {"forward": "hat", "backward": "check"}[sampling]
        return expected_balance_gradient(p_hat, p_check, side)
    if loss_kind in ("subtb", "db"):
        if loss_kind == "db":
            hubs = list(range(max(dag.layer_index) + 1))
        else:
            hubs = policy.hub_layers
        kind, k, side = sampling
        if kind != "subnvi":
            raise ValueError("subtb expectations are taken over subnvi distributions")
        p_hat, p_check = subnvi_scored_pair(dag, policy, rewards, hubs, k, cap)
        return expected_balance_gradient(p_hat, p_check, side)
    raise ValueError(f"unknown loss kind {loss_kind!r}")


# ---------------------------------------------------------------------------
# Baselines and estimator variance
# ---------------------------------------------------------------------------

def _score_norms_and_c(dag: PointedDag, policy: PolicySet, rewards: RewardTable,
                       cap: int = TRAJECTORY_CAP):
    trajs = enumerate_complete_trajectories(dag, cap)
    w = np.empty(len(trajs))
    c = np.empty(len(trajs))
    scores = []
    for i, t in enumerate(trajs):
        lpf = policy.forward_logprob(t)
        w[i] = math.exp(lpf)
        c[i] = lpf - rewards.log_reward(t[-1]) - policy.backward_logprob(t)
        scores.append(policy.segment_score(t, "forward")["pf"])
    return w, c, np.asarray(scores)


def optimal_baseline(dag: PointedDag, policy: PolicySet, rewards: RewardTable,
                     cap: int = TRAJECTORY_CAP) -> float:
    """The control variate minimizing the exact covariance trace of the
    score-function estimator: a score-norm-weighted average of the signal."""
    w, c, S = _score_norms_and_c(dag, policy, rewards, cap)
    n2 = np.einsum("ij,ij->i", S, S)
    denom = float(w @ n2)
    if denom == 0.0:
        raise ValueError("all score vectors are zero (denominator is zero)")
    return float(w @ (c * n2)) / denom


def reinforce_covariance_trace(dag: PointedDag, policy: PolicySet, rewards: RewardTable,
                               baseline: float, cap: int = TRAJECTORY_CAP) -> float:
    """Exact trace of Cov of grad log P_F(tau) * (c(tau) - b) under the forward policy."""
    w, c, S = _score_norms_and_c(dag, policy, rewards, cap)
    shifted = c - baseline
    n2 = np.einsum("ij,ij->i", S, S)
    second_moment = float(w @ (shifted ** 2 * n2))
    mean_vec = (w * shifted) @ S
    return second_moment - float(mean_vec @ mean_vec)


def expected_c(dag: PointedDag, policy: PolicySet, rewards: RewardTable,
               cap: int = TRAJECTORY_CAP) -> float:
    """E under the forward policy of the log-ratio signal c(tau)."""
    w, c, _ = _score_norms_and_c(dag, policy, rewards, cap)
    return float(w @ c)


# ---------------------------------------------------------------------------
# Random oracle instances
# ---------------------------------------------------------------------------

def random_layered_dag(rng: np.random.Generator, n_mid_layers: tuple[int, int] = (1, 3),
                       width: tuple[int, int] = (2, 4)) -> tuple[PointedDag, RewardTable]:
    """A seeded graded DAG: single source, full bipartite middle layers,
    rewards log-uniform in [0.1, 10] on the terminal layer."""
    widths = [1] + [int(rng.integers(width[0], width[1] + 1))
                    for _ in range(int(rng.integers(n_mid_layers[0], n_mid_layers[1] + 1)) + 1)]
    labels, layer_index = [], []
    layer_states: list[list[int]] = []
    for l, wdt in enumerate(widths):
        ids = []
        for j in range(wdt):
            labels.append(f"L{l}_{j}")
            layer_index.append(l)
            ids.append(len(labels) - 1)
        layer_states.append(ids)
    edges = [(a, b) for l in range(len(widths) - 1)
             for a in layer_states[l] for b in layer_states[l + 1]]
    dag = PointedDag(labels, edges, 0, layer_states[-1], layer_index=layer_index)
    rewards = RewardTable({x: math.exp(rng.uniform(math.log(0.1), math.log(10.0)))
                           for x in layer_states[-1]})
    return dag, rewards


def random_instance(rng: np.random.Generator, hubs: str | None = None,
                    backward: str = "tabular"
                    ) -> tuple[PointedDag, RewardTable, TabularPolicySet]:
    """A random layered DAG with random tabular policies, log Z, and hub flows.

    ``hubs``: None (no flows), "ends" ([0, L]), "mid" ([0, ceil(L/2), L]) or
    "all" (every layer).
    """
    dag, rewards = random_layered_dag(rng)
    top = max(dag.layer_index)
    hub_layers = None
    if hubs == "ends":
        hub_layers = [0, top]
    elif hubs == "mid":
        hub_layers = [0, (top + 1) // 2, top]
    elif hubs == "all":
        hub_layers = list(range(top + 1))
    elif hubs is not None:
        raise ValueError(f"unknown hub preset {hubs!r}")
    policy = TabularPolicySet(dag, rng=rng, backward=backward, hub_layers=hub_layers)
    policy.params["logZ"][0] = rng.normal()
    policy.bump_version()
    return dag, rewards, policy


def solve_tabular_policy(dag: PointedDag, rewards: RewardTable,
                         backward: str | TabularPolicySet = "uniform",
                         hub_layers: list[int] | None = None,
                         cap: int = TRAJECTORY_CAP) -> TabularPolicySet:
    """Solve the flow equations exactly for a given backward policy.

    Returns a tabular policy whose forward policy matches the target trajectory
    distribution (reward-weighted backward mass), with log Z set to the true
    log-partition and hub flows set to the through-state masses. The balance
    residual is zero for every complete trajectory, up to rounding.
    """
    if isinstance(backward, TabularPolicySet):
        policy = TabularPolicySet(dag, backward="tabular", hub_layers=hub_layers)
        policy.params["pb"][:] = backward.params["pb"]
    else:
        policy = TabularPolicySet(dag, backward=backward, hub_layers=hub_layers)
    trajs = enumerate_complete_trajectories(dag, cap)
    m_state = np.zeros(dag.n_states)
    m_edge: dict[tuple[int, int], float] = {}
    for t in trajs:
        mass = math.exp(rewards.log_reward(t[-1]) + policy.backward_logprob(t))
        for s in t:
            m_state[s] += mass
        for e in zip(t, t[1:]):
            m_edge[e] = m_edge.get(e, 0.0) + mass
    probs = {s: np.array([m_edge.get((s, c), 0.0) for c in dag.children(s)]) / m_state[s]
             for s in range(dag.n_states) if dag.children(s)}
    policy.set_forward_probs(probs)
    policy.params["logZ"][0] = rewards.log_partition()
    if "flows" in policy.params:
        policy.set_log_flows({s: math.log(m_state[s]) for s in policy._flow_index})
    policy.bump_version()
    return policy
