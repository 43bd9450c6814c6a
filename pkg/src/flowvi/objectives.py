"""Training losses and gradient estimators.

Flow-balance side: squared log-ratio residuals over complete trajectories
(with a learned log-partition), over single edges (with state flows), and over
hub-to-hub subtrajectories. Variational side: reverse/forward KL and the two
wake-sleep pairings, as score-function estimators with optional baselines and
self-normalized importance weights for off-policy batches.

All arithmetic is in log space; rewards enter as log R.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .dag_env import RewardTable
from .exact import ExactDistribution, subnvi_scored_pair
from .grads import GradDict, add_scaled
from .policy import PolicySet, Trajectory

PF_LOSSES = ("TB", "DB", "SubTB", "ReverseKL", "ForwardKL")
PB_LOSSES = ("same-as-pf", "ReverseKL", "ForwardKL", "fixed")
FKINDS = ("tlogt", "neglogt", "log2")
DEGENERATE_WEIGHT = 0.999


@dataclass(frozen=True)
class ObjectiveSpec:
    """Which loss trains each policy, plus baseline and hub configuration."""

    pf_loss: str = "TB"
    pb_loss: str = "same-as-pf"
    baseline: str = "none"  # none | local | global
    eta: float = 0.1
    fkind: str = "neglogt"
    hub_layers: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.pf_loss not in PF_LOSSES:
            raise ValueError(f"unknown pf loss {self.pf_loss!r}")
        if self.pb_loss not in PB_LOSSES:
            raise ValueError(f"unknown pb loss {self.pb_loss!r}")
        if self.baseline not in ("none", "local", "global"):
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.baseline == "global" and not 0 < self.eta <= 1:
            raise ValueError("global baseline step size must lie in (0, 1]")
        if self.fkind not in FKINDS:
            raise ValueError(f"unknown divergence tag {self.fkind!r}")
        if self.hub_layers is not None:
            hl = list(self.hub_layers)
            if hl != sorted(set(hl)) or hl[0] != 0 or len(hl) < 2:
                raise ValueError("hub layers must be strictly increasing from 0")


@dataclass(frozen=True)
class BaselineState:
    b_global: float = 0.0
    eta: float = 0.1

    def __post_init__(self):
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")


def update_global_baseline(state: BaselineState, c_batch: np.ndarray) -> BaselineState:
    """Running average of the batch-mean signal, step size eta."""
    b_local = float(np.mean(c_batch))
    return replace(state, b_global=state.b_global + state.eta * (b_local - state.b_global))


# ---------------------------------------------------------------------------
# Balance losses
# ---------------------------------------------------------------------------

def c_value(traj: Trajectory, policy: PolicySet, rewards: RewardTable) -> float:
    """log [P_F(tau) / (R(x) P_B(tau|x))], the score-function signal."""
    return traj.log_pf(policy) - rewards.log_reward(traj.last) - traj.log_pb(policy)


def c_values(trajs: list[Trajectory], policy: PolicySet, rewards: RewardTable) -> np.ndarray:
    policy.refresh_caches(trajs)
    return np.array([c_value(t, policy, rewards) for t in trajs])


def tb_loss(traj: Trajectory, policy: PolicySet, rewards: RewardTable
            ) -> tuple[float, GradDict]:
    """Squared full-trajectory balance residual and its exact gradient."""
    if not policy.dag.is_terminating(traj.last):
        raise ValueError("trajectory balance needs a complete trajectory")
    r = policy.log_Z + c_value(traj, policy, rewards)
    grad = policy.zero_grad()
    grad["logZ"][0] += 2.0 * r
    for a, b in zip(traj.states, traj.states[1:]):
        policy.step_score_into(grad, a, b, "forward", 2.0 * r)
        policy.step_score_into(grad, b, a, "backward", -2.0 * r)
    return r * r, grad


def subtb_loss(states: tuple[int, ...], policy: PolicySet, rewards: RewardTable
               ) -> tuple[float, GradDict]:
    """Squared balance residual of a hub-to-hub subtrajectory.

    Endpoint flows resolve to exp(log_Z) at the initial state and to the
    reward at terminating states; other endpoints must carry flow parameters.
    """
    try:
        r = (policy.log_flow(states[0], rewards) + policy.forward_logprob(states)
             - policy.log_flow(states[-1], rewards) - policy.backward_logprob(states))
    except ValueError as e:
        raise ValueError(f"endpoint not a hub: {e}") from e
    grad = policy.zero_grad()
    policy.flow_score_into(grad, states[0], 2.0 * r)
    policy.flow_score_into(grad, states[-1], -2.0 * r)
    for a, b in zip(states, states[1:]):
        policy.step_score_into(grad, a, b, "forward", 2.0 * r)
        policy.step_score_into(grad, b, a, "backward", -2.0 * r)
    return r * r, grad


def db_loss(edge: tuple[int, int], policy: PolicySet, rewards: RewardTable
            ) -> tuple[float, GradDict]:
    """Single-edge balance: the length-1 subtrajectory case."""
    if edge[1] not in policy.dag.children(edge[0]):
        raise ValueError(f"{edge} is not a DAG edge")
    return subtb_loss(tuple(edge), policy, rewards)


def tb_batch(trajs: list[Trajectory], policy: PolicySet, rewards: RewardTable,
             train_pb: bool = True) -> tuple[float, GradDict, np.ndarray]:
    """Mean TB loss and gradient over a batch.

    The log_Z gradient is computed in the algebraically equivalent form
    2 (log_Z + mean c), which is what makes the running-baseline
    correspondence exact step by step.
    """
    if not trajs:
        raise ValueError("empty batch")
    c = c_values(trajs, policy, rewards)
    res = policy.log_Z + c
    inv_b = 1.0 / len(trajs)
    grad = policy.zero_grad()
    add_scaled(grad, policy.weighted_score_sum(trajs, 2.0 * res * inv_b, "forward"))
    if train_pb and "pb" in grad:
        add_scaled(grad, policy.weighted_score_sum(trajs, -2.0 * res * inv_b, "backward"))
    grad["logZ"][0] = 2.0 * (policy.log_Z + float(np.mean(c)))
    return float(np.mean(res ** 2)), grad, c


def db_batch(trajs: list[Trajectory], policy: PolicySet, rewards: RewardTable
             ) -> tuple[float, GradDict, np.ndarray]:
    """Mean edge-balance loss over all edges of a batch of trajectories."""
    grad = policy.zero_grad()
    total, n_edges = 0.0, 0
    for t in trajs:
        for e in zip(t.states, t.states[1:]):
            loss, g = db_loss(e, policy, rewards)
            total += loss
            n_edges += 1
            add_scaled(grad, g)
    if n_edges == 0:
        raise ValueError("batch has no edges")
    for k in grad:
        grad[k] /= n_edges
    return total / n_edges, grad, c_values(trajs, policy, rewards)


def subtb_batch(trajs: list[Trajectory], policy: PolicySet, rewards: RewardTable
                ) -> tuple[float, GradDict, np.ndarray]:
    """Mean subtrajectory-balance loss over the hub segments of a batch."""
    if policy.hub_layers is None:
        raise ValueError("subtrajectory balance needs a hub-layer configuration")
    layer = policy.dag.layer_index
    hubs = set(policy.hub_layers)
    grad = policy.zero_grad()
    total, n_segs = 0.0, 0
    for t in trajs:
        cut = [i for i, s in enumerate(t.states) if layer[s] in hubs]
        for i, j in zip(cut, cut[1:]):
            loss, g = subtb_loss(t.states[i:j + 1], policy, rewards)
            total += loss
            n_segs += 1
            add_scaled(grad, g)
    if n_segs == 0:
        raise ValueError("batch has no hub segments")
    for k in grad:
        grad[k] /= n_segs
    return total / n_segs, grad, c_values(trajs, policy, rewards)


# ---------------------------------------------------------------------------
# Score-function estimators
# ---------------------------------------------------------------------------

@dataclass
class EstimatorInfo:
    weights: np.ndarray
    max_weight: float
    degenerate: bool
    c_batch: np.ndarray


def _self_normalized(log_unnorm: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(log_unnorm)):
        raise ValueError("non-finite importance weights")
    w = np.exp(log_unnorm - np.max(log_unnorm))
    total = w.sum()
    if total <= 0:
        raise ValueError("all importance weights are zero")
    return w / total


def _pf_importance_weights(trajs: list[Trajectory], policy: PolicySet,
                           weighted: bool) -> np.ndarray:
    if not weighted:
        return np.full(len(trajs), 1.0 / len(trajs))
    return _self_normalized(np.array([t.log_pf(policy) - t.log_behavior for t in trajs]))


def reverse_kl_grad(trajs: list[Trajectory], policy: PolicySet, rewards: RewardTable,
                    baseline: str | BaselineState = "none", weighted: bool = False,
                    train_pb: bool = False) -> tuple[GradDict, EstimatorInfo]:
    """REINFORCE estimator of the mode-seeking KL gradient for the sampler.

    Per-trajectory signal c minus a baseline (none, batch mean, or a running
    global value), weighted uniformly on-policy or by self-normalized
    forward-policy importance ratios off-policy. With ``train_pb`` the
    posterior gets the matching maximum-likelihood-style gradient of the same
    shared objective.
    """
    if not trajs:
        raise ValueError("empty batch")
    w = _pf_importance_weights(trajs, policy, weighted)
    c = c_values(trajs, policy, rewards)
    if isinstance(baseline, BaselineState):
        b = baseline.b_global
    elif baseline == "local":
        b = float(np.mean(c))
    elif baseline == "none":
        b = 0.0
    else:
        raise ValueError(f"unknown baseline {baseline!r}")
    grad = policy.weighted_score_sum(trajs, w * (c - b), "forward")
    if train_pb and "pb" in grad:
        add_scaled(grad, policy.weighted_score_sum(trajs, -w, "backward"))
    mx = float(np.max(w))
    return grad, EstimatorInfo(w, mx, mx > DEGENERATE_WEIGHT, c)


def forward_kl_grad(trajs: list[Trajectory], policy: PolicySet, rewards: RewardTable,
                    train_pb: bool = False) -> tuple[GradDict, EstimatorInfo]:
    """Importance-weighted estimator of the mean-seeking KL gradient.

    Weights are self-normalized reward-weighted backward masses over the
    behavior density; a single weight above 0.999 raises the degeneracy flag
    (variance diagnostic) without failing the step. The posterior gradient,
    when requested, is the weighted REINFORCE form with a weighted-mean
    baseline.
    """
    if not trajs:
        raise ValueError("empty batch")
    policy.refresh_caches(trajs)
    log_u = np.array([rewards.log_reward(t.last) + t.log_pb(policy) - t.log_behavior
                      for t in trajs])
    w = _self_normalized(log_u)
    grad = policy.weighted_score_sum(trajs, -w, "forward")
    c = c_values(trajs, policy, rewards)
    if train_pb and "pb" in grad:
        c_tilde = -c  # log [R(x) P_B(tau|x) / P_F(tau)]
        beta = float(w @ c_tilde)
        add_scaled(grad, policy.weighted_score_sum(trajs, w * (c_tilde - beta), "backward"))
    mx = float(np.max(w))
    return grad, EstimatorInfo(w, mx, mx > DEGENERATE_WEIGHT, c)


def wake_sleep_step(trajs: list[Trajectory], policy: PolicySet, rewards: RewardTable,
                    variant: str = "WS", baseline: str | BaselineState = "none",
                    weighted: bool = False) -> tuple[GradDict, EstimatorInfo]:
    """The two mixed pairings of the KL estimators.

    WS: sampler follows the forward-KL gradient; posterior gets the sleep
    update (fit to the sampler's own trajectories). ReverseWS: sampler follows
    the baselined REINFORCE gradient; posterior gets the importance-weighted
    forward-KL REINFORCE gradient.
    """
    if variant == "WS":
        grad, info = forward_kl_grad(trajs, policy, rewards, train_pb=False)
        if "pb" in grad:
            w = _pf_importance_weights(trajs, policy, weighted)
            add_scaled(grad, policy.weighted_score_sum(trajs, -w, "backward"))
        return grad, info
    if variant == "ReverseWS":
        grad, info = reverse_kl_grad(trajs, policy, rewards, baseline=baseline,
                                     weighted=weighted, train_pb=False)
        if "pb" in grad:
            pb_grad, pb_info = forward_kl_grad(trajs, policy, rewards, train_pb=True)
            grad["pb"] += pb_grad["pb"]
            info = EstimatorInfo(info.weights, max(info.max_weight, pb_info.max_weight),
                                 info.degenerate or pb_info.degenerate, info.c_batch)
        return grad, info
    raise ValueError(f"unknown wake-sleep variant {variant!r}")


# ---------------------------------------------------------------------------
# Divergences over enumerated tables
# ---------------------------------------------------------------------------

def f_divergence(p: ExactDistribution, q: ExactDistribution, fkind: str) -> float:
    """E over q of f(p/q): "tlogt" and "neglogt" are the two KLs, "log2" the
    squared-log pseudo-divergence. The second argument plays the sampling role."""
    if p.support != q.support:
        raise ValueError("support mismatch")
    a, b = p.probs, q.probs
    if fkind == "tlogt":
        if np.any((a > 0) & (b == 0)):
            raise ValueError("support violation: q must cover p")
        mask = a > 0
        return float(np.sum(a[mask] * (np.log(a[mask]) - np.log(b[mask]))))
    if fkind in ("neglogt", "log2"):
        if np.any((b > 0) & (a == 0)):
            raise ValueError("support violation: p must cover q")
        mask = b > 0
        ell = np.log(a[mask]) - np.log(b[mask])
        if fkind == "neglogt":
            return float(np.sum(b[mask] * -ell))
        return float(np.sum(b[mask] * ell ** 2))
    raise ValueError(f"unknown divergence tag {fkind!r}")


def subnvi_distributions(policy: PolicySet, rewards: RewardTable, k: int
                         ) -> tuple[ExactDistribution, ExactDistribution]:
    """The junction-k forward-flow and backward-flow subtrajectory tables,
    normalized, with their log-partitions."""
    if policy.hub_layers is None:
        raise ValueError("policy has no hub-layer configuration")
    p_hat, p_check = subnvi_scored_pair(policy.dag, policy, rewards,
                                        policy.hub_layers, k)
    return p_hat.plain(), p_check.plain()
