"""Experiment driver: batched training with periodic exact evaluation.

A run is fully determined by its config and seed: sampling consumes one RNG
stream in a fixed order, batch reductions are fixed-order, and metrics rows
are appended only at evaluation points. Non-finite losses or gradients skip
the step and increment a counter instead of aborting.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dag_env import (
    HypergridSpec,
    PointedDag,
    RewardTable,
    build_hypergrid,
    count_complete_trajectories,
    dag_from_json,
    dag_to_json,
    enumerate_complete_trajectories,
)
from .exact import ExactDistribution, flow_propagate, jsd, target_distribution
from .grads import GradDict, allfinite
from .nn import AdamState, MomentumSgdState, adam_step, momentum_sgd_step
from .objectives import (
    BaselineState,
    ObjectiveSpec,
    db_batch,
    forward_kl_grad,
    reverse_kl_grad,
    subtb_batch,
    tb_batch,
    update_global_baseline,
    wake_sleep_step,
)
from .policy import (
    BehaviorConfig,
    HypergridMlpPolicySet,
    PolicySet,
    TabularPolicySet,
    Trajectory,
    sample_batch,
)

CSV_HEADER = ["trajectories_seen", "jsd", "log_Z_estimate", "mean_loss",
              "mean_reward", "max_importance_weight", "eps_current", "wall_ms"]
JSD_STATE_CAP = 100_000
EXACT_LOSS_TRAJ_CAP = 20_000


@dataclass
class MetricsRow:
    trajectories_seen: int
    jsd: float
    log_Z_estimate: float
    mean_loss: float
    mean_reward: float
    max_importance_weight: float
    eps_current: float
    wall_ms: int

    def as_list(self) -> list:
        return [getattr(self, k) for k in CSV_HEADER]

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in CSV_HEADER}


def rows_to_csv(rows: list[MetricsRow]) -> str:
    lines = [",".join(CSV_HEADER)]
    for r in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in r.as_list()))
    return "\n".join(lines) + "\n"


def rows_from_csv(text: str) -> list[MetricsRow]:
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0].split(",") != CSV_HEADER:
        raise ValueError("metrics CSV header mismatch")
    out = []
    for ln in lines[1:]:
        vals = ln.split(",")
        out.append(MetricsRow(int(vals[0]), *[float(v) for v in vals[1:7]],
                              int(vals[7])))
    return out


@dataclass
class TrainConfig:
    """One experiment: environment, parametrization, objective, schedule."""

    env: dict
    policy: dict = field(default_factory=lambda: {"kind": "mlp"})
    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    behavior: BehaviorConfig = field(default_factory=BehaviorConfig)
    batch_size: int = 64
    total_trajectories: int = 1_000_000
    lr: dict = field(default_factory=lambda: {"pf": 1e-3, "pb": 1e-3, "logZ": 0.1})
    optimizer: dict = field(default_factory=lambda: {"pf": "adam", "pb": "adam",
                                                     "logZ": "sgd"})
    momentum: float = 0.8
    eval_every: int = 32_000
    seed: int = 0
    lr_plateau: dict | None = None
    grad_clip: float | None = None
    early_stop_jsd: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_trajectories < 0:
            raise ValueError("total_trajectories must be >= 0")
        for k, v in self.lr.items():
            if not v > 0:
                raise ValueError(f"learning rate {k} must be positive")
        if self.lr_plateau is not None:
            if not 0 < self.lr_plateau["factor"] < 1:
                raise ValueError("plateau factor must lie in (0, 1)")
            if self.lr_plateau["patience_evals"] < 1:
                raise ValueError("plateau patience must be >= 1")

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        obj = dict(doc.pop("objective", {}))
        if obj.get("hub_layers") is not None:
            obj["hub_layers"] = tuple(obj["hub_layers"])
        beh = doc.pop("behavior", {})
        return cls(objective=ObjectiveSpec(**obj), behavior=BehaviorConfig(**beh),
                   **doc)

    def to_json(self) -> dict:
        return {
            "env": self.env, "policy": self.policy,
            "objective": {"pf_loss": self.objective.pf_loss,
                          "pb_loss": self.objective.pb_loss,
                          "baseline": self.objective.baseline,
                          "eta": self.objective.eta,
                          "fkind": self.objective.fkind,
                          "hub_layers": list(self.objective.hub_layers)
                          if self.objective.hub_layers else None},
            "behavior": {"mode": self.behavior.mode,
                         "eps_init": self.behavior.eps_init,
                         "t_max": self.behavior.t_max},
            "batch_size": self.batch_size,
            "total_trajectories": self.total_trajectories,
            "lr": self.lr, "optimizer": self.optimizer, "momentum": self.momentum,
            "eval_every": self.eval_every, "seed": self.seed,
            "lr_plateau": self.lr_plateau, "grad_clip": self.grad_clip,
            "early_stop_jsd": self.early_stop_jsd,
        }


def build_env(env: dict) -> tuple[PointedDag, RewardTable, HypergridSpec | None]:
    if env["type"] == "hypergrid":
        spec = HypergridSpec(H=env["H"], D=env["D"], R0=env["R0"])
        dag, rewards = build_hypergrid(spec)
        return dag, rewards, spec
    if env["type"] == "dag":
        dag = dag_from_json(env["dag"] if "dag" in env else json.load(open(env["path"])))
        rewards = RewardTable({int(k): float(v) for k, v in env["rewards"].items()})
        rewards.check_domain(dag)
        return dag, rewards, None
    raise ValueError(f"unknown env type {env['type']!r}")


def build_policy(config: TrainConfig, dag: PointedDag,
                 hspec: HypergridSpec | None, rng: np.random.Generator) -> PolicySet:
    pconf = config.policy
    kind = pconf.get("kind", "mlp" if hspec is not None else "tabular")
    obj = config.objective
    if kind == "mlp":
        if hspec is None:
            raise ValueError("MLP policies are defined for hypergrid environments")
        if obj.pf_loss in ("DB", "SubTB"):
            raise ValueError(f"{obj.pf_loss} training needs tabular state flows")
        return HypergridMlpPolicySet(hspec, dag, rng=rng,
                                     hidden=tuple(pconf.get("hidden", (256, 256))),
                                     backward=pconf.get("backward", "mlp"))
    if kind == "tabular":
        backward = pconf.get("backward", "tabular")
        hub_layers = list(obj.hub_layers) if obj.hub_layers else None
        if obj.pf_loss == "SubTB" and hub_layers is None:
            raise ValueError("SubTB training needs objective.hub_layers")
        return TabularPolicySet(dag, rng=rng, backward=backward,
                                hub_layers=hub_layers,
                                db_flows=obj.pf_loss == "DB")
    raise ValueError(f"unknown policy kind {kind!r}")


# ---------------------------------------------------------------------------
# Gradient dispatch
# ---------------------------------------------------------------------------

@dataclass
class StepInfo:
    loss: float
    grads: GradDict
    c_batch: np.ndarray
    max_weight: float
    update_groups: set[str]


def compute_gradients(batch: list[Trajectory], policy: PolicySet,
                      rewards: RewardTable, obj: ObjectiveSpec,
                      baseline_state: BaselineState | None,
                      weighted: bool) -> StepInfo:
    pb_trained = obj.pb_loss != "fixed" and "pb" in policy.params
    groups = {"pf"}
    if pb_trained:
        groups.add("pb")

    if obj.pf_loss in ("TB", "DB", "SubTB"):
        batch_fn = {"TB": tb_batch, "DB": db_batch, "SubTB": subtb_batch}[obj.pf_loss]
        train_pb = pb_trained and obj.pb_loss == "same-as-pf"
        if obj.pf_loss == "TB":
            loss, grads, c = batch_fn(batch, policy, rewards, train_pb=train_pb)
        else:
            loss, grads, c = batch_fn(batch, policy, rewards)
            if not train_pb and "pb" in grads:
                grads["pb"][:] = 0.0
        groups.add("logZ")
        if "flows" in policy.params:
            groups.add("flows")
        max_w = math.nan
        if pb_trained and obj.pb_loss in ("ReverseKL", "ForwardKL"):
            est = reverse_kl_grad if obj.pb_loss == "ReverseKL" else forward_kl_grad
            pb_grad, info = est(batch, policy, rewards, train_pb=True)
            grads["pb"] += pb_grad["pb"]
            max_w = info.max_weight
        return StepInfo(loss, grads, c, max_w, groups)

    baseline = baseline_state if (obj.baseline == "global" and baseline_state) \
        else obj.baseline
    if obj.pf_loss == "ReverseKL":
        if pb_trained and obj.pb_loss == "ForwardKL":
            grads, info = wake_sleep_step(batch, policy, rewards, "ReverseWS",
                                          baseline=baseline, weighted=weighted)
        else:
            grads, info = reverse_kl_grad(batch, policy, rewards, baseline=baseline,
                                          weighted=weighted, train_pb=pb_trained)
    elif obj.pf_loss == "ForwardKL":
        if pb_trained and obj.pb_loss == "ReverseKL":
            grads, info = wake_sleep_step(batch, policy, rewards, "WS",
                                          baseline=baseline, weighted=weighted)
        else:
            grads, info = forward_kl_grad(batch, policy, rewards, train_pb=pb_trained)
    else:
        raise ValueError(f"unhandled pf loss {obj.pf_loss!r}")
    loss = float(np.mean(info.c_batch))
    return StepInfo(loss, grads, info.c_batch, info.max_weight, groups)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

def _make_opt(kind: str, n: int, lr: float, momentum: float):
    if kind == "adam":
        return AdamState.init(n, lr)
    if kind == "sgd":
        return MomentumSgdState.init(n, lr, 0.0)
    if kind == "momentum":
        return MomentumSgdState.init(n, lr, momentum)
    raise ValueError(f"unknown optimizer {kind!r}")


def _opt_step(state, params: np.ndarray, grad: np.ndarray):
    if isinstance(state, AdamState):
        return adam_step(state, params, grad)
    return momentum_sgd_step(state, params, grad)


def _scale_lr(state, factor: float):
    return replace(state, lr=state.lr * factor)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    rows: list[MetricsRow]
    summary: dict
    policy: PolicySet
    dag: PointedDag
    rewards: RewardTable
    hspec: HypergridSpec | None

    def metrics_csv(self) -> str:
        return rows_to_csv(self.rows)


def train_run(config: TrainConfig, log=None) -> TrainResult:
    dag, rewards, hspec = build_env(config.env)
    rng = np.random.default_rng(config.seed)
    policy = build_policy(config, dag, hspec, rng)
    obj = config.objective
    weighted = config.behavior.mode == "epsilon_shift" and obj.pf_loss in (
        "ReverseKL", "ForwardKL")

    lr_groups = {"pf": config.lr.get("pf", 1e-3), "pb": config.lr.get("pb", 1e-3),
                 "logZ": config.lr.get("logZ", 0.1),
                 "flows": config.lr.get("flows", config.lr.get("logZ", 0.1))}
    opt = {g: _make_opt(config.optimizer.get(g, "sgd" if g in ("logZ", "flows")
                                             else "adam"),
                        policy.params[g].size, lr_groups[g], config.momentum)
           for g in policy.params}
    baseline_state = BaselineState(0.0, obj.eta) if obj.baseline == "global" else None

    jsd_ok = dag.n_states <= JSD_STATE_CAP
    if not jsd_ok and log:
        log(f"warning: {dag.n_states} states exceed the exact-JSD cap; "
            "jsd column will be nan")
    target = target_distribution(dag, rewards) if jsd_ok else None

    n_batches = config.total_trajectories // config.batch_size
    rows: list[MetricsRow] = []
    t_start = time.perf_counter()
    seen = 0
    last_eval = 0
    skipped = 0
    degenerate = 0
    loss_sum, loss_n = 0.0, 0
    reward_sum, reward_n = 0.0, 0
    max_w = math.nan
    best_jsd = math.inf
    plateau_bad = 0

    def log_z_estimate() -> float:
        if baseline_state is not None and obj.pf_loss in ("ReverseKL", "ForwardKL"):
            return -baseline_state.b_global
        return policy.log_Z

    for t in range(n_batches):
        batch = sample_batch(policy, config.behavior, t, rng, config.batch_size)
        step = compute_gradients(batch, policy, rewards, obj, baseline_state, weighted)
        finite = math.isfinite(step.loss) and allfinite(step.grads)
        if finite:
            if config.grad_clip is not None:
                gnorm = math.sqrt(sum(float(v @ v) for v in step.grads.values()))
                if gnorm > config.grad_clip:
                    for v in step.grads.values():
                        v *= config.grad_clip / gnorm
            for g in sorted(step.update_groups & set(policy.params)):
                new, opt[g], skip = _opt_step(opt[g], policy.params[g], step.grads[g])
                if skip:
                    skipped += 1
                else:
                    policy.assign(g, new)
        else:
            skipped += 1
        if baseline_state is not None and np.all(np.isfinite(step.c_batch)):
            baseline_state = update_global_baseline(baseline_state, step.c_batch)

        if math.isfinite(step.loss):
            loss_sum += step.loss
            loss_n += 1
        reward_sum += sum(rewards.reward(tr.last) for tr in batch)
        reward_n += len(batch)
        if math.isfinite(step.max_weight):
            max_w = step.max_weight if math.isnan(max_w) else max(max_w, step.max_weight)
            degenerate += step.max_weight > 0.999
        seen += len(batch)

        if seen - last_eval >= config.eval_every or t == n_batches - 1:
            cur_jsd = math.nan
            if jsd_ok:
                cur_jsd = jsd(flow_propagate(dag, policy), target)
            rows.append(MetricsRow(
                trajectories_seen=seen,
                jsd=cur_jsd,
                log_Z_estimate=log_z_estimate(),
                mean_loss=loss_sum / loss_n if loss_n else math.nan,
                mean_reward=reward_sum / reward_n if reward_n else math.nan,
                max_importance_weight=max_w,
                eps_current=config.behavior.epsilon(t),
                wall_ms=int(1000 * (time.perf_counter() - t_start)),
            ))
            last_eval = seen
            loss_sum, loss_n, reward_sum, reward_n = 0.0, 0, 0.0, 0
            max_w = math.nan
            if config.lr_plateau is not None and math.isfinite(cur_jsd):
                if cur_jsd < best_jsd:
                    best_jsd = cur_jsd
                    plateau_bad = 0
                else:
                    plateau_bad += 1
                    if plateau_bad >= config.lr_plateau["patience_evals"]:
                        opt = {g: _scale_lr(s, config.lr_plateau["factor"])
                               for g, s in opt.items()}
                        plateau_bad = 0
            if log:
                r = rows[-1]
                log(f"t={r.trajectories_seen} jsd={r.jsd:.5g} "
                    f"logZ={r.log_Z_estimate:.4g} loss={r.mean_loss:.5g}")
            if (config.early_stop_jsd is not None and math.isfinite(cur_jsd)
                    and cur_jsd < config.early_stop_jsd):
                break

    summary = {
        "config": config.to_json(),
        "trajectories_seen": seen,
        "final_jsd": rows[-1].jsd if rows else math.nan,
        "min_jsd": min((r.jsd for r in rows if math.isfinite(r.jsd)), default=math.nan),
        "final_log_Z_estimate": log_z_estimate(),
        "skipped_steps": skipped,
        "degenerate_weight_batches": degenerate,
        "wall_ms": int(1000 * (time.perf_counter() - t_start)),
    }
    return TrainResult(rows, summary, policy, dag, rewards, hspec)


# ---------------------------------------------------------------------------
# Checkpoints and standalone evaluation
# ---------------------------------------------------------------------------

def checkpoint_doc(result_env: dict, policy: PolicySet) -> dict:
    return {"env": result_env, "policy": policy.to_json()}


def load_checkpoint(doc: dict) -> tuple[PointedDag, RewardTable,
                                        HypergridSpec | None, PolicySet]:
    dag, rewards, hspec = build_env(doc["env"])
    pdoc = doc["policy"]
    if pdoc["kind"] == "tabular":
        policy = TabularPolicySet.from_json(dag, pdoc)
    elif pdoc["kind"] == "hypergrid_mlp":
        policy = HypergridMlpPolicySet.from_json(hspec, dag, pdoc)
    else:
        raise ValueError(f"unknown checkpoint policy kind {pdoc['kind']!r}")
    return dag, rewards, hspec, policy


def evaluate_checkpoint(policy: PolicySet, dag: PointedDag, rewards: RewardTable
                        ) -> MetricsRow:
    """One exact evaluation, without training state. Pure: wall_ms is 0."""
    if dag.n_states > JSD_STATE_CAP:
        raise ValueError("environment too large for exact evaluation")
    marginal = flow_propagate(dag, policy)
    cur_jsd = jsd(marginal, target_distribution(dag, rewards))
    mean_reward = float(marginal.probs @ np.array(
        [rewards.reward(x) for x in marginal.support]))
    mean_loss = math.nan
    if count_complete_trajectories(dag) <= EXACT_LOSS_TRAJ_CAP:
        trajs = [Trajectory(s) for s in enumerate_complete_trajectories(dag)]
        policy.refresh_caches(trajs)
        lp = np.array([t.log_pf(policy) for t in trajs])
        res = np.array([policy.log_Z + lp[i] - rewards.log_reward(t.last)
                        - t.log_pb(policy) for i, t in enumerate(trajs)])
        mean_loss = float(np.exp(lp) @ res ** 2)
    return MetricsRow(0, cur_jsd, policy.log_Z, mean_loss, mean_reward,
                      math.nan, math.nan, 0)
