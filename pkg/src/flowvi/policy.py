"""Forward/backward policies over a pointed DAG, trajectories, and sampling.

Two parametrizations share one interface: per-state logit tables for arbitrary
DAGs, and MLPs over K-hot coordinate encodings for hypergrids. Both expose
exact score vectors (gradients of trajectory log-probabilities) so losses and
enumeration oracles can be built on top without an autodiff framework.

Trajectory log-probability caches are tied to a policy version counter that
every parameter update bumps; stale caches are recomputed transparently. The
behavior log-probability is frozen at sampling time, as importance weighting
requires.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dag_env import HypergridSpec, PointedDag, RewardTable, require_valid
from .grads import GradDict, add_scaled, zeros_for
from .nn import Mlp, cosine_epsilon


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


@dataclass
class BehaviorConfig:
    """How training trajectories are generated.

    ``on_policy`` samples from the current forward policy; ``epsilon_shift``
    subtracts a cosine-annealed epsilon from the exit-action logit, lowering
    the termination probability and lengthening trajectories.
    """

    mode: str = "on_policy"
    eps_init: float = 0.0
    t_max: int = 1

    def __post_init__(self):
        if self.mode not in ("on_policy", "epsilon_shift"):
            raise ValueError(f"unknown behavior mode {self.mode!r}")
        if self.eps_init < 0:
            raise ValueError("eps_init must be nonnegative")

    def epsilon(self, t: int) -> float:
        if self.mode == "on_policy":
            return 0.0
        return cosine_epsilon(self.eps_init, t, self.t_max)


@dataclass
class Trajectory:
    """A complete or partial path; log-prob caches follow the policy version."""

    states: tuple[int, ...]
    log_behavior: float = math.nan
    _log_pf: float = field(default=math.nan, repr=False)
    _log_pb: float = field(default=math.nan, repr=False)
    _version: int = field(default=-1, repr=False)

    @property
    def last(self) -> int:
        return self.states[-1]

    def set_cache(self, log_pf: float, log_pb: float, version: int) -> None:
        self._log_pf, self._log_pb, self._version = log_pf, log_pb, version

    def log_pf(self, policy: "PolicySet") -> float:
        if self._version != policy.version:
            self.set_cache(policy.forward_logprob(self.states),
                           policy.backward_logprob(self.states), policy.version)
        return self._log_pf

    def log_pb(self, policy: "PolicySet") -> float:
        if self._version != policy.version:
            self.log_pf(policy)
        return self._log_pb


class PolicySet:
    """Shared machinery for the tabular and MLP-backed parametrizations."""

    dag: PointedDag
    params: dict[str, np.ndarray]
    version: int

    # ----- interface pieces supplied by subclasses -----

    def neighbors(self, state: int, direction: str) -> tuple[int, ...]:
        if direction == "forward":
            return self.dag.children(state)
        if direction == "backward":
            return self.dag.parents(state)
        raise ValueError(f"unknown direction {direction!r}")

    def action_logits(self, state: int, direction: str) -> np.ndarray:
        raise NotImplementedError

    def step_score_into(self, grad: GradDict, state: int, nxt: int, direction: str,
                        coef: float) -> None:
        """Accumulate coef * grad of log P(nxt | state) into ``grad``."""
        raise NotImplementedError

    # ----- common behavior -----

    @property
    def log_Z(self) -> float:
        return float(self.params["logZ"][0])

    def set_log_Z(self, value: float) -> None:
        self.params["logZ"][0] = value
        self.bump_version()

    def bump_version(self) -> None:
        self.version += 1

    def group_sizes(self) -> dict[str, int]:
        return {k: v.size for k, v in self.params.items()}

    def zero_grad(self) -> GradDict:
        return zeros_for(self.group_sizes())

    def assign(self, group: str, values: np.ndarray) -> None:
        self.params[group][:] = values
        self.bump_version()

    def exit_position(self, state: int) -> int:
        """Index of the exit action among this state's forward neighbors."""
        if self.dag.exit_child is None:
            raise ValueError("environment has no distinguished exit action")
        return self.neighbors(state, "forward").index(self.dag.exit_child[state])

    def action_distribution(self, state: int, direction: str, eps: float = 0.0
                            ) -> np.ndarray:
        """Probabilities over neighbors(state, direction); exit logit shifted by eps."""
        nbrs = self.neighbors(state, direction)
        if not nbrs:
            kind = "terminal queried forward" if direction == "forward" else \
                "initial queried backward"
            raise ValueError(f"state {state} has no {direction} neighbors ({kind})")
        logits = self.action_logits(state, direction)
        if eps > 0.0 and direction == "forward":
            logits = logits.copy()
            logits[self.exit_position(state)] -= eps
        return softmax(logits)

    def step_logprob(self, state: int, nxt: int, direction: str) -> float:
        nbrs = self.neighbors(state, direction)
        if nxt not in nbrs:
            raise ValueError(f"({state},{nxt}) is not a DAG edge in direction {direction}")
        logits = self.action_logits(state, direction)
        return float(log_softmax(logits)[nbrs.index(nxt)])

    def forward_logprob(self, states: tuple[int, ...]) -> float:
        return sum(self.step_logprob(a, b, "forward") for a, b in zip(states, states[1:]))

    def backward_logprob(self, states: tuple[int, ...]) -> float:
        return sum(self.step_logprob(b, a, "backward") for a, b in zip(states, states[1:]))

    def segment_score(self, states: tuple[int, ...], direction: str) -> GradDict:
        """Gradient of the segment log-probability in the given direction."""
        g = self.zero_grad()
        for a, b in zip(states, states[1:]):
            if direction == "forward":
                self.step_score_into(g, a, b, "forward", 1.0)
            else:
                self.step_score_into(g, b, a, "backward", 1.0)
        return g

    def weighted_score_sum(self, trajs: list[Trajectory], coefs: np.ndarray,
                           direction: str) -> GradDict:
        """sum_i coefs[i] * grad of log P(traj_i) in the given direction."""
        g = self.zero_grad()
        for traj, c in zip(trajs, coefs):
            for a, b in zip(traj.states, traj.states[1:]):
                if direction == "forward":
                    self.step_score_into(g, a, b, "forward", float(c))
                else:
                    self.step_score_into(g, b, a, "backward", float(c))
        return g

    def refresh_caches(self, trajs: list[Trajectory]) -> None:
        for t in trajs:
            t.log_pf(self)

    def forward_probs_map(self) -> dict[int, np.ndarray]:
        """Forward action probabilities per non-terminating state."""
        return {s: self.action_distribution(s, "forward")
                for s in range(self.dag.n_states) if self.dag.children(s)}

    # ----- state flows (balance losses) -----

    def log_flow(self, state: int, rewards: RewardTable) -> float:
        """log F(state): log_Z at the source, log R at sinks, else a flow parameter."""
        if state == self.dag.initial:
            return self.log_Z
        if self.dag.is_terminating(state):
            return rewards.log_reward(state)
        return self._interior_log_flow(state)

    def flow_score_into(self, grad: GradDict, state: int, coef: float) -> None:
        """Accumulate coef * grad of log_flow(state) (zero at sinks)."""
        if state == self.dag.initial:
            grad["logZ"][0] += coef
        elif not self.dag.is_terminating(state):
            self._interior_flow_score_into(grad, state, coef)

    def _interior_log_flow(self, state: int) -> float:
        raise ValueError(f"no flow parameter at state {state}")

    def _interior_flow_score_into(self, grad: GradDict, state: int, coef: float) -> None:
        raise ValueError(f"no flow parameter at state {state}")


class TabularPolicySet(PolicySet):
    """Per-state logits over children (forward) and parents (backward).

    ``backward="uniform"`` fixes the backward policy to uniform over parents
    and drops its parameter group. Optional hub flows hold one log-flow per
    designated hub state; the flow at the initial state is exp(log_Z) and at
    terminating states the reward, so neither is parametrized here.
    """

    def __init__(self, dag: PointedDag, rng: np.random.Generator | None = None,
                 backward: str = "tabular", hub_layers: list[int] | None = None,
                 db_flows: bool = False):
        require_valid(dag)
        if backward not in ("tabular", "uniform"):
            raise ValueError(f"unknown backward mode {backward!r}")
        self.dag = dag
        self.backward_mode = backward
        self.version = 0

        self._pf_slice: dict[int, tuple[int, int]] = {}
        off = 0
        for s in range(dag.n_states):
            n = len(dag.children(s))
            if n:
                self._pf_slice[s] = (off, n)
                off += n
        pf = rng.normal(size=off) if rng is not None else np.zeros(off)

        self.params = {"pf": pf, "logZ": np.zeros(1)}
        if backward == "tabular":
            self._pb_slice: dict[int, tuple[int, int]] = {}
            off = 0
            for s in range(dag.n_states):
                n = len(dag.parents(s))
                if n:
                    self._pb_slice[s] = (off, n)
                    off += n
            self.params["pb"] = rng.normal(size=off) if rng is not None else np.zeros(off)

        # Flow parameters: one log-flow per interior state of each interior hub
        # layer (SubTB), or per every interior state (DB on arbitrary DAGs).
        self.hub_layers = None
        hub_states: list[int] = []
        if hub_layers is not None:
            if dag.layer_index is None:
                raise ValueError("hub layers need a graded DAG")
            top = max(dag.layer_index)
            hl = sorted(set(hub_layers))
            if hl != list(hub_layers) or hl[0] != 0 or hl[-1] != top:
                raise ValueError("hub layers must be strictly increasing and include 0 and the top layer")
            self.hub_layers = hl
            hub_states = [s for s in range(dag.n_states)
                          if dag.layer_index[s] in hl[1:-1]]
        elif db_flows:
            hub_states = [s for s in range(dag.n_states)
                          if s != dag.initial and not dag.is_terminating(s)]
        self._flow_index = {s: i for i, s in enumerate(sorted(hub_states))}
        if self._flow_index:
            self.params["flows"] = (rng.normal(size=len(self._flow_index))
                                    if rng is not None else np.zeros(len(self._flow_index)))

    def action_logits(self, state: int, direction: str) -> np.ndarray:
        if direction == "forward":
            off, n = self._pf_slice[state]
            return self.params["pf"][off:off + n]
        if self.backward_mode == "uniform":
            return np.zeros(len(self.dag.parents(state)))
        off, n = self._pb_slice[state]
        return self.params["pb"][off:off + n]

    def step_score_into(self, grad: GradDict, state: int, nxt: int, direction: str,
                        coef: float) -> None:
        nbrs = self.neighbors(state, direction)
        if direction == "backward" and self.backward_mode == "uniform":
            return  # fixed policy, no parameters
        group = "pf" if direction == "forward" else "pb"
        off, n = (self._pf_slice if direction == "forward" else self._pb_slice)[state]
        probs = softmax(self.action_logits(state, direction))
        g = grad[group][off:off + n]
        g -= coef * probs
        g[nbrs.index(nxt)] += coef

    # ----- hub flows -----

    def _interior_log_flow(self, state: int) -> float:
        if state not in self._flow_index:
            raise ValueError(f"no flow parameter at state {state}")
        return float(self.params["flows"][self._flow_index[state]])

    def _interior_flow_score_into(self, grad: GradDict, state: int, coef: float) -> None:
        grad["flows"][self._flow_index[state]] += coef

    def set_log_flows(self, values: dict[int, float]) -> None:
        for s, v in values.items():
            self.params["flows"][self._flow_index[s]] = v
        self.bump_version()

    def set_forward_probs(self, probs_by_state: dict[int, np.ndarray]) -> None:
        """Install exact forward probabilities via log-probability logits."""
        for s, p in probs_by_state.items():
            off, n = self._pf_slice[s]
            self.params["pf"][off:off + n] = np.log(p)
        self.bump_version()

    def to_json(self) -> dict:
        doc = {"kind": "tabular", "backward": self.backward_mode,
               "params": {k: v.tolist() for k, v in self.params.items()},
               "db_flows": self.hub_layers is None and bool(self._flow_index)}
        if self.hub_layers is not None:
            doc["hub_layers"] = self.hub_layers
        return doc

    @classmethod
    def from_json(cls, dag: PointedDag, doc: dict) -> "TabularPolicySet":
        pol = cls(dag, backward=doc["backward"], hub_layers=doc.get("hub_layers"),
                  db_flows=doc.get("db_flows", False))
        for k, v in doc["params"].items():
            pol.params[k][:] = np.asarray(v, dtype=float)
        pol.bump_version()
        return pol


class HypergridMlpPolicySet(PolicySet):
    """Untied forward/backward MLPs over K-hot grid coordinates.

    Forward actions: increment coordinate d (d < D), exit (action D); invalid
    increments are masked to -inf after the forward pass. Backward actions:
    decrement coordinate d, masked likewise; the step back from a terminating
    copy is forced and carries no parameters. Heavily used paths are batched:
    per-state encodings, masks, and id deltas are precomputed tables.
    """

    def __init__(self, spec: HypergridSpec, dag: PointedDag,
                 rng: np.random.Generator, hidden: tuple[int, ...] = (256, 256),
                 backward: str = "mlp"):
        if backward not in ("mlp", "uniform"):
            raise ValueError(f"unknown backward mode {backward!r}")
        self.spec = spec
        self.dag = dag
        self.backward_mode = backward
        self.version = 0
        d_in = spec.H * spec.D
        self.pf_net = Mlp([d_in, *hidden, spec.D + 1], rng=rng)
        self.params = {"pf": self.pf_net.params, "logZ": np.zeros(1)}
        self.pb_net = None
        if backward == "mlp":
            self.pb_net = Mlp([d_in, *hidden, spec.D], rng=rng)
            self.params["pb"] = self.pb_net.params

        G = self.G = spec.n_cells
        H, D = spec.H, spec.D
        digits = np.arange(G)[:, None] // (H ** np.arange(D - 1, -1, -1)) % H
        self._coords = digits  # (G, D) cell coordinates
        self._khot = np.zeros((G, H * D))
        rows = np.repeat(np.arange(G), D)
        self._khot[rows, (digits + np.arange(D) * H).ravel()] = 1.0
        self._fmask = np.ones((G, D + 1), dtype=bool)
        self._fmask[:, :D] = digits < H - 1
        self._bmask = digits > 0
        # Moving along dim d changes the row-major id by H^(D-1-d); the exit
        # copy of cell r has id G + r, so the exit "delta" is G.
        self._deltas = H ** np.arange(D - 1, -1, -1)
        self._action_delta = np.concatenate([self._deltas, [G]])
        self._n_parents = self._bmask.sum(axis=1)

    # ----- encodings and masks -----

    def coords_of(self, state: int) -> tuple[int, ...]:
        return tuple(self._coords[state % self.G])

    def khot(self, coords: np.ndarray) -> np.ndarray:
        """(n, D) integer coordinates -> (n, H*D) K-hot rows."""
        ids = np.asarray(coords) @ self._deltas
        return self._khot[ids]

    def _actions_of(self, deltas: np.ndarray) -> np.ndarray:
        """Map id deltas to action indices (dimension moved, or D for exit)."""
        act = np.full(deltas.shape, self.spec.D)
        for d, dv in enumerate(self._deltas):
            act[deltas == dv] = d
        return act

    def _steps(self, trajs: list, direction: str):
        """Flatten trajectories into (state ids, action ids, segment index)."""
        ids, deltas, seg = [], [], []
        if direction == "forward":
            for i, states in enumerate(trajs):
                for a, b in zip(states, states[1:]):
                    ids.append(a)
                    deltas.append(b - a)
                    seg.append(i)
        else:
            for i, states in enumerate(trajs):
                for a, b in zip(states, states[1:]):
                    if b < self.G:  # the step back from an exit copy is forced
                        ids.append(b)
                        deltas.append(b - a)
                        seg.append(i)
        ids = np.asarray(ids, dtype=int)
        return ids, self._actions_of(np.asarray(deltas, dtype=int)), np.asarray(seg, dtype=int)

    # ----- PolicySet interface -----

    def action_logits(self, state: int, direction: str) -> np.ndarray:
        # Neighbor tuples sort by state id: incrementing dim d moves the
        # row-major id by H^(D-1-d), so children run through dims in
        # descending order followed by the exit copy (largest id), while
        # parents run through dims in ascending order.
        if direction == "forward":
            if state >= self.G:
                raise ValueError("terminal queried forward")
            logits = np.where(self._fmask[state],
                              self.pf_net.forward(self._khot[state]), -np.inf)
            order = [d for d in reversed(range(self.spec.D))
                     if self._fmask[state, d]] + [self.spec.D]
            return logits[order]
        if state >= self.G:  # forced step back to the cell
            return np.zeros(1)
        if state == self.dag.initial:
            raise ValueError("initial queried backward")
        order = [d for d in range(self.spec.D) if self._bmask[state, d]]
        if self.backward_mode == "uniform":
            return np.zeros(len(order))
        logits = np.where(self._bmask[state],
                          self.pb_net.forward(self._khot[state]), -np.inf)
        return logits[order]

    def forward_probs_map(self) -> dict[int, np.ndarray]:
        """Action probabilities at every cell in one batched pass, aligned
        with the ascending-id children ordering."""
        logits = np.where(self._fmask, self.pf_net.forward(self._khot), -np.inf)
        probs = softmax(logits)
        out = {}
        for s in range(self.G):
            order = [d for d in reversed(range(self.spec.D)) if self._fmask[s, d]] \
                + [self.spec.D]
            out[s] = probs[s, order]
        return out

    def step_score_into(self, grad: GradDict, state: int, nxt: int, direction: str,
                        coef: float) -> None:
        # Backward steps key the row by the later state; the step back from an
        # exit copy is forced and carries no parameters.
        if direction == "backward" and (state >= self.G
                                        or self.backward_mode == "uniform"):
            return
        net = self.pf_net if direction == "forward" else self.pb_net
        mask = (self._fmask if direction == "forward" else self._bmask)[state][None, :]
        delta = nxt - state if direction == "forward" else state - nxt
        action = self._actions_of(np.array([delta]))[0]
        _, acts = net.forward_cached(self._khot[state][None, :])
        probs = softmax(np.where(mask, acts[-1], -np.inf))
        upstream = -coef * probs
        upstream[0, action] += coef
        upstream[~mask] = 0.0
        g, _ = net.backward(acts, upstream, need_input_grad=False)
        grad["pf" if direction == "forward" else "pb"] += g

    # Batched path used by the trainer: one backprop for all steps of a batch.
    def weighted_score_sum(self, trajs: list[Trajectory], coefs: np.ndarray,
                           direction: str) -> GradDict:
        grad = self.zero_grad()
        if direction == "backward" and self.backward_mode == "uniform":
            return grad
        ids, actions, seg = self._steps([t.states for t in trajs], direction)
        if ids.size == 0:
            return grad
        net = self.pf_net if direction == "forward" else self.pb_net
        mask = (self._fmask if direction == "forward" else self._bmask)[ids]
        _, acts = net.forward_cached(self._khot[ids])
        probs = softmax(np.where(mask, acts[-1], -np.inf))
        row_coef = np.asarray(coefs, dtype=float)[seg]
        upstream = -row_coef[:, None] * probs
        upstream[np.arange(ids.size), actions] += row_coef
        upstream[~mask] = 0.0
        g, _ = net.backward(acts, upstream, need_input_grad=False)
        grad["pf" if direction == "forward" else "pb"] += g
        return grad

    def forward_logprob(self, states: tuple[int, ...]) -> float:
        return float(self._segment_logprobs([states], "forward")[0])

    def backward_logprob(self, states: tuple[int, ...]) -> float:
        return float(self._segment_logprobs([states], "backward")[0])

    def _segment_logprobs(self, segments: list, direction: str) -> np.ndarray:
        """Log-probabilities of many segments in one batched pass."""
        out = np.zeros(len(segments))
        ids, actions, seg = self._steps(segments, direction)
        if ids.size == 0:
            return out
        if direction == "backward" and self.backward_mode == "uniform":
            np.add.at(out, seg, -np.log(self._n_parents[ids]))
            return out
        net = self.pf_net if direction == "forward" else self.pb_net
        mask = (self._fmask if direction == "forward" else self._bmask)[ids]
        logits = np.where(mask, net.forward(self._khot[ids]), -np.inf)
        lsm = log_softmax(logits)
        np.add.at(out, seg, lsm[np.arange(ids.size), actions])
        return out

    def refresh_caches(self, trajs: list[Trajectory]) -> None:
        stale = [t for t in trajs if t._version != self.version]
        if not stale:
            return
        segs = [t.states for t in stale]
        log_pfs = self._segment_logprobs(segs, "forward")
        log_pbs = self._segment_logprobs(segs, "backward")
        for t, f, b in zip(stale, log_pfs, log_pbs):
            t.set_cache(float(f), float(b), self.version)

    def to_json(self) -> dict:
        doc = {"kind": "hypergrid_mlp", "H": self.spec.H, "D": self.spec.D,
               "backward": self.backward_mode, "log_Z": self.log_Z,
               "pf": self.pf_net.to_json()}
        if self.pb_net is not None:
            doc["pb"] = self.pb_net.to_json()
        return doc

    @classmethod
    def from_json(cls, spec: HypergridSpec, dag: PointedDag, doc: dict
                  ) -> "HypergridMlpPolicySet":
        hidden = tuple(doc["pf"]["sizes"][1:-1])
        pol = cls(spec, dag, rng=np.random.default_rng(0), hidden=hidden,
                  backward=doc["backward"])
        pol.pf_net.params[:] = np.asarray(doc["pf"]["params"], dtype=float)
        if pol.pb_net is not None:
            pol.pb_net.params[:] = np.asarray(doc["pb"]["params"], dtype=float)
        pol.params["logZ"][0] = doc["log_Z"]
        pol.bump_version()
        return pol


# ---------------------------------------------------------------------------
# Module-level operations
# ---------------------------------------------------------------------------

def action_distribution(policy: PolicySet, state: int, direction: str,
                        eps: float = 0.0) -> np.ndarray:
    return policy.action_distribution(state, direction, eps)


def trajectory_logprob_forward(policy: PolicySet, traj: Trajectory | tuple[int, ...]) -> float:
    if isinstance(traj, Trajectory):
        return traj.log_pf(policy)
    return policy.forward_logprob(tuple(traj))


def trajectory_logprob_backward(policy: PolicySet, traj: Trajectory | tuple[int, ...]) -> float:
    if isinstance(traj, Trajectory):
        return traj.log_pb(policy)
    return policy.backward_logprob(tuple(traj))


def sample_trajectory(policy: PolicySet, behavior: BehaviorConfig, t: int,
                      rng: np.random.Generator) -> Trajectory:
    """Walk from the initial state to a terminating one under the behavior policy."""
    if behavior.mode == "epsilon_shift" and policy.dag.exit_child is None:
        raise ValueError("epsilon_shift requires an environment with an exit action")
    eps = behavior.epsilon(t)
    states = [policy.dag.initial]
    log_b = 0.0
    s = policy.dag.initial
    while not policy.dag.is_terminating(s):
        nbrs = policy.neighbors(s, "forward")
        probs = policy.action_distribution(s, "forward", eps)
        idx = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
        idx = min(idx, len(nbrs) - 1)  # guard against roundoff at the top end
        log_b += math.log(probs[idx])
        s = nbrs[idx]
        states.append(s)
    traj = Trajectory(tuple(states))
    log_pf = policy.forward_logprob(traj.states)
    log_pb = policy.backward_logprob(traj.states)
    traj.set_cache(log_pf, log_pb, policy.version)
    traj.log_behavior = log_pf if eps == 0.0 else log_b
    return traj


def sample_batch(policy: PolicySet, behavior: BehaviorConfig, t: int,
                 rng: np.random.Generator, batch_size: int) -> list[Trajectory]:
    """Batch sampling; lockstep-vectorized for MLP hypergrid policies."""
    if not isinstance(policy, HypergridMlpPolicySet):
        return [sample_trajectory(policy, behavior, t, rng) for _ in range(batch_size)]
    if behavior.mode == "epsilon_shift" and policy.dag.exit_child is None:
        raise ValueError("epsilon_shift requires an environment with an exit action")
    eps = behavior.epsilon(t)
    D = policy.spec.D
    cur = np.zeros(batch_size, dtype=int)  # current cell ids
    active = np.ones(batch_size, dtype=bool)
    log_b = np.zeros(batch_size)
    log_pf = np.zeros(batch_size)
    paths: list[list[int]] = [[policy.dag.initial] for _ in range(batch_size)]
    while np.any(active):
        idx = np.flatnonzero(active)
        ids = cur[idx]
        logits = np.where(policy._fmask[ids], policy.pf_net.forward(policy._khot[ids]),
                          -np.inf)
        lsm_pf = log_softmax(logits)
        if eps > 0.0:
            blogits = logits.copy()
            blogits[:, D] -= eps
            lsm_b = log_softmax(blogits)
        else:
            lsm_b = lsm_pf
        cdf = np.cumsum(np.exp(lsm_b), axis=1)
        cdf[:, D] = 1.0  # exit is always valid; absorbs cumsum roundoff
        choice = (cdf > rng.random(len(idx))[:, None]).argmax(axis=1)
        rows = np.arange(len(idx))
        log_b[idx] += lsm_b[rows, choice]
        log_pf[idx] += lsm_pf[rows, choice]
        new_ids = ids + policy._action_delta[choice]
        for j, i in enumerate(idx):
            paths[i].append(int(new_ids[j]))
        cur[idx] = new_ids
        active[idx[choice == D]] = False
    out = [Trajectory(tuple(p)) for p in paths]
    log_pbs = policy._segment_logprobs([t.states for t in out], "backward")
    for i, traj in enumerate(out):
        traj.set_cache(float(log_pf[i]), float(log_pbs[i]), policy.version)
        traj.log_behavior = float(log_pf[i]) if eps == 0.0 else float(log_b[i])
    return out
