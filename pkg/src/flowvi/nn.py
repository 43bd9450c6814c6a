"""A small dependency-free MLP with exact reverse-mode gradients, plus optimizers.

Hidden layers use tanh (smooth, so finite-difference checks are tight) and the
output layer is linear. Parameters live in one flat float64 vector; per-layer
weight and bias views alias into it, which lets optimizers and gradient
algebra work on plain arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


class Mlp:
    """Fully connected net: sizes[0] inputs -> tanh hidden layers -> sizes[-1] logits."""

    def __init__(self, sizes: list[int], rng: np.random.Generator | None = None,
                 params: np.ndarray | None = None):
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"bad layer sizes {sizes}")
        self.sizes = list(sizes)
        self.n_params = sum((i + 1) * o for i, o in zip(sizes[:-1], sizes[1:]))
        if params is None:
            params = np.zeros(self.n_params)
            if rng is not None:
                params[:] = self._init_params(rng)
        elif params.shape != (self.n_params,):
            raise ValueError("parameter vector has wrong length")
        self.params = params.astype(float, copy=False)
        self._weights: list[np.ndarray] = []
        self._biases: list[np.ndarray] = []
        off = 0
        for nin, nout in zip(sizes[:-1], sizes[1:]):
            self._weights.append(self.params[off:off + nin * nout].reshape(nin, nout))
            off += nin * nout
            self._biases.append(self.params[off:off + nout])
            off += nout

    def _init_params(self, rng: np.random.Generator) -> np.ndarray:
        # Kaiming-style uniform, scaled by fan-in; biases start at zero.
        chunks = []
        for nin, nout in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / math.sqrt(nin)
            chunks.append(rng.uniform(-bound, bound, nin * nout))
            chunks.append(np.zeros(nout))
        return np.concatenate(chunks)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Logits for a single input vector or a batch (rows)."""
        single = x.ndim == 1
        h = np.atleast_2d(np.asarray(x, dtype=float))
        if h.shape[1] != self.sizes[0]:
            raise ValueError(f"input width {h.shape[1]} != {self.sizes[0]}")
        last = len(self._weights) - 1
        for i, (W, b) in enumerate(zip(self._weights, self._biases)):
            h = h @ W
            h += b
            if i < last:
                np.tanh(h, out=h)
        return h[0] if single else h

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Batch forward pass keeping per-layer activations for backprop."""
        h = np.atleast_2d(np.asarray(x, dtype=float))
        acts = [h]
        last = len(self._weights) - 1
        for i, (W, b) in enumerate(zip(self._weights, self._biases)):
            h = h @ W
            h += b
            if i < last:
                np.tanh(h, out=h)
            acts.append(h)
        return acts[-1], acts

    def backward(self, acts: list[np.ndarray], upstream: np.ndarray,
                 need_input_grad: bool = True
                 ) -> tuple[np.ndarray, np.ndarray | None]:
        """Gradients of sum_rows <upstream_row, output_row>.

        Returns (flat parameter gradient, input gradient or None). ``acts``
        must come from forward_cached on the same parameters.
        """
        delta = np.atleast_2d(np.asarray(upstream, dtype=float))
        if delta.shape != acts[-1].shape:
            raise ValueError("upstream shape does not match the output")
        grad = np.empty(self.n_params)
        off = self.n_params
        for i in range(len(self._weights) - 1, -1, -1):
            W = self._weights[i]
            nin, nout = W.shape
            off -= nout
            delta.sum(axis=0, out=grad[off:off + nout])
            off -= nin * nout
            np.matmul(acts[i].T, delta, out=grad[off:off + nin * nout].reshape(nin, nout))
            if i > 0 or need_input_grad:
                delta = delta @ W.T
                if i > 0:  # tanh'
                    dtanh = np.square(acts[i])
                    np.subtract(1.0, dtanh, out=dtanh)
                    delta *= dtanh
        return grad, delta if need_input_grad else None

    def to_json(self) -> dict:
        return {"sizes": self.sizes, "params": self.params.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "Mlp":
        return cls(doc["sizes"], params=np.asarray(doc["params"], dtype=float))


def mlp_apply(net: Mlp, x: np.ndarray) -> np.ndarray:
    return net.forward(np.asarray(x, dtype=float))


def mlp_grad(net: Mlp, x: np.ndarray, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of <upstream, net(x)> w.r.t. parameters and input."""
    _, acts = net.forward_cached(np.asarray(x, dtype=float))
    grad, dx = net.backward(acts, np.atleast_2d(upstream))
    return grad, dx[0] if np.asarray(x).ndim == 1 else dx


# ---------------------------------------------------------------------------
# Optimizers (functional: return updated copies, never mutate inputs)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, n: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
             eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray
              ) -> tuple[np.ndarray, AdamState, bool]:
    """One Adam update with bias correction.

    Returns (new params, new state, skipped). A non-finite gradient skips the
    step and leaves parameters and state untouched (skipped=True).
    """
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ValueError("parameter/gradient/state shape mismatch")
    if not np.all(np.isfinite(grad)):
        return params, state, True
    t = state.step + 1
    m = state.m * state.beta1
    m += (1 - state.beta1) * grad
    v = state.v * state.beta2
    v += (1 - state.beta2) * np.square(grad)
    denom = v / (1 - state.beta2 ** t)
    np.sqrt(denom, out=denom)
    denom += state.eps
    step_vec = m / denom
    step_vec *= state.lr / (1 - state.beta1 ** t)
    return params - step_vec, replace(state, m=m, v=v, step=t), False


@dataclass(frozen=True)
class MomentumSgdState:
    velocity: np.ndarray
    lr: float
    momentum: float = 0.0

    @classmethod
    def init(cls, n: int, lr: float, momentum: float = 0.0) -> "MomentumSgdState":
        return cls(np.zeros(n), lr, momentum)


def momentum_sgd_step(state: MomentumSgdState, params: np.ndarray, grad: np.ndarray
                      ) -> tuple[np.ndarray, MomentumSgdState, bool]:
    """SGD with heavy-ball momentum; momentum 0 is plain SGD."""
    if params.shape != grad.shape or params.shape != state.velocity.shape:
        raise ValueError("parameter/gradient/state shape mismatch")
    if not np.all(np.isfinite(grad)):
        return params, state, True
    if state.momentum == 0.0:
        return params - state.lr * grad, state, False
    vel = state.momentum * state.velocity + grad
    return params - state.lr * vel, replace(state, velocity=vel), False


def cosine_epsilon(eps_init: float, t: int, t_max: int) -> float:
    """Cosine-annealed exploration shift: eps_init at t=0, 0 from t_max on."""
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    if eps_init < 0:
        raise ValueError("eps_init must be nonnegative")
    frac = min(t, t_max) / t_max
    return eps_init * 0.5 * (1.0 + math.cos(math.pi * frac))
