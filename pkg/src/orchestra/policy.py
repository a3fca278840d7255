"""Fully connected tanh networks with hand-derived gradients and Adam.

Actors map an observation to one logit per action; the critic maps the global
state to a scalar value. Weight matrices are stored (fan_in, fan_out) so a
layer computes ``h @ W + b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from orchestra import kernels
from orchestra.errors import ConfigError, ContractViolation, NumericalError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
CHECKPOINT_VERSION = 1


@dataclass
class NetParams:
    architecture: tuple
    weights: list
    biases: list

    def arrays(self):
        for W, b in zip(self.weights, self.biases):
            yield W
            yield b

    def copy(self) -> "NetParams":
        return NetParams(self.architecture, [W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "NetParams":
        return NetParams(self.architecture, [np.zeros_like(W) for W in self.weights],
                         [np.zeros_like(b) for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec) -> "NetParams":
        out, pos = self.zeros_like(), 0
        for dst in out.arrays():
            dst[...] = np.reshape(vec[pos:pos + dst.size], dst.shape)
            pos += dst.size
        return out

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def scaled(self, k) -> "NetParams":
        return NetParams(self.architecture, [k * W for W in self.weights], [k * b for b in self.biases])

    def __add__(self, other):
        return NetParams(self.architecture, [a + b for a, b in zip(self.weights, other.weights)],
                         [a + b for a, b in zip(self.biases, other.biases)])


def _check_architecture(architecture):
    arch = tuple(architecture)
    if len(arch) < 2 or any(isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 1 for n in arch):
        raise ConfigError(f"invalid architecture {architecture!r}")
    return tuple(int(n) for n in arch)


def init_params(architecture, seed) -> NetParams:
    """Glorot-uniform weights, zero biases."""
    arch = _check_architecture(architecture)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return NetParams(arch, weights, biases)


def zero_params(architecture) -> NetParams:
    arch = _check_architecture(architecture)
    return NetParams(arch, [np.zeros((a, b)) for a, b in zip(arch[:-1], arch[1:])], [np.zeros(b) for b in arch[1:]])


def _check_input(params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.architecture[0]:
        raise ContractViolation(f"input has {x.shape[-1]} features, network expects {params.architecture[0]}")
    return x


def forward_actor(params: NetParams, features) -> np.ndarray:
    x = _check_input(params, features)
    return kernels.mlp_forward(params.weights, params.biases, x)


def forward_critic(params: NetParams, global_features) -> float:
    if params.architecture[-1] != 1:
        raise ContractViolation("critic network must have a single output")
    x = _check_input(params, global_features)
    return float(kernels.mlp_forward(params.weights, params.biases, x)[0])


# -- batched forward / backward ---------------------------------------------


def forward_batch(params: NetParams, X):
    """Return (layer inputs, output) for a (B, in) batch; layer inputs feed ``backward_batch``."""
    h = _check_input(params, X)
    acts = [h]
    last = len(params.weights) - 1
    for k in range(last):
        h = np.tanh(h @ params.weights[k] + params.biases[k])
        acts.append(h)
    return acts, h @ params.weights[last] + params.biases[last]


def backward_batch(params: NetParams, acts, d_out) -> NetParams:
    """Gradient of ``sum(d_out * output)`` with respect to every parameter."""
    grads_W, grads_b = [], []
    delta = d_out
    for k in range(len(params.weights) - 1, -1, -1):
        grads_W.append(acts[k].T @ delta)
        grads_b.append(delta.sum(axis=0))
        if k:
            delta = (delta @ params.weights[k].T) * (1.0 - acts[k] ** 2)
    return NetParams(params.architecture, grads_W[::-1], grads_b[::-1])


def masked_log_softmax(logits, mask):
    """Row-wise log-probabilities; illegal entries are -inf."""
    legal = np.asarray(mask, dtype=bool)
    if not np.all(legal.any(axis=-1)):
        raise ContractViolation("a mask row has no legal action")
    z = np.where(legal, logits, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    return z - lse


def policy_gradient(params: NetParams, X, masks, actions, weights):
    """Gradient of ``mean_b weights_b * log pi(actions_b | X_b)`` plus the per-row log-probs."""
    X = np.atleast_2d(X)
    masks = np.atleast_2d(np.asarray(masks, dtype=bool))
    actions = np.atleast_1d(np.asarray(actions, dtype=np.int64))
    weights = np.atleast_1d(np.asarray(weights, dtype=float))
    rows = np.arange(len(actions))
    if not np.all(masks[rows, actions]):
        raise ContractViolation("gradient requested for an illegal action")
    acts, logits = forward_batch(params, X)
    logp = masked_log_softmax(logits, masks)
    probs = np.exp(logp)
    d_logits = -probs
    d_logits[rows, actions] += 1.0
    d_logits *= (weights / len(actions))[:, None]
    return backward_batch(params, acts, d_logits), logp[rows, actions]


def grad_log_prob(params: NetParams, features, mask, action_index) -> NetParams:
    """Analytic gradient of log pi(action | features) under the masked softmax."""
    grad, _ = policy_gradient(params, features, mask, [action_index], [1.0])
    return grad


def grad_value(params: NetParams, global_features) -> NetParams:
    acts, _ = forward_batch(params, np.atleast_2d(global_features))
    return backward_batch(params, acts, np.ones((1, 1)))


def value_loss_and_grad(params: NetParams, G, targets):
    """Mean squared error between V(G) and fixed targets, and its gradient."""
    acts, out = forward_batch(params, np.atleast_2d(G))
    err = out[:, 0] - np.asarray(targets, dtype=float)
    loss = float(np.mean(err ** 2))
    if not math.isfinite(loss):
        raise NumericalError("critic loss is not finite")
    d_out = (2.0 / len(err)) * err[:, None]
    return loss, backward_batch(params, acts, d_out)


def values(params: NetParams, G) -> np.ndarray:
    return forward_batch(params, np.atleast_2d(G))[1][:, 0]


# -- Adam --------------------------------------------------------------------


@dataclass
class AdamState:
    m: NetParams
    v: NetParams
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def adam_init(params: NetParams) -> AdamState:
    return AdamState(params.zeros_like(), params.zeros_like())


def adam_step(params: NetParams, grads: NetParams, state: AdamState, lr: float):
    """One bias-corrected Adam descent step; returns new (params, state).

    Callers ascend by passing negated gradients.
    """
    if not grads.is_finite():
        raise NumericalError("non-finite gradient")
    if grads.architecture != params.architecture:
        raise ContractViolation("gradient shape does not match parameters")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = params.zeros_like(), params.zeros_like(), params.zeros_like()
    for p, g, m, v, p2, m2, v2 in zip(params.arrays(), grads.arrays(), state.m.arrays(), state.v.arrays(),
                                      new_p.arrays(), new_m.arrays(), new_v.arrays()):
        m2[...] = b1 * m + (1.0 - b1) * g
        v2[...] = b2 * v + (1.0 - b2) * g * g
        p2[...] = p - lr * (m2 / c1) / (np.sqrt(v2 / c2) + state.eps)
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.eps)


# -- learning-rate schedule --------------------------------------------------


@dataclass(frozen=True)
class LrSchedule:
    initial: float = 1e-4
    floor: float = 1e-5
    total_epochs: int = 1

    def __post_init__(self):
        if not 0 <= self.floor <= self.initial:
            raise ConfigError("learning-rate floor must lie in [0, initial]")
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")


def lr_at(schedule: LrSchedule, epoch) -> float:
    """Linear anneal from ``initial`` at epoch 0 to ``floor`` at ``total_epochs``, then flat."""
    if epoch < 0:
        raise ContractViolation("epoch must be >= 0")
    frac = min(epoch / schedule.total_epochs, 1.0)
    return schedule.initial + (schedule.floor - schedule.initial) * frac


# -- serialization -----------------------------------------------------------


def params_to_dict(params: NetParams):
    return {
        "architecture": list(params.architecture),
        "weights": [W.ravel().tolist() for W in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }


def params_from_dict(doc) -> NetParams:
    arch = _check_architecture(doc["architecture"])
    shapes = list(zip(arch[:-1], arch[1:]))
    if len(doc["weights"]) != len(shapes) or len(doc["biases"]) != len(shapes):
        raise ConfigError("checkpoint layer count does not match architecture")
    weights, biases = [], []
    for (a, b), W, bias in zip(shapes, doc["weights"], doc["biases"]):
        if len(W) != a * b or len(bias) != b:
            raise ConfigError(f"checkpoint layer shape mismatch for ({a}, {b})")
        weights.append(np.array(W, dtype=float).reshape(a, b))
        biases.append(np.array(bias, dtype=float))
    params = NetParams(arch, weights, biases)
    if not params.is_finite():
        raise ConfigError("checkpoint holds non-finite parameters")
    return params


def adam_to_dict(state: AdamState):
    return {"t": state.t, "m": params_to_dict(state.m), "v": params_to_dict(state.v),
            "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps}


def adam_from_dict(doc) -> AdamState:
    return AdamState(params_from_dict(doc["m"]), params_from_dict(doc["v"]), int(doc["t"]),
                     float(doc["beta1"]), float(doc["beta2"]), float(doc["eps"]))
