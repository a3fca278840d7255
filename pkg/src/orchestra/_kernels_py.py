"""Pure numpy implementations of the rollout hot path.

Mirrors ``orchestra._kernels`` function for function; used when the compiled
extension is unavailable or ``ORCHESTRA_PURE_PYTHON=1``.
"""

import numpy as np

FIT_TOL = 1e-12


def mlp_forward(weights, biases, x):
    """tanh hidden layers, linear output; ``weights[k]`` is (fan_in, fan_out)."""
    h = np.asarray(x, dtype=np.float64)
    last = len(weights) - 1
    for k in range(last):
        h = np.tanh(h @ weights[k] + biases[k])
    return h @ weights[last] + biases[last]


def masked_softmax(logits, mask):
    legal = np.asarray(mask, dtype=bool)
    out = np.zeros(len(logits))
    z = np.asarray(logits, dtype=np.float64)[legal]
    if z.size == 0:
        raise ValueError("mask has no legal action")
    e = np.exp(z - z.max())
    out[legal] = e / e.sum()
    return out


def sample_index(probs, u):
    """Inverse-CDF draw; never returns a zero-probability index."""
    c = np.cumsum(probs)
    i = int(np.searchsorted(c, u * c[-1], side="right"))
    n = len(probs)
    if i >= n:
        i = n - 1
    while probs[i] == 0.0 and i > 0:
        i -= 1
    while probs[i] == 0.0:
        i += 1
    return i


def fits(residual, demand, active):
    ok = np.all(residual + FIT_TOL >= demand, axis=1) & np.asarray(active, dtype=bool)
    return ok.astype(np.uint8)
