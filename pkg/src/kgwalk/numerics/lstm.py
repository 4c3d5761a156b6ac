"""LSTM cells built from tape primitives."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

GATES = ("input", "forget", "output", "candidate")


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, W: Tensor, U: Tensor, b: Tensor):
    """One LSTM step.

    ``W`` is ``(input, 4*hidden)``, ``U`` is ``(hidden, 4*hidden)`` and ``b`` is
    ``(4*hidden,)``; gate blocks are ordered input, forget, output, candidate.

    Returns:
        ``(h, c)`` with ``c = f*c_prev + i*g`` and ``h = o*tanh(c)``.
    """
    hidden = h_prev.shape[-1]
    if W.shape != (x.shape[-1], 4 * hidden) or U.shape != (hidden, 4 * hidden) or b.shape != (4 * hidden,):
        raise ShapeError(
            f"LSTM weights W{W.shape} U{U.shape} b{b.shape} do not fit input {x.shape[-1]} and hidden {hidden}"
        )
    if c_prev.shape != h_prev.shape:
        raise ShapeError(f"cell state {c_prev.shape} and hidden state {h_prev.shape} differ")
    gates = T.add(T.add(T.matmul(x, W), T.matmul(h_prev, U)), b)
    i, f, o, g = T.split(gates, [hidden] * 4)
    i, f, o, g = T.sigmoid(i), T.sigmoid(f), T.sigmoid(o), T.tanh(g)
    c = T.add(T.mul(f, c_prev), T.mul(i, g))
    h = T.mul(o, T.tanh(c))
    return h, c


def init_lstm_weights(rng: np.random.Generator, n_in: int, hidden: int, forget_bias: float = 1.0):
    """Xavier-uniform matrices, zero biases except the forget gate."""
    W = xavier_uniform(rng, n_in, 4 * hidden)
    U = xavier_uniform(rng, hidden, 4 * hidden)
    b = np.zeros(4 * hidden)
    b[hidden : 2 * hidden] = forget_bias
    return W, U, b


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))
