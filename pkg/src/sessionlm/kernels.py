"""Hot numeric kernels with numba-compiled and pure-numpy implementations.

The numba path is used when numba imports cleanly and the environment
variable ``SESSIONLM_NUMBA`` is not set to ``0``. Both paths compute the
same accumulation order, so a run is deterministic for a fixed backend.
``benchmarks/bench_kernels.py`` compares the two.
"""

import os

import numpy as np

USE_NUMBA = os.environ.get("SESSIONLM_NUMBA", "1") != "0"

if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:
        USE_NUMBA = False


def _scatter_add_rows_np(out, indices, rows):
    np.add.at(out, indices, rows)


def _adamw_update_np(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, step):
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    bias1 = 1.0 - beta1**step
    bias2 = 1.0 - beta2**step
    param -= lr * weight_decay * param
    param -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)


if USE_NUMBA:

    @njit(cache=True)
    def _scatter_add_rows_nb(out, indices, rows):  # pragma: no cover - jitted
        for i in range(indices.shape[0]):
            row = indices[i]
            for j in range(rows.shape[1]):
                out[row, j] += rows[i, j]

    @njit(cache=True)
    def _adamw_update_nb(
        param, grad, m, v, lr, beta1, beta2, eps, weight_decay, step
    ):  # pragma: no cover - jitted
        bias1 = 1.0 - beta1**step
        bias2 = 1.0 - beta2**step
        for i in range(param.shape[0]):
            g = grad[i]
            m[i] = beta1 * m[i] + (1.0 - beta1) * g
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
            param[i] -= lr * weight_decay * param[i]
            param[i] -= lr * (m[i] / bias1) / (np.sqrt(v[i] / bias2) + eps)


def scatter_add_rows(out, indices, rows):
    """Accumulate ``rows[i]`` into ``out[indices[i]]`` for every i, in order.

    Backward pass of an embedding lookup; repeated indices sum.
    """
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    rows = np.ascontiguousarray(rows)
    if USE_NUMBA:
        _scatter_add_rows_nb(out, indices, rows)
    else:
        _scatter_add_rows_np(out, indices, rows)


def adamw_update(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, step):
    """In-place decoupled-weight-decay Adam update on flat views.

    ``param``, ``grad``, ``m``, ``v`` must be 1-d and of the same dtype;
    callers pass ``tensor.reshape(-1)`` views. ``step`` is the 1-based update
    count used for bias correction.
    """
    if USE_NUMBA:
        _adamw_update_nb(
            param, grad, m, v, lr, beta1, beta2, eps, weight_decay, step
        )
    else:
        _adamw_update_np(
            param, grad, m, v, lr, beta1, beta2, eps, weight_decay, step
        )


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
