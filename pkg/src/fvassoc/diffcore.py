"""Dense float64 numerics with hand-derived gradients.

All training math runs on 2-D row-major float64 numpy arrays. Randomness
flows through `make_rng(seed)`, which is a numpy PCG64 generator: the same
seed yields the same stream on every platform, so training runs and dropout
masks are bit-reproducible.

Includes a central finite-difference oracle used by the test suite to check
every analytic gradient in the project.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    DegenerateVectorError,
    NumericError,
    ShapeError,
)

EPS_NORM = 1e-12


def make_rng(seed):
    """Deterministic PCG64 generator for the given 64-bit seed."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_mat(x):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={a.ndim}")
    return a


def check_finite(x, what="result"):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def matmul(a, b):
    a = as_mat(a)
    b = as_mat(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape} incompatible")
    return check_finite(a @ b, "matmul output")


def matmul_backward(a, b, grad_out):
    """Gradients of matmul: grad_a = g @ b.T, grad_b = a.T @ g."""
    a = as_mat(a)
    b = as_mat(b)
    g = as_mat(grad_out)
    if g.shape != (a.shape[0], b.shape[1]):
        raise ShapeError(
            f"matmul_backward: grad {g.shape} does not match output "
            f"shape {(a.shape[0], b.shape[1])}"
        )
    return g @ b.T, a.T @ g


def l2_normalize_rows(x):
    """Divide each row by its Euclidean norm.

    Rows with norm <= EPS_NORM are rejected: there is no meaningful
    direction to normalize onto.
    """
    x = as_mat(x)
    norms = np.linalg.norm(x, axis=1)
    bad = np.nonzero(norms <= EPS_NORM)[0]
    if bad.size:
        raise DegenerateVectorError(f"row {bad[0]} has norm {norms[bad[0]]:g}")
    return x / norms[:, None]


def l2_normalize_rows_backward(x, grad_out):
    """Jacobian-vector product of row normalization.

    Per row: grad_x = (g - (g . u) u) / ||x||  with u = x / ||x||.
    """
    x = as_mat(x)
    g = as_mat(grad_out)
    if g.shape != x.shape:
        raise ShapeError(f"normalize backward: grad {g.shape} vs input {x.shape}")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    bad = np.nonzero(norms[:, 0] <= EPS_NORM)[0]
    if bad.size:
        raise DegenerateVectorError(f"row {bad[0]} has norm {norms[bad[0], 0]:g}")
    u = x / norms
    return (g - (g * u).sum(axis=1, keepdims=True) * u) / norms


def dropout_mask(rng, shape, p_drop):
    """Inverted-dropout mask: 0 with probability p_drop, else 1/(1-p_drop).

    Eval mode never calls this; the eval path is exactly the identity.
    """
    if not 0.0 <= p_drop < 1.0:
        raise ConfigError(f"p_drop must be in [0, 1), got {p_drop}")
    if p_drop == 0.0:
        return np.ones(shape, dtype=np.float64)
    keep = rng.random(shape) >= p_drop
    return keep.astype(np.float64) / (1.0 - p_drop)


def apply_dropout(x, mask):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != mask.shape:
        raise ShapeError(f"dropout: input {x.shape} vs mask {mask.shape}")
    return x * mask


@dataclass
class AdamState:
    """Per-parameter Adam moments; step counter increments once per update."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            m=np.zeros_like(param, dtype=np.float64),
            v=np.zeros_like(param, dtype=np.float64),
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(param, grad, state):
    """One Adam update with bias correction. Returns the new parameter.

    Mutates `state` (moments and step count). Deterministic.
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ShapeError(
            f"adam_step: param {param.shape}, grad {grad.shape}, "
            f"state {state.m.shape}"
        )
    check_finite(grad, "adam gradient")
    state.step += 1
    t = state.step
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**t)
    v_hat = state.v / (1.0 - state.beta2**t)
    return param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def finite_difference_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar function of a matrix."""
    if h <= 0:
        raise ConfigError(f"finite difference step must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        fp = f(xp)
        fm = f(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value near index {idx}")
        grad[idx] = (fp - fm) / (2.0 * h)
        it.iternext()
    return grad


def rel_error(a, b):
    """Relative error ||a - b|| / max(||a||, ||b||) between two arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
