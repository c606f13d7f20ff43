"""Finite-difference gradient verification for every differentiable op.

The harness replays a forward closure under central differences (h=1e-5,
64-bit) and compares against the tape's analytic gradients. Suites are
organized by pipeline layer so the CLI can run them selectively; the
acceptance gate runs them all.
"""

from __future__ import annotations

from typing import Callable, Dict, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor, backward

DEFAULT_H = 1e-5
TOLERANCE = 1e-4


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = DEFAULT_H) -> np.ndarray:
    """Central finite differences of the scalar f() w.r.t. every element of x."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise error, scaled by the gradient magnitude of the tensor."""
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), 1e-6)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def check(f: Callable[[], Tensor], wrt: Sequence[Tensor], h: float = DEFAULT_H) -> float:
    """Max relative error between tape and finite-difference gradients of f.

    f must rebuild the computation from the current values of the tensors in
    ``wrt`` on every call.
    """
    for t in wrt:
        t.grad = None
        t.requires_grad = True
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    worst = 0.0
    for t in wrt:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_grad(f, t, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _weighted_sum(out: Tensor, seed: int) -> Tensor:
    """Project a tensor output to a scalar with a fixed random weighting.

    A plain sum can hide sign errors that cancel; the random projection
    exercises every output coordinate independently. The weighting depends
    only on the seed so the closure stays deterministic across FD replays.
    """
    r = Tensor(np.random.default_rng([seed, 0xA11CE]).normal(size=out.shape))
    return T.sum_all(T.mul(out, r))


# ---------------------------------------------------------------------------
# Suite registry: op name -> callable(seed) -> max relative error


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))


def _check_linear(seed):
    rng = _rng(seed)
    x = Tensor(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(4, 2)))
    b = Tensor(rng.normal(size=2))
    return check(lambda: _weighted_sum(T.linear(x, w, b), seed), [x, w, b])


def _check_layer_norm(seed):
    rng = _rng(seed)
    x = Tensor(rng.normal(size=(5, 6)))
    gain = Tensor(rng.normal(size=6))
    bias = Tensor(rng.normal(size=6))
    return check(lambda: _weighted_sum(T.layer_norm(x, gain, bias), seed), [x, gain, bias])


def _check_silu(seed):
    rng = _rng(seed)
    x = Tensor(rng.normal(size=12))
    return check(lambda: _weighted_sum(T.silu(x), seed), [x])


def _check_softplus(seed):
    rng = _rng(seed)
    x = Tensor(rng.normal(size=12))
    return check(lambda: _weighted_sum(T.softplus(x), seed), [x])


def _check_sigmoid(seed):
    rng = _rng(seed)
    x = Tensor(rng.normal(size=12))
    return check(lambda: _weighted_sum(T.sigmoid(x), seed), [x])


def _check_exp(seed):
    rng = _rng(seed)
    x = Tensor(rng.normal(size=12))
    return check(lambda: _weighted_sum(T.exp(x), seed), [x])


def _check_sqrt(seed):
    rng = _rng(seed)
    x = Tensor(np.abs(rng.normal(size=12)) + 0.5)
    return check(lambda: _weighted_sum(T.sqrt(x), seed), [x])


def _check_mul_broadcast(seed):
    rng = _rng(seed)
    x = Tensor(rng.normal(size=(4, 5)))
    c = Tensor(rng.normal(size=5))
    return check(lambda: _weighted_sum(T.mul(x, c), seed), [x, c])


def _check_div(seed):
    rng = _rng(seed)
    a = Tensor(rng.normal(size=8))
    b = Tensor(np.abs(rng.normal(size=8)) + 0.5)
    return check(lambda: _weighted_sum(T.div(a, b), seed), [a, b])


def _check_matmul(seed):
    rng = _rng(seed)
    a = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(4, 5)))
    return check(lambda: _weighted_sum(T.matmul(a, b), seed), [a, b])


def _check_dot(seed):
    rng = _rng(seed)
    a = Tensor(rng.normal(size=7))
    b = Tensor(rng.normal(size=7))
    return check(lambda: T.dot(a, b), [a, b])


def _check_spatial_mean(seed):
    rng = _rng(seed)
    x = Tensor(rng.normal(size=(4, 3, 5)))
    return check(lambda: _weighted_sum(T.spatial_mean(x), seed), [x])


def _check_softmax(seed):
    rng = _rng(seed)
    x = Tensor(rng.normal(size=(4, 6)))
    return check(lambda: _weighted_sum(T.softmax_last(x), seed), [x])


def _check_l2_normalize(seed):
    rng = _rng(seed)
    x = Tensor(rng.normal(size=9) + 0.1)
    return check(lambda: _weighted_sum(T.l2_normalize(x), seed), [x])


def _check_site_l2_normalize(seed):
    rng = _rng(seed)
    x = Tensor(rng.normal(size=(3, 4, 6)))
    return check(lambda: _weighted_sum(T.site_l2_normalize(x), seed), [x])


def _check_narrow(seed):
    rng = _rng(seed)
    x = Tensor(rng.normal(size=10))
    return check(lambda: _weighted_sum(T.narrow(x, 2, 5), seed), [x])


def _check_conv2d(seed):
    rng = _rng(seed)
    x = Tensor(rng.normal(size=(6, 6, 3)))
    w = Tensor(rng.normal(size=(4, 4, 3, 2)) * 0.5)
    b = Tensor(rng.normal(size=2))
    return check(lambda: _weighted_sum(T.conv2d(x, w, b, stride=2, padding=1), seed), [x, w, b])


def _check_conv2d_transpose(seed):
    rng = _rng(seed)
    x = Tensor(rng.normal(size=(3, 3, 4)))
    w = Tensor(rng.normal(size=(4, 4, 2, 4)) * 0.5)
    b = Tensor(rng.normal(size=2))
    return check(
        lambda: _weighted_sum(T.conv2d_transpose(x, w, b, stride=2, padding=1), seed), [x, w, b]
    )


TENSOR_CHECKS: Dict[str, Callable[[int], float]] = {
    "linear": _check_linear,
    "layer_norm": _check_layer_norm,
    "silu": _check_silu,
    "softplus": _check_softplus,
    "sigmoid": _check_sigmoid,
    "exp": _check_exp,
    "sqrt": _check_sqrt,
    "mul_broadcast": _check_mul_broadcast,
    "div": _check_div,
    "matmul": _check_matmul,
    "dot": _check_dot,
    "spatial_mean": _check_spatial_mean,
    "softmax_last": _check_softmax,
    "l2_normalize": _check_l2_normalize,
    "site_l2_normalize": _check_site_l2_normalize,
    "narrow": _check_narrow,
    "conv2d": _check_conv2d,
    "conv2d_transpose": _check_conv2d_transpose,
}


def _suites() -> Dict[str, Dict[str, Callable[[int], float]]]:
    # Imported lazily: the upper-layer modules import this one for `check`.
    from . import fusion as fusion_mod
    from . import losses as losses_mod
    from . import ssm as ssm_mod

    return {
        "tensor": TENSOR_CHECKS,
        "ssm": ssm_mod.GRAD_CHECKS,
        "fusion": fusion_mod.GRAD_CHECKS,
        "losses": losses_mod.GRAD_CHECKS,
    }


def run_suite(module: str = "all", seed: int = 0, instances: int = 20) -> Dict[str, float]:
    """Run the finite-difference suite; returns max relative error per op.

    Each op is exercised on ``instances`` distinct seeded inputs.
    """
    suites = _suites()
    if module == "all":
        selected = {}
        for ops in suites.values():
            selected.update(ops)
    elif module in suites:
        selected = suites[module]
    else:
        raise ValueError(f"unknown gradcheck module {module!r}")
    results: Dict[str, float] = {}
    for name, fn in selected.items():
        worst = 0.0
        for i in range(instances):
            worst = max(worst, fn(seed + i))
        results[name] = worst
    return results
