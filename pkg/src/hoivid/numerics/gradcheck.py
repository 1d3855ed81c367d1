"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .rng import stream


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``|a-b| / max(|a|, |b|)`` in the 2-norm; 0 when both vanish."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom < 1e-300:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(fn: Callable[..., T.Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    grads = []
    for i, x in enumerate(inputs):
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = fn(*[T.Tensor(a) for a in inputs]).item()
            flat[j] = orig - h
            fm = fn(*[T.Tensor(a) for a in inputs]).item()
            flat[j] = orig
            gflat[j] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def check(fn: Callable[..., T.Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Worst relative error between analytic and numeric gradients of scalar ``fn``."""
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [T.Tensor(x.copy(), requires_grad=True) for x in inputs]
    analytic = T.grad(fn(*leaves), leaves)
    numeric = numeric_grad(fn, inputs, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def _proj(rng, shape):
    # Fixed random projection so every op reduces to a scalar with a generic gradient.
    return rng.standard_normal(shape)


@dataclass
class OpCase:
    name: str
    shapes: tuple
    fn: Callable  # (rng) -> Callable[..., Tensor]


def _scalarize(out: T.Tensor, w: np.ndarray) -> T.Tensor:
    return T.sum_(T.mul(out, T.Tensor(w)))


def _case(name, shapes, build):
    return OpCase(name, shapes, build)


def op_cases() -> list[OpCase]:
    """One case per differentiable op; ``build(rng)`` returns the scalar function."""

    def wrap(op, out_shape):
        def build(rng):
            w = _proj(rng, out_shape)
            return lambda *xs: _scalarize(op(*xs), w)

        return build

    return [
        _case("add", [(3, 4), (4,)], wrap(T.add, (3, 4))),
        _case("sub", [(3, 4), (3, 1)], wrap(T.sub, (3, 4))),
        _case("mul", [(2, 3, 4), (3, 4)], wrap(T.mul, (2, 3, 4))),
        _case("scale", [(5,)], wrap(lambda x: T.scale(x, -1.7), (5,))),
        _case("add_scalar", [(5,)], wrap(lambda x: T.add_scalar(x, 0.3), (5,))),
        _case("square", [(4, 3)], wrap(T.square, (4, 3))),
        _case("exp", [(4, 3)], wrap(T.exp, (4, 3))),
        _case("tanh", [(4, 3)], wrap(T.tanh, (4, 3))),
        _case("gelu", [(4, 3)], wrap(T.gelu, (4, 3))),
        _case("matmul", [(2, 3, 4), (4, 5)], wrap(T.matmul, (2, 3, 5))),
        _case("linear", [(2, 3, 4), (4, 5), (5,)], wrap(T.linear, (2, 3, 5))),
        _case("transpose", [(2, 3, 4)], wrap(lambda x: T.transpose(x, (2, 0, 1)), (4, 2, 3))),
        _case("reshape", [(2, 6)], wrap(lambda x: T.reshape(x, (3, 4)), (3, 4))),
        _case("concat", [(2, 3), (2, 2)], wrap(lambda a, b: T.concat([a, b], axis=1), (2, 5))),
        _case("split", [(2, 5)], wrap(lambda x: T.concat(T.split(x, [2, 3], axis=1)[::-1], axis=1), (2, 5))),
        _case("slice", [(4, 5)], wrap(lambda x: x[1:3, ::2], (2, 3))),
        _case("broadcast_to", [(1, 4)], wrap(lambda x: T.broadcast_to(x, (3, 4)), (3, 4))),
        _case("repeat", [(2, 3)], wrap(lambda x: T.repeat(x, 2, axis=1), (2, 6))),
        _case("sum", [(3, 4)], wrap(lambda x: T.sum_(x, axis=0), (4,))),
        _case("mean", [(3, 4)], wrap(lambda x: T.mean(x, axis=1, keepdims=True), (3, 1))),
        _case("softmax", [(3, 5)], wrap(lambda x: T.softmax(x, axis=-1), (3, 5))),
        _case("layer_norm", [(3, 6)], wrap(T.layer_norm, (3, 6))),
        _case("attention", [(2, 4, 3), (2, 5, 3), (2, 5, 2)], wrap(T.attention, (2, 4, 2))),
    ]


def run_op_suite(n_cases: int = 20, seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Worst relative error per op over ``n_cases`` random draws."""
    worst: dict[str, float] = {}
    for case in op_cases():
        errs = []
        for i in range(n_cases):
            rng = stream(seed, "gradcheck", case.name, i)
            inputs = [rng.standard_normal(s) for s in case.shapes]
            errs.append(check(case.fn(rng), inputs, h))
        worst[case.name] = max(errs)
    return worst
