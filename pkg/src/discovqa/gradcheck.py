"""Finite-difference check of every differentiable op and the full model path.

Each case builds a scalar from freshly drawn inputs and compares
``backward`` with central differences. :func:`run_suite` reports the worst
relative error per case over a range of seeds.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .model import DisCoVQA
from .quality import RemapStats, mae_loss, remap, remap_batch
from .stde import stde_tokens
from .tct import TsfSelection
from .tensor import Tensor, grad_check

TOLERANCE = 1e-4


def _rng(seed: int, salt: int) -> np.random.Generator:
    return np.random.default_rng([seed, salt])


def _away_from_zero(x: np.ndarray) -> np.ndarray:
    return np.where(np.abs(x) < 1e-2, 0.5, x)


def _unary(op: Callable[[Tensor], Tensor], shape=(3, 4), positive=False):
    def build(rng):
        x = rng.standard_normal(shape)
        if positive:
            x = np.abs(x) + 0.5
        w = rng.standard_normal(op(Tensor(x)).shape)
        return (lambda a: T.sum_(T.mul(op(a), Tensor(w)))), [Tensor(x)]
    return build


def _binary(op, shape_a=(3, 4), shape_b=(3, 4), positive_b=False):
    def build(rng):
        a, b = rng.standard_normal(shape_a), rng.standard_normal(shape_b)
        if positive_b:
            b = np.abs(b) + 0.5
        w = rng.standard_normal(op(Tensor(a), Tensor(b)).shape)
        return (lambda x, y: T.sum_(T.mul(op(x, y), Tensor(w)))), [Tensor(a), Tensor(b)]
    return build


def _abs(rng):
    x = _away_from_zero(rng.standard_normal((3, 4)))
    w = rng.standard_normal((3, 4))
    return (lambda a: T.sum_(T.mul(T.abs_(a), Tensor(w)))), [Tensor(x)]


def _layer_norm(rng):
    x, g, b = rng.standard_normal((3, 5)), rng.standard_normal(5), rng.standard_normal(5)
    w = rng.standard_normal((3, 5))
    return (lambda x, g, b: T.sum_(T.mul(T.layer_norm(x, g, b), Tensor(w)))), [Tensor(x), Tensor(g), Tensor(b)]


def _stack(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal(4)
    w = rng.standard_normal(2)
    return (lambda x, y: T.sum_(T.mul(T.stack([T.sum_(T.mul(x, x)), T.mean(y)]), Tensor(w)))), [Tensor(a), Tensor(b)]


def _linear(rng):
    x, wt, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)
    w = rng.standard_normal((3, 2))
    return (lambda x, wt, b: T.sum_(T.mul(T.linear(x, wt, b), Tensor(w)))), [Tensor(x), Tensor(wt), Tensor(b)]


def _expand(rng):
    x = rng.standard_normal(())
    w = rng.standard_normal(4)
    return (lambda a: T.sum_(T.mul(T.expand(a, (4,)), Tensor(w)))), [Tensor(x)]


def _mae(rng):
    q = rng.standard_normal(6)
    s = q + np.where(rng.random(6) < 0.5, -1.0, 1.0) * (0.1 + rng.random(6))
    return (lambda q: mae_loss(q, s)), [Tensor(q)]


def _remap(rng):
    q = rng.standard_normal(6)
    w = rng.standard_normal(6)
    return (lambda q: T.sum_(T.mul(remap_batch(q, (1.0, 5.0)), Tensor(w)))), [Tensor(q)]


COMPOSITION_CONFIG = TrainConfig(width=8, hidden=4, heads=2, s0=3)
COMPOSITION_CHANNELS = (3, 4)


def _composition(rng):
    """One clip through STDE tokens, head, TCT, aggregation, remap and MAE."""
    model = DisCoVQA(COMPOSITION_CONFIG, COMPOSITION_CHANNELS, seed=int(rng.integers(2**31)))
    for _, p in model.named_parameters():
        if p.data.ndim == 1:
            p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    levels = [Tensor(rng.standard_normal((5, c))) for c in COMPOSITION_CHANNELS]
    selection = TsfSelection(3, (0, 2, 4))
    stats = RemapStats(float(rng.standard_normal()), 0.5 + float(rng.random()), 1.0, 5.0)
    named = dict(model.named_parameters())
    checked = ["head.l1.bias", "head.l2.weight", "tct.reduce.bias", "tct.encoder.0.ln1_g", "tct.encoder.1.ff1_b",
               "tct.encoder.3.ln2_b", "tct.decoder.ln1_g", "tct.decoder.ff2_b", "tct.decoder_out.wq", "tct.l3.weight",
               "tct.l4.weight"]

    def f(*_):
        q = model.forward_tokens(stde_tokens(levels), selection=selection).q
        # the label sits outside the remap range, away from the kink of |.|
        return T.add(mae_loss(remap(T.reshape(q, (1,)), stats), [0.5]), T.scale(q, 0.3))

    return f, levels + [named[k] for k in checked]


CASES: dict[str, Callable] = {
    "add": _binary(lambda *a: T.add(*a)),
    "sub": _binary(lambda *a: T.sub(*a)),
    "mul": _binary(lambda *a: T.mul(*a)),
    "div": _binary(T.div, positive_b=True),
    "scale": _unary(lambda a: T.scale(a, -2.5)),
    "shift": _unary(lambda a: T.shift(a, 0.3)),
    "sqrt": _unary(lambda *a: T.sqrt(*a), positive=True),
    "abs": _abs,
    "exp": _unary(lambda *a: T.exp(*a)),
    "sigmoid": _unary(lambda *a: T.sigmoid(*a)),
    "gelu": _unary(lambda *a: T.gelu(*a)),
    "matmul": _binary(lambda *a: T.matmul(*a), (3, 4), (4, 2)),
    "token_matmul": _binary(lambda *a: T.token_matmul(*a), (3, 4), (4, 2)),
    "transpose": _unary(lambda *a: T.transpose(*a)),
    "add_row": _binary(lambda *a: T.add_row(*a), (3, 4), (4,)),
    "linear": _linear,
    "sum": _unary(lambda a: T.sum_(a, axis=0)),
    "mean": _unary(lambda a: T.mean(a, axis=1, keepdims=True)),
    "concat": _binary(lambda a, b: T.concat([a, b], axis=1), (3, 2), (3, 3)),
    "stack": _stack,
    "expand": _expand,
    "take": _unary(lambda a: T.take(a, [2, 0, 2])),
    "columns": _unary(lambda a: T.columns(a, 1, 3)),
    "reshape": _unary(lambda a: T.reshape(a, (2, 6))),
    "softmax_rows": _unary(lambda *a: T.softmax_rows(*a)),
    "layer_norm": _layer_norm,
    "mae_loss": _mae,
    "remap_batch": _remap,
    "full_composition": _composition,
}

# ops whose backward rule can be sabotaged to prove the checker bites
CORRUPTIBLE = ("gelu", "softmax_rows", "layer_norm", "matmul", "sigmoid")


@contextlib.contextmanager
def corrupted(name: str):
    """Temporarily scale the gradient rule of ``T.<name>`` by 1.5."""
    if name not in CORRUPTIBLE:
        raise ValueError(f"cannot corrupt {name!r}; choose from {', '.join(CORRUPTIBLE)}")
    original = getattr(T, name)

    def broken(*args, **kwargs):
        out = original(*args, **kwargs)
        if out._backward is not None:
            good = out._backward
            out._backward = lambda g: tuple(None if x is None else 1.5 * x for x in good(g))
        return out

    setattr(T, name, broken)
    try:
        yield
    finally:
        setattr(T, name, original)


@dataclass(frozen=True)
class CaseResult:
    name: str
    worst: float
    worst_seed: int

    @property
    def passed(self) -> bool:
        return self.worst < TOLERANCE


def run_suite(seeds: int = 20, cases=None) -> list[CaseResult]:
    results = []
    order = list(CASES)
    for name in cases or order:
        salt = order.index(name)
        worst, worst_seed = 0.0, 0
        for seed in range(seeds):
            f, inputs = CASES[name](_rng(seed, salt))
            err = grad_check(f, inputs)
            if not err <= worst:
                worst, worst_seed = err, seed
        results.append(CaseResult(name, worst, worst_seed))
    return results


def format_table(results: list[CaseResult]) -> str:
    rows = sorted(results, key=lambda r: -r.worst)
    width = max(len(r.name) for r in rows)
    lines = [f"{'op':<{width}}  {'worst rel err':>13}  seed  status"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.worst:13.3e}  {r.worst_seed:4d}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
