"""Central finite-difference gradient checks for every differentiable primitive.

The reference gradient is always computed from forward evaluations in
float64 (``h = 1e-3`` when checking float32, ``1e-6`` for float64); the
analytic gradient comes from the tape at the precision under test.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from .tensor import Tensor, backward

Case = tuple[Callable[..., Tensor], list[np.ndarray]]

PRECISIONS = {"f32": np.float32, "f64": np.float64}
TOLERANCE = {"f32": 1e-3, "f64": 1e-6}
STEP = {"f32": 1e-3, "f64": 1e-6}


def numerical_grad(fn: Callable[..., float], arrays: list[np.ndarray], h: float) -> list[np.ndarray]:
    """d fn / d arrays[i] by central differences; arrays are perturbed in place and restored."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"], op_flags=[["readwrite"]])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + h
            fp = fn(*arrays)
            arr[idx] = old - h
            fm = fn(*arrays)
            arr[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    if den < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b)) / den


def check(op: Callable[..., Tensor], arrays: list[np.ndarray], precision: str = "f64",
          seed: int = 0) -> float:
    """Max relative error over inputs for ``sum(op(*inputs) * R)`` with random ``R``."""
    dtype = PRECISIONS[precision]
    inputs = [np.asarray(a, dtype=dtype) for a in arrays]
    with_grad = [Tensor(a.copy(), requires_grad=True) for a in inputs]
    out = op(*with_grad)
    weights = np.random.default_rng(seed + 7919).normal(size=out.shape)
    loss = F.sum(F.mul(out, Tensor(weights.astype(dtype))))
    backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in with_grad]

    def scalar(*arrs):
        val = op(*[Tensor(a) for a in arrs]).data
        return float(np.sum(val.astype(np.float64) * weights))

    ref_inputs = [a.astype(np.float64) for a in inputs]
    numeric = numerical_grad(scalar, ref_inputs, STEP[precision])
    return max(rel_err(a.astype(np.float64), n) for a, n in zip(analytic, numeric))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def primitive_cases(rng: np.random.Generator) -> dict[str, Case]:
    n = rng.normal
    mask = rng.random((3, 4)) < 0.3
    rows = rng.random((2, 3)) < 0.5
    labels = rng.integers(0, 7, size=(5,))
    idx = rng.integers(0, 6, size=(4,))
    return {
        "matmul": (lambda a, b: F.matmul(a, b), [n(size=(3, 4)), n(size=(4, 2))]),
        "matmul_batched": (lambda a, b: F.matmul(a, b), [n(size=(2, 3, 4)), n(size=(4, 2))]),
        "add": (lambda a, b: F.add(a, b), [n(size=(3, 4)), n(size=(4,))]),
        "sub": (lambda a, b: F.sub(a, b), [n(size=(3, 4)), n(size=(3, 1))]),
        "mul": (lambda a, b: F.mul(a, b), [n(size=(3, 4)), n(size=(3, 4))]),
        "div": (lambda a, b: F.div(a, b), [n(size=(3, 4)), 1.5 + rng.random((3, 4))]),
        "exp": (lambda a: F.exp(a), [n(size=(3, 4))]),
        "log": (lambda a: F.log(a), [0.5 + rng.random((3, 4))]),
        "relu": (lambda a: F.relu(a), [_away_from_zero(rng, (3, 4))]),
        "sigmoid": (lambda a: F.sigmoid(a), [n(size=(3, 4)) * 3]),
        "tanh": (lambda a: F.tanh(a), [n(size=(3, 4))]),
        "gelu": (lambda a: F.gelu(a), [n(size=(3, 4)) * 2]),
        "softmax": (lambda a: F.softmax(a, axis=-1), [n(size=(2, 5))]),
        "log_softmax": (lambda a: F.log_softmax(a, axis=-1), [n(size=(2, 5))]),
        "layer_norm": (lambda a, w, b: F.layer_norm(a, w, b), [n(size=(3, 6)), n(size=(6,)), n(size=(6,))]),
        "conv2d": (lambda x, w, b: F.conv2d(x, w, b, stride=1, padding=1),
                   [n(size=(1, 2, 5, 5)), n(size=(3, 2, 3, 3)), n(size=(3,))]),
        "conv2d_stride2": (lambda x, w: F.conv2d(x, w, None, stride=2, padding=1),
                           [n(size=(2, 2, 6, 6)), n(size=(3, 2, 3, 3))]),
        "upsample_nearest2d": (lambda x: F.upsample_nearest2d(x, 2), [n(size=(1, 2, 2, 3))]),
        "reshape": (lambda a: F.reshape(a, (4, 3)), [n(size=(3, 4))]),
        "transpose": (lambda a: F.transpose(a, (2, 0, 1)), [n(size=(2, 3, 4))]),
        "getitem": (lambda a: a[:, 1:3], [n(size=(3, 4))]),
        "concat": (lambda a, b: F.concat([a, b], axis=1), [n(size=(2, 3)), n(size=(2, 2))]),
        "sum": (lambda a: F.sum(a, axis=1), [n(size=(3, 4))]),
        "mean": (lambda a: F.mean(a, axis=0), [n(size=(3, 4))]),
        "embedding_lookup": (lambda t: F.embedding_lookup(t, idx), [n(size=(6, 3))]),
        "masked_fill": (lambda a: F.masked_fill(a, mask, 0.0), [n(size=(3, 4))]),
        "replace_rows": (lambda a, tok: F.replace_rows(a, rows, tok), [n(size=(2, 3, 4)), n(size=(4,))]),
        "cross_entropy": (lambda z: F.cross_entropy(z, labels), [n(size=(5, 7))]),
    }


def composed_cases(rng: np.random.Generator) -> dict[str, Case]:
    """Three small graphs of four chained primitives each."""
    n = rng.normal
    tgt = rng.integers(0, 4, size=(3,))

    def attention_like(q, k, v):
        scores = F.matmul(q, F.transpose(k, (1, 0)))
        return F.matmul(F.softmax(scores * 0.5, axis=-1), v)

    def conv_norm(x, w):
        h = F.conv2d(x, w, None, stride=1, padding=1)
        h = F.gelu(h)
        h = F.reshape(h, (h.shape[0], -1))
        return F.layer_norm(h)

    def gate_ce(a, b, w):
        g = F.sigmoid(F.matmul(F.concat([a, b], axis=1), w))
        fused = g * a + (1.0 - g) * b
        return F.cross_entropy(fused, tgt)

    return {
        "graph_attention": (attention_like, [n(size=(3, 4)), n(size=(5, 4)), n(size=(5, 2))]),
        "graph_conv_norm": (conv_norm, [n(size=(2, 1, 3, 3)), n(size=(2, 1, 3, 3))]),
        "graph_gate_ce": (gate_ce, [n(size=(3, 4)), n(size=(3, 4)), n(size=(8, 4))]),
    }


@dataclass
class GradcheckReport:
    precision: str
    max_rel_err: dict[str, float]

    @property
    def tolerance(self) -> float:
        return TOLERANCE[self.precision]

    @property
    def passed(self) -> bool:
        return all(v < self.tolerance for v in self.max_rel_err.values())

    def lines(self) -> list[str]:
        return [f"{name:22s} {err:.3e} {'ok' if err < self.tolerance else 'FAIL'}"
                for name, err in self.max_rel_err.items()]


def run_suite(precision: str = "f64", seeds=range(10)) -> GradcheckReport:
    worst: dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        cases = {**primitive_cases(rng), **composed_cases(rng)}
        for name, (op, arrays) in cases.items():
            err = check(op, arrays, precision=precision, seed=seed)
            worst[name] = max(worst.get(name, 0.0), err)
    return GradcheckReport(precision, worst)
