"""Central finite-difference gradient checks for every differentiable op.

Used both by the test suite and the ``gradcheck`` CLI command. Each check
builds a deterministic scalar function of one or more tensors, compares the
tape gradients against central differences, and reports the worst relative
error. Relative error uses a small floor so near-zero components are compared
absolutely.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-5
GELU_TOL = 1e-4
ERR_FLOOR = 1e-4


def numeric_gradient(f: Callable[[], Tensor], wrt: Tensor, h: float = DEFAULT_H) -> np.ndarray:
    """Central-difference gradient of the scalar f() w.r.t. every element of wrt.

    ``f`` must recompute the forward pass from current tensor contents and be
    deterministic (re-seed any rng inside it).
    """
    flat = wrt.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(wrt.shape)


def tape_gradients(f: Callable[[], Tensor], wrt: list[Tensor]) -> list[np.ndarray]:
    for t in wrt:
        t.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = ERR_FLOOR) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


@dataclass
class CheckResult:
    name: str
    max_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_err < self.tol


def check(name: str, f: Callable[[], Tensor], wrt: list[Tensor],
          tol: float = DEFAULT_TOL, h: float = DEFAULT_H,
          corrupt: str | None = None) -> CheckResult:
    analytic = tape_gradients(f, wrt)
    if corrupt == name:
        analytic = [a * 1.01 + 1e-3 for a in analytic]  # test hook: force a visible failure
    worst = 0.0
    for t, a in zip(wrt, analytic):
        n = numeric_gradient(f, t, h=h)
        worst = max(worst, max_rel_err(a, n))
    return CheckResult(name, worst, tol)


def _away_from_kinks(rng: np.random.Generator, shape, margin: float = 2e-3) -> np.ndarray:
    """Uniform values in [-1, 1] kept at least ``margin`` away from zero."""
    v = rng.uniform(-1.0, 1.0, size=shape)
    v = np.where(np.abs(v) < margin, np.sign(v) * margin + (v == 0) * margin, v)
    return v


def run_op_checks(names: Iterable[str] | None = None, seed: int = 0,
                  corrupt: str | None = None) -> list[CheckResult]:
    """Run the per-op finite-difference suites; ``names`` filters by op name."""
    rng = np.random.default_rng(seed)
    suite: list[tuple[str, Callable[[], CheckResult]]] = []

    def register(name, builder):
        suite.append((name, builder))

    a45 = Tensor(rng.uniform(-1, 1, (4, 5)), requires_grad=True)
    b53 = Tensor(rng.uniform(-1, 1, (5, 3)), requires_grad=True)
    register("matmul", lambda: check(
        "matmul", lambda: T.mean(T.mul(T.matmul(a45, b53), T.matmul(a45, b53))),
        [a45, b53], corrupt=corrupt))

    sm = Tensor(rng.uniform(-1, 1, (3, 7)), requires_grad=True)
    smw = Tensor(rng.uniform(-1, 1, (3, 7)))
    register("softmax_rows", lambda: check(
        "softmax_rows", lambda: T.mean(T.mul(T.softmax_rows(sm), smw)),
        [sm], corrupt=corrupt))

    lx = Tensor(rng.uniform(-1, 1, (4, 6)), requires_grad=True)
    lg = Tensor(rng.uniform(0.5, 1.5, (6,)), requires_grad=True)
    lb = Tensor(rng.uniform(-0.5, 0.5, (6,)), requires_grad=True)
    lw = Tensor(rng.uniform(-1, 1, (4, 6)))
    register("layer_norm", lambda: check(
        "layer_norm", lambda: T.mean(T.mul(T.layer_norm(lx, lg, lb), lw)),
        [lx, lg, lb], corrupt=corrupt))

    ea = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
    eb = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
    ew = Tensor(rng.uniform(-1, 1, (3, 4)))
    register("add", lambda: check(
        "add", lambda: T.mean(T.mul(T.add(ea, eb), ew)), [ea, eb], corrupt=corrupt))
    register("sub", lambda: check(
        "sub", lambda: T.mean(T.mul(T.sub(ea, eb), ew)), [ea, eb], corrupt=corrupt))
    register("mul", lambda: check(
        "mul", lambda: T.mean(T.mul(T.mul(ea, eb), ew)), [ea, eb], corrupt=corrupt))
    register("scale", lambda: check(
        "scale", lambda: T.mean(T.mul(T.scale(ea, 1.7), ew)), [ea], corrupt=corrupt))

    rx = Tensor(_away_from_kinks(rng, (4, 5)), requires_grad=True)
    rw = Tensor(rng.uniform(-1, 1, (4, 5)))
    register("relu", lambda: check(
        "relu", lambda: T.mean(T.mul(T.relu(rx), rw)), [rx], corrupt=corrupt))

    gx = Tensor(rng.uniform(-1, 1, (4, 5)), requires_grad=True)
    register("gelu", lambda: check(
        "gelu", lambda: T.mean(T.mul(T.gelu(gx), rw)), [gx], tol=GELU_TOL, corrupt=corrupt))

    sx = Tensor(rng.uniform(-1, 1, (4, 5)), requires_grad=True)
    register("sigmoid", lambda: check(
        "sigmoid", lambda: T.mean(T.mul(T.sigmoid(sx), rw)), [sx], corrupt=corrupt))

    mx = Tensor(rng.uniform(-1, 1, (3, 5)), requires_grad=True)
    register("mean", lambda: check("mean", lambda: T.mean(mx), [mx], corrupt=corrupt))
    register("sum_all", lambda: check(
        "sum_all", lambda: T.scale(T.sum_all(mx), 0.3), [mx], corrupt=corrupt))

    nv = Tensor(rng.uniform(0.2, 1.0, (6,)), requires_grad=True)
    register("l2_norm", lambda: check("l2_norm", lambda: T.l2_norm(nv), [nv], corrupt=corrupt))

    cu = Tensor(rng.uniform(0.2, 1.0, (5,)), requires_grad=True)
    cv = Tensor(rng.uniform(-1.0, -0.2, (5,)), requires_grad=True)
    register("cosine_similarity", lambda: check(
        "cosine_similarity", lambda: T.cosine_similarity(cu, cv), [cu, cv], corrupt=corrupt))

    nr = Tensor(rng.uniform(0.2, 1.0, (4, 5)) * np.sign(rng.uniform(-1, 1, (4, 5))), requires_grad=True)
    nrw = Tensor(rng.uniform(-1, 1, (4, 5)))
    register("normalize_rows", lambda: check(
        "normalize_rows", lambda: T.mean(T.mul(T.normalize_rows(nr), nrw)), [nr], corrupt=corrupt))

    rmx = Tensor(rng.uniform(-1, 1, (4, 6)), requires_grad=True)
    rmw = Tensor(rng.uniform(-1, 1, (4, 1)))
    register("row_max", lambda: check(
        "row_max", lambda: T.mean(T.mul(T.row_max(rmx), rmw)), [rmx], corrupt=corrupt))
    register("row_mean", lambda: check(
        "row_mean", lambda: T.mean(T.mul(T.row_mean(rmx), rmw)), [rmx], corrupt=corrupt))

    c1 = Tensor(rng.uniform(-1, 1, (2, 4)), requires_grad=True)
    c2 = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
    cw = Tensor(rng.uniform(-1, 1, (5, 4)))
    register("concat_rows", lambda: check(
        "concat_rows", lambda: T.mean(T.mul(T.concat_rows([c1, c2]), cw)), [c1, c2], corrupt=corrupt))
    d1 = Tensor(rng.uniform(-1, 1, (3, 2)), requires_grad=True)
    d2 = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
    dw = Tensor(rng.uniform(-1, 1, (3, 6)))
    register("concat_cols", lambda: check(
        "concat_cols", lambda: T.mean(T.mul(T.concat_cols([d1, d2]), dw)), [d1, d2], corrupt=corrupt))

    tb = Tensor(rng.uniform(-1, 1, (6, 4)), requires_grad=True)
    tw = Tensor(rng.uniform(-1, 1, (5, 4)))
    register("take_rows", lambda: check(
        "take_rows", lambda: T.mean(T.mul(T.take_rows(tb, [0, 2, 2, 5, 1]), tw)), [tb], corrupt=corrupt))

    ax = Tensor(rng.uniform(-1, 1, (4, 3)), requires_grad=True)
    av = Tensor(rng.uniform(-1, 1, (3,)), requires_grad=True)
    aw = Tensor(rng.uniform(-1, 1, (4, 3)))
    register("add_rows", lambda: check(
        "add_rows", lambda: T.mean(T.mul(T.add_rows(ax, av), aw)), [ax, av], corrupt=corrupt))

    tx = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
    txw = Tensor(rng.uniform(-1, 1, (4, 3)))
    register("transpose", lambda: check(
        "transpose", lambda: T.mean(T.mul(T.transpose(tx), txw)), [tx], corrupt=corrupt))
    register("reshape", lambda: check(
        "reshape", lambda: T.mean(T.mul(T.reshape(tx, (4, 3)), txw)), [tx], corrupt=corrupt))

    cx = Tensor(rng.uniform(-1, 1, (6, 6, 2)), requires_grad=True)
    ck = Tensor(rng.uniform(-0.5, 0.5, (3, 3, 2, 3)), requires_grad=True)
    cb = Tensor(rng.uniform(-0.5, 0.5, (3,)), requires_grad=True)
    cwght = Tensor(rng.uniform(-1, 1, (3, 3, 3)))
    register("conv2d", lambda: check(
        "conv2d", lambda: T.mean(T.mul(T.conv2d(cx, ck, cb, stride=2, padding=1), cwght)),
        [cx, ck, cb], corrupt=corrupt))

    dx = Tensor(rng.uniform(-1, 1, (5, 4)), requires_grad=True)
    dwght = Tensor(rng.uniform(-1, 1, (5, 4)))
    register("dropout", lambda: check(
        "dropout",
        lambda: T.mean(T.mul(T.dropout(dx, 0.4, train=True, rng=np.random.default_rng(11)), dwght)),
        [dx], corrupt=corrupt))

    wanted = set(names) if names else None
    results = []
    for name, builder in suite:
        if wanted is None or name in wanted:
            results.append(builder())
    if wanted:
        missing = wanted - {r.name for r in results}
        if missing:
            raise KeyError(f"unknown gradcheck op(s): {sorted(missing)}")
    return results
