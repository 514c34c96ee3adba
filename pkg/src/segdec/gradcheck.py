"""Central finite differences against the tape's analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .tensor import NumericError, Tape, Tensor, backprop


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple[int, ...] | None
    analytic: np.ndarray
    numeric: np.ndarray
    tolerance: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def _scalar(t: Tensor, where) -> float:
    v = t.item()
    if not np.isfinite(v):
        raise NumericError(f"non-finite objective {v} at coordinate {where}")
    return v


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5, tolerance: float = 1e-4,
               coords: Iterable[tuple[int, ...]] | None = None, atol: float = 0.0) -> GradCheckReport:
    """Compare d f / d x from backprop with central differences.

    ``f`` must be deterministic and close over any other inputs. ``x`` is
    perturbed in place and restored. ``coords`` limits the numeric side to a
    subset of entries (useful for large parameter tensors). Entries whose
    absolute difference is within ``atol`` count as exact; this covers
    gradients that are zero by construction, where the relative error only
    measures rounding noise.
    """
    if x.dtype != np.float64:
        raise TypeError(f"gradient checks need float64, got {x.dtype}")
    with Tape() as tape:
        y = f(x)
    [analytic] = backprop(tape, y, [x])
    if not np.all(np.isfinite(analytic)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(analytic))[0])
        raise NumericError(f"non-finite analytic gradient at coordinate {bad}")

    idx_list = list(np.ndindex(x.shape)) if coords is None else [tuple(c) for c in coords]
    numeric = np.zeros(len(idx_list))
    picked = np.array([analytic[i] for i in idx_list])
    for k, idx in enumerate(idx_list):
        orig = x.data[idx]
        x.data[idx] = orig + step
        hi = _scalar(f(x), idx)
        x.data[idx] = orig - step
        lo = _scalar(f(x), idx)
        x.data[idx] = orig
        numeric[k] = (hi - lo) / (2 * step)

    err = relative_error(picked, numeric)
    err[np.abs(picked - numeric) <= atol] = 0.0
    worst = int(np.argmax(err)) if err.size else None
    return GradCheckReport(
        max_rel_error=float(err.max()) if err.size else 0.0,
        worst_index=idx_list[worst] if worst is not None else None,
        analytic=picked,
        numeric=numeric,
        tolerance=tolerance,
        checked=len(idx_list),
    )


# ---------------------------------------------------------------------------
# suites


def _away_from_zero(rng, shape, margin=1e-3):
    v = rng.standard_normal(shape)
    return np.where(np.abs(v) < margin, np.copysign(margin, v) + v, v)


def _distinct(rng, shape):
    """Values spaced 1e-2 apart so max-pool argmaxes survive a 1e-5 nudge."""
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) - n / 2) * 1e-2


def primitive_suite(seed: int, step: float = 1e-5, tolerance: float = 1e-4) -> dict[str, GradCheckReport]:
    """One finite-difference check per primitive input, each against a random linear probe.

    Keys look like ``conv2d.weight``. Geometries are drawn from ``seed``.
    """
    from . import ops
    from .ops import ConvParams, RunningStats
    from .training import softmax_ce_loss

    rng = np.random.default_rng(seed)
    t = lambda *s: Tensor(rng.standard_normal(s))
    out: dict[str, GradCheckReport] = {}

    def check(name, fn, x):
        probe = rng.standard_normal(fn(x).shape)
        out[name] = grad_check(lambda _: ops.weighted_sum(fn(x), probe), x, step, tolerance)

    k = int(rng.choice([1, 2, 3, 5]))
    s, d = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    p = ConvParams(cin, cout, kernel=k, stride=s, padding=int(rng.integers(0, 3)), dilation=d)
    size = d * (k - 1) + 1 + int(rng.integers(0, 4))
    x, w, b = t(2, cin, size, size + 1), t(cout, cin, k, k), t(1, cout, 1, 1)
    check("conv2d.input", lambda _: ops.conv2d(x, w, p, b), x)
    check("conv2d.weight", lambda _: ops.conv2d(x, w, p, b), w)
    check("conv2d.bias", lambda _: ops.conv2d(x, w, p, b), b)

    tk = int(rng.choice([2, 3, 5]))
    ts = int(rng.integers(1, 3))
    tp = ConvParams(cin, cout, kernel=tk, stride=ts, padding=(tk - 1) // 2, output_padding=ts - 1)
    y, wt, bt = t(1, cin, 4, 5), t(cin, cout, tk, tk), t(1, cout, 1, 1)
    check("transposed_conv2d.input", lambda _: ops.transposed_conv2d(y, wt, tp, bt), y)
    check("transposed_conv2d.weight", lambda _: ops.transposed_conv2d(y, wt, tp, bt), wt)
    check("transposed_conv2d.bias", lambda _: ops.transposed_conv2d(y, wt, tp, bt), bt)

    xp = Tensor(_distinct(rng, (2, 2, 6, 8)))
    check("maxpool2d.input", lambda _: ops.maxpool2d(xp), xp)

    xb, g, be = t(3, 2, 4, 5), t(1, 2, 1, 1), t(1, 2, 1, 1)
    check("batch_norm.input", lambda _: ops.batch_norm(xb, g, be, RunningStats.fresh(2, np.float64)), xb)
    check("batch_norm.gamma", lambda _: ops.batch_norm(xb, g, be, RunningStats.fresh(2, np.float64)), g)
    check("batch_norm.beta", lambda _: ops.batch_norm(xb, g, be, RunningStats.fresh(2, np.float64)), be)

    xr = Tensor(_away_from_zero(rng, (2, 3, 4, 4)))
    check("relu.input", ops.relu, xr)

    a, c = t(2, 3, 4, 4), t(2, 3, 4, 4)
    check("fuse_add.first", lambda _: ops.fuse_add([a, c]), a)
    check("fuse_add.second", lambda _: ops.fuse_add([a, c]), c)

    logits = t(2, 4, 3, 5)
    mask = rng.integers(0, 4, (2, 3, 5))
    out["softmax_ce_loss.logits"] = grad_check(lambda z: softmax_ce_loss(z, mask), logits, step, tolerance)
    return out


def network_check(graph, seed: int = 0, input_shape=(3, 16, 32), coords_per_param: int = 2, step: float = 1e-5,
                  tolerance: float = 1e-4, max_params: int | None = None,
                  atol: float = 1e-8) -> dict[str, GradCheckReport]:
    """Cross-entropy of a whole network against finite differences on sampled weight entries.

    Runs in float64, train mode. With thousands of ReLU and max-pool kinks
    a +-step nudge occasionally straddles one; a failing coordinate is
    therefore rechecked at step/10 and step/100 and keeps its best error.
    A wrong analytic gradient disagrees at every step size; ``atol`` grows
    as 1/step there, like the rounding noise it absorbs. Biases and BN shifts are drawn away from
    zero so no ReLU sits exactly on its kink (a zero bias behind a dead
    channel would). ``max_params`` caps how many parameter tensors are
    probed (spread evenly over the graph); by default all are.
    """
    from .graph import forward, init_buffers, init_params
    from .training import softmax_ce_loss

    rng = np.random.default_rng(seed)
    params = init_params(graph, seed, np.float64)
    for name, p in params.items():
        if name.endswith((".bias", ".beta")):
            p.data = rng.uniform(0.05, 0.2, p.shape) * rng.choice([-1.0, 1.0], p.shape)
    x = Tensor(rng.uniform(0, 1, (2,) + tuple(input_shape)))
    logits_shape = forward(graph, params, x, "train", init_buffers(graph)).shape
    mask = rng.integers(0, logits_shape[1], (logits_shape[0],) + logits_shape[2:])
    names = list(params)
    if max_params is not None and len(names) > max_params:
        names = [names[i] for i in np.linspace(0, len(names) - 1, max_params).round().astype(int)]
    out = {}
    for name in names:
        target = params[name]

        def loss(_):
            return softmax_ce_loss(forward(graph, params, x, "train", init_buffers(graph)), mask)

        flat = rng.choice(target.data.size, size=min(coords_per_param, target.data.size), replace=False)
        coords = [np.unravel_index(int(i), target.shape) for i in flat]
        rep = grad_check(loss, target, step, tolerance, coords, atol)
        err = relative_error(rep.analytic, rep.numeric)
        err[np.abs(rep.analytic - rep.numeric) <= atol] = 0.0
        for k in np.flatnonzero(err >= tolerance):
            for small in (step / 10, step / 100):
                again = grad_check(loss, target, small, tolerance, [coords[k]], atol * step / small)
                if again.max_rel_error < err[k]:
                    err[k], rep.numeric[k] = again.max_rel_error, again.numeric[0]
        worst = int(np.argmax(err))
        out[name] = GradCheckReport(float(err[worst]), coords[worst], rep.analytic, rep.numeric, tolerance,
                                    rep.checked)
    return out
