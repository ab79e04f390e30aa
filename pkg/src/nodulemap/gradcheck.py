"""Finite-difference verification of the autodiff engine.

Every differentiable op gets a central-difference comparison against
its backward pass in float64. Piecewise-linear ops (ReLU, max pooling)
use inputs constructed away from their kinks, since a finite step
across a kink measures a different one-sided slope than the analytic
gradient legitimately reports.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, build_model
from .tensor import (Tensor, avgpool2d, batchnorm2d, concat_channels, conv2d,
                     conv_transpose2d, dense, global_pool, maxpool2d, mul,
                     no_grad, per_channel_dense, relu, reshape,
                     softmax_cross_entropy, tsum)

REL_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(name, build, tensors, eps: float = 1e-3, tol: float = 1e-4):
    """Compare backward() of build() against central differences.

    ``build`` must return a scalar Tensor computed from ``tensors``
    (list of float64 leaf Tensors with requires_grad set). Returns one
    CheckResult per input tensor.
    """
    for t in tensors:
        t.grad = None
    build().backward()
    results = []
    for i, t in enumerate(tensors):
        analytic = np.array(t.grad, copy=True)
        numeric = np.empty_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        with no_grad():
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                f_plus = float(build().data)
                flat[j] = orig - eps
                f_minus = float(build().data)
                flat[j] = orig
                nflat[j] = (f_plus - f_minus) / (2.0 * eps)
        results.append(CheckResult(f"{name}[in{i}]", _rel_err(analytic, numeric),
                                   tol, flat.size))
        t.grad = None
    return results


def _leaf(rng, shape):
    return Tensor(rng.normal(0.0, 1.0, shape), requires_grad=True)


def _kink_free(rng, shape, gap: float = 0.1):
    """Values with pairwise gaps well above the finite-difference step."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n).astype(np.float64) - n / 2.0) * gap
    vals += rng.uniform(-1e-5, 1e-5, n)
    return Tensor(vals.reshape(shape), requires_grad=True)


def _away_from_zero(rng, shape, margin: float = 0.1):
    x = rng.normal(0.0, 1.0, shape)
    return Tensor(np.where(x >= 0, x + margin, x - margin), requires_grad=True)


def _project(out: Tensor, rng) -> Tensor:
    # random projection so every output element feels a distinct gradient
    return tsum(mul(out, Tensor(rng.normal(0.0, 1.0, out.shape))))


def default_op_checks(seed: int = 0, eps: float = 1e-3, tol: float = 1e-4):
    """The standard per-op suite; returns a flat list of CheckResults."""
    rng = np.random.default_rng(seed)
    results = []

    def run(name, build, tensors):
        results.extend(check_gradients(name, build, tensors, eps=eps, tol=tol))

    x = _leaf(rng, (2, 3, 6, 6))
    w = Tensor(rng.normal(0.0, 0.3, (4, 3, 3, 3)), requires_grad=True)
    b = _leaf(rng, (4,))
    proj = np.random.default_rng(seed + 1)
    run("conv3x3_s1_p1", lambda: _project(conv2d(x, w, b, stride=1, padding=1), np.random.default_rng(7)), [x, w, b])
    run("conv3x3_s2_p1", lambda: _project(conv2d(x, w, b, stride=2, padding=1), np.random.default_rng(8)), [x, w, b])
    w2 = Tensor(proj.normal(0.0, 0.3, (4, 3, 2, 2)), requires_grad=True)
    run("conv2x2_s2_p0", lambda: _project(conv2d(x, w2, b, stride=2, padding=0), np.random.default_rng(9)), [x, w2, b])
    w1 = Tensor(proj.normal(0.0, 0.3, (5, 3, 1, 1)), requires_grad=True)
    b1 = _leaf(rng, (5,))
    run("conv1x1", lambda: _project(conv2d(x, w1, b1, stride=1, padding=0), np.random.default_rng(10)), [x, w1, b1])

    xt = _leaf(rng, (2, 4, 3, 3))
    wt = Tensor(proj.normal(0.0, 0.3, (4, 3, 2, 2)), requires_grad=True)
    run("convT2x2_s2", lambda: _project(conv_transpose2d(xt, wt, stride=2), np.random.default_rng(11)), [xt, wt])

    xm = _kink_free(rng, (2, 3, 6, 6))
    run("maxpool2x2", lambda: _project(maxpool2d(xm, 2, 2), np.random.default_rng(12)), [xm])
    xm2 = _kink_free(rng, (2, 2, 7, 7))
    run("maxpool3x3_s2", lambda: _project(maxpool2d(xm2, 3, 2), np.random.default_rng(13)), [xm2])

    xa = _leaf(rng, (2, 3, 16, 16))
    run("avgpool5_s2", lambda: _project(avgpool2d(xa, 5, 2), np.random.default_rng(14)), [xa])
    run("global_avg", lambda: _project(global_pool(x, "avg"), np.random.default_rng(15)), [x])
    xg = _kink_free(rng, (2, 3, 5, 5))
    run("global_max", lambda: _project(global_pool(xg, "max"), np.random.default_rng(16)), [xg])

    xd = _leaf(rng, (4, 6))
    wd = Tensor(proj.normal(0.0, 0.4, (6, 3)), requires_grad=True)
    bd = _leaf(rng, (3,))
    run("dense", lambda: _project(dense(xd, wd, bd), np.random.default_rng(17)), [xd, wd, bd])

    xp = _leaf(rng, (3, 5, 8))
    wp = Tensor(proj.normal(0.0, 0.4, (5, 8)), requires_grad=True)
    bp = _leaf(rng, (5,))
    run("per_channel_dense", lambda: _project(per_channel_dense(xp, wp, bp), np.random.default_rng(18)), [xp, wp, bp])

    xr = _away_from_zero(rng, (3, 4, 5, 5))
    run("relu", lambda: _project(relu(xr), np.random.default_rng(19)), [xr])

    xs = _leaf(rng, (2, 3, 4, 4))
    ys = _leaf(rng, (2, 3, 4, 4))
    run("add", lambda: _project(xs + ys, np.random.default_rng(20)), [xs, ys])
    run("mul", lambda: _project(mul(xs, ys), np.random.default_rng(21)), [xs, ys])
    run("concat", lambda: _project(concat_channels(xs, ys), np.random.default_rng(22)), [xs, ys])
    run("reshape", lambda: _project(reshape(xs, (2, 48)), np.random.default_rng(23)), [xs])

    xb = _leaf(rng, (4, 3, 5, 5))
    gb = Tensor(proj.normal(1.0, 0.2, (3,)), requires_grad=True)
    bb = _leaf(rng, (3,))
    rm = np.zeros(3)
    rv = np.ones(3)
    run("batchnorm_train",
        lambda: _project(batchnorm2d(xb, gb, bb, rm, rv, training=True), np.random.default_rng(24)),
        [xb, gb, bb])

    xl = _leaf(rng, (8, 2))
    labels = rng.integers(0, 2, 8)
    run("softmax_ce", lambda: softmax_cross_entropy(xl, labels), [xl])
    return results


def model_spot_check(config: ModelConfig = None, seed: int = 0, n_coords: int = 20,
                     eps: float = 1e-3, tol: float = 1e-3) -> CheckResult:
    """Central differences through the whole model at sampled coordinates.

    ReLU and max-pool selections make the logits piecewise in each
    parameter, so finite differences near a selection boundary measure
    a slope the analytic gradient is not claiming to match. Two gates
    reject such coordinates before comparison and resample instead:

    * slopes at three step sizes must agree (a boundary inside the
      probe window shifts the estimate as the window shrinks), and
    * the forward/backward slope gap, extrapolated to step zero, must
      vanish (a boundary at the point itself leaves the central
      estimates stable but splits the one-sided ones by a constant,
      while smooth curvature contributes a gap proportional to the
      step and cancels in the extrapolation).
    """
    config = config or ModelConfig()
    model = build_model(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 101)
    x = Tensor(rng.uniform(0.0, 1.0, (2, config.in_channels, 32, 32)))
    labels = np.array([0, 1])

    def loss_value() -> float:
        with no_grad():
            fp = model.forward(x, training=True)
            return float(softmax_cross_entropy(fp.logits, labels).data)

    params = model.param_set()
    params.zero_grad()
    fp = model.forward(x, training=True)
    softmax_cross_entropy(fp.logits, labels).backward()
    f_base = loss_value()

    def probe(flat, j, step):
        orig = flat[j]
        flat[j] = orig + step
        f_plus = loss_value()
        flat[j] = orig - step
        f_minus = loss_value()
        flat[j] = orig
        central = (f_plus - f_minus) / (2.0 * step)
        one_sided_gap = (f_plus + f_minus - 2.0 * f_base) / step
        return central, one_sided_gap

    entries = list(params)
    sizes = np.array([t.data.size for _, t in entries], dtype=np.float64)
    worst = 0.0
    accepted = 0
    attempts = 0
    while accepted < n_coords and attempts < 5 * n_coords:
        attempts += 1
        pi = int(rng.choice(len(entries), p=sizes / sizes.sum()))
        _, tensor = entries[pi]
        j = int(rng.integers(tensor.data.size))
        flat = tensor.data.reshape(-1)
        results = [probe(flat, j, h) for h in (2.0 * eps, eps, eps / 2.0)]
        slopes = [s for s, _ in results]
        scale = max(max(abs(s) for s in slopes), REL_FLOOR)
        if max(slopes) - min(slopes) > 0.2 * tol * scale:
            continue  # selection boundary inside the probe window
        # gap(h) = jump + curvature * h; eliminate the curvature term
        jump = (4.0 * results[-1][1] - results[0][1]) / 3.0
        if abs(jump) > 0.2 * tol * scale:
            continue  # selection boundary at the point itself
        analytic = tensor.grad.reshape(-1)[j]
        numeric = slopes[-1]
        denom = max(abs(analytic), abs(numeric), REL_FLOOR)
        worst = max(worst, abs(analytic - numeric) / denom)
        accepted += 1
    params.zero_grad()
    if accepted < n_coords:
        return CheckResult("model_spot_check", float("inf"), tol, accepted)
    return CheckResult("model_spot_check", worst, tol, accepted)
