"""Finite-difference suite over every differentiable op and the whole network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Sequence, Tuple

import numpy as np

from . import losses
from .autodiff import Tensor, backward, no_grad, precision
from .autodiff import functional as F
from .autodiff import tensor as T
from .autodiff.finite_diff import gradcheck, relative_error

CaseBuilder = Callable[[np.random.Generator], Tuple[Callable, List[np.ndarray]]]


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)


def _distinct(rng, shape):
    # values spaced well beyond the FD step so max-pool argmax never flips
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) / n * 4.0 - 2.0) + rng.uniform(-0.1, 0.1, shape) / n


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return x + np.sign(x) * margin


def _conv_case(stride, padding, k, cin=3, cout=4, hw=(7, 8), bias=True):
    def build(rng):
        arrays = [rng.standard_normal((2, cin) + hw), rng.standard_normal((cout, cin, k, k))]
        if bias:
            arrays.append(rng.standard_normal(cout))
            return (lambda x, w, b: F.conv2d(x, w, b, stride, padding)), arrays
        return (lambda x, w: F.conv2d(x, w, None, stride, padding)), arrays
    return build


def _bn_train(rng):
    arrays = [rng.standard_normal((3, 2, 4, 5)) * 2 + 1, rng.standard_normal(2), rng.standard_normal(2)]
    return (lambda x, g, b: F.batchnorm2d(x, g, b, F.BatchNormState.create(2, np.float64))), arrays


def _bn_infer(rng):
    mean, var = rng.standard_normal(2), rng.uniform(0.5, 2.0, 2)

    def fn(x, g, b):
        state = F.BatchNormState(mean.copy(), var.copy())
        return F.batchnorm2d(x, g, b, state, training=False)
    return fn, [rng.standard_normal((2, 2, 3, 4)), rng.standard_normal(2), rng.standard_normal(2)]


def _gate(rng):
    # attention-style broadcast product of a [B,C,1,1] gate and a feature map
    return (lambda a, x: F.sigmoid(a) * x), [rng.standard_normal((2, 3, 1, 1)), rng.standard_normal((2, 3, 4, 4))]


def _loss_case(which):
    def build(rng):
        gt = (rng.random((2, 1, 4, 5)) > 0.5).astype(np.float64)
        pred = rng.uniform(0.05, 0.95, gt.shape)

        def fn(p):
            g = Tensor(gt)
            if which == "total":
                return losses.total_loss(p, g).total
            return getattr(losses, which)(p, g)
        return fn, [pred]
    return build


OP_CASES: Dict[str, CaseBuilder] = {
    "add": lambda r: ((lambda a, b: a + b), [r.standard_normal((2, 3, 4)), r.standard_normal((3, 1))]),
    "sub": lambda r: ((lambda a, b: a - b), [r.standard_normal((2, 3, 4)), r.standard_normal((4,))]),
    "mul": lambda r: ((lambda a, b: a * b), [r.standard_normal((2, 3, 4)), r.standard_normal((1, 3, 1))]),
    "div": lambda r: ((lambda a, b: a / b), [r.standard_normal((2, 3)), r.uniform(0.5, 2.0, (2, 1))]),
    "neg": lambda r: ((lambda a: -a), [r.standard_normal((3, 4))]),
    "exp": lambda r: (T.exp, [r.standard_normal((3, 4))]),
    "log": lambda r: (T.log, [r.uniform(0.2, 3.0, (3, 4))]),
    "clip": lambda r: ((lambda a: T.clip(a, -0.5, 0.5)), [_away_from_zero(r, (3, 4)) * 0.6]),
    "sum": lambda r: ((lambda a: T.sum_(a, axis=(0, 2))), [r.standard_normal((2, 3, 4))]),
    "mean": lambda r: ((lambda a: T.mean(a, axis=1, keepdims=True)), [r.standard_normal((2, 3, 4))]),
    "reshape": lambda r: ((lambda a: T.reshape(a, (6, 4))), [r.standard_normal((2, 3, 4))]),
    "conv2d[3x3,s1,p1]": _conv_case(1, 1, 3),
    "conv2d[3x3,s2,p1]": _conv_case(2, 1, 3),
    "conv2d[1x1,s1,p0]": _conv_case(1, 0, 1, cin=5, cout=3),
    "conv2d[1x1,s2,p0,nobias]": _conv_case(2, 0, 1, bias=False),
    "conv2d[7x7,s2,p3]": _conv_case(2, 3, 7, cin=1, cout=2, hw=(9, 10)),
    "batchnorm2d[train]": _bn_train,
    "batchnorm2d[infer]": _bn_infer,
    "relu": lambda r: (F.relu, [_away_from_zero(r, (2, 3, 4, 4))]),
    "sigmoid": lambda r: (F.sigmoid, [r.standard_normal((2, 3, 4))]),
    "maxpool2d": lambda r: ((lambda a: F.maxpool2d(a, 3, 2, 1)), [_distinct(r, (2, 2, 7, 8))]),
    "upsample_nearest2x": lambda r: (F.upsample_nearest2x, [r.standard_normal((2, 2, 3, 4))]),
    "upsample_bilinear": lambda r: ((lambda a: F.upsample_bilinear(a, 4)), [r.standard_normal((2, 2, 3, 4))]),
    "concat_channels": lambda r: ((lambda a, b: F.concat_channels(a, b)),
                                  [r.standard_normal((2, 1, 3, 4)), r.standard_normal((2, 3, 3, 4))]),
    "global_avg_pool": lambda r: (F.global_avg_pool, [r.standard_normal((2, 3, 4, 5))]),
    "attention_gate": _gate,
    "bce_loss": _loss_case("bce_loss"),
    "soft_iou_loss": _loss_case("soft_iou_loss"),
    "total_loss": _loss_case("total"),
}


def run_op_suite(seeds: Iterable[int] = range(10), tol: float = 1e-4, h: float = 1e-5) -> List[CheckResult]:
    """Worst relative error of each op case over all seeds."""
    results = []
    for name, builder in OP_CASES.items():
        worst = 0.0
        for seed in seeds:
            rng = np.random.default_rng([seed, len(name)])
            fn, arrays = builder(rng)
            worst = max(worst, gradcheck(fn, arrays, h=h, seed=seed))
        results.append(CheckResult(name, worst, tol))
    return results


STEP_LADDER = (1e-6, 1e-7, 1e-8)


def stable_central_difference(loss_at: Callable[[float], float],
                              steps: Sequence[float] = STEP_LADDER) -> Tuple[float, float]:
    """Central difference at the step where neighbouring step sizes agree best.

    ``loss_at(t)`` evaluates the loss displaced by ``t`` along the probed
    direction. A relu or max-pool kink inside one stencil, or strong
    curvature from batch norm over a handful of values, makes adjacent
    estimates disagree; round-off does the same at the small end.

    Returns:
        (estimate, spread): the smaller step of the best-agreeing pair and
        the absolute disagreement of that pair.
    """
    est = [(loss_at(t) - loss_at(-t)) / (2 * t) for t in steps]
    gaps = [abs(a - b) for a, b in zip(est, est[1:])]
    i = int(np.argmin(gaps))
    return est[i + 1], gaps[i]


class _Probe:
    """Collects analytic/numeric pairs, keeping only reliable references."""

    def __init__(self, steps, agree_rtol, agree_atol):
        self.steps, self.rtol, self.atol = steps, agree_rtol, agree_atol
        self.analytic: List[float] = []
        self.numeric: List[float] = []
        self.tried = 0

    def offer(self, analytic: float, loss_at) -> bool:
        self.tried += 1
        num, spread = stable_central_difference(loss_at, self.steps)
        if spread > self.rtol * abs(num) + self.atol:
            return False  # straddles a kink at every step; no trustworthy reference
        self.analytic.append(float(analytic))
        self.numeric.append(num)
        return True


def model_gradcheck(seed: int, width_factor: float = 0.0625, hw: Tuple[int, int] = (32, 64),
                    batch: int = 4, n_tensors: int = 12, per_tensor: int = 2,
                    steps: Sequence[float] = STEP_LADDER, agree_rtol: float = 1e-4,
                    max_draws: int = 4) -> float:
    """Total-loss gradient of a small network vs central differences (64-bit).

    Checks randomly chosen entries of randomly chosen parameter tensors, a
    few input pixels of both images, and a directional derivative along a
    random unit direction through every parameter at once. Batch norm runs
    in training mode, so gradients through the batch statistics are covered.

    The network is piecewise smooth with kinks dense enough that some
    coordinates have no clean finite-difference reference at any usable
    step. Such a coordinate shows up as disagreement between step sizes and
    is redrawn (up to ``max_draws`` times). A wrong gradient is still caught,
    since the step sizes then agree with each other but not with backward.

    Returns:
        Worst relative error; ``inf`` if fewer than half the probed
        coordinates found a reliable reference.
    """
    from .model import ModelConfig, build

    rng = np.random.default_rng([seed, 7])
    with precision("float64"):
        cfg = ModelConfig(width_factor=width_factor, input_hw=hw)
        net = build(cfg, seed=seed)
        # nonzero biases so the head and gates are not at a symmetric point
        for k, p in net.params.items():
            if k.endswith(".bias") or k.endswith(".beta"):
                p.data = rng.normal(0, 0.1, p.shape)
        inputs = [rng.random((batch, 3) + hw), rng.uniform(0.05, 0.95, (batch, 1) + hw)]
        gt = Tensor((rng.random((batch, 1) + hw) > 0.6).astype(np.float64))

        def loss_value(real, sim):
            with no_grad():
                return float(losses.total_loss(net.forward(Tensor(real), Tensor(sim), training=True), gt).total.item())

        leaves = [Tensor(x, requires_grad=True) for x in inputs]
        backward(losses.total_loss(net.forward(*leaves, training=True), gt).total)

        def param_at(p, idx):
            orig = p.data[idx]

            def at(t):
                p.data[idx] = orig + t
                out = loss_value(*inputs)
                p.data[idx] = orig
                return out
            return at

        def input_at(k, idx):
            def at(t):
                moved = list(inputs)
                moved[k] = inputs[k].copy()
                moved[k][idx] += t
                return loss_value(*moved)
            return at

        params = _Probe(steps, agree_rtol, 1e-9)
        names = list(net.params)
        for ci in rng.choice(len(names), size=min(n_tensors, len(names)), replace=False):
            p = net.params[names[ci]]
            for _ in range(per_tensor):
                for _ in range(max_draws):
                    idx = tuple(int(rng.integers(n)) for n in p.shape)
                    if params.offer(p.grad[idx], param_at(p, idx)):
                        break
        worst = relative_error(np.array(params.analytic), np.array(params.numeric)) if params.analytic else 0.0
        probes = [params]

        for k, leaf in enumerate(leaves):
            for _ in range(2):
                pixel = _Probe(steps, agree_rtol, 1e-11)
                for _ in range(max_draws):
                    idx = tuple(int(rng.integers(n)) for n in leaf.shape)
                    if pixel.offer(leaf.grad[idx], input_at(k, idx)):
                        break
                if pixel.analytic:
                    worst = max(worst, relative_error(np.array(pixel.analytic), np.array(pixel.numeric),
                                                      scale_floor=0.0, floor=1e-9))
                probes.append(pixel)

        saved = {k: p.data.copy() for k, p in net.params.items()}
        direction_probe = _Probe(steps, agree_rtol, 1e-9)
        for _ in range(max_draws):
            direction = {k: rng.standard_normal(p.shape) for k, p in net.params.items()}
            # unit global norm; an O(1) step per weight crosses many relu kinks
            norm = np.sqrt(sum(float(np.sum(d * d)) for d in direction.values()))
            direction = {k: d / norm for k, d in direction.items()}

            def along(t, direction=direction):
                for k, p in net.params.items():
                    p.data = saved[k] + t * direction[k]
                out = loss_value(*inputs)
                for k, p in net.params.items():
                    p.data = saved[k]
                return out
            analytic_dir = sum(float(np.sum(p.grad * direction[k])) for k, p in net.params.items())
            if direction_probe.offer(analytic_dir, along):
                break
        if direction_probe.analytic:
            worst = max(worst, relative_error(np.array(direction_probe.analytic), np.array(direction_probe.numeric)))
        probes.append(direction_probe)

    targets = min(n_tensors, len(names)) * per_tensor + len(probes) - 1
    if sum(len(pr.analytic) for pr in probes) < 0.5 * targets:
        return float("inf")
    return worst


def run_model_suite(seeds: Iterable[int] = range(10), tol: float = 1e-3) -> CheckResult:
    worst = max(model_gradcheck(s) for s in seeds)
    return CheckResult("model[end-to-end]", worst, tol)


def run_all(tol: float = 1e-4, model_tol: float = 1e-3, n_seeds: int = 10) -> List[CheckResult]:
    results = run_op_suite(range(n_seeds), tol)
    results.append(run_model_suite(range(n_seeds), model_tol))
    return results
