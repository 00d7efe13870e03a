"""Central finite-difference verification of tape gradients.

The checker replays a deterministic scalar-loss builder, compares each
parameter's tape gradient against a two-sided difference quotient, and
reports the worst relative error per parameter.  Float64 parameters get a
smaller step and a correspondingly tighter expected tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as ops
from .optim import Parameter, zero_grads
from .tensor import Rng, Tensor, no_grad, uniform

__all__ = ["grad_check", "GradCheckReport", "ParamCheck",
           "STEP_F32", "STEP_F64", "CHECKED_OPS", "op_instance",
           "run_op_battery"]

STEP_F32 = 1e-3
STEP_F64 = 1e-5

# Elements above this count get a seeded random subsample instead of an
# exhaustive sweep.
SUBSAMPLE_ABOVE = 1000


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    checked: int
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    def __str__(self):
        lines = [f"grad check vs central differences (tolerance {self.tolerance:g})"]
        for p in self.params:
            mark = "ok" if p.passed else "FAIL"
            lines.append(
                f"  {mark:4s} {p.name}: max rel err {p.max_rel_error:.3e} "
                f"over {p.checked} elements")
        return "\n".join(lines)


def _rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1.0)


def grad_check(build_loss: Callable[[], Tensor],
               params: Sequence[Parameter],
               tolerance: float,
               step: float | None = None,
               names: Sequence[str] | None = None,
               rng: Rng | None = None) -> GradCheckReport:
    """Compare tape gradients with central differences for every parameter.

    ``build_loss`` must be a deterministic function of the current parameter
    values.  Parameters larger than ``SUBSAMPLE_ABOVE`` elements are probed
    on a seeded random subsample.  Failures are flagged in the report, never
    raised.
    """
    if names is None:
        names = [f"param{i}" for i in range(len(params))]
    if rng is None:
        rng = Rng(0)

    zero_grads(params)
    loss = build_loss()
    loss.backward()
    analytic = [p.tensor.grad.copy() for p in params]
    zero_grads(params)

    report = GradCheckReport(tolerance=tolerance)
    for p, grad, name in zip(params, analytic, names):
        data = p.tensor.data
        h = step
        if h is None:
            h = STEP_F64 if data.dtype == np.float64 else STEP_F32
        flat = data.reshape(-1)
        gflat = grad.reshape(-1)
        if flat.size > SUBSAMPLE_ABOVE:
            idx = np.unique(rng.integers(SUBSAMPLE_ABOVE, flat.size))
        else:
            idx = np.arange(flat.size)
        worst = 0.0
        for i in idx:
            keep = flat[i]
            flat[i] = keep + h
            with no_grad():
                up = build_loss().item()
            flat[i] = keep - h
            with no_grad():
                down = build_loss().item()
            flat[i] = keep
            numeric = (up - down) / (2.0 * h)
            worst = max(worst, _rel_error(float(gflat[i]), numeric))
        report.params.append(
            ParamCheck(name=name, max_rel_error=worst,
                       checked=int(len(idx)), passed=worst < tolerance))
    return report


# ---------------------------------------------------------------------------
# Standard battery: one random instance per differentiable operation
# ---------------------------------------------------------------------------

CHECKED_OPS = (
    "conv2d", "conv2d_transpose", "up2_nearest", "down2_average",
    "leaky_relu", "tanh", "sigmoid", "log", "absolute", "clamp",
    "concat_channels", "add", "mul", "reshape", "reduce_mean",
)


def _p(shape, rng, dtype, lo=-1.0, hi=1.0):
    return Parameter(uniform(shape, rng, lo, hi, dtype=dtype))


def _p_signed_gap(shape, rng, dtype, lo=0.1, hi=1.0):
    """Both signs, magnitudes in [lo, hi]: clears kinks at 0 by > FD step."""
    mag = rng.uniform(shape, lo, hi)
    sign = np.where(rng.uniform(shape) < 0.5, -1.0, 1.0)
    return Parameter(Tensor((mag * sign).astype(dtype)))


def op_instance(name: str, rng: Rng, dtype=np.float32,
                ) -> tuple[Callable[[], Tensor], list[Parameter]]:
    """Deterministic random (loss builder, parameters) pair for one op.

    Inputs are kept away from non-differentiable points (relu kinks, abs
    zero, clamp edges) since central differences cannot straddle those.
    """
    if name == "conv2d":
        x = _p([1, 2, 6, 6], rng, dtype)
        k = _p([3, 2, 3, 3], rng, dtype)
        b = _p([3], rng, dtype)
        return (lambda: ops.reduce_mean(ops.tanh(ops.conv2d(
            x.tensor, k.tensor, b.tensor, stride=2, padding=1))), [x, k, b])
    if name == "conv2d_transpose":
        x = _p([1, 3, 4, 4], rng, dtype)
        k = _p([3, 2, 3, 3], rng, dtype)
        b = _p([2], rng, dtype)
        return (lambda: ops.reduce_mean(ops.tanh(ops.conv2d_transpose(
            x.tensor, k.tensor, b.tensor, stride=2, padding=1))), [x, k, b])
    if name == "up2_nearest":
        x = _p([1, 2, 4, 4], rng, dtype)
        return (lambda: ops.reduce_mean(ops.tanh(ops.up2_nearest(x.tensor))),
                [x])
    if name == "down2_average":
        x = _p([1, 2, 6, 6], rng, dtype)
        return (lambda: ops.reduce_mean(ops.tanh(ops.down2_average(x.tensor))),
                [x])
    if name == "leaky_relu":
        v = _p_signed_gap([33], rng, dtype)
        return (lambda: ops.reduce_mean(ops.leaky_relu(v.tensor, 0.2)), [v])
    if name == "tanh":
        v = _p([33], rng, dtype)
        return (lambda: ops.reduce_mean(ops.tanh(v.tensor)), [v])
    if name == "sigmoid":
        v = _p([33], rng, dtype)
        return (lambda: ops.reduce_mean(ops.sigmoid(v.tensor)), [v])
    if name == "log":
        v = _p([33], rng, dtype, 0.2, 0.9)
        return (lambda: ops.reduce_mean(ops.log(v.tensor)), [v])
    if name == "absolute":
        v = _p([33], rng, dtype, 0.2, 0.9)
        return (lambda: ops.reduce_mean(ops.absolute(v.tensor)), [v])
    if name == "clamp":
        v = _p([33], rng, dtype)
        return (lambda: ops.reduce_mean(ops.clamp(v.tensor, -0.95, 0.95)), [v])
    if name == "concat_channels":
        a = _p([1, 2, 4, 4], rng, dtype)
        b = _p([1, 3, 4, 4], rng, dtype)
        return (lambda: ops.reduce_mean(ops.tanh(
            ops.concat_channels(a.tensor, b.tensor))), [a, b])
    if name == "add":
        a = _p([17], rng, dtype)
        return (lambda: ops.reduce_mean(a.tensor + ops.tanh(a.tensor)), [a])
    if name == "mul":
        a = _p([17], rng, dtype)
        b = _p([17], rng, dtype)
        return (lambda: ops.reduce_mean(a.tensor * b.tensor), [a, b])
    if name == "reshape":
        v = _p([24], rng, dtype)
        return (lambda: ops.reduce_mean(ops.tanh(
            ops.reshape(v.tensor, [2, 3, 4]))), [v])
    if name == "reduce_mean":
        v = _p([17], rng, dtype)
        return (lambda: ops.reduce_mean(v.tensor) * 3.0, [v])
    raise ValueError(f"unknown op {name!r}")


def run_op_battery(instances: int, dtype, tolerance: float,
                   seed: int = 0) -> GradCheckReport:
    """Check every op against central differences over N random instances."""
    rng = Rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name in CHECKED_OPS:
        worst = 0.0
        checked = 0
        for i in range(instances):
            build, params = op_instance(name, rng.fork(), dtype)
            sub = grad_check(build, params, tolerance,
                             names=[name] * len(params))
            worst = max(worst, sub.max_rel_error)
            checked += sum(p.checked for p in sub.params)
        report.params.append(ParamCheck(
            name=f"{name} x{instances}", max_rel_error=worst,
            checked=checked, passed=worst < tolerance))
    return report
