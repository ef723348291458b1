# cbam/services/gradcheck.py
"""
Gradient audit: compare tape gradients with central finite differences.

Every case draws fresh inputs in [-2, 2] and parameters from N(0, 0.1) per trial and
differentiates the scalar sum(out ⊙ R) for a random direction R. Inputs that feed a max or
a relu are evenly spaced values in shuffled order, so no perturbation crosses a kink.
"""
import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from django.conf import settings

from cbam.exceptions import ConfigError, GradientMismatch
from cbam.services import tensor as T
from cbam.services.attention import (
    Arrangement,
    CbamVariant,
    PoolingMode,
    SpatialDescriptor,
    cbam_forward,
    channel_attention,
    init_cbam,
    init_channel_params,
    init_spatial_params,
    se_forward,
    spatial_attention,
)
from cbam.services.tensor import GradTape, Tensor, backward, finite_diff_grad, relative_error
from cbam.services.zoo import AttentionKind, ResidualBlockSpec, TinyNetSpec, block_forward, init_params

PARAM_STD = 0.1


def _uniform(rng, shape) -> Tensor:
    return Tensor(rng.uniform(-2.0, 2.0, size=shape))


def _spaced(rng, shape) -> Tensor:
    """Distinct values spread over [-2, 2], none of them zero, in random order."""
    n = int(np.prod(shape))
    values = -2.0 + 4.0 * (np.arange(n) + 0.25) / n
    return Tensor(rng.permutation(values).reshape(shape))


def _param(rng, shape) -> Tensor:
    return T.normal(shape, PARAM_STD, rng)


def _redraw(rng, tensors: dict) -> dict:
    return {name: _param(rng, t.shape) for name, t in tensors.items()}


@dataclass(frozen=True)
class GradCase:
    """build(rng) returns (fn, inputs): fn maps the inputs dict to one output Tensor."""
    name: str
    build: Callable[[np.random.Generator], tuple]
    composed: bool = False


# --- Case builders ----------------------------------------------------------
def _binary(op, shape_a, shape_b):
    def build(rng):
        return (lambda v: op(v["a"], v["b"])), {"a": _uniform(rng, shape_a), "b": _uniform(rng, shape_b)}
    return build


def _unary(op, shape, spaced=False):
    def build(rng):
        x = _spaced(rng, shape) if spaced else _uniform(rng, shape)
        return (lambda v: op(v["x"])), {"x": x}
    return build


def _conv(k):
    def build(rng):
        inputs = {"x": _uniform(rng, (2, 3, 5, 5)), "kernel": _param(rng, (2, 3, k, k)), "bias": _param(rng, (2,))}
        return (lambda v: T.conv2d(v["x"], v["kernel"], v["bias"], (k - 1) // 2)), inputs
    return build


def _linear(rng):
    return (lambda v: T.linear(v["x"], v["w"])), {"x": _uniform(rng, (4, 6)), "w": _param(rng, (3, 6))}


def _cross_entropy(rng):
    labels = [int(y) for y in rng.integers(0, 5, size=4)]
    return (lambda v: T.cross_entropy(v["logits"], labels)), {"logits": _uniform(rng, (4, 5))}


def _channel_gate(pooling):
    def build(rng):
        p = init_channel_params(4, 2, pooling, rng)
        inputs = {"f": _spaced(rng, (2, 4, 3, 3)), **_redraw(rng, p.tensors())}
        return (lambda v: channel_attention(v["f"], dataclasses.replace(p, w0=v["w0"], w1=v["w1"]))), inputs
    return build


def _spatial_gate(descriptor, k):
    def build(rng):
        p = init_spatial_params(4, k, descriptor, rng)
        inputs = {"f": _spaced(rng, (2, 4, 4, 4)), **_redraw(rng, p.tensors())}

        def fn(v):
            return spatial_attention(v["f"], dataclasses.replace(
                p, kernel=v["kernel"], bias=v["bias"], reduce=v.get("reduce")))
        return fn, inputs
    return build


def _se(rng):
    p = init_channel_params(4, 2, PoolingMode.AVG_ONLY, rng)
    inputs = {"f": _uniform(rng, (2, 4, 3, 3)), **_redraw(rng, p.tensors())}
    return (lambda v: se_forward(v["f"], dataclasses.replace(p, w0=v["w0"], w1=v["w1"]))), inputs


def _cbam(arrangement):
    def build(rng):
        cfg = init_cbam(CbamVariant(arrangement=arrangement, kernel_size=7, reduction_ratio=2), 4, rng)
        inputs = {"f": _spaced(rng, (1, 4, 5, 5)), **_redraw(rng, cfg.tensors())}

        def fn(v):
            return cbam_forward(v["f"], cfg.with_tensors({k: t for k, t in v.items() if k != "f"}))
        return fn, inputs
    return build


def _residual_block(rng):
    """CBAM-gated stride-2 block with a projection shortcut."""
    block = ResidualBlockSpec(in_channels=2, out_channels=3, attention=AttentionKind.CBAM,
                              cbam=CbamVariant(kernel_size=3, reduction_ratio=2), stride=2)
    net = TinyNetSpec(in_channels=2, stem_channels=2, blocks=(block,), num_classes=2)
    prefix = "blocks.0."
    weights = {k: t for k, t in init_params(net, 0).items() if k.startswith(prefix)}
    inputs = {"x": _spaced(rng, (1, 2, 4, 4)), **_redraw(rng, weights)}
    return (lambda v: block_forward(v["x"], block, v, "blocks.0")), inputs


CASES = {case.name: case for case in [
    GradCase("add", _binary(T.add, (2, 3, 4, 4), (1, 3, 1, 1))),
    GradCase("sub", _binary(T.sub, (2, 3), (2, 3))),
    GradCase("broadcast_mul", _binary(T.broadcast_mul, (2, 3, 4, 4), (2, 3, 1, 1))),
    GradCase("scale", _unary(lambda x: T.scale(x, 1.7), (2, 3, 3))),
    GradCase("relu", _unary(T.relu, (2, 3, 4, 4), spaced=True)),
    GradCase("sigmoid", _unary(T.sigmoid, (2, 3, 4, 4))),
    GradCase("reshape", _unary(lambda x: T.reshape(x, (2, 48)), (2, 3, 4, 4))),
    GradCase("concat_channel", _binary(T.concat_channel, (2, 2, 3, 3), (2, 3, 3, 3))),
    GradCase("downsample", _unary(T.downsample, (2, 3, 5, 5))),
    GradCase("sum_all", _unary(T.sum_all, (2, 3, 3, 3))),
    GradCase("mean_all", _unary(T.mean_all, (2, 3, 3, 3))),
    GradCase("linear", _linear),
    GradCase("conv2d_k1", _conv(1)),
    GradCase("conv2d_k3", _conv(3)),
    GradCase("conv2d_k7", _conv(7)),
    GradCase("global_avg_pool_spatial", _unary(T.global_avg_pool_spatial, (2, 3, 4, 4))),
    GradCase("global_max_pool_spatial", _unary(T.global_max_pool_spatial, (2, 3, 4, 4), spaced=True)),
    GradCase("channel_avg_pool", _unary(T.channel_avg_pool, (2, 3, 4, 4))),
    GradCase("channel_max_pool", _unary(T.channel_max_pool, (2, 3, 4, 4), spaced=True)),
    GradCase("cross_entropy", _cross_entropy),
    GradCase("channel_attention_avg", _channel_gate(PoolingMode.AVG_ONLY)),
    GradCase("channel_attention_max", _channel_gate(PoolingMode.MAX_ONLY)),
    GradCase("channel_attention_avg_max", _channel_gate(PoolingMode.AVG_AND_MAX)),
    GradCase("spatial_attention_channel_pool", _spatial_gate(SpatialDescriptor.CHANNEL_POOL, 7)),
    GradCase("spatial_attention_one_by_one", _spatial_gate(SpatialDescriptor.ONE_BY_ONE, 3)),
    GradCase("se_forward", _se),
    *[GradCase(f"cbam_{a.value}", _cbam(a), composed=True) for a in Arrangement],
    GradCase("residual_block", _residual_block, composed=True),
]}


# --- Running ----------------------------------------------------------------
@dataclass(frozen=True)
class CheckResult:
    op: str
    trials: int
    max_rel_error: float
    worst_input: str
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def to_dict(self) -> dict:
        return {**dataclasses.asdict(self), "passed": self.passed}


def _projected_loss(fn, direction: np.ndarray):
    return lambda v: T.sum_all(T.broadcast_mul(fn(v), Tensor._wrap(direction)))


def check_case(case: GradCase, trials: int, tol: float, eps: float, rng: np.random.Generator) -> CheckResult:
    worst, worst_input = 0.0, ""
    for _ in range(trials):
        fn, inputs = case.build(rng)
        with T.no_grad():
            out_shape = fn(inputs).shape
        loss = _projected_loss(fn, rng.uniform(-1.0, 1.0, size=out_shape))

        with GradTape() as tape:
            watched = {name: tape.watch(t) for name, t in inputs.items()}
            total = loss(watched)
        grads = backward(tape, total)

        for name, t in inputs.items():
            numeric = finite_diff_grad(lambda x: loss({**inputs, name: x}), t, eps)
            err = relative_error(grads[watched[name].node_id], numeric)
            if err > worst or not worst_input:
                worst, worst_input = err, name
    return CheckResult(op=case.name, trials=trials, max_rel_error=worst, worst_input=worst_input, tol=tol)


def select_cases(op: Optional[str] = None, full_block: bool = False) -> list:
    if op is not None and full_block:
        raise ConfigError("--op and --full-block are mutually exclusive")
    if op is not None:
        if op not in CASES:
            raise ConfigError(f"unknown op {op!r}; choose from {', '.join(CASES)}")
        return [CASES[op]]
    if full_block:
        return [case for case in CASES.values() if case.composed]
    return list(CASES.values())


def run_gradcheck(cases: list, trials: Optional[int] = None, tol: Optional[float] = None,
                  eps: Optional[float] = None, seed: int = 0,
                  on_result: Optional[Callable[[CheckResult], None]] = None) -> list:
    """Check each case in order from one seeded stream; returns the CheckResults."""
    trials = settings.CBAM_GRADCHECK_TRIALS if trials is None else trials
    tol = settings.CBAM_GRADCHECK_TOL if tol is None else tol
    eps = settings.CBAM_GRADCHECK_EPS if eps is None else eps
    if trials < 1:
        raise ConfigError(f"trials must be at least 1, got {trials}")
    if tol <= 0 or eps <= 0:
        raise ConfigError("tol and eps must be positive")
    rng = np.random.default_rng(seed)
    results = []
    for case in cases:
        results.append(check_case(case, trials, tol, eps, rng))
        if on_result is not None:
            on_result(results[-1])
    return results


def assert_gradients(results: list):
    failed = [r for r in results if not r.passed]
    if failed:
        worst = max(failed, key=lambda r: r.max_rel_error)
        raise GradientMismatch(
            f"{len(failed)} op(s) over tolerance; worst {worst.op} "
            f"(input {worst.worst_input}, relative error {worst.max_rel_error:.3e} >= {worst.tol:g})")
