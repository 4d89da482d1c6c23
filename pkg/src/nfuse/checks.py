"""Finite-difference verification suites at four scopes.

``ops``         every primitive op family
``layer``       one encoder layer (B=1, T=4, C=4), all parameters and the input
``block``       TFusion with a 2-layer stack (B=1, C=4, R_f=(3,), |K|=2)
``end_to_end``  cross-entropy through each fuser and the linear head
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from nfuse import ops
from nfuse.gradcheck import finite_difference_grad, relative_error
from nfuse.harness.model import FUSERS, BlockConfig, build_model
from nfuse.params import named_tensors, with_tensors
from nfuse.tensor import Tape, Tensor, grad, precision
from nfuse.tfusion import ModalitySet, tfusion_forward
from nfuse.transformer import encoder_layer, init_encoder_layer, init_encoder_stack

OPS_TOL = 1e-4
LAYER_TOL = 1e-4
BLOCK_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass
class CheckResult:
    scope: str
    name: str
    group: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tol)


def _probe_loss(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(out * W) with fixed random W, so every output element matters."""
    w = Tensor(weights, dtype=out.dtype)
    flat = ops.reshape(ops.mul(out, w), (out.size,))
    return ops.sum(flat, axis=0)


def compare_gradients(scope: str, name: str, loss_fn: Callable[[dict], Tensor],
                      inputs: dict[str, Tensor], tol: float, h: float = 1e-5) -> list[CheckResult]:
    """Analytic vs central-difference gradient of ``loss_fn`` for each named input."""
    leaves = {k: Tensor(v.data, grad_enabled=True, dtype=v.dtype) for k, v in inputs.items()}
    with Tape() as tape:
        loss = loss_fn(leaves)
    analytic = grad(loss, list(leaves.values()), tape)
    results = []
    for (key, leaf), g in zip(leaves.items(), analytic):
        numeric = finite_difference_grad(lambda x, key=key: loss_fn({**leaves, key: x}), leaf, h)
        results.append(CheckResult(scope, name, key, relative_error(g, numeric), tol))
    return results


def _op_cases(rng: np.random.Generator) -> list[tuple[str, Callable, dict]]:
    def arr(*shape):
        return Tensor(rng.normal(size=shape))

    def away_from_zero(*shape):
        return Tensor(rng.choice([-1, 1], size=shape) * rng.uniform(0.1, 2.0, size=shape))

    def distinct(*shape):
        n = int(np.prod(shape))
        return Tensor(rng.permutation(np.linspace(-2, 2, n)).reshape(shape))

    def unary(fn, x):
        return lambda d: fn(d["x"]), {"x": x}

    labels = np.array([0, 2, 1, 1, 0])
    cases = [
        ("add", lambda d: ops.add(d["a"], d["b"]), {"a": arr(3, 4), "b": arr(3, 4)}),
        ("sub", lambda d: ops.sub(d["a"], d["b"]), {"a": arr(3, 4), "b": arr(3, 4)}),
        ("mul", lambda d: ops.mul(d["a"], d["b"]), {"a": arr(3, 4), "b": arr(3, 4)}),
        ("scale", *unary(lambda x: ops.scale(x, 1.7), arr(3, 4))),
        ("exp", *unary(ops.exp, Tensor(rng.uniform(-2, 2, size=(3, 4))))),
        ("relu", *unary(ops.relu, away_from_zero(3, 4))),
        ("gelu", *unary(ops.gelu, arr(3, 4))),
        ("sum", *unary(lambda x: ops.sum(x, axis=1), arr(3, 4, 2))),
        ("mean", *unary(lambda x: ops.mean(x, axis=0, keepdims=True), arr(3, 4, 2))),
        ("max", *unary(lambda x: ops.max(x, axis=1), distinct(3, 4, 2))),
        ("reshape", *unary(lambda x: ops.reshape(x, (6, 4)), arr(2, 3, 4))),
        ("transpose_last_two", *unary(ops.transpose_last_two, arr(2, 3, 4))),
        ("concat", lambda d: ops.concat([d["a"], d["b"]], axis=1), {"a": arr(2, 3), "b": arr(2, 5)}),
        ("split", lambda d: ops.concat(ops.split(d["x"], 1, [3, 5])[::-1], axis=1), {"x": arr(2, 8)}),
        ("matmul", lambda d: ops.matmul(d["a"], d["b"]), {"a": arr(2, 4, 5), "b": arr(2, 5, 3)}),
        ("softmax", *unary(lambda x: ops.softmax(x, axis=-1), arr(3, 5))),
        ("layer_norm", lambda d: ops.layer_norm(d["x"], d["gamma"], d["beta"]),
         {"x": arr(3, 6), "gamma": arr(6), "beta": arr(6)}),
        ("linear", lambda d: ops.linear(d["x"], d["w"], d["b"]), {"x": arr(2, 3, 4), "w": arr(4, 5), "b": arr(5)}),
        ("bias_add", lambda d: ops.bias_add(d["x"], d["b"]), {"x": arr(2, 3, 4), "b": arr(4)}),
        ("cross_entropy", lambda d: ops.cross_entropy(d["x"], labels), {"x": arr(5, 3)}),
    ]
    return cases


def check_ops(rng: np.random.Generator) -> list[CheckResult]:
    results = []
    for name, fn, inputs in _op_cases(rng):
        weights = rng.normal(size=fn(inputs).shape)
        results += compare_gradients("ops", name, lambda d, fn=fn, w=weights: _probe_loss(fn(d), w),
                                     inputs, OPS_TOL)
    return results


def _param_check(scope: str, name: str, structure, extra: dict, forward, rng, tol) -> list[CheckResult]:
    params = named_tensors(structure)
    inputs = {**{f"param:{k}": v for k, v in params.items()}, **extra}

    def build(d):
        return with_tensors(structure, {k[6:]: v for k, v in d.items() if k.startswith("param:")})

    probe = forward(build(inputs), inputs)
    weights = rng.normal(size=probe.shape)
    return compare_gradients(scope, name, lambda d: _probe_loss(forward(build(d), d), weights), inputs, tol)


def check_layer(rng: np.random.Generator) -> list[CheckResult]:
    layer = init_encoder_layer(4, rng, num_heads=2)
    layer = with_tensors(layer, {k: Tensor(rng.normal(scale=0.5, size=v.shape)) for k, v in named_tensors(layer).items()})
    z = Tensor(rng.normal(size=(1, 4, 4)))
    return _param_check("layer", "encoder_layer", layer, {"z": z},
                        lambda p, d: encoder_layer(d["z"], p), rng, LAYER_TOL)


def check_block(rng: np.random.Generator) -> list[CheckResult]:
    stack = init_encoder_stack(4, depth=2, num_heads=2, rng=rng)
    stack = with_tensors(stack, {k: Tensor(rng.normal(scale=0.5, size=v.shape)) for k, v in named_tensors(stack).items()})
    extra = {"f1": Tensor(rng.normal(size=(1, 4, 3))), "f2": Tensor(rng.normal(size=(1, 4, 3)))}

    def forward(s, d):
        return tfusion_forward(ModalitySet({1: d["f1"], 2: d["f2"]}, 4), s)

    return _param_check("block", "tfusion", stack, extra, forward, rng, BLOCK_TOL)


def check_end_to_end(rng: np.random.Generator, fusers: Sequence[str] = FUSERS) -> list[CheckResult]:
    results = []
    labels = np.array([0, 2])
    for fuser in fusers:
        model = build_model(fuser, 3, 4, (3,), 3, BlockConfig(depth=2, heads=2, conv_depth=2), rng)
        params = {k: Tensor(rng.normal(scale=0.5, size=v.shape)) for k, v in model.parameters().items()}
        model = model.with_parameters(params)
        inputs = {f"param:{k}": v for k, v in params.items()}
        inputs.update({f"f{k}": Tensor(rng.normal(size=(2, 4, 3))) for k in (1, 3)})

        def loss_fn(d, model=model):
            m = model.with_parameters({k[6:]: v for k, v in d.items() if k.startswith("param:")})
            return ops.cross_entropy(m.logits(ModalitySet({1: d["f1"], 3: d["f3"]}, 3)), labels)

        results += compare_gradients("end_to_end", fuser, loss_fn, inputs, END_TO_END_TOL)
    return results


SCOPES = {
    "ops": check_ops,
    "layer": check_layer,
    "block": check_block,
    "end_to_end": check_end_to_end,
}


def run_gradcheck(scopes: Sequence[str], seed: int = 0, precision_name: str = "f64") -> list[CheckResult]:
    results = []
    with precision(precision_name):
        for scope in scopes:
            results += SCOPES[scope](np.random.default_rng([seed, list(SCOPES).index(scope)]))
    return results
