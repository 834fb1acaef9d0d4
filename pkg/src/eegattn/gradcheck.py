"""Finite-difference sweep over every differentiable op and layer.

Each case reduces its output to a scalar with a fixed random weighting so
no gradient component is trivially constant, then compares autograd
against central differences for several seeds.
"""

from __future__ import annotations

import time
from dataclasses import replace
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .layers import (
    ModelConfig,
    avg_pool_time,
    batch_norm,
    classify_features,
    conv_feature_extractor,
    dropout,
    encoder_block,
    init_params,
    layer_norm,
    model_forward,
    multi_head_attention,
    tokenize,
)
from .tensor import GradCheckReport, Tensor, finite_diff_check
from .training import squared_hinge_loss

TOY_CONFIG = ModelConfig(
    n_channels=4,
    n_samples=64,
    sampling_rate=64.0,
    n_classes=3,
    temporal_filters=2,
    depth_multiplier=2,
    pointwise_filters=4,
    separable_kernel_len=4,
    pool1=4,
    pool2=8,
    d_model=8,
    n_heads=2,
    n_encoder_layers=2,
    ffn_dim=16,
)
TOY_BATCH = 2
# smaller input for layer-level checks, keeps the sweep fast
LAYER_CONFIG = replace(TOY_CONFIG, n_channels=3, n_samples=32, sampling_rate=32.0, pool1=2, pool2=4, patch_size=2)


def _weighted(fn: Callable[[Tensor], Tensor], shape_probe, rng) -> Callable[[Tensor], Tensor]:
    out_shape = fn(Tensor(shape_probe)).shape
    c = rng.standard_normal(out_shape)
    return lambda t: (fn(t) * c).sum()


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin, x)


def _model_params(rng, cfg=TOY_CONFIG):
    params = init_params(cfg, int(rng.integers(2**31)))
    # perturb so biases, norms and embeddings are not at their trivial init
    for t in params.tensors.values():
        t.data += 0.1 * rng.standard_normal(t.shape)
    for name in params.buffers:
        if name.endswith("running_var"):
            params.buffers[name][:] = rng.uniform(0.5, 1.5, params.buffers[name].shape)
        elif name.endswith("running_mean"):
            params.buffers[name][:] = 0.1 * rng.standard_normal(params.buffers[name].shape)
    return params


def _with_param(params, name: str, fn):
    """Wrap ``fn(params)`` so that parameter ``name`` is the checked input."""
    def op(t: Tensor) -> Tensor:
        saved = params.tensors[name]
        params.tensors[name] = t
        try:
            return fn(params)
        finally:
            params.tensors[name] = saved
    return op


def cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable, np.ndarray]]]:
    """Map op name -> builder returning (scalar op, input) for one seed."""
    cfg = TOY_CONFIG

    def unary(fn, shape=(3, 4), positive=False, kink=False):
        def build(rng):
            if positive:
                x = rng.uniform(0.5, 2.0, shape)
            elif kink:
                x = _away_from_zero(rng, shape)
            else:
                x = rng.standard_normal(shape)
            return _weighted(fn, x, rng), x
        return build

    def binary(fn, shape_a, shape_b, positive_b=False):
        def build(rng):
            a = rng.standard_normal(shape_a)
            b = rng.uniform(0.5, 2.0, shape_b) if positive_b else rng.standard_normal(shape_b)
            x = np.concatenate([a.ravel(), b.ravel()])
            na = a.size

            def split(t):
                return t[:na].reshape(shape_a), t[na:].reshape(shape_b)

            return _weighted(lambda t: fn(*split(t)), x, rng), x
        return build

    def bn_case(rng):
        params = _model_params(rng)
        x = rng.standard_normal((3, cfg.temporal_filters, 2, 5))

        def fn(t):
            # running-moment updates are side effects; the output uses batch stats
            return batch_norm(t, params, "bn1", training=True)

        return _weighted(fn, x, rng), x

    def ln_case(rng):
        x = rng.standard_normal((2, 3, 6))
        g = rng.standard_normal(6)
        b = rng.standard_normal(6)
        return _weighted(lambda t: layer_norm(t, Tensor(g), Tensor(b)), x, rng), x

    def dropout_case(rng):
        x = rng.standard_normal((4, 5))
        seed = int(rng.integers(2**31))
        fn = lambda t: dropout(t, 0.3, True, np.random.default_rng(seed))
        return _weighted(fn, x, rng), x

    def feature_case(training):
        def build(rng):
            lcfg = LAYER_CONFIG
            params = _model_params(rng, lcfg)
            x = rng.standard_normal((TOY_BATCH, 1, lcfg.n_channels, lcfg.n_samples))
            seed = int(rng.integers(2**31))
            fn = lambda t: conv_feature_extractor(t, params, lcfg, training, np.random.default_rng(seed))
            return _weighted(fn, x, rng), x
        return build

    def tokenize_case(rng):
        lcfg = LAYER_CONFIG
        params = _model_params(rng, lcfg)
        x = rng.standard_normal((TOY_BATCH, lcfg.pointwise_filters, 1, lcfg.pooled_len))
        return _weighted(lambda t: tokenize(t, params, lcfg), x, rng), x

    def mha_case(rng):
        params = _model_params(rng)
        x = rng.standard_normal((TOY_BATCH, cfg.n_tokens + 1, cfg.d_model))
        return _weighted(lambda t: multi_head_attention(t, params, "enc0.", cfg)[0], x, rng), x

    def encoder_case(rng):
        params = _model_params(rng)
        x = rng.standard_normal((TOY_BATCH, cfg.n_tokens + 1, cfg.d_model))
        seed = int(rng.integers(2**31))
        fn = lambda t: encoder_block(t, params, 0, cfg, True, np.random.default_rng(seed))[0]
        return _weighted(fn, x, rng), x

    def head_case(rng):
        params = _model_params(rng)
        x = rng.standard_normal((TOY_BATCH, cfg.pointwise_filters, 1, cfg.pooled_len))
        return _weighted(lambda t: classify_features(t, params, cfg)[0], x, rng), x

    def hinge_case(rng):
        x = rng.standard_normal((4, 5)) * 2.0
        labels = rng.integers(0, 5, size=4)
        # keep every margin away from the kink at exactly 1
        targets = -np.ones((4, 5))
        targets[np.arange(4), labels] = 1
        m = 1 - targets * x
        x = np.where(np.abs(m) < 0.05, x - 0.1 * targets, x)
        return (lambda t: squared_hinge_loss(t, labels)), x

    # training mode: batch statistics and (fixed-seed) dropout masks are live
    def model_loss_case(training):
        def build(rng):
            params = _model_params(rng)
            x = rng.standard_normal((TOY_BATCH, 1, cfg.n_channels, cfg.n_samples))
            labels = rng.integers(0, cfg.n_classes, size=TOY_BATCH)
            seed = int(rng.integers(2**31))

            def op(t):
                scores, _ = model_forward(t, params, cfg, training, np.random.default_rng(seed))
                return squared_hinge_loss(scores, labels)

            return op, x
        return build

    def model_param_case(rng):
        params = _model_params(rng)
        x = rng.standard_normal((TOY_BATCH, 1, cfg.n_channels, cfg.n_samples))
        labels = rng.integers(0, cfg.n_classes, size=TOY_BATCH)
        names = [n for n in params.tensors if params.tensors[n].size <= 64]
        name = names[int(rng.integers(len(names)))]
        seed = int(rng.integers(2**31))

        def fn(p):
            scores, _ = model_forward(Tensor(x), p, cfg, True, np.random.default_rng(seed))
            return squared_hinge_loss(scores, labels)

        return _with_param(params, name, fn), params[name].data.copy()

    return {
        "add": binary(T.add, (3, 4), (1, 4)),
        "sub": binary(T.sub, (3, 4), (3, 1)),
        "mul": binary(T.mul, (2, 3, 4), (3, 4)),
        "div": binary(T.div, (3, 4), (3, 4), positive_b=True),
        "matmul": binary(T.matmul, (2, 3, 4), (4, 5)),
        "einsum": binary(lambda a, b: T.einsum("bct,fc->bft", a, b), (2, 3, 5), (4, 3)),
        "sum": unary(lambda t: T.tsum(t, axis=1, keepdims=True)),
        "mean": unary(lambda t: T.mean(t, axis=(0, 1))),
        "reshape": unary(lambda t: t.reshape(4, 3)),
        "transpose": unary(lambda t: t.transpose(2, 0, 1), shape=(2, 3, 4)),
        "broadcast_to": unary(lambda t: T.broadcast_to(t, (3, 2, 4)), shape=(2, 1)),
        "getitem": unary(lambda t: t[:, 1:3], shape=(3, 4)),
        "concat": binary(lambda a, b: T.concat([a, b], axis=1), (2, 3), (2, 2)),
        "pow": unary(lambda t: t**3),
        "sqrt": unary(T.sqrt, positive=True),
        "exp": unary(T.exp),
        "log": unary(T.log, positive=True),
        "relu": unary(T.relu, kink=True),
        "elu": unary(T.elu, kink=True),
        "softmax": unary(lambda t: T.softmax(t, axis=-1), shape=(3, 5)),
        "sliding_windows": unary(lambda t: T.sliding_windows(t, 4, 1, 2), shape=(2, 9)),
        "conv_time": binary(lambda a, b: T.conv_time(a, b, 3, 4), (2, 3, 12), (2, 8)),
        "avg_pool": unary(lambda t: avg_pool_time(t, 3), shape=(2, 3, 10)),
        "dropout": dropout_case,
        "batch_norm": bn_case,
        "layer_norm": ln_case,
        "squared_hinge_loss": hinge_case,
        "conv_feature_extractor[eval]": feature_case(False),
        "conv_feature_extractor[train]": feature_case(True),
        "tokenize": tokenize_case,
        "multi_head_attention": mha_case,
        "encoder_block": encoder_case,
        "classify_features": head_case,
        "model+loss": model_loss_case(True),
        "model+loss[params]": model_param_case,
    }


def run_suite(seeds: Iterable[int] = range(20), tol: float = 1e-4, eps: float = 1e-5,
              names=None) -> list[GradCheckReport]:
    """One report per op: the worst relative error over all seeds."""
    seeds = list(seeds)
    reports = []
    for name, build in cases().items():
        if names and name not in names:
            continue
        worst = 0.0
        for seed in seeds:
            op, x = build(np.random.default_rng([seed, len(name)]))
            worst = max(worst, finite_diff_check(op, x, eps=eps, tol=tol, name=name).max_rel_error)
        reports.append(GradCheckReport(name, worst, worst < tol))
    return reports


def suite_document(seeds, tol: float, eps: float = 1e-5) -> tuple[dict, float]:
    t0 = time.perf_counter()
    reports = run_suite(seeds, tol, eps)
    elapsed = time.perf_counter() - t0
    doc = {
        "kind": "eegattn.gradcheck",
        "tolerance": tol,
        "eps": eps,
        "seeds": list(seeds),
        "toy_config": TOY_CONFIG.to_dict(),
        "passed": all(r.passed for r in reports),
        "ops": [{"op": r.op_name, "max_rel_error": r.max_rel_error, "passed": r.passed} for r in reports],
    }
    return doc, elapsed
