"""Finite-difference checks for every deterministic operator and for whole networks.

All checks run in float64 with central differences (step ``1e-5``).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, GradCheckResult, RngStream, Tensor, gradient_check
from .model import (
    AttentionStageSpec,
    ModelConfig,
    ResidualUnitSpec,
    StemSpec,
    attention_module_forward,
    build_model,
    mask_forward,
    model_logits,
    residual_unit_forward,
)

STEP = 1e-5


def _leaf(rng: RngStream, name: str, shape, scale: float = 1.0) -> Tensor:
    return Tensor(rng.fork(name).normal(shape, std=scale), requires_grad=True)


def _weighted_sum(out: Tensor, rng: RngStream) -> Tensor:
    # a fixed random projection makes every output coordinate matter
    w = Tensor(rng.fork("projection").normal(out.shape))
    return ad.tensor_sum(ad.mul(out, w))


def op_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], dict[str, Tensor]]]:
    """One ``(build, params)`` pair per deterministic operator variant."""
    rng = RngStream(seed)
    cases = {}

    def case(name, leaves, fn):
        r = rng.fork(name)
        params = {k: _leaf(r, k, shape) for k, shape in leaves.items()}
        cases[name] = (lambda: _weighted_sum(fn(params), r), params)

    case("conv2d", {"x": (2, 3, 5, 5), "k": (4, 3, 3, 3), "b": (4,)},
         lambda p: ad.conv2d(p["x"], p["k"], p["b"], stride=1, padding=1))
    case("conv2d_stride2", {"x": (2, 3, 6, 6), "k": (4, 3, 3, 3), "b": (4,)},
         lambda p: ad.conv2d(p["x"], p["k"], p["b"], stride=2, padding=1))
    case("conv2d_1x1", {"x": (2, 3, 4, 4), "k": (2, 3, 1, 1), "b": (2,)},
         lambda p: ad.conv2d(p["x"], p["k"], p["b"], stride=2))
    case("maxpool2d", {"x": (2, 2, 6, 6)}, lambda p: ad.maxpool2d(p["x"], 2, 2))
    case("maxpool2d_overlap", {"x": (1, 2, 7, 7)}, lambda p: ad.maxpool2d(p["x"], 3, 2))
    case("bilinear_upsample", {"x": (2, 2, 3, 4)}, lambda p: ad.bilinear_upsample(p["x"], 6, 7))
    case("add", {"a": (3, 4), "b": (3, 4)}, lambda p: ad.add(p["a"], p["b"]))
    case("mul", {"a": (3, 4), "b": (3, 4)}, lambda p: ad.mul(p["a"], p["b"]))
    case("relu", {"a": (4, 5)}, lambda p: ad.relu(p["a"]))
    case("sigmoid", {"a": (4, 5)}, lambda p: ad.sigmoid(p["a"]))
    case("add_scalar", {"a": (4, 5)}, lambda p: ad.add_scalar(p["a"], 1.0))
    case("global_avg_pool", {"x": (2, 3, 4, 4)}, lambda p: ad.global_avg_pool(p["x"]))
    case("dense", {"x": (3, 4), "w": (4, 5), "b": (5,)}, lambda p: ad.dense(p["x"], p["w"], p["b"]))
    case("softmax", {"z": (3, 4)}, lambda p: ad.softmax(p["z"]))

    bn_shape = {"x": (3, 2, 3, 3), "g": (2,), "b": (2,)}
    case("batchnorm_train", bn_shape,
         lambda p: ad.batchnorm(p["x"], p["g"], p["b"], BatchNormState.fresh(2), "train"))
    infer_state = BatchNormState(np.array([0.3, -0.2]), np.array([1.5, 0.7]))
    case("batchnorm_infer", bn_shape, lambda p: ad.batchnorm(p["x"], p["g"], p["b"], infer_state, "infer"))

    r = rng.fork("softmax_cross_entropy")
    z = _leaf(r, "z", (4, 5))
    y = np.eye(5)[r.integers(0, 5, size=4)]
    cases["softmax_cross_entropy"] = (lambda: ad.softmax_cross_entropy(z, y), {"z": z})
    return cases


def _small_params(config: ModelConfig, seed: int):
    params = build_model(config, RngStream(seed).fork("init"), dtype=np.float64)
    # non-trivial BN affine parameters so their gradients are exercised
    r = RngStream(seed).fork("affine")
    for name, t in params.items():
        if name.endswith(".gamma"):
            t.data[:] = 1.0 + 0.2 * r.fork(name).normal(t.shape)
        elif name.endswith(".beta") or name.endswith(".bias"):
            t.data[:] = 0.1 * r.fork(name).normal(t.shape)
    return params


def module_cases(seed: int = 0, channels: int = 3, size: int = 8):
    """Residual units, mask branch and attention modules on a small random input."""
    rng = RngStream(seed).fork("modules")
    stage = AttentionStageSpec(channels, p=1, t=2, r=1, mask_depth=2)
    config = ModelConfig(
        input_shape=(channels, 2 * size, 2 * size),
        stages=(stage,),
        tail=0,
        num_classes=2,
        dropout_rate=0.0,
        stem=StemSpec(out_channels=channels),
    )
    params = _small_params(config, seed)
    prefix = "stage1.attn"
    x = _leaf(rng, "x", (2, channels, size, size))
    cases = {}

    def pick(pred):
        out = {k: t for k, t in params.items() if pred(k)}
        out["input"] = x
        return out

    cases["residual_unit"] = (
        lambda: _weighted_sum(residual_unit_forward(x, ResidualUnitSpec(channels, channels), params,
                                                    f"{prefix}.pre.unit0", "train"), rng),
        pick(lambda k: k.startswith(f"{prefix}.pre.unit0.")),
    )
    xd = _leaf(rng, "xd", (2, channels, size, size))
    cases["residual_unit_stride2"] = (
        lambda: _weighted_sum(residual_unit_forward(xd, ResidualUnitSpec(channels, channels, 2), params,
                                                    "stage1.down", "train"), rng),
        {**{k: t for k, t in params.items() if k.startswith("stage1.down.")}, "input": xd},
    )
    cases["mask_branch"] = (
        lambda: _weighted_sum(mask_forward(x, stage, params, prefix, "train"), rng),
        pick(lambda k: k.startswith(f"{prefix}.mask.")),
    )
    for mode in ("residual", "naive"):
        cases[f"attention_module_{mode}"] = (
            lambda mode=mode: _weighted_sum(
                attention_module_forward(x, stage, params, prefix, "train", attention_mode=mode), rng
            ),
            pick(lambda k: k.startswith(prefix)),
        )
    return cases


def calibrate_batchnorm(config: ModelConfig, params, batch: Tensor) -> None:
    """Set every running statistic to the statistics of ``batch`` (one train-mode pass, momentum 0)."""
    saved = {k: s.momentum for k, s in params.bn.items()}
    for s in params.bn.values():
        s.momentum = 0.0
    with ad.no_grad():
        model_logits(batch, config, params, "train")
    for k, s in params.bn.items():
        s.momentum = saved[k]


def model_case(config: ModelConfig, seed: int = 0, batch_size: int = 2):
    """Full network in inference mode (running BN statistics, no dropout)."""
    config = config.replace(dropout_rate=0.0)
    params = _small_params(config, seed)
    rng = RngStream(seed).fork("model")
    x = Tensor(rng.fork("x").random((batch_size, *config.input_shape)))
    calibrate_batchnorm(config, params, Tensor(rng.fork("calib").random((4, *config.input_shape))))
    y = np.eye(config.num_classes)[np.arange(batch_size) % config.num_classes]
    return (lambda: ad.softmax_cross_entropy(model_logits(x, config, params, "infer"), y)), dict(params.items())


def run_suite(
    config: ModelConfig | None = None,
    seed: int = 0,
    model_probes: int = 2,
    model_tensors: int | None = None,
    progress: Callable[[str, GradCheckResult], None] | None = None,
) -> dict[str, GradCheckResult]:
    """Run the operator, module and (if ``config`` is given) full-network checks.

    Operators and modules are probed exhaustively.  The full network is probed
    at ``model_probes`` random coordinates per tensor; ``model_tensors``
    optionally restricts it to an evenly spaced subset of tensors.
    """
    results = {}
    for name, (build, params) in {**op_cases(seed), **module_cases(seed)}.items():
        results[name] = gradient_check(build, params, eps=STEP)
        if progress:
            progress(name, results[name])
    if config is not None:
        build, params = model_case(config, seed)
        if model_tensors is not None and model_tensors < len(params):
            keys = list(params)
            chosen = np.linspace(0, len(keys) - 1, model_tensors).round().astype(int)
            params = {keys[i]: params[keys[i]] for i in sorted(set(chosen))}
        results["model"] = gradient_check(build, params, eps=STEP, max_probes=model_probes,
                                          rng=RngStream(seed).fork("probes"))
        if progress:
            progress("model", results["model"])
    return results
