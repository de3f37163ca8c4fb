"""MRANet: stacked residual attention stages with hourglass soft masks.

Layout of one forward pass::

    stem conv -> [stride-2 residual unit -> attention module] per stage
              -> tail residual units -> BN -> ReLU -> global average pool
              -> dropout -> dense -> softmax

An attention module runs ``p`` pre-processing units, then a trunk of ``t``
units and a soft-mask hourglass in parallel, combines them as
``(1 + M) * T`` (``residual`` mode) or ``M * T`` (``naive`` mode) and
finishes with ``p`` post-processing units.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .autodiff import (
    BatchNormState,
    RngStream,
    Tensor,
    add,
    batchnorm,
    bilinear_upsample,
    conv2d,
    dense,
    dropout,
    global_avg_pool,
    maxpool2d,
    mul,
    relu,
    sigmoid,
    softmax,
)

ATTENTION_MODES = ("residual", "naive")


@dataclass(frozen=True)
class ResidualUnitSpec:
    in_channels: int
    out_channels: int
    stride: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"residual unit channels must be positive: {self}")
        if self.stride not in (1, 2):
            raise ValueError(f"residual unit stride must be 1 or 2: {self}")

    @property
    def projection(self) -> bool:
        return self.in_channels != self.out_channels or self.stride != 1


@dataclass(frozen=True)
class AttentionStageSpec:
    channels: int
    p: int = 1
    t: int = 2
    r: int = 1
    mask_depth: int = 1

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError(f"stage channels must be positive: {self}")
        for name in ("p", "t", "r", "mask_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"stage {name} must be >= 1: {self}")


@dataclass(frozen=True)
class StemSpec:
    out_channels: int = 16
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool_window: int = 0
    pool_stride: int = 2


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int] = (3, 32, 32)
    stem: StemSpec = field(default_factory=StemSpec)
    stages: tuple[AttentionStageSpec, ...] = ()
    tail: int = 2
    num_classes: int = 3
    attention_mode: str = "residual"
    dropout_rate: float = 0.25
    mask_override: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "stages", tuple(self.stages))
        if self.num_classes not in (2, 3, 5):
            raise ValueError(f"num_classes must be 2, 3 or 5, got {self.num_classes}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}, got {self.attention_mode!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.mask_override is not None and not 0.0 <= self.mask_override <= 1.0:
            raise ValueError(f"mask_override must lie in [0, 1], got {self.mask_override}")
        if self.tail < 0:
            raise ValueError("tail must be non-negative")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def stage_sizes(self) -> list[tuple[int, int]]:
        """Spatial extent entering each attention module."""
        _, h, w = self.input_shape
        h, w = _conv_out(h, self.stem.kernel, self.stem.stride, self.stem.padding), _conv_out(
            w, self.stem.kernel, self.stem.stride, self.stem.padding
        )
        if self.stem.pool_window:
            h = (h - self.stem.pool_window) // self.stem.pool_stride + 1
            w = (w - self.stem.pool_window) // self.stem.pool_stride + 1
        if h < 1 or w < 1:
            raise ValueError(f"stem collapses input {self.input_shape}")
        sizes = []
        for _ in self.stages:
            h, w = _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)
            sizes.append((h, w))
        return sizes

    def validate(self) -> None:
        for i, (stage, (h, w)) in enumerate(zip(self.stages, self.stage_sizes()), start=1):
            need = 2**stage.mask_depth
            if min(h, w) < need:
                raise ValueError(
                    f"stage{i}: mask_depth {stage.mask_depth} needs spatial extent >= {need}, stage input is {h}x{w}"
                )

    def digest(self) -> bytes:
        """SHA-256 over a canonical JSON rendering of the config."""
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).digest()

    @property
    def head_features(self) -> int:
        return self.stages[-1].channels if self.stages else self.stem.out_channels


def _conv_out(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def mranet_s(num_classes: int = 3, **overrides) -> ModelConfig:
    """Desk-scale preset: 3x32x32 input, stages of 16/32/64 channels."""
    cfg = ModelConfig(
        input_shape=(3, 32, 32),
        stem=StemSpec(out_channels=16, kernel=3, stride=1, padding=1),
        stages=(
            AttentionStageSpec(16, mask_depth=2),
            AttentionStageSpec(32, mask_depth=2),
            AttentionStageSpec(64, mask_depth=1),
        ),
        tail=2,
        num_classes=num_classes,
        dropout_rate=0.25,
    )
    return cfg.replace(**overrides) if overrides else cfg


def mranet_224(num_classes: int = 5, **overrides) -> ModelConfig:
    """Full-scale preset for 3x224x224 input."""
    cfg = ModelConfig(
        input_shape=(3, 224, 224),
        stem=StemSpec(out_channels=64, kernel=7, stride=2, padding=3, pool_window=3, pool_stride=2),
        stages=(
            AttentionStageSpec(64, mask_depth=3),
            AttentionStageSpec(128, mask_depth=2),
            AttentionStageSpec(256, mask_depth=1),
        ),
        tail=2,
        num_classes=num_classes,
        dropout_rate=0.5,
    )
    return cfg.replace(**overrides) if overrides else cfg


PRESETS = {"mranet-s": mranet_s, "mranet-224": mranet_224}


def preset(name: str, num_classes: int, **overrides) -> ModelConfig:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(num_classes, **overrides)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


class ModelParams:
    """Trainable tensors keyed by dotted path, plus batch-norm running statistics."""

    def __init__(self, tensors: dict[str, Tensor], bn: dict[str, BatchNormState]):
        self.tensors = tensors
        self.bn = bn

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def num_values(self) -> int:
        return sum(t.size for t in self.tensors.values())

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        tensors = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()}
        bn = {
            k: BatchNormState(s.running_mean.copy(), s.running_var.copy(), s.momentum, s.eps) for k, s in self.bn.items()
        }
        return ModelParams(tensors, bn)

    def astype(self, dtype) -> "ModelParams":
        tensors = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in self.tensors.items()}
        bn = {
            k: BatchNormState(s.running_mean.astype(dtype), s.running_var.astype(dtype), s.momentum, s.eps)
            for k, s in self.bn.items()
        }
        return ModelParams(tensors, bn)

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for k, s in self.bn.items():
            out[f"{k}.running_mean"] = s.running_mean
            out[f"{k}.running_var"] = s.running_var
        return out


def _unit_layout(prefix: str, spec: ResidualUnitSpec):
    cin, cout = spec.in_channels, spec.out_channels
    yield f"{prefix}.bn1", "bn", (cin,)
    yield f"{prefix}.conv1", "conv", (cout, cin, 3, 3)
    yield f"{prefix}.bn2", "bn", (cout,)
    yield f"{prefix}.conv2", "conv", (cout, cout, 3, 3)
    if spec.projection:
        yield f"{prefix}.proj", "conv", (cout, cin, 1, 1)


def _layout(config: ModelConfig):
    """Yield ``(prefix, kind, shape)`` for every layer in build order."""
    cin = config.input_shape[0]
    stem = config.stem
    yield "stem.conv", "conv", (stem.out_channels, cin, stem.kernel, stem.kernel)
    prev = stem.out_channels
    for s, stage in enumerate(config.stages, start=1):
        c = stage.channels
        yield from _unit_layout(f"stage{s}.down", ResidualUnitSpec(prev, c, 2))
        same = ResidualUnitSpec(c, c, 1)
        base = f"stage{s}.attn"
        for i in range(stage.p):
            yield from _unit_layout(f"{base}.pre.unit{i}", same)
        for i in range(stage.t):
            yield from _unit_layout(f"{base}.trunk.unit{i}", same)
        for d in range(stage.mask_depth):
            for i in range(stage.r):
                yield from _unit_layout(f"{base}.mask.down{d}.unit{i}", same)
        for d in reversed(range(stage.mask_depth)):
            for i in range(stage.r):
                yield from _unit_layout(f"{base}.mask.up{d}.unit{i}", same)
            yield from _unit_layout(f"{base}.mask.skip{d}", same)
        yield f"{base}.mask.head.bn1", "bn", (c,)
        yield f"{base}.mask.head.conv1", "conv", (c, c, 1, 1)
        yield f"{base}.mask.head.bn2", "bn", (c,)
        yield f"{base}.mask.head.conv2", "conv", (c, c, 1, 1)
        for i in range(stage.p):
            yield from _unit_layout(f"{base}.post.unit{i}", same)
        prev = c
    for i in range(config.tail):
        yield from _unit_layout(f"tail.unit{i}", ResidualUnitSpec(prev, prev, 1))
    yield "head.bn", "bn", (prev,)
    yield "head.dense", "dense", (prev, config.num_classes)


def build_model(config: ModelConfig, rng: RngStream, dtype=np.float32) -> ModelParams:
    """Allocate He-initialized parameters (zero biases, unit BN scale) for ``config``."""
    config.validate()
    tensors: dict[str, Tensor] = {}
    bn: dict[str, BatchNormState] = {}
    for prefix, kind, shape in _layout(config):
        if kind == "bn":
            tensors[f"{prefix}.gamma"] = Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
            tensors[f"{prefix}.beta"] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
            bn[prefix] = BatchNormState.fresh(shape[0], dtype)
            continue
        if kind == "conv":
            fan_in = shape[1] * shape[2] * shape[3]
            w_name, b_name, bias_len = f"{prefix}.kernel", f"{prefix}.bias", shape[0]
        else:
            fan_in = shape[0]
            w_name, b_name, bias_len = f"{prefix}.weight", f"{prefix}.bias", shape[1]
        w = rng.fork(w_name).normal(shape, std=np.sqrt(2.0 / fan_in), dtype=dtype)
        tensors[w_name] = Tensor(w, requires_grad=True)
        tensors[b_name] = Tensor(np.zeros(bias_len, dtype=dtype), requires_grad=True)
    return ModelParams(tensors, bn)


def _unit_count(cin: int, cout: int, stride: int) -> int:
    n = 2 * cin + (9 * cin * cout + cout) + 2 * cout + (9 * cout * cout + cout)
    if cin != cout or stride != 1:
        n += cin * cout + cout
    return n


def count_params(config: ModelConfig) -> int:
    """Closed-form number of trainable scalars, without allocating anything."""
    stem = config.stem
    total = stem.out_channels * config.input_shape[0] * stem.kernel**2 + stem.out_channels
    prev = stem.out_channels
    for stage in config.stages:
        c = stage.channels
        same = _unit_count(c, c, 1)
        n_units = 2 * stage.p + stage.t + 2 * stage.r * stage.mask_depth + stage.mask_depth
        total += _unit_count(prev, c, 2) + n_units * same + 2 * (2 * c + c * c + c)
        prev = c
    total += config.tail * _unit_count(prev, prev, 1)
    total += 2 * prev + prev * config.num_classes + config.num_classes
    return total


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _conv(x, params, name, stride=1, padding=0):
    return conv2d(x, params[f"{name}.kernel"], params[f"{name}.bias"], stride=stride, padding=padding)


def _bn(x, params, name, mode):
    return batchnorm(x, params[f"{name}.gamma"], params[f"{name}.beta"], params.bn[name], mode)


def residual_unit_forward(x: Tensor, spec: ResidualUnitSpec, params: ModelParams, prefix: str, mode: str) -> Tensor:
    """Pre-activation basic block: ``shortcut(x) + conv(relu(bn(conv(relu(bn(x))))))``."""
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"{prefix}: input has {x.shape[1]} channels, unit expects {spec.in_channels}")
    h = relu(_bn(x, params, f"{prefix}.bn1", mode))
    h = _conv(h, params, f"{prefix}.conv1", stride=spec.stride, padding=1)
    h = relu(_bn(h, params, f"{prefix}.bn2", mode))
    h = _conv(h, params, f"{prefix}.conv2", stride=1, padding=1)
    shortcut = _conv(x, params, f"{prefix}.proj", stride=spec.stride) if spec.projection else x
    return add(shortcut, h)


def trunk_forward(x: Tensor, stage: AttentionStageSpec, params: ModelParams, prefix: str, mode: str) -> Tensor:
    spec = ResidualUnitSpec(stage.channels, stage.channels)
    for i in range(stage.t):
        x = residual_unit_forward(x, spec, params, f"{prefix}.trunk.unit{i}", mode)
    return x


def mask_forward(x: Tensor, stage: AttentionStageSpec, params: ModelParams, prefix: str, mode: str) -> Tensor:
    """Soft mask in (0, 1) with the same shape as ``x``.

    Descends ``mask_depth`` levels (2x2 max pool then ``r`` units), climbs back
    up (``r`` units then bilinear upsampling) and adds a skip unit applied to
    the stored activation of each level.  Two 1x1 convolutions and a sigmoid
    form the head.
    """
    h, w = x.shape[2:]
    need = 2**stage.mask_depth
    if min(h, w) < need:
        raise ValueError(f"{prefix}: mask_depth {stage.mask_depth} needs spatial extent >= {need}, got {h}x{w}")
    spec = ResidualUnitSpec(stage.channels, stage.channels)
    stored = [x]
    out = x
    for d in range(stage.mask_depth):
        out = maxpool2d(out, 2, 2)
        for i in range(stage.r):
            out = residual_unit_forward(out, spec, params, f"{prefix}.mask.down{d}.unit{i}", mode)
        stored.append(out)
    for d in reversed(range(stage.mask_depth)):
        for i in range(stage.r):
            out = residual_unit_forward(out, spec, params, f"{prefix}.mask.up{d}.unit{i}", mode)
        target = stored[d]
        out = bilinear_upsample(out, *target.shape[2:])
        out = add(out, residual_unit_forward(target, spec, params, f"{prefix}.mask.skip{d}", mode))
    out = _conv(relu(_bn(out, params, f"{prefix}.mask.head.bn1", mode)), params, f"{prefix}.mask.head.conv1")
    out = _conv(relu(_bn(out, params, f"{prefix}.mask.head.bn2", mode)), params, f"{prefix}.mask.head.conv2")
    return sigmoid(out)


def attention_module_forward(
    x: Tensor,
    stage: AttentionStageSpec,
    params: ModelParams,
    prefix: str,
    mode: str,
    attention_mode: str = "residual",
    mask_override: float | None = None,
    mask: Tensor | np.ndarray | None = None,
    return_parts: bool = False,
):
    """One attention module.

    ``mask_override`` replaces the soft mask by a constant and ``mask`` by a
    given array; both are treated as data (no gradient into the mask branch).
    With ``return_parts`` a dict with ``pre``, ``trunk``, ``mask``,
    ``combined`` and ``out`` is returned.
    """
    if x.shape[1] != stage.channels:
        raise ValueError(f"{prefix}: input has {x.shape[1]} channels, stage expects {stage.channels}")
    if attention_mode not in ATTENTION_MODES:
        raise ValueError(f"unknown attention_mode {attention_mode!r}")
    spec = ResidualUnitSpec(stage.channels, stage.channels)
    pre = x
    for i in range(stage.p):
        pre = residual_unit_forward(pre, spec, params, f"{prefix}.pre.unit{i}", mode)
    trunk = trunk_forward(pre, stage, params, prefix, mode)
    if mask is not None:
        m = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask, dtype=trunk.dtype))
    elif mask_override is not None:
        m = Tensor(np.full(trunk.shape, mask_override, dtype=trunk.dtype))
    else:
        m = mask_forward(pre, stage, params, prefix, mode)
    if m.shape != trunk.shape:
        raise ValueError(f"{prefix}: mask shape {m.shape} disagrees with trunk shape {trunk.shape}")
    # (1 + M) * T is evaluated as T + M * T so both modes share the rounded product M * T
    gated = mul(m, trunk)
    combined = add(trunk, gated) if attention_mode == "residual" else gated
    out = combined
    for i in range(stage.p):
        out = residual_unit_forward(out, spec, params, f"{prefix}.post.unit{i}", mode)
    if return_parts:
        return {"pre": pre, "trunk": trunk, "mask": m, "combined": combined, "out": out}
    return out


def features_forward(batch: Tensor, config: ModelConfig, params: ModelParams, mode: str) -> Tensor:
    """Everything up to (and including) the tail units, NCHW."""
    if tuple(batch.shape[1:]) != config.input_shape:
        raise ValueError(f"input batch shape {batch.shape} does not match config input {config.input_shape}")
    stem = config.stem
    x = _conv(batch, params, "stem.conv", stride=stem.stride, padding=stem.padding)
    if stem.pool_window:
        x = maxpool2d(x, stem.pool_window, stem.pool_stride)
    prev = stem.out_channels
    for s, stage in enumerate(config.stages, start=1):
        x = residual_unit_forward(x, ResidualUnitSpec(prev, stage.channels, 2), params, f"stage{s}.down", mode)
        x = attention_module_forward(
            x, stage, params, f"stage{s}.attn", mode, config.attention_mode, config.mask_override
        )
        prev = stage.channels
    for i in range(config.tail):
        x = residual_unit_forward(x, ResidualUnitSpec(prev, prev), params, f"tail.unit{i}", mode)
    return x


def model_logits(
    batch: Tensor, config: ModelConfig, params: ModelParams, mode: str, rng: RngStream | None = None
) -> Tensor:
    x = relu(_bn(features_forward(batch, config, params, mode), params, "head.bn", mode))
    x = global_avg_pool(x)
    x = dropout(x, config.dropout_rate, mode, rng)
    return dense(x, params["head.dense.weight"], params["head.dense.bias"])


def model_forward(
    batch: Tensor, config: ModelConfig, params: ModelParams, mode: str, rng: RngStream | None = None
) -> Tensor:
    """Class probabilities, shape ``(N, num_classes)``."""
    return softmax(model_logits(batch, config, params, mode, rng))


@dataclass
class Model:
    """A config together with its parameters."""

    config: ModelConfig
    params: ModelParams

    @classmethod
    def build(cls, config: ModelConfig, rng: RngStream, dtype=np.float32) -> "Model":
        return cls(config, build_model(config, rng, dtype))

    def logits(self, batch: Tensor, mode: str, rng: RngStream | None = None) -> Tensor:
        return model_logits(batch, self.config, self.params, mode, rng)

    def forward(self, batch: Tensor, mode: str, rng: RngStream | None = None) -> Tensor:
        return model_forward(batch, self.config, self.params, mode, rng)
