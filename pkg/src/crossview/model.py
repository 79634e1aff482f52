"""Cross-view retrieval backbone: conv stem, FFN-free attention stack, heads.

Each branch is a six-stage convolutional stem (3x3 conv -> batch norm ->
ReLU) that downsamples by the stride product (16 for the standard plan),
followed by a per-position linear projection into tokens, a learnable
position embedding, ``depth`` multi-head self-attention layers without any
feed-forward sublayer, a final layer norm, and a pooling head that emits an
L2-normalized descriptor.

Two named variants are provided: ``saig-s`` (11 layers) and ``saig-d``
(22 layers), both with width 384 and 12 heads. Arbitrary desk-scale configs
are allowed for experiments and tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import (
    BatchNormState,
    Tensor,
    batch_norm,
    conv2d,
    layer_norm,
    matmul,
    mul,
    relu,
    reshape,
    softmax_row,
    transpose,
)
from .errors import ContractError, NumericError, ShapeError
from .heads import SmdParams, gap_head, smd_head

STEM_KERNEL = 3
STEM_PADDING = 1
INIT_STD = 0.02

# std of a unit normal truncated to [-2, 2]; dividing by it makes the
# truncated sample's std equal the requested one
_TRUNC_STD_FACTOR = math.sqrt(
    1.0
    - 4.0
    * (math.exp(-2.0) / math.sqrt(2.0 * math.pi))
    / (math.erf(math.sqrt(2.0)))
)


def truncated_normal(rng, shape, std):
    """Normal samples truncated at two (pre-scaling) standard deviations,
    rescaled so the resulting sample std equals ``std``."""
    samples = rng.standard_normal(shape)
    bad = np.abs(samples) > 2.0
    while bad.any():
        samples[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(samples) > 2.0
    return samples * (std / _TRUNC_STD_FACTOR)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description for one branch."""

    variant: str = "custom"
    depth: int = 2
    dim: int = 384
    heads: int = 12
    stem_channels: tuple = (64, 128, 128, 256, 256, 512)
    stem_strides: tuple = (2, 2, 1, 2, 1, 2)
    head: str = "gap"
    smd_k: int = 8
    classifier_classes: int = 0
    input_hw: tuple = (224, 224)

    def __post_init__(self):
        object.__setattr__(self, "stem_channels", tuple(self.stem_channels))
        object.__setattr__(self, "stem_strides", tuple(self.stem_strides))
        object.__setattr__(self, "input_hw", tuple(self.input_hw))
        self.validate()

    def validate(self):
        if self.depth < 1:
            raise ContractError("depth must be >= 1")
        if self.dim % self.heads:
            raise ContractError(f"dim {self.dim} not divisible by heads {self.heads}")
        if len(self.stem_channels) != len(self.stem_strides):
            raise ContractError("stem_channels and stem_strides lengths differ")
        if self.head not in ("gap", "smd"):
            raise ContractError(f"unknown head {self.head!r}")
        if self.smd_k < 1:
            raise ContractError("smd_k must be >= 1")
        if self.classifier_classes < 0:
            raise ContractError("classifier_classes must be >= 0")
        if self.variant == "saig-s" and self.depth != 11:
            raise ContractError("variant saig-s requires depth 11")
        if self.variant == "saig-d" and self.depth != 22:
            raise ContractError("variant saig-d requires depth 22")
        sp = self.stride_product
        h, w = self.input_hw
        if h % sp or w % sp:
            raise ShapeError(f"input {h}x{w} not divisible by stride product {sp}")

    @property
    def stride_product(self):
        return int(np.prod(self.stem_strides))

    @property
    def token_grid(self):
        h, w = self.input_hw
        sp = self.stride_product
        return (h // sp, w // sp)

    @property
    def token_count(self):
        gh, gw = self.token_grid
        return gh * gw

    @property
    def descriptor_dim(self):
        return self.dim * (self.smd_k if self.head == "smd" else 1)

    @classmethod
    def saig_s(cls, **kwargs):
        return cls(variant="saig-s", depth=11, dim=384, heads=12, **kwargs)

    @classmethod
    def saig_d(cls, **kwargs):
        return cls(variant="saig-d", depth=22, dim=384, heads=12, **kwargs)

    @classmethod
    def desk(cls, depth=2, dim=64, heads=4, input_hw=(32, 64), **kwargs):
        """Small config for laptop-scale experiments; stem width scales with dim."""
        stem = kwargs.pop(
            "stem_channels",
            (dim // 4, dim // 2, dim // 2, dim, dim, 2 * dim),
        )
        return cls(
            variant="custom",
            depth=depth,
            dim=dim,
            heads=heads,
            stem_channels=stem,
            input_hw=input_hw,
            **kwargs,
        )

    def to_dict(self):
        return {
            "variant": self.variant,
            "depth": self.depth,
            "dim": self.dim,
            "heads": self.heads,
            "stem_channels": list(self.stem_channels),
            "stem_strides": list(self.stem_strides),
            "head": self.head,
            "smd_k": self.smd_k,
            "classifier_classes": self.classifier_classes,
            "input_hw": list(self.input_hw),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            variant=d["variant"],
            depth=int(d["depth"]),
            dim=int(d["dim"]),
            heads=int(d["heads"]),
            stem_channels=tuple(d["stem_channels"]),
            stem_strides=tuple(d["stem_strides"]),
            head=d["head"],
            smd_k=int(d["smd_k"]),
            classifier_classes=int(d["classifier_classes"]),
            input_hw=tuple(d["input_hw"]),
        )


@dataclass
class PatchGrid:
    """Token sequence plus the spatial grid it was flattened from."""

    tokens: Tensor  # (N, P, dim)
    grid_hw: tuple


@dataclass
class ModelParams:
    """Learnable tensors plus per-stage batch-norm running statistics."""

    tensors: dict = field(default_factory=dict)
    bn_states: list = field(default_factory=list)


def parameter_shapes(config):
    """Ordered name -> shape table of every learnable tensor in one branch."""
    shapes = {}
    c_prev = 3
    for i, c in enumerate(config.stem_channels):
        shapes[f"stem.conv{i}.weight"] = (c, c_prev, STEM_KERNEL, STEM_KERNEL)
        shapes[f"stem.conv{i}.bias"] = (c,)
        shapes[f"stem.bn{i}.gamma"] = (c,)
        shapes[f"stem.bn{i}.beta"] = (c,)
        c_prev = c
    shapes["stem.proj.weight"] = (c_prev, config.dim)
    shapes["stem.proj.bias"] = (config.dim,)
    p = config.token_count
    shapes["pos_embed"] = (p, config.dim)
    for l in range(config.depth):
        shapes[f"layers.{l}.ln.gamma"] = (config.dim,)
        shapes[f"layers.{l}.ln.beta"] = (config.dim,)
        for name in ("q", "k", "v", "out"):
            shapes[f"layers.{l}.attn.{name}.weight"] = (config.dim, config.dim)
            shapes[f"layers.{l}.attn.{name}.bias"] = (config.dim,)
    shapes["final_ln.gamma"] = (config.dim,)
    shapes["final_ln.beta"] = (config.dim,)
    if config.head == "smd":
        shapes["smd.w1"] = (p, 4 * p)
        shapes["smd.b1"] = (4 * p,)
        shapes["smd.w2"] = (4 * p, p)
        shapes["smd.b2"] = (p,)
        shapes["smd.w3"] = (p, config.smd_k)
        shapes["smd.b3"] = (config.smd_k,)
    if config.classifier_classes:
        shapes["classifier.weight"] = (config.dim, config.classifier_classes)
        shapes["classifier.bias"] = (config.classifier_classes,)
    return shapes


def buffer_shapes(config):
    """Non-learnable state (batch-norm running statistics)."""
    shapes = {}
    for i, c in enumerate(config.stem_channels):
        shapes[f"stem.bn{i}.running_mean"] = (c,)
        shapes[f"stem.bn{i}.running_var"] = (c,)
    return shapes


def param_count(config):
    """Exact number of learnable scalars in one branch."""
    return int(sum(np.prod(s) for s in parameter_shapes(config).values()))


def init_params(config, seed, dtype=np.float32):
    """Deterministic initialization: truncated-normal (std 0.02) weights,
    zero biases and position embedding, unit/zero norm affines."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".weight") or name in ("smd.w1", "smd.w2", "smd.w3"):
            data = truncated_normal(rng, shape, INIT_STD)
        elif name.endswith(".gamma"):
            data = np.ones(shape)
        else:  # biases, betas, position embedding
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True, dtype=dtype)
    bn_states = [BatchNormState(c, dtype=dtype) for c in config.stem_channels]
    return ModelParams(tensors=tensors, bn_states=bn_states)


def conv_stem_forward(images, config, params, training=False):
    """Six conv/BN/ReLU stages, per-position projection, position embedding.

    images: (N, 3, H, W) with H, W divisible by the stride product.
    Returns a PatchGrid of (N, P, dim) tokens.
    """
    n, cin, h, w = images.shape
    sp = config.stride_product
    if h % sp or w % sp:
        raise ShapeError(f"input {h}x{w} not divisible by stride product {sp}")
    p = params.tensors
    x = images
    for i, stride in enumerate(config.stem_strides):
        x = conv2d(x, p[f"stem.conv{i}.weight"], stride=stride, padding=STEM_PADDING)
        c = config.stem_channels[i]
        x = x + reshape(p[f"stem.conv{i}.bias"], (1, c, 1, 1))
        x = batch_norm(
            x, p[f"stem.bn{i}.gamma"], p[f"stem.bn{i}.beta"], params.bn_states[i], training
        )
        x = relu(x)
    gh, gw = h // sp, w // sp
    c_last = config.stem_channels[-1]
    tokens = transpose(reshape(x, (n, c_last, gh * gw)), (0, 2, 1))
    tokens = matmul(tokens, p["stem.proj.weight"]) + p["stem.proj.bias"]
    tokens = tokens + p["pos_embed"]
    return PatchGrid(tokens=tokens, grid_hw=(gh, gw))


def msa_layer_forward(x, params, config, prefix=""):
    """Pre-norm multi-head self-attention with output projection and residual.

    x: (N, P, dim) or (P, dim). No feed-forward sublayer follows.
    """
    single = x.ndim == 2
    if single:
        x = reshape(x, (1,) + x.shape)
    n, p, d = x.shape
    heads = config.heads
    dh = d // heads
    t = params.tensors if isinstance(params, ModelParams) else params

    normed = layer_norm(x, t[prefix + "ln.gamma"], t[prefix + "ln.beta"])

    def project(name):
        y = matmul(normed, t[prefix + f"attn.{name}.weight"]) + t[prefix + f"attn.{name}.bias"]
        return transpose(reshape(y, (n, p, heads, dh)), (0, 2, 1, 3))  # (N, H, P, dh)

    q = project("q")
    k = project("k")
    v = project("v")
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    ctx = matmul(softmax_row(scores), v)  # (N, H, P, dh)
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (n, p, d))
    projected = matmul(merged, t[prefix + "attn.out.weight"]) + t[prefix + "attn.out.bias"]
    out = x + projected
    return reshape(out, (p, d)) if single else out


def saig_forward(image, config, params, training=False):
    """Full branch forward: stem -> attention stack -> head descriptor.

    Accepts (3, H, W) or (N, 3, H, W); returns an L2-normalized descriptor
    of shape (descriptor_dim,) or (N, descriptor_dim). Raises NumericError
    naming the first attention layer whose activations go non-finite.
    """
    single = image.ndim == 3
    if single:
        image = reshape(image, (1,) + image.shape)
    grid = conv_stem_forward(image, config, params, training)
    x = grid.tokens
    if not np.isfinite(x.data).all():
        raise NumericError("non-finite activations in conv stem")
    for l in range(config.depth):
        x = msa_layer_forward(x, params, config, prefix=f"layers.{l}.")
        if not np.isfinite(x.data).all():
            raise NumericError(f"non-finite activations in attention layer {l}")
    x = layer_norm(x, params.tensors["final_ln.gamma"], params.tensors["final_ln.beta"])
    if config.head == "smd":
        t = params.tensors
        smd = SmdParams(
            w1=t["smd.w1"], b1=t["smd.b1"],
            w2=t["smd.w2"], b2=t["smd.b2"],
            w3=t["smd.w3"], b3=t["smd.b3"],
        )
        desc = smd_head(x, smd)
    else:
        desc = gap_head(x)
    return reshape(desc, desc.shape[1:]) if single else desc


# ---------------------------------------------------------------------------
# Siamese pairing
# ---------------------------------------------------------------------------


@dataclass
class SiameseModel:
    """Two fully independent branches; no tensor is shared between them."""

    ground_config: ModelConfig
    aerial_config: ModelConfig
    ground: ModelParams
    aerial: ModelParams

    def named_tensors(self):
        out = {}
        for name, t in self.ground.tensors.items():
            out["ground." + name] = t
        for name, t in self.aerial.tensors.items():
            out["aerial." + name] = t
        return out


def init_siamese(config, ground_hw, aerial_hw, seed, dtype=np.float32):
    """Independent branch parameters (seed and seed+1) with per-view sizes."""
    ground_cfg = replace(config, input_hw=tuple(ground_hw))
    aerial_cfg = replace(config, input_hw=tuple(aerial_hw))
    return SiameseModel(
        ground_config=ground_cfg,
        aerial_config=aerial_cfg,
        ground=init_params(ground_cfg, seed, dtype=dtype),
        aerial=init_params(aerial_cfg, seed + 1, dtype=dtype),
    )


# ---------------------------------------------------------------------------
# analytic cost model
# ---------------------------------------------------------------------------


def flop_count(config, input_hw=None):
    """Multiply-accumulate count of one branch forward pass.

    Counts convolutions, the token projection, attention projections and
    attention matmuls, the head, and the optional classifier. Reported in
    MACs, the convention the comparison tables use for "FLOPs".
    """
    h, w = input_hw if input_hw is not None else config.input_hw
    macs = 0
    c_prev = 3
    for c, s in zip(config.stem_channels, config.stem_strides):
        h = (h + 2 * STEM_PADDING - STEM_KERNEL) // s + 1
        w = (w + 2 * STEM_PADDING - STEM_KERNEL) // s + 1
        macs += h * w * c * c_prev * STEM_KERNEL * STEM_KERNEL
        c_prev = c
    p = h * w
    d = config.dim
    macs += p * c_prev * d
    macs += config.depth * (4 * p * d * d + 2 * p * p * d)
    if config.head == "smd":
        macs += d * (4 * p * p) + d * (4 * p * p) + d * p * config.smd_k
    if config.classifier_classes:
        macs += d * config.classifier_classes
    return int(macs)


def stem_flop_count(config, input_hw=None):
    """Multiply-accumulates of the convolutional stages alone."""
    h, w = input_hw if input_hw is not None else config.input_hw
    macs = 0
    c_prev = 3
    for c, s in zip(config.stem_channels, config.stem_strides):
        h = (h + 2 * STEM_PADDING - STEM_KERNEL) // s + 1
        w = (w + 2 * STEM_PADDING - STEM_KERNEL) // s + 1
        macs += h * w * c * c_prev * STEM_KERNEL * STEM_KERNEL
        c_prev = c
    return int(macs)


def siamese_flop_count(config, ground_hw=(128, 512), aerial_hw=(256, 256)):
    """Total MACs of one Siamese forward: ground branch plus aerial branch."""
    return flop_count(config, ground_hw) + flop_count(config, aerial_hw)
