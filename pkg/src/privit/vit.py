"""Vision Transformer with switchable GELU and softmax-attention nonlinearities.

Each GELU (per token, or per element) and each attention row carries a real
switch.  A switch of 1 keeps the exact nonlinearity, 0 selects the cheap
replacement: identity for GELU, a polynomial attention variant for softmax.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

GRANULARITIES = ("per-token", "per-element")
ATTN_VARIANTS = ("squared", "scale", "uniform")


@dataclass
class ModelConfig:
    num_layers: int = 2
    embed_dim: int = 16
    mlp_dim: int = 32
    num_heads: int = 2
    image_size: int = 16
    patch_size: int = 4
    num_classes: int = 4
    channels: int = 3
    gelu_granularity: str = "per-token"
    attn_variant: str = "squared"
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        ints = ("num_layers", "embed_dim", "mlp_dim", "num_heads", "image_size",
                "patch_size", "num_classes", "channels")
        for name in ints:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"num_heads={self.num_heads} must divide embed_dim={self.embed_dim}")
        if self.image_size % self.patch_size:
            raise ValueError(f"patch_size={self.patch_size} must divide image_size={self.image_size}")
        if self.gelu_granularity not in GRANULARITIES:
            raise ValueError(f"gelu_granularity must be one of {GRANULARITIES}")
        if self.attn_variant not in ATTN_VARIANTS:
            raise ValueError(f"attn_variant must be one of {ATTN_VARIANTS}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def gelu_switch_shape(self) -> tuple[int, ...]:
        if self.gelu_granularity == "per-token":
            return (self.num_layers, self.num_tokens)
        return (self.num_layers, self.num_tokens, self.mlp_dim)

    @property
    def softmax_switch_shape(self) -> tuple[int, ...]:
        return (self.num_layers, self.num_heads, self.num_tokens)


@dataclass
class SwitchSet:
    """GELU switches ``gelu`` (C) and attention-row switches ``softmax`` (S)."""

    gelu: Tensor
    softmax: Tensor
    epsilon: float = 1e-3
    gelu_frozen: bool = False
    softmax_frozen: bool = False

    @classmethod
    def ones(cls, config: ModelConfig, epsilon: float = 1e-3) -> "SwitchSet":
        return cls(
            gelu=Tensor(np.ones(config.gelu_switch_shape), requires_grad=True, name="switch.gelu"),
            softmax=Tensor(np.ones(config.softmax_switch_shape), requires_grad=True, name="switch.softmax"),
            epsilon=epsilon,
        )

    def trainable(self) -> list[Tensor]:
        out = []
        if not self.gelu_frozen:
            out.append(self.gelu)
        if not self.softmax_frozen:
            out.append(self.softmax)
        return out

    def copy(self) -> "SwitchSet":
        g = Tensor(self.gelu.value.copy(), requires_grad=not self.gelu_frozen, name="switch.gelu")
        s = Tensor(self.softmax.value.copy(), requires_grad=not self.softmax_frozen, name="switch.softmax")
        return SwitchSet(g, s, self.epsilon, self.gelu_frozen, self.softmax_frozen)


def count_active(switches: SwitchSet) -> tuple[int, int]:
    """Number of switches strictly above epsilon, for the GELU and softmax masks."""
    eps = switches.epsilon
    return (int(np.count_nonzero(switches.gelu.value > eps)),
            int(np.count_nonzero(switches.softmax.value > eps)))


def binarize(switches: SwitchSet, which: str = "both") -> SwitchSet:
    """Threshold the selected masks to {0, 1} at epsilon and freeze them (in place)."""
    if which not in ("gelu", "softmax", "both"):
        raise ValueError(f"which must be 'gelu', 'softmax' or 'both', got {which!r}")
    eps = switches.epsilon
    if which in ("gelu", "both") and not switches.gelu_frozen:
        switches.gelu.value = (switches.gelu.value > eps).astype(np.float64)
        switches.gelu.requires_grad = False
        switches.gelu_frozen = True
    if which in ("softmax", "both") and not switches.softmax_frozen:
        switches.softmax.value = (switches.softmax.value > eps).astype(np.float64)
        switches.softmax.requires_grad = False
        switches.softmax_frozen = True
    return switches


# -- building blocks -----------------------------------------------------------


def switched_gelu(c, x: Tensor) -> Tensor:
    """c * GELU(x) + (1 - c) * x, with ``c`` broadcast against ``x``."""
    c = ad.constant(c)
    return c * ad.gelu(x) + (1.0 - c) * x


@dataclass
class AttentionWeights:
    """Projections of one attention block; biases default to zero."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_q: Tensor | None = None
    b_k: Tensor | None = None
    b_v: Tensor | None = None
    b_o: Tensor | None = None

    @classmethod
    def identity(cls, d: int) -> "AttentionWeights":
        eye = np.eye(d)
        return cls(*(Tensor(eye.copy()) for _ in range(4)))


def _project(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    y = x @ w
    return y if b is None else y + b


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    # [..., N, d] -> [..., H, N, d/H]
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, num_heads, d // num_heads)
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return x.transpose(*axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return x.transpose(*axes).reshape(*lead, n, h * dh)


def _qkv(x: Tensor, w: AttentionWeights, num_heads: int):
    q = _split_heads(_project(x, w.w_q, w.b_q), num_heads)
    k = _split_heads(_project(x, w.w_k, w.b_k), num_heads)
    v = _split_heads(_project(x, w.w_v, w.b_v), num_heads)
    return q, k, v


def _logits(q: Tensor, k: Tensor) -> Tensor:
    nd = q.ndim
    axes = list(range(nd - 2)) + [nd - 1, nd - 2]
    return q @ k.transpose(*axes)


def _softmax_weights(q: Tensor, k: Tensor) -> Tensor:
    return ad.softmax(ad.scale(_logits(q, k), 1.0 / math.sqrt(q.shape[-1])), axis=-1)


def _taylor_weights(q: Tensor, k: Tensor, variant: str) -> Tensor:
    n = q.shape[-2]
    if variant == "squared":
        return ad.scale(ad.square(_logits(q, k)), 1.0 / n)
    if variant == "scale":
        return ad.scale(_logits(q, k), 1.0 / n)
    if variant == "uniform":
        return Tensor(np.full(q.shape[:-1] + (n,), 1.0 / n))
    raise ValueError(f"unknown attention variant {variant!r}")


def _attend(a: Tensor, v: Tensor, w: AttentionWeights) -> Tensor:
    return _project(_merge_heads(a @ v), w.w_o, w.b_o)


def softmax_attention(x: Tensor, w: AttentionWeights, num_heads: int = 1) -> Tensor:
    q, k, v = _qkv(x, w, num_heads)
    return _attend(_softmax_weights(q, k), v, w)


def squared_attention(x: Tensor, w: AttentionWeights, num_heads: int = 1) -> Tensor:
    """Attention weights (QK^T)^2 / N, no softmax and no 1/sqrt(d) scaling."""
    q, k, v = _qkv(x, w, num_heads)
    return _attend(_taylor_weights(q, k, "squared"), v, w)


def scale_attention(x: Tensor, w: AttentionWeights, num_heads: int = 1) -> Tensor:
    q, k, v = _qkv(x, w, num_heads)
    return _attend(_taylor_weights(q, k, "scale"), v, w)


def uniform_attention(x: Tensor, w: AttentionWeights, num_heads: int = 1) -> Tensor:
    """Every output row is the mean value vector (then output-projected)."""
    q, k, v = _qkv(x, w, num_heads)
    return _attend(_taylor_weights(q, k, "uniform"), v, w)


def switched_attention(x: Tensor, s, w: AttentionWeights, num_heads: int = 1,
                       variant: str = "squared") -> Tensor:
    """Blend softmax and Taylor attention row by row.

    ``s`` has shape [H, N]; row i of head h uses s*softmax + (1-s)*taylor.
    Blending the weight rows is the same as blending the output rows because
    both branches share V and the output projection.
    """
    s = ad.constant(s)
    q, k, v = _qkv(x, w, num_heads)
    soft = _softmax_weights(q, k)
    taylor = _taylor_weights(q, k, variant)
    s_col = s.reshape(*s.shape, 1)
    a = s_col * soft + (1.0 - s_col) * taylor
    return _attend(a, v, w)


# -- model -------------------------------------------------------------------


def param_shapes(config: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Parameter names and shapes, in checkpoint order."""
    d, m, n = config.embed_dim, config.mlp_dim, config.num_tokens
    shapes = OrderedDict()
    shapes["patch.w"] = (config.patch_dim, d)
    shapes["patch.b"] = (d,)
    shapes["cls"] = (1, 1, d)
    shapes["pos"] = (n, d)
    for i in range(config.num_layers):
        p = f"layer{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for name in ("q", "k", "v", "o"):
            shapes[p + f"attn.w_{name}"] = (d, d)
            shapes[p + f"attn.b_{name}"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "mlp.w1"] = (d, m)
        shapes[p + "mlp.b1"] = (m,)
        shapes[p + "mlp.w2"] = (m, d)
        shapes[p + "mlp.b2"] = (d,)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["head.w"] = (d, config.num_classes)
    shapes["head.b"] = (config.num_classes,)
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator) -> "OrderedDict[str, Tensor]":
    """Matrices ~ N(0, 1/fan_in) clipped at 2 sigma; cls/pos ~ N(0, 0.02); biases 0; LN gains 1."""
    params = OrderedDict()
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            value = np.ones(shape)
        elif leaf.startswith("b") and name != "cls":
            value = np.zeros(shape)
        elif leaf.startswith("w") and len(shape) == 2:
            std = 1.0 / math.sqrt(shape[0])
            value = np.clip(rng.normal(0.0, std, shape), -2 * std, 2 * std)
        else:
            value = np.clip(rng.normal(0.0, 0.02, shape), -0.04, 0.04)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[B, H, W, C] -> [B, num_patches, p*p*C], patches in row-major order."""
    b, h, w, c = images.shape
    p = patch_size
    x = images.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


class ViT:
    """Switched ViT: parameters, switches and the forward pass."""

    def __init__(self, config: ModelConfig, params=None, switches: SwitchSet | None = None,
                 seed: int = 0, epsilon: float = 1e-3):
        config.validate()
        self.config = config
        self.params = params if params is not None else init_params(config, ad.make_rng(seed))
        self.switches = switches if switches is not None else SwitchSet.ones(config, epsilon)
        self._check_shapes()

    def _check_shapes(self) -> None:
        for name, shape in param_shapes(self.config).items():
            if name not in self.params:
                raise ShapeError(f"missing parameter {name}")
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {self.params[name].shape}")
        if self.switches.gelu.shape != self.config.gelu_switch_shape:
            raise ShapeError(f"gelu switches: expected {self.config.gelu_switch_shape}, "
                             f"got {self.switches.gelu.shape}")
        if self.switches.softmax.shape != self.config.softmax_switch_shape:
            raise ShapeError(f"softmax switches: expected {self.config.softmax_switch_shape}, "
                             f"got {self.switches.softmax.shape}")

    def weights(self) -> list[Tensor]:
        return list(self.params.values())

    def trainable(self) -> list[Tensor]:
        return self.weights() + self.switches.trainable()

    def copy(self) -> "ViT":
        params = OrderedDict((k, Tensor(v.value.copy(), requires_grad=True, name=k))
                             for k, v in self.params.items())
        return ViT(self.config, params, self.switches.copy())

    def attention_weights(self, layer: int) -> AttentionWeights:
        p = self.params
        pre = f"layer{layer}.attn."
        return AttentionWeights(*(p[pre + k] for k in
                                  ("w_q", "w_k", "w_v", "w_o", "b_q", "b_k", "b_v", "b_o")))

    def forward(self, images) -> Tensor:
        return vit_forward(images, self.params, self.switches, self.config)

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        with ad.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.forward(images[i:i + batch_size]).value.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def vit_forward(images, params, switches: SwitchSet, config: ModelConfig) -> Tensor:
    """Logits [B, num_classes] for images [B, H, W, C]."""
    imgs = images.value if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    expected = (config.image_size, config.image_size, config.channels)
    if imgs.ndim != 4 or imgs.shape[1:] != expected:
        raise ShapeError(f"images must be [B, {expected[0]}, {expected[1]}, {expected[2]}], got {imgs.shape}")
    p = params
    b = imgs.shape[0]
    n, h = config.num_tokens, config.num_heads

    x = Tensor(patchify(imgs, config.patch_size)) @ p["patch.w"] + p["patch.b"]
    cls = ad.broadcast_to(p["cls"], (b, 1, config.embed_dim))
    x = ad.concat([cls, x], axis=1) + p["pos"]

    per_token = config.gelu_granularity == "per-token"
    for i in range(config.num_layers):
        pre = f"layer{i}."
        w = AttentionWeights(*(p[pre + "attn." + k] for k in
                               ("w_q", "w_k", "w_v", "w_o", "b_q", "b_k", "b_v", "b_o")))
        y = ad.layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"], config.ln_eps)
        x = x + switched_attention(y, switches.softmax[i], w, h, config.attn_variant)
        y = ad.layernorm(x, p[pre + "ln2.g"], p[pre + "ln2.b"], config.ln_eps)
        u = y @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]
        c = switches.gelu[i]
        if per_token:
            c = c.reshape(n, 1)
        x = x + (switched_gelu(c, u) @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"])
    cls_out = ad.layernorm(x[:, 0, :], p["ln_f.g"], p["ln_f.b"], config.ln_eps)
    return cls_out @ p["head.w"] + p["head.b"]
