"""Binary checkpoint format for switched ViTs.

Layout, all little-endian::

    magic        4 bytes   b"PVIT"
    version      uint32    1
    config       8 x uint32  num_layers, embed_dim, mlp_dim, num_heads,
                             image_size, patch_size, num_classes, channels
    codes        4 x uint8   gelu_granularity (0 per-token, 1 per-element),
                             attn_variant (0 squared, 1 scale, 2 uniform),
                             gelu_frozen, softmax_frozen
    scalars      2 x float64 ln_eps, switch epsilon
    arrays       float64     every parameter in ``param_shapes`` order (C order),
                             then GELU switches, then softmax switches

Shapes are not stored; they follow from the config.  Trailing bytes are an error.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

from .autodiff import Tensor
from .vit import ATTN_VARIANTS, GRANULARITIES, ModelConfig, SwitchSet, ViT, param_shapes

MAGIC = b"PVIT"
VERSION = 1
_HEADER = struct.Struct("<4sI8I4B2d")
_F64 = np.dtype("<f8")


class CheckpointError(OSError):
    pass


def to_bytes(model: ViT) -> bytes:
    cfg, sw = model.config, model.switches
    header = _HEADER.pack(
        MAGIC, VERSION, cfg.num_layers, cfg.embed_dim, cfg.mlp_dim, cfg.num_heads, cfg.image_size,
        cfg.patch_size, cfg.num_classes, cfg.channels, GRANULARITIES.index(cfg.gelu_granularity),
        ATTN_VARIANTS.index(cfg.attn_variant), int(sw.gelu_frozen), int(sw.softmax_frozen),
        cfg.ln_eps, sw.epsilon)
    chunks = [header]
    for name in param_shapes(cfg):
        chunks.append(np.ascontiguousarray(model.params[name].value, dtype=_F64).tobytes())
    chunks.append(np.ascontiguousarray(sw.gelu.value, dtype=_F64).tobytes())
    chunks.append(np.ascontiguousarray(sw.softmax.value, dtype=_F64).tobytes())
    return b"".join(chunks)


def from_bytes(data: bytes) -> ViT:
    if len(data) < _HEADER.size:
        raise CheckpointError("truncated checkpoint header")
    fields = _HEADER.unpack_from(data)
    magic, version = fields[0], fields[1]
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    ints = fields[2:10]
    gran, variant, g_frozen, s_frozen = fields[10:14]
    ln_eps, epsilon = fields[14:16]
    try:
        cfg = ModelConfig(*ints, gelu_granularity=GRANULARITIES[gran],
                          attn_variant=ATTN_VARIANTS[variant], ln_eps=ln_eps)
    except (IndexError, ValueError) as exc:
        raise CheckpointError(f"invalid config in checkpoint: {exc}") from exc

    offset = _HEADER.size

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError("truncated checkpoint body")
        arr = np.frombuffer(data, dtype=_F64, count=count, offset=offset).astype(np.float64).reshape(shape)
        offset = end
        return arr

    params = OrderedDict((name, Tensor(take(shape), requires_grad=True, name=name))
                         for name, shape in param_shapes(cfg).items())
    gelu = take(cfg.gelu_switch_shape)
    softmax = take(cfg.softmax_switch_shape)
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes in checkpoint")
    switches = SwitchSet(Tensor(gelu, requires_grad=not g_frozen, name="switch.gelu"),
                         Tensor(softmax, requires_grad=not s_frozen, name="switch.softmax"),
                         epsilon, bool(g_frozen), bool(s_frozen))
    return ViT(cfg, params, switches)


def save(model: ViT, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(model))


def load(path) -> ViT:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
