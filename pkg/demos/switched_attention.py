"""How one switch blends exact softmax attention with its Taylor replacement."""

import numpy as np

from privit.autodiff import Tensor
from privit.vit import (AttentionWeights, scale_attention, softmax_attention, squared_attention,
                        switched_attention, switched_gelu, uniform_attention)

w = AttentionWeights.identity(1)
x = Tensor([[2.0]])
print("softmax  ", softmax_attention(x, w).value.item())   # weight 1 -> 2
print("squared  ", squared_attention(x, w).value.item())   # (2*2)^2 / 1 * 2 = 32
print("scale    ", scale_attention(x, w).value.item())     # 4 / 1 * 2 = 8
print("uniform  ", uniform_attention(x, w).value.item())
for s in (1.0, 0.5, 0.0):
    print(f"s={s:<4} ->", switched_attention(x, Tensor([[s]]), w).value.item())

u = Tensor(np.linspace(-2, 2, 5))
for c in (1.0, 0.5, 0.0):
    print(f"c={c:<4} gelu ->", np.round(switched_gelu(Tensor(c), u).value, 4))
