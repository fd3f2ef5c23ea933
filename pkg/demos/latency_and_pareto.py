"""ReLUOps accounting for a ViT-base sized census and a Pareto frontier."""

import numpy as np

from privit.latency import ParetoPoint, base_census, cost_of, latency_breakdown, pareto_frontier
from privit.vit import ModelConfig

print("softmax(197)", cost_of("softmax", 197), " softmax(394)", cost_of("softmax", 394),
      " gelu x 3072", cost_of("gelu", 3072))

vit_base = ModelConfig(num_layers=12, embed_dim=768, mlp_dim=3072, num_heads=12, image_size=224,
                       patch_size=16, num_classes=1000)
census = base_census(vit_base)
print("per layer:", census.layer_totals(0))
parts = latency_breakdown(census)
total = sum(parts.values())
for tag, cost in sorted(parts.items(), key=lambda kv: -kv[1]):
    print(f"  {tag:10s} {cost / 1e6:10.2f}M  ({100 * cost / total:.1f}%)")

rng = np.random.default_rng(1)
points = [ParetoPoint(float(rng.uniform(1, 10)), float(rng.uniform(0.5, 1.0)), f"run{i}") for i in range(12)]
for p in pareto_frontier(points):
    print(f"  frontier {p.label:6s} latency {p.latency:5.2f}  acc {p.accuracy:.3f}")
