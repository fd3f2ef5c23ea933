"""Switched-nonlinearity Vision Transformers for MPC-friendly private inference."""

from .autodiff import Tensor, grad_check, make_rng, no_grad
from .latency import (CostTable, NonlinearityCensus, ParetoPoint, builtin_cost_table,
                      census_of_model, cost_of, latency_estimate, pareto_frontier)
from .train import (Adam, AdamW, SearchConfig, SearchState, apply_strategy, finetune, kd_loss,
                    layerwise_taylorize_baseline, privit_loss, privit_search, schedule_penalties)
from .vit import ModelConfig, SwitchSet, ViT, binarize, count_active, vit_forward

__version__ = "0.1.0"
