"""Penalized objective, distillation, optimizers and the switch search loop."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .vit import ViT, binarize, count_active

log = logging.getLogger(__name__)

INCREMENT_RULES = ("insufficient-decrease", "count-increase")


class NonConvergenceError(RuntimeError):
    """Budgets were not met within ``max_epochs``; ``history`` holds every epoch run."""

    def __init__(self, message: str, history: list[dict]):
        super().__init__(message)
        self.history = history


class ContractError(RuntimeError):
    pass


@dataclass
class SearchConfig:
    lambda_g: float = 3e-5
    lambda_s: float = 3e-5
    kappa: float = 1.1
    gelu_budget: int = 0
    softmax_budget: int = 0
    epsilon: float = 1e-3
    gelu_improve_min: int = 2
    softmax_improve_min: int = 200
    strategy: int = 5
    increment_rule: str = "insufficient-decrease"
    early_binarize: bool = True
    kd_enabled: bool = True
    kd_temperature: float = 4.0
    warmup_epochs: int = 5
    max_epochs: int = 300
    finetune_epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-4
    switch_lr: float = 1e-4
    finetune_lr: float = 1e-4
    weight_decay: float = 1e-4
    pretrain_epochs: int = 200
    pretrain_lr: float = 1e-3
    pretrain_patience: int = 20

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.kappa > 1:
            raise ValueError("kappa must exceed 1")
        if self.gelu_budget < 0 or self.softmax_budget < 0:
            raise ValueError("budgets must be non-negative")
        if not self.kd_temperature > 0:
            raise ValueError("kd_temperature must be positive")
        if self.increment_rule not in INCREMENT_RULES:
            raise ValueError(f"increment_rule must be one of {INCREMENT_RULES}")
        if self.strategy not in (1, 2, 3, 4, 5):
            raise ValueError("strategy must be 1..5")


@dataclass
class SearchState:
    lambda_g: float
    lambda_s: float
    lowest_gelu_count: int
    lowest_softmax_count: int
    prev_gelu_count: int
    prev_softmax_count: int
    c_budget_met: bool = False
    s_budget_met: bool = False
    epoch: int = 0


# -- strategies ----------------------------------------------------------------

# finetune epochs, early binarization, increment rule, softmax/gelu starting penalty ratio
_STRATEGIES = {
    1: (10, False, "insufficient-decrease", 1.0),
    2: (10, False, "count-increase", 1.0),
    3: (10, False, "count-increase", 20.0),
    4: (10, True, "count-increase", 1.0),
    5: (50, True, "insufficient-decrease", 1.0),
}


def apply_strategy(cfg: SearchConfig, strategy: int) -> SearchConfig:
    """Return a copy of ``cfg`` with one of the five tuning strategies applied.

    The penalty ratio scales ``lambda_s`` off ``lambda_g``; strategy 3 starts the
    softmax penalty 20 times higher.
    """
    if strategy not in _STRATEGIES:
        raise ValueError(f"strategy must be 1..5, got {strategy}")
    epochs, early, rule, ratio = _STRATEGIES[strategy]
    return dataclasses.replace(cfg, strategy=strategy, finetune_epochs=epochs, early_binarize=early,
                               increment_rule=rule, lambda_s=ratio * cfg.lambda_g)


# -- losses --------------------------------------------------------------------


def l1_penalty(model: ViT, lambda_g: float, lambda_s: float) -> Tensor | None:
    sw = model.switches
    terms = []
    if not sw.gelu_frozen and lambda_g:
        terms.append(ad.scale(ad.absolute(sw.gelu).sum(), lambda_g))
    if not sw.softmax_frozen and lambda_s:
        terms.append(ad.scale(ad.absolute(sw.softmax).sum(), lambda_s))
    if not terms:
        return None
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def privit_loss(logits: Tensor, labels, model: ViT, lambda_g: float, lambda_s: float) -> Tensor:
    """Cross-entropy plus L1 on the raw values of the unfrozen switch masks."""
    loss = ad.cross_entropy(logits, labels)
    penalty = l1_penalty(model, lambda_g, lambda_s)
    return loss if penalty is None else loss + penalty


def kd_loss(student_logits: Tensor, teacher_logits, temperature: float = 4.0) -> Tensor:
    """T^2 * KL(softmax(teacher/T) || softmax(student/T)), averaged over the batch."""
    t = teacher_logits.value if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, float)
    if t.shape != student_logits.shape:
        raise ad.ShapeError(f"teacher {t.shape} vs student {student_logits.shape}")
    z = t / temperature
    z = z - z.max(axis=1, keepdims=True)
    log_pt = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    pt = np.exp(log_pt)
    log_ps = ad.log_softmax(ad.scale(student_logits, 1.0 / temperature), axis=1)
    batch = student_logits.shape[0]
    cross = ad.scale((log_ps * pt).sum(), -1.0 / batch)
    entropy_term = float((pt * log_pt).sum()) / batch
    return ad.scale(cross + entropy_term, temperature**2)


# -- optimizers ----------------------------------------------------------------


class Adam:
    """Adam over a list of tensors; tensors with ``requires_grad=False`` are skipped.

    ``weight_decay`` is decoupled (AdamW) when ``decoupled`` is set, otherwise it
    is folded into the gradient.
    """

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decoupled: bool = False):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.lrs = [None] * len(self.params)

    def set_lr(self, param: Tensor, lr: float) -> None:
        """Per-tensor learning rate override."""
        for i, p in enumerate(self.params):
            if p is param:
                self.lrs[i] = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            if not p.requires_grad:
                continue
            lr = self.lr if self.lrs[i] is None else self.lrs[i]
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p.value
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            update = lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            if self.weight_decay and self.decoupled:
                p.value = p.value * (1.0 - lr * self.weight_decay) - update
            else:
                p.value = p.value - update


class AdamW(Adam):
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-2):
        super().__init__(params, lr, betas, eps, weight_decay, decoupled=True)


def cosine_lr(lr0: float, epoch: int, total: int) -> float:
    """lr0 * 0.5 * (1 + cos(pi * epoch / total))."""
    if total <= 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total))


# -- training primitives ---------------------------------------------------------


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 1) -> np.ndarray:
    """Random horizontal flip plus random crop after edge padding."""
    b, h, w, _ = images.shape
    flip = rng.random(b) < 0.5
    out = np.where(flip[:, None, None, None], images[:, :, ::-1, :], images)
    padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="edge")
    dy = rng.integers(0, 2 * pad + 1, b)
    dx = rng.integers(0, 2 * pad + 1, b)
    return np.stack([padded[i, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(b)])


def teacher_logits(teacher: ViT | None, images: np.ndarray, batch_size: int = 256) -> np.ndarray | None:
    if teacher is None:
        return None
    with ad.no_grad():
        return np.concatenate([teacher(images[i:i + batch_size]).value
                               for i in range(0, len(images), batch_size)])


def accuracy(model: ViT, images: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(model.predict(images) == labels))


def per_class_accuracy(model: ViT, images: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    pred = model.predict(images)
    out = np.zeros(num_classes)
    for k in range(num_classes):
        mask = labels == k
        out[k] = np.mean(pred[mask] == k) if mask.any() else np.nan
    return out


def run_epoch(model: ViT, opt: Adam, images: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
              batch_size: int, lambda_g: float = 0.0, lambda_s: float = 0.0,
              soft_targets: np.ndarray | None = None, temperature: float = 4.0,
              augment_data: bool = False) -> dict:
    """One shuffled pass; returns mean total, CE and KD losses over batches."""
    order = rng.permutation(len(labels))
    totals = {"train_loss": 0.0, "ce_loss": 0.0, "kd_loss": 0.0}
    batches = 0
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        x = images[idx]
        if augment_data:
            x = augment(x, rng)
        opt.zero_grad()
        logits = model(x)
        ce = ad.cross_entropy(logits, labels[idx])
        loss = ce
        penalty = l1_penalty(model, lambda_g, lambda_s)
        if penalty is not None:
            loss = loss + penalty
        kd_val = 0.0
        if soft_targets is not None:
            kd = kd_loss(logits, soft_targets[idx], temperature)
            kd_val = kd.item()
            loss = loss + kd
        loss.backward()
        opt.step()
        totals["train_loss"] += loss.item()
        totals["ce_loss"] += ce.item()
        totals["kd_loss"] += kd_val
        batches += 1
    return {k: v / max(batches, 1) for k, v in totals.items()}


def _make_search_optimizer(model: ViT, cfg: SearchConfig) -> Adam:
    opt = Adam(model.weights() + [model.switches.gelu, model.switches.softmax], lr=cfg.lr)
    opt.set_lr(model.switches.gelu, cfg.switch_lr)
    opt.set_lr(model.switches.softmax, cfg.switch_lr)
    return opt


# -- penalty scheduling ------------------------------------------------------------


def schedule_penalties(state: SearchState, gelu_count: int, softmax_count: int,
                       cfg: SearchConfig) -> SearchState:
    """Grow each penalty by kappa when its active count stalls; track lowest counts.

    Under ``insufficient-decrease`` a mask stalls when it fell by fewer than
    ``*_improve_min`` from its lowest count so far.  Under ``count-increase`` it
    stalls when the count did not drop below last epoch's.  A mask whose budget is
    already met never has its penalty grown.
    """
    new = dataclasses.replace(state)
    if cfg.increment_rule == "insufficient-decrease":
        gelu_stalled = state.lowest_gelu_count - gelu_count < cfg.gelu_improve_min
        softmax_stalled = state.lowest_softmax_count - softmax_count < cfg.softmax_improve_min
    else:
        gelu_stalled = gelu_count >= state.prev_gelu_count
        softmax_stalled = softmax_count >= state.prev_softmax_count
    if gelu_stalled and not state.c_budget_met:
        new.lambda_g = cfg.kappa * state.lambda_g
    if softmax_stalled and not state.s_budget_met:
        new.lambda_s = cfg.kappa * state.lambda_s
    new.lowest_gelu_count = min(state.lowest_gelu_count, gelu_count)
    new.lowest_softmax_count = min(state.lowest_softmax_count, softmax_count)
    new.prev_gelu_count = gelu_count
    new.prev_softmax_count = softmax_count
    return new


# -- search and finetune -------------------------------------------------------------


def privit_search(model: ViT, teacher: ViT | None, images: np.ndarray, labels: np.ndarray,
                  cfg: SearchConfig, seed: int = 0, augment_data: bool = False):
    """Train weights and switches under growing L1 penalties until both budgets hold.

    Returns ``(model, state, history)``.  The model is modified in place; on return
    both masks are binary and frozen with active counts within budget.
    """
    rng = ad.make_rng(seed)
    model.switches.epsilon = cfg.epsilon
    soft = teacher_logits(teacher, images) if (teacher is not None and cfg.kd_enabled) else None
    opt = _make_search_optimizer(model, cfg)
    g0, s0 = count_active(model.switches)
    state = SearchState(cfg.lambda_g, cfg.lambda_s, g0, s0, g0, s0)
    history: list[dict] = []

    for epoch in range(1, cfg.max_epochs + 1):
        losses = run_epoch(model, opt, images, labels, rng, cfg.batch_size, state.lambda_g,
                           state.lambda_s, soft, cfg.kd_temperature, augment_data)
        gelu_count, softmax_count = count_active(model.switches)
        if epoch <= cfg.warmup_epochs:
            state = dataclasses.replace(
                state, lowest_gelu_count=min(state.lowest_gelu_count, gelu_count),
                lowest_softmax_count=min(state.lowest_softmax_count, softmax_count),
                prev_gelu_count=gelu_count, prev_softmax_count=softmax_count)
        else:
            state = schedule_penalties(state, gelu_count, softmax_count, cfg)
            state = _check_budgets(model, state, gelu_count, softmax_count, cfg)
        state.epoch = epoch
        history.append({
            "epoch": epoch, **losses, "gelu_count": gelu_count, "softmax_count": softmax_count,
            "lambda_g": state.lambda_g, "lambda_s": state.lambda_s,
            "lowest_gelu_count": state.lowest_gelu_count,
            "lowest_softmax_count": state.lowest_softmax_count,
            "c_frozen": model.switches.gelu_frozen, "s_frozen": model.switches.softmax_frozen,
        })
        log.debug("epoch %d loss %.4f gelu %d softmax %d", epoch, losses["train_loss"],
                  gelu_count, softmax_count)
        if epoch > cfg.warmup_epochs and gelu_count <= cfg.gelu_budget and softmax_count <= cfg.softmax_budget:
            binarize(model.switches, "both")
            return model, state, history
    raise NonConvergenceError(
        f"budgets (gelu {cfg.gelu_budget}, softmax {cfg.softmax_budget}) not met in "
        f"{cfg.max_epochs} epochs", history)


def _check_budgets(model: ViT, state: SearchState, gelu_count: int, softmax_count: int,
                   cfg: SearchConfig) -> SearchState:
    if gelu_count <= cfg.gelu_budget and not state.c_budget_met:
        state = dataclasses.replace(state, c_budget_met=True)
        if cfg.early_binarize:
            binarize(model.switches, "gelu")
    if softmax_count <= cfg.softmax_budget and not state.s_budget_met:
        state = dataclasses.replace(state, s_budget_met=True)
        if cfg.early_binarize:
            binarize(model.switches, "softmax")
    return state


def finetune(model: ViT, teacher: ViT | None, images: np.ndarray, labels: np.ndarray,
             cfg: SearchConfig, seed: int = 0, augment_data: bool = False) -> list[dict]:
    """AdamW on weights only with a cosine-annealed learning rate; switches stay fixed."""
    sw = model.switches
    if not (sw.gelu_frozen and sw.softmax_frozen):
        raise ContractError("finetune requires both switch masks binarized and frozen")
    rng = ad.make_rng(seed)
    soft = teacher_logits(teacher, images) if (teacher is not None and cfg.kd_enabled) else None
    opt = AdamW(model.weights(), lr=cfg.finetune_lr, weight_decay=cfg.weight_decay)
    history = []
    for epoch in range(cfg.finetune_epochs):
        opt.lr = cosine_lr(cfg.finetune_lr, epoch, cfg.finetune_epochs)
        losses = run_epoch(model, opt, images, labels, rng, cfg.batch_size, 0.0, 0.0, soft,
                           cfg.kd_temperature, augment_data)
        history.append({"epoch": epoch + 1, "lr": opt.lr, **losses})
    return history


def pretrain(model: ViT, images: np.ndarray, labels: np.ndarray, cfg: SearchConfig, seed: int = 0,
             augment_data: bool = False) -> list[dict]:
    """Train a fully nonlinear teacher (switches fixed at 1) with AdamW.

    Stops at ``pretrain_epochs`` or when train accuracy has not improved for
    ``pretrain_patience`` epochs.
    """
    binarize(model.switches, "both")
    rng = ad.make_rng(seed)
    opt = AdamW(model.weights(), lr=cfg.pretrain_lr, weight_decay=cfg.weight_decay)
    history = []
    best, since = -1.0, 0
    for epoch in range(cfg.pretrain_epochs):
        losses = run_epoch(model, opt, images, labels, rng, cfg.batch_size, augment_data=augment_data)
        acc = accuracy(model, images, labels)
        history.append({"epoch": epoch + 1, **losses, "train_acc": acc})
        if acc > best:
            best, since = acc, 0
        else:
            since += 1
        if since >= cfg.pretrain_patience:
            break
    return history


def layerwise_taylorize_baseline(model: ViT, k: int) -> ViT:
    """Zero every GELU switch in the last ``k`` layers and freeze both masks (softmax kept)."""
    n = model.config.num_layers
    if not 0 <= k <= n:
        raise ValueError(f"k must be in [0, {n}], got {k}")
    sw = model.switches
    sw.gelu.value = np.ones_like(sw.gelu.value)
    if k:
        sw.gelu.value[n - k:] = 0.0
    sw.softmax.value = np.ones_like(sw.softmax.value)
    sw.gelu_frozen = sw.softmax_frozen = False
    binarize(sw, "both")
    return model
