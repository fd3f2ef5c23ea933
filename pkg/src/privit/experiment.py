"""Run configuration and the experiment pipelines behind the command line.

Configs are INI files read with :mod:`configparser`.  Sections and keys::

    [run]     seed, out, teacher (optional checkpoint path)
    [model]   any ModelConfig field
    [search]  any SearchConfig field; budgets may be written as "25%" of the
              total switch count
    [data]    source (synthetic | cifar10), path, classes, train_per_class,
              test_per_class, noise, augment

A run is fully determined by its config: every random draw derives from the
run seed, and all outputs are CSV or PVIT checkpoints.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .autodiff import Tensor
from .data import DatasetSplit, gen_synthetic, load_cifar10_subset
from .latency import (NonlinearityCensus, ParetoPoint, base_census, census_of_model,
                      latency_estimate, write_latency_csv, write_pareto_csv)
from .train import (NonConvergenceError, SearchConfig, accuracy, apply_strategy, finetune,
                    layerwise_taylorize_baseline, per_class_accuracy, pretrain, privit_search)
from .vit import ModelConfig, SwitchSet, ViT, count_active

log = logging.getLogger(__name__)

HISTORY_FIELDS = ["epoch", "train_loss", "ce_loss", "kd_loss", "gelu_count", "softmax_count",
                  "lambda_g", "lambda_s", "c_frozen", "s_frozen"]

# desk-scale overrides of the paper-scale SearchConfig defaults.  Near zero, Adam moves a
# switch by about switch_lr per step, so epsilon stays 10x switch_lr (the paper's ratio);
# a smaller threshold lets dithering switches flip in and out of the active count.
DESK_SEARCH = dict(lr=1e-3, switch_lr=3e-3, epsilon=3e-2, finetune_lr=1e-3, pretrain_lr=1e-3,
                   pretrain_epochs=200, pretrain_patience=20, batch_size=32)


class ConfigError(ValueError):
    pass


@dataclass
class DataSpec:
    source: str = "synthetic"
    path: str = ""
    classes: int = 4
    train_per_class: int = 128
    test_per_class: int = 50
    noise: float = 0.1
    augment: bool = False


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    search: SearchConfig = field(default_factory=lambda: SearchConfig(**DESK_SEARCH))
    data: DataSpec = field(default_factory=DataSpec)
    seed: int = 0
    out: str = "runs/default"
    teacher: str = ""

    def with_budgets(self, gelu: int | None = None, softmax: int | None = None) -> "RunConfig":
        changes = {}
        if gelu is not None:
            changes["gelu_budget"] = int(gelu)
        if softmax is not None:
            changes["softmax_budget"] = int(softmax)
        return dataclasses.replace(self, search=dataclasses.replace(self.search, **changes))


# -- config parsing --------------------------------------------------------------


def _coerce(cls, key: str, raw: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if key not in fields:
        raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
    default = fields[key].default
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "1", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {cls.__name__}.{key}") from None


def _resolve_budget(raw: str, total: int) -> int:
    raw = raw.strip()
    if raw.endswith("%"):
        return int(total * float(raw[:-1]) / 100.0)
    return int(raw)


def build_run_config(sections: dict, strategy: int | None = None, seed: int | None = None,
                     out: str | None = None, gelu_budget: int | None = None,
                     softmax_budget: int | None = None, variant: str | None = None,
                     no_kd: bool = False) -> RunConfig:
    """Assemble a RunConfig from raw ``{section: {key: str}}`` plus command-line overrides.

    The tuning strategy is applied first; explicit ``[search]`` keys and then
    flags override what it sets.
    """
    known = {"run", "model", "search", "data"}
    extra = set(sections) - known - {"DEFAULT"}
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    try:
        model_kw = {k: _coerce(ModelConfig, k, v) for k, v in sections.get("model", {}).items()}
        if variant is not None:
            model_kw["attn_variant"] = variant
        model = ModelConfig(**model_kw)

        raw_search = dict(sections.get("search", {}))
        budgets = {k: raw_search.pop(k) for k in ("gelu_budget", "softmax_budget") if k in raw_search}
        explicit = {k: _coerce(SearchConfig, k, v) for k, v in raw_search.items()}
        strat = strategy if strategy is not None else explicit.pop("strategy", 5)
        explicit.pop("strategy", None)
        gelu_total = int(np.prod(model.gelu_switch_shape))
        softmax_total = int(np.prod(model.softmax_switch_shape))
        explicit["gelu_budget"] = _resolve_budget(budgets.get("gelu_budget", "100%"), gelu_total)
        explicit["softmax_budget"] = _resolve_budget(budgets.get("softmax_budget", "100%"), softmax_total)
        if gelu_budget is not None:
            explicit["gelu_budget"] = gelu_budget
        if softmax_budget is not None:
            explicit["softmax_budget"] = softmax_budget
        if no_kd:
            explicit["kd_enabled"] = False
        base = SearchConfig(**{**DESK_SEARCH, **explicit})
        search = dataclasses.replace(apply_strategy(base, strat), **explicit)

        data = DataSpec(**{k: _coerce(DataSpec, k, v) for k, v in sections.get("data", {}).items()})
        if data.source not in ("synthetic", "cifar10"):
            raise ConfigError(f"data.source must be synthetic or cifar10, got {data.source!r}")
        run = sections.get("run", {})
        for key in run:
            if key not in ("seed", "out", "teacher"):
                raise ConfigError(f"unknown key {key!r} in [run]")
        run_seed = seed if seed is not None else int(run.get("seed", 0))
        return RunConfig(model, search, data, run_seed, out or run.get("out", "runs/default"),
                         run.get("teacher", ""))
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def read_config_sections(path) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return {s: dict(parser.items(s)) for s in parser.sections()}


def load_config(path=None, **overrides) -> RunConfig:
    sections = read_config_sections(path) if path else {}
    return build_run_config(sections, **overrides)


def write_config(cfg: RunConfig, path) -> None:
    """Write a config that reproduces ``cfg`` exactly when loaded back."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["run"] = {"seed": str(cfg.seed), "out": cfg.out}
    if cfg.teacher:
        parser["run"]["teacher"] = cfg.teacher
    parser["model"] = {k: str(v) for k, v in dataclasses.asdict(cfg.model).items()}
    parser["search"] = {k: repr(v) if isinstance(v, float) else str(v)
                        for k, v in dataclasses.asdict(cfg.search).items()}
    parser["data"] = {k: str(v) for k, v in dataclasses.asdict(cfg.data).items()}
    with open(path, "w") as fh:
        parser.write(fh)


# -- data and models -------------------------------------------------------------------


def load_run_data(cfg: RunConfig) -> tuple[DatasetSplit, DatasetSplit]:
    d, m = cfg.data, cfg.model
    if d.source == "synthetic":
        if d.classes != m.num_classes:
            raise ConfigError(f"data.classes={d.classes} but model.num_classes={m.num_classes}")
        train = gen_synthetic(d.classes, d.train_per_class, m.image_size, cfg.seed,
                              m.channels, d.noise)
        test = gen_synthetic(d.classes, d.test_per_class, m.image_size, cfg.seed + 7_000_003,
                             m.channels, d.noise)
        return train, test
    if m.num_classes != 10 or m.channels != 3:
        raise ConfigError("cifar10 needs num_classes=10 and channels=3")
    train = load_cifar10_subset(d.path, d.train_per_class, cfg.seed, m.image_size, train=True)
    test = load_cifar10_subset(d.path, d.test_per_class, cfg.seed, m.image_size, train=False)
    return train, test


def student_from(teacher: ViT | None, config: ModelConfig, seed: int, epsilon: float) -> ViT:
    """Fresh switches (all 1) on a copy of the teacher's weights, or on a random init."""
    if teacher is None:
        return ViT(config, seed=seed, epsilon=epsilon)
    if dataclasses.replace(teacher.config, attn_variant=config.attn_variant) != config:
        raise ConfigError("teacher checkpoint does not match the model config")
    params = teacher.copy().params
    return ViT(config, params, SwitchSet.ones(config, epsilon))


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_history(history: list[dict], path, fields=HISTORY_FIELDS) -> None:
    _write_rows(path, fields, ([h[k] for k in fields] for h in history))


def write_metrics(metrics: dict, path) -> None:
    _write_rows(path, ["metric", "value"], metrics.items())


# -- commands ----------------------------------------------------------------------------


def cmd_pretrain(cfg: RunConfig) -> ViT:
    """Train the fully nonlinear teacher and write ``teacher.pvit`` plus metrics."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_run_data(cfg)
    teacher = ViT(cfg.model, seed=cfg.seed, epsilon=cfg.search.epsilon)
    history = pretrain(teacher, train.images, train.labels, cfg.search, cfg.seed, cfg.data.augment)
    checkpoint.save(teacher, out / "teacher.pvit")
    write_history(history, out / "pretrain_history.csv",
                  ["epoch", "train_loss", "ce_loss", "kd_loss", "train_acc"])
    write_metrics({"epochs": len(history),
                   "train_accuracy": accuracy(teacher, train.images, train.labels),
                   "test_accuracy": accuracy(teacher, test.images, test.labels)},
                  out / "metrics.csv")
    return teacher


def cmd_search(cfg: RunConfig, teacher: ViT | None = None) -> dict:
    """Search, binarize, finetune; write checkpoint, history, census, latency and metrics.

    Without a teacher the student starts from a random init and KD is off.
    Raises NonConvergenceError (history already written) if budgets are not met.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if teacher is None and cfg.teacher:
        teacher = checkpoint.load(cfg.teacher)
    train, test = load_run_data(cfg)
    model = student_from(teacher, cfg.model, cfg.seed, cfg.search.epsilon)
    kd_teacher = teacher if cfg.search.kd_enabled else None
    try:
        model, state, history = privit_search(model, kd_teacher, train.images, train.labels,
                                              cfg.search, cfg.seed, cfg.data.augment)
    except NonConvergenceError as exc:
        write_history(exc.history, out / "history.csv")
        raise
    write_history(history, out / "history.csv")
    searched_acc = accuracy(model, test.images, test.labels)
    ft_history = finetune(model, kd_teacher, train.images, train.labels, cfg.search,
                          cfg.seed + 1, cfg.data.augment)
    write_history(ft_history, out / "finetune_history.csv",
                  ["epoch", "lr", "train_loss", "ce_loss", "kd_loss"])
    checkpoint.save(model, out / "model.pvit")
    census = census_of_model(model)
    census.to_csv(out / "census.csv")
    latency = write_latency_csv(census, out / "latency.csv")
    per_class = per_class_accuracy(model, test.images, test.labels, cfg.model.num_classes)
    _write_rows(out / "per_class.csv", ["class", "accuracy"], enumerate(per_class))
    gelu_count, softmax_count = count_active(model.switches)
    metrics = {
        "search_epochs": len(history),
        "gelu_count": gelu_count,
        "softmax_count": softmax_count,
        "gelu_budget": cfg.search.gelu_budget,
        "softmax_budget": cfg.search.softmax_budget,
        "latency_reluops": latency,
        "post_search_test_accuracy": searched_acc,
        "train_accuracy": accuracy(model, train.images, train.labels),
        "test_accuracy": accuracy(model, test.images, test.labels),
    }
    write_metrics(metrics, out / "metrics.csv")
    return {"model": model, "history": history, "state": state, "census": census, **metrics}


def _search_cell(args):
    cfg, teacher_bytes = args
    teacher = checkpoint.from_bytes(teacher_bytes) if teacher_bytes else None
    try:
        res = cmd_search(cfg, teacher)
        return {"status": "ok", "latency_reluops": res["latency_reluops"],
                "accuracy": res["test_accuracy"], "gelu_count": res["gelu_count"],
                "softmax_count": res["softmax_count"]}
    except NonConvergenceError as exc:
        return {"status": f"nonconvergence: {exc}"}
    except Exception as exc:  # a failing cell must not stop the sweep
        return {"status": f"error: {type(exc).__name__}: {exc}"}


def cmd_sweep(cfg: RunConfig, gelu_budgets, softmax_budgets, teacher: ViT | None = None,
              workers: int = 1) -> tuple[list[dict], list[ParetoPoint]]:
    """Run ``cmd_search`` for every (G, S) cell; write ``sweep.csv`` and ``pareto.csv``."""
    cells = [(int(g), int(s)) for g in gelu_budgets for s in softmax_budgets]
    if not cells:
        raise ConfigError("sweep grid is empty")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if teacher is None and cfg.teacher:
        teacher = checkpoint.load(cfg.teacher)
    blob = checkpoint.to_bytes(teacher) if teacher is not None else b""
    jobs = [(dataclasses.replace(cfg.with_budgets(g, s), out=str(out / f"g{g}_s{s}")), blob)
            for g, s in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_search_cell, jobs))
    else:
        results = [_search_cell(job) for job in jobs]
    rows = []
    for (g, s), res in sorted(zip(cells, results)):
        rows.append({"label": f"g{g}_s{s}", "gelu_budget": g, "softmax_budget": s, **res})
    fields = ["label", "gelu_budget", "softmax_budget", "status", "gelu_count", "softmax_count",
              "latency_reluops", "accuracy"]
    _write_rows(out / "sweep.csv", fields, ([r.get(k, "") for k in fields] for r in rows))
    points = [ParetoPoint(r["latency_reluops"], r["accuracy"], r["label"])
              for r in rows if r["status"] == "ok"]
    frontier = write_pareto_csv(points, out / "pareto.csv") if points else []
    return rows, frontier


def cmd_ablate_attention(cfg: RunConfig, variants, teacher: ViT | None = None) -> list[dict]:
    """Same budgets and seed, one search per Taylor attention variant; writes ``ablation.csv``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if teacher is None and cfg.teacher:
        teacher = checkpoint.load(cfg.teacher)
    rows = []
    for variant in variants:
        model_cfg = dataclasses.replace(cfg.model, attn_variant=variant)
        run = dataclasses.replace(cfg, model=model_cfg, out=str(out / variant))
        res = cmd_search(run, teacher)
        rows.append({"variant": variant, "gelu_budget": cfg.search.gelu_budget,
                     "softmax_budget": cfg.search.softmax_budget,
                     "softmax_count": res["softmax_count"], "gelu_count": res["gelu_count"],
                     "latency_reluops": res["latency_reluops"], "test_accuracy": res["test_accuracy"]})
    fields = ["variant", "gelu_budget", "softmax_budget", "gelu_count", "softmax_count",
              "latency_reluops", "test_accuracy"]
    _write_rows(out / "ablation.csv", fields, ([r[k] for k in fields] for r in rows))
    return rows


def cmd_baseline(cfg: RunConfig, ks, teacher: ViT | None = None) -> list[dict]:
    """Layer-wise GELU removal versus fine-grained search at the same GELU budget.

    For each k the baseline zeroes the GELUs of the last k layers and finetunes;
    the search gets the baseline's GELU count as its budget and keeps every
    softmax.  Writes ``baseline.csv``.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if teacher is None and cfg.teacher:
        teacher = checkpoint.load(cfg.teacher)
    train, test = load_run_data(cfg)
    softmax_total = int(np.prod(cfg.model.softmax_switch_shape))
    kd_teacher = teacher if cfg.search.kd_enabled else None
    rows = []
    for k in ks:
        model = layerwise_taylorize_baseline(
            student_from(teacher, cfg.model, cfg.seed, cfg.search.epsilon), int(k))
        finetune(model, kd_teacher, train.images, train.labels, cfg.search, cfg.seed + 1,
                 cfg.data.augment)
        gelu_count, softmax_count = count_active(model.switches)
        rows.append({"method": "layerwise", "k": k, "gelu_budget": gelu_count,
                     "gelu_count": gelu_count, "softmax_count": softmax_count,
                     "latency_reluops": latency_estimate(census_of_model(model)),
                     "test_accuracy": accuracy(model, test.images, test.labels)})
        run = dataclasses.replace(cfg.with_budgets(gelu_count, softmax_total),
                                  out=str(out / f"search_k{k}"))
        res = cmd_search(run, teacher)
        rows.append({"method": "fine-grained", "k": k, "gelu_budget": gelu_count,
                     "gelu_count": res["gelu_count"], "softmax_count": res["softmax_count"],
                     "latency_reluops": res["latency_reluops"], "test_accuracy": res["test_accuracy"]})
    fields = ["method", "k", "gelu_budget", "gelu_count", "softmax_count", "latency_reluops",
              "test_accuracy"]
    _write_rows(out / "baseline.csv", fields, ([r[k] for k in fields] for r in rows))
    return rows


# -- reports ------------------------------------------------------------------------------


def report_distribution(model: ViT, path=None) -> list[dict]:
    """Per-layer active softmax rows and GELU elements next to the fully nonlinear counts."""
    census = census_of_model(model)
    base = base_census(model.config)
    rows = []
    for layer in range(model.config.num_layers):
        now, ref = census.layer_totals(layer), base.layer_totals(layer)
        rows.append({"layer": layer, "softmax_rows": now.get("softmax", 0),
                     "softmax_base": ref.get("softmax", 0), "gelu_elements": now.get("gelu", 0),
                     "gelu_base": ref.get("gelu", 0)})
    if path is not None:
        fields = ["layer", "softmax_rows", "softmax_base", "gelu_elements", "gelu_base"]
        _write_rows(path, fields, ([r[k] for k in fields] for r in rows))
    return rows


def degradation_stats(per_class_a, per_class_b) -> tuple[float, float, float]:
    """Max, mean and population variance of the per-class differences a - b."""
    a = np.asarray(per_class_a, dtype=np.float64)
    b = np.asarray(per_class_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(diff.max()), float(diff.mean()), float(diff.var())


def read_per_class(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = sorted(csv.DictReader(fh), key=lambda r: int(r["class"]))
    return np.array([float(r["accuracy"]) for r in rows])
