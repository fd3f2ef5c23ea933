"""Nonlinearity census, ReLUOps latency proxy and Pareto frontiers.

Costs are garbled-circuit costs normalized so that one scalar ReLU is one
ReLUOp.  Vector nonlinearities (softmax, layernorm, squaring a row) are
measured at a single vector length; other lengths are scaled proportionally
from the nearest anchor.  Those scaled values are estimates.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PROPORTIONAL = "proportional-in-n"
PER_ELEMENT = "constant-per-element"
FREE = "linear-free"

# (tag, vector length) -> ReLUOps
_ANCHORS = {
    ("relu", 1): 1,
    ("softmax", 197): 18586,
    ("layernorm", 192): 6504,
    ("layernorm", 256): 8614,
    ("gelu", 1): 270,
    ("square", 197): 3248,
    ("relu_softmax", 257): 4428,
    ("relu_softmax", 65): 1133,
}

_RULES = {
    "relu": PER_ELEMENT,
    "gelu": PER_ELEMENT,
    "softmax": PROPORTIONAL,
    "layernorm": PROPORTIONAL,
    "square": PROPORTIONAL,
    "relu_softmax": PROPORTIONAL,
    # pure averaging / scaling by a constant: linear, no GC cost
    "scale_attn_row": FREE,
    "uniform_attn_row": FREE,
}

# census tag used for a Taylor attention row of each variant
VARIANT_TAG = {"squared": "square", "scale": "scale_attn_row", "uniform": "uniform_attn_row"}

MAX_EXTRAPOLATION = 4.0


class CostError(ValueError):
    pass


@dataclass
class CostTable:
    anchors: dict = field(default_factory=dict)
    rules: dict = field(default_factory=dict)

    def __post_init__(self):
        for key, cost in self.anchors.items():
            if not cost > 0:
                raise CostError(f"anchor {key} has non-positive cost {cost}")

    def with_overrides(self, overrides: dict) -> "CostTable":
        anchors = dict(self.anchors)
        anchors.update(overrides)
        rules = dict(self.rules)
        for tag, _ in overrides:
            rules.setdefault(tag, PROPORTIONAL)
        return CostTable(anchors, rules)


def builtin_cost_table() -> CostTable:
    return CostTable(dict(_ANCHORS), dict(_RULES))


def load_cost_overrides(path) -> dict:
    """Read a ``tag,n,reluops`` CSV into an anchor dict."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"tag", "n", "reluops"} <= set(reader.fieldnames):
            raise CostError(f"{path}: expected header tag,n,reluops")
        for row in reader:
            out[(row["tag"].strip(), int(row["n"]))] = float(row["reluops"])
    return out


def cost_of(tag: str, n: int, table: CostTable | None = None) -> float:
    """ReLUOps for one application of ``tag`` on a vector of length ``n``.

    Exact anchors are returned verbatim.  Otherwise per-element tags cost
    ``n`` times their length-1 anchor, and proportional tags scale the nearest
    anchor by ``n / anchor_n``.  Scaling up past 4x the longest anchor is
    refused; add an override anchor instead.
    """
    table = table or builtin_cost_table()
    if n < 1:
        raise CostError(f"vector length must be >= 1, got {n}")
    if tag not in table.rules:
        raise CostError(f"unknown nonlinearity tag {tag!r}")
    if (tag, n) in table.anchors:
        return table.anchors[(tag, n)]
    rule = table.rules[tag]
    if rule == FREE:
        return 0.0
    lengths = sorted(k for t, k in table.anchors if t == tag)
    if not lengths:
        raise CostError(f"no anchor for {tag!r}")
    if rule == PER_ELEMENT:
        base = min(lengths)
        return table.anchors[(tag, base)] * n / base
    if n > MAX_EXTRAPOLATION * lengths[-1]:
        raise CostError(f"{tag}({n}) is more than {MAX_EXTRAPOLATION:g}x the longest anchor "
                        f"{tag}({lengths[-1]}); supply an override anchor for {tag}({n})")
    nearest = min(lengths, key=lambda k: (abs(k - n), k))
    return table.anchors[(tag, nearest)] * n / nearest


# -- census ------------------------------------------------------------------------


@dataclass(frozen=True)
class CensusEntry:
    layer: int | None  # None for model-level ops (final layernorm)
    tag: str
    n: int
    count: int


@dataclass
class NonlinearityCensus:
    entries: list = field(default_factory=list)

    def add(self, layer, tag: str, n: int, count: int) -> None:
        if count < 0:
            raise ValueError("census counts must be non-negative")
        self.entries.append(CensusEntry(layer, tag, int(n), int(count)))

    def total(self, tag: str) -> int:
        return sum(e.count for e in self.entries if e.tag == tag)

    def layer_totals(self, layer) -> dict:
        out = defaultdict(int)
        for e in self.entries:
            if e.layer == layer:
                out[e.tag] += e.count
        return dict(out)

    def layers(self) -> list:
        seen = []
        for e in self.entries:
            if e.layer not in seen:
                seen.append(e.layer)
        return seen

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "tag", "n", "count"])
            for e in self.entries:
                w.writerow(["final" if e.layer is None else e.layer, e.tag, e.n, e.count])

    @classmethod
    def from_csv(cls, path) -> "NonlinearityCensus":
        census = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                layer = row["layer"].strip()
                census.add(None if layer in ("", "final") else int(layer), row["tag"].strip(),
                           int(row["n"]), int(row["count"]))
        return census


def census_of_model(model) -> NonlinearityCensus:
    """Count the nonlinearities a binarized switched ViT evaluates at inference.

    Per layer: exact softmax rows and Taylor rows (length N), two layernorms per
    token (length d) and the GELU elements that remain.  The final layernorm is
    applied to the class token only.
    """
    sw, cfg = model.switches, model.config
    if not (sw.gelu_frozen and sw.softmax_frozen):
        raise ValueError("census requires a binarized model (both switch masks frozen)")
    s = sw.softmax.value
    c = sw.gelu.value
    n_tok, d, m = cfg.num_tokens, cfg.embed_dim, cfg.mlp_dim
    census = NonlinearityCensus()
    for i in range(cfg.num_layers):
        exact = int(np.count_nonzero(s[i] == 1.0))
        census.add(i, "softmax", n_tok, exact)
        census.add(i, VARIANT_TAG[cfg.attn_variant], n_tok, s[i].size - exact)
        census.add(i, "layernorm", d, 2 * n_tok)
        active = int(np.count_nonzero(c[i] == 1.0))
        census.add(i, "gelu", 1, active * m if cfg.gelu_granularity == "per-token" else active)
    census.add(None, "layernorm", d, 1)
    return census


def base_census(config) -> NonlinearityCensus:
    """Census of the fully nonlinear model for ``config`` (no switches needed)."""
    n_tok, d = config.num_tokens, config.embed_dim
    census = NonlinearityCensus()
    for i in range(config.num_layers):
        census.add(i, "softmax", n_tok, config.num_heads * n_tok)
        census.add(i, VARIANT_TAG[config.attn_variant], n_tok, 0)
        census.add(i, "layernorm", d, 2 * n_tok)
        census.add(i, "gelu", 1, n_tok * config.mlp_dim)
    census.add(None, "layernorm", d, 1)
    return census


def latency_breakdown(census: NonlinearityCensus, table: CostTable | None = None) -> dict:
    """ReLUOps per tag."""
    table = table or builtin_cost_table()
    out = defaultdict(float)
    for e in census.entries:
        out[e.tag] += e.count * cost_of(e.tag, e.n, table) if e.count else 0.0
    return dict(out)


def latency_estimate(census: NonlinearityCensus, table: CostTable | None = None) -> float:
    """Weighted sum of census counts and unit costs, in ReLUOps."""
    return float(sum(latency_breakdown(census, table).values()))


def write_latency_csv(census: NonlinearityCensus, path, table: CostTable | None = None) -> float:
    parts = latency_breakdown(census, table)
    total = float(sum(parts.values()))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["category", "reluops", "latency_m", "estimate"])
        anchored = _all_anchored(census, table or builtin_cost_table())
        for tag in sorted(parts):
            w.writerow([tag, repr(parts[tag]), repr(parts[tag] / 1e6), int(not anchored[tag])])
        w.writerow(["total", repr(total), repr(total / 1e6), int(not all(anchored.values()))])
    return total


def _all_anchored(census: NonlinearityCensus, table: CostTable) -> dict:
    out = {}
    for e in census.entries:
        exact = (e.tag, e.n) in table.anchors or table.rules.get(e.tag) in (PER_ELEMENT, FREE)
        out[e.tag] = out.get(e.tag, True) and exact
    return out


# -- pareto --------------------------------------------------------------------------


@dataclass(frozen=True)
class ParetoPoint:
    latency: float
    accuracy: float
    label: str = ""

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")
        if not self.latency > 0:
            raise ValueError(f"latency {self.latency} must be positive")


def dominates(p: ParetoPoint, q: ParetoPoint) -> bool:
    return (p.latency <= q.latency and p.accuracy >= q.accuracy
            and (p.latency < q.latency or p.accuracy > q.accuracy))


def pareto_frontier(points) -> list[ParetoPoint]:
    """Undominated points, sorted by latency; exact duplicates keep the smallest label."""
    points = list(points)
    if not points:
        raise ValueError("pareto_frontier needs at least one point")
    ordered = sorted(points, key=lambda p: (p.latency, -p.accuracy, p.label))
    frontier = []
    best = -math.inf
    for p in ordered:
        if p.accuracy > best:
            frontier.append(p)
            best = p.accuracy
    return frontier


def read_points_csv(path) -> list[ParetoPoint]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"label", "latency_reluops", "accuracy"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected header label,latency_reluops,accuracy")
        return [ParetoPoint(float(r["latency_reluops"]), float(r["accuracy"]), r["label"])
                for r in reader]


def write_pareto_csv(points, path) -> list[ParetoPoint]:
    frontier = pareto_frontier(points)
    keep = {id(p) for p in frontier}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "latency_reluops", "accuracy", "on_frontier"])
        for p in sorted(points, key=lambda p: (p.latency, -p.accuracy, p.label)):
            w.writerow([p.label, repr(p.latency), repr(p.accuracy), int(id(p) in keep)])
    return frontier
