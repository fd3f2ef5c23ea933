import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import pareto_brute_force
from privit.latency import (CostError, NonlinearityCensus, ParetoPoint, base_census, builtin_cost_table,
                            census_of_model, cost_of, dominates, latency_breakdown, latency_estimate,
                            load_cost_overrides, pareto_frontier, read_points_csv, write_latency_csv,
                            write_pareto_csv)
from privit.vit import ModelConfig, ViT, binarize

ANCHORS = [("softmax", 197, 18586), ("layernorm", 192, 6504), ("gelu", 1, 270), ("square", 197, 3248),
           ("relu_softmax", 257, 4428), ("relu_softmax", 65, 1133), ("layernorm", 256, 8614),
           ("relu", 1, 1)]


@pytest.mark.parametrize("tag, n, cost", ANCHORS)
def test_anchor_values_exact(tag, n, cost):
    got = cost_of(tag, n)
    assert got == cost and int(got) == cost


def test_proportional_scaling_and_per_element():
    assert cost_of("softmax", 394) == 37172
    assert cost_of("gelu", 7) == 7 * 270
    assert cost_of("square", 17) == pytest.approx(3248 * 17 / 197)
    # nearest anchor wins between two anchors
    assert cost_of("layernorm", 250) == pytest.approx(8614 * 250 / 256)
    assert cost_of("layernorm", 200) == pytest.approx(6504 * 200 / 192)


def test_linear_variants_are_free():
    assert cost_of("uniform_attn_row", 17) == 0.0
    assert cost_of("scale_attn_row", 197) == 0.0


def test_cost_errors():
    with pytest.raises(CostError, match="unknown"):
        cost_of("tanh", 4)
    with pytest.raises(CostError, match=r"softmax\(1000\)"):
        cost_of("softmax", 1000)
    with pytest.raises(CostError):
        cost_of("softmax", 0)


def test_override_file(tmp_path):
    path = tmp_path / "costs.csv"
    path.write_text("tag,n,reluops\nsoftmax,1000,90000\nsoftmax,17,1500\n")
    table = builtin_cost_table().with_overrides(load_cost_overrides(path))
    assert cost_of("softmax", 1000, table) == 90000
    assert cost_of("softmax", 17, table) == 1500
    assert cost_of("softmax", 197, table) == 18586
    bad = tmp_path / "bad.csv"
    bad.write_text("name,length,cost\n")
    with pytest.raises(CostError):
        load_cost_overrides(bad)


def test_non_positive_anchor_rejected():
    with pytest.raises(CostError):
        builtin_cost_table().with_overrides({("softmax", 10): 0})


# -- estimates ---------------------------------------------------------------------


def test_hypothetical_model_total():
    c = NonlinearityCensus()
    c.add(0, "softmax", 197, 1000)
    c.add(0, "layernorm", 192, 1000)
    c.add(0, "gelu", 1, 1000)
    assert latency_estimate(c) == 25_360_000


def test_empty_census_is_zero():
    assert latency_estimate(NonlinearityCensus()) == 0


def test_taylorizing_one_row_saves_difference():
    def census(soft, sq):
        c = NonlinearityCensus()
        c.add(0, "softmax", 197, soft)
        c.add(0, "square", 197, sq)
        return c
    assert latency_estimate(census(10, 0)) - latency_estimate(census(9, 1)) == 15338


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["softmax", "layernorm", "gelu", "square"]),
                          st.integers(1, 300), st.integers(0, 50)), max_size=12), st.integers(0, 12))
def test_estimate_additive_and_monotone(entries, cut):
    full = NonlinearityCensus()
    a, b = NonlinearityCensus(), NonlinearityCensus()
    for i, (tag, n, k) in enumerate(entries):
        full.add(0, tag, n, k)
        (a if i < cut else b).add(0, tag, n, k)
    total = latency_estimate(full)
    assert total == pytest.approx(latency_estimate(a) + latency_estimate(b), rel=1e-12)
    if entries:
        tag, n, k = entries[0]
        bumped = NonlinearityCensus(list(full.entries))
        bumped.add(0, tag, n, 1)
        assert latency_estimate(bumped) > total


# -- census -------------------------------------------------------------------------


def test_desk_census_all_on():
    model = ViT(ModelConfig())
    binarize(model.switches)
    census = census_of_model(model)
    assert census.total("softmax") == 2 * 2 * 17
    assert census.total("square") == 0
    assert census.total("gelu") == 2 * 17 * 32
    assert census.total("layernorm") == 2 * 2 * 17 + 1


def test_base_scale_census():
    cfg = ModelConfig(num_layers=12, embed_dim=768, mlp_dim=3072, num_heads=12, image_size=224,
                      patch_size=16, num_classes=1000)
    census = base_census(cfg)
    assert census.layer_totals(0)["softmax"] == 2364
    assert census.layer_totals(0)["gelu"] == 605184


def test_census_requires_binarized_model():
    with pytest.raises(ValueError):
        census_of_model(ViT(ModelConfig()))


@pytest.mark.parametrize("variant, tag", [("squared", "square"), ("scale", "scale_attn_row"),
                                          ("uniform", "uniform_attn_row")])
def test_census_conservation_random_masks(variant, tag):
    cfg = ModelConfig(attn_variant=variant, gelu_granularity="per-element")
    rng = np.random.default_rng(0)
    model = ViT(cfg)
    model.switches.softmax.value = rng.integers(0, 2, cfg.softmax_switch_shape).astype(float)
    model.switches.gelu.value = rng.integers(0, 2, cfg.gelu_switch_shape).astype(float)
    binarize(model.switches)
    census = census_of_model(model)
    assert census.total("softmax") + census.total(tag) == cfg.num_layers * cfg.num_heads * cfg.num_tokens
    assert census.total("gelu") == int(model.switches.gelu.value.sum())


def test_zeroing_one_token_switch_saves_270_m():
    cfg = ModelConfig()
    model = ViT(cfg)
    binarize(model.switches)
    before = latency_estimate(census_of_model(model))
    model.switches.gelu.value[1, 5] = 0.0
    after = latency_estimate(census_of_model(model))
    assert before - after == 270 * cfg.mlp_dim


def test_census_csv_round_trip_and_latency_csv(tmp_path):
    model = ViT(ModelConfig())
    binarize(model.switches)
    census = census_of_model(model)
    census.to_csv(tmp_path / "census.csv")
    back = NonlinearityCensus.from_csv(tmp_path / "census.csv")
    assert back.entries == census.entries
    total = write_latency_csv(back, tmp_path / "latency.csv")
    assert total == latency_estimate(census)
    rows = (tmp_path / "latency.csv").read_text().splitlines()
    assert rows[0] == "category,reluops,latency_m,estimate"
    assert rows[-1].startswith("total,")
    assert sum(latency_breakdown(census).values()) == total


# -- pareto --------------------------------------------------------------------------


def P(lat, acc, label=""):
    return ParetoPoint(lat, acc, label)


def test_pareto_examples():
    pts = [P(10, 0.90, "a"), P(12, 0.95, "b"), P(11, 0.85, "c")]
    assert [p.label for p in pareto_frontier(pts)] == ["a", "b"]
    assert pareto_frontier([P(5, 0.5, "x")]) == [P(5, 0.5, "x")]
    assert [p.label for p in pareto_frontier([P(5, 0.5, "y"), P(5, 0.5, "x")])] == ["x"]


def test_pareto_errors():
    with pytest.raises(ValueError):
        pareto_frontier([])
    with pytest.raises(ValueError):
        P(1.0, 1.5)
    with pytest.raises(ValueError):
        P(0.0, 0.5)


def test_dominance():
    assert dominates(P(1, 0.5), P(2, 0.5))
    assert not dominates(P(1, 0.5), P(1, 0.5))
    assert not dominates(P(1, 0.4), P(2, 0.5))


def test_pareto_matches_brute_force_on_random_sets():
    rng = np.random.default_rng(2024)
    for trial in range(100):
        n = int(rng.integers(1, 201))
        # coarse grids make ties on either axis common
        lat = rng.integers(1, 40, n).astype(float)
        acc = rng.integers(0, 21, n) / 20
        pts = [P(lat[i], acc[i], f"p{rng.integers(0, 50)}") for i in range(n)]
        got = pareto_frontier(pts)
        want = [pts[i] for i in pareto_brute_force(pts)]
        assert sorted(got, key=lambda p: (p.latency, p.accuracy)) == \
            sorted(want, key=lambda p: (p.latency, p.accuracy)), trial
        assert [p.latency for p in got] == sorted(p.latency for p in got)


def test_pareto_csv(tmp_path):
    src = tmp_path / "points.csv"
    src.write_text("label,latency_reluops,accuracy\na,10,0.9\nb,12,0.95\nc,11,0.85\n")
    frontier = write_pareto_csv(read_points_csv(src), tmp_path / "out.csv")
    assert len(frontier) == 2
    lines = (tmp_path / "out.csv").read_text().splitlines()
    assert lines == ["label,latency_reluops,accuracy,on_frontier", "a,10.0,0.9,1", "c,11.0,0.85,0",
                     "b,12.0,0.95,1"]
