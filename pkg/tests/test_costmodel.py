
import numpy as np
import pytest

from streamdsu.costmodel import (
    Convention, cost_encoder, cost_s2u, dominates, pareto_front, profile, s2u_report, window_row_widths,
)
from streamdsu.encoder import UNBOUNDED, Encoder, WindowConfig, build_mask, desk_config, paper_config
from streamdsu.tensor import count_flops

REF_BASELINE = 1.936
REF_LAYER0 = 0.349
REF_PER_LAYER = (1.936 - 0.349) / 21


def test_paper_conv_frontend_matches_reference():
    rep = cost_encoder(paper_config(), n_frames=3000, convention=Convention.COMPAT)
    front = sum(v for k, v in rep.components.items() if k.startswith("frontend")) / 1e12
    assert front == pytest.approx(REF_LAYER0, rel=0.05)


def test_paper_per_layer_increment():
    cfg = paper_config()
    rep = cost_encoder(cfg, n_frames=3000, convention=Convention.COMPAT)
    per_layer = (rep.components["layer0.proj"] + rep.components["layer0.ffn"]) / 1e12
    assert per_layer == pytest.approx(24 * 3000 * 1024**2 / 1e12)
    assert per_layer == pytest.approx(REF_PER_LAYER, rel=0.02)


def test_paper_baseline_total():
    cfg, vocab = profile("paper", window=WindowConfig.full())
    assert cost_s2u(cfg, 60.0, Convention.COMPAT, vocab) == pytest.approx(REF_BASELINE, abs=0.10)


def test_empty_input_costs_nothing():
    rep = cost_encoder(desk_config(), n_samples=0)
    assert rep.total == 0 and rep.n_frames == 0


def test_sub_frame_input_costs_only_conv():
    rep = cost_encoder(desk_config(), n_samples=100)
    assert rep.n_frames == 0
    assert rep.components["frontend.conv"] > 0
    assert rep.total == rep.components["frontend.conv"]


def test_full_attention_grows_with_length():
    cfg = desk_config(window=WindowConfig.full())
    assert cost_s2u(cfg, 120.0) > cost_s2u(cfg, 60.0)


def test_windowed_cost_linear_in_length():
    cfg = desk_config(window=WindowConfig(8, 1, 8))
    a, b = cost_s2u(cfg, 60.0), cost_s2u(cfg, 120.0)
    assert b == pytest.approx(a, rel=0.02)


def test_row_widths_closed_form_vs_mask():
    for t, l, r in [(1, 0, 0), (5, 1, 2), (9, 3, 0), (7, UNBOUNDED, 2), (6, UNBOUNDED, UNBOUNDED)]:
        w = WindowConfig(l, 1, r)
        np.testing.assert_array_equal(window_row_widths(t, w), build_mask(t, w).sum(1))


def test_full_window_attention_is_quadratic_term():
    cfg = desk_config(window=WindowConfig.full())
    rep = cost_encoder(cfg, n_frames=250)
    assert rep.components["layer0.attention"] == 4 * 250**2 * cfg.d_model


@pytest.mark.parametrize("conv", list(Convention))
def test_full_minus_compat_is_attention(conv):
    cfg = desk_config(window=WindowConfig(3, 1, 5))
    full = cost_encoder(cfg, n_frames=400, convention=Convention.FULL)
    compat = cost_encoder(cfg, n_frames=400, convention=Convention.COMPAT)
    assert full.total >= compat.total
    assert full.total - compat.total == full.group(".attention")
    assert compat.convention is Convention.COMPAT


def test_monotone_in_every_knob():
    base = dict(n_layers=2, d_model=32, n_heads=4, window=WindowConfig(2, 1, 2))
    ref = cost_s2u(desk_config(**base), 10.0)
    assert cost_s2u(desk_config(**{**base, "n_layers": 3}), 10.0) >= ref
    assert cost_s2u(desk_config(**{**base, "d_model": 64}), 10.0) >= ref
    assert cost_s2u(desk_config(**{**base, "window": WindowConfig(4, 1, 2)}), 10.0) >= ref
    assert cost_s2u(desk_config(**{**base, "window": WindowConfig(2, 1, 4)}), 10.0) >= ref
    seconds = [1.0, 2.0, 5.0, 10.0]
    totals = [s2u_report(desk_config(**base), s).total for s in seconds]
    assert totals == sorted(totals)


def test_report_csv_and_summary():
    rep = s2u_report(desk_config(n_layers=1), 1.0, Convention.COMPAT)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "component,flops"
    assert lines[-1] == f"total,{rep.total}"
    assert rep.summary().endswith("convention=COMPAT")
    assert all(v >= 0 for v in rep.components.values())


@pytest.mark.parametrize("window", [WindowConfig.full(), WindowConfig(2, 1, 3), WindowConfig(UNBOUNDED, 1, 4),
                                    WindowConfig(0, 1, 0)])
@pytest.mark.parametrize("convention", list(Convention))
def test_analytic_matches_instrumented_encode(window, convention):
    cfg = desk_config(n_layers=2, window=window)
    enc = Encoder.create(cfg)
    n_samples = 160 * 57 + 33
    x = np.random.default_rng(0).normal(0, 0.1, n_samples)
    with count_flops() as fc:
        enc.encode(x)
    measured = fc.total if convention is Convention.FULL else fc.total - fc.total_for("layer.attention")
    analytic = cost_encoder(cfg, convention=convention, n_samples=n_samples).total
    assert measured == pytest.approx(analytic, rel=0.01)


# -- Pareto ------------------------------------------------------------------------

def brute_front(points):
    keep = [p for p in points if not any(dominates(q, p) for q in points)]
    return sorted(keep, key=lambda p: (p[0], p[1]))


def test_pareto_examples():
    assert pareto_front([(1, 10), (2, 5), (3, 6)]) == [(1, 10), (2, 5)]
    assert pareto_front([(4, 4, "a")]) == [(4, 4, "a")]
    with pytest.raises(ValueError):
        pareto_front([])


@pytest.mark.parametrize("seed", range(5))
def test_pareto_matches_quadratic_oracle(seed):
    rng = np.random.default_rng(seed)
    # coarse grid so ties and duplicates actually occur
    pts = [tuple(map(float, p)) for p in rng.integers(0, 40, size=(1000, 2))]
    assert sorted(pareto_front(pts)) == sorted(brute_front(pts))
    front = pareto_front(pts)
    assert [p[0] for p in front] == sorted(p[0] for p in front)
    for p in pts:
        assert p in front or any(dominates(q, p) for q in front)
