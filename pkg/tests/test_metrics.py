import numpy as np
import pytest
from scipy.integrate import trapezoid

from protofaith.errors import ArgumentError, ConfigurationError, DegenerateTargetError
from protofaith.fixtures import gen_flat, gen_planted
from protofaith.metrics import (
    FillPolicy,
    FrozenTarget,
    aggregate_report,
    area_grid,
    audc,
    deletion_curve,
    erf_estimate,
    first_crossing,
    locate,
    perturb,
    relevance,
    similarity_ratio,
)
from protofaith.saliency import SaliencyMap


def test_area_grid():
    grid = area_grid(0.02, 0.001)
    assert len(grid) == 21 and grid[0] == 0.0 and grid[-1] == pytest.approx(0.02, abs=1e-15)
    assert len(area_grid(0.10, 0.005)) == 21
    with pytest.raises(ArgumentError):
        area_grid(0.02, 0.0)


def test_audc_is_scaled_trapezoid():
    rng = np.random.default_rng(0)
    a = area_grid(0.02, 0.001)
    t = rng.uniform(0, 1.2, size=a.size)
    assert audc(a, t) == pytest.approx(10000 * trapezoid(t, a), rel=1e-12)
    assert audc(a, np.ones_like(a)) == pytest.approx(200.0, abs=1e-9)
    for a_max, step in ((0.02, 0.0005), (0.1, 0.005), (0.05, 0.01)):
        g = area_grid(a_max, step)
        assert audc(g, np.ones_like(g)) == pytest.approx(10000 * a_max, abs=1e-9)
    assert audc(a, np.zeros_like(a)) == 0.0


def test_fill_policies():
    assert FillPolicy.resolve("gray").values == (0.5, 0.5, 0.5)
    assert FillPolicy.resolve("zero").values == (0.0, 0.0, 0.0)
    assert FillPolicy.resolve("mean", [0.1, 0.2, 0.3]).values == (0.1, 0.2, 0.3)
    with pytest.raises(ConfigurationError):
        FillPolicy.resolve("mean")
    with pytest.raises(ConfigurationError):
        FillPolicy("blur")
    x = np.zeros((3, 2, 2), dtype=np.float32)
    mask = np.array([[True, False], [False, False]])
    out = perturb(x, mask, FillPolicy.resolve("mean", [0.1, 0.2, 0.3]))
    np.testing.assert_allclose(out[:, 0, 0], [0.1, 0.2, 0.3], rtol=1e-6)
    assert np.all(out[:, 1, 1] == 0) and np.all(x == 0)
    with pytest.raises(ArgumentError):
        perturb(x, np.zeros((3, 3), bool), FillPolicy.resolve("gray"))


def test_flat_fixture_curve_is_identically_one():
    data = gen_flat(0)
    model, x = data.bundle, data.images[0]
    for method in ("upsample", "smoothgrads", "prp", "random"):
        curve = deletion_curve(model, x, 0, method)
        np.testing.assert_array_equal(curve.ratios, 1.0)
        assert curve.audc == pytest.approx(200.0, abs=1e-9)
        assert curve.counts[0] == 0 and curve.counts[-1] == round(0.02 * x.shape[1] * x.shape[2])


def test_curve_uses_frozen_cell_and_original_image():
    fx = gen_planted(2)
    target = locate(fx.bundle, fx.image, 0)
    assert (target.h, target.w) == fx.cell
    sal = SaliencyMap(fx.region_mask.astype(np.float32), "manual", (0, *fx.cell))
    fill = FillPolicy("mean", fx.fill_values)
    curve = deletion_curve(fx.bundle, fx.image, 0, "manual", 0.02, 0.001, fill, saliency=sal)
    assert np.all(np.diff(curve.ratios) <= 1e-12)  # deleting more of R never helps here
    frac = fx.region_fraction
    full = np.flatnonzero(curve.areas >= frac - 1e-12)
    assert curve.ratios[full[0]] == pytest.approx(fx.masked_similarity / fx.similarity, rel=1e-5)


def test_zero_score_is_degenerate():
    fx = gen_planted(0)
    with pytest.raises(DegenerateTargetError):
        similarity_ratio(fx.bundle, fx.image, FrozenTarget(0, 0, 0, 0.0))


def test_relevance_threshold_is_strict():
    v = np.arange(100.0).reshape(10, 10)
    seg = np.zeros((10, 10), bool)
    r = relevance(v, seg, 0.02)
    assert r.fraction == 0.0 and r.irrelevant and r.mask_count == 2
    seg[9, 9] = True
    r = relevance(v, seg, 0.02, threshold=0.5)
    assert r.fraction == 0.5 and not r.irrelevant  # exactly at the threshold counts as relevant
    with pytest.raises(ArgumentError):
        relevance(v, np.zeros((5, 5), bool))


def test_first_crossing_and_erf():
    assert first_crossing([0, 0.1, 0.2], [1.0, 0.1, 0.05], 0.1) == 0.2
    assert first_crossing([0, 0.1], [1.0, 0.5], 0.1) is None
    fx = gen_planted(4)
    est = erf_estimate(fx.bundle, fx.image, 0, "occlusion", fill=FillPolicy("mean", fx.fill_values))
    assert est.area is not None and abs(est.area - fx.region_fraction) <= 0.005


def test_aggregate_report():
    rows = [
        {"model": "m", "method": "prp", "role": "prototype", "audc": 100.0, "irrelevant": False},
        {"model": "m", "method": "prp", "role": "prototype", "audc": 50.0, "irrelevant": True},
        {"model": "m", "method": "upsample", "role": "test-patch", "audc": None, "irrelevant": True},
    ]
    out = aggregate_report(rows)
    assert [(g["method"], g["role"]) for g in out] == [("prp", "prototype"), ("upsample", "test-patch")]
    assert out[0]["mean_audc"] == 75.0 and out[0]["percent_irrelevant"] == 50.0
    assert out[1]["mean_audc"] is None and out[1]["percent_irrelevant"] == 100.0
    with pytest.raises(ArgumentError):
        aggregate_report([])


def test_curve_freezes_cell_and_nests_masks(monkeypatch):
    import protofaith.metrics as metrics

    fx = gen_planted(7)
    cells, masks = [], []
    real_score, real_perturb = metrics.score_at, metrics.perturb

    def spy_score(model, x, i, h, w):
        cells.append((h, w))
        return real_score(model, x, i, h, w)

    def spy_perturb(x, mask, fill):
        masks.append(mask.mask.copy())
        return real_perturb(x, mask, fill)

    monkeypatch.setattr(metrics, "score_at", spy_score)
    monkeypatch.setattr(metrics, "perturb", spy_perturb)
    curve = deletion_curve(fx.bundle, fx.image, 0, "prp")
    assert curve.ratios[0] == 1.0
    assert set(cells) == {fx.cell} and len(cells) == 20
    for before, after in zip(masks, masks[1:]):
        assert np.all(after[before])


def test_planted_ordering_against_random():
    means = {"occlusion": [], "prp": [], "random": []}
    for seed in range(20):
        fx = gen_planted(seed)
        fill = FillPolicy("mean", fx.fill_values)
        for method in means:
            means[method].append(deletion_curve(fx.bundle, fx.image, 0, method, fill=fill, seed=seed).audc)
    m = {k: np.mean(v) for k, v in means.items()}
    assert m["occlusion"] <= m["prp"] <= m["random"]
