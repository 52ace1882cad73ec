import numpy as np
import pytest

from protofaith.core.receptive import receptive_field
from protofaith.errors import ArgumentError
from protofaith.fixtures import (
    MASKED_DISTANCE,
    gen_false_bias,
    gen_flat,
    gen_planted,
    gen_random,
    occlusion_oracle,
    quantize,
)
from protofaith.io.bundle import encode_bundle
from protofaith.metrics import FillPolicy
from protofaith.model import LOG_RATIO, NEG_EXP, score_at


@pytest.mark.parametrize("simfn", [NEG_EXP, LOG_RATIO])
def test_planted_ground_truth(simfn):
    fx = gen_planted(5, simfn=simfn)
    model = fx.bundle
    assert fx.similarity == pytest.approx(model.simfn.peak)
    d2 = MASKED_DISTANCE[simfn]
    assert fx.masked_similarity == pytest.approx(float(model.simfn(d2)), rel=1e-4)
    # R and the designated cell's theoretical field overlap, but the cell's
    # own upsampled footprint does not contain R
    h, w = fx.cell
    rf = receptive_field(model.backbone, h, w, *fx.image.shape[1:])
    r = fx.region
    assert rf.contains(r.top, r.left) and rf.contains(r.bottom - 1, r.right - 1)
    lattice = model.metadata["lattice"]
    assert not (r.top <= h * lattice < r.bottom and r.left <= w * lattice < r.right)


def test_planted_cell_ignores_pixels_outside_region():
    fx = gen_planted(6)
    rng = np.random.default_rng(0)
    noisy = fx.image.copy()
    outside = ~fx.region_mask
    noisy[:, outside] = rng.uniform(0, 1, size=(3, int(outside.sum()))).astype(np.float32)
    assert score_at(fx.bundle, noisy, 0, *fx.cell) == fx.similarity


def test_occlusion_oracle_is_zero_outside_region():
    fx = gen_planted(1, image_size=(16, 16))
    occ = occlusion_oracle(fx.bundle, fx.image, (0, *fx.cell), fill=FillPolicy("mean", fx.fill_values))
    assert np.all(occ[~fx.region_mask] == 0)
    assert np.all(occ[fx.region_mask] >= 0) and occ[fx.region_mask].max() > 0


def test_generators_are_deterministic():
    assert encode_bundle(gen_planted(3).bundle) == encode_bundle(gen_planted(3).bundle)
    a, b = gen_random(3), gen_random(3)
    assert encode_bundle(a.bundle) == encode_bundle(b.bundle)
    for x, y in zip(a.images, b.images):
        np.testing.assert_array_equal(x, y)
    assert encode_bundle(gen_random(4).bundle) != encode_bundle(a.bundle)


def test_flat_and_false_bias():
    data = gen_flat(0)
    x = data.images[0]
    base = score_at(data.bundle, x, 0, 0, 0)
    assert score_at(data.bundle, np.zeros_like(x), 0, 0, 0) == base
    fb = gen_false_bias(2)
    assert fb.segmentation[fb.region_mask].all()
    h, w = fb.cell
    lattice = fb.bundle.metadata["lattice"]
    assert not fb.segmentation[h * lattice, w * lattice]


def test_planted_rejects_bad_regions():
    with pytest.raises(ArgumentError):
        gen_planted(0, region=(1, 0, 4, 4))
    with pytest.raises(ArgumentError):
        gen_planted(0, region=(0, 0, 40, 4))
    with pytest.raises(ArgumentError):
        gen_planted(0, image_size=(15, 16))


def test_quantize():
    q = quantize(np.array([0.0, 0.5, 1.2, -0.1]))
    np.testing.assert_array_equal(q * 255, np.rint(q * 255))
    assert q.min() == 0 and q.max() == 1
