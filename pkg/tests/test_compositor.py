import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artifactdet.compositor import (TAU_SUPPORT, CompositeSpec, PatternBank, composite, load_pattern_bank,
                                    luminance, place_pattern, synthesize_sample)
from artifactdet.data import DataValidationError, Sample, validate_sample, write_image
from oracles import composite_pixelwise


def spec(rng, H=6, W=5, phi=None):
    return CompositeSpec(rng.random((H, W, 3)), rng.random((H, W, 3)), rng.random((H, W)) > 0.5,
                         phi if phi is not None else float(rng.uniform(0.01, 0.99)))


def clean_sample(H=64, W=64, seed=0):
    img = np.random.default_rng(seed).random((H, W, 3)) * 0.5
    return Sample(image=img, mask=np.zeros((H, W), bool), class_id=0, origin="clean")


def flare(h=12, w=12):
    yy, xx = np.mgrid[:h, :w]
    g = np.exp(-((yy - h / 2) ** 2 + (xx - w / 2) ** 2) / (h * w / 8))
    return np.repeat(g[..., None], 3, axis=2)


def test_single_pixel_example():
    s = CompositeSpec(np.full((1, 1, 3), 0.2), np.ones((1, 1, 3)), np.ones((1, 1), bool), 0.5)
    assert composite(s)[0, 0, 0] == pytest.approx(0.6, abs=1e-15)


def test_zero_mask_is_identity(rng):
    s = spec(rng)
    s = CompositeSpec(s.clean, s.pattern, np.zeros(s.mask.shape, bool), s.phi)
    assert np.array_equal(composite(s), s.clean)


def test_phi_limit(rng):
    s = spec(rng, phi=1e-9)
    s = CompositeSpec(s.clean, s.pattern, np.ones(s.mask.shape, bool), 1e-9)
    assert np.allclose(composite(s), s.clean, atol=1e-8)


def test_errors(rng):
    s = spec(rng)
    with pytest.raises(ValueError, match="shape mismatch"):
        composite(CompositeSpec(s.clean, s.pattern[:3], s.mask, s.phi))
    for phi in (0.0, 1.0, 1.5):
        with pytest.raises(ValueError):
            composite(CompositeSpec(s.clean, s.pattern, s.mask, phi))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_pixelwise_oracle(seed):
    s = spec(np.random.default_rng(seed))
    out = composite(s)
    assert np.abs(out - composite_pixelwise(s.clean, s.pattern, s.mask, s.phi)).max() <= 1e-12
    assert np.array_equal(out[~s.mask], s.clean[~s.mask])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.98), st.floats(0.001, 0.01))
def test_monotone_in_phi_and_convex(seed, phi, dphi):
    s = spec(np.random.default_rng(seed), phi=phi)
    a = composite(s)
    b = composite(CompositeSpec(s.clean, s.pattern, s.mask, phi + dphi))
    m = s.mask
    # moving phi toward 1 moves each masked pixel toward N, linearly
    assert np.all(np.abs(b[m] - s.pattern[m]) <= np.abs(a[m] - s.pattern[m]) + 1e-12)
    assert np.allclose(b[m] - a[m], dphi * (s.pattern[m] - s.clean[m]), atol=1e-12)
    twice = composite(CompositeSpec(a, s.pattern, s.mask, 0.3))
    lo, hi = np.minimum(s.clean, s.pattern), np.maximum(s.clean, s.pattern)
    assert np.all((twice >= lo - 1e-12) & (twice <= hi + 1e-12))


def test_place_pattern_full_frame_is_centered():
    pat = flare(32, 32)
    placed, mask = place_pattern(pat, np.ones((32, 32), bool), (32, 32), np.random.default_rng(0), jitter=0.0)
    assert np.array_equal(mask, luminance(placed) > TAU_SUPPORT)
    ys, xs = np.nonzero(mask)
    assert abs(ys.mean() - 15.5) <= 1 and abs(xs.mean() - 15.5) <= 1


def test_place_pattern_single_pixel_anchor():
    anchor = np.zeros((32, 32), bool)
    anchor[10, 10] = True
    placed, mask = place_pattern(flare(8, 8), anchor, (32, 32), np.random.default_rng(0))
    ys, xs = np.nonzero(mask)
    assert abs(ys.mean() - 10) <= 1 and abs(xs.mean() - 10) <= 1


def test_place_pattern_deterministic_and_errors():
    anchor = np.zeros((32, 32), bool)
    anchor[5:20, 8:30] = True
    a = place_pattern(flare(), anchor, (32, 32), np.random.default_rng(4))
    b = place_pattern(flare(), anchor, (32, 32), np.random.default_rng(4))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    with pytest.raises(DataValidationError):
        place_pattern(flare(), np.zeros((32, 32), bool), (32, 32), np.random.default_rng(0))


def test_synthesize_sample():
    bank = PatternBank([(flare(), 2)])
    clean = clean_sample()
    anchor = np.zeros((64, 64), bool)
    anchor[20:30, 20:30] = True
    s = synthesize_sample(clean, bank, 2, anchor, np.random.default_rng(3))
    assert s.class_id == 2 and s.mask.any() and validate_sample(s) == []
    assert 0.6 <= s.phi <= 0.95
    assert np.array_equal(s.image[~s.mask], clean.image[~s.mask])
    # recompute the placed pattern from the same rng stream
    rng = np.random.default_rng(3)
    rng.integers(1)
    phi = rng.uniform(0.6, 0.95)
    placed, _ = place_pattern(flare(), anchor, (64, 64), rng)
    m = s.mask
    diff = np.abs(s.image[m] - clean.image[m]).mean()
    assert diff == pytest.approx(phi * np.abs(placed[m] - clean.image[m]).mean(), abs=1e-6)
    again = synthesize_sample(clean, bank, 2, anchor, np.random.default_rng(3))
    assert np.array_equal(again.image, s.image)


def test_synthesize_errors():
    bank = PatternBank([(flare(), 2)])
    anchor = np.ones((64, 64), bool)
    with pytest.raises(DataValidationError):
        synthesize_sample(clean_sample(), bank, 3, anchor, np.random.default_rng(0))
    with pytest.raises(DataValidationError):
        synthesize_sample(clean_sample(), bank, 2, np.zeros((64, 64), bool), np.random.default_rng(0))


def test_pattern_bank_invariants():
    with pytest.raises(DataValidationError):
        PatternBank([(flare(), 0)])
    with pytest.raises(DataValidationError):
        PatternBank([(flare(), 2)], blend_ranges={2: (0.0, 0.5)})


def test_load_pattern_bank(tmp_path):
    write_image(tmp_path / "lens_flare" / "a.png", flare())
    write_image(tmp_path / "moire" / "b.png", flare())
    (tmp_path / "bank.yaml").write_text("lens_flare: [0.7, 0.9]\n")
    bank = load_pattern_bank(tmp_path, ["clean", "ghosting", "lens_flare", "moire"])
    assert len(bank.for_class(2)) == 1 and len(bank.for_class(3)) == 1
    assert bank.blend_range(2) == (0.7, 0.9) and bank.blend_range(3) == (0.3, 0.8)
