import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lds_reid.augment import (
    AugmentConfig,
    base_augment,
    homologous_expand,
    normalize_image,
    random_erase,
    random_scale,
    resize,
    sample_erase_box,
    scale_layout,
)

from conftest import random_image


def cfg(**kw):
    kw.setdefault("target_size", (64, 32))
    return AugmentConfig(**kw)


def changed_mask(a, b):
    return (a != b).any(axis=2)


def test_base_augment_no_randomness(rng):
    im = random_image(rng, 80, 40)
    c = cfg(flip_probability=0.0, crop_padding=0)
    assert np.array_equal(base_augment(im, c, rng), resize(im, (64, 32)))


def test_forced_flip_is_involution(rng):
    im = random_image(rng)
    c = cfg(flip_probability=1.0, crop_padding=0)
    once = base_augment(im, c, rng)
    assert np.array_equal(once, im[:, ::-1])
    assert np.array_equal(base_augment(once, c, rng), im)


def test_crop_offset_range_full_size():
    rng = np.random.default_rng(5)
    im = np.arange(384 * 128 * 3, dtype=np.int64).reshape(384, 128, 3) % 251
    im = im.astype(np.uint8)
    c = AugmentConfig(target_size=(384, 128), flip_probability=0.0, crop_padding=10)
    padded = np.pad(im, ((10, 10), (10, 10), (0, 0)), mode="edge")
    for _ in range(20):
        out = base_augment(im, c, rng)
        assert out.shape == (384, 128, 3)
        hits = [(t, l) for t in range(21) for l in range(21)
                if np.array_equal(padded[t:t + 384, l:l + 128], out)]
        assert hits and all(0 <= t <= 20 and 0 <= l <= 20 for t, l in hits)


def test_erase_pinned_square():
    c = AugmentConfig(target_size=(64, 64), erase_area=(0.25, 0.25), erase_aspect=(1.0, 1.0))
    box = sample_erase_box((64, 64), c, np.random.default_rng(0))
    assert box[2:] == (32, 32)
    im = np.zeros((64, 64, 3), dtype=np.uint8)
    c0 = AugmentConfig(target_size=(64, 64), erase_area=(0.25, 0.25), erase_aspect=(1.0, 1.0),
                       erase_fill="mean")
    out = random_erase(im, c0, np.random.default_rng(0))
    ys, xs = np.nonzero(changed_mask(out, im))
    assert (ys.max() - ys.min() + 1, xs.max() - xs.min() + 1) == (32, 32)
    assert changed_mask(out, im).sum() == 32 * 32


def test_erase_impossible_rectangle_leaves_image():
    # every rectangle with height/width = 10 inside 8x8 would need height >= 10
    fits = [(h, w) for h in range(1, 9) for w in range(1, 9) if h == 10 * w]
    assert fits == []
    c = AugmentConfig(target_size=(8, 8), erase_area=(0.9, 0.9), erase_aspect=(10.0, 10.0))
    im = random_image(np.random.default_rng(1), 8, 8)
    assert sample_erase_box(im.shape, c, np.random.default_rng(2)) is None
    assert np.array_equal(random_erase(im, c, np.random.default_rng(2)), im)


def test_erase_changes_only_inside_box(rng):
    c = cfg()
    for seed in range(200):
        im = random_image(rng)
        box = sample_erase_box(im.shape, c, np.random.default_rng(seed))
        out = random_erase(im, c, np.random.default_rng(seed))
        mask = changed_mask(out, im)
        top, left, h, w = box
        inside = np.zeros_like(mask)
        inside[top:top + h, left:left + w] = True
        assert not (mask & ~inside).any()


def test_scale_layout_center_case():
    lay = scale_layout(384, 128, 0.85)
    assert (lay.height, lay.width, lay.regime, lay.offset) == (326, 109, "center", (29, 9))
    top, left = lay.offset
    assert (top, 384 - 326 - top, left, 128 - 109 - left) == (29, 29, 9, 10)


def test_scale_layout_crop_case():
    lay = scale_layout(384, 128, 1.1)
    assert (lay.height, lay.width, lay.regime, lay.offset) == (422, 141, "crop", (19, 6))


def test_scale_regime_boundaries():
    assert scale_layout(64, 32, 0.8999).regime == "center"
    assert scale_layout(64, 32, 0.9).regime == "anywhere"
    assert scale_layout(64, 32, 1.0).regime == "anywhere"
    assert scale_layout(64, 32, 1.0001).regime == "crop"


def test_scale_identity_zoom(rng):
    im = random_image(rng)
    assert np.array_equal(random_scale(im, cfg(), rng, zoom=1.0), im)


def test_scale_center_uses_baseboard(rng):
    im = random_image(rng, 384, 128)
    c = AugmentConfig(target_size=(384, 128))
    out = random_scale(im, c, rng, zoom=0.85)
    board = np.round(np.array(c.baseboard_fill)).astype(np.uint8)
    assert (out[:29] == board).all() and (out[-29:] == board).all()
    assert (out[:, :9] == board).all() and (out[:, -10:] == board).all()
    assert np.array_equal(out[29:29 + 326, 9:9 + 109], resize(im, (326, 109)))


def test_scale_crop_regime(rng):
    im = random_image(rng, 384, 128)
    out = random_scale(im, AugmentConfig(target_size=(384, 128)), rng, zoom=1.1)
    assert np.array_equal(out, resize(im, (422, 141))[19:19 + 384, 6:6 + 128])


@settings(max_examples=60, deadline=None)
@given(h=st.integers(8, 96), w=st.integers(8, 64), z=st.floats(0.8, 1.1), seed=st.integers(0, 2**16))
def test_scale_preserves_size(h, w, z, seed):
    rng = np.random.default_rng(seed)
    im = random_image(rng, h, w)
    assert random_scale(im, cfg(target_size=(h, w)), rng, zoom=z).shape == (h, w, 3)
    assert random_scale(im, cfg(target_size=(h, w)), rng).shape == (h, w, 3)


@settings(max_examples=60, deadline=None)
@given(h=st.integers(8, 400), w=st.integers(8, 200), z=st.floats(0.8, 0.8999))
def test_center_margins_symmetric(h, w, z):
    lay = scale_layout(h, w, z)
    top, left = lay.offset
    assert abs(top - (h - lay.height - top)) <= 1
    assert abs(left - (w - lay.width - left)) <= 1


def test_homologous_identity_branch(rng):
    im = random_image(rng, 70, 30)
    out = homologous_expand(im, cfg(), rng)
    assert len(out.images) == 3
    assert np.array_equal(out.images[0], out.source)
    assert all(x.shape == (64, 32, 3) for x in out.images)


def test_homologous_degenerate_plan(rng):
    c = cfg(branch_plan=["identity"] * 3)
    for _ in range(50):
        out = homologous_expand(random_image(rng), c, rng)
        assert all(np.array_equal(out.images[0], x) for x in out.images[1:])


def test_heterologous_differs():
    c = cfg(branch_plan=["identity"] * 3, flip_probability=0.5)
    rng = np.random.default_rng(0)
    im = random_image(rng)
    differs = 0
    for _ in range(30):
        out = homologous_expand(im, c, rng, homologous=False)
        differs += not all(np.array_equal(out.images[0], x) for x in out.images[1:])
    assert differs > 0


def test_branch_draws_do_not_disturb_source(rng):
    im = random_image(rng)
    a = homologous_expand(im, cfg(branch_plan=["identity"]), np.random.default_rng(9))
    b = homologous_expand(im, cfg(branch_plan=["identity", "erase", "scale"]), np.random.default_rng(9))
    assert np.array_equal(a.source, b.source)


def test_seed_determinism(rng):
    im = random_image(rng)
    a = homologous_expand(im, cfg(), np.random.default_rng(3))
    b = homologous_expand(im, cfg(), np.random.default_rng(3))
    assert all(np.array_equal(x, y) for x, y in zip(a.images, b.images))


def test_normalize_image():
    exact = cfg(mean=(128 / 255, 64 / 255, 32 / 255))
    im = np.broadcast_to(np.array([128, 64, 32], np.uint8), (8, 8, 3))
    assert np.abs(normalize_image(im, exact)).max() < 1e-6
    c = cfg()
    board = np.full((8, 8, 3), np.round(np.array(c.mean) * 255), dtype=np.uint8)
    assert np.abs(normalize_image(board, c)).max() < 0.01
    half = cfg(mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5))
    assert np.allclose(normalize_image(np.full((8, 8, 3), 255, np.uint8), half), 1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        cfg(zoom_min=1.2, zoom_max=1.0)
    with pytest.raises(ValueError):
        cfg(erase_area=(0.2, 1.0))
    with pytest.raises(ValueError):
        cfg(branch_plan=["identity", "blur"])
