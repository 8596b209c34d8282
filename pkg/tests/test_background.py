import math

import numpy as np
import pytest

from steerdet import background, grid, templates
from steerdet.background import BackgroundModel, Placement


def test_model_validation():
    with pytest.raises(ValueError):
        BackgroundModel(-0.5, 1.0)
    with pytest.raises(ValueError):
        BackgroundModel(1.0, 0.0)
    assert BackgroundModel(1.2, 4.0).sigma == 2.0


def test_white_field_variance_and_determinism():
    a = np.asarray(background.synthesize_iss(512, 512, BackgroundModel(0.0, 2.5), seed=4))
    assert a.var() == pytest.approx(2.5, rel=0.05)
    b = np.asarray(background.synthesize_iss(512, 512, BackgroundModel(0.0, 2.5), seed=4))
    assert np.array_equal(a, b)
    c = np.asarray(background.synthesize_iss(512, 512, BackgroundModel(0.0, 2.5), seed=5))
    assert not np.array_equal(a, c)
    with pytest.raises(ValueError):
        background.synthesize_iss(4, 64, BackgroundModel())


def test_iss_zero_mean_and_isotropic_slope():
    g = 1.2
    shape = (256, 256)
    r, _ = grid.polar_grid(shape)
    power = np.zeros(shape)
    for s in range(8):
        a = np.asarray(background.synthesize_iss(256, 256, BackgroundModel(g, 1.0), seed=s))
        assert abs(a.mean()) <= 3 * a.std() / math.sqrt(a.size)
        power += np.abs(grid.fft2(a)) ** 2
    # radially averaged power over octave rings
    edges = np.geomspace(0.05, 2.5, 12)
    rr, pp = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        ring = (r >= lo) & (r < hi)
        rr.append(r[ring].mean())
        pp.append(power[ring].mean())
    slope = np.polyfit(np.log(rr), np.log(pp), 1)[0]
    assert abs(slope + 2 * g) <= 0.15


def test_estimate_gamma_white_and_iss():
    white = [background.synthesize_iss(512, 512, BackgroundModel(0.0), seed=s) for s in range(3)]
    assert abs(background.estimate_gamma(white).gamma) <= 0.1
    iss = [background.synthesize_iss(512, 512, BackgroundModel(1.2), seed=s) for s in range(10)]
    est = background.estimate_gamma(iss)
    assert 1.1 <= est.gamma <= 1.3
    assert len(est.scales) == 5 and math.isfinite(est.residual)


def test_estimate_gamma_offset_invariant():
    f = np.asarray(background.synthesize_iss(256, 256, BackgroundModel(1.0), seed=2))
    a = background.estimate_gamma(f, scales=(2, 4, 8, 16))
    b = background.estimate_gamma(f + 37.0, scales=(2, 4, 8, 16))
    assert b.gamma == pytest.approx(a.gamma, abs=1e-9)


def test_estimate_gamma_with_templates_blended():
    bg = background.synthesize_iss(512, 512, BackgroundModel(1.2), seed=9)
    t = templates.two_blob(64, 16, 4)
    ext = background.template_extent(t)
    pl = background.random_placements(3, 512, 512, ext, 2 * ext, seed=1)
    img = background.blend_templates(bg, t, pl)
    shift = background.estimate_gamma(img).gamma - background.estimate_gamma(bg).gamma
    assert abs(shift) <= 0.1


def test_estimate_gamma_errors():
    f = np.zeros((100, 100))
    with pytest.raises(ValueError, match="too small"):
        background.estimate_gamma(f, scales=(2, 4, 16))
    with pytest.raises(ValueError):
        background.estimate_gamma(f, scales=(2, 4))
    with pytest.raises(ArithmeticError):
        background.estimate_gamma(f, scales=(2, 4, 8))


def _filter(shape=(64, 64)):
    return background.mexican_hat_spectrum(shape, 3.0) * (1 + np.cos(2 * grid.polar_grid(shape)[1]))


def test_predict_variance_parseval_and_scaling():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((32, 24))
    F = grid.fft2(f)
    v = background.predict_variance(F, BackgroundModel(0.0, 1.7))
    assert v == pytest.approx(1.7 * np.sum(f ** 2), rel=1e-10)
    H = _filter()
    one = background.predict_variance(H, BackgroundModel(1.2, 1.0))
    assert background.predict_variance(H, BackgroundModel(1.2, 4.0)) == pytest.approx(4 * one, rel=1e-14)
    with pytest.raises(ValueError, match="DC"):
        background.predict_variance(F, BackgroundModel(1.2, 1.0))


def test_predict_variance_additive():
    H = _filter()
    r, _ = grid.polar_grid(H.shape)
    lo, hi = np.where(r < 1.0, H, 0), np.where(r >= 1.0, H, 0)
    bg = BackgroundModel(1.2, 1.0)
    total = background.predict_variance(H, bg)
    parts = background.predict_variance(lo, bg) + background.predict_variance(hi, bg)
    assert parts == pytest.approx(total, rel=1e-12)


@pytest.mark.parametrize("gamma", [0.0, 1.2])
def test_predict_variance_monte_carlo(gamma):
    shape = (128, 128)
    H = _filter(shape)
    H[0, 0] = 0
    bg = BackgroundModel(gamma, 1.0)
    # <S, f> at every shift of a periodic field; the spatial mean of the squared
    # response is an unbiased estimate of the per-position variance
    acc = 0.0
    n = 200
    for s in range(n):
        S = np.asarray(background.synthesize_iss(shape[1], shape[0], bg, seed=s))
        resp = grid.ifft2(grid.fft2(S) * np.conj(H)).real
        acc += np.mean(resp ** 2)
    assert acc / n == pytest.approx(background.predict_variance(H, bg), rel=0.15)


def test_blend_examples():
    bg = np.random.default_rng(1).standard_normal((40, 50))
    t = templates.gaussian_bump(9, 1.5)
    assert np.array_equal(np.asarray(background.blend_templates(bg, t, [])), bg)
    out = np.asarray(background.blend_templates(np.zeros((40, 50)), t, [Placement(20, 15, 0.0)]))
    expect = np.zeros((40, 50))
    expect[11:20, 16:25] = t
    assert np.allclose(out, expect, atol=1e-12)
    doubled = np.asarray(background.blend_templates(np.zeros((40, 50)), t, [Placement(20, 15, 0.0)], 2.0))
    assert np.allclose(doubled, 2 * expect, atol=1e-12)
    with pytest.raises(ValueError, match="outside"):
        background.blend_templates(bg, t, [Placement(2, 15, 0.0)])


def _crop_center(a, shape):
    C = (a.shape[0] - 1) // 2
    cy, cx = grid.center_index(shape)
    return a[C - cy:C - cy + shape[0], C - cx:C - cx + shape[1]]


def test_double_rotation_by_pi():
    t = templates.hand_drawn_three(64, 3)
    once = background.rotate_template(t, math.pi)
    twice = background.rotate_template(_crop_center(once, once.shape), math.pi)
    back = _crop_center(twice, t.shape)
    rms = np.sqrt(np.mean(t ** 2))
    assert np.sqrt(np.mean((back - t) ** 2)) <= 0.02 * rms


def test_rotation_composition():
    t = templates.two_blob(63, 20, 3)
    a = background.rotate_template(t, 0.7)
    a = background.rotate_template(a, 0.7)
    b = background.rotate_template(t, 1.4)
    b = _crop_center(b, b.shape)
    a = _crop_center(a, b.shape)
    assert np.sqrt(np.mean((a - b) ** 2)) <= 0.02 * np.sqrt(np.mean(b ** 2))


def test_rotation_direction():
    # a blob on the +x axis lands on the +y (row) axis after a quarter turn
    t = np.zeros((21, 21))
    t[10, 16] = 1.0
    r = background.rotate_template(t, math.pi / 2)
    C = (r.shape[0] - 1) // 2
    y, x = np.unravel_index(np.argmax(r), r.shape)
    assert (y - C, x - C) == (6, 0)


def test_random_placements():
    assert background.random_placements(0, 100, 100, 10, 5) == []
    with pytest.raises(ValueError, match="could not pack"):
        background.random_placements(2, 100, 100, 10, 200, seed=0)
    pl = background.random_placements(10, 1200, 1200, 40, 250, seed=3)
    assert len(pl) == 10
    for i, p in enumerate(pl):
        assert 40 <= p.x <= 1159 and 40 <= p.y <= 1159 and 0 <= p.theta < 2 * math.pi
        for q in pl[i + 1:]:
            assert math.hypot(p.x - q.x, p.y - q.y) >= 250
    assert background.random_placements(10, 1200, 1200, 40, 250, seed=3) == pl
    with pytest.raises(ValueError, match="does not fit"):
        background.random_placements(1, 50, 50, 30, 0)


def test_placement_csv_round_trip(tmp_path):
    pl = background.random_placements(5, 300, 300, 20, 30, seed=8)
    path = tmp_path / "p.csv"
    background.write_placements(pl, path)
    assert path.read_text().splitlines()[0] == "x,y,theta_rad"
    assert background.read_placements(path) == pl
    path.write_text("x,y\n1,2\n")
    with pytest.raises(ValueError, match="malformed"):
        background.read_placements(path)


def test_template_extent():
    t = np.zeros((11, 11))
    t[5, 5] = 1
    assert background.template_extent(t) == 3
    t[5, 9] = 1
    assert background.template_extent(t) == 7
    assert background.template_extent(np.zeros((4, 4))) == 0
