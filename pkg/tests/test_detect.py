import dataclasses
import math

import numpy as np
import pytest

from steerdet import background, bspline, detect, grid, harmonics, templates
from steerdet.background import Placement
from steerdet.detect import Detection, ResponseMaps
from steerdet.grid import RasterGrid


@pytest.fixture(scope="module")
def small_three():
    return templates.hand_drawn_three(64, 3)


@pytest.fixture(scope="module")
def small_det(small_three):
    return harmonics.learn_detector(small_three, 10)


@pytest.fixture(scope="module")
def scene(small_three):
    # one noiseless copy at a known position and angle
    pl = Placement(83, 71, 1.0)
    img = background.blend_templates(np.zeros((160, 170)), small_three, [pl])
    return np.asarray(img), pl


def circ(a, b, period=2 * math.pi):
    d = np.mod(a - b, period)
    return np.minimum(d, period - d)


def rotated_spectrum(det, shape, alpha):
    """``F(r, theta - alpha)`` evaluated straight from the radial profiles."""
    r, th = grid.polar_grid(shape)
    out = np.zeros(shape, dtype=np.complex128)
    for n in det.harmonics.members:
        e = np.exp(1j * n * (th - alpha))
        if n:
            e[0, 0] = 0
        out += bspline.eval_profile(det.profile(int(n)), r) * e
    return out * r ** det.radial_gamma


def test_radial_only_response_is_real(small_three, small_det):
    det = harmonics.truncate_harmonics(small_det, 0)
    img = np.random.default_rng(0).standard_normal((90, 96))
    (n, F0), = harmonics.harmonic_spectra(det, img.shape)
    u = grid.ifft2(grid.fft2(img) * np.conj(F0))
    assert np.linalg.norm(u.imag) <= 1e-9 * np.linalg.norm(u.real)
    b = detect.basis_responses(img, det, symmetric=False)
    assert not np.any(b[0].imag)


def k_filter(det, shape):
    return grid.real_part(grid.ifft2(np.asarray(harmonics.synthesize_filter(det, shape))))


def test_autocorrelation_peak(small_det):
    shape = (128, 128)
    k = k_filter(small_det, shape)
    # the sampled filter of a unit-norm detector has norm close to 1
    assert np.sum(k ** 2) == pytest.approx(1.0, rel=0.05)
    # rescale so the discrete filter itself has unit norm, then correlate it with itself
    unit = dataclasses.replace(small_det, coeffs=small_det.coeffs / np.linalg.norm(k))
    b = detect.basis_responses(k_filter(unit, shape), unit)
    assert detect.response(b, 0.0)[0, 0] == pytest.approx(1.0, abs=1e-6)


def test_negative_harmonics_are_conjugates(scene, small_det):
    img, _ = scene
    full = detect.basis_responses(img, small_det, symmetric=False)
    scale = np.abs(full[0]).max()
    for n in range(1, small_det.n_max + 1):
        assert np.abs(full[-n] - np.conj(full[n])).max() <= 1e-9 * scale
    half = detect.basis_responses(img, small_det)
    assert half.symmetric and set(half.maps) == set(range(small_det.n_max + 1))
    assert np.allclose(half[-3], full[-3], atol=1e-12 * scale)


def test_single_angle(scene, small_det):
    img, _ = scene
    b = detect.basis_responses(img, small_det)
    m = detect.steer(b, 1)
    direct = sum(np.real(b[int(n)]) for n in b.harmonics)
    assert np.allclose(np.asarray(m.amp), direct, atol=1e-12 * np.abs(direct).max())
    assert not np.any(np.asarray(m.ang))


@pytest.mark.parametrize("whiten", [0.0, 1.2])
def test_steering_matches_rotated_spectrum(small_det, whiten):
    det = harmonics.apply_whitening(small_det, whiten)
    shape = (101, 117)  # odd sizes: no Nyquist aliases
    img = np.random.default_rng(1).standard_normal(shape)
    b = detect.basis_responses(img, det)
    I = grid.fft2(img)
    for alpha in np.random.default_rng(2).uniform(0, 2 * np.pi, 5):
        direct = grid.ifft2(I * np.conj(rotated_spectrum(det, shape, alpha)))
        steered = detect.response(b, alpha)
        assert np.linalg.norm(direct.imag) <= 1e-9 * np.linalg.norm(direct.real)
        assert np.linalg.norm(steered - direct.real) <= 1e-9 * np.linalg.norm(direct.real)


def test_steer_matches_response_and_imag_residue(scene, small_det):
    img, _ = scene
    b = detect.basis_responses(img, small_det)
    m = detect.steer(b, 12)
    amp, ang = np.asarray(m.amp), np.asarray(m.ang)
    alphas = 2 * np.pi * np.arange(12) / 12
    stack = np.stack([detect.response(b, a) for a in alphas])
    assert np.allclose(amp, stack.max(0), atol=1e-12 * np.abs(amp).max())
    assert np.array_equal(ang, alphas[stack.argmax(0)])
    full = sum(np.exp(1j * n * 0.3) * b[int(n)] for n in b.harmonics)
    rms = np.sqrt(np.mean(full.real ** 2))
    assert np.sqrt(np.mean(full.imag ** 2)) <= 1e-9 * rms


def test_steer_validation(scene, small_det):
    b = detect.basis_responses(scene[0], small_det)
    with pytest.raises(ValueError):
        detect.steer(b, 0)
    with pytest.raises(ValueError):
        detect.steer(b, 4, symmetry=0)
    with pytest.raises(ValueError, match="smaller"):
        detect.basis_responses(np.zeros((30, 30)), small_det)
    with pytest.raises(ValueError):
        detect.basis_responses(scene[0], small_det, boundary="mirror")


def test_brute_force_rotated_template_oracle(scene, small_three, small_det):
    img, pl = scene
    M = 30
    alphas = 2 * np.pi * np.arange(M) / M
    I = grid.fft2(img)
    best, where = -np.inf, None
    for a in alphas:
        rot = background.rotate_template(small_three, a)
        K = np.zeros(img.shape)
        C = (rot.shape[0] - 1) // 2
        K[:rot.shape[0], :rot.shape[1]] = rot
        K = np.roll(K, (-C, -C), (0, 1))
        R = grid.ifft2(I * np.conj(grid.fft2(K))).real
        y, x = np.unravel_index(np.argmax(R), R.shape)
        if R[y, x] > best:
            best, where = R[y, x], (x, y, a)
    assert where[:2] == (pl.x, pl.y) and circ(where[2], pl.theta) <= math.pi / M
    maps, dets = detect.detect(img, small_det, M=M, max_detections=1)
    assert (dets[0].x, dets[0].y) == (pl.x, pl.y)
    assert circ(dets[0].angle, pl.theta) <= math.pi / M
    assert dets[0].score == np.asarray(maps.amp)[pl.y, pl.x]


def test_refine_single_harmonic_exact(small_det):
    c = np.zeros_like(small_det.coeffs)
    N = small_det.n_max
    c[N + 1] = small_det.coeffs[N + 1]
    c[N - 1] = small_det.coeffs[N - 1]
    det = dataclasses.replace(small_det, coeffs=c)
    img = np.random.default_rng(3).standard_normal((80, 80))
    b = detect.basis_responses(img, det)
    M = 16
    for (y, x) in ((10, 20), (40, 41), (70, 5)):
        u1 = b[1][y, x]
        target = np.mod(-np.angle(u1), 2 * np.pi)  # argmax of 2 Re(e^{j a} u1)
        a0 = np.mod(np.round(target / (2 * np.pi / M)) * 2 * np.pi / M, 2 * np.pi)
        got = detect.refine_angle(b, x, y, a0, M)
        assert circ(got, target) <= 1e-9


def test_refine_fallback(small_det):
    b = detect.basis_responses(np.zeros((80, 80)), small_det)
    assert detect.refine_angle(b, 5, 5, 0.7, 30) == 0.7


def test_refine_noiseless_accuracy(scene, small_det):
    img, pl = scene
    M = 30
    b = detect.basis_responses(img, small_det)
    fine = np.array([detect.response(b, a)[pl.y, pl.x] for a in 2 * np.pi * np.arange(720) / 720])
    oracle = 2 * np.pi * np.argmax(fine) / 720
    coarse = np.asarray(detect.steer(b, M).ang)[pl.y, pl.x]
    refined = detect.refine_angle(b, pl.x, pl.y, coarse, M)
    assert circ(refined, oracle) <= 0.2 * math.pi / M
    assert circ(refined, oracle) <= circ(coarse, oracle)


def maps_from(amp, M=1):
    amp = np.asarray(amp, dtype=np.float64)
    return ResponseMaps(RasterGrid(amp), RasterGrid(np.zeros_like(amp)), M)


def test_nms_examples():
    amp = np.zeros((40, 40))
    amp[20, 10], amp[20, 20] = 5.0, 3.0
    m = maps_from(amp)
    assert detect.nms_detect(m, threshold=6.0) == []
    d = detect.nms_detect(m, threshold=1.0, min_distance=15)
    assert [(q.x, q.y, q.score) for q in d] == [(10, 20, 5.0)]
    d = detect.nms_detect(m, threshold=1.0, min_distance=10)
    assert [(q.x, q.y) for q in d] == [(10, 20), (20, 20)]
    assert len(detect.nms_detect(m, threshold=1.0, max_detections=1)) == 1
    with pytest.raises(ValueError):
        detect.nms_detect(m, min_distance=-1)
    with pytest.raises(ValueError):
        detect.nms_detect(m, refine=True)


def test_nms_separation_and_order():
    rng = np.random.default_rng(4)
    m = maps_from(rng.standard_normal((120, 130)))
    d = detect.nms_detect(m, min_distance=7.5)
    amp = np.asarray(m.amp)
    assert all(a.score >= b.score for a, b in zip(d, d[1:]))
    for i, p in enumerate(d):
        assert p.score == amp[p.y, p.x]
        for q in d[i + 1:]:
            assert math.hypot(p.x - q.x, p.y - q.y) >= 7.5
    # brute-force greedy oracle
    from scipy.ndimage import maximum_filter
    ys, xs = np.nonzero(amp >= maximum_filter(amp, 3, mode="nearest"))
    order = sorted(zip(-amp[ys, xs], ys, xs))
    keep = []
    for _, y, x in order:
        if all(math.hypot(x - kx, y - ky) >= 7.5 for kx, ky in keep):
            keep.append((x, y))
    assert [(p.x, p.y) for p in d] == keep


def test_nms_tie_break():
    amp = np.zeros((10, 30))
    amp[5, 20] = amp[5, 4] = 1.0
    d = detect.nms_detect(maps_from(amp), threshold=0.5, min_distance=50)
    assert (d[0].x, d[0].y) == (4, 5)


def test_tie_toward_smaller_angle(small_det):
    b = detect.basis_responses(np.zeros((70, 70)), small_det)
    assert not np.any(np.asarray(detect.steer(b, 8).ang))


def test_rotation_equivariance(small_three):
    det = harmonics.learn_detector(small_three, 8)
    img = np.asarray(background.blend_templates(
        np.asarray(background.synthesize_iss(150, 150, background.BackgroundModel(0.0, 0.01), seed=0)),
        small_three, [Placement(60, 80, 0.4)]))
    M = 32
    a = detect.steer(detect.basis_responses(img, det), M)
    b = detect.steer(detect.basis_responses(np.rot90(img), det), M)
    amp_a, amp_b = np.rot90(np.asarray(a.amp)), np.asarray(b.amp)
    rms = np.sqrt(np.mean(amp_a ** 2))
    assert np.sqrt(np.mean((amp_a - amp_b) ** 2)) <= 0.02 * rms
    # np.rot90 maps (x, y) -> (y, -x) about the center, a rotation by -pi/2
    hot = amp_b > 0.5 * amp_b.max()
    shift = np.mod(np.asarray(b.ang)[hot] - np.rot90(np.asarray(a.ang))[hot], 2 * np.pi)
    assert np.all(circ(shift, 1.5 * np.pi) <= 1e-9)


def test_monotone_in_M(scene, small_det):
    b = detect.basis_responses(scene[0], small_det)
    prev = None
    for M in (4, 8, 16, 32):
        amp = np.asarray(detect.steer(b, M).amp)
        if prev is not None:
            assert np.all(amp >= prev - 1e-12 * np.abs(prev).max())
        prev = amp


def test_symmetry_mod():
    t = templates.two_blob(63, 20, 3)
    det = harmonics.learn_detector(t, 6)
    img = np.asarray(background.blend_templates(np.zeros((150, 150)), t, [Placement(75, 75, 4.0)]))
    maps, dets = detect.detect(img, det, M=30, symmetry=2, max_detections=1)
    assert np.asarray(maps.ang).max() < math.pi
    assert circ(dets[0].angle, 4.0 - math.pi, math.pi) <= math.pi / 30


def test_zero_boundary(scene, small_det):
    img, pl = scene
    maps, dets = detect.detect(img, small_det, boundary="zero", max_detections=1)
    assert np.asarray(maps.amp).shape == img.shape
    assert (dets[0].x, dets[0].y) == (pl.x, pl.y)


def test_refine_in_detect(scene, small_det):
    img, pl = scene
    _, plain = detect.detect(img, small_det, M=30, max_detections=1)
    _, ref = detect.detect(img, small_det, M=30, max_detections=1, refine=True)
    assert circ(ref[0].angle, pl.theta) <= circ(plain[0].angle, pl.theta) + 1e-12


def test_detection_csv(tmp_path):
    d = [Detection(1, 2, 0.5, 1.0), Detection(3, 4, 1.5, 9.0)]
    path = tmp_path / "d.csv"
    detect.write_detections(d, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "x,y,theta_rad,score" and lines[1].startswith("3,4,")
    assert detect.read_detections(path) == d[::-1]
    path.write_text("x,y\n1,2\n")
    with pytest.raises(ValueError):
        detect.read_detections(path)
