import numpy as np
import pytest

from steerdet import grid, harmonics, templates


@pytest.fixture(scope="session")
def three():
    return templates.hand_drawn_three()


@pytest.fixture(scope="session")
def blob():
    return templates.two_blob()


@pytest.fixture(scope="session")
def three_detector(three):
    return harmonics.learn_detector(three, 6)


@pytest.fixture(scope="session")
def pair():
    return templates.sharp_pair()


@pytest.fixture(scope="session")
def pair_detector(pair):
    return harmonics.learn_detector(pair, 8)


def atom_spectrum(shape, n, k, r0):
    """``(1/r0) beta2(r/r0 - k) e^{j n theta}`` sampled on an unshifted DFT grid."""
    from steerdet import bspline
    r, th = grid.polar_grid(shape)
    e = np.exp(1j * n * th)
    if n:
        e[0, 0] = 0
    return bspline.beta2(r / r0 - k) / r0 * e


def embed(template, shape):
    """Template placed on a larger zero grid with its nominal center at the origin."""
    out = np.zeros(shape)
    t = np.asarray(template)
    cy, cx = grid.center_index(t.shape)
    out[:t.shape[0], :t.shape[1]] = t
    return np.roll(out, (-cy, -cx), (0, 1))
