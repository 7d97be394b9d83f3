import numpy as np
import pytest

from qres import geometry


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)


@pytest.fixture
def elan11():
    return geometry.preset("elan_11_l")


@pytest.fixture
def elan21():
    return geometry.preset("elan_21_l")


@pytest.fixture
def elan25():
    return geometry.preset("elan_25")


def random_snapshot(rng, n):
    return rng.standard_normal(n) + 1j * rng.standard_normal(n)


def random_geometry(rng, planar=None):
    """A random small layout for property-style sweeps."""
    if planar is None:
        planar = bool(rng.integers(2))
    n = int(rng.integers(5, 24))
    if planar:
        pos = rng.uniform(-4.0, 4.0, (n, 2)) * np.pi
        return geometry.ArrayGeometry(pos, "planar", "random_planar")
    x = np.sort(rng.uniform(-6.0, 6.0, n)) * np.pi
    pos = np.column_stack([x, np.zeros(n)])
    return geometry.ArrayGeometry(pos, "linear", "random_linear")


def random_directions(rng, geom, m, min_sep_bw=0.35):
    """Well-separated random directions inside the main region."""
    bw = geom.beamwidth()
    for _ in range(200):
        u = rng.uniform(-0.4, 0.4, m)
        v = rng.uniform(-0.4, 0.4, m) if geom.kind == "planar" else np.zeros(m)
        pts = np.column_stack([u, v])
        if m == 1:
            return geometry.DirectionSet(u=u, v=v)
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=2))
        iu = np.triu_indices(m, k=1)
        if dist[iu].min() >= min_sep_bw * bw:
            return geometry.DirectionSet(u=np.sort(u), v=v)
    raise RuntimeError("could not place separated directions")
