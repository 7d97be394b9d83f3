"""Array element layouts, steering vectors, beamwidth and regularity checks.

Element coordinates are stored in units of 2*pi/lambda, i.e. the phase an
element contributes per unit direction cosine.  Position files on disk use
units of wavelength and are converted on load.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._kernels import steer

#: 3-dB beamwidth constant: BW = 0.887 * lambda / D in direction-cosine units.
BEAMWIDTH_FACTOR = 0.887

#: Smallest singular-value ratio accepted as full rank in regularity probing.
RANK_TOLERANCE = 1e-8

TWO_PI = 2.0 * math.pi


class GeometryError(ValueError):
    """Invalid array layout or direction data."""


@dataclass(frozen=True)
class ArrayGeometry:
    """Element positions (N, 2) in 2*pi/lambda units plus a kind tag."""

    positions: np.ndarray
    kind: str
    name: str = ""

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if pos.ndim != 2 or pos.shape[1] != 2 or pos.shape[0] < 1:
            raise GeometryError("positions must be an (N, 2) array with N >= 1")
        if not np.isfinite(pos).all():
            raise GeometryError("positions must be finite")
        if self.kind not in ("linear", "planar"):
            raise GeometryError(f"unknown array kind: {self.kind!r}")
        if self.kind == "linear" and np.any(pos[:, 1] != 0.0):
            raise GeometryError("linear arrays must have all y coordinates zero")
        pos = pos.copy()
        pos.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        # contiguous per-axis copies keep the compiled kernel allocation-free
        for attr, col in (("_x", 0), ("_y", 1)):
            arr = np.ascontiguousarray(pos[:, col])
            arr.flags.writeable = False
            object.__setattr__(self, attr, arr)

    @property
    def n_elements(self) -> int:
        return self.positions.shape[0]

    @property
    def x(self) -> np.ndarray:
        return self._x

    @property
    def y(self) -> np.ndarray:
        return self._y

    def aperture(self) -> float:
        """Maximum pairwise element distance (2*pi/lambda units)."""
        pos = self.positions
        if pos.shape[0] < 2:
            return 0.0
        diff = pos[:, None, :] - pos[None, :, :]
        return float(np.sqrt((diff**2).sum(axis=2)).max())

    def beamwidth(self) -> float:
        return beamwidth(self)


@dataclass(frozen=True)
class DirectionSet:
    """M directions in direction-cosine space, v identically zero for linear arrays."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.atleast_1d(np.asarray(self.u, dtype=float))
        v = np.atleast_1d(np.asarray(self.v, dtype=float))
        if u.shape != v.shape or u.ndim != 1:
            raise GeometryError("u and v must be 1-d arrays of equal length")
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise GeometryError("directions must be finite")
        if np.any(u**2 + v**2 > 1.0 + 1e-12):
            raise GeometryError("directions must satisfy u^2 + v^2 <= 1")
        for arr in (u, v):
            arr.flags.writeable = False
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @classmethod
    def from_u(cls, u) -> "DirectionSet":
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return cls(u=u, v=np.zeros_like(u))

    @property
    def m(self) -> int:
        return self.u.shape[0]

    def canonical(self) -> "DirectionSet":
        """Sort by ascending u, ties broken by ascending v."""
        order = np.lexsort((self.v, self.u))
        return DirectionSet(u=self.u[order], v=self.v[order])

    def as_array(self) -> np.ndarray:
        return np.column_stack([self.u, self.v])


def steering_vector(geom: ArrayGeometry, direction) -> np.ndarray:
    """Unit-modulus response exp(-j(x_k u + y_k v)) of every element."""
    if np.isscalar(direction):
        u, v = float(direction), 0.0
    else:
        u, v = float(direction[0]), float(direction[1])
    return np.exp(-1j * (geom.x * u + geom.y * v))


def transfer_matrix(geom: ArrayGeometry, dirs: DirectionSet) -> np.ndarray:
    """N x M matrix whose columns are the steering vectors of ``dirs``."""
    if dirs.m < 1:
        raise GeometryError("need at least one direction")
    return steer(geom.x, geom.y, dirs.u, dirs.v)


def beamwidth(geom: ArrayGeometry) -> float:
    """3-dB beamwidth 0.887*lambda/D in direction-cosine units."""
    if geom.n_elements < 2:
        raise GeometryError("beamwidth needs at least two elements")
    aperture = geom.aperture()
    if aperture == 0.0:
        raise GeometryError("degenerate aperture (all elements coincide)")
    return BEAMWIDTH_FACTOR * TWO_PI / aperture


# ---------------------------------------------------------------------------
# regularity probing


@dataclass
class ProbeSpec:
    """Sampling region and density for regularity checks.

    Linear arrays are probed on the u interval, planar arrays on the disk
    around ``center``.  The first tuple component is stratified with
    uniform jitter (low-discrepancy coverage), the rest are uniform.
    ``min_separation`` keeps probe directions pairwise distinct; below it
    conditioning decays continuously and says nothing about structure.
    """

    tuples: int = 10_000
    u_range: tuple[float, float] = (-1.0, 1.0)
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 1.0
    min_separation: float = 0.01


@dataclass
class RegularityReport:
    regular: bool
    mode: str
    tuple_size: int
    worst_ratio: float
    witness: np.ndarray | None
    tuples_checked: int
    note: str = ""


def _draw_components(geom, probe, rng, shape):
    if geom.kind == "linear":
        lo, hi = probe.u_range
        u = rng.uniform(lo, hi, shape)
        return np.stack([u, np.zeros_like(u)], axis=-1)
    cx, cy = probe.center
    rho = probe.radius * np.sqrt(rng.uniform(0.0, 1.0, shape))
    ang = rng.uniform(0.0, TWO_PI, shape)
    return np.stack([cx + rho * np.cos(ang), cy + rho * np.sin(ang)], axis=-1)


def _sample_tuples(geom, size, probe, rng):
    """(tuples, size, 2) direction samples, pairwise separated per tuple."""
    n = probe.tuples
    samples = np.empty((n, size, 2))
    samples[:, 1:size, :] = _draw_components(geom, probe, rng, (n, size - 1))
    # stratify the first component for even coverage
    if geom.kind == "linear":
        lo, hi = probe.u_range
        width = (hi - lo) / n
        samples[:, 0, 0] = lo + width * (np.arange(n) + rng.uniform(0.0, 1.0, n))
        samples[:, 0, 1] = 0.0
    else:
        cx, cy = probe.center
        ang = TWO_PI * (np.arange(n) + rng.uniform(0.0, 1.0, n)) / n
        rho = probe.radius * np.sqrt(rng.uniform(0.0, 1.0, n))
        samples[:, 0, 0] = cx + rho * np.cos(ang)
        samples[:, 0, 1] = cy + rho * np.sin(ang)
    # redraw components that fall within the separation floor of another
    for _ in range(50):
        diff = samples[:, :, None, :] - samples[:, None, :, :]
        dist = np.sqrt((diff**2).sum(axis=3))
        dist[:, np.arange(size), np.arange(size)] = np.inf
        offenders = dist.min(axis=2) < probe.min_separation
        offenders[:, 0] = False  # keep the stratified component fixed
        if not offenders.any():
            break
        samples[offenders] = _draw_components(geom, probe, rng, int(offenders.sum()))
    # drop any tuple still violating the floor (tiny regions only)
    diff = samples[:, :, None, :] - samples[:, None, :, :]
    dist = np.sqrt((diff**2).sum(axis=3))
    dist[:, np.arange(size), np.arange(size)] = np.inf
    keep = dist.min(axis=(1, 2)) >= probe.min_separation
    return samples[keep]


def check_regularity(
    geom: ArrayGeometry,
    m: int,
    mode: str = "strong",
    probe: ProbeSpec | None = None,
    rng: np.random.Generator | None = None,
) -> RegularityReport:
    """Sampling-based strong/weak M-regularity check.

    Draws pairwise-distinct direction tuples (2M for strong, M+1 for weak)
    from the probe region and declares non-regular as soon as a steering
    matrix falls below numerical full rank.  "Regular" therefore means: no
    counterexample found at the given probe density.
    """
    if mode not in ("strong", "weak"):
        raise GeometryError(f"unknown regularity mode: {mode!r}")
    if m == 0:
        return RegularityReport(True, mode, 0, np.inf, None, 0, "empty condition")
    size = 2 * m if mode == "strong" else m + 1
    if geom.n_elements < size:
        # fewer elements than steering vectors: always rank deficient
        return RegularityReport(
            False, mode, size, 0.0, None, 0,
            f"N={geom.n_elements} < {size} steering vectors are always dependent",
        )
    probe = probe or ProbeSpec()
    if probe.tuples < 1:
        raise GeometryError("probe region empty (no tuples requested)")
    rng = rng if rng is not None else np.random.default_rng(0)
    samples = _sample_tuples(geom, size, probe, rng)
    if samples.shape[0] == 0:
        raise GeometryError("probe region too small for the separation floor")
    mats = steer(
        geom.x, geom.y,
        samples[:, :, 0].reshape(-1), samples[:, :, 1].reshape(-1),
    ).reshape(geom.n_elements, samples.shape[0], size).transpose(1, 0, 2)
    svals = np.linalg.svd(mats, compute_uv=False)
    ratios = svals[:, -1] / svals[:, 0]
    worst = int(np.argmin(ratios))
    return RegularityReport(
        regular=bool(ratios[worst] >= RANK_TOLERANCE),
        mode=mode,
        tuple_size=size,
        worst_ratio=float(ratios[worst]),
        witness=samples[worst],
        tuples_checked=samples.shape[0],
    )


# ---------------------------------------------------------------------------
# generators and presets


def linear_array(n: int, spacing_wl: float = 0.5, name: str = "") -> ArrayGeometry:
    """n elements on a regular grid, centered, spacing in wavelengths."""
    if n < 1:
        raise GeometryError("need at least one element")
    x = (np.arange(n) - (n - 1) / 2.0) * spacing_wl * TWO_PI
    pos = np.column_stack([x, np.zeros(n)])
    return ArrayGeometry(pos, "linear", name or f"linear_{n}")


def rectangular_array(nx: int, ny: int, spacing_wl: float = 0.5, name: str = "") -> ArrayGeometry:
    x = (np.arange(nx) - (nx - 1) / 2.0) * spacing_wl * TWO_PI
    y = (np.arange(ny) - (ny - 1) / 2.0) * spacing_wl * TWO_PI
    gx, gy = np.meshgrid(x, y, indexing="ij")
    pos = np.column_stack([gx.ravel(), gy.ravel()])
    return ArrayGeometry(pos, "planar", name or f"rect_{nx}x{ny}")


def thinned_circular_array(
    n: int,
    diameter_wl: float,
    taper: float = 0.7,
    name: str = "",
) -> ArrayGeometry:
    """Concentric-ring layout with parabolic density tapering.

    Areal element density falls off as 1 - taper*(r/R)^2.  Ring radii and
    populations are chosen deterministically; rings are rotated against each
    other to avoid spokes.
    """
    if n < 1:
        raise GeometryError("need at least one element")
    radius = diameter_wl / 2.0 * TWO_PI
    n_rings = max(1, int(round(math.sqrt(n) / 1.6)))
    edges = np.linspace(0.0, radius, n_rings + 1)
    mids = 0.5 * (edges[:-1] + edges[1:])
    weights = (edges[1:] ** 2 - edges[:-1] ** 2) * (1.0 - taper * (mids / radius) ** 2)
    weights /= weights.sum()
    counts = np.floor(weights * n).astype(int)
    remainder = weights * n - counts
    for idx in np.argsort(remainder)[::-1][: n - counts.sum()]:
        counts[idx] += 1
    pts = []
    if counts[0] > 0 and n_rings > 1 and counts[0] <= 2:
        # very small inner allocation collapses to a center element
        pts.append((0.0, 0.0))
        counts[0] -= 1
    for ring, count in enumerate(counts):
        if count <= 0:
            continue
        ang = TWO_PI * (np.arange(count) + 0.5 * (ring % 3)) / count
        pts.extend(zip(mids[ring] * np.cos(ang), mids[ring] * np.sin(ang)))
    pos = np.asarray(pts[:n])
    return ArrayGeometry(pos, "planar", name or f"ring_{n}")


#: Planar presets approximate the original layouts, which are only described
#: by element count, diameter and taper; results that depend on them should
#: be read qualitatively.
def preset(name: str) -> ArrayGeometry:
    key = name.strip().lower().replace(" ", "_").replace("-", "_")
    if key.startswith("elan_") and key.endswith("_l"):
        n = int(key[len("elan_"):-2])
        return linear_array(n, 0.5, name=f"elan_{n}_l")
    table = {
        "elan_6": lambda: _elan6(),
        "elan_25": lambda: thinned_circular_array(25, 8.0, name="elan_25"),
        "elan_39": lambda: thinned_circular_array(39, 8.0, name="elan_39"),
        "elan_192": lambda: thinned_circular_array(192, 37.0, name="elan_192"),
    }
    if key not in table:
        raise GeometryError(f"unknown preset: {name!r}")
    return table[key]()


def _elan6() -> ArrayGeometry:
    radius = 2.0 * TWO_PI  # diameter 4 lambda
    ang = TWO_PI * np.arange(5) / 5.0
    pos = np.vstack([[0.0, 0.0], np.column_stack([radius * np.cos(ang), radius * np.sin(ang)])])
    return ArrayGeometry(pos, "planar", "elan_6")


def load_positions(path, kind: str | None = None, name: str = "") -> ArrayGeometry:
    """Read an ``x y`` per line position file (units of wavelength)."""
    rows = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise GeometryError(f"{path}:{lineno}: expected 'x y', got {raw!r}")
        rows.append((float(parts[0]), float(parts[1])))
    if not rows:
        raise GeometryError(f"{path}: no positions found")
    pos = np.asarray(rows) * TWO_PI
    if kind is None:
        kind = "linear" if np.all(pos[:, 1] == 0.0) else "planar"
    return ArrayGeometry(pos, kind, name or Path(path).stem)
