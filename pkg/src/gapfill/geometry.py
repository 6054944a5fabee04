"""Coordinate frames, distances, prediction grids and temporal binning.

Two frames are supported: a planar frame with dimensionless Euclidean
coordinates, and a spherical frame with (lon, lat) in degrees.  All other
modules share these conventions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.spatial.distance import cdist

EARTH_RADIUS_KM = 6371.0


class Frame(Enum):
    PLANAR = "planar"
    SPHERE = "sphere"


class FrameMismatchError(ValueError):
    """Raised when two locations or point sets live in different frames."""


@dataclass(frozen=True)
class Location:
    """A point in one of the supported frames.

    Planar coordinates are free-dimensional (1-D and 2-D are both used);
    sphere coordinates are (lon, lat) with lon in [-180, 180) and lat in
    [-90, 90].
    """

    frame: Frame
    coords: tuple

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float)
        if not np.all(np.isfinite(c)):
            raise ValueError("coordinates must be finite")
        if self.frame is Frame.SPHERE:
            lon, lat = c
            if not (-180.0 <= lon < 180.0):
                raise ValueError(f"longitude {lon} outside [-180, 180)")
            if not (-90.0 <= lat <= 90.0):
                raise ValueError(f"latitude {lat} outside [-90, 90]")
        object.__setattr__(self, "coords", tuple(float(x) for x in c))


@dataclass(frozen=True)
class SpaceTimePoint:
    loc: Location
    t: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.t):
            raise ValueError("time must be finite")


@dataclass(frozen=True)
class GridSpec:
    """Regular grid: per-axis bounds and cell counts, cell-centre convention."""

    frame: Frame
    bounds: tuple  # ((lo, hi), ...) per axis
    counts: tuple  # (n, ...) per axis

    def __post_init__(self):
        if len(self.bounds) != len(self.counts):
            raise ValueError("bounds and counts must have equal length")
        for (lo, hi), n in zip(self.bounds, self.counts):
            if n < 1:
                raise ValueError("axis count must be >= 1")
            if not hi > lo:
                raise ValueError("axis bounds must be non-degenerate")


def distance(a: Location, b: Location) -> float:
    """Distance between two locations: Euclidean (planar) or great-circle km
    on a sphere of radius 6371 km."""
    if a.frame is not b.frame:
        raise FrameMismatchError(f"{a.frame} vs {b.frame}")
    pa = np.asarray(a.coords)
    pb = np.asarray(b.coords)
    if a.frame is Frame.PLANAR:
        return float(np.linalg.norm(pb - pa))
    return float(great_circle_matrix(pa[None, :], pb[None, :])[0, 0])


def great_circle_matrix(lonlat_a: np.ndarray, lonlat_b: np.ndarray) -> np.ndarray:
    """Pairwise great-circle distances (km) via the haversine formula.

    Inputs are (n, 2) arrays of (lon, lat) in degrees.
    """
    a = np.radians(np.atleast_2d(lonlat_a))
    b = np.radians(np.atleast_2d(lonlat_b))
    lat_a = a[:, 1][:, None]
    lat_b = b[:, 1][None, :]
    dlat = lat_b - lat_a
    dlon = b[:, 0][None, :] - a[:, 0][:, None]
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat_a) * np.cos(lat_b) * np.sin(dlon / 2.0) ** 2
    h = np.clip(h, 0.0, 1.0)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(h))


def distance_matrix(frame: Frame, coords_a: np.ndarray, coords_b: np.ndarray) -> np.ndarray:
    """Pairwise spatial distances between two coordinate arrays in a frame."""
    coords_a = np.atleast_2d(np.asarray(coords_a, dtype=float))
    coords_b = np.atleast_2d(np.asarray(coords_b, dtype=float))
    if frame is Frame.PLANAR:
        return cdist(coords_a, coords_b)
    return great_circle_matrix(coords_a, coords_b)


def make_grid(spec: GridSpec):
    """Ordered cell-centre locations of a regular grid.

    Row-major in the sense that the first axis varies fastest; point k on an
    axis sits at lo + (k + 1/2) * cell_width.
    """
    axes = []
    for (lo, hi), n in zip(spec.bounds, spec.counts):
        width = (hi - lo) / n
        axes.append(lo + (np.arange(n) + 0.5) * width)
    mesh = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([m.ravel(order="F") for m in mesh], axis=-1)
    return [Location(spec.frame, tuple(row)) for row in coords]


def grid_coords(spec: GridSpec) -> np.ndarray:
    """Same ordering as make_grid, returned as an (n, ndim) array."""
    return np.array([loc.coords for loc in make_grid(spec)])


def bin_index(t: float, origin: float, width: float) -> int:
    """Half-open temporal bin [origin + k*width, origin + (k+1)*width)."""
    if width <= 0:
        raise ValueError("bin width must be > 0")
    return math.floor((t - origin) / width)


def points_to_arrays(points):
    """Split a sequence of SpaceTimePoint into (frame, coords, times) arrays."""
    if len(points) == 0:
        raise ValueError("empty point list")
    frame = points[0].loc.frame
    coords = np.empty((len(points), len(points[0].loc.coords)))
    times = np.empty(len(points))
    for i, p in enumerate(points):
        if p.loc.frame is not frame:
            raise FrameMismatchError("mixed frames in point list")
        coords[i] = p.loc.coords
        times[i] = p.t
    return frame, coords, times


def planar_points(coords: np.ndarray, times=None):
    """Build SpaceTimePoint list from an (n, d) planar coordinate array."""
    coords = np.atleast_2d(coords)
    if times is None:
        times = np.zeros(len(coords))
    return [
        SpaceTimePoint(Location(Frame.PLANAR, tuple(c)), float(t))
        for c, t in zip(coords, times)
    ]


def sphere_points(lonlat: np.ndarray, times=None):
    """Build SpaceTimePoint list from an (n, 2) lon-lat array."""
    lonlat = np.atleast_2d(lonlat)
    if times is None:
        times = np.zeros(len(lonlat))
    return [
        SpaceTimePoint(Location(Frame.SPHERE, tuple(c)), float(t))
        for c, t in zip(lonlat, times)
    ]
