"""Loading, validation and alignment of the input tables.

Case counts arrive censored: area-weeks with 0 to 2 cases are simply absent
from the file, so a present row must carry at least 3 cases and absence is
meaningful.  Gridded pollution fields are collapsed to one value per area by
averaging the grid centroids that fall inside the area polygon, falling back
to the nearest centroid for areas containing none.
"""

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .errors import DataError, GeometryError

MIN_REPORTED_CASES = 3


@dataclass
class AreaTable:
    """Reporting areas: centroid coordinates, population, region membership
    and (optionally) a boundary polygon per area."""

    area_ids: list
    centroids: np.ndarray          # (n, 2), configurable unit (default km)
    population: np.ndarray         # (n,) positive int, time-constant
    region_ids: list
    polygons: Optional[dict] = None   # area_id -> (k, 2) closed ring
    unit: str = "km"

    def __post_init__(self):
        if len(set(self.area_ids)) != len(self.area_ids):
            raise DataError("duplicate area_id in area table")
        self.centroids = np.asarray(self.centroids, dtype=float)
        self.population = np.asarray(self.population)
        if np.any(self.population < 1):
            raise DataError("population must be at least 1 for every area")
        if self.polygons is not None:
            for area_id, ring in self.polygons.items():
                check_polygon(np.asarray(ring, dtype=float), name=area_id)

    @property
    def n(self) -> int:
        return len(self.area_ids)

    def index_of(self, area_id: str) -> int:
        try:
            return self.area_ids.index(area_id)
        except ValueError:
            raise DataError(f"unknown area_id {area_id!r}") from None


@dataclass
class CaseTable:
    """Long-format weekly case counts; absent (area, week) pairs are the
    censored cells."""

    area_id: np.ndarray    # (n_rows,) str
    week: np.ndarray       # (n_rows,) int in 1..T
    cases: np.ndarray      # (n_rows,) int >= 3
    T: int

    def __post_init__(self):
        self.week = np.asarray(self.week, dtype=int)
        self.cases = np.asarray(self.cases, dtype=int)
        self.area_id = np.asarray(self.area_id, dtype=object)

    @property
    def n_rows(self) -> int:
        return len(self.cases)

    def weekly_counts(self) -> np.ndarray:
        """n_t: number of areas reporting in each week, shape (T,)."""
        counts = np.zeros(self.T, dtype=int)
        np.add.at(counts, self.week - 1, 1)
        return counts

    def censored_pairs(self, area_ids=None) -> list:
        """(area_id, week) pairs absent from the table."""
        if area_ids is None:
            area_ids = sorted(set(self.area_id.tolist()))
        present = set(zip(self.area_id.tolist(), self.week.tolist()))
        return [(a, t) for a in area_ids for t in range(1, self.T + 1)
                if (a, t) not in present]


@dataclass
class CovariateTable:
    """One row of named numeric covariates per area, no missing values."""

    area_ids: list
    names: list
    values: np.ndarray     # (n, p)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.area_ids), len(self.names)):
            raise DataError("covariate value shape does not match ids/names")
        if np.any(~np.isfinite(self.values)):
            raise DataError("covariate table contains missing or non-finite values")

    def for_areas(self, area_ids) -> np.ndarray:
        pos = {a: i for i, a in enumerate(self.area_ids)}
        try:
            rows = [pos[a] for a in area_ids]
        except KeyError as exc:
            raise DataError(f"area {exc.args[0]!r} missing from covariate table") from None
        return self.values[rows]

    def with_column(self, name: str, column: np.ndarray) -> "CovariateTable":
        """Return a copy with `name` added or replaced."""
        column = np.asarray(column, dtype=float).reshape(-1, 1)
        if name in self.names:
            j = self.names.index(name)
            values = self.values.copy()
            values[:, j] = column[:, 0]
            return CovariateTable(self.area_ids, list(self.names), values)
        return CovariateTable(self.area_ids, list(self.names) + [name],
                              np.hstack([self.values, column]))


@dataclass
class GridField:
    """Gridded concentrations: unique cell centroids with nonnegative values."""

    centroids: np.ndarray  # (g, 2)
    values: np.ndarray     # (g,)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.centroids.shape[0] != self.values.shape[0]:
            raise DataError("grid centroid/value length mismatch")
        if len(np.unique(self.centroids.round(9), axis=0)) != len(self.values):
            raise DataError("duplicate grid centroids")
        if np.any(self.values < 0):
            raise DataError("grid values must be nonnegative")


def load_case_table(path, T: int) -> CaseTable:
    """Read `area_id,week,cases` rows; enforce the censoring convention.

    Rows with 0..2 cases cannot legally appear (such counts are suppressed
    at source) and are rejected; weeks must lie in 1..T.
    """
    try:
        df = pd.read_csv(path, dtype={"area_id": str})
    except (ValueError, OSError) as exc:
        raise DataError(f"cannot parse case file {path}: {exc}") from exc
    for col in ("area_id", "week", "cases"):
        if col not in df.columns:
            raise DataError(f"case file {path} is missing column {col!r}")
    for col in ("week", "cases"):
        numeric = pd.to_numeric(df[col], errors="coerce")
        bad = numeric.isna() | (numeric != numeric.round())
        if bad.any():
            row = int(df.index[bad][0]) + 2  # header is line 1
            raise DataError(f"non-integer {col!r} at line {row} of {path}")
        df[col] = numeric.astype(int)
    out_of_range = (df["week"] < 1) | (df["week"] > T)
    if out_of_range.any():
        row = int(df.index[out_of_range][0]) + 2
        raise DataError(f"week outside 1..{T} at line {row} of {path}")
    under_threshold = df["cases"] < MIN_REPORTED_CASES
    if under_threshold.any():
        row = int(df.index[under_threshold][0]) + 2
        raise DataError(
            f"case count below {MIN_REPORTED_CASES} at line {row} of {path}; "
            "suppressed counts must be absent, not zero")
    dup = df.duplicated(subset=["area_id", "week"])
    if dup.any():
        row = int(df.index[dup][0]) + 2
        raise DataError(f"duplicate (area_id, week) at line {row} of {path}")
    return CaseTable(area_id=df["area_id"].to_numpy(dtype=object),
                     week=df["week"].to_numpy(),
                     cases=df["cases"].to_numpy(), T=T)


def load_area_table(path, polygons_path=None, unit: str = "km") -> AreaTable:
    """Read `area_id,x,y,population,region_id`, optionally joining polygons."""
    try:
        df = pd.read_csv(path, dtype={"area_id": str, "region_id": str})
    except (ValueError, OSError) as exc:
        raise DataError(f"cannot parse area file {path}: {exc}") from exc
    for col in ("area_id", "x", "y", "population", "region_id"):
        if col not in df.columns:
            raise DataError(f"area file {path} is missing column {col!r}")
    polygons = load_polygons(polygons_path) if polygons_path else None
    return AreaTable(
        area_ids=df["area_id"].tolist(),
        centroids=df[["x", "y"]].to_numpy(dtype=float),
        population=df["population"].to_numpy(dtype=int),
        region_ids=df["region_id"].tolist(),
        polygons=polygons,
        unit=unit,
    )


def load_covariate_table(path) -> CovariateTable:
    """Read `area_id,<name>...` with one row per area."""
    try:
        df = pd.read_csv(path, dtype={"area_id": str})
    except (ValueError, OSError) as exc:
        raise DataError(f"cannot parse covariate file {path}: {exc}") from exc
    if "area_id" not in df.columns:
        raise DataError(f"covariate file {path} is missing column 'area_id'")
    if df["area_id"].duplicated().any():
        raise DataError(f"duplicate area_id in covariate file {path}")
    names = [c for c in df.columns if c != "area_id"]
    return CovariateTable(area_ids=df["area_id"].tolist(), names=names,
                          values=df[names].to_numpy(dtype=float))


def load_grid_field(path) -> GridField:
    """Read `x,y,value` grid-centroid rows."""
    try:
        df = pd.read_csv(path)
    except (ValueError, OSError) as exc:
        raise DataError(f"cannot parse grid file {path}: {exc}") from exc
    for col in ("x", "y", "value"):
        if col not in df.columns:
            raise DataError(f"grid file {path} is missing column {col!r}")
    return GridField(centroids=df[["x", "y"]].to_numpy(dtype=float),
                     values=df["value"].to_numpy(dtype=float))


def load_polygons(path) -> dict:
    """GeoJSON FeatureCollection keyed by the `area_id` property."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise DataError(f"{path} is not a GeoJSON FeatureCollection")
    polygons = {}
    for feature in doc.get("features", []):
        props = feature.get("properties") or {}
        area_id = props.get("area_id")
        geom = feature.get("geometry") or {}
        if area_id is None:
            raise DataError(f"feature without area_id property in {path}")
        if geom.get("type") != "Polygon":
            raise DataError(f"geometry of {area_id} is not a Polygon")
        ring = np.asarray(geom["coordinates"][0], dtype=float)
        polygons[area_id] = ring
    return polygons


def check_polygon(ring: np.ndarray, name: str = "") -> np.ndarray:
    """Validate closure and simplicity of a polygon ring; returns it closed."""
    label = f" for area {name!r}" if name else ""
    if ring.ndim != 2 or ring.shape[1] != 2 or ring.shape[0] < 4:
        raise GeometryError(f"polygon ring{label} needs at least 3 vertices and closure")
    if not np.allclose(ring[0], ring[-1]):
        raise GeometryError(f"polygon ring{label} is not closed")
    segs = np.stack([ring[:-1], ring[1:]], axis=1)   # (k, 2, 2)
    k = segs.shape[0]
    for i in range(k):
        for j in range(i + 2, k):
            if i == 0 and j == k - 1:
                continue  # first and last share the closure vertex
            if _segments_cross(segs[i], segs[j]):
                raise GeometryError(f"polygon ring{label} self-intersects")
    return ring


def _segments_cross(s1, s2) -> bool:
    """Proper intersection test for two segments."""
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(s2[0], s2[1], s1[0])
    d2 = orient(s2[0], s2[1], s1[1])
    d3 = orient(s1[0], s1[1], s2[0])
    d4 = orient(s1[0], s1[1], s2[1])
    return (d1 * d2 < 0) and (d3 * d4 < 0)


def points_in_polygon(points: np.ndarray, ring: np.ndarray,
                      tol: float = 1e-9) -> np.ndarray:
    """Boundary-inclusive containment test (ray casting plus edge check).

    A point within `tol` of any edge counts as inside, which pins down the
    behaviour for grid centroids that sit exactly on an area boundary.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    x, y = points[:, 0], points[:, 1]
    x0, y0 = ring[:-1, 0], ring[:-1, 1]
    x1, y1 = ring[1:, 0], ring[1:, 1]

    inside = np.zeros(points.shape[0], dtype=bool)
    for xa, ya, xb, yb in zip(x0, y0, x1, y1):
        crosses = (ya > y) != (yb > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = xa + (y - ya) * (xb - xa) / (yb - ya)
        inside ^= crosses & (x < np.where(crosses, x_cross, np.inf))

    # boundary: distance from point to each segment
    on_edge = np.zeros(points.shape[0], dtype=bool)
    for xa, ya, xb, yb in zip(x0, y0, x1, y1):
        dx, dy = xb - xa, yb - ya
        L2 = dx * dx + dy * dy
        if L2 == 0:
            dist2 = (x - xa) ** 2 + (y - ya) ** 2
        else:
            u = np.clip(((x - xa) * dx + (y - ya) * dy) / L2, 0.0, 1.0)
            dist2 = (x - (xa + u * dx)) ** 2 + (y - (ya + u * dy)) ** 2
        on_edge |= dist2 <= tol * tol
    return inside | on_edge


def compute_log_rates(cases: CaseTable, areas: AreaTable) -> pd.DataFrame:
    """Log observed rate ln(cases / population) for every present row.

    Censored cells carry no value by construction (they are not rows).
    """
    pos = {a: i for i, a in enumerate(areas.area_ids)}
    missing = [a for a in cases.area_id if a not in pos]
    if missing:
        raise DataError(f"case rows reference unknown area_id {missing[0]!r}")
    idx = np.array([pos[a] for a in cases.area_id], dtype=int)
    theta = np.log(cases.cases / areas.population[idx])
    return pd.DataFrame({
        "area_id": cases.area_id,
        "week": cases.week,
        "theta": theta,
    })


def grid_to_area_average(grid: GridField, areas: AreaTable) -> np.ndarray:
    """Mean grid value over centroids inside each area polygon.

    Areas containing no centroid take the value of the nearest centroid
    (Euclidean, ties broken by the smallest grid row index).
    """
    if grid.values.size == 0:
        raise DataError("empty grid field")
    if areas.polygons is None:
        raise DataError("areas carry no polygons; cannot localize grid cells")
    out = np.empty(areas.n)
    for i, area_id in enumerate(areas.area_ids):
        if area_id not in areas.polygons:
            raise DataError(f"no polygon for area {area_id!r}")
        ring = np.asarray(areas.polygons[area_id], dtype=float)
        mask = points_in_polygon(grid.centroids, ring)
        if mask.any():
            out[i] = grid.values[mask].mean()
        else:
            d2 = ((grid.centroids - areas.centroids[i]) ** 2).sum(axis=1)
            out[i] = grid.values[np.argmin(d2)]
    return out


def log_transform_density(density) -> np.ndarray:
    """Natural log of a positive density column."""
    density = np.asarray(density, dtype=float)
    if np.any(density <= 0):
        raise DataError("density values must be positive for the log transform")
    return np.log(density)
