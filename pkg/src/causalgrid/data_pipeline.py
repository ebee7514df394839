"""Grid construction and per-cell aggregation of crashes, tracts and street imagery.

All coordinates are planar and in meters. Cells are half-open squares
``[x0, x0 + s) x [y0, y0 + s)``; a cell's id is its row-major index in the
full (unmasked) lattice, so ids are stable under masking.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
import pandas as pd
import shapely
from shapely.geometry import Polygon, box, mapping, shape

log = logging.getLogger(__name__)

N_SEG = 18
SEG_COLUMNS = [f"seg_{k:02d}" for k in range(N_SEG)]
HEADINGS = (0, 90, 180, 270)
MAX_ENTROPY = math.log2(N_SEG)


class DataError(ValueError):
    pass


class CrashCategory(str, enum.Enum):
    ANGLE = "Angle"
    PEDESTRIAN_BICYCLE = "PedestrianBicycle"
    REAR_END = "RearEnd"
    FATALITY = "Fatality"
    SERIOUS_INJURY = "SeriousInjury"
    INJURY = "Injury"
    OTHER = "Other"

    @classmethod
    def parse(cls, value) -> "CrashCategory":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value))
        except ValueError:
            raise DataError(f"unknown crash category {value!r}") from None


CATEGORIES = [c.value for c in CrashCategory]


class ProjectedPoint(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class CrashRecord:
    location: ProjectedPoint
    category: CrashCategory
    year: int

    def __post_init__(self):
        object.__setattr__(self, "category", CrashCategory.parse(self.category))


@dataclass(frozen=True)
class TractRecord:
    polygon: Polygon
    population: float
    attributes: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class ImageRecord:
    point_id: str
    location: ProjectedPoint
    heading: int
    proportions: tuple[float, ...]


@dataclass(frozen=True)
class GridSpec:
    origin: ProjectedPoint
    cell_size: float
    n_cols: int
    n_rows: int
    mask: np.ndarray | None = None  # row-major inclusion flags, length n_cols * n_rows

    def __post_init__(self):
        if not self.cell_size > 0:
            raise DataError("cell_size must be positive")
        if self.n_cols < 1 or self.n_rows < 1:
            raise DataError("grid needs at least one row and one column")
        if self.mask is not None and len(self.mask) != self.n_cols * self.n_rows:
            raise DataError("mask length does not match the lattice")

    @property
    def n_lattice(self) -> int:
        return self.n_cols * self.n_rows

    @property
    def cell_ids(self) -> np.ndarray:
        ids = np.arange(self.n_lattice)
        return ids if self.mask is None else ids[np.asarray(self.mask, bool)]

    def cell_bounds(self, cell_id: int) -> tuple[float, float, float, float]:
        row, col = divmod(int(cell_id), self.n_cols)
        x0 = self.origin.x + col * self.cell_size
        y0 = self.origin.y + row * self.cell_size
        return (x0, y0, x0 + self.cell_size, y0 + self.cell_size)

    def locate(self, x, y) -> np.ndarray:
        """Cell id of each point, or -1 when outside the (masked) grid or non-finite."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        out = np.full(x.shape, -1, dtype=np.int64)
        ok = np.isfinite(x) & np.isfinite(y)
        col = np.floor((x[ok] - self.origin.x) / self.cell_size)
        row = np.floor((y[ok] - self.origin.y) / self.cell_size)
        # float division can land one cell off right at an edge; fix against the exact bounds
        for arr, org, coord in ((col, self.origin.x, x[ok]), (row, self.origin.y, y[ok])):
            lo = org + arr * self.cell_size
            arr[coord < lo] -= 1
            arr[coord >= lo + self.cell_size] += 1
        inside = (col >= 0) & (col < self.n_cols) & (row >= 0) & (row < self.n_rows)
        ids = np.where(inside, row * self.n_cols + col, -1).astype(np.int64)
        if self.mask is not None:
            keep = np.asarray(self.mask, bool)
            ids[ids >= 0] = np.where(keep[ids[ids >= 0]], ids[ids >= 0], -1)
        out[ok] = ids
        return out

    def to_dict(self) -> dict:
        return {
            "origin": [self.origin.x, self.origin.y],
            "cell_size": self.cell_size,
            "n_cols": self.n_cols,
            "n_rows": self.n_rows,
            "mask": None if self.mask is None else [int(v) for v in np.asarray(self.mask, bool)],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GridSpec":
        mask = d.get("mask")
        return cls(ProjectedPoint(*d["origin"]), float(d["cell_size"]), int(d["n_cols"]), int(d["n_rows"]),
                   None if mask is None else np.asarray(mask, bool))


@dataclass
class GridCell:
    cell_id: int
    bounds: tuple[float, float, float, float]
    crash_count: int = 0
    subtype_counts: dict[str, int] = field(default_factory=dict)

    @property
    def polygon(self) -> Polygon:
        return box(*self.bounds)


def build_grid(extent: Sequence[float], cell_size: float = 2000.0, mask=None) -> tuple[GridSpec, list[GridCell]]:
    """Tile ``extent = (xmin, ymin, xmax, ymax)`` with square cells.

    The lattice has ``ceil(width / s)`` columns and ``ceil(height / s)`` rows;
    edge cells keep their full size. With a ``mask`` geometry, only cells whose
    centroid lies in (or on the boundary of) the mask are kept.
    """
    xmin, ymin, xmax, ymax = map(float, extent)
    if not all(map(math.isfinite, (xmin, ymin, xmax, ymax))) or not (xmax > xmin and ymax > ymin):
        raise DataError(f"degenerate extent {tuple(extent)}")
    if not cell_size > 0:
        raise DataError("cell_size must be positive")
    n_cols = math.ceil((xmax - xmin) / cell_size)
    n_rows = math.ceil((ymax - ymin) / cell_size)
    keep = None
    if mask is not None:
        ids = np.arange(n_cols * n_rows)
        cx = xmin + (ids % n_cols + 0.5) * cell_size
        cy = ymin + (ids // n_cols + 0.5) * cell_size
        keep = shapely.intersects_xy(mask, cx, cy)
    spec = GridSpec(ProjectedPoint(xmin, ymin), float(cell_size), n_cols, n_rows, keep)
    cells = [GridCell(int(i), spec.cell_bounds(i)) for i in spec.cell_ids]
    return spec, cells


@dataclass
class CrashTally:
    counts: pd.DataFrame  # index cell_id; columns Y and one per category
    outside: int
    skipped: int

    @property
    def total_valid(self) -> int:
        return int(self.counts["Y"].sum()) + self.outside

    def apply_to(self, cells: Iterable[GridCell]) -> list[GridCell]:
        out = []
        for c in cells:
            row = self.counts.loc[c.cell_id]
            out.append(GridCell(c.cell_id, c.bounds, int(row["Y"]), {k: int(row[k]) for k in CATEGORIES}))
        return out


def crashes_frame(crashes) -> pd.DataFrame:
    """Normalize a list of ``CrashRecord`` or a frame with x, y, category, year."""
    if isinstance(crashes, pd.DataFrame):
        df = crashes.loc[:, ["x", "y", "category", "year"]].copy()
    else:
        crashes = list(crashes)
        df = pd.DataFrame({
            "x": [c.location.x for c in crashes],
            "y": [c.location.y for c in crashes],
            "category": [CrashCategory.parse(c.category).value for c in crashes],
            "year": [c.year for c in crashes],
        })
    df["x"] = pd.to_numeric(df["x"], errors="coerce").astype(float)
    df["y"] = pd.to_numeric(df["y"], errors="coerce").astype(float)
    df["category"] = [CrashCategory.parse(v).value for v in df["category"]]
    return df


def assign_crashes(crashes, grid: GridSpec) -> CrashTally:
    """Count crashes per cell, in total and by category.

    Records with non-finite coordinates are skipped and tallied; finite
    points outside every kept cell go to the ``outside`` bucket.
    """
    df = crashes_frame(crashes)
    finite = np.isfinite(df["x"].to_numpy()) & np.isfinite(df["y"].to_numpy())
    skipped = int((~finite).sum())
    if skipped:
        log.warning("skipped %d crash records with non-finite coordinates", skipped)
    ids = grid.locate(df["x"].to_numpy(), df["y"].to_numpy())
    hit = ids >= 0
    outside = int((finite & ~hit).sum())
    index = {int(c): k for k, c in enumerate(grid.cell_ids)}
    pos = np.array([index[int(i)] for i in ids[hit]], dtype=np.int64)
    n_cells = len(index)
    counts = {"Y": np.bincount(pos, minlength=n_cells)}
    cats = df["category"].to_numpy()[hit]
    for name in CATEGORIES:
        counts[name] = np.bincount(pos[cats == name], minlength=n_cells)
    frame = pd.DataFrame(counts, index=pd.Index(grid.cell_ids, name="cell_id")).astype(np.int64)
    return CrashTally(frame, outside, skipped)


def _check_tract(t: TractRecord, k: int):
    if not t.polygon.is_valid:
        raise DataError(f"tract {k}: invalid (self-intersecting) polygon")
    if not (t.population >= 0):
        raise DataError(f"tract {k}: population must be nonnegative")
    for name, v in t.attributes.items():
        if v is not None and np.isfinite(v) and not 0.0 <= v <= 100.0:
            raise DataError(f"tract {k}: attribute {name}={v} outside [0, 100]")


def areal_weight_tracts(tracts: Sequence[TractRecord], grid: GridSpec,
                        attributes: Sequence[str] | None = None) -> pd.DataFrame:
    """Reallocate tract percentages to cells with population-by-area weights.

    ``w(t, g) = population(t) * area(t & g) / area(t)``; a cell value is the
    ``w``-weighted mean of tract values. Cells with no weight are NaN and
    flagged in the ``socio_missing`` column. Tract-level NaN attributes drop
    that tract from that attribute only.
    """
    if attributes is None:
        attributes = sorted({a for t in tracts for a in t.attributes})
    ids = grid.cell_ids
    index = {int(c): k for k, c in enumerate(ids)}
    parts: dict[int, list[tuple[float, list[float]]]] = {}
    s, ox, oy = grid.cell_size, grid.origin.x, grid.origin.y
    for k, t in enumerate(tracts):
        area = t.polygon.area
        if not area > 0:
            warnings.warn(f"tract {k} has zero area and is excluded", stacklevel=2)
            log.warning("tract %d has zero area and is excluded", k)
            continue
        _check_tract(t, k)
        bx0, by0, bx1, by1 = t.polygon.bounds
        c0 = max(0, int(math.floor((bx0 - ox) / s)))
        c1 = min(grid.n_cols - 1, int(math.floor((bx1 - ox) / s)))
        r0 = max(0, int(math.floor((by0 - oy) / s)))
        r1 = min(grid.n_rows - 1, int(math.floor((by1 - oy) / s)))
        if c0 > c1 or r0 > r1:
            continue
        cand = [r * grid.n_cols + c for r in range(r0, r1 + 1) for c in range(c0, c1 + 1)]
        cand = [g for g in cand if g in index]
        if not cand:
            continue
        boxes = shapely.box(*np.array([grid.cell_bounds(g) for g in cand]).T)
        inter = shapely.area(shapely.intersection(boxes, t.polygon))
        vals = [np.nan if t.attributes.get(a) is None else float(t.attributes[a]) for a in attributes]
        for g, a_tg in zip(cand, inter):
            if a_tg > 0:
                parts.setdefault(g, []).append((t.population * a_tg / area, vals))

    out = np.full((len(ids), len(attributes)), np.nan)
    weight = np.zeros(len(ids))
    for g, contrib in parts.items():
        row = index[g]
        weight[row] = math.fsum(w for w, _ in contrib)
        for j in range(len(attributes)):
            pairs = [(w, v[j]) for w, v in contrib if np.isfinite(v[j])]
            den = math.fsum(w for w, _ in pairs)
            if den > 0:
                # fsum keeps the result independent of tract order
                out[row, j] = math.fsum(w * v for w, v in pairs) / den
    frame = pd.DataFrame(out, columns=list(attributes), index=pd.Index(ids, name="cell_id"))
    frame["socio_weight"] = weight
    frame["socio_missing"] = ~(weight > 0)
    return frame


def visual_entropy(proportions) -> float:
    """Shannon entropy in bits of a category-proportion vector (renormalized)."""
    p = np.asarray(proportions, dtype=np.float64)
    if p.ndim != 1:
        raise DataError("proportions must be a 1-d vector")
    return float(entropy_rows(p[None, :])[0])


def entropy_rows(P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if np.any(~np.isfinite(P)) or np.any(P < 0):
        raise DataError("proportions must be finite and nonnegative")
    tot = P.sum(axis=1)
    if np.any(tot <= 0):
        raise DataError("all-zero proportion vector has no entropy")
    Q = P / tot[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(Q > 0, Q * np.log2(np.where(Q > 0, Q, 1.0)), 0.0)
    return np.clip(-terms.sum(axis=1), 0.0, MAX_ENTROPY)


def images_frame(images) -> pd.DataFrame:
    if isinstance(images, pd.DataFrame):
        missing = [c for c in ["point_id", "x", "y", "heading", *SEG_COLUMNS] if c not in images.columns]
        if missing:
            raise DataError(f"images table lacks columns {missing}")
        df = images.loc[:, ["point_id", "x", "y", "heading", *SEG_COLUMNS]].copy()
    else:
        rows = []
        for im in images:
            if len(im.proportions) != N_SEG:
                raise DataError(f"image {im.point_id}: expected {N_SEG} proportions")
            rows.append([im.point_id, im.location.x, im.location.y, im.heading, *im.proportions])
        df = pd.DataFrame(rows, columns=["point_id", "x", "y", "heading", *SEG_COLUMNS])
    df["point_id"] = df["point_id"].astype(str)
    P = df[SEG_COLUMNS].to_numpy(dtype=np.float64)
    if np.any(~np.isfinite(P)) or np.any((P < 0) | (P > 1)):
        raise DataError("image proportions must lie in [0, 1]")
    if np.any(P.sum(axis=1) > 1 + 1e-9):
        raise DataError("image proportions sum to more than 1")
    if not np.isin(df["heading"].to_numpy(), HEADINGS).all():
        raise DataError(f"heading must be one of {HEADINGS}")
    xy = df[["x", "y"]].to_numpy(dtype=np.float64)
    if not np.isfinite(xy).all():
        raise DataError("image locations must be finite")
    return df


def aggregate_images(images, grid: GridSpec) -> pd.DataFrame:
    """Per-cell mean of each category proportion and of per-image entropy."""
    df = images_frame(images)
    P = df[SEG_COLUMNS].to_numpy(dtype=np.float64)
    H = entropy_rows(P)
    cell = grid.locate(df["x"].to_numpy(), df["y"].to_numpy())
    off = int((cell < 0).sum())
    if off:
        log.info("%d images fall outside the grid and are ignored", off)
    vals = np.column_stack([P, H])[cell >= 0]
    cell = cell[cell >= 0]
    # canonical row order so float sums do not depend on input order
    order = np.lexsort(tuple(vals[:, j] for j in range(vals.shape[1] - 1, -1, -1)) + (cell,))
    vals, cell = vals[order], cell[order]
    ids = grid.cell_ids
    out = np.full((len(ids), N_SEG + 1), np.nan)
    n_img = np.zeros(len(ids), dtype=np.int64)
    pos = np.searchsorted(ids, cell)
    if len(cell):
        starts = np.flatnonzero(np.r_[True, cell[1:] != cell[:-1]])
        sums = np.add.reduceat(vals, starts, axis=0)
        counts = np.diff(np.r_[starts, len(cell)])
        out[pos[starts]] = sums / counts[:, None]
        n_img[pos[starts]] = counts
    frame = pd.DataFrame(out, columns=[*SEG_COLUMNS, "entropy"], index=pd.Index(ids, name="cell_id"))
    frame["n_images"] = n_img
    frame["visual_missing"] = n_img == 0
    return frame


def build_grid_table(grid: GridSpec, crashes=None, tracts=None, images=None) -> pd.DataFrame:
    """Join crash counts, reallocated tract attributes and visual features per cell."""
    parts = []
    if crashes is not None:
        parts.append(assign_crashes(crashes, grid).counts)
    if tracts is not None:
        parts.append(areal_weight_tracts(tracts, grid))
    if images is not None:
        parts.append(aggregate_images(images, grid))
    table = pd.DataFrame(index=pd.Index(grid.cell_ids, name="cell_id"))
    for p in parts:
        table = table.join(p)
    return table.reset_index()


# -- file formats -----------------------------------------------------------

def read_crashes(path) -> pd.DataFrame:
    df = pd.read_csv(path)
    missing = {"x", "y", "category", "year"} - set(df.columns)
    if missing:
        raise DataError(f"{path}: missing columns {sorted(missing)}")
    return crashes_frame(df)


def read_tracts(path) -> list[TractRecord]:
    doc = json.loads(Path(path).read_text())
    out = []
    for k, feat in enumerate(doc.get("features", [])):
        props = dict(feat.get("properties") or {})
        if "population" not in props:
            raise DataError(f"{path}: feature {k} lacks population")
        pop = float(props.pop("population"))
        attrs = {a: (np.nan if v is None else float(v)) for a, v in props.items()
                 if isinstance(v, (int, float)) or v is None}
        out.append(TractRecord(shape(feat["geometry"]), pop, attrs))
    return out


def read_images(path) -> pd.DataFrame:
    return images_frame(pd.read_csv(path, dtype={"point_id": str}))


def _json_value(v):
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer, int)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        return None if not np.isfinite(v) else float(v)
    return v


def grid_geojson(grid: GridSpec, table: pd.DataFrame) -> dict:
    feats = []
    for rec in table.sort_values("cell_id").to_dict("records"):
        cid = int(rec["cell_id"])
        feats.append({
            "type": "Feature",
            "id": cid,
            "geometry": mapping(box(*grid.cell_bounds(cid))),
            "properties": {k: _json_value(v) for k, v in rec.items()},
        })
    return {"type": "FeatureCollection", "grid": grid.to_dict(), "features": feats}


def write_grid(path, grid: GridSpec, table: pd.DataFrame) -> None:
    doc = grid_geojson(grid, table)
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def read_grid(path) -> tuple[GridSpec, pd.DataFrame]:
    doc = json.loads(Path(path).read_text())
    if "grid" not in doc:
        raise DataError(f"{path}: not a grid file (no grid metadata)")
    table = pd.DataFrame([f["properties"] for f in doc["features"]])
    return GridSpec.from_dict(doc["grid"]), table
