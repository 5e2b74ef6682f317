"""
tinytgm
=======

A tiny toolkit for Transitional Grid Maps (TGMs): a recursive Bayesian filter that jointly estimates
which cells of a 2D grid are free, statically occupied or dynamically occupied, from noisy range scans.
It ships the classic occupancy grid baselines (OGM, clamped c-OGM), a scan matcher that localizes
against the static layer only, and a desk-scale lidar simulator to run everything end to end.
Requires Python 3.13+.

Example::

    world = scenario_traffic_light()
    tgm = new_map(world.geometry, prior_static=0.3, prior_dynamic=0.3)
    kernel = uniform_disk_kernel(v_max=world.v_max, dt=world.sensor.dt, resolution=world.geometry.resolution)
    ism = InverseSensorModel(prior_static=0.3, prior_dynamic=0.3)

    for frame in simulate(world, seed=7):
        tgm = step(tgm, frame.scan, frame.ego_pose_truth, kernel, ism, TGM_LIMITS)

    write_pixmap("tgm.ppm", render_map(tgm))


### Pieces Quick Overview

Grid core:
    * GridGeometry, CellBelief, TgmMap, Pose2D, Scan
    * world_to_cell(), cell_center(), new_map(), render_map(), render_occupancy(), write_pixmap()
Transition kernel:
    * uniform_disk_kernel(), TransitionKernel.from_weights(), transition_probability()
Predictor:
    * predict() (stencil form), predict_bruteforce() (per-cell reference)
Bayes filter:
    * inverse_sensor_model(), update_cell(), apply_saturation(), step(), TgmMapper
Baselines:
    * OgmMap, new_ogm(), ogm_step(), OgmMapper
Scan matcher:
    * SmoothStaticField, match(), slam_step()
Simworld:
    * WorldSpec, simulate(), scenario_traffic_light(), scenario_intersection()
    * load_world_spec() / dump_world_spec(), write_frame_log() / read_frame_log()
Harness:
    * RunConfig, run(), compare(), compare_async()
    * CLI: `python -m tinytgm run --scenario traffic-light.yaml --mapper tgm --pose truth --out out/`

### Conventions

Layers are numpy arrays of shape (height, width) indexed [iy, ix]; cells are (ix, iy) tuples.
`GridGeometry.origin` is the world position of the center of cell (0, 0).
Rasters returned by the renderers are image oriented: row 0 is the max-y row of the grid.

### Environments

* DISABLE_TINYTGM_LOGGING=1 disables internal logging.

### License

MIT.
"""

import asyncio
import csv
import json
import logging
import math
import os
import time
from contextlib import ExitStack, contextmanager
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from enum import IntEnum
from functools import cached_property
from pathlib import Path
from typing import (
    Any,
    Callable,
    Iterable,
    Iterator,
    Literal,
    Protocol,
    Sequence,
    cast,
    override,
)

import numpy as np
import numpy.typing as npt
import yaml
from scipy.special import expit, logit

try:
    import orjson
except ImportError:
    orjson = None

__all__ = (
    "BLUE",
    "BUILTIN_SCENARIOS",
    "COGM_LIMITS",
    "ORANGE",
    "CellBelief",
    "CellRegion",
    "ComparisonTable",
    "DegenerateUpdateError",
    "EmptyScanError",
    "FilterDiagnostics",
    "Frame",
    "FrameLogWriter",
    "GridGeometry",
    "InverseSensorModel",
    "MatchResult",
    "MatcherConfig",
    "MeasurementField",
    "Mapper",
    "Obstacle",
    "OgmMap",
    "OgmMapper",
    "Pose2D",
    "Prediction",
    "RayTrace",
    "Rect",
    "Result",
    "RunConfig",
    "RunMetrics",
    "SaturationLimits",
    "Scan",
    "SensorSpec",
    "SlamStep",
    "SmoothStaticField",
    "Status",
    "TGM_LIMITS",
    "TgmError",
    "TgmMap",
    "TgmMapper",
    "TgmProgrammingError",
    "TraceNode",
    "TraceRoot",
    "TransitionKernel",
    "Wall",
    "Waypoint",
    "WorldSpec",
    "apply_saturation",
    "build_mapper",
    "cast_rays",
    "cell_center",
    "compare",
    "compare_async",
    "dump_world_spec",
    "inverse_sensor_model",
    "load_world_spec",
    "match",
    "new_map",
    "new_ogm",
    "normalize_angle",
    "ogm_step",
    "predict",
    "predict_bruteforce",
    "predict_pose",
    "rasterize_footprints",
    "rasterize_static",
    "read_frame_log",
    "render_map",
    "render_occupancy",
    "read_pixmap",
    "run",
    "score_map",
    "scenario_intersection",
    "scenario_traffic_light",
    "simulate",
    "slam_step",
    "step",
    "trace_rays",
    "transition_probability",
    "uniform_disk_kernel",
    "update_cell",
    "world_to_cell",
    "write_frame_log",
    "write_pixmap",
)


##############
# Common Types
##############

type JSON = dict[str, Any]
type Cell = tuple[int, int]
type FloatArray = npt.NDArray[np.float64]
type IntArray = npt.NDArray[np.int64]
type BoolArray = npt.NDArray[np.bool_]
type Raster = npt.NDArray[np.uint8]

# Tolerance of the per-cell simplex constraint p_static + p_dynamic <= 1.
SIMPLEX_TOLERANCE = 1e-9


class TgmError(Exception): ...


class TgmProgrammingError(TgmError): ...


class DegenerateUpdateError(TgmError): ...


class EmptyScanError(TgmError): ...


class Status(IntEnum):
    """Run outcome status."""

    OK = 0
    FAIL = 1

    def __str__(self) -> str:
        return "OK" if self == Status.OK else "FAIL"


@dataclass
class Result:
    """Run outcome: a status plus whatever data was produced (possibly partial)."""

    status: Status
    data: Any = None

    @classmethod
    def OK(cls, data: Any = None) -> "Result":
        return Result(Status.OK, data)

    @classmethod
    def FAIL(cls, data: Any = None) -> "Result":
        return Result(Status.FAIL, data)

    def is_ok(self) -> bool:
        return self.status == Status.OK

    def json(self) -> JSON:
        data = self.data.json() if hasattr(self.data, "json") else self.data
        return {"status": str(self.status), "data": data}

    def __repr__(self) -> str:
        return f"{self.status}({self.data!r})"


##############
# Grid core
##############


@dataclass(frozen=True)
class GridGeometry:
    """Regular 2D grid; `origin` is the world position (meters) of the center of cell (0, 0)."""

    origin: tuple[float, float]
    resolution: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not self.resolution > 0:
            raise TgmProgrammingError(f"GridGeometry: resolution must be > 0, got {self.resolution}")
        if self.width < 1 or self.height < 1:
            raise TgmProgrammingError(f"GridGeometry: width/height must be >= 1, got {self.width}x{self.height}")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "resolution", float(self.resolution))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def from_extent(cls, xmin: float, ymin: float, xmax: float, ymax: float, resolution: float) -> "GridGeometry":
        """Smallest grid whose cells cover the rectangle, lower-left cell corner at (xmin, ymin)."""
        width = max(1, int(math.ceil((xmax - xmin) / resolution - 1e-9)))
        height = max(1, int(math.ceil((ymax - ymin) / resolution - 1e-9)))
        return cls((xmin + resolution / 2, ymin + resolution / 2), resolution, width, height)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """World extent (xmin, ymin, xmax, ymax) covered by the cells."""
        half = self.resolution / 2
        ox, oy = self.origin
        return (ox - half, oy - half, ox - half + self.width * self.resolution, oy - half + self.height * self.resolution)

    def contains(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def to_grid(self, xy: npt.ArrayLike) -> FloatArray:
        """Continuous grid coordinates: cell i covers [i, i + 1) along each axis."""
        return (np.asarray(xy, dtype=np.float64) - np.asarray(self.origin)) / self.resolution + 0.5

    def json(self) -> JSON:
        return {
            "origin": list(self.origin),
            "resolution": self.resolution,
            "width": self.width,
            "height": self.height,
        }


def world_to_cell(geom: GridGeometry, point: Sequence[float]) -> Cell | None:
    """Returns the cell whose square contains the point, None when outside the grid."""
    gx, gy = geom.to_grid((point[0], point[1]))
    ix, iy = math.floor(gx), math.floor(gy)
    if geom.contains((ix, iy)):
        return (ix, iy)
    return None


def cell_center(geom: GridGeometry, cell: Cell) -> tuple[float, float]:
    return (geom.origin[0] + cell[0] * geom.resolution, geom.origin[1] + cell[1] * geom.resolution)


@dataclass(frozen=True)
class CellBelief:
    """Per-cell posterior over (static, dynamic, free); p_free is derived."""

    p_static: float
    p_dynamic: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "p_static", float(self.p_static))
        object.__setattr__(self, "p_dynamic", float(self.p_dynamic))
        if self.p_static < -1e-12 or self.p_dynamic < -1e-12:
            raise TgmProgrammingError(f"CellBelief: negative probability in {self}")
        if self.p_static + self.p_dynamic > 1 + SIMPLEX_TOLERANCE:
            raise TgmProgrammingError(f"CellBelief: p_static + p_dynamic > 1 in {self}")

    @property
    def p_free(self) -> float:
        return max(0.0, 1.0 - self.p_static - self.p_dynamic)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.p_static, self.p_dynamic, self.p_free)


def _check_priors(prior_static: float, prior_dynamic: float) -> None:
    if not (0.0 <= prior_static <= 1.0 and 0.0 <= prior_dynamic <= 1.0):
        raise TgmProgrammingError(f"priors must be within [0, 1], got ({prior_static}, {prior_dynamic})")
    if prior_static + prior_dynamic > 1.0 + 1e-12:
        raise TgmProgrammingError(f"priors violate the simplex: {prior_static} + {prior_dynamic} > 1")


@dataclass(eq=False)
class TgmMap:
    """Two co-registered layers holding p_static and p_dynamic for every cell."""

    geometry: GridGeometry
    static_layer: FloatArray
    dynamic_layer: FloatArray
    priors: tuple[float, float]

    def __post_init__(self) -> None:
        if self.static_layer.shape != self.geometry.shape or self.dynamic_layer.shape != self.geometry.shape:
            raise TgmProgrammingError(
                f"TgmMap: layer shapes {self.static_layer.shape}/{self.dynamic_layer.shape} "
                f"do not match geometry {self.geometry.shape}"
            )
        _check_priors(*self.priors)

    @property
    def prior_static(self) -> float:
        return self.priors[0]

    @property
    def prior_dynamic(self) -> float:
        return self.priors[1]

    def prior_belief(self) -> CellBelief:
        return CellBelief(*self.priors)

    def belief(self, cell: Cell) -> CellBelief:
        ix, iy = cell
        return CellBelief(self.static_layer[iy, ix], self.dynamic_layer[iy, ix])

    def free_layer(self) -> FloatArray:
        return np.clip(1.0 - self.static_layer - self.dynamic_layer, 0.0, 1.0)

    def copy(self) -> "TgmMap":
        return TgmMap(self.geometry, self.static_layer.copy(), self.dynamic_layer.copy(), self.priors)

    def is_valid(self) -> bool:
        s, d = self.static_layer, self.dynamic_layer
        return bool(np.all(s >= -1e-12) and np.all(d >= -1e-12) and np.all(s + d <= 1 + SIMPLEX_TOLERANCE))


def new_map(geom: GridGeometry, prior_static: float, prior_dynamic: float) -> TgmMap:
    _check_priors(prior_static, prior_dynamic)
    return TgmMap(
        geom,
        np.full(geom.shape, float(prior_static)),
        np.full(geom.shape, float(prior_dynamic)),
        (float(prior_static), float(prior_dynamic)),
    )


def normalize_angle(theta: float) -> float:
    """Wraps an angle into (-pi, pi]."""
    wrapped = math.remainder(theta, 2 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2 * math.pi
    return wrapped


@dataclass(frozen=True)
class Pose2D:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    def compose(self, other: "Pose2D") -> "Pose2D":
        """self (+) other: `other` expressed in this pose's frame, mapped to the world."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2D(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    def inverse(self) -> "Pose2D":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2D(-c * self.x - s * self.y, s * self.x - c * self.y, -self.theta)

    def transform_points(self, points: npt.ArrayLike) -> FloatArray:
        """Maps (K, 2) sensor-frame points into the world frame."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        c, s = math.cos(self.theta), math.sin(self.theta)
        out = np.empty_like(pts)
        out[:, 0] = self.x + c * pts[:, 0] - s * pts[:, 1]
        out[:, 1] = self.y + s * pts[:, 0] + c * pts[:, 1]
        return out

    def as_array(self) -> FloatArray:
        return np.array([self.x, self.y, self.theta])


@dataclass(frozen=True, eq=False)
class Scan:
    """Range/bearing returns in the sensor frame; flagged beams saw nothing up to max_range."""

    bearings: FloatArray
    ranges: FloatArray
    max_range_flags: BoolArray
    max_range: float

    def __post_init__(self) -> None:
        bearings = np.array(self.bearings, dtype=np.float64).reshape(-1)
        ranges = np.array(self.ranges, dtype=np.float64).reshape(-1)
        flags = np.array(self.max_range_flags, dtype=np.bool_).reshape(-1)
        if not (len(bearings) == len(ranges) == len(flags)):
            raise TgmProgrammingError("Scan: bearings, ranges and flags must have the same length")
        if not self.max_range > 0:
            raise TgmProgrammingError(f"Scan: max_range must be > 0, got {self.max_range}")
        if len(bearings) > 1 and not np.all(np.diff(bearings) > 0):
            raise TgmProgrammingError("Scan: bearings must be strictly increasing")
        hits = ranges[~flags]
        if np.any(hits <= 0) or np.any(hits > self.max_range):
            raise TgmProgrammingError("Scan: hit ranges must lie in (0, max_range]")
        for array in (bearings, ranges, flags):
            array.setflags(write=False)
        object.__setattr__(self, "bearings", bearings)
        object.__setattr__(self, "ranges", ranges)
        object.__setattr__(self, "max_range_flags", flags)
        object.__setattr__(self, "max_range", float(self.max_range))

    @classmethod
    def from_ranges(cls, bearings: npt.ArrayLike, ranges: npt.ArrayLike, max_range: float) -> "Scan":
        """Beams at or beyond max_range become max-range beams."""
        r = np.asarray(ranges, dtype=np.float64)
        flags = r >= max_range
        return cls(np.asarray(bearings, dtype=np.float64), np.minimum(r, max_range), flags, max_range)

    @classmethod
    def empty(cls, max_range: float) -> "Scan":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.bool_), max_range)

    def __len__(self) -> int:
        return len(self.bearings)

    @property
    def beams(self) -> list[tuple[float, float, bool]]:
        return [(float(b), float(r), bool(f)) for b, r, f in zip(self.bearings, self.ranges, self.max_range_flags)]

    @property
    def hit_count(self) -> int:
        return int(np.count_nonzero(~self.max_range_flags))

    def hit_points(self) -> FloatArray:
        """(K, 2) sensor-frame endpoints of the non-max-range beams."""
        hits = ~self.max_range_flags
        r, b = self.ranges[hits], self.bearings[hits]
        return np.stack([r * np.cos(b), r * np.sin(b)], axis=1)


# Complementary per channel (BLUE + ORANGE = white), so equal static and dynamic beliefs render gray.
BLUE = (0, 127, 255)
ORANGE = (255, 128, 0)


def _round_half_up(values: FloatArray) -> Raster:
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def _image_rows(layer: npt.NDArray[Any]) -> npt.NDArray[Any]:
    # max-y row first
    return layer[::-1]


def render_map(tgm: TgmMap) -> Raster:
    """Colors each cell as white - p_s * (white - BLUE) - p_d * (white - ORANGE)."""
    s = _image_rows(tgm.static_layer)
    d = _image_rows(tgm.dynamic_layer)
    total, diff = s + d, s - d
    rgb = np.empty(s.shape + (3,), dtype=np.uint8)
    for channel in range(3):
        a = 255 - BLUE[channel]
        b = 255 - ORANGE[channel]
        # a + b == 255 on every channel; with s == d the diff term vanishes and R == G == B bit for bit.
        value = 255.0 - ((a + b) / 2) * total - ((a - b) / 2) * diff
        rgb[..., channel] = _round_half_up(value)
    return rgb


def render_occupancy(probability: FloatArray) -> Raster:
    """Gray scale: probability 0 is white, 1 is black."""
    gray = _round_half_up(255.0 * (1.0 - _image_rows(probability)))
    return np.repeat(gray[..., None], 3, axis=2)


def write_pixmap(path: str | Path, rgb: Raster) -> Path:
    """Writes a binary P6 portable pixmap."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise TgmProgrammingError(f"write_pixmap: expected (H, W, 3) uint8 raster, got {rgb.shape} {rgb.dtype}")
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    height, width = rgb.shape[:2]
    with open(target, "wb") as f:
        f.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(rgb).tobytes())
    return target


def read_pixmap(path: str | Path) -> Raster:
    data = Path(path).read_bytes()
    magic, dims, maxval, body = data.split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise TgmProgrammingError(f"read_pixmap: unsupported pixmap header in {path}")
    width, height = (int(v) for v in dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)


@dataclass(frozen=True)
class CellRegion:
    """Half-open cell rectangle [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    @classmethod
    def full(cls, geom: GridGeometry) -> "CellRegion":
        return cls(0, 0, geom.width, geom.height)

    @classmethod
    def around(cls, geom: GridGeometry, x: float, y: float, radius: float) -> "CellRegion":
        """Cells within a square of half-size `radius` meters around (x, y), clipped to the grid."""
        gx0, gy0 = geom.to_grid((x - radius, y - radius))
        gx1, gy1 = geom.to_grid((x + radius, y + radius))
        return cls(
            max(0, math.floor(gx0)),
            max(0, math.floor(gy0)),
            min(geom.width, math.floor(gx1) + 1),
            min(geom.height, math.floor(gy1) + 1),
        )

    def is_within(self, geom: GridGeometry) -> bool:
        return 0 <= self.x0 <= self.x1 <= geom.width and 0 <= self.y0 <= self.y1 <= geom.height

    @property
    def is_empty(self) -> bool:
        return self.x1 <= self.x0 or self.y1 <= self.y0

    def slices(self) -> tuple[slice, slice]:
        return (slice(self.y0, self.y1), slice(self.x0, self.x1))


##############
# Transition kernel
##############


def _row_runs(row: FloatArray) -> list[tuple[int, int, float]]:
    """Splits a kernel row into maximal runs of equal non-zero weight: (first column, last column, weight)."""
    runs: list[tuple[int, int, float]] = []
    start = None
    for col, weight in enumerate(row.tolist()):
        if start is not None and weight != row[start]:
            runs.append((start, col - 1, float(row[start])))
            start = None
        if start is None and weight != 0.0:
            start = col
    if start is not None:
        runs.append((start, len(row) - 1, float(row[start])))
    return runs


@dataclass(frozen=True, eq=False)
class TransitionKernel:
    """
    Translation invariant one-step motion distribution of a dynamic cell.

    `weights[dy + r, dx + r]` is T[dx, dy], the probability that dynamic occupancy moves by (dx, dy) cells.
    The center weight is tau0, the probability to stay.
    """

    radius_cells: int
    weights: FloatArray

    def __post_init__(self) -> None:
        r = self.radius_cells
        weights = np.array(self.weights, dtype=np.float64)
        if r < 0 or weights.shape != (2 * r + 1, 2 * r + 1):
            raise TgmProgrammingError(f"TransitionKernel: weights shape {weights.shape} does not match radius {r}")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise TgmProgrammingError("TransitionKernel: weights must be finite and non-negative")
        if abs(float(weights.sum()) - 1.0) > 1e-12:
            raise TgmProgrammingError(f"TransitionKernel: weights sum to {weights.sum()!r}, expected 1")
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_weights(cls, weights: npt.ArrayLike) -> "TransitionKernel":
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] % 2 != 1:
            raise TgmProgrammingError(f"TransitionKernel: weights must be square with odd size, got {w.shape}")
        return cls(w.shape[0] // 2, w)

    @property
    def tau0(self) -> float:
        r = self.radius_cells
        return float(self.weights[r, r])

    def weight(self, dx: int, dy: int) -> float:
        r = self.radius_cells
        if abs(dx) > r or abs(dy) > r:
            return 0.0
        return float(self.weights[dy + r, dx + r])

    @cached_property
    def off_center(self) -> FloatArray:
        """K: the kernel with its center weight removed."""
        r = self.radius_cells
        k = self.weights.copy()
        k[r, r] = 0.0
        return k

    @cached_property
    def off_center_flipped(self) -> FloatArray:
        """K'[d] = K[-d]."""
        return self.off_center[::-1, ::-1].copy()


def uniform_disk_kernel(v_max: float, dt: float, resolution: float) -> TransitionKernel:
    """Uniform over every offset reachable within v_max * dt, including staying."""
    if v_max < 0 or not dt > 0 or not resolution > 0:
        raise TgmProgrammingError(f"uniform_disk_kernel: invalid v_max={v_max}, dt={dt}, resolution={resolution}")
    reach = v_max * dt / resolution
    r = int(math.floor(reach + 1e-9))
    offsets = np.arange(-r, r + 1)
    dx, dy = np.meshgrid(offsets, offsets)
    inside = dx * dx + dy * dy <= reach * reach + 1e-9
    weights = inside / np.count_nonzero(inside)
    return TransitionKernel(r, weights)


def _static_at(static_layer: FloatArray, cell: Cell) -> float:
    ix, iy = cell
    height, width = static_layer.shape
    if 0 <= ix < width and 0 <= iy < height:
        return float(static_layer[iy, ix])
    return 0.0


def transition_probability(kernel: TransitionKernel, static_layer: FloatArray, j: Cell, i: Cell) -> float:
    """
    Probability that dynamic occupancy at cell j is at cell i one step later, given the static layer.

    Occupancy may not enter or leave static cells; mass that cannot move away stays where it is.
    Cells outside the grid count as free of static occupancy.
    """
    ms_i = _static_at(static_layer, i)
    if j != i:
        tau = kernel.weight(i[0] - j[0], i[1] - j[1])
        return tau * (1.0 - ms_i) * (1.0 - _static_at(static_layer, j))
    r = kernel.radius_cells
    blocked = kernel.tau0
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dx == 0 and dy == 0:
                continue
            tau = kernel.weight(dx, dy)
            if tau > 0:
                blocked += tau * _static_at(static_layer, (i[0] + dx, i[1] + dy))
    return ms_i + (1.0 - ms_i) * blocked


##############
# Ray traversal
##############

# Segments shorter than this (as a fraction of the ray) are crossing duplicates.
_MIN_SEGMENT = 1e-12
_ENDPOINT_NUDGE = 1e-6


@dataclass(frozen=True, eq=False)
class RayTrace:
    """
    Every cell visited by a bundle of rays sharing a start point, in traversal order per ray.
    Arrays are parallel; `t_enter` is the fraction of the ray at which the cell is entered.
    """

    beam: IntArray
    ix: IntArray
    iy: IntArray
    t_enter: FloatArray
    last: BoolArray
    inside: BoolArray

    def __len__(self) -> int:
        return len(self.beam)

    def flat_index(self, geom: GridGeometry) -> IntArray:
        return self.iy * geom.width + self.ix


def trace_rays(geom: GridGeometry, start: Sequence[float], ends: npt.ArrayLike) -> RayTrace:
    """Grid traversal of the segments start -> ends[k], vectorized over rays."""
    g0 = geom.to_grid((start[0], start[1]))
    g1 = geom.to_grid(np.asarray(ends, dtype=np.float64).reshape(-1, 2))
    count = len(g1)
    if count == 0:
        empty_i = np.zeros(0, dtype=np.int64)
        empty_b = np.zeros(0, dtype=np.bool_)
        return RayTrace(empty_i, empty_i, empty_i, np.zeros(0), empty_b, empty_b)

    delta = g1 - g0
    size = np.array([geom.width, geom.height], dtype=np.float64)
    span = np.abs(delta)
    if np.all((g0 >= 0) & (g0 < size)):
        # Past the grid exit every cell is outside anyway; boundaries there need not be enumerated.
        with np.errstate(divide="ignore", invalid="ignore"):
            exit_t = np.where(delta > 0, (size - g0) / delta, np.where(delta < 0, -g0 / delta, np.inf))
        span = span * np.clip(exit_t.min(axis=1), 0.0, 1.0)[:, None]
    n = int(np.ceil(span.max())) + 2
    k = np.arange(1, n + 1, dtype=np.float64)
    crossings = []
    for axis in (0, 1):
        d = delta[:, axis : axis + 1]
        boundaries = np.where(d > 0, np.floor(g0[axis]) + k, np.ceil(g0[axis]) - k)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (boundaries - g0[axis]) / d
        crossings.append(np.where((d != 0) & (t > 0) & (t < 1), t, 1.0))
    events = np.sort(np.concatenate(crossings, axis=1), axis=1)
    edges = np.concatenate([np.zeros((count, 1)), events, np.ones((count, 1))], axis=1)
    lo, hi = edges[:, :-1], edges[:, 1:]
    valid = hi - lo > _MIN_SEGMENT
    mid = 0.5 * (lo + hi)
    ix = np.floor(g0[0] + mid * delta[:, 0:1]).astype(np.int64)
    iy = np.floor(g0[1] + mid * delta[:, 1:2]).astype(np.int64)

    last_column = valid.shape[1] - 1 - np.argmax(valid[:, ::-1], axis=1)
    last = np.zeros_like(valid)
    last[np.arange(count), last_column] = True
    beam = np.broadcast_to(np.arange(count, dtype=np.int64)[:, None], valid.shape)

    ix, iy = ix[valid], iy[valid]
    inside = (ix >= 0) & (ix < geom.width) & (iy >= 0) & (iy < geom.height)
    return RayTrace(beam[valid], ix, iy, lo[valid], last[valid], inside)


##############
# Predictor
##############


@dataclass(eq=False)
class Prediction:
    """Predicted layers; the clip counters record how much dynamic mass hit the simplex ceiling."""

    static_layer: FloatArray
    dynamic_layer: FloatArray
    clipped_cells: int = 0
    clipped_mass: float = 0.0


def _stencil(layer: FloatArray, kernel: FloatArray) -> FloatArray:
    """
    Zero padded convolution out[i] = sum_j layer[j] * kernel[i - j] with kernel indexed [dy + r, dx + r].

    Each kernel row is split into runs of equal weight; a run is one horizontal box sum read off
    row prefix sums, so a uniform disk costs one pass per kernel row.
    """
    r = kernel.shape[0] // 2
    height, width = layer.shape
    padded = np.zeros((height + 2 * r, width + 2 * r + 1))
    padded[r : r + height, r + 1 : r + 1 + width] = layer
    prefix = np.cumsum(padded, axis=1)
    out = np.zeros((height, width))
    for row_index in range(2 * r + 1):
        dy = row_index - r
        rows = slice(r - dy, r - dy + height)
        for first, last, weight in _row_runs(kernel[row_index]):
            dx0, dx1 = first - r, last - r
            upper = prefix[rows, r + 1 - dx0 : r + 1 - dx0 + width]
            lower = prefix[rows, r - dx1 : r - dx1 + width]
            out += weight * (upper - lower)
    return out


def predict(tgm: TgmMap, kernel: TransitionKernel, region: CellRegion | None = None) -> Prediction:
    """
    One prediction step:

        pd' = Md * (tau0 + Ms ** K') + (1 - Ms) * (Md ** K)

    The static layer is carried over unchanged. When `region` is given only its cells are predicted
    (reading up to one kernel radius around it); every other cell keeps its dynamic value.
    """
    geom = tgm.geometry
    r = kernel.radius_cells
    if r > min(geom.width, geom.height):
        raise TgmProgrammingError(f"predict: kernel radius {r} exceeds the grid {geom.width}x{geom.height}")
    if region is None:
        region = CellRegion.full(geom)
    elif not region.is_within(geom):
        raise TgmProgrammingError(f"predict: region {region} lies outside the grid")

    static = tgm.static_layer
    dynamic = tgm.dynamic_layer.copy()
    if region.is_empty:
        return Prediction(static.copy(), dynamic)

    wx0, wy0 = max(region.x0 - r, 0), max(region.y0 - r, 0)
    wx1, wy1 = min(region.x1 + r, geom.width), min(region.y1 + r, geom.height)
    s_win = static[wy0:wy1, wx0:wx1]
    d_win = tgm.dynamic_layer[wy0:wy1, wx0:wx1]
    blocked = _stencil(s_win, kernel.off_center_flipped)
    inflow = _stencil(d_win, kernel.off_center)
    predicted = d_win * (kernel.tau0 + blocked) + (1.0 - s_win) * inflow

    inner = (slice(region.y0 - wy0, region.y1 - wy0), slice(region.x0 - wx0, region.x1 - wx0))
    values = predicted[inner]
    ceiling = 1.0 - static[region.slices()]
    excess = values - ceiling
    over = excess > 0
    dynamic[region.slices()] = np.maximum(np.minimum(values, ceiling), 0.0)
    return Prediction(
        static.copy(),
        dynamic,
        clipped_cells=int(np.count_nonzero(over)),
        clipped_mass=float(excess[over].sum()),
    )


def predict_bruteforce(tgm: TgmMap, kernel: TransitionKernel) -> Prediction:
    """Per-cell reference of `predict` summing the transition model cell by cell."""
    height, width = tgm.geometry.shape
    ms = tgm.static_layer.tolist()
    md = tgm.dynamic_layer.tolist()
    r = kernel.radius_cells
    taps = [
        (dx, dy, kernel.weight(dx, dy))
        for dy in range(-r, r + 1)
        for dx in range(-r, r + 1)
        if (dx, dy) != (0, 0) and kernel.weight(dx, dy) > 0
    ]
    tau0 = kernel.tau0
    out = [[0.0] * width for _ in range(height)]
    clipped_cells, clipped_mass = 0, 0.0
    for iy in range(height):
        for ix in range(width):
            stay, inflow = tau0, 0.0
            for dx, dy, tau in taps:
                jx, jy = ix + dx, iy + dy
                if 0 <= jx < width and 0 <= jy < height:
                    stay += tau * ms[jy][jx]
                kx, ky = ix - dx, iy - dy
                if 0 <= kx < width and 0 <= ky < height:
                    inflow += tau * md[ky][kx]
            value = md[iy][ix] * stay + (1.0 - ms[iy][ix]) * inflow
            ceiling = 1.0 - ms[iy][ix]
            if value > ceiling:
                clipped_cells += 1
                clipped_mass += value - ceiling
                value = ceiling
            out[iy][ix] = max(value, 0.0)
    return Prediction(tgm.static_layer.copy(), np.array(out, dtype=np.float64), clipped_cells, clipped_mass)


##############
# Bayes filter
##############


@dataclass(frozen=True)
class InverseSensorModel:
    """
    Per-scan evidence for the cells a ray touches.

    An endpoint cell is occupied with probability `p_hit_occupied`; a traversed cell is free with
    probability `p_miss_free`. Occupied mass is split between static and dynamic in the ratio of the
    priors, so a single scan never decides between the two.
    """

    prior_static: float = 0.3
    prior_dynamic: float = 0.3
    p_hit_occupied: float = 0.8
    p_miss_free: float = 0.7

    def __post_init__(self) -> None:
        _check_priors(self.prior_static, self.prior_dynamic)
        for name in ("p_hit_occupied", "p_miss_free"):
            value = getattr(self, name)
            if not 0.5 < value <= 1.0:
                raise TgmProgrammingError(f"InverseSensorModel: {name} must be in (0.5, 1], got {value}")

    @classmethod
    def for_map(cls, tgm: TgmMap, p_hit_occupied: float = 0.8, p_miss_free: float = 0.7) -> "InverseSensorModel":
        return cls(tgm.prior_static, tgm.prior_dynamic, p_hit_occupied, p_miss_free)

    @property
    def static_share(self) -> float:
        total = self.prior_static + self.prior_dynamic
        return 0.5 if total == 0 else self.prior_static / total

    def _split(self, occupied: float) -> CellBelief:
        share = self.static_share
        return CellBelief(occupied * share, occupied * (1.0 - share))

    def occupied_belief(self) -> CellBelief:
        return self._split(self.p_hit_occupied)

    def free_belief(self) -> CellBelief:
        return self._split(1.0 - self.p_miss_free)


@dataclass(frozen=True, eq=False)
class MeasurementField:
    """Sparse per-scan measurement: flat cell indices with occupied or free evidence, disjoint."""

    geometry: GridGeometry
    hit_cells: IntArray
    free_cells: IntArray
    occupied: CellBelief
    free: CellBelief

    def __len__(self) -> int:
        return len(self.hit_cells) + len(self.free_cells)

    def _unflatten(self, flat: int) -> Cell:
        return (flat % self.geometry.width, flat // self.geometry.width)

    def get(self, cell: Cell) -> CellBelief | None:
        flat = cell[1] * self.geometry.width + cell[0]
        if np.any(self.hit_cells == flat):
            return self.occupied
        if np.any(self.free_cells == flat):
            return self.free
        return None

    def items(self) -> Iterator[tuple[Cell, CellBelief]]:
        for flat in self.hit_cells.tolist():
            yield self._unflatten(flat), self.occupied
        for flat in self.free_cells.tolist():
            yield self._unflatten(flat), self.free

    def observed_cells(self) -> IntArray:
        return np.concatenate([self.hit_cells, self.free_cells])


def _scan_cells(geom: GridGeometry, scan: Scan, pose: Pose2D) -> tuple[IntArray, IntArray]:
    """Flat indices of endpoint cells and of traversed cells; an endpoint wins over a traversal."""
    if world_to_cell(geom, (pose.x, pose.y)) is None:
        raise TgmProgrammingError(f"sensor pose {pose} lies outside the grid")
    if len(scan) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    angles = pose.theta + scan.bearings
    # A return lying exactly on a cell boundary belongs to the cell beyond it.
    reach = np.where(scan.max_range_flags, scan.max_range, scan.ranges + _ENDPOINT_NUDGE * geom.resolution)
    ends = np.stack([pose.x + reach * np.cos(angles), pose.y + reach * np.sin(angles)], axis=1)
    trace = trace_rays(geom, (pose.x, pose.y), ends)
    endpoint = trace.last & ~scan.max_range_flags[trace.beam]
    flat = trace.flat_index(geom)
    hits = np.unique(flat[endpoint & trace.inside])
    traversed = np.unique(flat[~endpoint & trace.inside])
    return hits, np.setdiff1d(traversed, hits, assume_unique=True)


def inverse_sensor_model(scan: Scan, pose: Pose2D, geom: GridGeometry, ism: InverseSensorModel) -> MeasurementField:
    hits, free = _scan_cells(geom, scan, pose)
    return MeasurementField(geom, hits, free, ism.occupied_belief(), ism.free_belief())


@dataclass(frozen=True)
class SaturationLimits:
    """Per-component clamps applied after every update; the defaults leave beliefs untouched."""

    static_range: tuple[float, float] = (0.0, 1.0)
    dynamic_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self) -> None:
        for lo, hi in (self.static_range, self.dynamic_range):
            if not 0.0 <= lo <= hi <= 1.0:
                raise TgmProgrammingError(f"SaturationLimits: invalid range ({lo}, {hi})")
        if self.static_range[0] + self.dynamic_range[0] > 1.0:
            raise TgmProgrammingError("SaturationLimits: lower bounds must sum to at most 1")

    def json(self) -> JSON:
        return {"static": list(self.static_range), "dynamic": list(self.dynamic_range)}


TGM_LIMITS = SaturationLimits(static_range=(0.0, 0.95), dynamic_range=(0.05, 1.0))
COGM_LIMITS = (0.05, 0.95)


def _saturate(s: FloatArray, d: FloatArray, limits: SaturationLimits) -> tuple[FloatArray, FloatArray]:
    s_c = np.clip(s, *limits.static_range)
    d_c = np.clip(d, *limits.dynamic_range)
    excess = s_c + d_c - 1.0
    over = excess > 0
    if not np.any(over):
        return s_c, d_c
    # Only components the clamp left alone give up mass, proportionally to their size.
    s_free = over & (s_c == s)
    d_free = over & (d_c == d)
    movable = np.where(s_free, s_c, 0.0) + np.where(d_free, d_c, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(movable > 0, excess / movable, 0.0)
    s_c = np.where(s_free, s_c * (1.0 - factor), s_c)
    d_c = np.where(d_free, d_c * (1.0 - factor), d_c)
    return s_c, d_c


def apply_saturation(belief: CellBelief, limits: SaturationLimits) -> CellBelief:
    s, d = _saturate(np.array([belief.p_static]), np.array([belief.p_dynamic]), limits)
    return CellBelief(float(s[0]), float(min(d[0], 1.0 - s[0])))


def update_cell(
    prediction: CellBelief,
    measurement: CellBelief,
    prior: CellBelief,
    limits: SaturationLimits | None = TGM_LIMITS,
) -> CellBelief:
    """
    Normalized product measurement * prediction / prior over (static, dynamic, free), saturated to
    `limits`. Pass limits=None for the raw product.
    """
    prior_t = prior.as_tuple()
    if min(prior_t) <= 0:
        raise TgmProgrammingError(f"update_cell: every prior component must be > 0, got {prior_t}")
    terms = [m * p / q for m, p, q in zip(measurement.as_tuple(), prediction.as_tuple(), prior_t)]
    total = sum(terms)
    if not total > 0:
        raise DegenerateUpdateError(f"update_cell: zero normalizer for {prediction} x {measurement}")
    belief = CellBelief(terms[0] / total, min(terms[1] / total, 1.0 - terms[0] / total))
    return apply_saturation(belief, limits) if limits is not None else belief


def _update_cells(
    pred_s: FloatArray,
    pred_d: FloatArray,
    measurement: CellBelief,
    prior: CellBelief,
    limits: SaturationLimits | None,
) -> tuple[FloatArray, FloatArray, int]:
    """Vectorized `update_cell`; degenerate cells fall back to the prior and are counted."""
    ms, md, mf = measurement.as_tuple()
    qs, qd, qf = prior.as_tuple()
    pred_f = np.clip(1.0 - pred_s - pred_d, 0.0, 1.0)
    s = ms * pred_s / qs
    d = md * pred_d / qd
    f = mf * pred_f / qf
    total = s + d + f
    degenerate = ~(total > 0)
    safe = np.where(degenerate, 1.0, total)
    s = np.where(degenerate, qs, s / safe)
    d = np.where(degenerate, qd, d / safe)
    if limits is not None:
        s, d = _saturate(s, d, limits)
    return s, np.minimum(d, 1.0 - s), int(np.count_nonzero(degenerate))


@dataclass
class FilterDiagnostics:
    """Running counters of the numerical safety nets of the filter."""

    steps: int = 0
    degenerate_updates: int = 0
    clipped_cells: int = 0
    clipped_mass: float = 0.0

    def json(self) -> JSON:
        return {
            "steps": self.steps,
            "degenerate_updates": self.degenerate_updates,
            "clipped_cells": self.clipped_cells,
            "clipped_mass": self.clipped_mass,
        }


def _apply_measurement(
    static: FloatArray,
    dynamic: FloatArray,
    measurement: MeasurementField,
    prior: CellBelief,
    limits: SaturationLimits | None,
) -> int:
    degenerate = 0
    for cells, belief in ((measurement.free_cells, measurement.free), (measurement.hit_cells, measurement.occupied)):
        if cells.size == 0:
            continue
        new_s, new_d, count = _update_cells(static.flat[cells], dynamic.flat[cells], belief, prior, limits)
        static.flat[cells] = new_s
        dynamic.flat[cells] = new_d
        degenerate += count
    return degenerate


def step(
    tgm: TgmMap,
    scan: Scan,
    pose: Pose2D,
    kernel: TransitionKernel,
    ism: InverseSensorModel,
    limits: SaturationLimits | None = TGM_LIMITS,
    *,
    region: CellRegion | None = None,
    diagnostics: FilterDiagnostics | None = None,
) -> TgmMap:
    """Predict, then fold in the scan's evidence cell by cell. Unobserved cells keep their prediction."""
    prediction = predict(tgm, kernel, region)
    measurement = inverse_sensor_model(scan, pose, tgm.geometry, ism)
    static, dynamic = prediction.static_layer, prediction.dynamic_layer
    degenerate = _apply_measurement(static, dynamic, measurement, tgm.prior_belief(), limits)
    if diagnostics is not None:
        diagnostics.steps += 1
        diagnostics.degenerate_updates += degenerate
        diagnostics.clipped_cells += prediction.clipped_cells
        diagnostics.clipped_mass += prediction.clipped_mass
    if degenerate:
        logger.warning(f"step: {degenerate} degenerate cell updates fell back to the prior")
    return TgmMap(tgm.geometry, static, dynamic, tgm.priors)


##############
# Baselines
##############

# Single-observation log-odds are kept within +-this bound so that p in {0, 1} stays finite.
_LOG_ODDS_LIMIT = 50.0


def _log_odds(p: float) -> float:
    return float(np.clip(logit(p), -_LOG_ODDS_LIMIT, _LOG_ODDS_LIMIT))


@dataclass(eq=False)
class OgmMap:
    """Single-layer occupancy grid in log-odds form; `clamp` bounds the probability after each update."""

    geometry: GridGeometry
    log_odds: FloatArray
    clamp: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.log_odds.shape != self.geometry.shape:
            raise TgmProgrammingError(f"OgmMap: layer shape {self.log_odds.shape} does not match {self.geometry.shape}")
        if self.clamp is not None and not 0.0 <= self.clamp[0] <= 0.5 <= self.clamp[1] <= 1.0:
            raise TgmProgrammingError(f"OgmMap: clamp must straddle 0.5 within [0, 1], got {self.clamp}")

    def probability(self) -> FloatArray:
        return expit(self.log_odds)


def new_ogm(geom: GridGeometry, clamp: tuple[float, float] | None = None) -> OgmMap:
    return OgmMap(geom, np.zeros(geom.shape), clamp)


def _apply_log_odds(ogm: OgmMap, hits: IntArray, free: IntArray, ism: InverseSensorModel) -> OgmMap:
    log_odds = ogm.log_odds.copy()
    log_odds.flat[free] += _log_odds(1.0 - ism.p_miss_free)
    log_odds.flat[hits] += _log_odds(ism.p_hit_occupied)
    if ogm.clamp is not None:
        np.clip(log_odds, _log_odds(ogm.clamp[0]), _log_odds(ogm.clamp[1]), out=log_odds)
    return OgmMap(ogm.geometry, log_odds, ogm.clamp)


def ogm_step(ogm: OgmMap, scan: Scan, pose: Pose2D, ism: InverseSensorModel) -> OgmMap:
    """Adds the scan's log-odds evidence; the same ray model as the TGM, collapsed to occupied vs free."""
    hits, free = _scan_cells(ogm.geometry, scan, pose)
    return _apply_log_odds(ogm, hits, free, ism)


##############
# Mappers
##############


class Mapper(Protocol):
    """A map that absorbs scans and offers an occupancy layer to localize against."""

    name: str
    geometry: GridGeometry

    def integrate(self, scan: Scan, pose: Pose2D, tracer: "TraceNode | None" = None) -> IntArray:
        """Folds a scan in at `pose`; returns the flat indices of the observed cells."""
        ...

    def match_layer(self) -> FloatArray: ...

    def occupancy_layer(self) -> FloatArray: ...

    def render(self) -> Raster: ...


class TgmMapper:
    """Stateful TGM filter; optionally only predicts the window the sensor can reach."""

    name = "tgm"

    def __init__(
        self,
        geometry: GridGeometry,
        kernel: TransitionKernel,
        ism: InverseSensorModel,
        limits: SaturationLimits | None = TGM_LIMITS,
        local_radius: float | None = None,
    ) -> None:
        self.geometry = geometry
        self.kernel = kernel
        self.ism = ism
        self.limits = limits
        self.local_radius = local_radius
        self.map = new_map(geometry, ism.prior_static, ism.prior_dynamic)
        self.diagnostics = FilterDiagnostics()

    def _region(self, pose: Pose2D) -> CellRegion | None:
        if self.local_radius is None:
            return None
        return CellRegion.around(self.geometry, pose.x, pose.y, self.local_radius)

    def integrate(self, scan: Scan, pose: Pose2D, tracer: "TraceNode | None" = None) -> IntArray:
        with _timed(tracer, "predict"):
            prediction = predict(self.map, self.kernel, self._region(pose))
        with _timed(tracer, "update"):
            measurement = inverse_sensor_model(scan, pose, self.geometry, self.ism)
            static, dynamic = prediction.static_layer, prediction.dynamic_layer
            degenerate = _apply_measurement(static, dynamic, measurement, self.map.prior_belief(), self.limits)
        self.map = TgmMap(self.geometry, static, dynamic, self.map.priors)
        self.diagnostics.steps += 1
        self.diagnostics.degenerate_updates += degenerate
        self.diagnostics.clipped_cells += prediction.clipped_cells
        self.diagnostics.clipped_mass += prediction.clipped_mass
        return measurement.observed_cells()

    def match_layer(self) -> FloatArray:
        return self.map.static_layer

    def occupancy_layer(self) -> FloatArray:
        return self.map.static_layer

    def render(self) -> Raster:
        return render_map(self.map)


class OgmMapper:
    """Stateful OGM or c-OGM (when `clamp` is set)."""

    def __init__(self, geometry: GridGeometry, ism: InverseSensorModel, clamp: tuple[float, float] | None = None):
        self.name = "ogm" if clamp is None else "cogm"
        self.geometry = geometry
        self.ism = ism
        self.map = new_ogm(geometry, clamp)
        self.diagnostics = FilterDiagnostics()

    def integrate(self, scan: Scan, pose: Pose2D, tracer: "TraceNode | None" = None) -> IntArray:
        with _timed(tracer, "update"):
            hits, free = _scan_cells(self.geometry, scan, pose)
            self.map = _apply_log_odds(self.map, hits, free, self.ism)
        self.diagnostics.steps += 1
        return np.concatenate([hits, free])

    def match_layer(self) -> FloatArray:
        return self.map.probability()

    def occupancy_layer(self) -> FloatArray:
        return self.map.probability()

    def render(self) -> Raster:
        return render_occupancy(self.map.probability())


##############
# Scan matcher
##############


@dataclass(frozen=True, eq=False)
class SmoothStaticField:
    """
    Continuous, differentiable reading of an occupancy layer: bilinear interpolation between cell
    centers, 0 beyond the grid. For a TGM only the static layer is ever handed in.
    """

    geometry: GridGeometry
    layer: FloatArray

    def __post_init__(self) -> None:
        if self.layer.shape != self.geometry.shape:
            raise TgmProgrammingError(f"SmoothStaticField: layer shape {self.layer.shape} != {self.geometry.shape}")

    @classmethod
    def from_map(cls, tgm: TgmMap) -> "SmoothStaticField":
        return cls(tgm.geometry, tgm.static_layer.copy())

    @cached_property
    def _padded(self) -> FloatArray:
        return np.pad(self.layer, 1, mode="constant", constant_values=0.0)

    def sample(self, points: npt.ArrayLike) -> tuple[FloatArray, FloatArray]:
        """Values (K,) and world-frame gradients (K, 2) at world points (K, 2)."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        res = self.geometry.resolution
        g = (pts - np.asarray(self.geometry.origin)) / res
        base = np.floor(g)
        frac = g - base
        width, height = self.geometry.width, self.geometry.height
        x0 = np.clip(base[:, 0].astype(np.int64) + 1, 0, width + 1)
        y0 = np.clip(base[:, 1].astype(np.int64) + 1, 0, height + 1)
        x1 = np.clip(base[:, 0].astype(np.int64) + 2, 0, width + 1)
        y1 = np.clip(base[:, 1].astype(np.int64) + 2, 0, height + 1)
        grid = self._padded
        m00, m10 = grid[y0, x0], grid[y0, x1]
        m01, m11 = grid[y1, x0], grid[y1, x1]
        fx, fy = frac[:, 0], frac[:, 1]
        values = (1 - fy) * ((1 - fx) * m00 + fx * m10) + fy * ((1 - fx) * m01 + fx * m11)
        gradient = np.empty_like(pts)
        gradient[:, 0] = ((1 - fy) * (m10 - m00) + fy * (m11 - m01)) / res
        gradient[:, 1] = ((1 - fx) * (m01 - m00) + fx * (m11 - m10)) / res
        return values, gradient


@dataclass(frozen=True)
class MatcherConfig:
    """Coarse search lattice (cells, radians) and Gauss-Newton stopping rules."""

    window_cells: float = 1.5
    window_step_cells: float = 0.5
    window_angle: float = 0.05
    angle_step: float = 0.025
    tolerance: float = 1e-4
    max_iterations: int = 30

    def __post_init__(self) -> None:
        if self.window_step_cells <= 0 or self.angle_step <= 0 or self.window_cells < 0 or self.window_angle < 0:
            raise TgmProgrammingError(f"MatcherConfig: invalid search lattice {self}")
        if self.tolerance <= 0 or self.max_iterations < 1:
            raise TgmProgrammingError(f"MatcherConfig: invalid stopping rule {self}")

    def json(self) -> JSON:
        return {
            "window_cells": self.window_cells,
            "window_step_cells": self.window_step_cells,
            "window_angle": self.window_angle,
            "angle_step": self.angle_step,
            "tolerance": self.tolerance,
            "max_iterations": self.max_iterations,
        }


@dataclass(frozen=True)
class MatchResult:
    pose: Pose2D
    cost: float
    iterations: int
    converged: bool


def _world_points(points: FloatArray, poses: FloatArray) -> FloatArray:
    """(C, K, 2) world points of sensor points (K, 2) under candidate poses (C, 3)."""
    c = np.cos(poses[:, 2])[:, None]
    s = np.sin(poses[:, 2])[:, None]
    wx = poses[:, 0:1] + c * points[None, :, 0] - s * points[None, :, 1]
    wy = poses[:, 1:2] + s * points[None, :, 0] + c * points[None, :, 1]
    return np.stack([wx, wy], axis=2)


def _costs(field: SmoothStaticField, points: FloatArray, poses: FloatArray) -> FloatArray:
    world = _world_points(points, poses)
    values, _ = field.sample(world.reshape(-1, 2))
    return ((1.0 - values.reshape(len(poses), -1)) ** 2).sum(axis=1)


def _lattice(half_width: float, step_size: float) -> FloatArray:
    n = int(math.floor(half_width / step_size + 1e-9))
    return np.arange(-n, n + 1) * step_size


def _coarse_search(
    field: SmoothStaticField, points: FloatArray, prior: FloatArray, config: MatcherConfig
) -> tuple[FloatArray, float]:
    """Best lattice pose around the prior; it replaces the prior only when strictly cheaper."""
    res = field.geometry.resolution
    offsets = _lattice(config.window_cells, config.window_step_cells) * res
    angles = _lattice(config.window_angle, config.angle_step)
    dx, dy, dth = np.meshgrid(offsets, offsets, angles, indexing="ij")
    candidates = prior[None, :] + np.stack([dx.ravel(), dy.ravel(), dth.ravel()], axis=1)
    costs = _costs(field, points, candidates)
    prior_cost = float(_costs(field, points, prior[None, :])[0])
    order = np.lexsort((candidates[:, 2], candidates[:, 1], candidates[:, 0], costs))
    best = order[0]
    if costs[best] < prior_cost:
        return candidates[best], float(costs[best])
    return prior, prior_cost


def match(
    scan: Scan,
    prior_pose: Pose2D,
    field: SmoothStaticField,
    config: MatcherConfig = MatcherConfig(),
) -> MatchResult:
    """
    Pose minimizing sum_k (1 - F(T(pose) p_k))^2 over the scan's hit endpoints.

    A coarse lattice search around the prior seeds Gauss-Newton. Steps are least-squares solutions in
    cell units, so a rank-deficient Jacobian (every point seeing the same slope) still yields the
    minimum-norm step. Each accepted step strictly lowers the cost; a step is halved until it does, and
    when it shrinks below the tolerance the current pose is a local minimum. Only a field without any
    gradient under the scan yields converged=False.
    """
    points = scan.hit_points()
    if len(points) == 0:
        raise EmptyScanError("match: scan has no hit beams")
    res = field.geometry.resolution
    lever = max(float(np.mean(np.linalg.norm(points, axis=1))) / res, 1.0)
    pose, cost = _coarse_search(field, points, prior_pose.as_array(), config)

    def scaled(delta: FloatArray) -> float:
        return math.hypot(delta[0] / res, delta[1] / res, delta[2] * lever)

    # pose delta = unit * step in cells
    unit = np.array([res, res, 1.0 / lever])
    iterations = 0
    converged = False
    while iterations < config.max_iterations:
        iterations += 1
        world = _world_points(points, pose[None, :])[0]
        values, gradient = field.sample(world)
        residual = 1.0 - values
        c, s = math.cos(pose[2]), math.sin(pose[2])
        d_theta = gradient[:, 0] * (-s * points[:, 0] - c * points[:, 1]) + gradient[:, 1] * (
            c * points[:, 0] - s * points[:, 1]
        )
        if not np.any(gradient):
            break
        jacobian = np.column_stack([gradient, d_theta]) * unit
        delta = np.linalg.lstsq(jacobian, residual, rcond=None)[0] * unit
        if not np.all(np.isfinite(delta)):
            break
        accepted = False
        while not accepted:
            candidate = pose + delta
            candidate_cost = float(_costs(field, points, candidate[None, :])[0])
            if candidate_cost < cost:
                accepted = True
            elif scaled(delta) < config.tolerance:
                break
            else:
                delta = delta * 0.5
        if not accepted:
            converged = True
            break
        pose, cost = pose + delta, candidate_cost
        if scaled(delta) < config.tolerance:
            converged = True
            break

    return MatchResult(Pose2D(*pose), cost, iterations, converged)


def predict_pose(history: Sequence[Pose2D]) -> Pose2D:
    """Constant-velocity guess: repeats the last relative motion."""
    if not history:
        raise TgmProgrammingError("predict_pose: empty pose history")
    if len(history) == 1:
        return history[-1]
    motion = history[-2].inverse().compose(history[-1])
    return history[-1].compose(motion)


@dataclass(frozen=True, eq=False)
class SlamStep:
    """`flagged` marks steps whose pose fell back to the motion model."""

    pose: Pose2D
    match: MatchResult | None
    flagged: bool
    observed: IntArray


def slam_step(
    mapper: Mapper,
    scan: Scan,
    history: Sequence[Pose2D],
    config: MatcherConfig = MatcherConfig(),
    tracer: "TraceNode | None" = None,
) -> SlamStep:
    """Localizes the scan against the mapper's match layer, then maps it at the estimated pose."""
    seed = predict_pose(history)
    result: MatchResult | None = None
    with _timed(tracer, "match"):
        try:
            result = match(scan, seed, SmoothStaticField(mapper.geometry, mapper.match_layer()), config)
        except EmptyScanError:
            logger.warning("slam_step: scan has no hits, keeping the motion model pose")
    flagged = result is None or not result.converged
    pose = seed if flagged or result is None else result.pose
    observed = mapper.integrate(scan, pose, tracer)
    return SlamStep(pose, result, flagged, observed)


##############
# Simworld
##############


@dataclass(frozen=True)
class Rect:
    """Axis-aligned box in meters; a cell belongs to it when the cell center lies inside."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self) -> None:
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise TgmProgrammingError(f"Rect: empty box {self}")

    def json(self) -> JSON:
        return {"xmin": self.xmin, "ymin": self.ymin, "xmax": self.xmax, "ymax": self.ymax}


@dataclass(frozen=True)
class Wall:
    """Thin segment; rasterized as every cell the segment crosses."""

    x0: float
    y0: float
    x1: float
    y1: float

    def json(self) -> JSON:
        return {"x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1}


@dataclass(frozen=True)
class Waypoint:
    t: float
    x: float
    y: float
    theta: float = 0.0

    def json(self) -> JSON:
        return {"t": self.t, "x": self.x, "y": self.y, "theta": self.theta}


def _check_schedule(owner: str, schedule: tuple[Waypoint, ...]) -> None:
    if not schedule:
        raise TgmProgrammingError(f"{owner}: schedule must contain at least one waypoint")
    if any(b.t <= a.t for a, b in zip(schedule, schedule[1:])):
        raise TgmProgrammingError(f"{owner}: waypoint times must be strictly increasing")


def _interpolate(schedule: tuple[Waypoint, ...], t: float) -> tuple[float, float, float]:
    """Piecewise linear; the first and last waypoints are held outside the schedule."""
    if t <= schedule[0].t:
        w = schedule[0]
        return (w.x, w.y, w.theta)
    for a, b in zip(schedule, schedule[1:]):
        if t <= b.t:
            alpha = (t - a.t) / (b.t - a.t)
            return (
                a.x + alpha * (b.x - a.x),
                a.y + alpha * (b.y - a.y),
                a.theta + alpha * (b.theta - a.theta),
            )
    w = schedule[-1]
    return (w.x, w.y, w.theta)


def _max_speed(schedule: tuple[Waypoint, ...]) -> float:
    speeds = [math.hypot(b.x - a.x, b.y - a.y) / (b.t - a.t) for a, b in zip(schedule, schedule[1:])]
    return max(speeds, default=0.0)


@dataclass(frozen=True)
class Obstacle:
    """Moving axis-aligned box (length along x, width along y) whose center follows the schedule."""

    name: str
    length: float
    width: float
    schedule: tuple[Waypoint, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "schedule", tuple(self.schedule))
        if not (self.length > 0 and self.width > 0):
            raise TgmProgrammingError(f"Obstacle {self.name}: length and width must be > 0")
        _check_schedule(f"Obstacle {self.name}", self.schedule)

    def position(self, t: float) -> tuple[float, float]:
        x, y, _ = _interpolate(self.schedule, t)
        return (x, y)

    def footprint(self, t: float) -> Rect:
        x, y = self.position(t)
        return Rect(x - self.length / 2, y - self.width / 2, x + self.length / 2, y + self.width / 2)

    def max_speed(self) -> float:
        return _max_speed(self.schedule)

    def json(self) -> JSON:
        return {
            "name": self.name,
            "length": self.length,
            "width": self.width,
            "schedule": [w.json() for w in self.schedule],
        }


@dataclass(frozen=True)
class SensorSpec:
    beam_count: int = 180
    fov: float = 2 * math.pi
    max_range: float = 100.0
    range_noise: float = 0.02
    rate_hz: float = 10.0

    def __post_init__(self) -> None:
        if self.beam_count < 1 or not 0 < self.fov <= 2 * math.pi + 1e-12:
            raise TgmProgrammingError(f"SensorSpec: invalid beam layout {self}")
        if not (self.max_range > 0 and self.rate_hz > 0 and self.range_noise >= 0):
            raise TgmProgrammingError(f"SensorSpec: invalid range/rate/noise {self}")

    @property
    def dt(self) -> float:
        return 1.0 / self.rate_hz

    def bearings(self) -> FloatArray:
        if self.fov >= 2 * math.pi - 1e-12:
            return np.linspace(-math.pi, math.pi, self.beam_count, endpoint=False)
        if self.beam_count == 1:
            return np.zeros(1)
        return np.linspace(-self.fov / 2, self.fov / 2, self.beam_count)

    def json(self) -> JSON:
        return {
            "beam_count": self.beam_count,
            "fov": self.fov,
            "max_range": self.max_range,
            "range_noise": self.range_noise,
            "rate_hz": self.rate_hz,
        }


def _rect_slices(geom: GridGeometry, rect: Rect) -> tuple[slice, slice] | None:
    ox, oy = geom.origin
    res = geom.resolution
    ix0 = max(math.ceil((rect.xmin - ox) / res - 1e-9), 0)
    ix1 = min(math.floor((rect.xmax - ox) / res + 1e-9), geom.width - 1)
    iy0 = max(math.ceil((rect.ymin - oy) / res - 1e-9), 0)
    iy1 = min(math.floor((rect.ymax - oy) / res + 1e-9), geom.height - 1)
    if ix0 > ix1 or iy0 > iy1:
        return None
    return (slice(iy0, iy1 + 1), slice(ix0, ix1 + 1))


def rasterize_footprints(geom: GridGeometry, rects: Iterable[Rect]) -> BoolArray:
    mask = np.zeros(geom.shape, dtype=np.bool_)
    for rect in rects:
        slices = _rect_slices(geom, rect)
        if slices is not None:
            mask[slices] = True
    return mask


@dataclass(frozen=True)
class WorldSpec:
    """A complete simulated scenario: static geometry, moving obstacles, the ego path and the sensor."""

    name: str
    geometry: GridGeometry
    duration: float
    v_max: float
    sensor: SensorSpec
    ego: tuple[Waypoint, ...]
    rects: tuple[Rect, ...] = ()
    walls: tuple[Wall, ...] = ()
    obstacles: tuple[Obstacle, ...] = ()

    def __post_init__(self) -> None:
        for name in ("ego", "rects", "walls", "obstacles"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not (self.duration > 0 and self.v_max > 0):
            raise TgmProgrammingError(f"WorldSpec {self.name}: duration and v_max must be > 0")
        _check_schedule(f"WorldSpec {self.name} ego", self.ego)

    def ticks(self) -> FloatArray:
        count = int(math.floor(self.duration * self.sensor.rate_hz + 1e-9)) + 1
        return np.arange(count) / self.sensor.rate_hz

    def ego_pose(self, t: float) -> Pose2D:
        return Pose2D(*_interpolate(self.ego, t))

    def footprints(self, t: float) -> list[Rect]:
        return [o.footprint(t) for o in self.obstacles]

    def validate(self) -> None:
        """Rejects worlds the simulator cannot render faithfully."""
        names = [o.name for o in self.obstacles]
        if len(set(names)) != len(names):
            raise TgmProgrammingError(f"WorldSpec {self.name}: obstacle names must be unique")
        for obstacle in self.obstacles:
            if obstacle.max_speed() > self.v_max + 1e-9:
                raise TgmProgrammingError(
                    f"WorldSpec {self.name}: obstacle {obstacle.name} moves at {obstacle.max_speed():.3f} m/s "
                    f"> v_max {self.v_max}"
                )
        static = rasterize_static(self)
        for t in self.ticks().tolist():
            pose = self.ego_pose(t)
            ego_cell = world_to_cell(self.geometry, (pose.x, pose.y))
            if ego_cell is None:
                raise TgmProgrammingError(f"WorldSpec {self.name}: ego leaves the grid at t={t:.2f}")
            for obstacle in self.obstacles:
                slices = _rect_slices(self.geometry, obstacle.footprint(t))
                if slices is None:
                    continue
                if static[slices].any():
                    raise TgmProgrammingError(
                        f"WorldSpec {self.name}: obstacle {obstacle.name} overlaps static geometry at t={t:.2f}"
                    )
                if slices[0].start <= ego_cell[1] < slices[0].stop and slices[1].start <= ego_cell[0] < slices[1].stop:
                    raise TgmProgrammingError(
                        f"WorldSpec {self.name}: obstacle {obstacle.name} covers the sensor at t={t:.2f}"
                    )

    def with_overrides(self, resolution: float | None = None, max_range: float | None = None) -> "WorldSpec":
        spec = self
        if resolution is not None:
            geometry = GridGeometry.from_extent(*self.geometry.bounds, resolution=resolution)
            spec = replace(spec, geometry=geometry)
        if max_range is not None:
            spec = replace(spec, sensor=replace(spec.sensor, max_range=max_range))
        return spec

    def json(self) -> JSON:
        xmin, ymin, xmax, ymax = self.geometry.bounds
        return {
            "name": self.name,
            "grid": {"extent": [xmin, ymin, xmax, ymax], "resolution": self.geometry.resolution},
            "duration": self.duration,
            "v_max": self.v_max,
            "sensor": self.sensor.json(),
            "ego": [w.json() for w in self.ego],
            "static": {"rects": [r.json() for r in self.rects], "walls": [w.json() for w in self.walls]},
            "obstacles": [o.json() for o in self.obstacles],
        }

    @classmethod
    def from_json(cls, data: JSON) -> "WorldSpec":
        try:
            grid = data["grid"]
            static = data.get("static") or {}
            return cls(
                name=str(data.get("name", "world")),
                geometry=GridGeometry.from_extent(*grid["extent"], resolution=grid["resolution"]),
                duration=float(data["duration"]),
                v_max=float(data["v_max"]),
                sensor=SensorSpec(**(data.get("sensor") or {})),
                ego=tuple(Waypoint(**w) for w in data["ego"]),
                rects=tuple(Rect(**r) for r in static.get("rects") or ()),
                walls=tuple(Wall(**w) for w in static.get("walls") or ()),
                obstacles=tuple(
                    Obstacle(o["name"], o["length"], o["width"], tuple(Waypoint(**w) for w in o["schedule"]))
                    for o in data.get("obstacles") or ()
                ),
            )
        except (KeyError, TypeError) as e:
            raise TgmProgrammingError(f"invalid world description: {_format_exception(e)}") from e


def rasterize_static(spec: WorldSpec) -> BoolArray:
    geom = spec.geometry
    mask = rasterize_footprints(geom, spec.rects)
    for wall in spec.walls:
        trace = trace_rays(geom, (wall.x0, wall.y0), [(wall.x1, wall.y1)])
        mask[trace.iy[trace.inside], trace.ix[trace.inside]] = True
    return mask


def load_world_spec(path: str | Path) -> WorldSpec:
    try:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise TgmProgrammingError(f"cannot read world description {path}: {_format_exception(e)}") from e
    if not isinstance(data, dict):
        raise TgmProgrammingError(f"{path}: expected a mapping at the top level")
    return WorldSpec.from_json(data)


def dump_world_spec(spec: WorldSpec, path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", encoding="utf-8") as f:
        yaml.safe_dump(spec.json(), f, sort_keys=False)
    return target


def cast_rays(
    geom: GridGeometry,
    occupied: BoolArray,
    pose: Pose2D,
    bearings: FloatArray,
    max_range: float,
) -> tuple[FloatArray, BoolArray]:
    """Exact ranges to the first occupied cell boundary; beams that hit nothing are flagged."""
    angles = pose.theta + np.asarray(bearings, dtype=np.float64)
    ends = np.stack([pose.x + max_range * np.cos(angles), pose.y + max_range * np.sin(angles)], axis=1)
    trace = trace_rays(geom, (pose.x, pose.y), ends)
    hit = np.zeros(len(trace), dtype=np.bool_)
    hit[trace.inside] = occupied[trace.iy[trace.inside], trace.ix[trace.inside]]
    ranges = np.full(len(angles), max_range)
    flags = np.ones(len(angles), dtype=np.bool_)
    hit_index = np.flatnonzero(hit)
    if hit_index.size:
        beams, first = np.unique(trace.beam[hit_index], return_index=True)
        ranges[beams] = np.maximum(trace.t_enter[hit_index[first]] * max_range, 1e-6)
        flags[beams] = False
    return ranges, flags


@dataclass(frozen=True, eq=False)
class Frame:
    time: float
    ego_pose_truth: Pose2D
    scan: Scan
    truth_static: BoolArray
    truth_dynamic: BoolArray


def simulate(spec: WorldSpec, seed: int = 0) -> Iterator[Frame]:
    """Frames at the sensor rate over the whole duration; the same seed always yields the same frames."""
    spec.validate()
    rng = np.random.default_rng(seed)
    geom = spec.geometry
    static = rasterize_static(spec)
    static.setflags(write=False)
    sensor = spec.sensor
    bearings = sensor.bearings()
    for t in spec.ticks().tolist():
        pose = spec.ego_pose(t)
        dynamic = rasterize_footprints(geom, spec.footprints(t))
        ranges, flags = cast_rays(geom, static | dynamic, pose, bearings, sensor.max_range)
        noise = rng.normal(0.0, sensor.range_noise, size=len(ranges)) if sensor.range_noise > 0 else 0.0
        ranges = np.where(flags, ranges, np.clip(ranges + noise, 1e-6, sensor.max_range))
        yield Frame(t, pose, Scan(bearings, ranges, flags, sensor.max_range), static, dynamic)


class FrameLogWriter:
    """Line-delimited JSON frame log: one header line (geometry, beams, static truth), then one line per frame."""

    def __init__(self, path: str | Path, spec: WorldSpec) -> None:
        self.path = Path(path)
        self.spec = spec
        self._file: Any = None

    def __enter__(self) -> "FrameLogWriter":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "wb")
        header = {
            "kind": "header",
            "world": self.spec.name,
            "grid": self.spec.geometry.json(),
            "bearings": self.spec.sensor.bearings().tolist(),
            "max_range": self.spec.sensor.max_range,
            "static": np.flatnonzero(rasterize_static(self.spec)).tolist(),
        }
        self._file.write(_json_dumps(header) + b"\n")
        return self

    def __exit__(self, *exc_info: Any) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def write(self, frame: Frame) -> None:
        if self._file is None:
            raise TgmProgrammingError("FrameLogWriter: write() outside of a with block")
        pose = frame.ego_pose_truth
        record = {
            "kind": "frame",
            "t": frame.time,
            "pose": [pose.x, pose.y, pose.theta],
            "ranges": frame.scan.ranges.tolist(),
            "flags": frame.scan.max_range_flags.astype(int).tolist(),
            "dynamic": np.flatnonzero(frame.truth_dynamic).tolist(),
        }
        self._file.write(_json_dumps(record) + b"\n")


def write_frame_log(path: str | Path, spec: WorldSpec, frames: Iterable[Frame]) -> Path:
    with FrameLogWriter(path, spec) as writer:
        for frame in frames:
            writer.write(frame)
    return writer.path


def read_frame_log(path: str | Path) -> Iterator[Frame]:
    with open(path, "rb") as f:
        header = _json_loads(f.readline())
        if header.get("kind") != "header":
            raise TgmProgrammingError(f"{path}: missing frame log header")
        grid = header["grid"]
        geom = GridGeometry(tuple(grid["origin"]), grid["resolution"], grid["width"], grid["height"])
        bearings = np.asarray(header["bearings"], dtype=np.float64)
        static = np.zeros(geom.shape, dtype=np.bool_)
        static.flat[header["static"]] = True
        static.setflags(write=False)
        for line in f:
            if not line.strip():
                continue
            record = _json_loads(line)
            dynamic = np.zeros(geom.shape, dtype=np.bool_)
            dynamic.flat[record["dynamic"]] = True
            scan = Scan(bearings, record["ranges"], np.asarray(record["flags"], dtype=np.bool_), header["max_range"])
            yield Frame(record["t"], Pose2D(*record["pose"]), scan, static, dynamic)


def _vehicle(
    name: str, schedule: Sequence[tuple[float, float, float]], length: float = 4.5, width: float = 1.8
) -> Obstacle:
    return Obstacle(name, length, width, tuple(Waypoint(t, x, y) for t, x, y in schedule))


def _poles(xs: Iterable[float], y: float, size: float = 0.4) -> list[Rect]:
    return [Rect(x - size / 2, y - size / 2, x + size / 2, y + size / 2) for x in xs]


# (seconds after leaving standstill, meters travelled); speeds of 0.5, 1, 2 and 4 m/s in turn.
_LAUNCH_PROFILE = ((1.0, 0.5), (2.0, 1.5), (3.0, 3.5), (4.0, 7.5))


def _launch(t0: float, x0: float, y: float, exit_x: float, speed: float) -> list[tuple[float, float, float]]:
    """Waypoints of a vehicle pulling away from standstill at (x0, y) at `t0`, cruising on to `exit_x`."""
    sign = 1.0 if exit_x > x0 else -1.0
    schedule = [(t0, x0, y)] + [(t0 + dt, x0 + sign * dx, y) for dt, dx in _LAUNCH_PROFILE]
    t_last, x_last, _ = schedule[-1]
    schedule.append((t_last + abs(exit_x - x_last) / speed, exit_x, y))
    return schedule


def scenario_traffic_light(
    *,
    resolution: float = 0.2,
    max_range: float = 100.0,
    stationary_time: float = 40.0,
    duration: float = 60.0,
    obstacles: int = 2,
    beam_count: int = 180,
    range_noise: float = 0.02,
    v_max: float = 10.0,
) -> WorldSpec:
    """
    Ego waits at a traffic light on a straight road lined with buildings, one vehicle ahead and one
    behind. Both wait for `stationary_time` seconds, then the lead drives off (+x) and the follower
    reverses away (-x), both leaving the map.
    """
    speed = 8.0
    rects: list[Rect] = []
    for y0, y1 in ((8.0, 11.0), (-11.0, -8.0)):
        rects += [Rect(x0, y0, x1, y1) for x0, x1 in ((-38.0, -14.0), (-10.0, 10.0), (14.0, 38.0))]
    for y in (6.5, -6.5):
        rects += _poles(range(-32, 33, 8), y)

    def queued(name: str, x0: float, exit_x: float) -> Obstacle:
        schedule = _launch(stationary_time, x0, 0.0, exit_x, speed)
        if stationary_time > 0:
            schedule.insert(0, (0.0, x0, 0.0))
        return _vehicle(name, schedule)

    vehicles = [queued("lead", 7.5, 60.0), queued("follower", -7.5, -60.0)]
    return WorldSpec(
        name="traffic-light",
        geometry=GridGeometry.from_extent(-40.0, -12.0, 40.0, 12.0, resolution),
        duration=duration,
        v_max=v_max,
        sensor=SensorSpec(beam_count=beam_count, max_range=max_range, range_noise=range_noise),
        ego=(Waypoint(0.0, 0.0, 0.0, 0.0),),
        rects=tuple(rects),
        obstacles=tuple(vehicles[:obstacles]),
    )


def scenario_intersection(
    *,
    resolution: float = 0.2,
    max_range: float = 25.0,
    arrival_time: float = 15.0,
    departure_time: float = 28.0,
    duration: float = 45.0,
    beam_count: int = 180,
    range_noise: float = 0.02,
    v_max: float = 10.0,
) -> WorldSpec:
    """
    Ego stands at an intersection. A tram and a queue of four vehicles drive in while in view, stop
    next to the ego from about `arrival_time` until `departure_time`, then all drive off in +x.
    Parked cars, poles and buildings form the static scene.
    """
    speed = 8.0
    start_x, exit_x = -80.0, 130.0
    if departure_time <= arrival_time + 3.0:
        raise TgmProgrammingError("scenario_intersection: departure must come after the last arrival")

    def mover(name: str, stop_x: float, y: float, arrive: float, length: float = 4.5, width: float = 1.8):
        schedule = [
            (0.0, start_x, y),
            (arrive - (stop_x - start_x) / speed, start_x, y),
            (arrive, stop_x, y),
            *_launch(departure_time, stop_x, y, exit_x, speed),
        ]
        return _vehicle(name, schedule, length, width)

    movers = [
        mover("tram", -2.0, 4.0, arrival_time + 1.0, length=30.0, width=2.6),
        mover("car-1", 8.0, -3.5, arrival_time),
        mover("car-2", 1.0, -3.5, arrival_time + 1.0),
        mover("car-3", -6.0, -3.5, arrival_time + 2.0),
        mover("car-4", -13.0, -3.5, arrival_time + 3.0),
    ]
    rects: list[Rect] = []
    for y0, y1 in ((15.0, 18.0), (-18.0, -15.0)):
        rects += [Rect(-48.0, y0, -8.0, y1), Rect(8.0, y0, 48.0, y1)]
    parked = [(-20.0, -8.5), (-12.0, -8.5), (7.0, -8.5), (15.0, -8.5), (-16.0, 8.5), (10.0, 8.5)]
    rects += [Rect(x, y - 0.9, x + 4.5, y + 0.9) for x, y in parked]
    for y in (11.0, -11.0):
        rects += _poles(range(-24, 25, 6), y)
    return WorldSpec(
        name="intersection",
        geometry=GridGeometry.from_extent(-50.0, -20.0, 50.0, 20.0, resolution),
        duration=duration,
        v_max=v_max,
        sensor=SensorSpec(beam_count=beam_count, max_range=max_range, range_noise=range_noise),
        ego=(Waypoint(0.0, 0.0, 0.0, 0.0),),
        rects=tuple(rects),
        obstacles=tuple(movers),
    )


BUILTIN_SCENARIOS: dict[str, Callable[..., WorldSpec]] = {
    "traffic-light": scenario_traffic_light,
    "intersection": scenario_intersection,
}


##############
# Tracer
##############

type TraceLevel = Literal["info", "warning", "error"]


@dataclass
class TraceNode:
    """Accumulated wall time and notes for one phase of a run."""

    name: str = ""
    calls: int = 0
    duration: timedelta = field(default_factory=timedelta)
    logs: list[str] = field(default_factory=list)
    attributes: JSON = field(default_factory=dict)
    children: dict[str, "TraceNode"] = field(default_factory=dict)

    def _ensure_child(self, name: str) -> "TraceNode":
        if name not in self.children:
            self.children[name] = TraceNode(name=name)
        return self.children[name]

    def child(self, name: str) -> "TraceNode":
        return self._ensure_child(name)

    def record(self, seconds: float) -> None:
        self.calls += 1
        self.duration += timedelta(seconds=seconds)

    def update_attributes(self, **kwargs) -> None:
        self.attributes.update(kwargs)

    def log(self, msg: str, level: TraceLevel = "info") -> None:
        self.logs.append(datetime.now().strftime("%Y-%m-%d %H:%M:%S") + f" [{level}] : " + msg)

    def error(self, e: str | BaseException) -> None:
        if isinstance(e, str):
            self.log(e, level="error")
            return
        self.log(_format_exception(e), level="error")

    def json(self) -> JSON:
        total_ms = self.duration.total_seconds() * (10**3)
        return {
            "name": self.name,
            "calls": self.calls,
            "duration": total_ms,  # milliseconds
            "mean_duration": total_ms / self.calls if self.calls else 0.0,
            "logs": self.logs,
            "attributes": {k: _try_to_string(v) for k, v in self.attributes.items()},
            "children": {k: v.json() for k, v in self.children.items()},
        }


@dataclass
class TraceRoot(TraceNode):
    """Trace of a whole run."""

    start_at: datetime = field(default_factory=lambda: datetime.fromtimestamp(0))
    end_at: datetime = field(default_factory=lambda: datetime.fromtimestamp(0))
    finished: bool = False
    result: Result | None = None

    def set_start(self) -> None:
        self.start_at = datetime.now()
        self.finished = False

    def set_end(self, result: Result) -> None:
        self.finished = True
        self.end_at = datetime.now()
        self.duration = self.end_at - self.start_at
        self.result = result

    @override
    def json(self) -> JSON:
        data = TraceNode.json(self)
        data.update(
            {
                "start_at": self.start_at.isoformat(),
                "end_at": self.end_at.isoformat(),
                "finished": self.finished,
                "result": str(self.result.status) if self.result else None,
            }
        )
        return data


@contextmanager
def _timed(tracer: TraceNode | None, name: str) -> Iterator[None]:
    if tracer is None:
        yield
        return
    start = time.perf_counter()
    try:
        yield
    finally:
        tracer.child(name).record(time.perf_counter() - start)


##############
# Harness
##############

type MapperName = Literal["tgm", "ogm", "cogm"]
type PoseMode = Literal["truth", "slam"]

MAPPER_NAMES: tuple[MapperName, ...] = ("tgm", "ogm", "cogm")
POSE_MODES: tuple[PoseMode, ...] = ("truth", "slam")


@dataclass(frozen=True)
class RunConfig:
    """
    One simulated run. `scenario` is a built-in scenario name, a YAML file or a WorldSpec.

    `v_max` is the speed the TGM assumes for dynamic objects (defaults to the world's);
    `limits` replaces the TGM saturation limits and `ogm_clamp` the c-OGM bounds.
    """

    scenario: str | Path | WorldSpec
    mapper: MapperName = "tgm"
    pose_mode: PoseMode = "truth"
    out_dir: str | Path | None = None
    seed: int = 0
    snapshot_times: tuple[float, ...] = ()
    prior_static: float = 0.3
    prior_dynamic: float = 0.3
    limits: SaturationLimits = TGM_LIMITS
    ogm_clamp: tuple[float, float] = COGM_LIMITS
    v_max: float | None = None
    resolution: float | None = None
    range_override: float | None = None
    p_hit_occupied: float = 0.8
    p_miss_free: float = 0.7
    local_update: bool = True
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    frame_log: bool = False

    def __post_init__(self) -> None:
        if self.mapper not in MAPPER_NAMES:
            raise TgmProgrammingError(f"RunConfig: unknown mapper {self.mapper!r}, expected one of {MAPPER_NAMES}")
        if self.pose_mode not in POSE_MODES:
            raise TgmProgrammingError(f"RunConfig: unknown pose mode {self.pose_mode!r}, expected one of {POSE_MODES}")
        _check_priors(self.prior_static, self.prior_dynamic)
        if self.v_max is not None and self.v_max < 0:
            raise TgmProgrammingError(f"RunConfig: v_max must be >= 0, got {self.v_max}")
        object.__setattr__(self, "snapshot_times", tuple(sorted(float(t) for t in self.snapshot_times)))

    @property
    def label(self) -> str:
        return f"{self.mapper}/{self.pose_mode}"

    def scenario_key(self) -> str:
        if isinstance(self.scenario, WorldSpec):
            return f"world:{self.scenario.name}:{id(self.scenario)}"
        if str(self.scenario) in BUILTIN_SCENARIOS:
            return f"builtin:{self.scenario}"
        return f"file:{Path(self.scenario).resolve()}"

    def resolve_world(self) -> WorldSpec:
        if isinstance(self.scenario, WorldSpec):
            world = self.scenario
        elif str(self.scenario) in BUILTIN_SCENARIOS:
            world = BUILTIN_SCENARIOS[str(self.scenario)]()
        else:
            world = load_world_spec(self.scenario)
        world = world.with_overrides(self.resolution, self.range_override)
        late = [t for t in self.snapshot_times if t < 0 or t > world.duration + 1e-9]
        if late:
            raise TgmProgrammingError(f"RunConfig: snapshot times {late} outside the run duration {world.duration}")
        return world

    def json(self) -> JSON:
        return {
            "scenario": self.scenario.name if isinstance(self.scenario, WorldSpec) else str(self.scenario),
            "mapper": self.mapper,
            "pose_mode": self.pose_mode,
            "seed": self.seed,
            "snapshot_times": list(self.snapshot_times),
            "priors": [self.prior_static, self.prior_dynamic],
            "limits": self.limits.json(),
            "ogm_clamp": list(self.ogm_clamp),
            "v_max": self.v_max,
            "resolution": self.resolution,
            "range_override": self.range_override,
            "p_hit_occupied": self.p_hit_occupied,
            "p_miss_free": self.p_miss_free,
            "local_update": self.local_update,
            "matcher": self.matcher.json(),
        }


def build_mapper(config: RunConfig, world: WorldSpec) -> Mapper:
    geom = world.geometry
    ism = InverseSensorModel(config.prior_static, config.prior_dynamic, config.p_hit_occupied, config.p_miss_free)
    if config.mapper == "tgm":
        v_max = world.v_max if config.v_max is None else config.v_max
        kernel = uniform_disk_kernel(v_max, world.sensor.dt, geom.resolution)
        local_radius = world.sensor.max_range + geom.resolution if config.local_update else None
        return TgmMapper(geom, kernel, ism, config.limits, local_radius)
    if config.mapper == "ogm":
        return OgmMapper(geom, ism)
    return OgmMapper(geom, ism, config.ogm_clamp)


@dataclass
class RunMetrics:
    """
    Evaluation of one run. Definitions:

    * static_accuracy: over observed cells, the share of truly static cells with occupancy > 0.5 plus
      truly free cells with occupancy < 0.5 (TGM: p_static; OGM: occupancy probability).
    * trace_count: cells with occupancy > 0.5 that an obstacle covered at some frame but not at the last.
    * pose errors: estimate minus truth per frame; pose_rmse over the planar error.
    * step_times: seconds spent in prediction, update and matching per frame.
    * error: why the run stopped early, empty for a complete run.
    """

    scenario: str
    mapper: str
    pose_mode: str
    seed: int
    frames: int = 0
    static_accuracy: float = 0.0
    trace_count: int = 0
    pose_rmse: float = 0.0
    max_pose_error: float = 0.0
    flagged_steps: int = 0
    error: str = ""
    times: list[float] = field(default_factory=list)
    error_x: list[float] = field(default_factory=list)
    error_y: list[float] = field(default_factory=list)
    error_theta: list[float] = field(default_factory=list)
    step_times: list[float] = field(default_factory=list)
    diagnostics: FilterDiagnostics = field(default_factory=FilterDiagnostics)

    @property
    def mean_step_ms(self) -> float:
        return 1e3 * float(np.mean(self.step_times)) if self.step_times else 0.0

    def planar_errors(self) -> FloatArray:
        return np.hypot(np.asarray(self.error_x), np.asarray(self.error_y))

    def json(self) -> JSON:
        return {
            "scenario": self.scenario,
            "mapper": self.mapper,
            "pose_mode": self.pose_mode,
            "seed": self.seed,
            "frames": self.frames,
            "static_accuracy": self.static_accuracy,
            "trace_count": self.trace_count,
            "pose_rmse": self.pose_rmse,
            "max_pose_error": self.max_pose_error,
            "flagged_steps": self.flagged_steps,
            "error": self.error,
            "mean_step_ms": self.mean_step_ms,
            "diagnostics": self.diagnostics.json(),
            "series": {
                "t": self.times,
                "error_x": self.error_x,
                "error_y": self.error_y,
                "error_theta": self.error_theta,
                "step_time": self.step_times,
            },
        }


def score_map(
    occupancy: FloatArray,
    truth_static: BoolArray,
    truth_dynamic: BoolArray,
    ever_dynamic: BoolArray,
    observed: BoolArray,
) -> tuple[float, int]:
    """(static accuracy, trace count) of an occupancy layer against the final ground truth."""
    occupied = occupancy > 0.5
    static_cells = observed & truth_static
    free_cells = observed & ~truth_static & ~truth_dynamic
    evaluated = int(np.count_nonzero(static_cells) + np.count_nonzero(free_cells))
    correct = int(np.count_nonzero(static_cells & occupied) + np.count_nonzero(free_cells & ~occupied))
    accuracy = correct / evaluated if evaluated else 1.0
    traces = int(np.count_nonzero(occupied & ever_dynamic & ~truth_dynamic & ~truth_static))
    return accuracy, traces


def _write_poses_csv(path: Path, times: list[float], truth: list[Pose2D], estimate: list[Pose2D]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["t", "x_true", "y_true", "theta_true", "x_est", "y_est", "theta_est"])
        for t, a, b in zip(times, truth, estimate):
            writer.writerow([f"{v:.6f}" for v in (t, a.x, a.y, a.theta, b.x, b.y, b.theta)])


def run(config: RunConfig) -> Result:
    """
    Simulates the scenario, feeds every frame to the mapper (with true or scan-matched poses) and
    evaluates the final map. Artifacts go to `config.out_dir` when set:

    * snapshot_<t>.ppm for each snapshot time and map_final.ppm
    * poses.csv (true and estimated pose per frame)
    * summary.json (metrics and the run trace)
    * frames.jsonl when `config.frame_log` is set
    * PARTIAL when the run stopped on an error

    Returns Result.OK(RunMetrics), or Result.FAIL(RunMetrics) with whatever was computed so far.
    """
    world = config.resolve_world()
    out_dir = Path(config.out_dir) if config.out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    tracer = TraceRoot(name=f"{world.name}:{config.label}")
    tracer.update_attributes(**config.json())
    tracer.set_start()
    metrics = RunMetrics(world.name, config.mapper, config.pose_mode, config.seed)
    mapper = build_mapper(config, world)
    geom = world.geometry

    observed = np.zeros(geom.shape, dtype=np.bool_)
    ever_dynamic = np.zeros(geom.shape, dtype=np.bool_)
    history: list[Pose2D] = []
    truth: list[Pose2D] = []
    pending = list(config.snapshot_times)
    last_frame: Frame | None = None
    failure = ""
    logger.info(f"run {tracer.name}: {len(world.ticks())} frames, seed {config.seed}")

    try:
        with ExitStack() as stack:
            frame_log = None
            if out_dir is not None and config.frame_log:
                frame_log = stack.enter_context(FrameLogWriter(out_dir / "frames.jsonl", world))
            for index, frame in enumerate(simulate(world, config.seed)):
                if frame_log is not None:
                    frame_log.write(frame)
                start = time.perf_counter()
                if config.pose_mode == "truth" or index == 0:
                    pose = frame.ego_pose_truth
                    cells = mapper.integrate(frame.scan, pose, tracer)
                else:
                    slam = slam_step(mapper, frame.scan, history, config.matcher, tracer)
                    pose, cells = slam.pose, slam.observed
                    if slam.flagged:
                        metrics.flagged_steps += 1
                metrics.step_times.append(time.perf_counter() - start)

                observed.flat[cells] = True
                ever_dynamic |= frame.truth_dynamic
                history.append(pose)
                truth.append(frame.ego_pose_truth)
                metrics.times.append(frame.time)
                last_frame = frame
                while pending and frame.time >= pending[0] - 1e-9:
                    snapshot_time = pending.pop(0)
                    if out_dir is not None:
                        write_pixmap(out_dir / f"snapshot_{snapshot_time:08.3f}.ppm", mapper.render())
        result = Result.OK(metrics)
    except Exception as e:
        failure = f"stopped after {len(history)} frames: {_format_exception(e)}"
        metrics.error = failure
        tracer.error(failure)
        logger.error(f"run {tracer.name}: {failure}")
        result = Result.FAIL(metrics)

    _finish_metrics(metrics, mapper, history, truth, last_frame, ever_dynamic, observed)
    _warn_about_safety_nets(tracer, metrics)
    tracer.set_end(result)
    if out_dir is not None:
        write_pixmap(out_dir / "map_final.ppm", mapper.render())
        _write_poses_csv(out_dir / "poses.csv", metrics.times, truth, history)
        summary = {"metrics": metrics.json(), "trace": tracer.json()}
        (out_dir / "summary.json").write_bytes(_json_dumps(summary, indent=2))
        if not result.is_ok():
            (out_dir / "PARTIAL").write_text(failure + "\n", encoding="utf-8")
    logger.info(
        f"run {tracer.name}: {result.status} static accuracy {metrics.static_accuracy:.4f}, "
        f"traces {metrics.trace_count}, pose rmse {metrics.pose_rmse:.4f} m, {metrics.mean_step_ms:.1f} ms/step"
    )
    return result


def _finish_metrics(
    metrics: RunMetrics,
    mapper: Mapper,
    estimate: list[Pose2D],
    truth: list[Pose2D],
    last_frame: Frame | None,
    ever_dynamic: BoolArray,
    observed: BoolArray,
) -> None:
    metrics.frames = len(estimate)
    metrics.error_x = [e.x - t.x for e, t in zip(estimate, truth)]
    metrics.error_y = [e.y - t.y for e, t in zip(estimate, truth)]
    metrics.error_theta = [normalize_angle(e.theta - t.theta) for e, t in zip(estimate, truth)]
    planar = metrics.planar_errors()
    if len(planar):
        metrics.pose_rmse = float(np.sqrt(np.mean(planar**2)))
        metrics.max_pose_error = float(planar.max())
    diagnostics = getattr(mapper, "diagnostics", None)
    if isinstance(diagnostics, FilterDiagnostics):
        metrics.diagnostics = diagnostics
    if last_frame is not None:
        metrics.static_accuracy, metrics.trace_count = score_map(
            mapper.occupancy_layer(), last_frame.truth_static, last_frame.truth_dynamic, ever_dynamic, observed
        )


def _warn_about_safety_nets(tracer: TraceNode, metrics: RunMetrics) -> None:
    """One summary warning per safety net that fired during the run, instead of one per frame."""
    diagnostics = metrics.diagnostics
    notes = []
    if metrics.flagged_steps:
        notes.append(f"{metrics.flagged_steps}/{metrics.frames} steps kept the motion model pose")
    if diagnostics.degenerate_updates:
        notes.append(f"{diagnostics.degenerate_updates} degenerate cell updates fell back to the prior")
    if diagnostics.clipped_cells:
        notes.append(
            f"{diagnostics.clipped_cells} predicted cells were clipped to the simplex "
            f"(total mass {diagnostics.clipped_mass:.3g})"
        )
    for note in notes:
        tracer.log(note, level="warning")
        logger.warning(f"run {tracer.name}: {note}")


@dataclass
class ComparisonTable:
    """Side-by-side metrics of runs sharing a scenario and seed, in config order."""

    labels: list[str]
    results: list[Result]

    COLUMNS = ("config", "status", "static_acc", "traces", "pose_rmse", "max_err", "flagged")

    def rows(self) -> list[list[str]]:
        rows = []
        for label, result in zip(self.labels, self.results):
            m = cast(RunMetrics, result.data)
            rows.append(
                [
                    label,
                    str(result.status),
                    f"{m.static_accuracy:.4f}",
                    str(m.trace_count),
                    f"{m.pose_rmse:.4f}",
                    f"{m.max_pose_error:.4f}",
                    str(m.flagged_steps),
                ]
            )
        return rows

    def render(self) -> str:
        rows = [list(self.COLUMNS)] + self.rows()
        widths = [max(len(row[i]) for row in rows) for i in range(len(self.COLUMNS))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
        return "\n".join(lines) + "\n"

    def __str__(self) -> str:
        return self.render()


def _check_comparable(configs: Sequence[RunConfig]) -> None:
    if len(configs) < 2:
        raise TgmProgrammingError(f"compare: needs at least 2 configs, got {len(configs)}")
    keys = {(c.scenario_key(), c.seed) for c in configs}
    if len(keys) != 1:
        raise TgmProgrammingError("compare: all configs must share the same scenario and seed")
    labels = [c.label for c in configs]
    out_dirs = [str(c.out_dir) for c in configs if c.out_dir is not None]
    if len(set(out_dirs)) != len(out_dirs):
        raise TgmProgrammingError(f"compare: configs {labels} write to the same output directory")


async def compare_async(configs: Sequence[RunConfig], concurrency_limit: int = 3) -> ComparisonTable:
    """Runs the configs concurrently in worker threads; each run owns all of its state."""
    _check_comparable(configs)
    if concurrency_limit <= 0:
        raise TgmProgrammingError("compare: concurrency_limit <= 0 will make deadlocking")
    semaphore = asyncio.Semaphore(concurrency_limit)

    async def _child_task(config: RunConfig) -> Result:
        async with semaphore:
            return await asyncio.to_thread(run, config)

    results: list[Result] = await asyncio.gather(*[_child_task(c) for c in configs])
    return ComparisonTable([c.label for c in configs], results)


def compare(configs: Sequence[RunConfig], concurrency_limit: int = 3) -> ComparisonTable:
    return asyncio.run(compare_async(configs, concurrency_limit))


################
# Utils
################


def _format_exception(e: BaseException) -> str:
    return f"{e.__class__.__name__}: {str(e)}"


def _try_to_string(data: Any) -> str:
    if isinstance(data, (dict, list)):
        try:
            return _json_dumps(data).decode()
        except Exception:
            return str(data)
    return str(data)


################
# Logging
################


class ColorFormatter(logging.Formatter):
    COLORS = {
        logging.DEBUG: "\033[36m",  # cyan
        logging.INFO: "\033[32m",  # green
        logging.WARNING: "\033[33m",  # yellow
        logging.ERROR: "\033[31m",  # red
        logging.CRITICAL: "\033[1;31m",  # bold red
    }
    RESET = "\033[0m"

    def format(self, record):
        msg = super().format(record)
        color = self.COLORS.get(record.levelno, "")
        return f"{color}{msg}{self.RESET}"


logger = logging.getLogger(__name__)
_DISABLE_TINYTGM_LOGGING = os.getenv("DISABLE_TINYTGM_LOGGING", "").strip().lower() not in {"", "0", "false"}
if _DISABLE_TINYTGM_LOGGING:
    logger.disabled = True
else:
    handler = logging.StreamHandler()
    handler.setFormatter(ColorFormatter("[%(levelname)s] %(asctime)s %(message)s"))
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)


def _json_loads(data: str | bytes | bytearray) -> Any:
    if orjson is not None:
        return orjson.loads(data)
    if isinstance(data, bytearray):
        data = bytes(data)
    return json.loads(data)


def _json_dumps(data: Any, *, indent: int | None = None) -> bytes:
    if orjson is not None:
        option = orjson.OPT_INDENT_2 if indent == 2 else 0
        return orjson.dumps(data, option=option)
    return json.dumps(
        data,
        indent=indent,
        ensure_ascii=False,
        separators=(",", ":") if indent is None else None,
    ).encode("utf-8")


################
# CLI
################


def _main(argv: Sequence[str] | None = None) -> int:
    import argparse

    parser = argparse.ArgumentParser(
        prog="tinytgm",
        description=(
            "tinytgm utilities\n\n"
            "  run       simulate a scenario and map it with one mapper\n"
            "  compare   run several mappers on the same scenario and seed\n"
            "  scenario  write a built-in scenario as YAML"
        ),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    commands = parser.add_subparsers(dest="command")

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--scenario", required=True, help="scenario YAML file or built-in name")
        p.add_argument("--pose", choices=POSE_MODES, default="truth", help="ground truth poses or scan matching")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0, help="simulator seed")
        p.add_argument("--range", type=float, default=None, dest="max_range", help="override sensor max range (m)")
        p.add_argument("--resolution", type=float, default=None, help="override grid resolution (m)")
        p.add_argument("--v-max", type=float, default=None, dest="v_max", help="TGM speed assumption (m/s)")

    run_parser = commands.add_parser("run", help="run one mapper")
    add_common(run_parser)
    run_parser.add_argument("--mapper", choices=MAPPER_NAMES, default="tgm")
    run_parser.add_argument("--snapshot", type=float, nargs="*", default=[], help="snapshot times (s)")
    run_parser.add_argument("--frame-log", action="store_true", help="also write frames.jsonl")

    compare_parser = commands.add_parser("compare", help="compare mappers on one scenario")
    add_common(compare_parser)
    compare_parser.add_argument("--mappers", default="tgm,ogm,cogm", help="comma separated mapper names")
    compare_parser.add_argument("--concurrency", type=int, default=3)

    scenario_parser = commands.add_parser("scenario", help="dump a built-in scenario to YAML")
    scenario_parser.add_argument("--name", choices=sorted(BUILTIN_SCENARIOS), required=True)
    scenario_parser.add_argument("--out", required=True, help="target YAML file")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            config = RunConfig(
                scenario=args.scenario,
                mapper=args.mapper,
                pose_mode=args.pose,
                out_dir=args.out,
                seed=args.seed,
                snapshot_times=tuple(args.snapshot),
                v_max=args.v_max,
                resolution=args.resolution,
                range_override=args.max_range,
                frame_log=args.frame_log,
            )
            result = run(config)
            print(_json_dumps({k: v for k, v in cast(RunMetrics, result.data).json().items() if k != "series"}).decode())
            return 0 if result.is_ok() else 1
        if args.command == "compare":
            names = [name.strip() for name in args.mappers.split(",") if name.strip()]
            configs = [
                RunConfig(
                    scenario=args.scenario,
                    mapper=cast(MapperName, name),
                    pose_mode=args.pose,
                    out_dir=Path(args.out) / name,
                    seed=args.seed,
                    v_max=args.v_max,
                    resolution=args.resolution,
                    range_override=args.max_range,
                )
                for name in names
            ]
            table = compare(configs, concurrency_limit=args.concurrency)
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "comparison.txt").write_text(table.render(), encoding="utf-8")
            print(table.render(), end="")
            return 0 if all(r.is_ok() for r in table.results) else 1
        if args.command == "scenario":
            dump_world_spec(BUILTIN_SCENARIOS[args.name](), args.out)
            return 0
    except TgmError as e:
        logger.error(_format_exception(e))
        return 2

    parser.print_help()
    return 0


if __name__ == "__main__":
    raise SystemExit(_main())
