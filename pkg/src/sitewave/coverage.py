"""Route and grid coverage evaluation.

Evaluates receiver routes and rectangular coverage grids against one
transmitter, combines per-path amplitudes into RSS, computes mean/SD
statistics and coverage-category histograms, and writes CSV/PPM
artifacts.

Determinism contract: results are bit-identical across repeated runs
and across worker counts. Receivers are partitioned into contiguous
chunks; every chunk accumulates its receivers' contributions in global
signature order, so each receiver sees the same float operations in
the same order no matter how the set is split.
"""

from __future__ import annotations

import multiprocessing
import os
from dataclasses import dataclass, field

import numpy as np

from . import em, tracer

# Distinct from em.EMPTY_RSS_DBM (no path reached an outdoor receiver):
# cells whose center lies inside a building are never evaluated.
IN_BUILDING_RSS_DBM = -300.0

_DEFAULT_CELL_M = 2.0
_DEFAULT_RX_HEIGHT_M = 1.6


# ----------------------------------------------------------------------
# specs and results


@dataclass
class RouteSpec:
    """Ordered receiver positions, explicit or sampled along a polyline.

    Either `points` carries explicit (n, 3) scene coordinates, or
    `waypoints` carries an (k, 2) xy polyline that is resampled by arc
    length at `spacing` meters (endpoint included when it lands within
    1e-9) or into exactly `count` evenly spaced receivers, at `height`
    meters above local terrain.
    """

    points: np.ndarray | None = None
    waypoints: np.ndarray | None = None
    spacing: float | None = None
    count: int | None = None
    height: float = _DEFAULT_RX_HEIGHT_M

    def __post_init__(self):
        if (self.points is None) == (self.waypoints is None):
            raise ValueError("give exactly one of points or waypoints")
        if self.points is not None:
            self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
            if len(self.points) < 1:
                raise ValueError("route needs at least one receiver")
        else:
            self.waypoints = np.asarray(self.waypoints, dtype=np.float64).reshape(-1, 2)
            if len(self.waypoints) < 2:
                raise ValueError("waypoint route needs at least two vertices")
            if (self.spacing is None) == (self.count is None):
                raise ValueError("give exactly one of spacing or count")
            if self.spacing is not None and self.spacing <= 0:
                raise ValueError("spacing must be positive")
            if self.count is not None and self.count < 1:
                raise ValueError("count must be >= 1")
        if not np.isfinite(self.height):
            raise ValueError("height must be finite")

    def positions(self, scene):
        """Receiver coordinates in scene frame, (n, 3)."""
        if self.points is not None:
            return self.points.copy()
        seg = np.diff(self.waypoints, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        total = cum[-1]
        if total <= 0:
            raise ValueError("waypoint polyline has zero length")
        if self.count is not None:
            s = np.linspace(0.0, total, self.count)
        else:
            s = np.arange(0.0, total + 1e-9, self.spacing)
        x = np.interp(s, cum, self.waypoints[:, 0])
        y = np.interp(s, cum, self.waypoints[:, 1])
        z = scene.ground_height(x, y) + self.height
        return np.column_stack([x, y, np.broadcast_to(z, x.shape)])


@dataclass
class GridSpec:
    """Rectangular cell grid; (x0, y0) is the lower-left corner and
    receivers sit at cell centers, `height` above local terrain."""

    x0: float
    y0: float
    nx: int
    ny: int
    cell_size: float = _DEFAULT_CELL_M
    height: float = _DEFAULT_RX_HEIGHT_M

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid needs at least one cell per axis")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if not np.isfinite(self.height):
            raise ValueError("height must be finite")

    def centers_xy(self):
        xs = self.x0 + (np.arange(self.nx) + 0.5) * self.cell_size
        ys = self.y0 + (np.arange(self.ny) + 0.5) * self.cell_size
        gx, gy = np.meshgrid(xs, ys)
        return gx, gy


@dataclass
class RouteResult:
    """Per-receiver outcome of eval_route, ordered like the route."""

    positions: np.ndarray  # (n, 3)
    rss_dbm: np.ndarray  # (n,)
    los: np.ndarray  # (n,) bool
    n_paths: np.ndarray  # (n,) int64

    def __post_init__(self):
        n = len(self.positions)
        if not (len(self.rss_dbm) == len(self.los) == len(self.n_paths) == n):
            raise ValueError("route result arrays disagree in length")


@dataclass
class CoverageGrid:
    """RSS heatmap over cell centers; row 0 is the southernmost row."""

    origin: tuple  # (x0, y0) lower-left corner
    cell_size: float
    rx_height: float
    rss_dbm: np.ndarray  # (ny, nx)
    los: np.ndarray  # (ny, nx) bool
    in_building: np.ndarray  # (ny, nx) bool
    n_paths: np.ndarray  # (ny, nx) int64

    def __post_init__(self):
        shape = self.rss_dbm.shape
        for arr in (self.los, self.in_building, self.n_paths):
            if arr.shape != shape:
                raise ValueError("coverage grid matrices disagree in shape")
        if not np.all(np.isfinite(self.rss_dbm)):
            raise ValueError("grid RSS must be finite or a sentinel")


@dataclass
class CategoryThresholds:
    """Lower dBm bounds of the excellent/good/fair bands; anything
    below fair is poor. Boundary values belong to the better band."""

    excellent: float = -75.0
    good: float = -90.0
    fair: float = -105.0

    def __post_init__(self):
        if not self.excellent > self.good > self.fair:
            raise ValueError("thresholds must be strictly descending")


@dataclass
class Histogram:
    """Cell counts per coverage category plus excluded sentinel cells."""

    counts: np.ndarray  # (4,) int64: excellent, good, fair, poor
    excluded: int

    names = ("excellent", "good", "fair", "poor")

    @property
    def fractions(self):
        total = int(self.counts.sum())
        if total == 0:
            return np.zeros(4)
        return self.counts / total


# ----------------------------------------------------------------------
# evaluation engine

_FORK_JOB = None


def _eval_chunk(scene, tx, tx_ant, rx_ant, radio, cfg, rxs, sequences):
    """RSS / LOS / path count for one receiver chunk.

    Batches arrive sorted by signature, and within a batch every
    receiver appears at most once, so the per-receiver accumulation
    order is the receiver's own sorted signature list regardless of
    which chunk it lands in.
    """
    n = len(rxs)
    power = np.zeros(n)
    coherent = np.zeros(n, dtype=np.complex128)
    n_paths = np.zeros(n, dtype=np.int64)
    los = np.zeros(n, dtype=bool)
    if n == 0:
        return np.full(0, em.EMPTY_RSS_DBM), los, n_paths
    for batch in tracer.trace_bulk(scene, tx, rxs, cfg, sequences=sequences):
        amps = em.batch_amplitudes(batch, tx_ant, rx_ant, radio)
        if batch.signature == ():
            los[batch.rx_idx] = True
        n_paths[batch.rx_idx] += 1
        if radio.combine == "coherent":
            coherent[batch.rx_idx] += amps
        else:
            power[batch.rx_idx] += np.abs(amps) ** 2
    total = np.abs(coherent) ** 2 if radio.combine == "coherent" else power
    rss = np.full(n, em.EMPTY_RSS_DBM)
    has = n_paths > 0
    rss[has] = 10.0 * np.log10(np.maximum(total[has], 1e-300))
    return rss, los, n_paths


def _worker(bounds):
    scene, tx, tx_ant, rx_ant, radio, cfg, rxs, sequences = _FORK_JOB
    lo, hi = bounds
    return _eval_chunk(scene, tx, tx_ant, rx_ant, radio, cfg, rxs[lo:hi], sequences)


def _eval_points(scene, tx, tx_ant, rx_ant, radio, cfg, rxs, workers=1):
    """Evaluate arbitrary receiver rows, optionally on forked workers."""
    global _FORK_JOB
    tx = np.asarray(tx, dtype=np.float64)
    rxs = np.asarray(rxs, dtype=np.float64).reshape(-1, 3)
    sequences = ()
    if cfg.max_reflections >= 1:
        sequences = tracer.enumerate_reflection_sequences(scene, tx, cfg)
    n = len(rxs)
    if workers <= 1 or n < 2 * workers:
        return _eval_chunk(scene, tx, tx_ant, rx_ant, radio, cfg, rxs, sequences)
    edges = np.linspace(0, n, workers + 1).astype(np.int64)
    bounds = [(int(edges[i]), int(edges[i + 1])) for i in range(workers)]
    _FORK_JOB = (scene, tx, tx_ant, rx_ant, radio, cfg, rxs, sequences)
    try:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(processes=workers) as pool:
            parts = pool.map(_worker, bounds)
    finally:
        _FORK_JOB = None
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(3))


def eval_route(scene, tx, tx_ant, rx_ant, radio, cfg, route, workers=1):
    """RSS along an ordered receiver route; see RouteResult.

    Receivers below local terrain are rejected with the offending
    index. Receivers inside buildings are evaluated normally (their
    LOS is blocked by the walls, so they come out NLOS).
    """
    positions = route.positions(scene)
    ground = np.atleast_1d(scene.ground_height(positions[:, 0], positions[:, 1]))
    bad = np.nonzero(positions[:, 2] < ground - 1e-9)[0]
    if len(bad):
        i = int(bad[0])
        raise ValueError(
            f"receiver {i} at z={positions[i, 2]:.3f} m is below terrain "
            f"({ground[i]:.3f} m)"
        )
    rss, los, n_paths = _eval_points(
        scene, tx, tx_ant, rx_ant, radio, cfg, positions, workers
    )
    return RouteResult(positions=positions, rss_dbm=rss, los=los, n_paths=n_paths)


def eval_grid(scene, tx, tx_ant, rx_ant, radio, cfg, spec, workers=1):
    """Coverage heatmap over a cell grid; see CoverageGrid.

    Cell centers inside a building get the in-building sentinel and
    are skipped; centers outside the terrain raster are an error.
    """
    gx, gy = spec.centers_xy()
    if scene.terrain is not None:
        x0, y0, x1, y1 = scene.terrain.extent()
        if gx.min() < x0 or gx.max() > x1 or gy.min() < y0 or gy.max() > y1:
            raise ValueError("coverage grid extends outside the terrain raster")
    z = scene.ground_height(gx.ravel(), gy.ravel()) + spec.height
    rxs = np.column_stack([gx.ravel(), gy.ravel(), z])

    inside = np.zeros(len(rxs), dtype=bool)
    if scene.buildings:
        parity = scene.building_index().crossing_parity(rxs)
        inside = parity.any(axis=1)

    rss = np.full(len(rxs), IN_BUILDING_RSS_DBM)
    los = np.zeros(len(rxs), dtype=bool)
    n_paths = np.zeros(len(rxs), dtype=np.int64)
    out_rows = np.nonzero(~inside)[0]
    if len(out_rows):
        r, l, c = _eval_points(
            scene, tx, tx_ant, rx_ant, radio, cfg, rxs[out_rows], workers
        )
        rss[out_rows] = r
        los[out_rows] = l
        n_paths[out_rows] = c
    shape = (spec.ny, spec.nx)
    return CoverageGrid(
        origin=(spec.x0, spec.y0),
        cell_size=spec.cell_size,
        rx_height=spec.height,
        rss_dbm=rss.reshape(shape),
        los=los.reshape(shape),
        in_building=inside.reshape(shape),
        n_paths=n_paths.reshape(shape),
    )


# ----------------------------------------------------------------------
# statistics


def stats(values):
    """Arithmetic mean and population SD, both in the dB domain."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if len(values) == 0:
        raise ValueError("stats needs at least one value")
    return float(values.mean()), float(values.std())


def _is_sentinel(values):
    return (values == em.EMPTY_RSS_DBM) | (values == IN_BUILDING_RSS_DBM)


def histogram(values, thresholds=None):
    """Coverage-category histogram; sentinels excluded and counted."""
    thresholds = thresholds or CategoryThresholds()
    values = np.asarray(values, dtype=np.float64).ravel()
    sent = _is_sentinel(values)
    v = values[~sent]
    counts = np.array(
        [
            int((v >= thresholds.excellent).sum()),
            int(((v < thresholds.excellent) & (v >= thresholds.good)).sum()),
            int(((v < thresholds.good) & (v >= thresholds.fair)).sum()),
            int((v < thresholds.fair).sum()),
        ],
        dtype=np.int64,
    )
    return Histogram(counts=counts, excluded=int(sent.sum()))


# ----------------------------------------------------------------------
# export

_RAMP_STOPS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
_RAMP_RGB = np.array(
    [
        [0, 0, 130],
        [0, 80, 255],
        [0, 200, 120],
        [255, 220, 0],
        [255, 30, 30],
    ],
    dtype=np.float64,
)
_SENTINEL_GRAY = (128, 128, 128)


def _atomic_write(dest, data):
    """Write bytes to a temp file and rename; no partial files."""
    dest = os.fspath(dest)
    tmp = dest + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, dest)


def export_route_csv(result, dest):
    """index,x,y,z,rss_dbm,los,n_paths with one row per receiver."""
    lines = ["index,x,y,z,rss_dbm,los,n_paths"]
    for i in range(len(result.positions)):
        x, y, z = (float(v) for v in result.positions[i])
        lines.append(
            f"{i},{x!r},{y!r},{z!r},{float(result.rss_dbm[i])!r},"
            f"{int(result.los[i])},{int(result.n_paths[i])}"
        )
    _atomic_write(dest, ("\n".join(lines) + "\n").encode())


def export_grid_csv(grid, dest):
    """Bare RSS matrix, southernmost row first."""
    lines = [",".join(repr(float(v)) for v in row) for row in grid.rss_dbm]
    _atomic_write(dest, ("\n".join(lines) + "\n").encode())


def export_grid_ppm(grid, dest, vmin=-120.0, vmax=-40.0):
    """P6 heatmap with a fixed color ramp over [vmin, vmax] dBm.

    The top pixel row is the northernmost grid row. In-building cells
    render gray; no-path cells clamp to the cold end of the ramp.
    """
    rss = grid.rss_dbm[::-1]
    mask = grid.in_building[::-1]
    t = np.clip((rss - vmin) / (vmax - vmin), 0.0, 1.0)
    rgb = np.stack(
        [np.interp(t, _RAMP_STOPS, _RAMP_RGB[:, c]) for c in range(3)], axis=-1
    )
    rgb[mask] = _SENTINEL_GRAY
    ny, nx = rss.shape
    header = f"P6\n{nx} {ny}\n255\n".encode()
    _atomic_write(dest, header + np.rint(rgb).astype(np.uint8).tobytes())


def export_histogram_csv(hist, dest):
    """category,count,fraction rows; trailing row counts excluded cells."""
    fr = hist.fractions
    lines = ["category,count,fraction"]
    for i, name in enumerate(hist.names):
        lines.append(f"{name},{int(hist.counts[i])},{float(fr[i])!r}")
    lines.append(f"excluded,{hist.excluded},")
    _atomic_write(dest, ("\n".join(lines) + "\n").encode())
