"""World model construction: OSM footprint/foliage parsing, terrain grids,
LOD1/LOD2 prism extrusion, material assignment, diffraction edge extraction,
and scene (de)serialization.

Scene-local coordinates are meters with the origin at the configured
projection anchor; row 0 of a terrain grid is its southernmost row.
"""

from __future__ import annotations

import json
import math
import warnings as _warnings
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import geometry
from .em import FOLIAGE_MATERIALS, MATERIALS, Material

EARTH_RADIUS = 6378137.0  # WGS84 equatorial, meters
DEFAULT_LEVEL_HEIGHT = 3.0
DEFAULT_BUILDING_HEIGHT = 9.0
FOREST_CANOPY_BAND = (2.0, 12.0)  # meters above local terrain
TREE_CANOPY_BAND = (2.0, 10.0)
TREE_RADIUS = 3.0


# ----------------------------------------------------------------------
# projection


def project_lonlat(lon, lat, origin):
    """Local equirectangular projection to scene meters."""
    lon0, lat0 = origin
    x = EARTH_RADIUS * math.cos(math.radians(lat0)) * math.radians(lon - lon0)
    y = EARTH_RADIUS * math.radians(lat - lat0)
    return x, y


def unproject_xy(x, y, origin):
    lon0, lat0 = origin
    lon = lon0 + math.degrees(x / (EARTH_RADIUS * math.cos(math.radians(lat0))))
    lat = lat0 + math.degrees(y / EARTH_RADIUS)
    return lon, lat


# ----------------------------------------------------------------------
# domain types


@dataclass
class FoliageVolume:
    """Attenuating vegetation volume; never blocks or reflects rays."""

    shape: object  # geometry.BoxVolume | geometry.CylinderVolume
    alpha_v: float = 1.0
    alpha_h: float = 1.0
    model: str = "generic"  # "generic" | "weissberger"
    name: str = "foliage"

    def __post_init__(self):
        if self.alpha_v < 0 or self.alpha_h < 0:
            raise ValueError("foliage attenuation must be >= 0")
        if self.model not in ("generic", "weissberger"):
            raise ValueError(f"unknown foliage model {self.model!r}")


@dataclass
class Footprint:
    """Closed 2D building outline plus extrusion hints.

    The ring is stored open (first vertex not repeated), in lon/lat
    degrees straight from OSM or in projected meters.
    """

    ring: np.ndarray  # (n, 2)
    height_m: float | None = None
    levels: int | None = None
    roof: str = "flat"
    name: str = "building"

    def __post_init__(self):
        ring = np.asarray(self.ring, dtype=np.float64).reshape(-1, 2)
        if len(ring) > 1 and np.array_equal(ring[0], ring[-1]):
            ring = ring[:-1]
        # Collapse consecutive exact duplicates (repeated node refs).
        # Near-duplicates must survive: in lon/lat degrees, legitimate
        # building edges are only ~1e-4 apart.
        keep = [0]
        for i in range(1, len(ring)):
            if not np.array_equal(ring[i], ring[keep[-1]]):
                keep.append(i)
        ring = ring[keep]
        if len(np.unique(np.round(ring, 9), axis=0)) < 3:
            raise ValueError(f"footprint {self.name!r} needs >= 3 distinct vertices")
        self.ring = ring

    def height(self):
        if self.height_m is not None:
            return float(self.height_m)
        if self.levels is not None:
            return float(self.levels) * DEFAULT_LEVEL_HEIGHT
        return DEFAULT_BUILDING_HEIGHT


@dataclass
class OsmFoliage:
    """Raw vegetation primitive from OSM, before terrain placement."""

    kind: str  # "box" | "cylinder"
    lonlat: np.ndarray  # ring (n, 2) for boxes, single point (2,) for trees
    radius: float = TREE_RADIUS
    band: tuple | None = None  # defaults by kind at placement time
    name: str = "foliage"


@dataclass
class TerrainGrid:
    """Regular elevation raster; (x0, y0) is the lower-left corner."""

    x0: float
    y0: float
    cell_size: float
    heights: np.ndarray  # (nrows, ncols), row 0 = south

    def __post_init__(self):
        self.heights = np.asarray(self.heights, dtype=np.float64)
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if self.heights.size == 0:
            raise ValueError("terrain grid is empty")
        if not np.all(np.isfinite(self.heights)):
            raise ValueError("terrain heights must be finite")

    def extent(self):
        nr, nc = self.heights.shape
        return (
            self.x0,
            self.y0,
            self.x0 + nc * self.cell_size,
            self.y0 + nr * self.cell_size,
        )

    def sample(self, x, y):
        """Bilinear elevation between cell centers; clamped outside with
        a warning."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        nr, nc = self.heights.shape
        fx = (x - self.x0) / self.cell_size - 0.5
        fy = (y - self.y0) / self.cell_size - 0.5
        if np.any(fx < -0.5) or np.any(fx > nc - 0.5) or np.any(fy < -0.5) or np.any(
            fy > nr - 0.5
        ):
            _warnings.warn("terrain query outside grid extent; clamping", stacklevel=2)
        fx = np.clip(fx, 0.0, nc - 1.0)
        fy = np.clip(fy, 0.0, nr - 1.0)
        j0 = np.clip(np.floor(fx).astype(np.int64), 0, nc - 2) if nc > 1 else np.zeros_like(fx, dtype=np.int64)
        i0 = np.clip(np.floor(fy).astype(np.int64), 0, nr - 2) if nr > 1 else np.zeros_like(fy, dtype=np.int64)
        tx = fx - j0 if nc > 1 else np.zeros_like(fx)
        ty = fy - i0 if nr > 1 else np.zeros_like(fy)
        j1 = np.minimum(j0 + 1, nc - 1)
        i1 = np.minimum(i0 + 1, nr - 1)
        h = self.heights
        out = (
            h[i0, j0] * (1 - tx) * (1 - ty)
            + h[i0, j1] * tx * (1 - ty)
            + h[i1, j0] * (1 - tx) * ty
            + h[i1, j1] * tx * ty
        )
        return out if out.shape else float(out)

    def to_mesh(self, material_id="medium_dry_earth", object_id="terrain"):
        """Triangulate the height field into a surface mesh over cell
        centers (normals up)."""
        nr, nc = self.heights.shape
        xs = self.x0 + (np.arange(nc) + 0.5) * self.cell_size
        ys = self.y0 + (np.arange(nr) + 0.5) * self.cell_size
        gx, gy = np.meshgrid(xs, ys)
        verts = np.column_stack([gx.ravel(), gy.ravel(), self.heights.ravel()])
        tris = []
        for i in range(nr - 1):
            for j in range(nc - 1):
                a = i * nc + j
                b = a + 1
                c = a + nc
                d = c + 1
                tris.append([a, b, d])
                tris.append([a, d, c])
        return geometry.TriMesh(
            verts, np.array(tris, dtype=np.int64), material_id=material_id, object_id=object_id
        )


def flat_terrain(x0, y0, size, cell_size=30.0, z=0.0):
    """Convenience constructor for a level rectangular terrain."""
    n = max(int(math.ceil(size / cell_size)) + 1, 2)
    return TerrainGrid(x0, y0, cell_size, np.full((n, n), float(z)))


@dataclass
class DiffractionEdge:
    """Convex wedge between two faces of one building (or a roof ridge).

    The o-face frame (n0 outward normal, t0 in-plane tangent away from
    the edge) anchors the diffraction angle convention; n_wedge is the
    exterior angle divided by pi.
    """

    a: np.ndarray
    b: np.ndarray
    e_hat: np.ndarray = field(init=False)
    exterior_angle: float = 0.0
    n0: np.ndarray = None
    t0: np.ndarray = None
    n1: np.ndarray = None
    t1: np.ndarray = None
    kind: str = "rooftop-horizontal"
    object_id: str = ""
    material_id: str = ""

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        length = np.linalg.norm(self.b - self.a)
        if length <= 0.1:
            raise ValueError("diffraction edge shorter than 0.1 m")
        if not math.pi < self.exterior_angle <= 2 * math.pi + 1e-9:
            raise ValueError("exterior angle must lie in (pi, 2 pi]")
        self.e_hat = (self.b - self.a) / length

    @property
    def n_wedge(self):
        return self.exterior_angle / math.pi

    @property
    def length(self):
        return float(np.linalg.norm(self.b - self.a))


@dataclass
class Scene:
    """Immutable simulation world; derived structures are cached."""

    materials: dict
    buildings: list
    terrain: TerrainGrid | None = None
    foliage: list = field(default_factory=list)
    edges: list = field(default_factory=list)
    origin: tuple | None = None
    terrain_mesh: geometry.TriMesh = None

    def __post_init__(self):
        if self.terrain_mesh is None and self.terrain is not None:
            self.terrain_mesh = self.terrain.to_mesh()
        for mesh in self.all_meshes():
            if mesh.material_id not in self.materials:
                raise ValueError(
                    f"mesh {mesh.object_id!r} references unknown material "
                    f"{mesh.material_id!r}"
                )
        self._index = None
        self._building_index = None
        self._faces = None

    def all_meshes(self):
        meshes = list(self.buildings)
        if self.terrain_mesh is not None:
            meshes.append(self.terrain_mesh)
        return meshes

    def ground_height(self, x, y):
        """Terrain elevation at (x, y); zero for scenes without terrain."""
        if self.terrain is None:
            return np.zeros_like(np.asarray(x, dtype=np.float64)) + 0.0
        return self.terrain.sample(x, y)

    def index(self):
        if self._index is None:
            self._index = geometry.build_index(self.all_meshes())
        return self._index

    def building_index(self):
        if self._building_index is None:
            self._building_index = geometry.build_index(self.buildings)
        return self._building_index

    def faces(self):
        """Planar faces over buildings and terrain, for specular search."""
        if self._faces is None:
            self._faces = geometry.extract_planar_faces(self.all_meshes())
        return self._faces

    def points_in_building(self, points):
        """(N,) bool: point enclosed by any building prism."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not self.buildings:
            return np.zeros(len(points), dtype=bool)
        return self.building_index().crossing_parity(points).any(axis=1)


# ----------------------------------------------------------------------
# OSM parsing


def _tags(elem):
    return {t.get("k"): t.get("v") for t in elem.findall("tag")}


def _parse_height(text):
    if text is None:
        return None
    cleaned = text.strip().lower().removesuffix("m").strip()
    try:
        return float(cleaned)
    except ValueError:
        return None


def parse_osm(data):
    """Extract building footprints and vegetation primitives from OSM XML.

    Returns (footprints, foliage_primitives, warnings). Footprint rings
    stay in lon/lat degrees; projection happens at scene build time.
    Never raises on content problems; those become warning records.
    """
    if isinstance(data, str):
        data = data.encode("utf-8")
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        line, col = exc.position
        raise ValueError(f"OSM XML parse error at line {line}, column {col}: {exc.msg}")

    nodes = {}
    node_tags = {}
    for nd in root.findall("node"):
        nid = nd.get("id")
        nodes[nid] = (float(nd.get("lon")), float(nd.get("lat")))
        tags = _tags(nd)
        if tags:
            node_tags[nid] = tags

    footprints = []
    foliage = []
    warn = []

    for way in root.findall("way"):
        wid = way.get("id", "?")
        tags = _tags(way)
        refs = [nd.get("ref") for nd in way.findall("nd")]
        is_building = "building" in tags and tags["building"] != "no"
        is_forest = tags.get("landuse") == "forest" or tags.get("natural") == "wood"
        if not (is_building or is_forest):
            continue
        missing = [r for r in refs if r not in nodes]
        if missing:
            warn.append(f"way {wid}: missing node refs {missing[:3]}; skipped")
            continue
        if len(refs) < 4 or refs[0] != refs[-1]:
            warn.append(f"way {wid}: not a closed ring; skipped")
            continue
        ring = np.array([nodes[r] for r in refs[:-1]], dtype=np.float64)
        if is_building:
            height = _parse_height(tags.get("height"))
            if "height" in tags and height is None:
                warn.append(f"way {wid}: unreadable height {tags['height']!r}; using fallback")
            levels = None
            if tags.get("building:levels"):
                try:
                    levels = int(float(tags["building:levels"]))
                except ValueError:
                    warn.append(f"way {wid}: unreadable building:levels; ignored")
            roof = "gabled" if tags.get("roof:shape") == "gabled" else "flat"
            try:
                footprints.append(
                    Footprint(ring, height_m=height, levels=levels, roof=roof, name=f"way/{wid}")
                )
            except ValueError as exc:
                warn.append(f"way {wid}: {exc}; skipped")
        else:
            foliage.append(
                OsmFoliage(kind="box", lonlat=ring, band=FOREST_CANOPY_BAND, name=f"way/{wid}")
            )

    for nid, tags in node_tags.items():
        if tags.get("natural") == "tree":
            foliage.append(
                OsmFoliage(
                    kind="cylinder",
                    lonlat=np.array(nodes[nid]),
                    radius=TREE_RADIUS,
                    band=TREE_CANOPY_BAND,
                    name=f"node/{nid}",
                )
            )

    return footprints, foliage, warn


# ----------------------------------------------------------------------
# terrain loading (Esri ASCII grid)


def load_terrain(data):
    """Parse an Esri ASCII grid; NODATA cells take the nearest valid value."""
    if isinstance(data, bytes):
        data = data.decode("ascii")
    tokens = data.split()
    header = {}
    pos = 0
    while pos + 1 < len(tokens) and tokens[pos].lower() in (
        "ncols",
        "nrows",
        "xllcorner",
        "yllcorner",
        "cellsize",
        "nodata_value",
    ):
        header[tokens[pos].lower()] = float(tokens[pos + 1])
        pos += 2
    for key in ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize"):
        if key not in header:
            raise ValueError(f"terrain header missing {key}")
    ncols = int(header["ncols"])
    nrows = int(header["nrows"])
    values = tokens[pos:]
    if len(values) != ncols * nrows:
        raise ValueError(
            f"terrain data has {len(values)} values, expected {ncols * nrows}"
        )
    grid = np.array(values, dtype=np.float64).reshape(nrows, ncols)
    nodata = header.get("nodata_value")
    if nodata is not None:
        invalid = grid == nodata
        if invalid.all():
            raise ValueError("terrain grid has no valid cells")
        if invalid.any():
            idx = ndimage.distance_transform_edt(
                invalid, return_distances=False, return_indices=True
            )
            grid = grid[tuple(idx)]
    # File rows run north to south; storage row 0 is the south row.
    grid = grid[::-1].copy()
    return TerrainGrid(
        x0=header["xllcorner"],
        y0=header["yllcorner"],
        cell_size=header["cellsize"],
        heights=grid,
    )


# ----------------------------------------------------------------------
# polygon helpers


def ring_area(ring):
    """Signed area (shoelace); positive for counterclockwise rings."""
    x = ring[:, 0]
    y = ring[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_properly_intersect(p1, p2, p3, p4):
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < 1e-12 else (1 if v > 0 else -1)

    o1, o2 = orient(p1, p2, p3), orient(p1, p2, p4)
    o3, o4 = orient(p3, p4, p1), orient(p3, p4, p2)
    return o1 != o2 and o3 != o4 and 0 not in (o1, o2, o3, o4)


def ring_self_intersects(ring):
    n = len(ring)
    for i in range(n):
        a1, a2 = ring[i], ring[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or j == (i + 1) % n:
                continue
            if _segments_properly_intersect(a1, a2, ring[j], ring[(j + 1) % n]):
                return True
    return False


def point_in_ring(ring, pts):
    """Even-odd rule point-in-polygon for (m, 2) query points."""
    pts = np.atleast_2d(pts)
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    n = len(ring)
    for i in range(n):
        x1, y1 = ring[i]
        x2, y2 = ring[(i + 1) % n]
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = x1 + (y - y1) / (y2 - y1) * (x2 - x1)
        inside ^= crosses & (x < np.where(crosses, xi, np.inf))
    return inside


def ear_clip(ring):
    """Triangulate a simple polygon (CCW ring); returns index triples."""
    n = len(ring)
    if n < 3:
        return []
    idx = list(range(n))
    tris = []
    guard = 0
    while len(idx) > 3 and guard < 10 * n * n:
        guard += 1
        n_cur = len(idx)
        for k in range(n_cur):
            i0, i1, i2 = idx[k - 1], idx[k], idx[(k + 1) % n_cur]
            a, b, c = ring[i0], ring[i1], ring[i2]
            cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
            if cross <= 1e-12:  # reflex or collinear corner
                continue
            others = [i for i in idx if i not in (i0, i1, i2)]
            if others:
                tri = np.array([a, b, c])
                inside = _points_in_tri_2d(tri, ring[others])
                if inside.any():
                    continue
            tris.append((i0, i1, i2))
            idx.pop(k)
            break
        else:
            break
    if len(idx) == 3:
        tris.append((idx[0], idx[1], idx[2]))
    return tris


def _points_in_tri_2d(tri, pts):
    a, b, c = tri
    v0 = c - a
    v1 = b - a
    p = pts - a
    d00 = v0 @ v0
    d01 = v0 @ v1
    d11 = v1 @ v1
    d20 = p @ v0
    d21 = p @ v1
    den = d00 * d11 - d01 * d01
    if abs(den) < 1e-20:
        return np.zeros(len(pts), dtype=bool)
    u = (d11 * d20 - d01 * d21) / den
    v = (d00 * d21 - d01 * d20) / den
    return (u > 1e-9) & (v > 1e-9) & (u + v < 1.0 - 1e-9)


# ----------------------------------------------------------------------
# extrusion


def _obb_long_axis(ring):
    """Direction of the longest side of the minimum-area oriented box
    (rotating calipers over hull edge directions)."""
    best = None
    n = len(ring)
    for i in range(n):
        d = ring[(i + 1) % n] - ring[i]
        norm = np.linalg.norm(d)
        if norm < 1e-12:
            continue
        u = d / norm
        v = np.array([-u[1], u[0]])
        pu = ring @ u
        pv = ring @ v
        du, dv = pu.max() - pu.min(), pv.max() - pv.min()
        area = du * dv
        if best is None or area < best[0] - 1e-12:
            best = (area, u if du >= dv else v)
    return best[1] if best else np.array([1.0, 0.0])


def base_elevation(ring, terrain):
    """Minimum terrain height under the footprint (vertices + raster)."""
    samples = [terrain.sample(ring[:, 0], ring[:, 1])]
    x0, y0 = ring.min(axis=0)
    x1, y1 = ring.max(axis=0)
    step = terrain.cell_size
    xs = np.arange(x0, x1 + step, step)
    ys = np.arange(y0, y1 + step, step)
    if len(xs) and len(ys):
        gx, gy = np.meshgrid(xs, ys)
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        inside = point_in_ring(ring, pts)
        if inside.any():
            samples.append(terrain.sample(pts[inside, 0], pts[inside, 1]))
    return float(min(np.min(s) for s in samples))


def extrude(footprints, terrain, lod=1, material_id="concrete"):
    """Build closed prism meshes from footprints (rings in meters).

    Returns (meshes, warnings). LOD2 adds gabled roofs to 4-vertex
    footprints tagged roof=gabled; other gabled footprints fall back to
    flat with a warning.
    """
    meshes = []
    warn = []
    for bi, fp in enumerate(footprints):
        ring = fp.ring
        if ring_self_intersects(ring):
            warn.append(f"footprint {fp.name}: self-intersecting ring; skipped")
            continue
        if ring_area(ring) < 0:
            ring = ring[::-1].copy()
        base = base_elevation(ring, terrain)
        top = base + fp.height()
        n = len(ring)
        gabled = lod == 2 and fp.roof == "gabled"
        if gabled and n != 4:
            warn.append(
                f"footprint {fp.name}: gabled roof needs a 4-vertex outline; using flat"
            )
            gabled = False

        lower = np.column_stack([ring, np.full(n, base)])
        upper = np.column_stack([ring, np.full(n, top)])
        verts = [lower, upper]
        tris = []
        for i in range(n):
            j = (i + 1) % n
            tris.append([i, j, n + j])
            tris.append([i, n + j, n + i])
        roof_tris = ear_clip(ring)
        if gabled:
            axis = _obb_long_axis(ring)
            proj = ring @ axis
            order = np.argsort(proj)
            lowset = set(int(o) for o in order[:2])
            k = next(
                (i for i in range(n) if i in lowset and (i + 1) % n in lowset), None
            )
            if k is None:
                warn.append(
                    f"footprint {fp.name}: cannot place a ridge on this outline; "
                    "using flat"
                )
                gabled = False
        if gabled:
            # Ridge runs between the midpoints of the two short sides
            # (the sides joining the low-projection pair and the
            # high-projection pair), raised 25% of the wall height.
            low_mid = ring[[k, (k + 1) % n]].mean(axis=0)
            high_mid = ring[[(k + 2) % n, (k + 3) % n]].mean(axis=0)
            ridge_z = top + 0.25 * fp.height()
            r0 = len(ring) * 2
            verts.append(
                np.array(
                    [
                        [low_mid[0], low_mid[1], ridge_z],
                        [high_mid[0], high_mid[1], ridge_z],
                    ]
                )
            )
            # Walking the ring from the low gable side: k->k1 is one
            # short side, k2->k3 the other.
            k1, k2, k3 = (k + 1) % n, (k + 2) % n, (k + 3) % n
            roof_tris = []
            tris.extend(
                [
                    [n + k, n + k1, r0],  # low gable end
                    [n + k2, n + k3, r0 + 1],  # high gable end
                    [n + k1, n + k2, r0],  # slope 1 (split quad)
                    [n + k2, r0 + 1, r0],
                    [n + k3, n + k, r0 + 1],  # slope 2
                    [n + k, r0, r0 + 1],
                ]
            )
        for (a, b, c) in roof_tris:
            tris.append([n + a, n + b, n + c])
        for (a, b, c) in ear_clip(ring):
            tris.append([a, c, b])  # floor, wound downward
        mesh = geometry.TriMesh(
            np.concatenate(verts),
            np.array(tris, dtype=np.int64),
            material_id=material_id,
            object_id=f"bld{bi:03d}",
        )
        if mesh.signed_volume() <= 0:
            warn.append(f"footprint {fp.name}: non-positive volume; skipped")
            continue
        meshes.append(mesh)
    return meshes, warn


# ----------------------------------------------------------------------
# diffraction edges


ROOFTOP_MAX_VERTICALITY = 0.05
CORNER_MIN_VERTICALITY = 0.95
MIN_DIHEDRAL_EXCESS = 0.1  # radians beyond a flat pi dihedral


def _face_boundary_edges(face):
    """Undirected boundary edges of a planar face (vertex-keyed)."""
    counts = {}
    for tri in face.corners:
        for i in range(3):
            p, q = tri[i], tri[(i + 1) % 3]
            key = tuple(sorted((tuple(np.round(p, 6)), tuple(np.round(q, 6)))))
            counts.setdefault(key, [0, (p.copy(), q.copy())])[0] += 1
    return {k: v[1] for k, v in counts.items() if v[0] == 1}


def extract_edges(meshes, all_meshes=None):
    """Find convex wedge edges suitable for diffraction.

    Edges shared by two faces of the same mesh with exterior dihedral
    over pi + 0.1 rad are kept, classified rooftop-horizontal or
    vertical-corner by their direction, and dropped when the exterior
    wedge region is buried inside neighboring geometry (shared walls)
    or faces downward (ground-touching floor edges).
    """
    if all_meshes is None:
        all_meshes = meshes
    blocker = geometry.build_index(all_meshes) if all_meshes else None
    edges = []
    for mesh in meshes:
        own = next((mi for mi, m in enumerate(all_meshes) if m is mesh), None)
        faces = geometry.extract_planar_faces([mesh])
        boundary = [(f, _face_boundary_edges(f)) for f in faces]
        for i in range(len(boundary)):
            fi, bi_edges = boundary[i]
            for j in range(i + 1, len(boundary)):
                fj, bj_edges = boundary[j]
                for key in bi_edges.keys() & bj_edges.keys():
                    p, q = bi_edges[key]
                    if np.linalg.norm(q - p) <= 0.1:
                        continue
                    if fi.normal[2] < -0.9 or fj.normal[2] < -0.9:
                        continue  # floor faces sit on the ground
                    e = (q - p) / np.linalg.norm(q - p)
                    vert = abs(e[2])
                    if vert < ROOFTOP_MAX_VERTICALITY:
                        kind = "rooftop-horizontal"
                    elif vert > CORNER_MIN_VERTICALITY:
                        kind = "vertical-corner"
                    else:
                        continue
                    mid = 0.5 * (p + q)
                    # Convexity: the second face lies behind the first
                    # face's plane.
                    if (fj.centroid - mid) @ fi.normal >= -1e-9:
                        continue
                    cosang = float(np.clip(fi.normal @ fj.normal, -1.0, 1.0))
                    alpha = math.acos(cosang)
                    if alpha <= MIN_DIHEDRAL_EXCESS:
                        continue
                    t0 = _inplane_tangent(fi, mid, e)
                    t1 = _inplane_tangent(fj, mid, e)
                    if _wedge_buried(mid, t0, fi.normal, math.pi + alpha, blocker, own):
                        continue
                    a, b = (p, q) if tuple(p) <= tuple(q) else (q, p)
                    edges.append(
                        DiffractionEdge(
                            a=a,
                            b=b,
                            exterior_angle=math.pi + alpha,
                            n0=fi.normal.copy(),
                            t0=t0,
                            n1=fj.normal.copy(),
                            t1=t1,
                            kind=kind,
                            object_id=mesh.object_id,
                            material_id=mesh.material_id,
                        )
                    )
    edges.sort(
        key=lambda ed: (ed.object_id, tuple(np.round(ed.a, 6)), tuple(np.round(ed.b, 6)))
    )
    return edges


def _wedge_buried(mid, t0, n0, exterior_angle, blocker, own_mesh):
    """True when the open wedge region around an edge midpoint lies
    inside some other solid (e.g. the top edge of a wall shared by two
    prisms). Samples directions across the exterior fan at 0.05 m."""
    if blocker is None:
        return False
    phis = exterior_angle * np.arange(1, 8) / 8.0
    dirs = np.cos(phis)[:, None] * t0 + np.sin(phis)[:, None] * n0
    probes = mid + 0.05 * dirs
    inside = blocker.crossing_parity(probes)
    if own_mesh is not None:
        inside = np.delete(inside, own_mesh, axis=1)
    return bool(inside.any())


def _inplane_tangent(face, edge_point, e_hat):
    """Unit vector in the face plane, perpendicular to the edge,
    pointing from the edge into the face."""
    v = face.centroid - edge_point
    v = v - (v @ e_hat) * e_hat
    n = np.linalg.norm(v)
    if n < 1e-12:
        v = np.cross(face.normal, e_hat)
        n = np.linalg.norm(v)
    return v / n


# ----------------------------------------------------------------------
# scene assembly


def default_materials():
    return dict(MATERIALS)


def build_scene(
    footprints,
    terrain,
    foliage_prims=(),
    lod=1,
    building_material="concrete",
    origin=None,
    project=False,
):
    """Assemble a Scene from parsed inputs.

    With project=True, footprint rings and foliage primitives are in
    lon/lat degrees and get projected about `origin` (defaults to the
    centroid of all footprint vertices).
    """
    warn = []
    if project:
        if origin is None:
            allpts = np.concatenate([fp.ring for fp in footprints]) if footprints else None
            if allpts is None:
                raise ValueError("cannot infer projection origin from empty input")
            origin = (float(allpts[:, 0].mean()), float(allpts[:, 1].mean()))
        projected = []
        for fp in footprints:
            xy = np.array(
                [project_lonlat(lon, lat, origin) for lon, lat in fp.ring]
            )
            projected.append(
                Footprint(
                    xy, height_m=fp.height_m, levels=fp.levels, roof=fp.roof, name=fp.name
                )
            )
        footprints = projected

    meshes, w = extrude(footprints, terrain, lod=lod, material_id=building_material)
    warn.extend(w)

    volumes = []
    for prim in foliage_prims:
        if prim.kind == "cylinder":
            band = prim.band if prim.band is not None else TREE_CANOPY_BAND
            pt = prim.lonlat
            if project:
                pt = np.array(project_lonlat(pt[0], pt[1], origin))
            ground = float(terrain.sample(pt[0], pt[1]))
            shape = geometry.CylinderVolume(
                cx=float(pt[0]),
                cy=float(pt[1]),
                radius=prim.radius,
                z0=ground + band[0],
                z1=ground + band[1],
            )
            mat = FOLIAGE_MATERIALS["dense_foliage"]
        else:
            band = prim.band if prim.band is not None else FOREST_CANOPY_BAND
            ring = prim.lonlat
            if project:
                ring = np.array(
                    [project_lonlat(lon, lat, origin) for lon, lat in ring]
                )
            lo = ring.min(axis=0)
            hi = ring.max(axis=0)
            ground = float(np.min(terrain.sample(ring[:, 0], ring[:, 1])))
            shape = geometry.BoxVolume(
                lo=[lo[0], lo[1], ground + band[0]],
                hi=[hi[0], hi[1], ground + band[1]],
            )
            mat = FOLIAGE_MATERIALS["deciduous_forest"]
        volumes.append(
            FoliageVolume(
                shape=shape,
                alpha_v=mat.alpha_v,
                alpha_h=mat.alpha_h,
                model="generic",
                name=prim.name,
            )
        )

    edges = extract_edges(meshes)
    scene = Scene(
        materials=default_materials(),
        buildings=meshes,
        terrain=terrain,
        foliage=volumes,
        edges=edges,
        origin=tuple(origin) if origin is not None else None,
    )
    return scene, warn


# ----------------------------------------------------------------------
# serialization

SCENE_FORMAT_VERSION = 1


def _mesh_to_obj(mesh):
    return {
        "object_id": mesh.object_id,
        "material": mesh.material_id,
        "vertices": mesh.vertices.tolist(),
        "triangles": mesh.triangles.tolist(),
    }


def _shape_to_obj(shape):
    if isinstance(shape, geometry.BoxVolume):
        return {"type": "box", "lo": shape.lo.tolist(), "hi": shape.hi.tolist()}
    return {
        "type": "cylinder",
        "cx": shape.cx,
        "cy": shape.cy,
        "radius": shape.radius,
        "z0": shape.z0,
        "z1": shape.z1,
    }


def _shape_from_obj(obj):
    if obj["type"] == "box":
        return geometry.BoxVolume(lo=obj["lo"], hi=obj["hi"])
    if obj["type"] == "cylinder":
        return geometry.CylinderVolume(
            cx=obj["cx"], cy=obj["cy"], radius=obj["radius"], z0=obj["z0"], z1=obj["z1"]
        )
    raise ValueError(f"unknown foliage shape {obj['type']!r}")


def _edge_to_obj(edge):
    return {
        "a": edge.a.tolist(),
        "b": edge.b.tolist(),
        "exterior_angle": edge.exterior_angle,
        "n0": edge.n0.tolist(),
        "t0": edge.t0.tolist(),
        "n1": edge.n1.tolist(),
        "t1": edge.t1.tolist(),
        "kind": edge.kind,
        "object_id": edge.object_id,
        "material": edge.material_id,
    }


def _edge_from_obj(obj):
    return DiffractionEdge(
        a=obj["a"],
        b=obj["b"],
        exterior_angle=obj["exterior_angle"],
        n0=np.array(obj["n0"]),
        t0=np.array(obj["t0"]),
        n1=np.array(obj["n1"]),
        t1=np.array(obj["t1"]),
        kind=obj["kind"],
        object_id=obj["object_id"],
        material_id=obj["material"],
    )


def scene_to_json(scene):
    """Canonical JSON text (sorted keys, shortest float repr)."""
    doc = {
        "version": SCENE_FORMAT_VERSION,
        "origin": list(scene.origin) if scene.origin else None,
        "materials": [
            {
                "name": m.name,
                "eps_r": m.eps_r,
                "sigma": m.sigma,
                "color": list(m.color),
            }
            for _, m in sorted(scene.materials.items())
        ],
        "buildings": [_mesh_to_obj(m) for m in scene.buildings],
        "terrain": None
        if scene.terrain is None
        else {
            "x0": scene.terrain.x0,
            "y0": scene.terrain.y0,
            "cell_size": scene.terrain.cell_size,
            "heights": scene.terrain.heights.tolist(),
        },
        "foliage": [
            {
                "name": v.name,
                "shape": _shape_to_obj(v.shape),
                "alpha_v": v.alpha_v,
                "alpha_h": v.alpha_h,
                "model": v.model,
            }
            for v in scene.foliage
        ],
        "edges": [_edge_to_obj(e) for e in scene.edges],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def scene_from_json(text):
    doc = json.loads(text)
    version = doc.get("version")
    if version != SCENE_FORMAT_VERSION:
        raise ValueError(
            f"scene format version {version!r} not supported (expected "
            f"{SCENE_FORMAT_VERSION})"
        )
    materials = {
        m["name"]: Material(
            name=m["name"], eps_r=m["eps_r"], sigma=m["sigma"], color=tuple(m["color"])
        )
        for m in doc["materials"]
    }
    buildings = []
    for b in doc["buildings"]:
        if b["material"] not in materials:
            raise ValueError(
                f"building {b['object_id']!r} references unknown material "
                f"{b['material']!r}"
            )
        buildings.append(
            geometry.TriMesh(
                np.array(b["vertices"]),
                np.array(b["triangles"]),
                material_id=b["material"],
                object_id=b["object_id"],
            )
        )
    t = doc["terrain"]
    terrain = None
    if t is not None:
        terrain = TerrainGrid(
            x0=t["x0"], y0=t["y0"], cell_size=t["cell_size"], heights=np.array(t["heights"])
        )
    foliage = [
        FoliageVolume(
            shape=_shape_from_obj(v["shape"]),
            alpha_v=v["alpha_v"],
            alpha_h=v["alpha_h"],
            model=v["model"],
            name=v["name"],
        )
        for v in doc["foliage"]
    ]
    if doc.get("edges"):
        edges = [_edge_from_obj(e) for e in doc["edges"]]
    else:
        edges = extract_edges(buildings)
    origin = tuple(doc["origin"]) if doc.get("origin") else None
    return Scene(
        materials=materials,
        buildings=buildings,
        terrain=terrain,
        foliage=foliage,
        edges=edges,
        origin=origin,
    )


def save_scene(scene, path):
    import os
    import tempfile

    text = scene_to_json(scene)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_scene(path):
    with open(path) as fh:
        return scene_from_json(fh.read())
