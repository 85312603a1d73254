"""Core 3D primitives: triangle meshes, BVH spatial index, visibility and
penetration queries.

Coordinates are scene-local Cartesian meters: x east, y north, z up.
Points and directions are numpy float64 arrays of shape (3,); batched
variants take (N, 3) arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Hits closer than this along a ray are treated as self-intersections.
HIT_EPS = 1e-6
# Shadow-segment endpoints are pulled in by this much so that segments
# starting/ending on a surface do not report that surface as a blocker.
SEG_SHRINK = 1e-4
# Triangles below this area (m^2) are rejected at index build.
DEGENERATE_AREA = 1e-9

_PARALLEL_EPS = 1e-14


def vec3(x, y, z):
    """Build a 3-vector in meters; components must be finite."""
    v = np.array([x, y, z], dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite vector components: {v}")
    return v


def normalize(v):
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize zero vector")
    return v / n


@dataclass
class TriMesh:
    """Indexed triangle mesh with a material reference and a stable id.

    vertices: (V, 3) float64, triangles: (T, 3) int indices into vertices.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    material_id: str
    object_id: str

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValueError(f"mesh {self.object_id!r}: triangle index out of range")

    def triangle_corners(self):
        """Return (T, 3, 3) corner positions."""
        return self.vertices[self.triangles]

    def triangle_areas(self):
        c = self.triangle_corners()
        cr = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return 0.5 * np.linalg.norm(cr, axis=1)

    def triangle_normals(self):
        """Unit normals following winding order (CCW seen from outside)."""
        c = self.triangle_corners()
        cr = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        n = np.linalg.norm(cr, axis=1)
        n[n == 0.0] = 1.0
        return cr / n[:, None]

    def signed_volume(self):
        """Signed enclosed volume; positive for closed meshes with outward normals."""
        c = self.triangle_corners()
        return float(np.einsum("ij,ij->", c[:, 0], np.cross(c[:, 1], c[:, 2]))) / 6.0


@dataclass
class RayHit:
    t: float
    face: tuple  # (object_id, triangle index within the object's mesh)
    point: np.ndarray
    normal: np.ndarray


@dataclass
class _Node:
    lo: np.ndarray
    hi: np.ndarray
    left: int = -1
    right: int = -1
    start: int = 0
    count: int = 0


class SpatialIndex:
    """Bounding-volume hierarchy over the union of several meshes.

    Queries give results identical to an exhaustive scan over all
    triangles, including the (object_id, triangle index) tie-break at
    equal hit distance.
    """

    _LEAF_SIZE = 4

    def __init__(self, meshes):
        self.meshes = list(meshes)
        v0s, v1s, v2s, owners, normals = [], [], [], [], []
        for mi, mesh in enumerate(self.meshes):
            areas = mesh.triangle_areas()
            bad = np.nonzero(areas <= DEGENERATE_AREA)[0]
            if bad.size:
                raise ValueError(
                    f"degenerate triangle {int(bad[0])} in mesh {mesh.object_id!r}"
                    f" (area {areas[bad[0]]:.3e} m^2)"
                )
            c = mesh.triangle_corners()
            v0s.append(c[:, 0])
            v1s.append(c[:, 1])
            v2s.append(c[:, 2])
            normals.append(mesh.triangle_normals())
            owners.extend((mi, ti) for ti in range(len(mesh.triangles)))

        if owners:
            self.v0 = np.concatenate(v0s)
            self.v1 = np.concatenate(v1s)
            self.v2 = np.concatenate(v2s)
            self.tri_normal = np.concatenate(normals)
        else:
            self.v0 = np.zeros((0, 3))
            self.v1 = np.zeros((0, 3))
            self.v2 = np.zeros((0, 3))
            self.tri_normal = np.zeros((0, 3))
        self.owner = owners  # global tri -> (mesh index, local tri index)

        # Rank used for the equal-t tie-break: lowest (object_id, tri index).
        keys = [(self.meshes[mi].object_id, ti) for mi, ti in owners]
        order = sorted(range(len(keys)), key=lambda i: keys[i])
        self.tiebreak_rank = np.empty(len(keys), dtype=np.int64)
        self.tiebreak_rank[order] = np.arange(len(keys))

        self._e1 = self.v1 - self.v0
        self._e2 = self.v2 - self.v0
        self._build()

    # ------------------------------------------------------------------
    # construction

    def _build(self):
        n = len(self.v0)
        self.nodes: list[_Node] = []
        self.tri_order = np.arange(n, dtype=np.int64)
        if n == 0:
            return
        lo = np.minimum(np.minimum(self.v0, self.v1), self.v2)
        hi = np.maximum(np.maximum(self.v0, self.v1), self.v2)
        centroid = (self.v0 + self.v1 + self.v2) / 3.0

        def rec(idx):
            node = _Node(
                lo=lo[idx].min(axis=0), hi=hi[idx].max(axis=0), start=0, count=0
            )
            self.nodes.append(node)
            me = len(self.nodes) - 1
            if len(idx) <= self._LEAF_SIZE:
                node.start = self._leaf_cursor
                node.count = len(idx)
                self.tri_order[self._leaf_cursor : self._leaf_cursor + len(idx)] = idx
                self._leaf_cursor += len(idx)
                return me
            c = centroid[idx]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            half = len(idx) // 2
            part = idx[np.argsort(c[:, axis], kind="stable")]
            node.left = rec(part[:half])
            node.right = rec(part[half:])
            return me

        self._leaf_cursor = 0
        import sys

        old = sys.getrecursionlimit()
        sys.setrecursionlimit(max(old, 10000))
        try:
            rec(np.arange(n, dtype=np.int64))
        finally:
            sys.setrecursionlimit(old)

    # ------------------------------------------------------------------
    # scalar queries

    def _ray_node(self, node, origin, inv_dir, t_max):
        """Slab test; returns entry t or None.

        A zero direction component with the origin exactly on the slab
        plane yields 0 * inf = nan; every comparison with nan is False,
        so such nodes are visited rather than pruned, which is safe.
        """
        with np.errstate(invalid="ignore"):
            t0 = (node.lo - origin) * inv_dir
            t1 = (node.hi - origin) * inv_dir
        tn = np.minimum(t0, t1).max()
        tf = np.maximum(t0, t1).min()
        if tn > tf or tf < 0.0 or tn > t_max:
            return None
        tn = float(tn)
        return tn if tn > 0.0 else 0.0

    def nearest_hit(self, origin, direction, t_max=np.inf):
        """First intersection along the ray in (HIT_EPS, t_max), or None.

        Ties at equal t go to the lowest (object_id, triangle index).
        """
        if not self.nodes:
            return None
        origin = np.asarray(origin, dtype=np.float64)
        direction = np.asarray(direction, dtype=np.float64)
        with np.errstate(divide="ignore"):
            inv_dir = np.where(direction != 0.0, 1.0 / direction, np.inf)
        best = None  # (t, rank, global tri)
        stack = [0]
        while stack:
            ni = stack.pop()
            node = self.nodes[ni]
            limit = t_max if best is None else best[0]
            if self._ray_node(node, origin, inv_dir, limit) is None:
                continue
            if node.count:
                for k in range(node.start, node.start + node.count):
                    g = int(self.tri_order[k])
                    t = self._intersect_one(g, origin, direction)
                    if t is None or t >= t_max:
                        continue
                    cand = (t, int(self.tiebreak_rank[g]), g)
                    if best is None or cand[:2] < best[:2]:
                        best = cand
            else:
                stack.append(node.left)
                stack.append(node.right)
        if best is None:
            return None
        t, _, g = best
        mi, ti = self.owner[g]
        point = origin + t * direction
        return RayHit(
            t=t,
            face=(self.meshes[mi].object_id, ti),
            point=point,
            normal=self.tri_normal[g].copy(),
        )

    def _intersect_one(self, g, origin, direction):
        e1, e2 = self._e1[g], self._e2[g]
        pvec = np.cross(direction, e2)
        det = float(e1 @ pvec)
        if abs(det) < _PARALLEL_EPS:
            return None
        inv = 1.0 / det
        tvec = origin - self.v0[g]
        u = float(tvec @ pvec) * inv
        if u < 0.0 or u > 1.0:
            return None
        qvec = np.cross(tvec, e1)
        v = float(direction @ qvec) * inv
        if v < 0.0 or u + v > 1.0:
            return None
        t = float(e2 @ qvec) * inv
        if t <= HIT_EPS:
            return None
        return t

    def segment_blocked(self, a, b):
        """True iff any triangle cuts the open segment a-b.

        Both endpoints are pulled in by SEG_SHRINK so that segments that
        start or end exactly on a surface are not blocked by it.
        """
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        d = b - a
        length = np.linalg.norm(d)
        if length <= 2 * SEG_SHRINK:
            return False
        u = d / length
        origin = a + SEG_SHRINK * u
        span = length - 2 * SEG_SHRINK
        hit = self.nearest_hit(origin, u, t_max=span)
        return hit is not None

    # ------------------------------------------------------------------
    # batched queries (exhaustive vectorized scan; identical results)

    def first_hits(self, origins, dirs, t_max=None, tri_chunk=2048):
        """Nearest hits for N rays at once.

        Returns (t, tri) where t is (N,) with inf for misses and tri is
        the (N,) global triangle index (-1 for misses). Same epsilon and
        tie-break rules as nearest_hit.
        """
        origins = np.asarray(origins, dtype=np.float64)
        dirs = np.asarray(dirs, dtype=np.float64)
        n = len(origins)
        if t_max is None:
            t_max = np.full(n, np.inf)
        else:
            t_max = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,))
        best_t = np.full(n, np.inf)
        best_rank = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
        best_tri = np.full(n, -1, dtype=np.int64)
        T = len(self.v0)
        for s in range(0, T, tri_chunk):
            e = min(s + tri_chunk, T)
            t, valid = self._intersect_block(origins, dirs, s, e)
            valid &= t < t_max[:, None]
            t = np.where(valid, t, np.inf)
            row_min = t.min(axis=1)
            improved = row_min < best_t
            # Equal-t ties within the block and against the running best.
            at_min = valid & (t == row_min[:, None])
            rank_block = np.where(
                at_min, self.tiebreak_rank[None, s:e], np.iinfo(np.int64).max
            )
            blk_rank = rank_block.min(axis=1)
            tie = (row_min == best_t) & (blk_rank < best_rank)
            take = improved | tie
            if np.any(take):
                cols = rank_block[take].argmin(axis=1)
                best_t[take] = row_min[take]
                best_rank[take] = blk_rank[take]
                best_tri[take] = cols + s
        return best_t, best_tri

    def _intersect_block(self, origins, dirs, s, e):
        """Moller-Trumbore for all rays x triangles[s:e]; returns (t, valid)."""
        e1 = self._e1[s:e]
        e2 = self._e2[s:e]
        v0 = self.v0[s:e]
        pvec = np.cross(dirs[:, None, :], e2[None, :, :])
        det = np.einsum("tk,ntk->nt", e1, pvec)
        safe = np.abs(det) >= _PARALLEL_EPS
        inv = np.where(safe, 1.0 / np.where(safe, det, 1.0), 0.0)
        tvec = origins[:, None, :] - v0[None, :, :]
        u = np.einsum("ntk,ntk->nt", tvec, pvec) * inv
        qvec = np.cross(tvec, e1[None, :, :])
        v = np.einsum("nk,ntk->nt", dirs, qvec) * inv
        t = np.einsum("tk,ntk->nt", e2, qvec) * inv
        valid = safe & (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (u + v <= 1.0)
        valid &= t > HIT_EPS
        return t, valid

    def _mesh_blocks(self):
        """Contiguous triangle ranges and bounding boxes per mesh; lets
        the batched segment test skip meshes a segment cannot reach."""
        if getattr(self, "_mesh_blocks_cache", None) is None:
            mesh_of = np.array([mi for mi, _ in self.owner], dtype=np.int64)
            blocks = []
            for mi in range(len(self.meshes)):
                sel = np.nonzero(mesh_of == mi)[0]
                if not len(sel):
                    continue
                s, e = int(sel[0]), int(sel[-1]) + 1
                pts = np.concatenate(
                    [self.v0[s:e], self.v0[s:e] + self._e1[s:e], self.v0[s:e] + self._e2[s:e]]
                )
                blocks.append((s, e, pts.min(axis=0), pts.max(axis=0)))
            self._mesh_blocks_cache = blocks
        return self._mesh_blocks_cache

    def segments_blocked(self, a, b, tri_chunk=2048, row_chunk=4096):
        """Vectorized segment_blocked for (N, 3) endpoint arrays.

        Identical results to the scalar query; per-mesh bounding boxes
        cull mesh/segment pairs whose boxes do not overlap (any actual
        intersection point would lie in both).
        """
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        n = len(a)
        out = np.zeros(n, dtype=bool)
        if not len(self.v0) or n == 0:
            return out
        d = b - a
        length = np.linalg.norm(d, axis=1)
        ok = length > 2 * SEG_SHRINK
        u = np.where(ok[:, None], d / np.where(ok, length, 1.0)[:, None], 0.0)
        origins = a + SEG_SHRINK * u
        span = length - 2 * SEG_SHRINK
        ends = origins + span[:, None] * u
        seg_lo = np.minimum(origins, ends) - 1e-9
        seg_hi = np.maximum(origins, ends) + 1e-9
        for s, e, blo, bhi in self._mesh_blocks():
            cand = (
                ok
                & ~out
                & (seg_lo <= bhi[None, :]).all(axis=1)
                & (seg_hi >= blo[None, :]).all(axis=1)
            )
            rows = np.nonzero(cand)[0]
            for rs in range(0, len(rows), row_chunk):
                rr = rows[rs : rs + row_chunk]
                for ts in range(s, e, tri_chunk):
                    if not len(rr):
                        break
                    te = min(ts + tri_chunk, e)
                    t, valid = self._intersect_block(origins[rr], u[rr], ts, te)
                    valid &= t < span[rr, None]
                    hit = valid.any(axis=1)
                    out[rr[hit]] = True
                    rr = rr[~hit]
        return out

    # Skew probe direction: axis-aligned rays from grid points hit shared
    # triangle edges of prism roofs exactly, double-counting the crossing.
    _PARITY_DIR = (0.1234567891, 0.2468013579, 0.9603860791)

    def crossing_parity(self, points, direction=_PARITY_DIR):
        """Per (point, mesh) parity of ray crossings; odd means inside.

        Returns (N, M) bool array over the index's meshes. Used for
        point-in-building tests.
        """
        points = np.asarray(points, dtype=np.float64)
        n = len(points)
        m = len(self.meshes)
        counts = np.zeros((n, m), dtype=np.int64)
        if not len(self.v0) or n == 0:
            return counts.astype(bool)
        dirs = np.broadcast_to(np.asarray(direction, dtype=np.float64), (n, 3))
        mesh_of_tri = np.array([mi for mi, _ in self.owner], dtype=np.int64)
        T = len(self.v0)
        for s in range(0, T, 2048):
            e = min(s + 2048, T)
            t, valid = self._intersect_block(points, dirs, s, e)
            for mi in range(m):
                cols = mesh_of_tri[s:e] == mi
                if cols.any():
                    counts[:, mi] += valid[:, cols].sum(axis=1)
        return (counts % 2) == 1


def build_index(meshes):
    """Build a SpatialIndex over the given meshes.

    Degenerate triangles (area <= DEGENERATE_AREA) are rejected with the
    offending object and triangle named in the error.
    """
    return SpatialIndex(meshes)


def nearest_hit(index, origin, direction, t_max=np.inf):
    return index.nearest_hit(origin, direction, t_max)


def segment_blocked(index, a, b):
    return index.segment_blocked(a, b)


def mirror_point(p, plane):
    """Reflect p across the plane given as (unit normal n, offset d)."""
    n, d = plane
    p = np.asarray(p, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return p - 2.0 * (p @ n - d) * n


# ----------------------------------------------------------------------
# foliage volumes


@dataclass
class BoxVolume:
    """Axis-aligned box, used for forest stands."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if np.any(self.hi <= self.lo):
            raise ValueError("box volume must have positive extent")

    def chord_interval(self, a, d, length):
        """Parameter interval [t0, t1] of segment a + t*d inside the box."""
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(d != 0.0, 1.0 / d, np.inf)
        t0 = (self.lo - a) * inv
        t1 = (self.hi - a) * inv
        # Axis-parallel components: inside the slab for all t or for none.
        par = d == 0.0
        inside_par = (a >= self.lo) & (a <= self.hi)
        lo_t = np.where(par, np.where(inside_par, -np.inf, np.inf), np.minimum(t0, t1))
        hi_t = np.where(par, np.where(inside_par, np.inf, -np.inf), np.maximum(t0, t1))
        tn = max(lo_t.max(), 0.0)
        tf = min(hi_t.min(), length)
        return tn, tf


@dataclass
class CylinderVolume:
    """Vertical cylinder (tree canopy): center (cx, cy), radius, z range."""

    cx: float
    cy: float
    radius: float
    z0: float
    z1: float

    def __post_init__(self):
        if self.radius <= 0 or self.z1 <= self.z0:
            raise ValueError("cylinder volume must have positive extent")

    def chord_interval(self, a, d, length):
        # Horizontal circle test.
        ox, oy = a[0] - self.cx, a[1] - self.cy
        dx, dy = d[0], d[1]
        qa = dx * dx + dy * dy
        if qa < 1e-30:
            inside = ox * ox + oy * oy <= self.radius**2
            tn, tf = (0.0, length) if inside else (np.inf, -np.inf)
        else:
            qb = 2.0 * (ox * dx + oy * dy)
            qc = ox * ox + oy * oy - self.radius**2
            disc = qb * qb - 4.0 * qa * qc
            if disc < 0.0:
                return np.inf, -np.inf
            sq = np.sqrt(disc)
            tn = (-qb - sq) / (2.0 * qa)
            tf = (-qb + sq) / (2.0 * qa)
        # z slab.
        dz = d[2]
        if dz == 0.0:
            if not (self.z0 <= a[2] <= self.z1):
                return np.inf, -np.inf
        else:
            za = (self.z0 - a[2]) / dz
            zb = (self.z1 - a[2]) / dz
            tn = max(tn, min(za, zb))
            tf = min(tf, max(za, zb))
        return max(tn, 0.0), min(tf, length)


def foliage_penetration(a, b, volumes):
    """Chord length of segment a-b through each foliage volume.

    Returns [(volume index, length_m)] for volumes with positive chord.
    Lengths are exactly invariant under a/b exchange.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if tuple(b) < tuple(a):  # canonical orientation so reversal is exact
        a, b = b, a
    d = b - a
    length = float(np.linalg.norm(d))
    if length == 0.0:
        raise ValueError("foliage_penetration requires a != b")
    u = d / length
    out = []
    for vid, vol in enumerate(volumes):
        shape = getattr(vol, "shape", vol)
        tn, tf = shape.chord_interval(a, u, length)
        if tf > tn:
            out.append((vid, float(tf - tn)))
    return out


def _box_chords(vol, a, d, length):
    """Vectorized BoxVolume.chord_interval over (N, 3) row arrays."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(d != 0.0, 1.0 / d, np.inf)
        t0 = (vol.lo[None, :] - a) * inv
        t1 = (vol.hi[None, :] - a) * inv
    par = d == 0.0
    inside_par = (a >= vol.lo[None, :]) & (a <= vol.hi[None, :])
    lo_t = np.where(par, np.where(inside_par, -np.inf, np.inf), np.minimum(t0, t1))
    hi_t = np.where(par, np.where(inside_par, np.inf, -np.inf), np.maximum(t0, t1))
    tn = np.maximum(lo_t.max(axis=1), 0.0)
    tf = np.minimum(hi_t.min(axis=1), length)
    return tn, tf


def _cylinder_chords(vol, a, d, length):
    """Vectorized CylinderVolume.chord_interval over (N, 3) row arrays."""
    n = len(a)
    ox = a[:, 0] - vol.cx
    oy = a[:, 1] - vol.cy
    dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
    qa = dx * dx + dy * dy
    horiz = qa >= 1e-30
    qb = 2.0 * (ox * dx + oy * dy)
    qc = ox * ox + oy * oy - vol.radius**2
    disc = qb * qb - 4.0 * qa * qc
    with np.errstate(invalid="ignore", divide="ignore"):
        sq = np.sqrt(np.maximum(disc, 0.0))
        den = np.where(horiz, 2.0 * qa, 1.0)
        tn = np.where(horiz, (-qb - sq) / den, np.where(qc <= 0.0, 0.0, np.inf))
        tf = np.where(horiz, (-qb + sq) / den, np.where(qc <= 0.0, length, -np.inf))
    miss = horiz & (disc < 0.0)
    # z slab; rows with dz == 0 are either fully inside or fully outside.
    zpar = dz == 0.0
    z_in = (a[:, 2] >= vol.z0) & (a[:, 2] <= vol.z1)
    with np.errstate(divide="ignore", invalid="ignore"):
        za = np.where(zpar, 0.0, (vol.z0 - a[:, 2]) / np.where(zpar, 1.0, dz))
        zb = np.where(zpar, 0.0, (vol.z1 - a[:, 2]) / np.where(zpar, 1.0, dz))
    zlo = np.where(zpar, np.where(z_in, -np.inf, np.inf), np.minimum(za, zb))
    zhi = np.where(zpar, np.where(z_in, np.inf, -np.inf), np.maximum(za, zb))
    tn = np.maximum(tn, zlo)
    tf = np.minimum(tf, zhi)
    tn = np.where(miss, np.inf, np.maximum(tn, 0.0))
    tf = np.where(miss, -np.inf, np.minimum(tf, length))
    return tn, tf


def foliage_chords_bulk(a, b, volumes):
    """Per-volume chord lengths for (N, 3) segment endpoint arrays.

    Returns a (V, N) array of meters, zero where a segment misses the
    volume; row for row this matches foliage_penetration, including the
    canonical endpoint ordering that makes reversal exact.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    swap = (b[:, 0] < a[:, 0]) | (
        (b[:, 0] == a[:, 0])
        & ((b[:, 1] < a[:, 1]) | ((b[:, 1] == a[:, 1]) & (b[:, 2] < a[:, 2])))
    )
    lo = np.where(swap[:, None], b, a)
    hi = np.where(swap[:, None], a, b)
    d = hi - lo
    length = np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2 + d[:, 2] ** 2)
    if np.any(length == 0.0):
        raise ValueError("foliage_chords_bulk requires a != b")
    u = d / length[:, None]
    out = np.zeros((len(volumes), len(a)))
    for vi, vol in enumerate(volumes):
        shape = getattr(vol, "shape", vol)
        if isinstance(shape, BoxVolume):
            tn, tf = _box_chords(shape, lo, u, length)
        elif isinstance(shape, CylinderVolume):
            tn, tf = _cylinder_chords(shape, lo, u, length)
        else:
            tn = np.empty(len(a))
            tf = np.empty(len(a))
            for r in range(len(a)):
                tn[r], tf[r] = shape.chord_interval(lo[r], u[r], length[r])
        out[vi] = np.where(tf > tn, tf - tn, 0.0)
    return out


# ----------------------------------------------------------------------
# planar faces (coplanar triangle groups used by the path finders)


@dataclass
class PlanarFace:
    """Maximal coplanar triangle group of one mesh.

    The image method reflects across whole faces rather than individual
    triangles so that wall quads produce a single specular path.
    """

    mesh_index: int
    object_id: str
    face_index: int
    normal: np.ndarray
    offset: float  # plane: normal . x = offset
    corners: np.ndarray  # (m, 3, 3) member triangle corners
    centroid: np.ndarray = field(default=None)
    tri_indices: np.ndarray = field(default=None)  # member tris within the mesh

    def __post_init__(self):
        if self.centroid is None:
            self.centroid = self.corners.reshape(-1, 3).mean(axis=0)

    def contains(self, p, tol=1e-7):
        """Point-in-face test: inside any member triangle (inclusive edges)."""
        return bool(points_in_triangles(p[None, :], self.corners, tol=tol)[0])


def points_in_triangles(points, corners, tol=1e-7):
    """(N,) bool: each point inside >= 1 of the (m,3,3) coplanar triangles."""
    a, b, c = corners[:, 0], corners[:, 1], corners[:, 2]
    v0 = b - a
    v1 = c - a
    p = points[:, None, :] - a[None, :, :]
    d00 = np.einsum("mk,mk->m", v0, v0)
    d01 = np.einsum("mk,mk->m", v0, v1)
    d11 = np.einsum("mk,mk->m", v1, v1)
    d20 = np.einsum("nmk,mk->nm", p, v0)
    d21 = np.einsum("nmk,mk->nm", p, v1)
    denom = d00 * d11 - d01 * d01
    denom = np.where(np.abs(denom) < 1e-30, 1.0, denom)
    u = (d11 * d20 - d01 * d21) / denom
    v = (d00 * d21 - d01 * d20) / denom
    inside = (u >= -tol) & (v >= -tol) & (u + v <= 1.0 + tol)
    return inside.any(axis=1)


def extract_planar_faces(meshes):
    """Group each mesh's triangles into planar faces.

    Triangles sharing a plane (normal and offset within 1e-6) under the
    same mesh form one face; face order is deterministic.
    """
    faces = []
    for mi, mesh in enumerate(meshes):
        corners = mesh.triangle_corners()
        normals = mesh.triangle_normals()
        offsets = np.einsum("tk,tk->t", normals, corners[:, 0])
        groups = {}
        for ti in range(len(corners)):
            key = (
                round(normals[ti, 0], 6),
                round(normals[ti, 1], 6),
                round(normals[ti, 2], 6),
                round(offsets[ti], 6),
            )
            groups.setdefault(key, []).append(ti)
        for fi, key in enumerate(sorted(groups)):
            tis = groups[key]
            n = normals[tis[0]]
            faces.append(
                PlanarFace(
                    mesh_index=mi,
                    object_id=mesh.object_id,
                    face_index=fi,
                    normal=n.copy(),
                    offset=float(n @ corners[tis[0], 0]),
                    corners=corners[tis],
                    tri_indices=np.array(tis, dtype=np.int64),
                )
            )
    return faces
