"""Multipath discovery between a transmitter and receivers.

Reflections come from two engines sharing one validation step: the
exact image method for orders up to 2 and shooting-and-bouncing rays
(SBR) for deeper orders, where every captured candidate is refined by
the mirror-cascade exact path correction so the launch grid never
shows up in the output geometry. Edge diffraction solves the Fermat
point on each wedge edge in closed form; edge pairs fall back to
alternating projection. Reflection-diffraction combinations compose
the mirror cascade with the edge solve.

All finders return Path objects carrying the interaction records the
field evaluation needs (face normal and material per bounce, wedge
frame per diffraction) plus per-segment foliage chords.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry

_EPS = 1e-12
_FRONT_EPS = 1e-9
_ANGLE_TOL = 1e-6


@dataclass
class TraceConfig:
    """Interaction depth and SBR launch settings for one run."""

    max_reflections: int = 2
    max_diffractions: int = 1
    sbr_subdivision: int = 4
    rd_combos: bool = True

    def __post_init__(self):
        if self.max_reflections < 0 or self.max_diffractions < 0:
            raise ValueError("interaction counts must be >= 0")
        if self.max_diffractions > 2:
            raise ValueError("at most two diffractions per path")
        if self.sbr_subdivision < 2:
            raise ValueError("sbr_subdivision must be >= 2")


@dataclass
class Reflection:
    face_id: tuple  # (object_id, face_index)
    normal: np.ndarray
    material_id: str
    kind: str = "R"


@dataclass
class Diffraction:
    edge_index: int
    e_hat: np.ndarray
    n0: np.ndarray
    t0: np.ndarray
    n_wedge: float
    material_id: str
    shadow: bool = True
    kind: str = "D"


@dataclass
class Path:
    """A geometric propagation path tx -> interactions -> rx."""

    points: np.ndarray  # (n_interactions + 2, 3)
    interactions: list
    signature: tuple
    length: float
    foliage: list = field(default_factory=list)  # per segment [(volume, m)]

    @property
    def is_los(self):
        return len(self.interactions) == 0


def _attach_foliage(scene, points):
    vols = scene.foliage
    if not vols:
        return [[] for _ in range(len(points) - 1)]
    out = []
    for i in range(len(points) - 1):
        hits = geometry.foliage_penetration(points[i], points[i + 1], vols)
        out.append([(vols[vid], length) for vid, length in hits])
    return out


def _make_path(scene, points, interactions, signature):
    points = np.asarray(points, dtype=np.float64)
    length = float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())
    return Path(
        points=points,
        interactions=interactions,
        signature=signature,
        length=length,
        foliage=_attach_foliage(scene, points),
    )


def _dedup_sorted(paths):
    seen = {}
    for p in paths:
        if p.signature not in seen:
            seen[p.signature] = p
    return [seen[s] for s in sorted(seen)]


# ----------------------------------------------------------------------
# line of sight


def find_los(scene, tx, rx):
    """Direct path, or None when opaque geometry blocks it. Foliage
    attenuates but never blocks."""
    tx = np.asarray(tx, dtype=np.float64)
    rx = np.asarray(rx, dtype=np.float64)
    if np.linalg.norm(rx - tx) < 1e-9:
        raise ValueError("tx and rx coincide")
    if scene.index().segment_blocked(tx, rx):
        return None
    return _make_path(scene, [tx, rx], [], ())


# ----------------------------------------------------------------------
# image method


def _front_of(face, p):
    return float(face.normal @ p - face.offset) > _FRONT_EPS


def _face_front_mask(face, pts):
    return pts @ face.normal - face.offset > _FRONT_EPS


def _candidate_sequences(scene, tx, rx, order):
    """Face index tuples worth running the mirror cascade on, pruned by
    side-of-plane orientation and mutual visibility of the face pair."""
    faces = scene.faces()
    front_tx = [i for i, f in enumerate(faces) if _front_of(f, tx)]
    front_rx = [i for i, f in enumerate(faces) if _front_of(f, rx)]
    front_rx_set = set(front_rx)
    seqs = []
    if order >= 1:
        seqs.extend((i,) for i in front_tx if i in front_rx_set)
    if order >= 2:
        flat = [f.corners.reshape(-1, 3) for f in faces]
        for i in front_tx:
            fi = faces[i]
            for j in front_rx:
                if j == i:
                    continue
                fj = faces[j]
                # Each face needs some extent on the reflective side of
                # the other, otherwise no double bounce can connect them.
                if (flat[j] @ fi.normal - fi.offset).max() <= _FRONT_EPS:
                    continue
                if (flat[i] @ fj.normal - fj.offset).max() <= _FRONT_EPS:
                    continue
                seqs.append((i, j))
    return seqs


def _reflection_records(scene, seq):
    faces = scene.faces()
    meshes = scene.all_meshes()
    recs = []
    sig = []
    for i in seq:
        f = faces[i]
        recs.append(
            Reflection(
                face_id=(f.object_id, f.face_index),
                normal=f.normal.copy(),
                material_id=meshes[f.mesh_index].material_id,
            )
        )
        sig.append(("R", f.object_id, f.face_index))
    return recs, tuple(sig)


def exact_path_correction(scene, face_seq, tx, rx):
    """Mirror-cascade refinement of a face sequence into the exact
    specular path, or None when any specular point leaves its face, a
    bounce is on the wrong side, or a segment is blocked."""
    tx = np.asarray(tx, dtype=np.float64)
    rx = np.asarray(rx, dtype=np.float64)
    if not face_seq:
        return find_los(scene, tx, rx)
    faces = scene.faces()
    planes = [(faces[i].normal, faces[i].offset) for i in face_seq]
    images = [tx]
    for n, d in planes:
        images.append(geometry.mirror_point(images[-1], (n, d)))
    target = rx
    specular = [None] * len(face_seq)
    for k in range(len(face_seq) - 1, -1, -1):
        n, d = planes[k]
        src = images[k + 1]
        denom = float(n @ (target - src))
        if abs(denom) < 1e-14:
            return None
        t = (d - float(n @ src)) / denom
        if not _EPS < t < 1.0 - _EPS:
            return None
        p = src + t * (target - src)
        if not faces[face_seq[k]].contains(p):
            return None
        specular[k] = p
        target = p
    pts = np.vstack([tx, *specular, rx])
    for k, fi in enumerate(face_seq):
        n = faces[fi].normal
        if (pts[k + 1] - pts[k]) @ n >= -_EPS or (pts[k + 2] - pts[k + 1]) @ n <= _EPS:
            return None
    idx = scene.index()
    for k in range(len(pts) - 1):
        if idx.segment_blocked(pts[k], pts[k + 1]):
            return None
    recs, sig = _reflection_records(scene, face_seq)
    return _make_path(scene, pts, recs, sig)


def image_paths(scene, tx, rx, order=2):
    """Exact specular paths up to the given order (1 or 2)."""
    if order not in (1, 2):
        raise ValueError("image method supports orders 1 and 2")
    out = []
    for seq in _candidate_sequences(scene, tx, rx, order):
        p = exact_path_correction(scene, seq, tx, rx)
        if p is not None:
            out.append(p)
    return _dedup_sorted(out)


# ----------------------------------------------------------------------
# shooting and bouncing rays

_ICO_T = (1.0 + math.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array(
    [
        [-1, _ICO_T, 0], [1, _ICO_T, 0], [-1, -_ICO_T, 0], [1, -_ICO_T, 0],
        [0, -1, _ICO_T], [0, 1, _ICO_T], [0, -1, -_ICO_T], [0, 1, -_ICO_T],
        [_ICO_T, 0, -1], [_ICO_T, 0, 1], [-_ICO_T, 0, -1], [-_ICO_T, 0, 1],
    ],
    dtype=np.float64,
)
_ICO_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
)


def _subdivided_corners(level):
    corners = _ICO_VERTS[_ICO_FACES]
    for _ in range(level):
        a, b, c = corners[:, 0], corners[:, 1], corners[:, 2]
        ab, bc, ca = (a + b) / 2.0, (b + c) / 2.0, (c + a) / 2.0
        corners = np.concatenate(
            [
                np.stack([a, ab, ca], axis=1),
                np.stack([ab, b, bc], axis=1),
                np.stack([ca, bc, c], axis=1),
                np.stack([ab, bc, ca], axis=1),
            ]
        )
    return corners


def icosphere_directions(level):
    """20 * 4**level launch directions from flat midpoint subdivision of
    an icosahedron. The middle child of each face keeps the parent's
    centroid, so coarser direction sets are subsets of finer ones and
    discovery is monotone in the subdivision level."""
    centers = _subdivided_corners(level).mean(axis=1)
    return centers / np.linalg.norm(centers, axis=1, keepdims=True)


_COVERING_CACHE = {}


def capture_radius_factor(level):
    """Capture radius per meter of unfolded length.

    This is the launch grid's covering radius: the largest angular
    distance from any direction to its nearest launch direction (the
    lattice-cell circumradius, i.e. spacing/sqrt(3) for an ideal
    triangular grid). Flat subdivision distorts the grid, so the radius
    is measured on the actual direction set: grid vertices are the
    local maxima of the distance to the centroid set, so the maximum
    over vertices of the distance to their incident-face centroids
    bounds it. A 5% margin absorbs the residual approximation; exact
    path correction removes any capture-radius influence from the
    output geometry."""
    if level not in _COVERING_CACHE:
        corners = _subdivided_corners(level)
        cent = corners.mean(axis=1)
        cent = cent / np.linalg.norm(cent, axis=1, keepdims=True)
        verts = corners / np.linalg.norm(corners, axis=2, keepdims=True)
        cosang = np.clip(np.einsum("fvk,fk->fv", verts, cent), -1.0, 1.0)
        ang = np.arccos(cosang)
        best = {}
        keys = np.round(verts, 9)
        for f in range(len(corners)):
            for v in range(3):
                key = tuple(keys[f, v])
                a = ang[f, v]
                if key not in best or a < best[key]:
                    best[key] = a
        _COVERING_CACHE[level] = 1.05 * max(best.values())
    return _COVERING_CACHE[level]


def _tri_to_face(scene):
    """Global triangle index -> position in scene.faces()."""
    idx = scene.index()
    faces = scene.faces()
    lookup = np.full(len(idx.owner), -1, dtype=np.int64)
    by_mesh = {}
    for g, (mi, ti) in enumerate(idx.owner):
        by_mesh.setdefault(mi, {})[ti] = g
    for fpos, f in enumerate(faces):
        local = by_mesh.get(f.mesh_index, {})
        for ti in f.tri_indices:
            g = local.get(int(ti))
            if g is not None:
                lookup[g] = fpos
    return lookup


def _sbr_candidates(scene, tx, rx, cfg):
    """Face sequences whose SBR rays pass within the capture radius of
    rx. rx=None mines all sequences the launch set can reach instead
    (receiver-independent discovery for bulk evaluation)."""
    dirs = icosphere_directions(cfg.sbr_subdivision)
    n = len(dirs)
    beta = capture_radius_factor(cfg.sbr_subdivision)
    idx = scene.index()
    tri_face = _tri_to_face(scene)

    found = set()
    origins = np.broadcast_to(np.asarray(tx, dtype=np.float64), (n, 3)).copy()
    cum = np.zeros(n)
    seq = np.full((n, max(cfg.max_reflections, 1)), -1, dtype=np.int64)
    depth = 0
    while True:
        t, tri = idx.first_hits(origins, dirs)
        if rx is not None:
            rel = rx - origins
            s = np.einsum("nk,nk->n", rel, dirs)
            s = np.clip(s, 0.0, np.where(np.isfinite(t), t, np.inf))
            d_perp = np.linalg.norm(rel - s[:, None] * dirs, axis=1)
            cap = (s > 0) & (d_perp < (cum + s) * beta)
            for row in np.nonzero(cap)[0]:
                found.add(tuple(int(f) for f in seq[row, :depth]))
        if depth >= cfg.max_reflections:
            break
        hit = np.isfinite(t) & (tri_face[np.maximum(tri, 0)] >= 0)
        if not hit.any():
            break
        t, tri = t[hit], tri[hit]
        origins = origins[hit] + t[:, None] * dirs[hit]
        normals = idx.tri_normal[tri]
        d = dirs[hit]
        dirs = d - 2.0 * np.einsum("nk,nk->n", d, normals)[:, None] * normals
        cum = cum[hit] + t
        seq = seq[hit]
        seq[:, depth] = tri_face[tri]
        depth += 1
        if rx is None:
            for row in range(len(seq)):
                found.add(tuple(int(f) for f in seq[row, :depth]))
    return sorted(found)


def sbr_paths(scene, tx, rx, cfg=None):
    """SBR discovery refined by exact path correction.

    rx may be one point (3,) or a set (N, 3); the latter returns one
    list per receiver. Duplicates are collapsed by signature.
    """
    cfg = cfg or TraceConfig()
    rx = np.asarray(rx, dtype=np.float64)
    if rx.ndim == 2:
        return [sbr_paths(scene, tx, one, cfg) for one in rx]
    out = []
    for seq in _sbr_candidates(scene, np.asarray(tx, dtype=np.float64), rx, cfg):
        p = exact_path_correction(scene, seq, tx, rx)
        if p is not None:
            out.append(p)
    return _dedup_sorted(out)


# ----------------------------------------------------------------------
# diffraction


def _edge_arrays(scene):
    """Stacked per-edge geometry for vectorized solves (cached)."""
    cached = getattr(scene, "_edge_arrays", None)
    if cached is not None and cached[0] is scene.edges:
        return cached[1]
    edges = scene.edges
    arr = {
        "a": np.array([e.a for e in edges]).reshape(-1, 3),
        "e": np.array([e.e_hat for e in edges]).reshape(-1, 3),
        "len": np.array([e.length for e in edges]),
        "n0": np.array([e.n0 for e in edges]).reshape(-1, 3),
        "t0": np.array([e.t0 for e in edges]).reshape(-1, 3),
        "nw": np.array([e.n_wedge for e in edges]),
    }
    scene._edge_arrays = (edges, arr)
    return arr


def _solve_t(arr, p, q):
    """Closed-form Fermat parameter on every edge for endpoints p, q.

    Unfolding the two half-planes about the edge line turns the
    shortest-path condition into a straight line, giving
    t* = t1 + r1 (t2 - t1) / (r1 + r2). Returns (t, ok).
    """
    ap = p - arr["a"]
    aq = q - arr["a"]
    t1 = np.einsum("ek,ek->e", ap, arr["e"])
    t2 = np.einsum("ek,ek->e", aq, arr["e"])
    r1 = np.linalg.norm(ap - t1[:, None] * arr["e"], axis=1)
    r2 = np.linalg.norm(aq - t2[:, None] * arr["e"], axis=1)
    denom = r1 + r2
    ok = denom > 1e-9
    t = np.where(ok, t1 + r1 * (t2 - t1) / np.where(ok, denom, 1.0), -1.0)
    ok &= (t > 0.0) & (t < arr["len"])
    return t, ok


def _wedge_angles(edge, d_in, d_out):
    """(phi_incident, phi_out) from the o-face, or None when a direction
    is parallel to the edge or dips into the wedge material."""
    nphi = edge.n_wedge * math.pi

    def ang(v):
        t = v - (v @ edge.e_hat) * edge.e_hat
        norm = np.linalg.norm(t)
        if norm < 1e-12:
            return None
        t = t / norm
        a = math.atan2(float(t @ edge.n0), float(t @ edge.t0))
        return a if a >= 0.0 else a + 2.0 * math.pi

    phi_p = ang(-d_in)
    phi = ang(d_out)
    if phi_p is None or phi is None:
        return None
    if phi_p > nphi + _ANGLE_TOL or phi > nphi + _ANGLE_TOL:
        return None
    return phi_p, phi


def _diffraction_record(scene, edge_index, shadow):
    e = scene.edges[edge_index]
    return Diffraction(
        edge_index=edge_index,
        e_hat=e.e_hat.copy(),
        n0=e.n0.copy(),
        t0=e.t0.copy(),
        n_wedge=e.n_wedge,
        material_id=e.material_id,
        shadow=shadow,
    )


def _single_diffractions(scene, tx, rx, edges_subset=None):
    arr = _edge_arrays(scene)
    if len(arr["len"]) == 0:
        return []
    t, ok = _solve_t(arr, tx, rx)
    idx = scene.index()
    out = []
    rows = np.nonzero(ok)[0] if edges_subset is None else [
        i for i in np.nonzero(ok)[0] if i in edges_subset
    ]
    for ei in rows:
        edge = scene.edges[ei]
        q = arr["a"][ei] + t[ei] * arr["e"][ei]
        d_in = q - tx
        d_out = rx - q
        li, lo = np.linalg.norm(d_in), np.linalg.norm(d_out)
        if li < 1e-9 or lo < 1e-9:
            continue
        angles = _wedge_angles(edge, d_in / li, d_out / lo)
        if angles is None:
            continue
        phi_p, phi = angles
        if idx.segment_blocked(tx, q) or idx.segment_blocked(q, rx):
            continue
        shadow = phi > phi_p + math.pi
        rec = _diffraction_record(scene, int(ei), shadow)
        out.append(_make_path(scene, [tx, q, rx], [rec], (("D", int(ei)),)))
    return out


def _clamped_solve_one(edge, p, q):
    ap = p - edge.a
    aq = q - edge.a
    t1 = float(ap @ edge.e_hat)
    t2 = float(aq @ edge.e_hat)
    r1 = float(np.linalg.norm(ap - t1 * edge.e_hat))
    r2 = float(np.linalg.norm(aq - t2 * edge.e_hat))
    if r1 + r2 < 1e-9:
        return None
    t = t1 + r1 * (t2 - t1) / (r1 + r2)
    return min(max(t, 0.0), edge.length)


def _double_diffractions(scene, tx, rx, cfg):
    """Edge pairs via alternating projection (Fermat point on each edge
    with the other held fixed); tolerance 1e-9 m, at most 100 sweeps."""
    edges = scene.edges
    idx = scene.index()
    out = []
    for i in range(len(edges)):
        for j in range(len(edges)):
            if i == j:
                continue
            e1, e2 = edges[i], edges[j]
            t2 = 0.5 * e2.length
            q2 = e2.a + t2 * e2.e_hat
            converged = False
            for _ in range(100):
                t1c = _clamped_solve_one(e1, tx, q2)
                if t1c is None:
                    break
                q1 = e1.a + t1c * e1.e_hat
                t2c = _clamped_solve_one(e2, q1, rx)
                if t2c is None:
                    break
                q2_new = e2.a + t2c * e2.e_hat
                if np.linalg.norm(q2_new - q2) < 1e-9:
                    q2 = q2_new
                    converged = True
                    break
                q2 = q2_new
            if not converged:
                continue
            t1c = _clamped_solve_one(e1, tx, q2)
            if t1c is None or not 1e-9 < t1c < e1.length - 1e-9:
                continue
            q1 = e1.a + t1c * e1.e_hat
            t2c = float((q2 - e2.a) @ e2.e_hat)
            if not 1e-9 < t2c < e2.length - 1e-9:
                continue
            if np.linalg.norm(q1 - q2) < 1e-6:
                continue
            d1_in = q1 - tx
            d1_out = q2 - q1
            d2_out = rx - q2
            l0 = np.linalg.norm(d1_in)
            l1 = np.linalg.norm(d1_out)
            l2 = np.linalg.norm(d2_out)
            if min(l0, l1, l2) < 1e-9:
                continue
            a1 = _wedge_angles(e1, d1_in / l0, d1_out / l1)
            a2 = _wedge_angles(e2, d1_out / l1, d2_out / l2)
            if a1 is None or a2 is None:
                continue
            if (
                idx.segment_blocked(tx, q1)
                or idx.segment_blocked(q1, q2)
                or idx.segment_blocked(q2, rx)
            ):
                continue
            recs = [
                _diffraction_record(scene, i, a1[1] > a1[0] + math.pi),
                _diffraction_record(scene, j, a2[1] > a2[0] + math.pi),
            ]
            out.append(
                _make_path(
                    scene, [tx, q1, q2, rx], recs, (("D", i), ("D", j))
                )
            )
    return out


def _rd_combos(scene, tx, rx, cfg):
    """Single reflection + single diffraction, in both orders, by
    composing the mirror cascade with the edge solve."""
    faces = scene.faces()
    meshes = scene.all_meshes()
    arr = _edge_arrays(scene)
    if len(arr["len"]) == 0:
        return []
    idx = scene.index()
    out = []
    for fpos, face in enumerate(faces):
        plane = (face.normal, face.offset)
        refl_rec = Reflection(
            face_id=(face.object_id, face.face_index),
            normal=face.normal.copy(),
            material_id=meshes[face.mesh_index].material_id,
        )
        sig_r = ("R", face.object_id, face.face_index)

        if _front_of(face, tx):
            t_img = geometry.mirror_point(tx, plane)
            tvals, ok = _solve_t(arr, t_img, rx)
            for ei in np.nonzero(ok)[0]:
                edge = scene.edges[ei]
                q = arr["a"][ei] + tvals[ei] * arr["e"][ei]
                p = _plane_between(t_img, q, plane)
                if p is None or not face.contains(p):
                    continue
                if np.linalg.norm(q - p) < 1e-6:
                    continue
                pts = np.vstack([tx, p, q, rx])
                if not _bounce_ok(pts[0], pts[1], pts[2], face.normal):
                    continue
                d_in = pts[2] - pts[1]
                d_out = pts[3] - pts[2]
                angles = _wedge_angles(
                    edge,
                    d_in / np.linalg.norm(d_in),
                    d_out / np.linalg.norm(d_out),
                )
                if angles is None:
                    continue
                if any(
                    idx.segment_blocked(pts[k], pts[k + 1]) for k in range(3)
                ):
                    continue
                rec_d = _diffraction_record(
                    scene, int(ei), angles[1] > angles[0] + math.pi
                )
                out.append(
                    _make_path(
                        scene,
                        pts,
                        [refl_rec, rec_d],
                        (sig_r, ("D", int(ei))),
                    )
                )

        if _front_of(face, rx):
            r_img = geometry.mirror_point(rx, plane)
            tvals, ok = _solve_t(arr, tx, r_img)
            for ei in np.nonzero(ok)[0]:
                edge = scene.edges[ei]
                q = arr["a"][ei] + tvals[ei] * arr["e"][ei]
                p = _plane_between(q, r_img, plane)
                if p is None or not face.contains(p):
                    continue
                if np.linalg.norm(q - p) < 1e-6:
                    continue
                pts = np.vstack([tx, q, p, rx])
                if not _bounce_ok(pts[1], pts[2], pts[3], face.normal):
                    continue
                d_in = pts[1] - pts[0]
                d_out = pts[2] - pts[1]
                angles = _wedge_angles(
                    edge,
                    d_in / np.linalg.norm(d_in),
                    d_out / np.linalg.norm(d_out),
                )
                if angles is None:
                    continue
                if any(
                    idx.segment_blocked(pts[k], pts[k + 1]) for k in range(3)
                ):
                    continue
                rec_d = _diffraction_record(
                    scene, int(ei), angles[1] > angles[0] + math.pi
                )
                out.append(
                    _make_path(
                        scene,
                        pts,
                        [rec_d, refl_rec],
                        (("D", int(ei)), sig_r),
                    )
                )
    return out


def _plane_between(src, dst, plane):
    n, d = plane
    denom = float(n @ (dst - src))
    if abs(denom) < 1e-14:
        return None
    t = (d - float(n @ src)) / denom
    if not _EPS < t < 1.0 - _EPS:
        return None
    return src + t * (dst - src)


def _bounce_ok(before, at, after, normal):
    return (at - before) @ normal < -_EPS and (after - at) @ normal > _EPS


def diffraction_paths(scene, tx, rx, edges=None, cfg=None):
    """Edge-diffracted paths: every visible wedge edge, optional edge
    pairs, and reflection-diffraction combinations per the config.
    Lit-side paths are produced too, flagged via the interaction's
    shadow attribute."""
    cfg = cfg or TraceConfig()
    if cfg.max_diffractions < 1:
        return []
    tx = np.asarray(tx, dtype=np.float64)
    rx = np.asarray(rx, dtype=np.float64)
    subset = None
    if edges is not None:
        wanted = {id(e) for e in edges}
        subset = {i for i, e in enumerate(scene.edges) if id(e) in wanted}
    out = _single_diffractions(scene, tx, rx, subset)
    if cfg.max_diffractions >= 2:
        out.extend(_double_diffractions(scene, tx, rx, cfg))
    if cfg.rd_combos and cfg.max_reflections >= 1:
        out.extend(_rd_combos(scene, tx, rx, cfg))
    return _dedup_sorted(out)


# ----------------------------------------------------------------------
# merged per-receiver query


def find_paths(scene, tx, rx, cfg=None):
    """All paths between one tx and one rx under the config: LOS, exact
    images up to order 2, SBR+EPC for deeper orders, and diffraction."""
    cfg = cfg or TraceConfig()
    tx = np.asarray(tx, dtype=np.float64)
    rx = np.asarray(rx, dtype=np.float64)
    paths = []
    los = find_los(scene, tx, rx)
    if los is not None:
        paths.append(los)
    if cfg.max_reflections >= 1 and scene.faces():
        paths.extend(image_paths(scene, tx, rx, order=min(cfg.max_reflections, 2)))
        if cfg.max_reflections > 2:
            deep = [
                p
                for p in sbr_paths(scene, tx, rx, cfg)
                if len(p.interactions) > 2
            ]
            paths.extend(deep)
    if cfg.max_diffractions >= 1 and scene.edges:
        paths.extend(diffraction_paths(scene, tx, rx, cfg=cfg))
    return _dedup_sorted(paths)


# ----------------------------------------------------------------------
# bulk tracing over receiver sets
#
# The bulk finders run every receiver through the same candidate
# enumeration and validation math as the scalar ones, but vectorized
# over receiver rows. New code here sticks to elementwise numpy
# arithmetic (no matmul on receiver-sized arrays) so each row's result
# is independent of how the receiver set is partitioned across workers.


@dataclass
class PathBatch:
    """All paths sharing one signature over a receiver set.

    interactions holds one shared record per hop; for diffraction
    records the per-path lit/shadow split lives in `shadows`
    ((M, n_diffractions) bool) because it varies by receiver. foliage
    holds per-volume total depths aggregated over all segments.
    """

    signature: tuple
    interactions: list
    rx_idx: np.ndarray  # (M,) rows into the receiver array
    points: np.ndarray  # (M, n_interactions + 2, 3)
    shadows: np.ndarray | None = None
    foliage: list = field(default_factory=list)  # [(volume, (M,) depth_m)]

    @property
    def lengths(self):
        seg = np.diff(self.points, axis=1)
        return np.sqrt(_d3(seg, seg)).sum(axis=1)


def _d3(a, b):
    """Elementwise dot over the last axis of 3-vectors."""
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def _batch_foliage(scene, points):
    """Aggregate per-volume chord depths over every segment of a batch."""
    vols = scene.foliage
    if not vols or len(points) == 0:
        return []
    total = np.zeros((len(vols), len(points)))
    for k in range(points.shape[1] - 1):
        total += geometry.foliage_chords_bulk(points[:, k], points[:, k + 1], vols)
    return [(vols[vi], total[vi]) for vi in range(len(vols)) if np.any(total[vi] > 0)]


def _finish_batch(scene, signature, interactions, rx_idx, points, shadows=None):
    return PathBatch(
        signature=signature,
        interactions=interactions,
        rx_idx=np.asarray(rx_idx, dtype=np.int64),
        points=points,
        shadows=shadows,
        foliage=_batch_foliage(scene, points),
    )


def _los_bulk(scene, tx, rxs):
    if np.any(np.sqrt(_d3(rxs - tx, rxs - tx)) < 1e-9):
        raise ValueError("a receiver coincides with the transmitter")
    blocked = scene.index().segments_blocked(
        np.broadcast_to(tx, rxs.shape).copy(), rxs
    )
    rows = np.nonzero(~blocked)[0]
    if not len(rows):
        return None
    pts = np.stack([np.broadcast_to(tx, (len(rows), 3)), rxs[rows]], axis=1)
    return _finish_batch(scene, (), [], rows, pts)


def enumerate_reflection_sequences(scene, tx, cfg):
    """Receiver-independent reflection candidates for bulk runs: all
    front-facing singles, extent-compatible pairs, and SBR-mined deeper
    sequences. Deterministic and sorted."""
    faces = scene.faces()
    if cfg.max_reflections < 1 or not faces:
        return []
    out = set()
    front_tx = [i for i, f in enumerate(faces) if _front_of(f, tx)]
    out.update((i,) for i in front_tx)
    if cfg.max_reflections >= 2:
        flat = [f.corners.reshape(-1, 3) for f in faces]
        for i in front_tx:
            fi = faces[i]
            for j in range(len(faces)):
                if j == i:
                    continue
                fj = faces[j]
                if (flat[j] @ fi.normal - fi.offset).max() <= _FRONT_EPS:
                    continue
                if (flat[i] @ fj.normal - fj.offset).max() <= _FRONT_EPS:
                    continue
                out.add((i, j))
    if cfg.max_reflections > 2:
        mined = _sbr_candidates(scene, np.asarray(tx, dtype=np.float64), None, cfg)
        out.update(seq for seq in mined if len(seq) > 2)
    return sorted(out)


def _epc_bulk(scene, face_seq, tx, rxs):
    """Vectorized exact path correction: (rows, points) of receivers the
    face sequence validly connects, or (empty, None)."""
    faces = scene.faces()
    order = len(face_seq)
    planes = [(faces[i].normal, faces[i].offset) for i in face_seq]
    images = [tx]
    for n, d in planes:
        images.append(geometry.mirror_point(images[-1], (n, d)))
    m = len(rxs)
    last = faces[face_seq[-1]]
    # Matches the scalar candidate pruning: the receiver must sit
    # strictly in front of the final bounce face.
    ok = _d3(rxs, last.normal) - last.offset > _FRONT_EPS
    spec = np.zeros((m, order, 3))
    target = rxs
    for k in range(order - 1, -1, -1):
        n, d = planes[k]
        src = images[k + 1]
        denom = _d3(target - src, n)
        good = np.abs(denom) >= 1e-14
        t = np.where(good, (d - float(n @ src)) / np.where(good, denom, 1.0), -1.0)
        good &= (t > _EPS) & (t < 1.0 - _EPS)
        p = src + t[:, None] * (target - src)
        ok &= good
        if not ok.any():
            return np.empty(0, dtype=np.int64), None
        ok[ok] &= geometry.points_in_triangles(p[ok], faces[face_seq[k]].corners)
        spec[:, k, :] = p
        target = p
    rows = np.nonzero(ok)[0]
    if not len(rows):
        return rows, None
    pts = np.concatenate(
        [
            np.broadcast_to(tx, (len(rows), 1, 3)),
            spec[rows],
            rxs[rows][:, None, :],
        ],
        axis=1,
    )
    good = np.ones(len(rows), dtype=bool)
    for k in range(order):
        n = planes[k][0]
        din = _d3(pts[:, k + 1] - pts[:, k], n)
        dout = _d3(pts[:, k + 2] - pts[:, k + 1], n)
        good &= (din < -_EPS) & (dout > _EPS)
    rows, pts = rows[good], pts[good]
    if not len(rows):
        return rows, None
    idx = scene.index()
    keep = np.ones(len(rows), dtype=bool)
    for k in range(order + 1):
        keep[keep] &= ~idx.segments_blocked(pts[keep][:, k], pts[keep][:, k + 1])
    return rows[keep], pts[keep]


def _wedge_angles_bulk(arr, ei, d_in, d_out):
    """Vectorized _wedge_angles for one edge over (M, 3) unit direction
    rows; returns (phi_p, phi, ok)."""
    e = arr["e"][ei]
    n0 = arr["n0"][ei]
    t0 = arr["t0"][ei]
    nphi = arr["nw"][ei] * math.pi

    def ang(v):
        t = v - _d3(v, e)[:, None] * e
        norm = np.sqrt(_d3(t, t))
        fine = norm >= 1e-12
        t = t / np.where(fine, norm, 1.0)[:, None]
        a = np.arctan2(_d3(t, n0), _d3(t, t0))
        a = np.where(a < 0.0, a + 2.0 * math.pi, a)
        return a, fine

    phi_p, ok_in = ang(-d_in)
    phi, ok_out = ang(d_out)
    ok = ok_in & ok_out & (phi_p <= nphi + _ANGLE_TOL) & (phi <= nphi + _ANGLE_TOL)
    return phi_p, phi, ok


def _solve_t_bulk(arr, ei, p, q):
    """Closed-form Fermat parameter on edge ei for (M, 3) endpoint rows;
    either endpoint may also be a single point."""
    a = arr["a"][ei]
    e = arr["e"][ei]
    ap = p - a
    aq = q - a
    t1 = _d3(ap, e)
    r1v = ap - (t1[..., None] * e if np.ndim(t1) else t1 * e)
    r1 = np.sqrt(_d3(r1v, r1v))
    t2 = _d3(aq, e)
    r2v = aq - (t2[..., None] * e if np.ndim(t2) else t2 * e)
    r2 = np.sqrt(_d3(r2v, r2v))
    denom = r1 + r2
    ok = denom > 1e-9
    t = np.where(ok, t1 + r1 * (t2 - t1) / np.where(ok, denom, 1.0), -1.0)
    ok = ok & (t > 0.0) & (t < arr["len"][ei])
    return t, ok


def _single_diffractions_bulk(scene, tx, rxs):
    arr = _edge_arrays(scene)
    idx = scene.index()
    out = []
    for ei in range(len(scene.edges)):
        t, ok = _solve_t_bulk(arr, ei, tx, rxs)
        if not ok.any():
            continue
        rows = np.nonzero(ok)[0]
        q = arr["a"][ei] + t[rows, None] * arr["e"][ei]
        d_in = q - tx
        d_out = rxs[rows] - q
        li = np.sqrt(_d3(d_in, d_in))
        lo = np.sqrt(_d3(d_out, d_out))
        good = (li >= 1e-9) & (lo >= 1e-9)
        phi_p, phi, aok = _wedge_angles_bulk(
            arr,
            ei,
            d_in / np.where(good, li, 1.0)[:, None],
            d_out / np.where(good, lo, 1.0)[:, None],
        )
        good &= aok
        rows, q = rows[good], q[good]
        if not len(rows):
            continue
        phi_p, phi = phi_p[good], phi[good]
        txr = np.broadcast_to(tx, (len(rows), 3))
        keep = ~idx.segments_blocked(txr.copy(), q)
        keep[keep] &= ~idx.segments_blocked(q[keep], rxs[rows[keep]])
        rows, q = rows[keep], q[keep]
        if not len(rows):
            continue
        shadow = (phi > phi_p + math.pi)[keep]
        pts = np.concatenate(
            [
                np.broadcast_to(tx, (len(rows), 1, 3)),
                q[:, None, :],
                rxs[rows][:, None, :],
            ],
            axis=1,
        )
        out.append(
            _finish_batch(
                scene,
                (("D", ei),),
                [_diffraction_record(scene, ei, True)],
                rows,
                pts,
                shadows=shadow[:, None],
            )
        )
    return out


def _clamped_solve_bulk(arr, ei, p, q):
    """Vectorized _clamped_solve_one; returns (t, ok) with t clamped to
    the edge span."""
    a = arr["a"][ei]
    e = arr["e"][ei]
    ap = p - a
    aq = q - a
    t1 = _d3(ap, e)
    r1v = ap - (t1[..., None] * e if np.ndim(t1) else t1 * e)
    r1 = np.sqrt(_d3(r1v, r1v))
    t2 = _d3(aq, e)
    r2v = aq - (t2[..., None] * e if np.ndim(t2) else t2 * e)
    r2 = np.sqrt(_d3(r2v, r2v))
    denom = r1 + r2
    ok = denom >= 1e-9
    t = np.where(ok, t1 + r1 * (t2 - t1) / np.where(ok, denom, 1.0), 0.0)
    return np.clip(t, 0.0, arr["len"][ei]), ok


def _double_diffractions_bulk(scene, tx, rxs):
    """Vectorized edge-pair search: the alternating projection runs all
    receivers of a pair at once, freezing rows as they converge so each
    row reproduces the scalar iteration exactly."""
    arr = _edge_arrays(scene)
    idx = scene.index()
    edges = scene.edges
    m = len(rxs)
    out = []
    for i in range(len(edges)):
        for j in range(len(edges)):
            if i == j:
                continue
            e1, e2 = edges[i], edges[j]
            q2 = np.broadcast_to(e2.a + 0.5 * e2.length * e2.e_hat, (m, 3)).copy()
            live = np.ones(m, dtype=bool)
            converged = np.zeros(m, dtype=bool)
            for _ in range(100):
                if not live.any():
                    break
                t1c, ok1 = _clamped_solve_bulk(arr, i, tx, q2[live])
                q1 = arr["a"][i] + t1c[:, None] * arr["e"][i]
                t2c, ok2 = _clamped_solve_bulk(arr, j, q1, rxs[live])
                q2n = arr["a"][j] + t2c[:, None] * arr["e"][j]
                oks = ok1 & ok2
                delta = np.sqrt(_d3(q2n - q2[live], q2n - q2[live]))
                done = oks & (delta < 1e-9)
                q2[live] = np.where(oks[:, None], q2n, q2[live])
                sub = np.nonzero(live)[0]
                converged[sub[done]] = True
                live[sub[done | ~oks]] = False
            rows = np.nonzero(converged)[0]
            if not len(rows):
                continue
            t1c, ok1 = _clamped_solve_bulk(arr, i, tx, q2[rows])
            good = ok1 & (t1c > 1e-9) & (t1c < e1.length - 1e-9)
            q1 = arr["a"][i] + t1c[:, None] * arr["e"][i]
            t2c = _d3(q2[rows] - arr["a"][j], arr["e"][j])
            good &= (t2c > 1e-9) & (t2c < e2.length - 1e-9)
            sep = q1 - q2[rows]
            good &= np.sqrt(_d3(sep, sep)) >= 1e-6
            rows, q1, q2r = rows[good], q1[good], q2[rows[good]]
            if not len(rows):
                continue
            d1_in = q1 - tx
            d1_out = q2r - q1
            d2_out = rxs[rows] - q2r
            l0 = np.sqrt(_d3(d1_in, d1_in))
            l1 = np.sqrt(_d3(d1_out, d1_out))
            l2 = np.sqrt(_d3(d2_out, d2_out))
            good = np.minimum(np.minimum(l0, l1), l2) >= 1e-9
            safe = np.where(good, 1.0, np.inf)
            u0 = d1_in / (l0 * safe + np.where(good, 0.0, 1.0))[:, None]
            u1 = d1_out / (l1 * safe + np.where(good, 0.0, 1.0))[:, None]
            u2 = d2_out / (l2 * safe + np.where(good, 0.0, 1.0))[:, None]
            p1p, p1, ok_a = _wedge_angles_bulk(arr, i, u0, u1)
            p2p, p2, ok_b = _wedge_angles_bulk(arr, j, u1, u2)
            good &= ok_a & ok_b
            rows, q1, q2r = rows[good], q1[good], q2r[good]
            if not len(rows):
                continue
            sh = np.stack(
                [(p1 > p1p + math.pi)[good], (p2 > p2p + math.pi)[good]], axis=1
            )
            txr = np.broadcast_to(tx, (len(rows), 3)).copy()
            keep = ~idx.segments_blocked(txr, q1)
            keep[keep] &= ~idx.segments_blocked(q1[keep], q2r[keep])
            keep[keep] &= ~idx.segments_blocked(q2r[keep], rxs[rows[keep]])
            rows = rows[keep]
            if not len(rows):
                continue
            pts = np.concatenate(
                [
                    np.broadcast_to(tx, (len(rows), 1, 3)),
                    q1[keep][:, None, :],
                    q2r[keep][:, None, :],
                    rxs[rows][:, None, :],
                ],
                axis=1,
            )
            out.append(
                _finish_batch(
                    scene,
                    (("D", i), ("D", j)),
                    [
                        _diffraction_record(scene, i, True),
                        _diffraction_record(scene, j, True),
                    ],
                    rows,
                    pts,
                    shadows=sh[keep],
                )
            )
    return out


def _rd_combos_bulk(scene, tx, rxs):
    faces = scene.faces()
    meshes = scene.all_meshes()
    arr = _edge_arrays(scene)
    idx = scene.index()
    out = []
    for face in faces:
        plane = (face.normal, face.offset)
        refl_rec = Reflection(
            face_id=(face.object_id, face.face_index),
            normal=face.normal.copy(),
            material_id=meshes[face.mesh_index].material_id,
        )
        sig_r = ("R", face.object_id, face.face_index)

        if _front_of(face, tx):
            t_img = geometry.mirror_point(tx, plane)
            for ei in range(len(scene.edges)):
                t, ok = _solve_t_bulk(arr, ei, t_img, rxs)
                res = _combo_validate(
                    scene, arr, idx, face, plane, ei, t, ok,
                    t_img, rxs, tx=tx, r_first=True,
                )
                if res is not None:
                    rows, pts, shadow = res
                    out.append(
                        _finish_batch(
                            scene,
                            (sig_r, ("D", ei)),
                            [refl_rec, _diffraction_record(scene, ei, True)],
                            rows,
                            pts,
                            shadows=shadow[:, None],
                        )
                    )

        front_rx = _d3(rxs, face.normal) - face.offset > _FRONT_EPS
        if front_rx.any():
            r_img = rxs - 2.0 * (_d3(rxs, face.normal) - face.offset)[:, None] * face.normal
            for ei in range(len(scene.edges)):
                t, ok = _solve_t_bulk(arr, ei, tx, r_img)
                ok &= front_rx
                res = _combo_validate(
                    scene, arr, idx, face, plane, ei, t, ok,
                    r_img, rxs, tx=tx, r_first=False,
                )
                if res is not None:
                    rows, pts, shadow = res
                    out.append(
                        _finish_batch(
                            scene,
                            (("D", ei), sig_r),
                            [_diffraction_record(scene, ei, True), refl_rec],
                            rows,
                            pts,
                            shadows=shadow[:, None],
                        )
                    )
    return out


def _combo_validate(scene, arr, idx, face, plane, ei, t, ok, image, rxs, tx, r_first):
    """Shared validation tail for both combo orders; returns
    (rows, points, shadow) or None."""
    if not ok.any():
        return None
    rows = np.nonzero(ok)[0]
    q = arr["a"][ei] + t[rows, None] * arr["e"][ei]
    n, d = plane
    if r_first:
        src = np.broadcast_to(image, (len(rows), 3))
        dst = q
    else:
        src = q
        dst = image[rows]
    denom = _d3(dst - src, n)
    good = np.abs(denom) >= 1e-14
    tt = np.where(good, (d - _d3(src, n)) / np.where(good, denom, 1.0), -1.0)
    good &= (tt > _EPS) & (tt < 1.0 - _EPS)
    p = src + tt[:, None] * (dst - src)
    good[good] &= geometry.points_in_triangles(p[good], face.corners)
    sep = q - p
    good &= np.sqrt(_d3(sep, sep)) >= 1e-6
    rows, q, p = rows[good], q[good], p[good]
    if not len(rows):
        return None
    if r_first:
        pts = np.concatenate(
            [
                np.broadcast_to(tx, (len(rows), 1, 3)),
                p[:, None, :],
                q[:, None, :],
                rxs[rows][:, None, :],
            ],
            axis=1,
        )
        b0, b1, b2 = pts[:, 0], pts[:, 1], pts[:, 2]
        d_in = pts[:, 2] - pts[:, 1]
        d_out = pts[:, 3] - pts[:, 2]
    else:
        pts = np.concatenate(
            [
                np.broadcast_to(tx, (len(rows), 1, 3)),
                q[:, None, :],
                p[:, None, :],
                rxs[rows][:, None, :],
            ],
            axis=1,
        )
        b0, b1, b2 = pts[:, 1], pts[:, 2], pts[:, 3]
        d_in = pts[:, 1] - pts[:, 0]
        d_out = pts[:, 2] - pts[:, 1]
    n = plane[0]
    good = (_d3(b1 - b0, n) < -_EPS) & (_d3(b2 - b1, n) > _EPS)
    li = np.sqrt(_d3(d_in, d_in))
    lo = np.sqrt(_d3(d_out, d_out))
    phi_p, phi, aok = _wedge_angles_bulk(
        arr,
        ei,
        d_in / np.where(li > 0, li, 1.0)[:, None],
        d_out / np.where(lo > 0, lo, 1.0)[:, None],
    )
    good &= aok
    rows, pts = rows[good], pts[good]
    if not len(rows):
        return None
    shadow = (phi > phi_p + math.pi)[good]
    keep = np.ones(len(rows), dtype=bool)
    for k in range(3):
        keep[keep] &= ~idx.segments_blocked(pts[keep][:, k], pts[keep][:, k + 1])
    rows, pts, shadow = rows[keep], pts[keep], shadow[keep]
    if not len(rows):
        return None
    return rows, pts, shadow


def trace_bulk(scene, tx, rxs, cfg=None, sequences=None):
    """Paths from one transmitter to every receiver row, grouped by
    signature into PathBatch objects (sorted by signature).

    Row for row this produces the same paths as find_paths on each
    receiver. `sequences` can carry precomputed
    enumerate_reflection_sequences output so parallel workers skip
    re-mining.
    """
    cfg = cfg or TraceConfig()
    tx = np.asarray(tx, dtype=np.float64)
    rxs = np.asarray(rxs, dtype=np.float64).reshape(-1, 3)
    batches = []
    los = _los_bulk(scene, tx, rxs)
    if los is not None:
        batches.append(los)
    if cfg.max_reflections >= 1 and scene.faces():
        if sequences is None:
            sequences = enumerate_reflection_sequences(scene, tx, cfg)
        for seq in sequences:
            rows, pts = _epc_bulk(scene, seq, tx, rxs)
            if len(rows):
                recs, sig = _reflection_records(scene, seq)
                batches.append(_finish_batch(scene, sig, recs, rows, pts))
    if cfg.max_diffractions >= 1 and scene.edges:
        batches.extend(_single_diffractions_bulk(scene, tx, rxs))
        if cfg.max_diffractions >= 2:
            batches.extend(_double_diffractions_bulk(scene, tx, rxs))
        if cfg.rd_combos and cfg.max_reflections >= 1:
            batches.extend(_rd_combos_bulk(scene, tx, rxs))
    seen = {}
    for b in batches:
        if b.signature not in seen:
            seen[b.signature] = b
    return [seen[s] for s in sorted(seen)]
