"""Scene construction: terrain grids, OSM parsing, extrusion, edge
extraction, and serialization."""

import json
import math

import numpy as np
import pytest

from sitewave import geometry, scene


def flat(x0=-50.0, y0=-50.0, size=120.0, cell=10.0, z=0.0):
    return scene.flat_terrain(x0, y0, size, cell_size=cell, z=z)


def square_ring(side=10.0, x=0.0, y=0.0):
    return np.array(
        [[x, y], [x + side, y], [x + side, y + side], [x, y + side]]
    )


# ----------------------------------------------------------------------
# terrain


def test_bilinear_center_of_two_by_two():
    grid = scene.TerrainGrid(0.0, 0.0, 1.0, [[0.0, 1.0], [1.0, 2.0]])
    assert grid.sample(1.0, 1.0) == pytest.approx(1.0, abs=1e-12)


def test_bilinear_reproduces_linear_ramp():
    cell = 2.0
    nr, nc = 8, 11
    xs = 5.0 + (np.arange(nc) + 0.5) * cell
    ys = 7.0 + (np.arange(nr) + 0.5) * cell
    heights = 2.0 * xs[None, :] + 3.0 * ys[:, None]
    grid = scene.TerrainGrid(5.0, 7.0, cell, heights)
    rng = np.random.default_rng(7)
    x = rng.uniform(xs[0], xs[-1], 50)
    y = rng.uniform(ys[0], ys[-1], 50)
    assert np.allclose(grid.sample(x, y), 2.0 * x + 3.0 * y, atol=1e-9)


def test_sample_outside_extent_clamps_with_warning():
    grid = scene.TerrainGrid(0.0, 0.0, 1.0, [[1.0, 1.0], [1.0, 1.0]])
    with pytest.warns(UserWarning):
        value = grid.sample(100.0, 100.0)
    assert value == pytest.approx(1.0)


def test_terrain_mesh_is_single_planar_face_with_up_normals():
    mesh = flat().to_mesh()
    faces = geometry.extract_planar_faces([mesh])
    assert len(faces) == 1
    assert np.allclose(mesh.triangle_normals()[:, 2], 1.0)


ESRI_SAMPLE = """\
ncols 3
nrows 3
xllcorner 10.0
yllcorner 20.0
cellsize 5.0
NODATA_value -9999
-9999 -9999 3
-9999 5 6
7 8 9
"""


def test_esri_parse_flips_rows_and_fills_nodata():
    grid = scene.load_terrain(ESRI_SAMPLE)
    assert (grid.x0, grid.y0, grid.cell_size) == (10.0, 20.0, 5.0)
    # Row 0 of storage is the south row (last file row). The NODATA
    # corner's unique nearest neighbor is the diagonal 5; the mid-left
    # cell ties between 6 and 7 at distance 1 and the fill resolves
    # that tie deterministically.
    expected = np.array([[7, 8, 9], [7, 5, 6], [5, 5, 3]], dtype=float)
    assert np.array_equal(grid.heights, expected)
    again = scene.load_terrain(ESRI_SAMPLE)
    assert np.array_equal(grid.heights, again.heights)


def test_esri_all_nodata_is_an_error():
    text = "ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -1\n-1 -1\n"
    with pytest.raises(ValueError, match="no valid cells"):
        scene.load_terrain(text)


def test_esri_wrong_value_count_is_an_error():
    text = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2 3\n"
    with pytest.raises(ValueError, match="expected 4"):
        scene.load_terrain(text)


# ----------------------------------------------------------------------
# projection


def test_small_latitude_step_length():
    origin = (13.0, 52.0)
    x, y = scene.project_lonlat(13.0, 52.001, origin)
    assert x == pytest.approx(0.0, abs=1e-9)
    assert y == pytest.approx(111.319, abs=0.01)


def test_projection_round_trip():
    origin = (13.0, 52.0)
    lon, lat = 13.0123, 52.0456
    x, y = scene.project_lonlat(lon, lat, origin)
    lon2, lat2 = scene.unproject_xy(x, y, origin)
    assert lon2 == pytest.approx(lon, abs=1e-9)
    assert lat2 == pytest.approx(lat, abs=1e-9)


# ----------------------------------------------------------------------
# OSM parsing


OSM_SAMPLE = """\
<osm version="0.6">
 <node id="1" lat="52.0000" lon="13.0000"/>
 <node id="2" lat="52.0000" lon="13.0010"/>
 <node id="3" lat="52.0010" lon="13.0010"/>
 <node id="4" lat="52.0010" lon="13.0000"/>
 <node id="5" lat="52.0020" lon="13.0020"><tag k="natural" v="tree"/></node>
 <way id="100">
  <nd ref="1"/><nd ref="2"/><nd ref="3"/><nd ref="4"/><nd ref="1"/>
  <tag k="building" v="yes"/><tag k="height" v="12.5 m"/>
 </way>
 <way id="101">
  <nd ref="1"/><nd ref="2"/><nd ref="3"/><nd ref="1"/>
  <tag k="building" v="residential"/><tag k="building:levels" v="4"/>
 </way>
 <way id="102">
  <nd ref="2"/><nd ref="3"/><nd ref="4"/><nd ref="2"/>
  <tag k="building" v="yes"/>
 </way>
 <way id="103">
  <nd ref="1"/><nd ref="2"/><nd ref="3"/><nd ref="4"/><nd ref="1"/>
  <tag k="landuse" v="forest"/>
 </way>
 <way id="104">
  <nd ref="1"/><nd ref="2"/><nd ref="3"/>
  <tag k="building" v="yes"/>
 </way>
 <way id="105">
  <nd ref="1"/><nd ref="9"/><nd ref="1"/>
  <tag k="building" v="yes"/>
 </way>
</osm>
"""


def test_parse_osm_heights_and_primitives():
    fps, foliage, warn = scene.parse_osm(OSM_SAMPLE)
    assert [fp.height() for fp in fps] == [12.5, 12.0, 9.0]
    kinds = sorted(f.kind for f in foliage)
    assert kinds == ["box", "cylinder"]
    assert len(warn) == 2
    assert any("not a closed ring" in w for w in warn)
    assert any("missing node refs" in w for w in warn)


def test_parse_osm_malformed_reports_line():
    with pytest.raises(ValueError, match="line"):
        scene.parse_osm("<osm>\n<node id='1'\n</osm>")


def test_footprint_needs_three_distinct_vertices():
    with pytest.raises(ValueError, match="3 distinct"):
        scene.Footprint(np.array([[0, 0], [1, 1], [0, 0], [1, 1]]))


# ----------------------------------------------------------------------
# extrusion


def test_extruded_prism_volume():
    fp = scene.Footprint(square_ring(), height_m=6.0)
    meshes, warn = scene.extrude([fp], flat())
    assert not warn
    assert len(meshes) == 1
    assert meshes[0].signed_volume() == pytest.approx(600.0, rel=1e-9)


def test_clockwise_ring_gives_same_solid():
    ccw = scene.Footprint(square_ring(), height_m=6.0)
    cw = scene.Footprint(square_ring()[::-1], height_m=6.0)
    m1, _ = scene.extrude([ccw], flat())
    m2, _ = scene.extrude([cw], flat())
    assert m1[0].signed_volume() == pytest.approx(m2[0].signed_volume(), rel=1e-12)


def test_base_sits_on_minimum_terrain_under_footprint():
    cell = 10.0
    nc = 12
    xs = -50.0 + (np.arange(nc) + 0.5) * cell
    heights = np.broadcast_to(0.1 * xs, (nc, nc)).copy()
    terrain = scene.TerrainGrid(-50.0, -50.0, cell, heights)
    fp = scene.Footprint(square_ring(), height_m=6.0)
    meshes, _ = scene.extrude([fp], terrain)
    assert meshes[0].vertices[:, 2].min() == pytest.approx(0.0, abs=1e-9)
    assert meshes[0].vertices[:, 2].max() == pytest.approx(6.0, abs=1e-9)


def test_self_intersecting_footprint_skipped_with_warning():
    bowtie = scene.Footprint(
        np.array([[0, 0], [10, 10], [10, 0], [0, 10]]), height_m=5.0
    )
    meshes, warn = scene.extrude([bowtie], flat())
    assert meshes == []
    assert any("self-intersecting" in w for w in warn)


def test_concave_footprint_volume():
    ring = np.array([[0, 0], [10, 0], [10, 4], [4, 4], [4, 10], [0, 10]])
    fp = scene.Footprint(ring, height_m=5.0)
    meshes, warn = scene.extrude([fp], flat())
    assert not warn
    assert meshes[0].signed_volume() == pytest.approx(320.0, rel=1e-9)


def test_gabled_roof_ridge_height_and_volume():
    ring = np.array([[0, 0], [10, 0], [10, 6], [0, 6]], dtype=float)
    fp = scene.Footprint(ring, height_m=6.0, roof="gabled")
    meshes, warn = scene.extrude([fp], flat(), lod=2)
    assert not warn
    mesh = meshes[0]
    # Ridge raised by a quarter of the wall height, running along the
    # long axis at mid-width.
    assert mesh.vertices[:, 2].max() == pytest.approx(7.5, rel=1e-12)
    ridge = mesh.vertices[mesh.vertices[:, 2] > 7.0]
    assert len(ridge) == 2
    assert np.allclose(sorted(ridge[:, 0]), [0.0, 10.0])
    assert np.allclose(ridge[:, 1], 3.0)
    # Prism volume plus the triangular roof wedge.
    assert mesh.signed_volume() == pytest.approx(360.0 + 45.0, rel=1e-9)


def test_gabled_requires_quad_footprint():
    ring = np.array([[0, 0], [10, 0], [10, 4], [4, 4], [4, 10], [0, 10]])
    fp = scene.Footprint(ring, height_m=5.0, roof="gabled")
    meshes, warn = scene.extrude([fp], flat(), lod=2)
    assert any("4-vertex" in w for w in warn)
    assert meshes[0].signed_volume() == pytest.approx(320.0, rel=1e-9)


# ----------------------------------------------------------------------
# diffraction edges


def box_meshes(specs):
    fps = [
        scene.Footprint(square_ring(side, x, y), height_m=h)
        for (x, y, side, h) in specs
    ]
    meshes, warn = scene.extrude(fps, flat())
    assert not warn
    return meshes


def test_box_yields_four_rooftop_and_four_corner_edges():
    meshes = box_meshes([(0.0, 0.0, 10.0, 6.0)])
    edges = scene.extract_edges(meshes)
    kinds = [e.kind for e in edges]
    assert kinds.count("rooftop-horizontal") == 4
    assert kinds.count("vertical-corner") == 4
    assert len(edges) == 8
    for e in edges:
        assert e.exterior_angle == pytest.approx(1.5 * math.pi, abs=1e-9)
        assert e.n_wedge == pytest.approx(1.5, abs=1e-9)
    roof = [e for e in edges if e.kind == "rooftop-horizontal"]
    assert all(e.a[2] == pytest.approx(6.0) and e.b[2] == pytest.approx(6.0) for e in roof)
    corners = [e for e in edges if e.kind == "vertical-corner"]
    assert all(
        e.a[2] == pytest.approx(0.0) and e.b[2] == pytest.approx(6.0) for e in corners
    )


def test_edge_extraction_is_deterministic():
    meshes = box_meshes([(0.0, 0.0, 10.0, 6.0), (30.0, 5.0, 8.0, 12.0)])
    e1 = scene.extract_edges(meshes)
    e2 = scene.extract_edges(meshes)
    assert len(e1) == len(e2)
    for a, b in zip(e1, e2):
        assert np.array_equal(a.a, b.a) and np.array_equal(a.b, b.b)
        assert a.kind == b.kind and a.exterior_angle == b.exterior_angle


def test_shared_wall_edges_are_excluded():
    meshes = box_meshes([(0.0, 0.0, 10.0, 6.0), (10.0, 0.0, 10.0, 10.0)])
    edges = scene.extract_edges(meshes)
    # The top edge of the wall at x=10 belongs to the shorter prism but
    # is buried inside the taller one.
    for e in edges:
        on_shared_wall = np.isclose(e.a[0], 10.0) and np.isclose(e.b[0], 10.0)
        assert not (on_shared_wall and e.a[2] <= 6.01 and e.kind == "rooftop-horizontal")
    # The taller prism still has its full roofline, including above the
    # shared wall.
    tall_roof = [
        e
        for e in edges
        if e.kind == "rooftop-horizontal" and np.isclose(e.a[2], 10.0)
    ]
    assert len(tall_roof) == 4
    short_roof = [
        e
        for e in edges
        if e.kind == "rooftop-horizontal" and np.isclose(e.a[2], 6.0)
    ]
    assert len(short_roof) == 3


def test_gabled_mesh_edges():
    ring = np.array([[0, 0], [10, 0], [10, 6], [0, 6]], dtype=float)
    fp = scene.Footprint(ring, height_m=6.0, roof="gabled")
    meshes, _ = scene.extrude([fp], flat(), lod=2)
    edges = scene.extract_edges(meshes)
    kinds = [e.kind for e in edges]
    # Ridge + two eaves stay horizontal; the four slanted gable edges
    # are neither horizontal nor vertical and are skipped.
    assert kinds.count("rooftop-horizontal") == 3
    assert kinds.count("vertical-corner") == 4
    ridge = [e for e in edges if e.a[2] > 7.0]
    assert len(ridge) == 1
    expected = math.pi + 2.0 * math.atan(0.5)
    assert ridge[0].exterior_angle == pytest.approx(expected, abs=1e-9)


def test_wedge_frame_orientation():
    meshes = box_meshes([(0.0, 0.0, 10.0, 6.0)])
    for e in scene.extract_edges(meshes):
        # Tangents are in-plane unit vectors perpendicular to the edge;
        # rotating t0 toward n0 and onward by the exterior angle lands
        # on t1.
        for v in (e.n0, e.t0, e.n1, e.t1):
            assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-9)
            assert abs(v @ e.e_hat) < 1e-9
        phi_t1 = math.atan2(e.t1 @ e.n0, e.t1 @ e.t0) % (2.0 * math.pi)
        assert phi_t1 == pytest.approx(e.exterior_angle, abs=1e-9)


# ----------------------------------------------------------------------
# scene assembly and serialization


def make_scene():
    fps = [
        scene.Footprint(square_ring(10.0, 0.0, 0.0), height_m=6.0),
        scene.Footprint(square_ring(8.0, 25.0, -10.0), height_m=12.0),
    ]
    prims = [
        scene.OsmFoliage(
            kind="box",
            lonlat=np.array([[-30.0, -30.0], [-20.0, -30.0], [-20.0, -20.0], [-30.0, -20.0]]),
            band=scene.FOREST_CANOPY_BAND,
            name="stand",
        ),
        scene.OsmFoliage(kind="cylinder", lonlat=np.array([40.0, 40.0]), name="tree"),
    ]
    built, warn = scene.build_scene(fps, flat(), foliage_prims=prims)
    assert not warn
    return built


def test_build_scene_places_foliage_bands():
    sc = make_scene()
    box = next(v for v in sc.foliage if v.name == "stand")
    cyl = next(v for v in sc.foliage if v.name == "tree")
    assert box.shape.lo[2] == pytest.approx(2.0)
    assert box.shape.hi[2] == pytest.approx(12.0)
    assert (box.alpha_v, box.alpha_h) == (1.11, 1.64)
    assert cyl.shape.radius == pytest.approx(3.0)
    assert (cyl.shape.z0, cyl.shape.z1) == (pytest.approx(2.0), pytest.approx(10.0))
    assert (cyl.alpha_v, cyl.alpha_h) == (1.0, 1.0)


def test_points_in_building():
    sc = make_scene()
    pts = np.array(
        [
            [5.0, 5.0, 3.0],  # inside first prism
            [5.0, 5.0, 7.0],  # above its roof
            [29.0, -6.0, 11.0],  # inside the taller prism
            [-40.0, -40.0, 1.0],  # open ground
        ]
    )
    assert scene.Scene.points_in_building(sc, pts).tolist() == [True, False, True, False]


def test_scene_round_trip_is_byte_identical(tmp_path):
    sc = make_scene()
    p1 = tmp_path / "scene.json"
    p2 = tmp_path / "scene2.json"
    scene.save_scene(sc, p1)
    sc2 = scene.load_scene(p1)
    scene.save_scene(sc2, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_scene_load_rejects_future_version(tmp_path):
    sc = make_scene()
    doc = json.loads(scene.scene_to_json(sc))
    doc["version"] = 99
    with pytest.raises(ValueError, match="version"):
        scene.scene_from_json(json.dumps(doc))


def test_scene_load_rejects_unknown_material():
    sc = make_scene()
    doc = json.loads(scene.scene_to_json(sc))
    doc["buildings"][0]["material"] = "marshmallow"
    with pytest.raises(ValueError, match="marshmallow"):
        scene.scene_from_json(json.dumps(doc))


def test_missing_edges_section_recomputes_edges():
    sc = make_scene()
    doc = json.loads(scene.scene_to_json(sc))
    del doc["edges"]
    sc2 = scene.scene_from_json(json.dumps(doc))
    assert len(sc2.edges) == len(sc.edges)
    for a, b in zip(sc.edges, sc2.edges):
        assert np.allclose(a.a, b.a) and np.allclose(a.b, b.b)
        assert a.kind == b.kind
        assert a.exterior_angle == pytest.approx(b.exterior_angle, abs=1e-12)


def test_build_scene_projects_lonlat_input():
    fps, prims, _ = scene.parse_osm(OSM_SAMPLE)
    terrain = flat(-300.0, -300.0, 600.0, cell=50.0)
    sc, warn = scene.build_scene(fps, terrain, foliage_prims=prims, project=True)
    assert sc.origin is not None
    for mesh in sc.buildings:
        span = np.abs(mesh.vertices[:, :2]).max()
        assert span < 250.0  # projected near the shared origin
    # 1e-3 deg of latitude is about 111 m.
    first = sc.buildings[0]
    ysize = first.vertices[:, 1].max() - first.vertices[:, 1].min()
    assert ysize == pytest.approx(111.319, abs=0.05)
