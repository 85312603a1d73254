"""Shared scene fixtures: canonical worlds used across the test suite."""

import numpy as np
import pytest

from sitewave.em import MATERIALS
from sitewave.scene import Footprint, Scene, extract_edges, extrude, flat_terrain


def box_footprint(x0, y0, x1, y1, height):
    ring = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)
    return Footprint(ring, height_m=height)


def scene_from_boxes(boxes, terrain=None, material="concrete"):
    """Build a Scene from (x0, y0, x1, y1, height) box tuples.

    Extrusion always needs a height reference; when the scene itself has
    no terrain the boxes still sit on z = 0.
    """
    fps = [box_footprint(*b) for b in boxes]
    base = terrain if terrain is not None else flat_terrain(-500.0, -500.0, 1000.0)
    meshes, warnings = extrude(fps, base, material_id=material)
    assert not warnings
    return Scene(
        materials=dict(MATERIALS),
        buildings=meshes,
        terrain=terrain,
        edges=extract_edges(meshes),
    )


@pytest.fixture(scope="session")
def empty_scene():
    return Scene(materials=dict(MATERIALS), buildings=[])


@pytest.fixture(scope="session")
def ground_scene():
    """Bare flat terrain at z = 0, spanning roughly 370 m on a side."""
    return Scene(
        materials=dict(MATERIALS),
        buildings=[],
        terrain=flat_terrain(-200.0, -200.0, 400.0, cell_size=30.0),
    )


@pytest.fixture(scope="session")
def canyon_scene():
    """Street canyon: ground plus two parallel wall slabs along x.

    Inner wall faces sit at y = +-8, both 20 m tall.
    """
    return scene_from_boxes(
        [(-50.0, 8.0, 50.0, 11.0, 20.0), (-50.0, -11.0, 50.0, -8.0, 20.0)],
        terrain=flat_terrain(-200.0, -200.0, 400.0, cell_size=30.0),
    )


@pytest.fixture(scope="session")
def courtyard_scene():
    """Three wall slabs forming a U open to the south, on flat ground."""
    return scene_from_boxes(
        [
            (-20.0, 15.0, 20.0, 18.0, 15.0),
            (-20.0, -15.0, -17.0, 15.0, 15.0),
            (17.0, -15.0, 20.0, 15.0, 15.0),
        ],
        terrain=flat_terrain(-200.0, -200.0, 400.0, cell_size=30.0),
    )


@pytest.fixture(scope="session")
def box_scene():
    """A single 10 x 10 x 12 m building centered at the origin, no terrain."""
    return scene_from_boxes([(-5.0, -5.0, 5.0, 5.0, 12.0)])


def ten_building_layout():
    """Deterministic 10-box layout on a 35 m grid with jittered sizes."""
    rng = np.random.default_rng(7)
    boxes = []
    for iy, cy in enumerate((-25.0, 25.0)):
        for ix, cx in enumerate((-70.0, -35.0, 0.0, 35.0, 70.0)):
            hx = rng.uniform(5.0, 14.0)
            hy = rng.uniform(5.0, 14.0)
            h = rng.uniform(6.0, 25.0)
            boxes.append((cx - hx, cy - hy, cx + hx, cy + hy, h))
    return boxes


@pytest.fixture(scope="session")
def ten_building_scene():
    return scene_from_boxes(
        ten_building_layout(),
        terrain=flat_terrain(-250.0, -250.0, 500.0, cell_size=30.0),
    )
