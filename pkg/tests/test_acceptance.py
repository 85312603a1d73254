"""End-to-end acceptance checks for the whole simulator.

Each test covers one numbered criterion and prints a single verdict
line (criterion, label, PASS/FAIL, wall time). Oracles are computed
inline from closed-form physics, never from the module under test,
except where the criterion itself is a self-consistency statement
(determinism, reciprocity, method cross-validation).
"""

import time
from types import SimpleNamespace

import numpy as np
import pytest

from sitewave import antenna, coverage, em, tracer
from sitewave.antenna import AntennaSpec
from sitewave.scene import Scene, TerrainGrid, flat_terrain

from conftest import scene_from_boxes

C_LIGHT = 299792458.0
ISO = AntennaSpec(kind="isotropic")


class report:
    """Context manager: prints one verdict line and enforces a wall-time
    budget (when given) as part of the criterion."""

    def __init__(self, num, label, budget_s=None):
        self.num = num
        self.label = label
        self.budget = budget_s
        self.note = ""

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        dt = time.perf_counter() - self.t0
        over = self.budget is not None and dt > self.budget
        status = "PASS" if exc_type is None and not over else "FAIL"
        budget = f" / budget {self.budget:.0f}s" if self.budget is not None else ""
        note = f" [{self.note}]" if self.note else ""
        print(f"ACCEPTANCE {self.num} {self.label}: {status} ({dt:.2f}s{budget}){note}")
        if exc_type is None and over:
            raise AssertionError(
                f"criterion {self.num} exceeded its time budget: "
                f"{dt:.2f}s > {self.budget:.0f}s"
            )
        return False


def _local_extrema(y):
    """Indices of strict interior minima and maxima."""
    lo = np.nonzero((y[1:-1] < y[:-2]) & (y[1:-1] < y[2:]))[0] + 1
    hi = np.nonzero((y[1:-1] > y[:-2]) & (y[1:-1] > y[2:]))[0] + 1
    return lo, hi


def _aligned_within_one(idx_a, idx_b):
    if len(idx_a) == 0:
        return True
    return bool(np.all(np.min(np.abs(idx_a[:, None] - idx_b[None, :]), axis=1) <= 1))


# ----------------------------------------------------------------------
# 1. free space


def test_criterion_01_free_space_matches_friis(empty_scene):
    with report(1, "free-space RSS matches Friis", budget_s=5.0):
        f = 3.5e9
        d = np.logspace(0.0, 4.0, 201)  # 1 m .. 10 km
        route = coverage.RouteSpec(
            points=np.column_stack([d, np.zeros_like(d), np.zeros_like(d)])
        )
        radio = em.RadioConfig(frequency=f)
        cfg = tracer.TraceConfig(max_reflections=0, max_diffractions=0)
        res = coverage.eval_route(empty_scene, [0.0, 0.0, 0.0], ISO, ISO, radio, cfg, route)

        lam = C_LIGHT / f
        want = 30.0 - 20.0 * np.log10(4.0 * np.pi * d / lam)
        assert np.all(res.los)
        assert np.max(np.abs(res.rss_dbm - want)) <= 0.01


# ----------------------------------------------------------------------
# 2. two-ray over a dielectric ground


def test_criterion_02_two_ray_ground():
    with report(2, "two-ray over medium dry earth", budget_s=10.0):
        f = 3.5e9
        h1, h2 = 10.0, 2.0
        # Flat strip long enough for every specular point out to 5 km.
        terrain = TerrainGrid(-400.0, -400.0, 400.0, np.zeros((3, 15)))
        scene = Scene(materials=dict(em.MATERIALS), buildings=[], terrain=terrain)
        d = np.logspace(1.0, np.log10(5000.0), 1200)
        route = coverage.RouteSpec(
            points=np.column_stack([d, np.zeros_like(d), np.full_like(d, h2)])
        )
        radio = em.RadioConfig(frequency=f, combine="coherent")
        cfg = tracer.TraceConfig(max_reflections=1, max_diffractions=0)
        res = coverage.eval_route(scene, [0.0, 0.0, h1], ISO, ISO, radio, cfg, route)
        assert np.all(res.n_paths == 2)

        lam = C_LIGHT / f
        k = 2.0 * np.pi / lam
        r1 = np.hypot(d, h1 - h2)
        r2 = np.hypot(d, h1 + h2)
        cos_inc = (h1 + h2) / r2  # from the vertical surface normal
        eps = em.complex_permittivity(em.MATERIALS["medium_dry_earth"], f)
        _, gamma_p = em.fresnel_coefficients(cos_inc, eps)
        field = np.exp(-1j * k * r1) / r1 + gamma_p * np.exp(-1j * k * r2) / r2
        want = 30.0 + 20.0 * np.log10(lam / (4.0 * np.pi) * np.abs(field))

        rms = float(np.sqrt(np.mean((res.rss_dbm - want) ** 2)))
        assert rms <= 0.5

        lo_e, hi_e = _local_extrema(res.rss_dbm)
        lo_w, hi_w = _local_extrema(want)
        assert len(lo_w) > 10 and len(hi_w) > 10
        assert _aligned_within_one(lo_w, lo_e) and _aligned_within_one(lo_e, lo_w)
        assert _aligned_within_one(hi_w, hi_e) and _aligned_within_one(hi_e, hi_w)


# ----------------------------------------------------------------------
# 3. shooting-and-bouncing rays against the exact image method


def test_criterion_03_sbr_matches_image_method(
    ground_scene, canyon_scene, courtyard_scene
):
    with report(3, "SBR+EPC agrees with the image method", budget_s=30.0):
        cases = [
            (ground_scene, (0.0, 0.0, 10.0), (40.0, 10.0, 1.5)),
            (canyon_scene, (0.0, 0.0, 5.0), (30.0, 3.0, 2.0)),
            (courtyard_scene, (0.0, 0.0, 4.0), (5.0, -2.0, 1.5)),
        ]
        cfg = tracer.TraceConfig(
            max_reflections=2, max_diffractions=0, sbr_subdivision=5
        )
        for scene, tx, rx in cases:
            img = {p.signature: p.length for p in tracer.image_paths(scene, tx, rx, order=2)}
            sbr = {
                p.signature: p.length
                for p in tracer.sbr_paths(scene, tx, rx, cfg)
                if not p.is_los
            }
            assert img, "image method found no specular paths"
            assert set(sbr) == set(img)
            for sig, length in img.items():
                assert sbr[sig] == pytest.approx(length, rel=1e-9)
        # The multi-wall scenes must exercise second-order bounces.
        for scene, tx, rx in cases[1:]:
            sigs = {p.signature for p in tracer.image_paths(scene, tx, rx, order=2)}
            assert any(len(s) == 2 for s in sigs)


# ----------------------------------------------------------------------
# 4. diffraction against the knife-edge reference


def _half_plane_record():
    return SimpleNamespace(
        kind="D",
        e_hat=np.array([0.0, 1.0, 0.0]),
        t0=np.array([0.0, 0.0, -1.0]),
        n0=np.array([-1.0, 0.0, 0.0]),
        n_wedge=2.0,
        material_id=None,
    )


def _make_path(points, interactions):
    return SimpleNamespace(
        points=np.asarray(points, dtype=np.float64),
        interactions=list(interactions),
        signature=(),
        foliage=[],
    )


def test_criterion_04_utd_tracks_knife_edge():
    with report(4, "UTD half-plane vs knife edge", budget_s=5.0):
        assert float(em.knife_edge_loss_db(0.0)) == pytest.approx(6.02, abs=0.1)

        f = 3.5e9
        lam = C_LIGHT / f
        k = 2.0 * np.pi / lam
        tx = np.array([-100.0, 0.0, -20.0])
        rec = _half_plane_record()

        # Deep shadow: rotate the receiver 1..30 degrees below the
        # shadow boundary and compare excess loss with J(v).
        for ang in range(1, 31):
            a = np.radians(float(ang))
            r = np.hypot(80.0, 16.0)
            th = np.arctan2(16.0, 80.0) - a
            rx = np.array([r * np.cos(th), 0.0, r * np.sin(th)])
            path = _make_path([tx, [0.0, 0.0, 0.0], rx], [rec])
            d0 = -tx / np.linalg.norm(tx)
            # 45 degree slant: equal soft/hard mix, the polarization-
            # neutral comparison for the scalar knife-edge oracle.
            e0 = (em.theta_hat(d0) + em.phi_hat(d0)) / np.sqrt(2.0)
            fd, _ = em.path_field(path, f, {}, e0)
            dlos = np.linalg.norm(rx - tx)
            loss = -20.0 * np.log10(np.linalg.norm(fd) * dlos)
            u = (rx - tx) / dlos
            perp = -tx - (-tx @ u) * u
            h = np.linalg.norm(perp)
            d1 = np.linalg.norm(tx)
            d2 = np.linalg.norm(rx)
            v = h * np.sqrt(2.0 * (d1 + d2) / (lam * d1 * d2))
            assert loss == pytest.approx(float(em.knife_edge_loss_db(v)), abs=1.5)

        # Continuity across the shadow boundary: the diffracted field
        # must hand over to (direct + diffracted) without a jump.
        def total(rx):
            path = _make_path([tx, [0.0, 0.0, 0.0], rx], [rec])
            d0 = -tx / np.linalg.norm(tx)
            e0 = em.theta_hat(d0)
            fd, _ = em.path_field(path, f, {}, e0)
            zsb = rx[0] * (-tx[2]) / (-tx[0])
            if rx[2] > zsb:
                d = np.linalg.norm(rx - tx)
                fd = fd + em.theta_hat((rx - tx) / d) * np.exp(-1j * k * d) / d
            return np.linalg.norm(fd)

        lit = total(np.array([80.0, 0.0, 16.0 + 1e-4]))
        shadow = total(np.array([80.0, 0.0, 16.0 - 1e-4]))
        assert abs(20.0 * np.log10(lit / shadow)) < 0.1


# ----------------------------------------------------------------------
# 5. Fresnel coefficients


def test_criterion_05_fresnel_limits():
    with report(5, "Fresnel Brewster / PEC / passivity", budget_s=1.0):
        # Brewster angle of a lossless eps_r = 7 half space.
        cos_b = 1.0 / np.sqrt(8.0)  # cos(atan(sqrt(7)))
        _, gp = em.fresnel_coefficients(cos_b, 7.0 + 0j)
        assert abs(gp) < 1e-9

        # PEC limit: gamma_s -> -1, gamma_p -> +1 as |eps| grows.
        cos_t = np.linspace(0.05, 1.0, 20)
        prev_s = prev_p = np.inf
        for mag in (1e4, 1e6, 1e8, 1e10):
            gs, gp = em.fresnel_coefficients(cos_t, mag - 1j * mag)
            err_s = float(np.max(np.abs(gs + 1.0)))
            err_p = float(np.max(np.abs(gp - 1.0)))
            assert err_s < prev_s and err_p < prev_p
            prev_s, prev_p = err_s, err_p
        assert prev_s < 1e-3 and prev_p < 1e-3

        # Passivity over random lossy materials and incidence angles.
        rng = np.random.default_rng(3)
        n = 10_000
        eps = rng.uniform(1.0, 81.0, n) - 1j * rng.uniform(0.0, 100.0, n)
        cos_t = rng.uniform(1e-6, 1.0, n)
        gs, gp = em.fresnel_coefficients(cos_t, eps)
        assert float(np.max(np.abs(gs))) <= 1.0 + 1e-12
        assert float(np.max(np.abs(gp))) <= 1.0 + 1e-12


# ----------------------------------------------------------------------
# 6. foliage models


def test_criterion_06_foliage_models():
    with report(6, "foliage loss models", budget_s=1.0):
        f = 3.5e9
        below = float(em.weissberger_loss_db(f, 14.0 - 1e-6))
        above = float(em.weissberger_loss_db(f, 14.0 + 1e-6))
        assert abs(above - below) <= 0.1

        assert float(em.specific_attenuation_loss_db(1.11, 7.3)) == 1.11 * 7.3
        depths = np.array([0.0, 0.5, 3.0, 120.0])
        got = em.specific_attenuation_loss_db(1.64, depths)
        assert np.array_equal(got, 1.64 * depths)

        dense = em.FOLIAGE_MATERIALS["dense_foliage"]
        decid = em.FOLIAGE_MATERIALS["deciduous_forest"]
        assert (dense.alpha_v, dense.alpha_h) == (1.0, 1.0)
        assert decid.alpha_v == 1.11
        assert decid.alpha_h == 1.64


# ----------------------------------------------------------------------
# 7. reciprocity


def _rss_between(scene, a, b, cfg, radio):
    paths = tracer.find_paths(scene, a, b, cfg)
    contribs = [em.path_contribution(p, ISO, ISO, radio) for p in paths]
    return em.combine(contribs, radio.combine)


def test_criterion_07_reciprocity(ten_building_scene):
    with report(7, "tx/rx swap reciprocity", budget_s=60.0):
        scene = ten_building_scene
        rng = np.random.default_rng(11)
        pts = np.empty((0, 3))
        while len(pts) < 200:
            cand = rng.uniform([-110.0, -110.0, 1.5], [110.0, 110.0, 35.0], (64, 3))
            pts = np.vstack([pts, cand[~scene.points_in_building(cand)]])
        a, b = pts[:100], pts[100:200]
        assert float(np.min(np.linalg.norm(a - b, axis=1))) > 1.0

        cfg = tracer.TraceConfig(
            max_reflections=2, max_diffractions=1, sbr_subdivision=3
        )
        radio = em.RadioConfig(frequency=3.5e9)
        worst = 0.0
        for p, q in zip(a, b):
            fwd = _rss_between(scene, p, q, cfg, radio)
            rev = _rss_between(scene, q, p, cfg, radio)
            worst = max(worst, abs(fwd - rev))
        assert worst <= 1e-9


# ----------------------------------------------------------------------
# 8. densification study


def _ring_blocks():
    """Perimeter blocks around a 200 x 200 m lot, with one taller block
    at the south center carrying the transmitter on its roof."""
    rows_x = [(-110.0, -70.0), (-65.0, -25.0), (-20.0, 20.0), (25.0, 65.0), (70.0, 110.0)]
    cols_y = [(-100.0, -55.0), (-50.0, -5.0), (0.0, 45.0), (50.0, 100.0)]
    blocks = []
    for x0, x1 in rows_x:
        h = 18.5 if x0 == -20.0 else 15.0
        blocks.append((x0, -115.0, x1, -105.0, h))
        blocks.append((x0, 105.0, x1, 115.0, 15.0))
    for y0, y1 in cols_y:
        blocks.append((-115.0, y0, -105.0, y1, 15.0))
        blocks.append((105.0, y0, 115.0, y1, 15.0))
    return blocks


_INFILL_SPARSE = [
    (-50.0, -20.0, -25.0, 5.0, 12.0),
    (20.0, -10.0, 45.0, 15.0, 12.0),
]
_INFILL_MEDIUM = _INFILL_SPARSE + [
    (-15.0, -45.0, 10.0, -20.0, 14.0),
    (-70.0, 30.0, -45.0, 55.0, 13.0),
    (40.0, 40.0, 65.0, 65.0, 13.0),
]
_INFILL_DENSE = _INFILL_MEDIUM + [
    (-10.0, 20.0, 15.0, 45.0, 16.0),
    (50.0, -55.0, 75.0, -30.0, 14.0),
    (-85.0, -70.0, -60.0, -45.0, 14.0),
    (14.0, 50.0, 39.0, 70.0, 16.0),
]


def test_criterion_08_infill_densification_ordering():
    with report(8, "route mean falls with infill density", budget_s=300.0) as rep:
        tx = (0.0, -110.0, 20.0)  # 1.5 m above the 18.5 m south block
        route = coverage.RouteSpec(
            waypoints=[[-80.0, 80.0], [80.0, 80.0], [80.0, -80.0]],
            count=222,
            height=1.6,
        )
        radio = em.RadioConfig(frequency=3.5e9)
        cfg = tracer.TraceConfig(
            max_reflections=4, max_diffractions=1, sbr_subdivision=3
        )
        terrain = flat_terrain(-250.0, -250.0, 500.0, cell_size=50.0)

        means = []
        for infill in ([], _INFILL_SPARSE, _INFILL_MEDIUM, _INFILL_DENSE):
            scene = scene_from_boxes(_ring_blocks() + infill, terrain=terrain)
            assert not scene.points_in_building(route.positions(scene)).any()
            res = coverage.eval_route(scene, tx, ISO, ISO, radio, cfg, route)
            assert len(res.rss_dbm) == 222
            assert float(np.min(res.rss_dbm)) > -240.0  # every receiver reached
            means.append(float(np.mean(res.rss_dbm)))

        rep.note = "means " + ", ".join(f"{m:.2f}" for m in means)
        assert means[0] > means[1] > means[2] > means[3]


# ----------------------------------------------------------------------
# 9. antennas


def test_criterion_09_antenna_patterns():
    with report(9, "tri-sector and dipole patterns", budget_s=5.0):
        pat = antenna.synth_trisector()
        g = pat.gain_dbi
        assert np.array_equal(g, np.roll(g, 120, axis=1))
        assert np.array_equal(g, np.roll(g, 240, axis=1))
        s = np.asarray(pat.sample(47.3, np.array([13.7, 133.7, 253.7])))
        assert np.max(np.abs(s - s[0])) < 1e-9

        # Lossless normalization: linear gain integrates to 4 pi.
        theta = np.radians(pat.theta_deg)
        lin = 10.0 ** (g / 10.0)
        dphi = np.radians(1.0)
        integ = float(np.trapezoid(lin.sum(axis=1) * dphi * np.sin(theta), theta))
        assert integ == pytest.approx(4.0 * np.pi, rel=0.03)

        # Half-wave dipole: peak gain and radiated power.
        assert float(antenna.dipole_gain_dbi(0.0)) == pytest.approx(2.15, abs=0.01)
        th = np.linspace(0.0, np.pi, 20001)
        gd = 10.0 ** (antenna.dipole_gain_dbi(np.cos(th)) / 10.0)
        integ_d = 2.0 * np.pi * float(np.trapezoid(gd * np.sin(th), th))
        assert integ_d == pytest.approx(4.0 * np.pi, rel=0.03)


# ----------------------------------------------------------------------
# 10. determinism and throughput


def test_criterion_10_grid_determinism_and_throughput(ten_building_scene, tmp_path):
    with report(10, "grid determinism across workers", budget_s=None) as rep:
        scene = ten_building_scene
        tx = (-120.0, 0.0, 25.0)
        spec = coverage.GridSpec(x0=-100.0, y0=-100.0, nx=100, ny=100, cell_size=2.0)
        radio = em.RadioConfig(frequency=3.5e9)
        cfg = tracer.TraceConfig(
            max_reflections=4, max_diffractions=1, sbr_subdivision=4
        )

        t0 = time.perf_counter()
        g1 = coverage.eval_grid(scene, tx, ISO, ISO, radio, cfg, spec, workers=1)
        t1 = time.perf_counter() - t0
        rep.note = f"single-worker run {t1:.1f}s"
        assert t1 <= 60.0

        g1b = coverage.eval_grid(scene, tx, ISO, ISO, radio, cfg, spec, workers=1)
        g4 = coverage.eval_grid(scene, tx, ISO, ISO, radio, cfg, spec, workers=4)
        g8 = coverage.eval_grid(scene, tx, ISO, ISO, radio, cfg, spec, workers=8)

        assert g1.in_building.any() and not g1.in_building.all()
        for other in (g1b, g4, g8):
            assert g1.rss_dbm.tobytes() == other.rss_dbm.tobytes()
            assert g1.los.tobytes() == other.los.tobytes()
            assert g1.n_paths.tobytes() == other.n_paths.tobytes()
            assert g1.in_building.tobytes() == other.in_building.tobytes()

        # Exported artifacts are byte-identical as well.
        blobs = []
        for tag, grid in (("a", g1), ("b", g8)):
            csv = tmp_path / f"{tag}.csv"
            ppm = tmp_path / f"{tag}.ppm"
            hist = tmp_path / f"{tag}_hist.csv"
            coverage.export_grid_csv(grid, csv)
            coverage.export_grid_ppm(grid, ppm)
            coverage.export_histogram_csv(coverage.histogram(grid.rss_dbm), hist)
            blobs.append((csv.read_bytes(), ppm.read_bytes(), hist.read_bytes()))
        assert blobs[0] == blobs[1]
