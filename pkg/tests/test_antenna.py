import numpy as np
import pytest

from sitewave import antenna as ant


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def test_isotropic_gain():
    spec = ant.AntennaSpec(kind="isotropic")
    rng = np.random.default_rng(3)
    for _ in range(10):
        d = unit(rng.standard_normal(3))
        assert ant.gain_dbi(spec, d) == 0.0


def test_dipole_broadside_peak():
    spec = ant.AntennaSpec(kind="dipole")
    g = ant.gain_dbi(spec, np.array([1.0, 0.0, 0.0]))
    assert g == pytest.approx(2.15, abs=0.01)


def test_dipole_axis_floor():
    spec = ant.AntennaSpec(kind="dipole")
    assert ant.gain_dbi(spec, np.array([0.0, 0.0, 1.0])) == ant.GAIN_FLOOR_DBI
    assert ant.gain_dbi(spec, np.array([0.0, 0.0, -1.0])) == ant.GAIN_FLOOR_DBI


def test_dipole_formula_at_angle():
    spec = ant.AntennaSpec(kind="dipole")
    theta = np.radians(50.0)
    d = np.array([np.sin(theta), 0.0, np.cos(theta)])
    expect = 10 * np.log10(
        1.643 * (np.cos(np.pi / 2 * np.cos(theta)) / np.sin(theta)) ** 2
    )
    assert ant.gain_dbi(spec, d) == pytest.approx(expect, abs=1e-9)


def test_dipole_sphere_integral():
    # Lossless element: integral of linear gain over the sphere = 4 pi.
    theta = np.radians(np.arange(0.5, 180.0, 1.0))
    g = 10 ** (ant.dipole_gain_dbi(np.cos(theta)) / 10.0)
    integral = float((g * np.sin(theta)).sum()) * np.radians(1.0) * 2 * np.pi
    assert integral == pytest.approx(4 * np.pi, rel=0.03)


def test_dipole_tilt_moves_peak():
    spec = ant.AntennaSpec(kind="dipole", pitch_deg=90.0)
    # Axis now horizontal along x; broadside is the z direction.
    assert ant.gain_dbi(spec, np.array([0.0, 0.0, 1.0])) == pytest.approx(2.15, abs=0.01)
    assert ant.gain_dbi(spec, np.array([1.0, 0.0, 0.0])) == ant.GAIN_FLOOR_DBI


# ----------------------------------------------------------------------
# gridded patterns


def grid_fixture():
    theta = np.arange(0.0, 181.0)
    phi = np.arange(0.0, 360.0)
    gain = np.zeros((181, 360))
    gain[90, 0] = 12.04
    return ant.PatternGrid(theta, phi, gain)


def test_pattern_node_identity():
    g = grid_fixture()
    spec = ant.AntennaSpec(kind="pattern", pattern=g)
    assert ant.gain_dbi(spec, np.array([1.0, 0.0, 0.0])) == pytest.approx(12.04)
    assert ant.gain_dbi(spec, unit([0.0, 1.0, 0.0])) == pytest.approx(0.0)


def test_pattern_phi_wraparound():
    g = grid_fixture()
    # Query between phi=359 and phi=0 must interpolate across the seam.
    v = g.sample(90.0, 359.5)
    assert v == pytest.approx(12.04 / 2)
    assert g.sample(90.0, 360.0 + 0.0) == pytest.approx(12.04)


def test_batch_matches_scalar():
    g = ant.synth_trisector()
    spec = ant.AntennaSpec(kind="pattern", pattern=g, yaw_deg=30.0)
    rng = np.random.default_rng(7)
    dirs = rng.standard_normal((50, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    batch = ant.gains_dbi(spec, dirs)
    for i in range(50):
        assert batch[i] == pytest.approx(ant.gain_dbi(spec, dirs[i]), abs=1e-9)


def test_load_pattern_roundtrip():
    rows = ["theta_deg,phi_deg,gain_dbi"]
    for t in (0.0, 90.0, 180.0):
        for p in (0.0, 120.0, 240.0):
            rows.append(f"{t},{p},{1.5 if (t, p) == (90.0, 0.0) else 0.0}")
    g = ant.load_pattern("\n".join(rows))
    assert g.sample(90.0, 0.0) == pytest.approx(1.5)


def test_load_pattern_missing_cell():
    rows = ["theta_deg,phi_deg,gain_dbi"]
    for t in (0.0, 90.0, 180.0):
        for p in (0.0, 120.0, 240.0):
            if (t, p) != (90.0, 240.0):
                rows.append(f"{t},{p},0.0")
    with pytest.raises(ValueError, match="missing cell theta=90.0 phi=240.0"):
        ant.load_pattern("\n".join(rows))


def test_load_pattern_duplicate_and_bad_number():
    base = "theta_deg,phi_deg,gain_dbi\n0,0,1\n0,0,2\n"
    with pytest.raises(ValueError, match="duplicate"):
        ant.load_pattern(base)
    with pytest.raises(ValueError, match="non-numeric"):
        ant.load_pattern("theta_deg,phi_deg,gain_dbi\n0,0,abc\n")


# ----------------------------------------------------------------------
# tri-sector synthesis


def test_trisector_exact_periodicity():
    g = ant.synth_trisector()
    rolled = np.roll(g.gain_dbi, 120, axis=1)
    assert np.array_equal(g.gain_dbi, rolled)


def test_trisector_power_conservation():
    g = ant.synth_trisector()
    assert g.sphere_integral() == pytest.approx(4 * np.pi, rel=0.03)


def test_trisector_array_factor_null():
    # n=4, half-wave spacing: first null at cos(theta) = 1/2.
    af = ant.array_factor(np.radians(np.array([90.0, 60.0])), 4, 0.5)
    assert af[0] == pytest.approx(1.0)
    assert af[1] == pytest.approx(0.0, abs=1e-12)
    g = ant.synth_trisector()
    assert g.sample(60.0, 0.0) < g.sample(90.0, 0.0) - 20.0


def test_trisector_azimuth_ripple_is_quasi_omni():
    g = ant.synth_trisector()
    cut = g.gain_dbi[90, :]
    ripple = cut.max() - cut.min()
    assert ripple < 10.0  # three 120-degree panels overlap into a ring


def test_single_element_single_sector_is_bare_element():
    g = ant.synth_trisector(n=1, sectors=1)
    # Peak on the horizon at the panel boresight, monotone falloff in
    # azimuth over the front half.
    row = g.gain_dbi[90, :]
    assert row.argmax() == 0
    assert np.all(np.diff(row[:80]) < 1e-9)


def test_yaw_rotation_matches_shifted_query():
    g = ant.synth_trisector()
    base = ant.AntennaSpec(kind="pattern", pattern=g)
    turned = ant.AntennaSpec(kind="pattern", pattern=g, yaw_deg=40.0)
    for phi_deg in (0.0, 33.0, 200.0):
        p = np.radians(phi_deg)
        d0 = np.array([np.cos(p), np.sin(p), 0.0])
        p2 = np.radians(phi_deg + 40.0)
        d1 = np.array([np.cos(p2), np.sin(p2), 0.0])
        assert ant.gain_dbi(turned, d1) == pytest.approx(
            ant.gain_dbi(base, d0), abs=1e-9
        )


def test_pattern_grid_validation():
    with pytest.raises(ValueError, match="uniform"):
        ant.PatternGrid(
            np.array([0.0, 10.0, 180.0]), np.arange(0.0, 360.0), np.zeros((3, 360))
        )
    with pytest.raises(ValueError, match="span"):
        ant.PatternGrid(
            np.arange(0.0, 180.0), np.arange(0.0, 360.0), np.zeros((180, 360))
        )
