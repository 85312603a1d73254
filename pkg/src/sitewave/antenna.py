"""Antenna gain evaluation: analytic elements, gridded pattern import with
spherical interpolation, and synthesis of a tri-sectoral base-station array
pattern.

Antenna-frame convention: z up along the element axis, theta measured from
+z (polar), phi from +x counterclockwise. Orientation maps the antenna frame
into the scene frame via yaw (about z), pitch (downtilt about the rotated y)
and roll.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

DIPOLE_PEAK = 1.643  # linear peak gain of the ideal half-wave dipole
GAIN_FLOOR_DBI = -60.0


@dataclass
class PatternGrid:
    """Full-sphere gain table on a regular (theta, phi) grid in degrees."""

    theta_deg: np.ndarray  # (nt,) ascending, 0..180 inclusive
    phi_deg: np.ndarray  # (np,) ascending, 0..360 exclusive
    gain_dbi: np.ndarray  # (nt, np)
    polarization: str = "total"

    def __post_init__(self):
        self.theta_deg = np.asarray(self.theta_deg, dtype=np.float64)
        self.phi_deg = np.asarray(self.phi_deg, dtype=np.float64)
        self.gain_dbi = np.asarray(self.gain_dbi, dtype=np.float64)
        nt, np_ = len(self.theta_deg), len(self.phi_deg)
        if self.gain_dbi.shape != (nt, np_):
            raise ValueError("gain matrix shape does not match axes")
        if self.theta_deg[0] != 0.0 or self.theta_deg[-1] != 180.0:
            raise ValueError("theta axis must span 0..180 degrees")
        dt = np.diff(self.theta_deg)
        dp = np.diff(self.phi_deg)
        if not (np.allclose(dt, dt[0]) and np.allclose(dp, dp[0])):
            raise ValueError("pattern grid must be uniform")
        if self.phi_deg[0] != 0.0 or not np.isclose(
            self.phi_deg[-1] + dp[0], 360.0
        ):
            raise ValueError("phi axis must cover 0..360 degrees exclusive")
        if not np.all(np.isfinite(self.gain_dbi)):
            raise ValueError("pattern gains must be finite")

    def sample(self, theta_deg, phi_deg):
        """Bilinear interpolation in dB with wrap-around in phi."""
        t = np.clip(np.asarray(theta_deg, dtype=np.float64), 0.0, 180.0)
        p = np.mod(np.asarray(phi_deg, dtype=np.float64), 360.0)
        dt = self.theta_deg[1] - self.theta_deg[0]
        dp = self.phi_deg[1] - self.phi_deg[0]
        ti = np.clip((t / dt).astype(np.int64), 0, len(self.theta_deg) - 2)
        pi = (p / dp).astype(np.int64) % len(self.phi_deg)
        ft = t / dt - ti
        fp = p / dp - pi
        pj = (pi + 1) % len(self.phi_deg)
        g = self.gain_dbi
        return (
            g[ti, pi] * (1 - ft) * (1 - fp)
            + g[ti + 1, pi] * ft * (1 - fp)
            + g[ti, pj] * (1 - ft) * fp
            + g[ti + 1, pj] * ft * fp
        )

    def sphere_integral(self):
        """Quadrature of the linear gain over the full sphere (steradian
        weighted); 4 pi for a lossless pattern."""
        dt = np.radians(self.theta_deg[1] - self.theta_deg[0])
        dp = np.radians(self.phi_deg[1] - self.phi_deg[0])
        lin = 10.0 ** (self.gain_dbi / 10.0)
        w = np.sin(np.radians(self.theta_deg)) * dt * dp
        return float((lin * w[:, None]).sum())


@dataclass
class AntennaSpec:
    """Antenna kind plus mounting orientation in degrees."""

    kind: str  # "isotropic" | "dipole" | "pattern"
    pattern: PatternGrid | None = None
    yaw_deg: float = 0.0
    pitch_deg: float = 0.0  # positive tilts the boresight down
    roll_deg: float = 0.0

    def __post_init__(self):
        if self.kind not in ("isotropic", "dipole", "pattern"):
            raise ValueError(f"unknown antenna kind {self.kind!r}")
        if self.kind == "pattern" and self.pattern is None:
            raise ValueError("pattern antenna needs a PatternGrid")
        for v in (self.yaw_deg, self.pitch_deg, self.roll_deg):
            if not np.isfinite(v):
                raise ValueError("orientation angles must be finite")


def _rotation(spec):
    """Scene-from-antenna rotation matrix."""
    cy, sy = np.cos(np.radians(spec.yaw_deg)), np.sin(np.radians(spec.yaw_deg))
    cp, sp = np.cos(np.radians(spec.pitch_deg)), np.sin(np.radians(spec.pitch_deg))
    cr, sr = np.cos(np.radians(spec.roll_deg)), np.sin(np.radians(spec.roll_deg))
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return rz @ ry @ rx


def dipole_gain_dbi(cos_theta):
    """Half-wave dipole gain vs angle from the element axis."""
    cos_theta = np.asarray(cos_theta, dtype=np.float64)
    sin_theta = np.sqrt(np.maximum(1.0 - cos_theta**2, 0.0))
    safe = sin_theta > 1e-9
    num = np.cos(np.pi / 2.0 * cos_theta)
    with np.errstate(divide="ignore", invalid="ignore"):
        lin = DIPOLE_PEAK * np.where(safe, num / np.where(safe, sin_theta, 1.0), 0.0) ** 2
        out = 10.0 * np.log10(np.where(lin > 0, lin, 1.0))
    return np.where(safe & (lin > 0), out, GAIN_FLOOR_DBI)


def gain_dbi(spec, direction):
    """Gain of the antenna toward a unit direction in the scene frame."""
    d = np.asarray(direction, dtype=np.float64)
    if spec.kind == "isotropic":
        return 0.0
    local = _rotation(spec).T @ d
    if spec.kind == "dipole":
        return float(dipole_gain_dbi(np.clip(local[2], -1.0, 1.0)))
    theta = np.degrees(np.arccos(np.clip(local[2], -1.0, 1.0)))
    phi = np.degrees(np.arctan2(local[1], local[0])) % 360.0
    return float(spec.pattern.sample(theta, phi))


def gains_dbi(spec, directions):
    """Vectorized gain_dbi over (N, 3) unit directions.

    Written with elementwise arithmetic (no matmul) so each row's value
    is independent of the batch it arrives in.
    """
    d = np.asarray(directions, dtype=np.float64)
    if spec.kind == "isotropic":
        return np.zeros(len(d))
    r = _rotation(spec)
    lz = d[:, 0] * r[0, 2] + d[:, 1] * r[1, 2] + d[:, 2] * r[2, 2]
    if spec.kind == "dipole":
        return dipole_gain_dbi(np.clip(lz, -1.0, 1.0))
    lx = d[:, 0] * r[0, 0] + d[:, 1] * r[1, 0] + d[:, 2] * r[2, 0]
    ly = d[:, 0] * r[0, 1] + d[:, 1] * r[1, 1] + d[:, 2] * r[2, 1]
    theta = np.degrees(np.arccos(np.clip(lz, -1.0, 1.0)))
    phi = np.degrees(np.arctan2(ly, lx)) % 360.0
    return spec.pattern.sample(theta, phi)


# ----------------------------------------------------------------------
# pattern file import


def load_pattern(source, polarization="total"):
    """Read a pattern CSV: header theta_deg,phi_deg,gain_dbi then rows.

    The rows must fill a full regular grid; the first missing cell is
    named in the error.
    """
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    elif hasattr(source, "read"):
        text = source.read()
        if isinstance(text, bytes):
            text = text.decode("utf-8")
    else:
        text = str(source)
    lines = [ln.strip() for ln in io.StringIO(text) if ln.strip()]
    if not lines or lines[0].replace(" ", "") != "theta_deg,phi_deg,gain_dbi":
        raise ValueError("pattern file must start with header theta_deg,phi_deg,gain_dbi")
    cells = {}
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 3:
            raise ValueError(f"malformed pattern row: {ln!r}")
        try:
            t, p, g = (float(x) for x in parts)
        except ValueError as exc:
            raise ValueError(f"non-numeric pattern row: {ln!r}") from exc
        key = (t, p)
        if key in cells:
            raise ValueError(f"duplicate pattern cell theta={t} phi={p}")
        cells[key] = g
    thetas = np.array(sorted({t for t, _ in cells}))
    phis = np.array(sorted({p for _, p in cells}))
    gain = np.empty((len(thetas), len(phis)))
    for ti, t in enumerate(thetas):
        for pi, p in enumerate(phis):
            if (t, p) not in cells:
                raise ValueError(f"pattern grid missing cell theta={t} phi={p}")
            gain[ti, pi] = cells[(t, p)]
    return PatternGrid(thetas, phis, gain, polarization=polarization)


# ----------------------------------------------------------------------
# tri-sector synthesis


def _element_field(el_rad, daz_rad, exponent=1.2):
    """Panel element field: cos^e in elevation and azimuth off boresight,
    with a flat -60 dB back lobe."""
    front = np.abs(daz_rad) <= np.pi / 2.0
    amp = np.cos(el_rad) ** exponent * np.where(
        front, np.abs(np.cos(daz_rad)) ** exponent, 0.0
    )
    back = 10.0 ** (GAIN_FLOOR_DBI / 20.0)
    return np.maximum(amp, back)


def array_factor(theta_rad, n, spacing):
    """Vertical uniform array factor, normalized to 1 at broadside."""
    psi = 2.0 * np.pi * spacing * np.cos(theta_rad)
    k = np.arange(n)
    af = np.exp(1j * psi[..., None] * k).sum(axis=-1)
    return np.abs(af) / n


def synth_trisector(n=4, spacing=0.5, sectors=3, element_exponent=1.2):
    """Synthesize the tri-sectoral base-station pattern on a 1 degree grid.

    Each sector is a vertical n-element array of patch-like elements;
    sectors are power-combined at equal azimuth spacing. The result is
    normalized so the sphere integral of linear gain equals 4 pi
    (lossless antenna), and is exactly periodic in 360/sectors degrees
    by construction (one sector is computed and the grid is rolled).
    """
    if n < 1 or spacing <= 0 or sectors < 1:
        raise ValueError("need n >= 1, spacing > 0, sectors >= 1")
    theta = np.arange(0.0, 181.0)
    phi = np.arange(0.0, 360.0)
    if sectors > 1 and 360 % sectors:
        raise ValueError("sector count must divide 360 for an exact grid")

    th = np.radians(theta)[:, None]
    el = np.pi / 2.0 - th  # elevation off the horizontal boresight plane
    daz = np.radians((phi[None, :] + 180.0) % 360.0 - 180.0)  # offset from az 0
    amp = _element_field(el, daz, element_exponent) * array_factor(th, n, spacing)
    power = amp**2

    # Sum sector panels over one 360/sectors wedge only and tile it, so
    # the sector periodicity of the stored grid is bit-exact (summing
    # rolled copies in place would reorder the floating-point adds).
    shift = 360 // sectors
    cols = np.arange(shift)
    block = np.zeros((len(theta), shift))
    for s in range(sectors):
        block += power[:, (cols - s * shift) % 360]
    total = np.concatenate([block] * sectors, axis=1)

    # Normalize to a lossless pattern: integral of gain over 4 pi = 4 pi.
    dt = np.radians(1.0)
    dp = np.radians(1.0)
    integral = float((total * (np.sin(th) * dt * dp)).sum())
    lin = total * (4.0 * np.pi / integral)
    gain = 10.0 * np.log10(np.maximum(lin, 10.0 ** (GAIN_FLOOR_DBI / 10.0)))
    return PatternGrid(theta, phi, gain, polarization="total")
