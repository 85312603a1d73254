"""Electromagnetic models: materials, Fresnel reflection, wedge diffraction,
knife-edge loss, free-space loss, foliage attenuation, and the complex field
walk along a traced path.

Field phasors use the e^{+j omega t} time convention, so propagation over a
distance d multiplies by e^{-jkd}.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import modfresnelm

C0 = 299792458.0  # vacuum speed of light, m/s
EPS0 = 8.8541878128e-12  # vacuum permittivity, F/m


def wavelength(f_hz):
    return C0 / f_hz


def wavenumber(f_hz):
    return 2.0 * np.pi * f_hz / C0


# ----------------------------------------------------------------------
# materials


@dataclass(frozen=True)
class Material:
    """Homogeneous surface material: relative permittivity and conductivity."""

    name: str
    eps_r: float
    sigma: float  # S/m
    color: tuple  # display color for scene exports


@dataclass(frozen=True)
class FoliageMaterial:
    """Volume attenuation per meter, split by polarization."""

    name: str
    alpha_v: float  # dB/m, vertical polarization
    alpha_h: float  # dB/m, horizontal polarization
    color: tuple


MATERIALS = {
    "brick": Material("brick", eps_r=4.44, sigma=0.001, color=(178, 34, 34)),
    "concrete": Material("concrete", eps_r=7.0, sigma=0.015, color=(240, 240, 240)),
    # Bulk ground parameters evaluated at 3.5 GHz.
    "medium_dry_earth": Material(
        "medium_dry_earth", eps_r=13.23, sigma=0.27, color=(128, 128, 128)
    ),
}

FOLIAGE_MATERIALS = {
    "dense_foliage": FoliageMaterial(
        "dense_foliage", alpha_v=1.0, alpha_h=1.0, color=(144, 238, 144)
    ),
    "deciduous_forest": FoliageMaterial(
        "deciduous_forest", alpha_v=1.11, alpha_h=1.64, color=(0, 100, 0)
    ),
}


def complex_permittivity(material, f_hz):
    """eps_r - j sigma / (2 pi f eps0) for the e^{+j omega t} convention."""
    return material.eps_r - 1j * material.sigma / (2.0 * np.pi * f_hz * EPS0)


# ----------------------------------------------------------------------
# reflection


def fresnel_coefficients(cos_theta, eps_c):
    """Reflection coefficients (gamma_s, gamma_p) off a half space.

    cos_theta is the cosine of the incidence angle from the surface
    normal; eps_c the complex relative permittivity. Accepts arrays.
    With these conventions a PEC limit gives gamma_s -> -1 and
    gamma_p -> +1, and gamma_p vanishes at the Brewster angle of a
    lossless dielectric.
    """
    cos_theta = np.asarray(cos_theta, dtype=np.float64)
    sin2 = 1.0 - cos_theta**2
    root = np.sqrt(eps_c - sin2 + 0j)
    gamma_s = (cos_theta - root) / (cos_theta + root)
    gamma_p = (eps_c * cos_theta - root) / (eps_c * cos_theta + root)
    return gamma_s, gamma_p


# ----------------------------------------------------------------------
# free space


def fspl_db(d_m, f_hz):
    """Free-space path loss 20 log10(4 pi d / lambda)."""
    return 20.0 * np.log10(4.0 * np.pi * np.asarray(d_m, dtype=np.float64) / wavelength(f_hz))


def friis_dbm(ptx_dbm, gtx_dbi, grx_dbi, d_m, f_hz):
    """Received power over an unobstructed line-of-sight link."""
    return ptx_dbm + gtx_dbi + grx_dbi - fspl_db(d_m, f_hz)


# ----------------------------------------------------------------------
# knife-edge diffraction (single-edge approximation)


def knife_edge_loss_db(v):
    """Diffraction loss J(v) over a knife edge, v the Fresnel parameter.

    Zero below v = -0.78 where the approximation hands over to free
    space.
    """
    v = np.asarray(v, dtype=np.float64)
    loss = 6.9 + 20.0 * np.log10(np.sqrt((v - 0.1) ** 2 + 1.0) + v - 0.1)
    return np.where(v > -0.78, loss, 0.0)


# ----------------------------------------------------------------------
# uniform wedge diffraction


def transition_function(x):
    """Kouyoumjian transition function F(x) for x >= 0."""
    x = np.asarray(x, dtype=np.float64)
    sqrt_x = np.sqrt(x)
    fm = modfresnelm(sqrt_x)[0]
    return 2j * sqrt_x * np.exp(1j * x) * fm


def _nearest_branch(beta, n, sign):
    """Integer N minimizing |2 pi n N - (beta + sign pi)|."""
    cand = np.array([-1.0, 0.0, 1.0])
    diff = np.abs(2.0 * np.pi * n * cand[None, :] - (beta + sign * np.pi)[:, None])
    return cand[np.argmin(diff, axis=1)]


def _cot_term(k, n, beta0, beta, L, sign):
    """One of the four wedge terms, with the grazing special case.

    Near the shadow/reflection boundary the cotangent blows up and the
    product with F stays finite; the masked expansion below keeps the
    coefficient continuous through the boundary.
    """
    N = _nearest_branch(beta, n, sign)
    eps = beta - sign * (2.0 * np.pi * n * N - np.pi)
    near = np.abs(eps) <= 1e-12

    out = np.empty(beta.shape, dtype=np.complex128)
    if near.any():
        sgn = np.where(eps[near] > 0, 1.0, -1.0)
        Ln = L[near]
        val = np.sqrt(2.0 * np.pi * k * Ln) * sgn
        val = val - 2.0 * k * Ln * eps[near] * np.exp(1j * np.pi / 4.0)
        out[near] = n * np.exp(1j * np.pi / 4.0) * val
    far = ~near
    if far.any():
        a = 2.0 * np.cos((2.0 * np.pi * n * N[far] - beta[far]) / 2.0) ** 2
        pre = -np.exp(-1j * np.pi / 4.0) / (
            2.0 * n * np.sqrt(2.0 * np.pi * k) * np.sin(beta0[far])
        )
        cot = 1.0 / np.tan((np.pi + sign * beta[far]) / (2.0 * n))
        out[far] = pre * cot * transition_function(k * L[far] * a)
    return out


def utd_coefficient(k, n, beta0, phi, phi_p, L):
    """Wedge diffraction coefficients (D_soft, D_hard).

    k: wavenumber; n: exterior wedge angle / pi (1 <= n <= 2 for
    building edges); beta0: angle between the incident ray and the
    edge; phi, phi_p: diffraction and incidence angles measured from
    the o-face around the exterior of the wedge; L: distance parameter.
    All angle/length arguments may be arrays of a common shape.

    Soft applies to the field component parallel to the edge, hard to
    the perpendicular component (PEC faces).
    """
    beta0, phi, phi_p, L = np.broadcast_arrays(
        np.atleast_1d(np.asarray(beta0, dtype=np.float64)),
        np.atleast_1d(np.asarray(phi, dtype=np.float64)),
        np.atleast_1d(np.asarray(phi_p, dtype=np.float64)),
        np.atleast_1d(np.asarray(L, dtype=np.float64)),
    )
    shape = phi.shape
    beta0 = beta0.ravel()
    phi = phi.ravel()
    phi_p = phi_p.ravel()
    L = L.ravel()

    d1 = _cot_term(k, n, beta0, phi - phi_p, L, +1.0)
    d2 = _cot_term(k, n, beta0, phi - phi_p, L, -1.0)
    d3 = _cot_term(k, n, beta0, phi + phi_p, L, +1.0)
    d4 = _cot_term(k, n, beta0, phi + phi_p, L, -1.0)
    d_soft = (d1 + d2 - (d3 + d4)).reshape(shape)
    d_hard = (d1 + d2 + (d3 + d4)).reshape(shape)
    return d_soft, d_hard


# ----------------------------------------------------------------------
# foliage


def weissberger_loss_db(f_hz, depth_m):
    """Modified exponential decay loss through dense foliage.

    Valid to 400 m of woodland depth; deeper chords are clamped with a
    warning. Both branches agree at the 14 m crossover to within a few
    hundredths of a dB.
    """
    f_ghz = f_hz / 1e9
    depth = np.asarray(depth_m, dtype=np.float64)
    if np.any(depth < 0):
        raise ValueError("foliage depth must be >= 0")
    if np.any(depth > 400.0):
        warnings.warn("foliage depth exceeds 400 m; clamping", stacklevel=2)
        depth = np.minimum(depth, 400.0)
    shallow = 0.45 * f_ghz**0.284 * depth
    deep = 1.33 * f_ghz**0.284 * depth**0.588
    return np.where(depth <= 14.0, shallow, deep)


def specific_attenuation_loss_db(alpha_db_per_m, depth_m):
    """Linear foliage loss alpha * d."""
    return alpha_db_per_m * np.asarray(depth_m, dtype=np.float64)


# ----------------------------------------------------------------------
# polarization basis and the field walk


def theta_hat(d):
    """Spherical unit vector e_theta for propagation direction d.

    Points toward increasing polar angle (downward tilt); for a
    horizontal direction this is -z, which carries the vertically
    polarized component.
    """
    d = np.asarray(d, dtype=np.float64)
    horiz = np.hypot(d[0], d[1])
    if horiz < 1e-12:
        # Propagation straight up or down: any transverse axis works.
        return np.array([1.0, 0.0, 0.0]) * (1.0 if d[2] > 0 else -1.0)
    cph, sph = d[0] / horiz, d[1] / horiz
    return np.array([d[2] * cph, d[2] * sph, -horiz])


def phi_hat(d):
    """Azimuthal unit vector for propagation direction d."""
    d = np.asarray(d, dtype=np.float64)
    horiz = np.hypot(d[0], d[1])
    if horiz < 1e-12:
        return np.array([0.0, 1.0, 0.0])
    return np.array([-d[1] / horiz, d[0] / horiz, 0.0])


def reflect_field(e_field, d_in, d_out, normal, gamma_s, gamma_p):
    """Apply a specular reflection to a complex field vector.

    d_in and d_out are unit propagation directions before and after the
    bounce; the s/p decomposition is built around the surface normal.
    """
    cross = np.cross(d_in, normal)
    nc = np.linalg.norm(cross)
    if nc < 1e-9:
        # Normal incidence: transverse plane is degenerate, any s axis
        # gives the same physical result.
        s_hat = theta_hat(d_in)
    else:
        s_hat = cross / nc
    p_in = np.cross(s_hat, d_in)
    p_out = np.cross(s_hat, d_out)
    es = e_field @ s_hat
    ep = e_field @ p_in
    return gamma_s * es * s_hat + gamma_p * ep * p_out


def _diffract_field(e_field, d_in, d_out, rec, k, L):
    """Apply a wedge diffraction to a complex field vector.

    The edge-fixed decomposition uses phi-hat vectors perpendicular to
    the edge in the incidence and diffraction planes; the component
    along beta0-hat (parallel-ish to the edge) takes the soft
    coefficient, the perpendicular one the hard coefficient.
    """
    e_hat = rec.e_hat
    # Angles from the o-face, wrapped to [0, 2 pi).
    def face_angle(v):
        t = v - (v @ e_hat) * e_hat
        t = t / np.linalg.norm(t)
        ang = np.arctan2(t @ rec.n0, t @ rec.t0)
        return ang if ang >= 0.0 else ang + 2.0 * np.pi

    phi_p = face_angle(-d_in)
    phi = face_angle(d_out)
    n = rec.n_wedge
    phi_p = min(max(phi_p, 0.0), n * np.pi)
    phi = min(max(phi, 0.0), n * np.pi)
    beta0 = np.arccos(np.clip(abs(d_in @ e_hat), -1.0, 1.0))
    beta0 = max(beta0, 1e-6)

    d_soft, d_hard = utd_coefficient(k, n, beta0, phi, phi_p, L)
    d_soft = complex(d_soft[()] if d_soft.shape == () else d_soft[0])
    d_hard = complex(d_hard[()] if d_hard.shape == () else d_hard[0])

    # Edge-fixed transverse bases.
    phi_in = np.cross(-e_hat, d_in)
    ni = np.linalg.norm(phi_in)
    phi_in = phi_in / ni if ni > 1e-12 else phi_hat(d_in)
    beta_in = np.cross(phi_in, d_in)
    phi_out = np.cross(-e_hat, d_out)
    no = np.linalg.norm(phi_out)
    phi_out = phi_out / no if no > 1e-12 else phi_hat(d_out)
    beta_out = np.cross(phi_out, d_out)

    # With these basis orientations the coefficients apply with a plus
    # sign; the total field then stays continuous across the shadow
    # boundary where the direct ray switches off.
    e_beta = e_field @ beta_in
    e_phi = e_field @ phi_in
    return (d_soft * e_beta) * beta_out + (d_hard * e_phi) * phi_out


def path_field(path, f_hz, materials, e_launch):
    """Walk a traced path and return the received complex field vector.

    e_launch is the (3,) complex field vector at departure (unit
    magnitude for a 0 dB antenna). The result includes spreading,
    interaction coefficients and the propagation phase; multiply by
    lambda/(4 pi) and the antenna amplitude gains to get the voltage
    term of the link budget. Returns (field, info) where info carries
    the per-term amplitude factors for link-budget breakdowns.
    """
    pts = path.points
    segs = np.diff(pts, axis=0)
    seg_len = np.linalg.norm(segs, axis=1)
    seg_dir = segs / seg_len[:, None]
    k = wavenumber(f_hz)
    total = float(seg_len.sum())

    # Unfolded distance from the transmitter to each diffraction, and
    # from each diffraction to the next one (or the receiver); specular
    # bounces keep the spherical wavefront so they only add distance.
    diff_pos = [i for i, rec in enumerate(path.interactions) if rec.kind == "D"]
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    spread = 1.0 / cum[diff_pos[0] + 1] if diff_pos else 1.0 / total

    refl_ratio = 1.0
    diff_ratio = 1.0
    e = np.asarray(e_launch, dtype=np.complex128)
    for i, rec in enumerate(path.interactions):
        d_in = seg_dir[i]
        d_out = seg_dir[i + 1]
        before = np.linalg.norm(e)
        if rec.kind == "R":
            mat = materials[rec.material_id]
            eps_c = complex_permittivity(mat, f_hz)
            cos_theta = abs(d_in @ rec.normal)
            gs, gp = fresnel_coefficients(cos_theta, eps_c)
            e = reflect_field(e, d_in, d_out, rec.normal, complex(gs), complex(gp))
            if before > 0:
                refl_ratio *= np.linalg.norm(e) / before
        else:
            rho = cum[i + 1]  # tx -> this edge, unfolded
            nxt = next((j for j in diff_pos if j > i), None)
            s_out = (cum[nxt + 1] if nxt is not None else cum[-1]) - cum[i + 1]
            sin_b0 = np.sqrt(max(1.0 - (d_in @ rec.e_hat) ** 2, 1e-12))
            L = rho * s_out / (rho + s_out) * sin_b0**2
            e = _diffract_field(e, d_in, d_out, rec, k, L)
            if before > 0:
                diff_ratio *= np.linalg.norm(e) / before
            spread *= np.sqrt(rho / (s_out * (rho + s_out)))
    info = {
        "spread": spread,
        "refl_ratio": refl_ratio,
        "diff_ratio": diff_ratio,
        "length": total,
    }
    return e * spread * np.exp(-1j * k * total), info


# ----------------------------------------------------------------------
# link budget


@dataclass
class RadioConfig:
    """Link-level settings shared by every path of a run."""

    frequency: float  # Hz
    tx_power_dbm: float = 30.0
    polarization: str = "V"
    combine: str = "power"  # "power" | "coherent"

    def __post_init__(self):
        if not 100e6 <= self.frequency <= 30e9:
            raise ValueError(
                f"frequency {self.frequency} Hz outside the 100 MHz - 30 GHz "
                "validity range"
            )
        if not np.isfinite(self.tx_power_dbm):
            raise ValueError("tx_power must be finite")
        if self.polarization not in ("V", "H"):
            raise ValueError(f"unknown polarization {self.polarization!r}")
        if self.combine not in ("power", "coherent"):
            raise ValueError(f"unknown combine mode {self.combine!r}")


@dataclass
class PathContribution:
    """One path's complex voltage amplitude and its dB breakdown.

    amplitude is normalized so |amplitude|^2 is milliwatts at the
    receiver; the breakdown terms sum to power_dbm - tx_power.
    """

    signature: tuple
    amplitude: complex
    power_dbm: float
    breakdown: dict


_TINY = 1e-30


def _foliage_db(path, cfg):
    """Total vegetation loss of a path, aggregated per volume."""
    per_volume = {}
    for seg in getattr(path, "foliage", ()):
        for vol, length in seg:
            key = id(vol)
            prev = per_volume.get(key)
            per_volume[key] = (vol, (prev[1] if prev else 0.0) + length)
    loss = 0.0
    for vol, depth in per_volume.values():
        if getattr(vol, "model", "generic") == "weissberger":
            loss += float(weissberger_loss_db(cfg.frequency, depth))
        else:
            alpha = vol.alpha_v if cfg.polarization == "V" else vol.alpha_h
            loss += float(specific_attenuation_loss_db(alpha, depth))
    return loss


def path_contribution(path, tx_ant, rx_ant, cfg, materials=MATERIALS):
    """Assemble the full link budget for one path.

    tx_ant / rx_ant are antenna specs evaluated through the antenna
    module; cfg is a RadioConfig.
    """
    from . import antenna

    dep = path.points[1] - path.points[0]
    dep = dep / np.linalg.norm(dep)
    arr = path.points[-1] - path.points[-2]
    arr = arr / np.linalg.norm(arr)

    if cfg.polarization == "V":
        e_launch = theta_hat(dep)
        e_rx = theta_hat(arr)
    else:
        e_launch = phi_hat(dep)
        e_rx = phi_hat(arr)

    gt_db = antenna.gain_dbi(tx_ant, dep)
    gr_db = antenna.gain_dbi(rx_ant, -arr)
    fol_db = _foliage_db(path, cfg)

    field, info = path_field(path, cfg.frequency, materials, e_launch)
    proj = complex(field @ e_rx)
    lam = wavelength(cfg.frequency)

    amp = (
        np.sqrt(10.0 ** (cfg.tx_power_dbm / 10.0))
        * 10.0 ** ((gt_db + gr_db) / 20.0)
        * (lam / (4.0 * np.pi))
        * proj
        * 10.0 ** (-fol_db / 20.0)
    )
    power_dbm = 10.0 * np.log10(max(abs(amp) ** 2, _TINY))

    # Breakdown: norm ratios telescoped from the walk; the projection
    # of the final field onto the receive axis counts as antenna
    # (polarization mismatch) loss.
    fnorm = np.linalg.norm(field)
    proj_ratio = abs(proj) / fnorm if fnorm > 0 else 0.0
    spreading_db = 20.0 * np.log10(max(lam / (4.0 * np.pi) * info["spread"], _TINY))
    reflection_db = 20.0 * np.log10(max(info["refl_ratio"], _TINY))
    diffraction_db = 20.0 * np.log10(max(info["diff_ratio"], _TINY))
    antenna_db = gt_db + gr_db + 20.0 * np.log10(max(proj_ratio, _TINY))
    breakdown = {
        "spreading_db": spreading_db,
        "reflection_db": reflection_db,
        "diffraction_db": diffraction_db,
        "foliage_db": -fol_db,
        "antenna_db": antenna_db,
    }
    return PathContribution(
        signature=path.signature,
        amplitude=complex(amp),
        power_dbm=float(power_dbm),
        breakdown=breakdown,
    )


# ----------------------------------------------------------------------
# bulk field evaluation over path batches
#
# Vectorized twins of the scalar walk above, applied to PathBatch
# groups from the bulk tracer. Arithmetic sticks to elementwise numpy
# ops so per-receiver results do not depend on batch partitioning.


def _d3(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def theta_hats(d):
    """Rowwise theta_hat over (N, 3) unit directions."""
    d = np.asarray(d, dtype=np.float64)
    horiz = np.hypot(d[:, 0], d[:, 1])
    fine = horiz >= 1e-12
    safe = np.where(fine, horiz, 1.0)
    out = np.stack([d[:, 2] * d[:, 0] / safe, d[:, 2] * d[:, 1] / safe, -horiz], axis=1)
    vert = np.zeros_like(out)
    vert[:, 0] = np.where(d[:, 2] > 0, 1.0, -1.0)
    return np.where(fine[:, None], out, vert)


def phi_hats(d):
    """Rowwise phi_hat over (N, 3) unit directions."""
    d = np.asarray(d, dtype=np.float64)
    horiz = np.hypot(d[:, 0], d[:, 1])
    fine = horiz >= 1e-12
    safe = np.where(fine, horiz, 1.0)
    out = np.stack([-d[:, 1] / safe, d[:, 0] / safe, np.zeros(len(d))], axis=1)
    vert = np.zeros_like(out)
    vert[:, 1] = 1.0
    return np.where(fine[:, None], out, vert)


def reflect_fields(e_field, d_in, d_out, normal, gamma_s, gamma_p):
    """Rowwise reflect_field: (M, 3) complex fields, (M,) coefficients."""
    cross = np.cross(d_in, normal)
    nc = np.sqrt(_d3(cross, cross))
    deg = nc < 1e-9
    s_hat = np.where(
        deg[:, None], theta_hats(d_in), cross / np.where(deg, 1.0, nc)[:, None]
    )
    p_in = np.cross(s_hat, d_in)
    p_out = np.cross(s_hat, d_out)
    es = _d3(e_field, s_hat)
    ep = _d3(e_field, p_in)
    return (gamma_s * es)[:, None] * s_hat + (gamma_p * ep)[:, None] * p_out


def _diffract_fields(e_field, d_in, d_out, rec, k, L):
    """Rowwise _diffract_field against one shared wedge record."""
    e_hat = rec.e_hat

    def face_angle(v):
        t = v - _d3(v, e_hat)[:, None] * e_hat
        norm = np.sqrt(_d3(t, t))
        t = t / np.where(norm > 0, norm, 1.0)[:, None]
        ang = np.arctan2(_d3(t, rec.n0), _d3(t, rec.t0))
        return np.where(ang < 0.0, ang + 2.0 * np.pi, ang)

    n = rec.n_wedge
    phi_p = np.clip(face_angle(-d_in), 0.0, n * np.pi)
    phi = np.clip(face_angle(d_out), 0.0, n * np.pi)
    beta0 = np.arccos(np.clip(np.abs(_d3(d_in, e_hat)), -1.0, 1.0))
    beta0 = np.maximum(beta0, 1e-6)

    d_soft, d_hard = utd_coefficient(k, n, beta0, phi, phi_p, L)

    phi_in = np.cross(np.broadcast_to(-e_hat, d_in.shape), d_in)
    ni = np.sqrt(_d3(phi_in, phi_in))
    phi_in = np.where(
        (ni > 1e-12)[:, None], phi_in / np.where(ni > 1e-12, ni, 1.0)[:, None],
        phi_hats(d_in),
    )
    beta_in = np.cross(phi_in, d_in)
    phi_out = np.cross(np.broadcast_to(-e_hat, d_out.shape), d_out)
    no = np.sqrt(_d3(phi_out, phi_out))
    phi_out = np.where(
        (no > 1e-12)[:, None], phi_out / np.where(no > 1e-12, no, 1.0)[:, None],
        phi_hats(d_out),
    )
    beta_out = np.cross(phi_out, d_out)

    e_beta = _d3(e_field, beta_in)
    e_phi = _d3(e_field, phi_in)
    return (d_soft * e_beta)[:, None] * beta_out + (d_hard * e_phi)[:, None] * phi_out


def batch_field(batch, f_hz, materials, e_launch):
    """Vectorized path_field over one PathBatch; returns (M, 3) complex."""
    pts = batch.points
    segs = np.diff(pts, axis=1)
    seg_len = np.sqrt(_d3(segs, segs))
    seg_dir = segs / seg_len[:, :, None]
    k = wavenumber(f_hz)
    m = len(pts)
    cum = np.concatenate([np.zeros((m, 1)), np.cumsum(seg_len, axis=1)], axis=1)
    total = cum[:, -1]

    diff_pos = [i for i, rec in enumerate(batch.interactions) if rec.kind == "D"]
    spread = 1.0 / cum[:, diff_pos[0] + 1] if diff_pos else 1.0 / total

    e = np.asarray(e_launch, dtype=np.complex128)
    for i, rec in enumerate(batch.interactions):
        d_in = seg_dir[:, i]
        d_out = seg_dir[:, i + 1]
        if rec.kind == "R":
            mat = materials[rec.material_id]
            eps_c = complex_permittivity(mat, f_hz)
            cos_theta = np.abs(_d3(d_in, rec.normal))
            gs, gp = fresnel_coefficients(cos_theta, eps_c)
            e = reflect_fields(e, d_in, d_out, rec.normal, gs, gp)
        else:
            rho = cum[:, i + 1]
            nxt = next((j for j in diff_pos if j > i), None)
            s_out = (cum[:, nxt + 1] if nxt is not None else total) - rho
            sin_b0 = np.sqrt(np.maximum(1.0 - _d3(d_in, rec.e_hat) ** 2, 1e-12))
            L = rho * s_out / (rho + s_out) * sin_b0**2
            e = _diffract_fields(e, d_in, d_out, rec, k, L)
            spread = spread * np.sqrt(rho / (s_out * (rho + s_out)))
    return e * (spread * np.exp(-1j * k * total))[:, None]


def batch_amplitudes(batch, tx_ant, rx_ant, cfg, materials=MATERIALS):
    """Vectorized path_contribution amplitudes for one PathBatch."""
    from . import antenna

    pts = batch.points
    dep = pts[:, 1] - pts[:, 0]
    dep = dep / np.sqrt(_d3(dep, dep))[:, None]
    arr = pts[:, -1] - pts[:, -2]
    arr = arr / np.sqrt(_d3(arr, arr))[:, None]

    if cfg.polarization == "V":
        e_launch = theta_hats(dep)
        e_rx = theta_hats(arr)
    else:
        e_launch = phi_hats(dep)
        e_rx = phi_hats(arr)

    gt_db = antenna.gains_dbi(tx_ant, dep)
    gr_db = antenna.gains_dbi(rx_ant, -arr)

    fol_db = np.zeros(len(pts))
    for vol, depth in batch.foliage:
        if getattr(vol, "model", "generic") == "weissberger":
            fol_db = fol_db + weissberger_loss_db(cfg.frequency, depth)
        else:
            alpha = vol.alpha_v if cfg.polarization == "V" else vol.alpha_h
            fol_db = fol_db + specific_attenuation_loss_db(alpha, depth)

    field = batch_field(batch, cfg.frequency, materials, e_launch)
    proj = _d3(field, e_rx)
    lam = wavelength(cfg.frequency)
    return (
        np.sqrt(10.0 ** (cfg.tx_power_dbm / 10.0))
        * 10.0 ** ((gt_db + gr_db) / 20.0)
        * (lam / (4.0 * np.pi))
        * proj
        * 10.0 ** (-fol_db / 20.0)
    )


EMPTY_RSS_DBM = -250.0  # sentinel: no propagation path reached the receiver


def combine(contribs, mode="power"):
    """Combine path contributions into a received signal strength in dBm."""
    if not contribs:
        return EMPTY_RSS_DBM
    amps = np.array([c.amplitude for c in contribs])
    if mode == "coherent":
        total = abs(amps.sum()) ** 2
    elif mode == "power":
        total = float((np.abs(amps) ** 2).sum())
    else:
        raise ValueError(f"unknown combine mode {mode!r}")
    return float(10.0 * np.log10(max(total, _TINY)))
