"""Ray-trace design of the two-surface (corrector + focuser) meta-optic.

Both surfaces are radial phase profiles traced with the generalized grating
equation: the transverse wavevector picks up the local phase gradient and
the longitudinal component is recomputed to stay on the k-sphere.  The
merit is the mean RMS spot radius over the design field angles plus a
penalty on the on-axis best-focus shift from the nominal plane (one focal
length behind the focuser).
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares, minimize

from .errors import DegenerateInputError, DomainError
from .synthesis import OpticalConfig

N_COEFFS = 5


@dataclass(frozen=True)
class PolynomialPhase:
    """phi(rho) = sum_{n=1..5} a_n (rho/R)^(2n); an even radial polynomial."""

    coeffs: np.ndarray
    radius: float
    z: float = 0.0

    def __post_init__(self):
        a = np.asarray(self.coeffs, dtype=float)
        if a.shape != (N_COEFFS,):
            raise DomainError(f"exactly {N_COEFFS} coefficients required, got {a.shape}")
        if self.radius <= 0:
            raise DomainError("radius must be positive")
        object.__setattr__(self, "coeffs", a)

    def eval(self, rho):
        """Returns (phi, dphi/drho) at radial coordinate rho >= 0."""
        rho = np.asarray(rho, dtype=float)
        u = (rho / self.radius) ** 2
        phi = np.zeros_like(rho)
        dphi = np.zeros_like(rho)
        for n in range(1, N_COEFFS + 1):
            phi = phi + self.coeffs[n - 1] * u**n
            dphi = dphi + self.coeffs[n - 1] * (2 * n) * u ** (n - 1) * rho / self.radius**2
        return phi, dphi

    def phase_at(self, x, y):
        X, Y = np.meshgrid(np.asarray(x, float), np.asarray(y, float))
        return self.eval(np.hypot(X, Y))[0]

    def phase_on(self, fld) -> np.ndarray:
        n_y, n_x = fld.samples.shape
        x = (np.arange(n_x) - n_x // 2) * fld.pitch + fld.origin[0]
        y = (np.arange(n_y) - n_y // 2) * fld.pitch + fld.origin[1]
        return self.phase_at(x, y)


@dataclass(frozen=True)
class HyperbolicPhase:
    """Ideal focuser phi(rho) = -k (sqrt(rho^2 + f^2) - f)."""

    focal_length: float
    wavelength: float
    z: float = 0.0

    def eval(self, rho):
        rho = np.asarray(rho, dtype=float)
        k = 2.0 * np.pi / self.wavelength
        root = np.sqrt(rho * rho + self.focal_length**2)
        return -k * (root - self.focal_length), -k * rho / root

    def phase_at(self, x, y):
        X, Y = np.meshgrid(np.asarray(x, float), np.asarray(y, float))
        return self.eval(np.hypot(X, Y))[0]

    def phase_on(self, fld) -> np.ndarray:
        n_y, n_x = fld.samples.shape
        x = (np.arange(n_x) - n_x // 2) * fld.pitch + fld.origin[0]
        y = (np.arange(n_y) - n_y // 2) * fld.pitch + fld.origin[1]
        return self.phase_at(x, y)


def flat_phase(radius: float, z: float = 0.0) -> PolynomialPhase:
    return PolynomialPhase(np.zeros(N_COEFFS), radius, z)


def quadratic_focuser(f: float, radius: float, wavelength: float,
                      z: float = 0.0) -> PolynomialPhase:
    """Paraxial lens phi = -pi rho^2 / (lambda f) as a polynomial profile."""
    a = np.zeros(N_COEFFS)
    a[0] = -np.pi * radius**2 / (wavelength * f)
    return PolynomialPhase(a, radius, z)


def hyperbolic_fit(f: float, radius: float, wavelength: float,
                   z: float = 0.0, samples: int = 600) -> PolynomialPhase:
    """Least-squares even-polynomial fit of the hyperbolic focuser phase."""
    rho = np.linspace(0.0, radius, samples)
    k = 2.0 * np.pi / wavelength
    target = -k * (np.sqrt(rho * rho + f * f) - f)
    basis = np.column_stack([(rho / radius) ** (2 * n) for n in range(1, N_COEFFS + 1)])
    coeffs, *_ = np.linalg.lstsq(basis, target, rcond=None)
    return PolynomialPhase(coeffs, radius, z)


@dataclass(frozen=True)
class RayBundle:
    """Rays as positions (n,3) and unit direction cosines (n,3)."""

    positions: np.ndarray
    directions: np.ndarray
    field_angle_deg: float
    wavelength: float

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=float)
        norms = np.sqrt((d * d).sum(axis=1))
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise DomainError("direction cosines must be unit-norm to 1e-12")


def hexapolar_pupil(radius: float, rings: int = 8) -> np.ndarray:
    """Hexapolar pupil sample points; rings=8 gives 217 rays."""
    pts = [(0.0, 0.0)]
    for k in range(1, rings + 1):
        r = radius * k / rings
        for j in range(6 * k):
            a = 2.0 * np.pi * j / (6 * k)
            pts.append((r * np.cos(a), r * np.sin(a)))
    return np.asarray(pts)


def collimated_bundle(radius: float, field_angle_deg: float, wavelength: float,
                      rings: int = 8) -> RayBundle:
    pup = hexapolar_pupil(radius, rings)
    n = len(pup)
    th = np.deg2rad(field_angle_deg)
    pos = np.column_stack([pup[:, 0], pup[:, 1], np.zeros(n)])
    dirs = np.tile([np.sin(th), 0.0, np.cos(th)], (n, 1))
    return RayBundle(pos, dirs, field_angle_deg, wavelength)


def eval_phase(p, rho):
    """Phase and radial slope of a profile at rho (thin wrapper)."""
    return p.eval(rho)


def refract_at_phase_surface(bundle: RayBundle, surface,
                             surface_radius: Optional[float] = None):
    """Apply the phase-gradient (grating) refraction at a z=const surface.

    Returns (new_bundle, ok_mask): rays falling outside the surface radius
    are flagged vignetted; rays pushed past the k-sphere (evanescent) are
    flagged invalid.  Direction cosines stay unit-norm by construction.
    """
    R = surface_radius if surface_radius is not None else surface.radius
    x, y = bundle.positions[:, 0], bundle.positions[:, 1]
    rho = np.hypot(x, y)
    inside = rho <= R * (1.0 + 1e-12)
    _, dphi = surface.eval(rho)
    with np.errstate(invalid="ignore"):
        gx = np.where(rho > 0, dphi * x / rho, 0.0)
        gy = np.where(rho > 0, dphi * y / rho, 0.0)
    k = 2.0 * np.pi / bundle.wavelength
    L = bundle.directions[:, 0] + gx / k
    M = bundle.directions[:, 1] + gy / k
    t2 = L * L + M * M
    propagating = t2 < 1.0
    # longitudinal component recomputed on the k-sphere, sign preserved
    Nz = np.sign(bundle.directions[:, 2]) * np.sqrt(np.maximum(1.0 - t2, 1e-300))
    dirs = np.column_stack([L, M, Nz])
    untouched = (gx == 0.0) & (gy == 0.0)
    dirs[untouched] = bundle.directions[untouched]   # zero kick: exact identity
    ok = inside & propagating
    # keep unit norm even for flagged rays so the bundle stays valid
    dirs[~propagating] = bundle.directions[~propagating]
    return replace(bundle, directions=dirs), ok


def _march_to(bundle: RayBundle, z: float) -> RayBundle:
    t = (z - bundle.positions[:, 2]) / bundle.directions[:, 2]
    pos = bundle.positions + bundle.directions * t[:, None]
    return replace(bundle, positions=pos)


@dataclass
class SpotDiagram:
    centroid: Tuple[float, float]
    rms_radius: float
    xy: np.ndarray
    n_vignetted: int
    field_angle_deg: float
    focus_shift: float = 0.0


def _trace_points(ms1, ms2, cfg: OpticalConfig, field_angle_deg: float,
                  rings: int, separation: Optional[float] = None):
    d = cfg.ms_separation_um if separation is None else separation
    r1 = cfg.aperture_d1_um / 2.0
    r2 = cfg.second_aperture_factor * r1
    b = collimated_bundle(r1, field_angle_deg, cfg.wavelength_um, rings)
    b, ok1 = refract_at_phase_surface(b, ms1, r1)
    b = _march_to(b, d)
    inside2 = np.hypot(b.positions[:, 0], b.positions[:, 1]) <= r2 * (1.0 + 1e-12)
    b, ok2 = refract_at_phase_surface(b, ms2, r2)
    b = _march_to(b, d + cfg.f1_um)
    ok = ok1 & ok2 & inside2
    slopes = b.directions[:, :2] / b.directions[:, 2:3]
    return b.positions[:, :2], slopes, ok


def trace_spot(ms1, ms2, cfg: OpticalConfig, field_angle_deg: float,
               rings: int = 8, separation: Optional[float] = None) -> SpotDiagram:
    """Trace a collimated bundle through both surfaces to the focal plane.

    The detection plane sits one focal length behind the second surface.
    Vignetted/evanescent rays are excluded from the statistics and counted.
    """
    xy, slopes, ok = _trace_points(ms1, ms2, cfg, field_angle_deg, rings,
                                   separation)
    n_bad = int((~ok).sum())
    pts = xy[ok]
    if len(pts) < 10:
        raise DegenerateInputError(
            f"only {len(pts)} rays survive the trace at {field_angle_deg} deg")
    cx, cy = pts[:, 0].mean(), pts[:, 1].mean()
    rms = float(np.sqrt(((pts[:, 0] - cx) ** 2 + (pts[:, 1] - cy) ** 2).mean()))
    # closed-form longitudinal shift minimizing the RMS radius
    u = slopes[ok]
    du = u - u.mean(axis=0)
    dxy = pts - [cx, cy]
    denom = (du * du).sum() / len(pts)
    shift = float(-(dxy * du).sum() / len(pts) / denom) if denom > 1e-18 else 0.0
    return SpotDiagram((float(cx), float(cy)), rms, pts, n_bad,
                       field_angle_deg, shift)


def merit_function(ms1, ms2, cfg: OpticalConfig,
                   field_angles_deg: Sequence[float], rings: int = 8,
                   shift_penalty: float = 0.05) -> float:
    """Mean RMS spot radius over the field plus |on-axis focus shift| penalty."""
    tot = 0.0
    shift = 0.0
    for th in field_angles_deg:
        spot = trace_spot(ms1, ms2, cfg, th, rings)
        tot += spot.rms_radius
        if th == 0:
            shift = spot.focus_shift
    return tot / len(field_angles_deg) + shift_penalty * abs(shift)


def _ray_residuals(params, cfg, angles, rings, r1, r2):
    ms1 = PolynomialPhase(params[:N_COEFFS], r1)
    ms2 = PolynomialPhase(params[N_COEFFS:], r2)
    out = []
    worst = np.deg2rad(max(angles))
    for th in angles:
        xy, _, ok = _trace_points(ms1, ms2, cfg, th, rings)
        if ok.sum() < 10:
            return np.full(2 * len(angles) * len(xy) + 1, 1e6)
        cx = xy[ok, 0].mean()
        cy = xy[ok, 1].mean()
        out.append(np.where(ok, xy[:, 0] - cx, 50.0))
        out.append(np.where(ok, xy[:, 1] - cy, 50.0))
        if th == max(angles):
            # pin the magnification so the optimizer cannot shrink the focal
            # length to cheat the spot size
            out.append(np.array([3.0 * (cx - cfg.f1_um * np.tan(worst))]))
    return np.concatenate(out) / np.sqrt(len(xy))


def optimize_coma_free(cfg: OpticalConfig,
                       field_angles_deg: Sequence[float] = (0.0, 5.0, 10.0, 13.0),
                       rings: int = 8, seed: int = 0, nm_restarts: int = 3,
                       shift_penalty: float = 0.05):
    """Optimize both surfaces for small, field-constant spots.

    Staged: closed-form hyperbolic fit seeds the focuser, a least-squares
    pass on the ray-spot residuals does the heavy lifting, and Nelder-Mead
    restarts polish the actual merit.  Returns (ms1, ms2, merit_history);
    the history records accepted (non-increasing) merit values, starting
    from the flat + quadratic initial design.
    """
    r1 = cfg.aperture_d1_um / 2.0
    r2 = cfg.second_aperture_factor * r1
    ms1_0 = flat_phase(r1)
    ms2_0 = quadratic_focuser(cfg.f1_um, r2, cfg.wavelength_um)
    history = [merit_function(ms1_0, ms2_0, cfg, field_angles_deg, rings,
                              shift_penalty)]

    p0 = np.concatenate([np.zeros(N_COEFFS),
                         hyperbolic_fit(cfg.f1_um, r2, cfg.wavelength_um).coeffs])
    res = least_squares(_ray_residuals, p0,
                        args=(cfg, tuple(field_angles_deg), rings, r1, r2),
                        diff_step=1e-7, xtol=1e-14, ftol=1e-14, max_nfev=600)
    best = res.x.copy()

    def merit_of(p):
        return merit_function(PolynomialPhase(p[:N_COEFFS], r1),
                              PolynomialPhase(p[N_COEFFS:], r2),
                              cfg, field_angles_deg, rings, shift_penalty)

    m_best = merit_of(best)
    if m_best <= history[-1]:
        history.append(m_best)

    rng = np.random.default_rng(seed)
    scale = np.abs(best) * 0.02 + 1.0
    stalled = False
    for restart in range(nm_restarts):
        x0 = best if restart == 0 else best + scale * rng.standard_normal(best.size)
        r = minimize(merit_of, x0, method="Nelder-Mead",
                     options=dict(maxiter=2000, xatol=1e-6, fatol=1e-9,
                                  adaptive=True))
        if r.fun < m_best - 1e-12:
            m_best, best = float(r.fun), r.x.copy()
            history.append(m_best)
        else:
            stalled = True
    if stalled and len(history) < 2:
        warnings.warn("optimizer made no improving step; returning best-so-far",
                      RuntimeWarning)
    return (PolynomialPhase(best[:N_COEFFS], r1),
            PolynomialPhase(best[N_COEFFS:], r2),
            np.asarray(history))


def optimize_single_surface(cfg: OpticalConfig,
                            field_angles_deg: Sequence[float] = (0.0, 5.0, 10.0, 13.0),
                            rings: int = 8) -> PolynomialPhase:
    """Best single-surface lens at equal f/#: one polynomial metasurface with
    the stop at the lens, for baseline comparison against the doublet."""
    r1 = cfg.aperture_d1_um / 2.0

    def trace_single(coeffs, th):
        lens = PolynomialPhase(coeffs, r1)
        b = collimated_bundle(r1, th, cfg.wavelength_um, rings)
        b, ok = refract_at_phase_surface(b, lens, r1)
        b = _march_to(b, cfg.f1_um)
        return b.positions[:, :2], ok

    worst = np.deg2rad(max(field_angles_deg))

    def resid(coeffs):
        out = []
        for th in field_angles_deg:
            xy, ok = trace_single(coeffs, th)
            cx, cy = xy[ok, 0].mean(), xy[ok, 1].mean()
            out.append(np.where(ok, xy[:, 0] - cx, 50.0))
            out.append(np.where(ok, xy[:, 1] - cy, 50.0))
            if th == max(field_angles_deg):
                out.append(np.array([3.0 * (cx - cfg.f1_um * np.tan(worst))]))
        return np.concatenate(out) / np.sqrt(len(xy))

    p0 = hyperbolic_fit(cfg.f1_um, r1, cfg.wavelength_um).coeffs
    res = least_squares(resid, p0, diff_step=1e-7, xtol=1e-14, ftol=1e-14,
                        max_nfev=400)
    return PolynomialPhase(res.x, r1)


def single_surface_spot(lens: PolynomialPhase, cfg: OpticalConfig,
                        field_angle_deg: float, rings: int = 8) -> SpotDiagram:
    b = collimated_bundle(lens.radius, field_angle_deg, cfg.wavelength_um, rings)
    b, ok = refract_at_phase_surface(b, lens, lens.radius)
    b = _march_to(b, cfg.f1_um)
    pts = b.positions[ok, :2]
    cx, cy = pts[:, 0].mean(), pts[:, 1].mean()
    rms = float(np.sqrt(((pts[:, 0] - cx) ** 2 + (pts[:, 1] - cy) ** 2).mean()))
    return SpotDiagram((float(cx), float(cy)), rms, pts, int((~ok).sum()),
                       field_angle_deg)


def surface_to_json(surface: PolynomialPhase, name: str, path) -> None:
    doc = {"surface": name, "R_um": float(surface.radius), "z_um": float(surface.z),
           "a": [float(v) for v in surface.coeffs]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def surface_from_json(path) -> PolynomialPhase:
    with open(path) as fh:
        doc = json.load(fh)
    return PolynomialPhase(np.asarray(doc["a"], float), doc["R_um"], doc["z_um"])
