"""Compilation of signed digital kernels into metasurface phase profiles.

Pipeline: a signed kernel is split by sign into two non-negative parts, one
per circular polarization.  Each part maps to a lattice of deflection
angles; a complex amplitude multiplexing those plane waves is flattened to
a phase-only profile by optimizing one auxiliary phase per component, and
per-pixel meta-atom parameters follow from the spin-decoupled phase
relations.

Orientation convention: kernel element (row m, col n) maps to the spot at
(-(n - (N-1)/2) dp, -(m - (M-1)/2) dp) on the focal plane.  With images
overlapped by the point spread function, this makes the optical feature map
equal the digital cross-correlation (no kernel flip) in camera coordinates.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from .errors import (
    DegenerateInputError,
    DimensionError,
    DomainError,
    LayoutError,
)
from .wave import ComplexField, GridSpec

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class SignedKernel:
    """M x N real kernel with weights normalized into [-1, 1]."""

    weights: np.ndarray
    channel_id: int = 0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
            raise DimensionError(f"kernel must be a 2-D matrix, got shape {w.shape}")
        if np.abs(w).max(initial=0.0) > 1.0 + 1e-12:
            raise DomainError("kernel weights must satisfy |w| <= 1")
        object.__setattr__(self, "weights", w)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.weights.shape


@dataclass(frozen=True)
class OpticalConfig:
    """Geometry of the imaging meta-optic (lengths in um)."""

    wavelength_um: float = 0.87
    f1_um: float = 1000.0
    f2_um: float = 50000.0
    c: float = 1.0
    pixel_um: float = 12.0            # focal-spot separation dp
    aperture_d1_um: float = 440.32
    ms_separation_um: float = 300.0
    second_aperture_factor: float = 1.5

    def __post_init__(self):
        for name in ("wavelength_um", "f1_um", "f2_um", "pixel_um", "aperture_d1_um",
                     "ms_separation_um"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive")
        if self.c <= 0:
            raise DomainError("imaging constant c must be positive")
        if self.second_aperture_factor < 1.0:
            raise DomainError("second_aperture_factor must be >= 1")

    def with_c(self, c: float) -> "OpticalConfig":
        from dataclasses import replace
        return replace(self, c=c)


@dataclass(frozen=True)
class AngleGrid:
    """Deflection angles per kernel element plus the channel placement offset."""

    theta_x: np.ndarray
    theta_y: np.ndarray
    channel_offset: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        tx, ty = np.asarray(self.theta_x, float), np.asarray(self.theta_y, float)
        if tx.shape != ty.shape or tx.ndim != 2:
            raise DimensionError("theta_x and theta_y must share a 2-D shape")
        if np.any(np.abs(np.sin(tx)) >= 1.0) or np.any(np.abs(np.sin(ty)) >= 1.0):
            raise DomainError("angles outside the propagating band")
        pairs = np.stack([tx.ravel(), ty.ravel()], 1)
        if len(np.unique(pairs.round(decimals=15), axis=0)) != pairs.shape[0]:
            raise DomainError("angle entries must be distinct")
        object.__setattr__(self, "theta_x", tx)
        object.__setattr__(self, "theta_y", ty)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.theta_x.shape

    def sines(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.sin(self.theta_x).ravel(), np.sin(self.theta_y).ravel()


def kernel_to_angles(kernel: SignedKernel, cfg: OpticalConfig,
                     channel_offset: Tuple[float, float] = (0.0, 0.0)) -> AngleGrid:
    """Angles placing each kernel element's spot on a dp lattice.

    The spot of element (m, n) lands at f1*c*tan(theta), i.e. at
    (-(n-cn) dp, -(m-cm) dp) relative to the channel center; the sign bakes
    the correlation orientation into the optics (module docstring).
    """
    M, N = kernel.shape
    ox, oy = channel_offset
    fcl = cfg.f1_um * cfg.c
    tan_x = -(np.arange(N) - (N - 1) / 2.0) * cfg.pixel_um / fcl + np.tan(ox)
    tan_y = -(np.arange(M) - (M - 1) / 2.0) * cfg.pixel_um / fcl + np.tan(oy)
    TX, TY = np.meshgrid(tan_x, tan_y)
    return AngleGrid(np.arctan(TX), np.arctan(TY), channel_offset)


def predict_spot_positions(angles: AngleGrid, cfg: OpticalConfig,
                           object_position: Tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Focal-plane spot centers (M, N, 2) for an object point at (x0, y0)."""
    x0, y0 = object_position
    fcl = cfg.f1_um * cfg.c
    px = fcl * (x0 / cfg.f2_um + np.tan(angles.theta_x))
    py = fcl * (y0 / cfg.f2_um + np.tan(angles.theta_y))
    return np.stack([px, py], axis=-1)


def split_signed(kernel: SignedKernel) -> Tuple[SignedKernel, SignedKernel]:
    """Exact decomposition w = pos - neg with disjoint supports."""
    w = kernel.weights
    return (SignedKernel(np.maximum(w, 0.0), kernel.channel_id),
            SignedKernel(np.maximum(-w, 0.0), kernel.channel_id))


@dataclass(frozen=True)
class PlaneWaveProfile:
    """Phase-only profile arg(sum_j a_j exp(i phi_j) exp(i k (x sx_j + y sy_j))).

    Analytic in (x, y): it can be evaluated on any grid, which keeps the
    design grid and the propagation grid independent.
    """

    sin_x: np.ndarray
    sin_y: np.ndarray
    amps: np.ndarray
    phases: np.ndarray
    wavelength: float
    aperture_d: float

    def coefficients(self) -> np.ndarray:
        return self.amps * np.exp(1j * self.phases)

    def complex_sum(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """A(x, y) via separable factors; x, y are 1-D axes."""
        k = TWO_PI / self.wavelength
        Ex = np.exp(1j * k * np.outer(np.asarray(x, float), self.sin_x))
        Ey = np.exp(1j * k * np.outer(np.asarray(y, float), self.sin_y))
        return (Ey * self.coefficients()) @ Ex.T

    def phase_at(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.angle(self.complex_sum(x, y))

    def phase_on(self, fld: ComplexField) -> np.ndarray:
        n_y, n_x = fld.samples.shape
        x = (np.arange(n_x) - n_x // 2) * fld.pitch + fld.origin[0]
        y = (np.arange(n_y) - n_y // 2) * fld.pitch + fld.origin[1]
        return self.phase_at(x, y)


def flat_profile(wavelength: float, aperture_d: float) -> PlaneWaveProfile:
    """Zero-phase stand-in used when a polarization carries no design."""
    z = np.zeros(1)
    return PlaneWaveProfile(z, z, np.ones(1), z, wavelength, aperture_d)


def synthesize_complex_amplitude(weights: np.ndarray, angles: AngleGrid,
                                 phases, grid: GridSpec, wavelength: float,
                                 aperture_d: Optional[float] = None) -> ComplexField:
    """Sample A(x,y) = sum sqrt(w) e^{i phi} e^{i k(x sin tx + y sin ty)}.

    The aperture mask zeroes everything outside diameter ``aperture_d``
    (defaults to the grid extent, i.e. an inscribed aperture).
    """
    w = np.asarray(weights, dtype=float).ravel()
    if np.any(w < 0):
        raise DomainError("weights for a single polarization part must be non-negative")
    if not np.any(w > 0):
        raise DegenerateInputError("all weights are zero; nothing to synthesize")
    if isinstance(phases, ProjectionState):
        phi = phases.phases
    else:
        phi = np.asarray(phases, dtype=float).ravel()
    if phi.size != w.size:
        raise DimensionError(f"{w.size} weights but {phi.size} phases")
    sx, sy = angles.sines()
    prof = PlaneWaveProfile(sx, sy, np.sqrt(w), phi, wavelength, 0.0)
    ax = grid.axis()
    A = prof.complex_sum(ax + grid.origin[0], ax + grid.origin[1])
    ap = grid.extent if aperture_d is None else aperture_d
    A = np.where(grid.aperture_mask(ap), A, 0.0)
    return ComplexField(A, grid.pitch, wavelength, grid.origin)


@dataclass
class ProjectionState:
    """Result of the phase-only projection optimization."""

    phases: np.ndarray
    loss_history: np.ndarray
    n_grid: int
    converged: bool
    comp_residuals: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        h = np.asarray(self.loss_history, dtype=float)
        if h.size and np.any(np.diff(h) > 1e-12 * np.maximum(h[:-1], 1e-300)):
            raise DomainError("loss history must be non-increasing over accepted steps")
        self.loss_history = h


class ProjectionProblem:
    """Uniformity loss L = sum((|A|^2 - 1)^2)/N over the aperture, and its
    analytic gradient with respect to the per-component phases."""

    def __init__(self, weights, angles: AngleGrid, cfg: OpticalConfig, n_grid: int):
        w = np.asarray(weights, dtype=float).ravel()
        if np.any(w < 0):
            raise DomainError("projection weights must be non-negative")
        self.active = w > 0
        if self.active.sum() < 1:
            raise DegenerateInputError("all weights are zero")
        # pre-scale so the aperture-mean of |A|^2 is the unity target
        self.w = w / w.sum()
        self.amp0 = np.sqrt(self.w)
        self.cfg = cfg
        self.n = n_grid
        self.pitch = cfg.aperture_d1_um / n_grid
        ax = (np.arange(n_grid) - n_grid // 2) * self.pitch
        self.x = ax
        X, Y = np.meshgrid(ax, ax)
        self.mask = (X * X + Y * Y) <= (cfg.aperture_d1_um / 2.0) ** 2
        self.npix = int(self.mask.sum())
        sx, sy = angles.sines()
        k = TWO_PI / cfg.wavelength_um
        self.sx, self.sy = sx, sy
        self.Ex = np.exp(1j * k * np.outer(ax, sx))
        self.Ey = np.exp(1j * k * np.outer(ax, sy))
        self._labels = None

    def loss_and_grad(self, phi: np.ndarray, amps: Optional[np.ndarray] = None):
        a = self.amp0 if amps is None else amps
        c = a * np.exp(1j * phi)
        A = (self.Ey * c) @ self.Ex.T
        I = A.real**2 + A.imag**2
        dev = np.where(self.mask, I - 1.0, 0.0)
        L = float((dev * dev).sum()) / self.npix
        G = dev * np.conj(A)
        S = (self.Ey * (G @ self.Ex)).sum(axis=0)
        grad = -(4.0 / self.npix) * np.imag(c * S)
        return L, grad

    def profile_field(self, phi, amps=None) -> np.ndarray:
        a = self.amp0 if amps is None else amps
        A = (self.Ey * (a * np.exp(1j * phi))) @ self.Ex.T
        return np.where(self.mask, np.exp(1j * np.angle(A)), 0.0)

    def decompose(self, u: np.ndarray) -> np.ndarray:
        T = u @ np.conj(self.Ex)
        return (np.conj(self.Ey) * T).sum(axis=0) / self.npix

    def _order_labels(self) -> np.ndarray:
        """Nearest-design-order label per FFT bin, -1 outside all windows."""
        if self._labels is not None:
            return self._labels
        lam = self.cfg.wavelength_um
        f = np.fft.fftshift(np.fft.fftfreq(self.n, self.pitch))
        FX, FY = np.meshgrid(f, f)
        rad = 0.5 * self.cfg.pixel_um / (self.cfg.f1_um * self.cfg.c) / lam
        labels = np.full((self.n, self.n), -1, dtype=np.int32)
        best = np.full((self.n, self.n), np.inf)
        for j in range(self.sx.size):
            d2 = (FX - self.sx[j] / lam) ** 2 + (FY - self.sy[j] / lam) ** 2
            closer = (d2 <= rad * rad) & (d2 < best)
            labels[closer] = j
            best[closer] = d2[closer]
        self._labels = labels
        return labels

    def window_powers(self, u: np.ndarray) -> np.ndarray:
        """Far-field power integrated per design order, as fractions of total."""
        F = np.fft.fftshift(np.fft.fft2(u))
        I = F.real**2 + F.imag**2
        labels = self._order_labels()
        inside = labels >= 0
        p = np.bincount(labels[inside].ravel(), weights=I[inside].ravel(),
                        minlength=self.sx.size)
        return p / I.sum()


def _lbfgs(problem: ProjectionProblem, phi0: np.ndarray, max_iters: int, tol: float):
    history = [problem.loss_and_grad(phi0)[0]]

    def cb(xk):
        L, _ = problem.loss_and_grad(xk)
        if L <= history[-1]:
            history.append(L)

    res = minimize(problem.loss_and_grad, phi0, jac=True, method="L-BFGS-B",
                   callback=cb, options=dict(maxiter=max_iters, ftol=tol * 1e-3,
                                             gtol=1e-10))
    return res.x, np.array(history), bool(res.success or res.status == 1)


def _plain_gd(problem: ProjectionProblem, phi0: np.ndarray, max_iters: int,
              tol: float, step0: float = 0.05):
    """Fixed-step descent with halving on loss increase (backtracking)."""
    phi = phi0.copy()
    L, g = problem.loss_and_grad(phi)
    history = [L]
    step = step0
    converged = False
    for _ in range(max_iters):
        cand = phi - step * g
        Lc, gc = problem.loss_and_grad(cand)
        if Lc <= L:
            rel = (L - Lc) / max(L, 1e-300)
            phi, L, g = cand, Lc, gc
            history.append(L)
            if rel < tol:
                converged = True
                break
        else:
            step *= 0.5
            if step < 1e-12:
                break
    return phi, np.array(history), converged


def phase_only_projection(weights, angles: AngleGrid, cfg: OpticalConfig,
                          seed: int = 0, grid_n: int = 1024,
                          optimizer: str = "lbfgs", multi_start: int = 6,
                          coarse_n: int = 256, max_iters: int = 5000,
                          tol: float = 1e-6, compensate: bool = True,
                          comp_iters: int = 30, comp_beta: float = 0.6):
    """Flatten a multiplexed complex amplitude into a phase-only profile.

    Stage 1 minimizes the intensity-uniformity loss over the per-component
    phases (multi-start at a coarse grid, refined at ``grid_n``).  Stage 2
    (``compensate=True``) closes the loop on the realized far-field window
    powers, adapting the synthesis amplitudes until each design order
    carries power proportional to its kernel weight.

    Returns
    -------
    (ProjectionState, PlaneWaveProfile)
    """
    w = np.asarray(weights, dtype=float).ravel()
    if np.any(w < 0):
        raise DomainError("weights must be non-negative for a polarization part")
    active = w > 0
    n_active = int(active.sum())
    if n_active == 0:
        raise DegenerateInputError("all weights are zero")
    sx, sy = angles.sines()

    if n_active == 1:
        # a single plane wave is already unit-modulus: zero iterations
        phi = np.zeros(w.size)
        amps = np.sqrt(w / w.sum())
        prof = PlaneWaveProfile(sx, sy, amps, phi, cfg.wavelength_um,
                                cfg.aperture_d1_um)
        return ProjectionState(phi, np.array([0.0]), grid_n, True), prof

    rng = np.random.default_rng(seed)
    solver = _lbfgs if optimizer == "lbfgs" else _plain_gd

    # basin search at the coarse grid: random starts plus a deterministic
    # quadratic-chirp family (a known-good spot-array initialization),
    # then the best finishers are polished at the full grid
    starts = [rng.uniform(0.0, TWO_PI, w.size) for _ in range(max(multi_start, 1))]
    if angles.theta_x.ndim == 2 and min(angles.theta_x.shape) > 1:
        M, N = angles.theta_x.shape
        mm = np.arange(M) - (M - 1) / 2.0
        nn = np.arange(N) - (N - 1) / 2.0
        Q = np.add.outer(mm**2, nn**2).ravel()
        starts += [beta * Q for beta in (1.0, 2.0, 2.8)]

    problem = ProjectionProblem(w, angles, cfg, grid_n)
    if multi_start > 1 and coarse_n < grid_n:
        coarse = ProjectionProblem(w, angles, cfg, coarse_n)
        scored = []
        for p0 in starts:
            ph, hist, _ = solver(coarse, p0, max_iters, tol)
            scored.append((hist[-1], ph))
        scored.sort(key=lambda t: t[0])
        candidates = [ph for _, ph in scored[:2]]
    else:
        candidates = [starts[0]]

    phi = history = converged = None
    best_loss = np.inf
    for cand in candidates:
        ph, hist, ok = solver(problem, cand, max_iters, tol)
        if hist[-1] < best_loss:
            best_loss, phi, history, converged = hist[-1], ph, hist, ok

    amps = problem.amp0.copy()
    residuals = []
    if compensate:
        target = problem.w
        for _ in range(comp_iters):
            u = problem.profile_field(phi, amps)
            p = problem.window_powers(u)
            meas = p / p.sum()
            residuals.append(float(np.abs(meas - target)[active].max()))
            gain = np.where(active,
                            (target / np.maximum(meas, 1e-15)) ** (comp_beta / 2.0),
                            0.0)
            amps = amps * gain
            amps /= np.sqrt((amps * amps).sum())
            phi = np.angle(problem.decompose(u))

    prof = PlaneWaveProfile(sx, sy, amps, phi, cfg.wavelength_um, cfg.aperture_d1_um)
    state = ProjectionState(phi, history, grid_n, converged,
                            np.asarray(residuals))
    if not converged:
        warnings.warn("projection stopped at max_iters; returning best-so-far",
                      RuntimeWarning)
    return state, prof


def _problem_for_profile(prof: PlaneWaveProfile, cfg: OpticalConfig,
                         grid_n: int) -> ProjectionProblem:
    grid_angles = AngleGrid(np.arcsin(prof.sin_x)[None, :],
                            np.arcsin(prof.sin_y)[None, :])
    return ProjectionProblem(np.ones(prof.amps.size), grid_angles, cfg, grid_n)


def coherent_efficiency(prof: PlaneWaveProfile, cfg: OpticalConfig,
                        grid_n: int = 1024) -> float:
    """sum |<E_j, exp(i arg A)>|^2 over the design directions (plane-wave
    matched power; excludes energy in the orders' diffraction skirts)."""
    from .wave import far_field_decompose
    problem = _problem_for_profile(prof, cfg, grid_n)
    u = problem.profile_field(prof.phases, prof.amps)
    fld = ComplexField(u, problem.pitch, cfg.wavelength_um)
    dirs = np.stack([np.arcsin(prof.sin_x), np.arcsin(prof.sin_y)], 1)
    coefs = far_field_decompose(fld, dirs)
    return float((np.abs(coefs) ** 2).sum())


def window_powers(prof: PlaneWaveProfile, cfg: OpticalConfig,
                  grid_n: int = 1024) -> np.ndarray:
    """Far-field power per design order, window-integrated (camera-style)."""
    problem = _problem_for_profile(prof, cfg, grid_n)
    u = problem.profile_field(prof.phases, prof.amps)
    return problem.window_powers(u)


@dataclass(frozen=True)
class MetaAtomPhase:
    """Meta-atom parameters realizing a target (phi_LCP, phi_RCP) pair."""

    phi_lcp: np.ndarray
    phi_rcp: np.ndarray
    phi_x: np.ndarray
    theta: np.ndarray

    def forward(self):
        """Re-apply the spin-decoupled relations; must reproduce the targets."""
        return (self.phi_x + 2.0 * self.theta + np.pi / 4.0,
                self.phi_x - 2.0 * self.theta - np.pi / 4.0)


def wrap_phase(phi):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(phi), TWO_PI)


def spin_decoupled_solve(phi_lcp, phi_rcp) -> MetaAtomPhase:
    """Invert the spin-decoupled phase relations.

    phi_LCP = phi_x + 2 theta + pi/4 and phi_RCP = phi_x - 2 theta - pi/4
    give phi_x = (phi_LCP + phi_RCP)/2 and theta = (phi_LCP - phi_RCP)/4 - pi/8;
    the forward relations then reproduce the targets exactly mod 2 pi.
    """
    pl = np.asarray(phi_lcp, dtype=float)
    pr = np.asarray(phi_rcp, dtype=float)
    phi_x = (pl + pr) / 2.0
    theta = (pl - pr) / 4.0 - np.pi / 8.0
    return MetaAtomPhase(pl, pr, phi_x, theta)


def layout_channel_offsets(n_channels: int, cfg: OpticalConfig,
                           image_px: int = 28, grid_cols: int = 4,
                           kernel_px: int = 7,
                           focal_extent: Optional[float] = None):
    """Off-axis channel placement on a rows x cols grid of disjoint tiles.

    Tile spacing is the image extent plus one kernel span plus one pixel of
    slack; raises LayoutError when tiles overlap or spill past the focal
    extent (when given).
    """
    rows = int(np.ceil(n_channels / grid_cols))
    image_extent = image_px * cfg.pixel_um
    spacing = image_extent + (kernel_px + 1) * cfg.pixel_um
    fcl = cfg.f1_um * cfg.c
    offsets = []
    for ch in range(n_channels):
        r, col = divmod(ch, grid_cols)
        px = (col - (grid_cols - 1) / 2.0) * spacing
        py = (r - (rows - 1) / 2.0) * spacing
        offsets.append((np.arctan(px / fcl), np.arctan(py / fcl)))
    half_tile = (image_extent + kernel_px * cfg.pixel_um) / 2.0
    if spacing < 2 * half_tile:
        raise LayoutError("channel tiles overlap on the focal plane")
    if focal_extent is not None:
        span_x = (grid_cols - 1) / 2.0 * spacing + half_tile
        span_y = (rows - 1) / 2.0 * spacing + half_tile
        if span_x > focal_extent / 2.0 or span_y > focal_extent / 2.0:
            raise LayoutError(
                f"layout spans {2*span_x:.0f} x {2*span_y:.0f} um, beyond the "
                f"focal extent {focal_extent:.0f} um")
    return offsets


@dataclass
class Ms1Design:
    """Joint dual-polarization first-surface design for a set of channels."""

    profile_rcp: PlaneWaveProfile     # positive kernel parts
    profile_lcp: PlaneWaveProfile     # negative kernel parts
    states: dict
    channel_angles: list
    offsets: list
    flags: list


def _joint_projection(parts, offsets_angles, cfg, grid_n, seed, **proj_kw):
    """Project the union of all channels' active components for one
    polarization.  Returns (profile, state, per-channel slices)."""
    sxs, sys, ws = [], [], []
    slices = []
    pos = 0
    for kern, ang in zip(parts, offsets_angles):
        w = kern.weights.ravel()
        keep = w > 0
        sx, sy = ang.sines()
        sxs.append(sx[keep])
        sys.append(sy[keep])
        ws.append(w[keep])
        slices.append(slice(pos, pos + int(keep.sum())))
        pos += int(keep.sum())
    if pos == 0:
        return None, None, slices
    sx = np.concatenate(sxs)
    sy = np.concatenate(sys)
    w = np.concatenate(ws)
    joint = AngleGrid(np.arcsin(sx)[None, :], np.arcsin(sy)[None, :])
    state, prof = phase_only_projection(w[None, :], joint, cfg, seed=seed,
                                        **proj_kw)
    return prof, state, slices


def build_ms1_profiles(kernels: Sequence[SignedKernel], cfg: OpticalConfig,
                       offsets=None, seed: int = 0, grid_n: int = 1024,
                       image_px: int = 28, **proj_kw):
    """Joint first-surface profiles: RCP carries every channel's positive
    part, LCP the negative parts, with channels placed off-axis."""
    if offsets is None:
        offsets = (layout_channel_offsets(len(kernels), cfg, image_px=image_px)
                   if len(kernels) > 1 else [(0.0, 0.0)])
    if len(offsets) != len(kernels):
        raise DimensionError("one channel offset per kernel required")
    flags = []
    angles = [kernel_to_angles(k, cfg, off) for k, off in zip(kernels, offsets)]
    pos_parts, neg_parts = zip(*(split_signed(k) for k in kernels))

    prof_rcp, st_rcp, _ = _joint_projection(pos_parts, angles, cfg, grid_n,
                                            seed, **proj_kw)
    prof_lcp, st_lcp, _ = _joint_projection(neg_parts, angles, cfg, grid_n,
                                            seed + 1, **proj_kw)
    if prof_rcp is None:
        flags.append("rcp-empty: no positive weights; RCP profile is flat")
        prof_rcp = flat_profile(cfg.wavelength_um, cfg.aperture_d1_um)
    if prof_lcp is None:
        flags.append("lcp-empty: no negative weights; LCP profile is flat")
        prof_lcp = flat_profile(cfg.wavelength_um, cfg.aperture_d1_um)
    for f in flags:
        warnings.warn(f, RuntimeWarning)
    return Ms1Design(prof_rcp, prof_lcp, {"rcp": st_rcp, "lcp": st_lcp},
                     angles, list(offsets), flags)


def atom_map_from_profiles(prof_lcp: PlaneWaveProfile, prof_rcp: PlaneWaveProfile,
                           grid: GridSpec) -> MetaAtomPhase:
    ax = grid.axis()
    pl = prof_lcp.phase_at(ax, ax)
    pr = prof_rcp.phase_at(ax, ax)
    return spin_decoupled_solve(pl, pr)


def export_atom_csv(atoms: MetaAtomPhase, grid: GridSpec, path) -> None:
    """CSV columns x_um, y_um, phi_x_rad, theta_rad, row-major."""
    ax = grid.axis()
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x_um", "y_um", "phi_x_rad", "theta_rad"])
        phi_x = np.atleast_2d(atoms.phi_x)
        theta = np.atleast_2d(atoms.theta)
        for iy, yv in enumerate(ax):
            for ix, xv in enumerate(ax):
                wr.writerow([f"{xv:.4f}", f"{yv:.4f}",
                             f"{phi_x[iy, ix]:.9f}", f"{theta[iy, ix]:.9f}"])


def kernels_to_json(kernels: Sequence[SignedKernel], path) -> None:
    doc = {"channels": [{"id": int(k.channel_id),
                         "rows": int(k.shape[0]), "cols": int(k.shape[1]),
                         "weights": [float(v) for v in k.weights.ravel()]}
                        for k in kernels]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def kernels_from_json(path) -> list:
    with open(path) as fh:
        doc = json.load(fh)
    out = []
    for ch in doc["channels"]:
        w = np.asarray(ch["weights"], dtype=float).reshape(ch["rows"], ch["cols"])
        out.append(SignedKernel(w, ch["id"]))
    return out
