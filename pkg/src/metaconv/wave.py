"""Scalar field representation and angular-spectrum free-space propagation.

All lengths are in micrometres.  The forward spatial transform uses the
exp(-i k.x) convention (numpy's fft2), so a plane wave travelling toward
+x has positive spatial frequency.  Grid coordinates follow
x_k = (k - n//2) * pitch, i.e. the sample at index n//2 sits at the origin.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence, Tuple

import numpy as np

from .errors import (
    DimensionError,
    DomainError,
    FormatError,
    IllConditionedWarning,
    NumericError,
    SamplingError,
)


@dataclass(frozen=True)
class GridSpec:
    """Square sampling grid: n samples per axis at a fixed pitch (um)."""

    n: int
    pitch: float
    origin: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.n < 2:
            raise DimensionError(f"grid needs at least 2 samples per axis, got {self.n}")
        if self.pitch <= 0:
            raise DomainError(f"pitch must be positive, got {self.pitch}")

    @property
    def extent(self) -> float:
        return self.n * self.pitch

    def axis(self) -> np.ndarray:
        return (np.arange(self.n) - self.n // 2) * self.pitch

    def coords(self) -> Tuple[np.ndarray, np.ndarray]:
        """(X, Y) meshgrid of physical coordinates, X varies along columns."""
        ax = self.axis()
        X, Y = np.meshgrid(ax + self.origin[0], ax + self.origin[1])
        return X, Y

    def aperture_mask(self, diameter: float) -> np.ndarray:
        X, Y = self.coords()
        return X * X + Y * Y <= (diameter / 2.0) ** 2


@dataclass(frozen=True)
class ComplexField:
    """Sampled 2-D complex amplitude with physical pitch and wavelength."""

    samples: np.ndarray
    pitch: float
    wavelength: float
    origin: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 2 or s.shape[0] < 2 or s.shape[1] < 2:
            raise DimensionError(f"field must be 2-D with >=2 samples per axis, got {s.shape}")
        if self.pitch <= 0:
            raise DomainError(f"pitch must be positive, got {self.pitch}")
        if self.wavelength <= 0:
            raise DomainError(f"wavelength must be positive, got {self.wavelength}")
        if s.dtype != np.complex128:
            object.__setattr__(self, "samples", s.astype(np.complex128))

    @property
    def grid(self) -> GridSpec:
        if self.samples.shape[0] != self.samples.shape[1]:
            raise DimensionError("grid property requires a square field")
        return GridSpec(self.samples.shape[0], self.pitch, self.origin)

    def energy(self) -> float:
        """Total power sum |u|^2 * pitch^2."""
        return float((np.abs(self.samples) ** 2).sum() * self.pitch**2)

    def intensity(self) -> np.ndarray:
        s = self.samples
        return s.real**2 + s.imag**2


@dataclass(frozen=True)
class SpectralFilter:
    """Free-space transfer function sampled on a field's spectral grid."""

    transfer: np.ndarray
    distance: float

    def __post_init__(self):
        mag = np.abs(self.transfer)
        if mag.max() > 1.0 + 1e-12:
            raise NumericError("|H| exceeds 1; transfer function is not passive")


def free_space_filter(shape: Tuple[int, int], pitch: float, wavelength: float,
                      z: float, zero_evanescent: bool = False) -> SpectralFilter:
    """Angular-spectrum transfer function H(kx, ky) for a propagation by z.

    Propagating components acquire exp(i z sqrt(k^2 - kt^2)); evanescent
    components decay as exp(-|z| sqrt(kt^2 - k^2)).  Using |z| keeps the
    reverse propagation bounded (attenuate, never amplify); set
    ``zero_evanescent`` to hard-zero them instead.
    """
    k = 2.0 * np.pi / wavelength
    ky = 2.0 * np.pi * np.fft.fftfreq(shape[0], pitch)
    kx = 2.0 * np.pi * np.fft.fftfreq(shape[1], pitch)
    KX, KY = np.meshgrid(kx, ky)
    kt2 = KX * KX + KY * KY
    kz = np.sqrt(np.maximum(k * k - kt2, 0.0))
    kappa = np.sqrt(np.maximum(kt2 - k * k, 0.0))
    H = np.exp(1j * z * kz)
    if zero_evanescent:
        H = np.where(kt2 > k * k, 0.0, H)
    else:
        H = H * np.exp(-np.abs(z) * kappa)
    return SpectralFilter(H, z)


def propagate(field: ComplexField, z: float, zero_evanescent: bool = False) -> ComplexField:
    """Propagate a field a distance z (um) through free space.

    Parameters
    ----------
    field : ComplexField
        Input field; its pitch must satisfy pitch <= wavelength/2.
    z : float
        Signed propagation distance.  Negative values propagate backward.

    Returns
    -------
    ComplexField
        Field in the plane z away; grid metadata unchanged.
    """
    if not np.isfinite(z):
        raise NumericError("propagation distance must be finite")
    if field.pitch > field.wavelength / 2.0:
        raise SamplingError(
            f"pitch {field.pitch} um exceeds lambda/2 = {field.wavelength / 2.0} um; "
            "the angular spectrum cannot represent the full propagating band"
        )
    if not np.all(np.isfinite(field.samples)):
        raise NumericError("field contains non-finite samples")
    if z == 0.0:
        return field
    filt = free_space_filter(field.samples.shape, field.pitch, field.wavelength,
                             z, zero_evanescent)
    out = np.fft.ifft2(np.fft.fft2(field.samples) * filt.transfer)
    return replace(field, samples=out)


def apply_phase(field: ComplexField, phase) -> ComplexField:
    """Multiply a field by exp(i phi) of a thin phase element.

    ``phase`` is anything with a ``phase_on(field) -> ndarray`` method (a
    sampled map or an analytic profile) or a bare ndarray matching the
    field's shape.  Pointwise modulus is preserved exactly.
    """
    if hasattr(phase, "phase_on"):
        phi = phase.phase_on(field)
    else:
        phi = np.asarray(phase, dtype=float)
    if phi.shape != field.samples.shape:
        raise DimensionError(
            f"phase grid {phi.shape} does not match field grid {field.samples.shape}"
        )
    return replace(field, samples=field.samples * np.exp(1j * phi))


@dataclass(frozen=True)
class SampledPhase:
    """Phase map sampled on the same grid as the field it applies to."""

    phi: np.ndarray
    pitch: float

    def phase_on(self, field: ComplexField) -> np.ndarray:
        if abs(self.pitch - field.pitch) > 1e-12 * max(self.pitch, field.pitch):
            raise DimensionError(
                f"sampled phase pitch {self.pitch} != field pitch {field.pitch} "
                "and no resampling rule applies"
            )
        if self.phi.shape != field.samples.shape:
            raise DimensionError(
                f"sampled phase shape {self.phi.shape} != field shape {field.samples.shape}"
            )
        return self.phi


def plane_wave(grid: GridSpec, wavelength: float, theta_x: float = 0.0,
               theta_y: float = 0.0, aperture: float | None = None) -> ComplexField:
    """Unit plane wave exp(i k (x sin tx + y sin ty)), optionally apertured."""
    k = 2.0 * np.pi / wavelength
    X, Y = grid.coords()
    u = np.exp(1j * k * (X * np.sin(theta_x) + Y * np.sin(theta_y)))
    if aperture is not None:
        u = np.where(grid.aperture_mask(aperture), u, 0.0)
    return ComplexField(u, grid.pitch, wavelength, grid.origin)


def far_field_decompose(field: ComplexField,
                        directions: Sequence[Tuple[float, float]]) -> np.ndarray:
    """Normalized overlap of a field with plane waves along given directions.

    Each coefficient is <E_d, u> / (||E_d|| ||u||) over the field's support,
    so |coef|^2 is the fraction of field power coherently matched to that
    direction, and sum |coef|^2 <= 1 for near-orthogonal direction sets.
    """
    dirs = np.asarray(directions, dtype=float)
    if dirs.ndim != 2 or dirs.shape[1] != 2:
        raise DimensionError("directions must be a sequence of (theta_x, theta_y)")
    sx, sy = np.sin(dirs[:, 0]), np.sin(dirs[:, 1])
    if np.any(np.abs(sx) >= 1.0) or np.any(np.abs(sy) >= 1.0):
        raise DomainError("directions outside the propagating band (|sin theta| >= 1)")
    pairs = {(round(float(a), 15), round(float(b), 15)) for a, b in zip(sx, sy)}
    if len(pairs) < len(dirs):
        warnings.warn("duplicate directions make the decomposition ill-conditioned",
                      IllConditionedWarning)

    u = field.samples
    support = u != 0
    norm_u = np.sqrt((np.abs(u) ** 2).sum())
    if norm_u == 0:
        raise NumericError("cannot decompose an identically zero field")
    npix = int(support.sum())
    k = 2.0 * np.pi / field.wavelength
    n_y, n_x = u.shape
    x = (np.arange(n_x) - n_x // 2) * field.pitch + field.origin[0]
    y = (np.arange(n_y) - n_y // 2) * field.pitch + field.origin[1]
    # separable inner products: <E_d, u> = ey_d^H U ex_d*
    Ex = np.exp(1j * k * np.outer(x, sx))
    Ey = np.exp(1j * k * np.outer(y, sy))
    T = u @ np.conj(Ex)
    coefs = (np.conj(Ey) * T).sum(axis=0)
    return coefs / (np.sqrt(npix) * norm_u)


# ---------------------------------------------------------------------------
# .cfield container: one JSON header line + raw little-endian payload.

_CFIELD_DTYPES = {"c128le": np.complex128, "f64le": np.float64}


def write_cfield(path, samples: np.ndarray, pitch: float, wavelength: float,
                 origin: Tuple[float, float] = (0.0, 0.0)) -> None:
    arr = np.asarray(samples)
    if np.iscomplexobj(arr):
        dtype, arr = "c128le", arr.astype(np.complex128)
    else:
        dtype, arr = "f64le", arr.astype(np.float64)
    header = {
        "rows": int(arr.shape[0]),
        "cols": int(arr.shape[1]),
        "pitch_um": float(pitch),
        "wavelength_um": float(wavelength),
        "origin_um": [float(origin[0]), float(origin[1])],
        "dtype": dtype,
        "byte_order": "little",
    }
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("ascii") + b"\n")
        fh.write(payload.tobytes(order="C"))


def read_cfield(path):
    """Returns (samples, header_dict); samples dtype per the header."""
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("ascii"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"bad .cfield header in {path}: {exc}") from exc
        for key in ("rows", "cols", "pitch_um", "wavelength_um", "dtype", "byte_order"):
            if key not in header:
                raise FormatError(f".cfield header missing '{key}'")
        if header["dtype"] not in _CFIELD_DTYPES:
            raise FormatError(f"unsupported dtype {header['dtype']!r}")
        if header["byte_order"] != "little":
            raise FormatError("only little-endian payloads are supported")
        dt = np.dtype(_CFIELD_DTYPES[header["dtype"]]).newbyteorder("<")
        count = header["rows"] * header["cols"]
        raw = fh.read()
    if len(raw) < count * dt.itemsize:
        raise FormatError(
            f"truncated payload: expected {count * dt.itemsize} bytes, got {len(raw)}"
        )
    data = np.frombuffer(raw[: count * dt.itemsize], dtype=dt)
    return data.reshape(header["rows"], header["cols"]).astype(dt.base), header


def field_to_file(field: ComplexField, path) -> None:
    write_cfield(path, field.samples, field.pitch, field.wavelength, field.origin)


def field_from_file(path) -> ComplexField:
    samples, header = read_cfield(path)
    if header["dtype"] != "c128le":
        raise FormatError("file does not contain a complex field")
    return ComplexField(samples, header["pitch_um"], header["wavelength_um"],
                        tuple(header.get("origin_um", (0.0, 0.0))))
