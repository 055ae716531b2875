"""End-to-end flows shared by the CLI and the acceptance suite:
design a channel, simulate its PSF, extract the effective kernel, classify.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .imaging import (
    IDEAL,
    EffectiveKernel,
    ImperfectionModel,
    PsfChannelSet,
    extract_effective_kernel,
    simulate_psf,
)
from .lens import HyperbolicPhase
from .neural import HybridModel, hybrid_infer
from .synthesis import (
    AngleGrid,
    OpticalConfig,
    PlaneWaveProfile,
    SignedKernel,
    kernel_to_angles,
    phase_only_projection,
    split_signed,
)
from .wave import GridSpec


def ideal_focuser(cfg: OpticalConfig) -> HyperbolicPhase:
    return HyperbolicPhase(cfg.f1_um, cfg.wavelength_um)


@dataclass
class ChannelDesign:
    """Single-channel dual-polarization first-surface design."""

    kernel: SignedKernel
    angles: AngleGrid
    profile_rcp: Optional[PlaneWaveProfile]
    profile_lcp: Optional[PlaneWaveProfile]
    states: dict
    design_power: tuple      # (sum of positive part, sum of negative part)


def design_channel(kernel: SignedKernel, cfg: OpticalConfig, seed: int = 0,
                   grid_n: int = 1024, **proj_kw) -> ChannelDesign:
    """Project one signed kernel into its RCP (positive) and LCP (negative)
    phase profiles, on-axis."""
    angles = kernel_to_angles(kernel, cfg)
    pos, neg = split_signed(kernel)
    states = {}
    profs = {}
    for pol, part, s in (("rcp", pos, seed), ("lcp", neg, seed + 1)):
        if np.any(part.weights > 0):
            st, prof = phase_only_projection(part.weights, angles, cfg,
                                             seed=s, grid_n=grid_n, **proj_kw)
        else:
            st, prof = None, None
        states[pol] = st
        profs[pol] = prof
    return ChannelDesign(kernel, angles, profs["rcp"], profs["lcp"], states,
                         (float(pos.weights.sum()), float(neg.weights.sum())))


def simulate_channel_psf(design: ChannelDesign, cfg: OpticalConfig,
                         imperfection: ImperfectionModel = IDEAL,
                         grid: Optional[GridSpec] = None, ms2=None,
                         corrector=None) -> PsfChannelSet:
    ms2 = ms2 or ideal_focuser(cfg)
    return simulate_psf({"rcp": design.profile_rcp, "lcp": design.profile_lcp},
                        ms2, cfg, imperfection=imperfection, corrector=corrector,
                        grid=grid,
                        channel_angles={design.kernel.channel_id: design.angles},
                        design_power={design.kernel.channel_id: design.design_power})


def effective_kernel_for(kernel: SignedKernel, cfg: OpticalConfig, seed: int = 0,
                         design_grid_n: int = 1024,
                         imperfection: ImperfectionModel = IDEAL,
                         grid: Optional[GridSpec] = None, ms2=None,
                         corrector=None, **proj_kw) -> EffectiveKernel:
    design = design_channel(kernel, cfg, seed=seed, grid_n=design_grid_n, **proj_kw)
    psf = simulate_channel_psf(design, cfg, imperfection, grid, ms2, corrector)
    return extract_effective_kernel(psf, cfg, kernel.shape,
                                    channel_id=kernel.channel_id)


def effective_kernels_for_model(model: HybridModel, cfg: OpticalConfig,
                                seed: int = 0, design_grid_n: int = 1024,
                                imperfection: ImperfectionModel = IDEAL,
                                grid: Optional[GridSpec] = None, ms2=None,
                                corrector=None, progress=None,
                                **proj_kw) -> List[EffectiveKernel]:
    """Simulated-optics front-end: one effective kernel per model channel."""
    out = []
    for ch, kern in enumerate(model.kernels_signed()):
        eff = effective_kernel_for(kern, cfg, seed=seed + 10 * ch,
                                   design_grid_n=design_grid_n,
                                   imperfection=imperfection, grid=grid,
                                   ms2=ms2, corrector=corrector, **proj_kw)
        out.append(eff)
        if progress is not None:
            progress(ch, eff)
    return out


def hybrid_predict(model: HybridModel, images: np.ndarray,
                   eff_kernels: Sequence[EffectiveKernel],
                   batch: int = 512) -> np.ndarray:
    preds = np.empty(len(images), dtype=np.int64)
    for i in range(0, len(images), batch):
        logits = hybrid_infer(model, images[i:i + batch], eff_kernels)
        preds[i:i + batch] = logits.argmax(axis=1)
    return preds


def hybrid_accuracy(model: HybridModel, images: np.ndarray, labels: np.ndarray,
                    eff_kernels: Sequence[EffectiveKernel]) -> float:
    return float((hybrid_predict(model, images, eff_kernels) == labels).mean())


def sweep_information_density(model: HybridModel, cfg: OpticalConfig,
                              images: np.ndarray, labels: np.ndarray,
                              pixel_sizes_um: Sequence[float],
                              design_grid_n: int = 256, seed: int = 0,
                              grid: Optional[GridSpec] = None,
                              progress=None) -> List[dict]:
    """Re-design, re-simulate and re-classify at each focal-spot pitch.

    Information density is 1/dp^2 in pixels per square micrometre.
    """
    rows = []
    for dp in pixel_sizes_um:
        cfg_dp = replace(cfg, pixel_um=dp)
        eff = effective_kernels_for_model(model, cfg_dp, seed=seed,
                                          design_grid_n=design_grid_n, grid=grid)
        acc = hybrid_accuracy(model, images, labels, eff)
        corr = np.mean([
            np.corrcoef(e.weights.ravel(),
                        (model.conv_kernels[c] / np.abs(model.conv_kernels[c]).max()).ravel())[0, 1]
            for c, e in enumerate(eff)])
        row = {"pixel_um": float(dp), "accuracy": acc,
               "information_density_per_um2": 1.0 / dp**2,
               "mean_kernel_corr": float(corr)}
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows
