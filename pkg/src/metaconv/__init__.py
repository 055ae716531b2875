"""metaconv: meta-optic convolution accelerator design and simulation.

Submodules: wave (scalar propagation), synthesis (kernel -> phase profiles),
lens (ray-traced doublet design), imaging (PSF simulation and convolution),
neural (hybrid classifier), data (datasets and reports), pipeline
(end-to-end flows), cli (command line).
"""

__version__ = "0.1.0"

from .imaging import (
    EffectiveKernel,
    FeatureMapSet,
    ImperfectionModel,
    PsfChannelSet,
    calibrate_c,
    convolve_discrete,
    extract_effective_kernel,
    fidelity_sigma,
    incoherent_convolve_continuous,
    simulate_psf,
)
from .lens import PolynomialPhase, RayBundle, optimize_coma_free, trace_spot
from .neural import HybridModel, TrainConfig, count_flops, forward, train
from .synthesis import (
    AngleGrid,
    OpticalConfig,
    ProjectionState,
    SignedKernel,
    kernel_to_angles,
    phase_only_projection,
    predict_spot_positions,
    spin_decoupled_solve,
    split_signed,
    synthesize_complex_amplitude,
)
from .wave import (
    ComplexField,
    GridSpec,
    SpectralFilter,
    apply_phase,
    far_field_decompose,
    propagate,
)
