"""fieldcascade: multi-scale 2D field reconstruction from sparse sensors.

A functional autoencoder recovers the large-scale principal structure from
arbitrary scattered measurements; a conditional diffusion model, trained
with freshly randomized masks against the frozen autoencoder, generates the
fine-scale residual, optionally steered toward the measurements during
sampling.
"""

__version__ = "0.1.0"

from .cascade import (
    CascadeBundle,
    CascadeConfig,
    ReconstructionResult,
    ensemble_reconstruct,
    load_cascade_bundle,
    mask_cascade_train,
    reconstruct,
    residual_normalization,
    save_cascade_bundle,
)
from .data import (
    Dataset,
    DomainGrid,
    FieldSnapshot,
    SensorMask,
    SparseObservation,
    SyntheticWakeConfig,
    WakeFamilyConfig,
    apply_mask,
    build_wake_dataset,
    complement_split,
    full_observation,
    generate_wake,
    load_dataset,
    load_snapshot,
    random_mask,
    save_snapshot,
)
from .autoencoder import (
    AutoencoderConfig,
    FunctionalAutoencoder,
    decode,
    encode,
    export_latents,
    fae_loss,
    load_autoencoder,
    reconstruct_principal,
    save_autoencoder,
    train_fae,
)
from .diffusion import (
    ConditionalDenoiser,
    DenoiserConfig,
    GuidanceConfig,
    NoiseSchedule,
    ancestral_step,
    forward_diffuse,
    guided_sample,
    load_denoiser,
    make_schedule,
    measurement_grad,
    save_denoiser,
    score_from_eps,
    train_step,
    tweedie_denoise,
)
from .metrics import kde_rmse, rmse
from .nn import MLP, FourierFeatureMap, TrainConfig, fourier_embed, mlp_forward, train_loop
