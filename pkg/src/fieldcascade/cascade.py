"""Two-stage pipeline: frozen autoencoder conditions a residual diffusion model.

Training draws a fresh sparse mask every optimization step, reconstructs the
principal structure with the frozen autoencoder, and teaches the diffusion
model the residual between ground truth and that reconstruction. Inference
adds a guided diffusion sample of the residual on top of the principal
structure.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .autoencoder import (
    FunctionalAutoencoder,
    load_autoencoder,
    principal_batch,
    reconstruct_principal,
    save_autoencoder,
)
from .data import DomainGrid, FieldSnapshot, SparseObservation, apply_mask, full_observation, random_mask
from .diffusion import (
    ConditionalDenoiser,
    GuidanceConfig,
    NoiseSchedule,
    guided_sample,
    load_denoiser,
    save_denoiser,
    train_step,
)
from .errors import CheckpointError, EmptyDomainError, FrozenParameterError, ParameterError
from .nn import TrainConfig, parameter_checksum, to_tensor, train_loop

CASCADE_MANIFEST = "cascade.json"


@dataclass(frozen=True)
class CascadeConfig:
    """Mask-cascade training and inference defaults."""

    train_ratio: float = 0.005
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    ensemble_size: int = 100

    def __post_init__(self):
        if not 0.0 < self.train_ratio < 1.0:
            raise ParameterError("training sensing ratio must lie in (0, 1)")
        if self.ensemble_size < 1:
            raise ParameterError("ensemble size must be at least 1")


@dataclass(frozen=True)
class ReconstructionResult:
    """One full reconstruction: principal + generated residual detail."""

    principal: np.ndarray  # (I, m)
    detail: np.ndarray  # (I, m)
    full: np.ndarray  # (I, m), exactly principal + detail
    observed_residual: np.ndarray  # (k, m), y - full at sensor locations
    rmse: float | None
    seed: int

    @property
    def observed_mean_abs_residual(self) -> float:
        return float(np.mean(np.abs(self.observed_residual)))


def residual_normalization(
    model: FunctionalAutoencoder, snapshots: Sequence[FieldSnapshot], batch_size: int = 16
) -> float:
    """Std of the full-observation reference residuals u - m_hat over a
    training set, floored at 1e-3 of the field std so a near-perfect
    autoencoder cannot collapse the scale."""
    if not snapshots:
        raise EmptyDomainError("normalization needs at least one snapshot")
    sq_sum, count = 0.0, 0
    field_sq_sum = 0.0
    for start in range(0, len(snapshots), batch_size):
        chunk = list(snapshots[start : start + batch_size])
        obs = [full_observation(s) for s in chunk]
        recon = principal_batch(model, chunk, obs)
        for snap, rec in zip(chunk, recon):
            resid = (snap.values.astype(np.float64) - rec.astype(np.float64))[snap.validity]
            sq_sum += float((resid**2).sum())
            field_sq_sum += float((snap.values.astype(np.float64)[snap.validity] ** 2).sum())
            count += resid.size
    resid_std = np.sqrt(sq_sum / count)
    field_std = np.sqrt(field_sq_sum / count)
    return float(max(resid_std, 1e-3 * field_std, 1e-12))


def _to_grid_tensor(flat: np.ndarray, grid: DomainGrid) -> torch.Tensor:
    """(I, m) node array -> (m, H, W) tensor."""
    return to_tensor(np.ascontiguousarray(flat.T).reshape(-1, grid.height, grid.width))


def _to_flat_array(field: torch.Tensor, grid: DomainGrid) -> np.ndarray:
    """(m, H, W) tensor -> (I, m) node array."""
    return field.detach().numpy().reshape(field.shape[0], -1).T.copy()


def mask_cascade_train(
    train_snapshots: Sequence[FieldSnapshot],
    fae: FunctionalAutoencoder,
    net: ConditionalDenoiser,
    schedule: NoiseSchedule,
    cascade_config: CascadeConfig,
    train_config: TrainConfig,
    residual_scale: float | None = None,
) -> tuple[list[float], float]:
    """Train the conditional diffusion model against the frozen autoencoder.

    Every optimization step redraws a sparse mask per snapshot, rebuilds the
    condition through the autoencoder, and regresses the injected noise on
    the normalized residual target. Returns (per-epoch losses, residual
    scale). Verifies by checksum that the autoencoder was not mutated.
    """
    if not train_snapshots:
        raise EmptyDomainError("training requires at least one snapshot")
    fae.eval()
    for p in fae.parameters():
        p.requires_grad_(False)
    checksum_before = parameter_checksum(fae)

    if residual_scale is None:
        residual_scale = residual_normalization(fae, train_snapshots)
    scale = float(residual_scale)

    grid = train_snapshots[0].grid
    rng = np.random.default_rng(train_config.seed)
    noise_gen = torch.Generator().manual_seed(train_config.seed)

    def batch_stream(epoch: int):
        order = rng.permutation(len(train_snapshots))
        for start in range(0, len(order), train_config.batch_size):
            chunk = [train_snapshots[i] for i in order[start : start + train_config.batch_size]]
            mask_seeds = [int(rng.integers(2**31)) for _ in chunk]
            yield chunk, mask_seeds

    def loss_fn(model, batch):
        chunk, mask_seeds = batch
        observations = [
            apply_mask(s, random_mask(s.grid, s.validity, cascade_config.train_ratio, seed))
            for s, seed in zip(chunk, mask_seeds)
        ]
        conditions = principal_batch(fae, chunk, observations)  # (B, I, m)
        d0 = np.stack(
            [(s.values.astype(np.float64) - c) * s.validity[:, None] for s, c in zip(chunk, conditions)]
        )
        d0_t = torch.stack([_to_grid_tensor(d, grid) for d in d0]) / scale
        cond_t = torch.stack([_to_grid_tensor(c, grid) for c in conditions])
        return train_step(d0_t, cond_t, model, schedule, noise_gen)

    history = train_loop(net, loss_fn, batch_stream, train_config)
    net.eval()

    if parameter_checksum(fae) != checksum_before:
        raise FrozenParameterError("autoencoder parameters changed during cascade training")
    return history, scale


def reconstruct(
    obs: SparseObservation,
    grid: DomainGrid,
    validity: np.ndarray,
    fae: FunctionalAutoencoder,
    net: ConditionalDenoiser,
    schedule: NoiseSchedule,
    guidance: GuidanceConfig,
    residual_scale: float,
    seed: int,
    truth: FieldSnapshot | None = None,
    principal: np.ndarray | None = None,
) -> ReconstructionResult:
    """Full-field reconstruction u_hat = m_hat + d_hat from one observation.

    `principal` may carry a precomputed principal structure for this exact
    observation (it is deterministic), e.g. when sampling repeatedly from
    one mask.
    """
    validity = np.asarray(validity, dtype=bool).reshape(-1)
    if principal is None:
        principal = reconstruct_principal(obs, grid.coords, fae, validity)
    cond_t = _to_grid_tensor(principal, grid)
    y_t = to_tensor(obs.values)
    d_norm = guided_sample(
        cond_t, y_t, obs.mask.indices, net, schedule, guidance, seed, residual_scale
    )
    detail = _to_flat_array(d_norm, grid) * residual_scale
    detail[~validity] = 0.0
    detail = detail.astype(np.float32)
    full = principal + detail
    observed_residual = obs.values - full[obs.mask.indices]
    rmse_value = None
    if truth is not None:
        err = (full.astype(np.float64) - truth.values.astype(np.float64))[validity]
        rmse_value = float(np.sqrt(np.mean(err**2)))
    return ReconstructionResult(
        principal=principal,
        detail=detail,
        full=full,
        observed_residual=observed_residual,
        rmse=rmse_value,
        seed=seed,
    )


def ensemble_reconstruct(
    obs: SparseObservation,
    grid: DomainGrid,
    validity: np.ndarray,
    fae: FunctionalAutoencoder,
    net: ConditionalDenoiser,
    schedule: NoiseSchedule,
    guidance: GuidanceConfig,
    residual_scale: float,
    n: int,
    base_seed: int,
    truth: FieldSnapshot | None = None,
) -> tuple[np.ndarray, list[ReconstructionResult]]:
    """n independent reconstructions with seeds base_seed..base_seed+n-1;
    returns the pointwise mean field and the per-sample results."""
    if n < 1:
        raise ParameterError("ensemble size must be at least 1")
    results = [
        reconstruct(
            obs, grid, validity, fae, net, schedule, guidance, residual_scale, base_seed + i, truth
        )
        for i in range(n)
    ]
    mean_field = np.mean([r.full for r in results], axis=0)
    return mean_field, results


@dataclass
class CascadeBundle:
    """A trained cascade: autoencoder, denoiser, schedule, and defaults."""

    fae: FunctionalAutoencoder
    net: ConditionalDenoiser
    schedule: NoiseSchedule
    config: CascadeConfig
    residual_scale: float

    def reconstruct(
        self,
        obs: SparseObservation,
        grid: DomainGrid,
        validity: np.ndarray,
        seed: int,
        truth: FieldSnapshot | None = None,
        guidance: GuidanceConfig | None = None,
    ) -> ReconstructionResult:
        return reconstruct(
            obs,
            grid,
            validity,
            self.fae,
            self.net,
            self.schedule,
            guidance or self.config.guidance,
            self.residual_scale,
            seed,
            truth,
        )


def save_cascade_bundle(path: Path | str, bundle: CascadeBundle) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_autoencoder(path / "autoencoder", bundle.fae)
    save_denoiser(path / "denoiser", bundle.net, bundle.schedule, bundle.residual_scale)
    manifest = {
        "format_version": 1,
        "train_ratio": bundle.config.train_ratio,
        "guidance": asdict(bundle.config.guidance),
        "ensemble_size": bundle.config.ensemble_size,
        "residual_scale": bundle.residual_scale,
    }
    (path / CASCADE_MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")


def load_cascade_bundle(path: Path | str) -> CascadeBundle:
    path = Path(path)
    manifest_path = path / CASCADE_MANIFEST
    if not manifest_path.is_file():
        raise CheckpointError(f"missing cascade manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != 1:
        raise CheckpointError("unsupported cascade bundle version")
    fae = load_autoencoder(path / "autoencoder")
    net, schedule, residual_scale = load_denoiser(path / "denoiser")
    config = CascadeConfig(
        train_ratio=manifest["train_ratio"],
        guidance=GuidanceConfig(**manifest["guidance"]),
        ensemble_size=manifest.get("ensemble_size", 100),
    )
    return CascadeBundle(
        fae=fae, net=net, schedule=schedule, config=config, residual_scale=residual_scale
    )
