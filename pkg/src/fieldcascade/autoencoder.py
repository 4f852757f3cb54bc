"""Functional autoencoder: set-pooled kernel encoder and coordinate decoder.

The encoder averages a learned kernel over the observed (coordinate, value)
pairs, so it accepts scattered inputs of any size; the decoder is queried
per coordinate and can be evaluated on arbitrary meshes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .data import Dataset, FieldSnapshot, SparseObservation, complement_split, full_observation
from .errors import EmptyDomainError, ParameterError
from .nn import (
    MLP,
    FourierFeatureMap,
    TrainConfig,
    load_checkpoint,
    load_into_module,
    module_tensors,
    save_checkpoint,
    to_tensor,
    train_loop,
)


@dataclass(frozen=True)
class AutoencoderConfig:
    latent_dim: int = 32
    channels: int = 1
    kernel_width: int = 64
    kernel_depth: int = 3
    decoder_width: int = 128
    decoder_depth: int = 4
    n_frequencies: int = 16
    fourier_scale: float = 5.0
    init_seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ParameterError("latent dimension must be positive")
        if self.kernel_depth < 1 or self.decoder_depth < 1:
            raise ParameterError("encoder and decoder need at least one hidden layer")


class FunctionalAutoencoder(nn.Module):
    def __init__(self, config: AutoencoderConfig):
        super().__init__()
        torch.manual_seed(config.init_seed)
        self.config = config
        self.encoder_fourier = FourierFeatureMap(
            config.n_frequencies, 2, config.fourier_scale, seed=config.init_seed
        )
        self.decoder_fourier = FourierFeatureMap(
            config.n_frequencies, 2, config.fourier_scale, seed=config.init_seed + 1
        )
        emb = self.encoder_fourier.out_dim
        trig = 2 * config.n_frequencies
        kernel_in = emb + config.channels * (1 + trig)
        self.kernel_net = MLP(
            [kernel_in] + [config.kernel_width] * config.kernel_depth + [config.kernel_width]
        )
        self.pool_head = nn.Linear(config.kernel_width, config.latent_dim)
        self.decoder_net = MLP(
            [config.latent_dim + emb] + [config.decoder_width] * config.decoder_depth + [config.channels]
        )

    def kernel_features(self, coords: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
        """Per-point kernel input: embedded coords, values, and value-by-trig
        products. The products put windowed Fourier coefficients of the field
        directly into the pooled mean; without them, snapshots differing only
        in phase pool to nearly identical features and training stalls."""
        emb = self.encoder_fourier(coords)
        trig = emb[..., : 2 * self.config.n_frequencies]
        prod = (values.unsqueeze(-1) * trig.unsqueeze(-2)).reshape(*values.shape[:-1], -1)
        return torch.cat([emb, values, prod], dim=-1)

    def encode_batch(
        self, coords: torch.Tensor, values: torch.Tensor, point_mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        """coords (B,N,2), values (B,N,m), optional boolean (B,N) mask -> z (B,d_z)."""
        h = self.kernel_net(self.kernel_features(coords, values))
        if point_mask is None:
            pooled = h.mean(dim=1)
        else:
            w = point_mask.to(h.dtype).unsqueeze(-1)
            pooled = (h * w).sum(dim=1) / w.sum(dim=1)
        return self.pool_head(pooled)

    def decode_batch(self, z: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        """z (B,d_z), coords (B,N,2) -> values (B,N,m)."""
        emb = self.decoder_fourier(coords)
        zb = z.unsqueeze(1).expand(-1, coords.shape[1], -1)
        return self.decoder_net(torch.cat([zb, emb], dim=-1))


def build_autoencoder(config: AutoencoderConfig) -> FunctionalAutoencoder:
    return FunctionalAutoencoder(config)


def _canonical_order(coords: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Lexicographic order over (x, y, values): makes pooling bit-exactly
    invariant to input permutations."""
    keys = tuple(values[:, c] for c in range(values.shape[1] - 1, -1, -1))
    return np.lexsort(keys + (coords[:, 1], coords[:, 0]))


def encode(obs: SparseObservation, model: FunctionalAutoencoder) -> np.ndarray:
    """Map a sparse observation to its latent vector."""
    if obs.n_points == 0:
        raise EmptyDomainError("cannot encode an empty observation")
    order = _canonical_order(obs.coords, obs.values)
    coords = to_tensor(obs.coords[order]).unsqueeze(0)
    values = to_tensor(obs.values[order]).unsqueeze(0)
    with torch.no_grad():
        z = model.encode_batch(coords, values)
    return z.squeeze(0).numpy()


def decode(z: np.ndarray, coords: np.ndarray, model: FunctionalAutoencoder) -> np.ndarray:
    """Evaluate the decoded field at arbitrary coordinates; output (n, m)."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[0] == 0:
        raise ParameterError("decode needs a non-empty (n, 2) coordinate array")
    z = np.asarray(z, dtype=np.float32).reshape(-1)
    if z.shape[0] != model.config.latent_dim:
        raise ParameterError(
            f"latent dim {z.shape[0]} does not match model latent dim {model.config.latent_dim}"
        )
    zt = to_tensor(z).unsqueeze(0)
    ct = to_tensor(coords).unsqueeze(0)
    with torch.no_grad():
        out = model.decode_batch(zt, ct)
    return out.squeeze(0).numpy()


def reconstruct_principal(
    obs: SparseObservation,
    coords: np.ndarray,
    model: FunctionalAutoencoder,
    validity: np.ndarray | None = None,
) -> np.ndarray:
    """Decode(encode(obs)) at the target coordinates, zeroing invalid points."""
    out = decode(encode(obs, model), coords, model)
    if validity is not None:
        out = out.copy()
        out[~np.asarray(validity, dtype=bool)] = 0.0
    return out


def fae_loss(
    snapshot: FieldSnapshot,
    model: FunctionalAutoencoder,
    beta: float,
    split: tuple[SparseObservation, SparseObservation],
) -> float:
    """Masked-training loss: half the reconstruction MSE on the decoder set
    plus beta times the squared latent norm."""
    enc_obs, dec_obs = split
    if enc_obs.n_points == 0 or dec_obs.n_points == 0:
        raise EmptyDomainError("both split sets must be non-empty")
    with torch.no_grad():
        loss = _fae_loss_torch(model, _observation_tensors(enc_obs), _observation_tensors(dec_obs), beta)
    return float(loss)


def _observation_tensors(obs: SparseObservation) -> tuple[torch.Tensor, torch.Tensor]:
    coords = to_tensor(obs.coords).unsqueeze(0)
    values = to_tensor(obs.values).unsqueeze(0)
    return coords, values


def _fae_loss_torch(model, enc, dec, beta: float) -> torch.Tensor:
    enc_coords, enc_values = enc
    dec_coords, dec_values = dec
    z = model.encode_batch(enc_coords, enc_values)
    pred = model.decode_batch(z, dec_coords)
    mse = ((pred - dec_values) ** 2).mean()
    return 0.5 * mse + beta * (z**2).sum(dim=-1).mean()


def _pad_stack(arrays: Sequence[np.ndarray], dtype=np.float32):
    """Stack variable-length (n_i, d) arrays into (B, N_max, d) plus a mask."""
    n_max = max(a.shape[0] for a in arrays)
    batch = np.zeros((len(arrays), n_max, arrays[0].shape[1]), dtype=dtype)
    mask = np.zeros((len(arrays), n_max), dtype=bool)
    for i, a in enumerate(arrays):
        batch[i, : a.shape[0]] = a
        mask[i, : a.shape[0]] = True
    return torch.from_numpy(batch), torch.from_numpy(mask)


def _batch_loss(model: FunctionalAutoencoder, batch, beta: float) -> torch.Tensor:
    enc_coords, enc_values, enc_mask, dec_coords, dec_values, dec_mask = batch
    z = model.encode_batch(enc_coords, enc_values, enc_mask)
    pred = model.decode_batch(z, dec_coords)
    w = dec_mask.to(pred.dtype).unsqueeze(-1)
    mse_per = ((pred - dec_values) ** 2 * w).sum(dim=(1, 2)) / (w.sum(dim=(1, 2)))
    reg = (z**2).sum(dim=-1)
    return (0.5 * mse_per + beta * reg).mean()


def _prepare_split_batch(
    snapshots: Sequence[FieldSnapshot],
    r_enc: float,
    seeds: Sequence[int],
    max_decoder_points: int | None = None,
):
    enc_c, enc_v, dec_c, dec_v = [], [], [], []
    for snap, seed in zip(snapshots, seeds):
        enc_obs, dec_obs = complement_split(snap, r_enc, seed)
        dcoords, dvalues = dec_obs.coords, dec_obs.values
        if max_decoder_points is not None and dcoords.shape[0] > max_decoder_points:
            # stochastic minibatch over supervision points; unbiased for the
            # mean-squared loss and much cheaper on large grids
            pick = np.random.default_rng(seed + 0x5EED).choice(
                dcoords.shape[0], size=max_decoder_points, replace=False
            )
            dcoords, dvalues = dcoords[pick], dvalues[pick]
        enc_c.append(enc_obs.coords)
        enc_v.append(enc_obs.values)
        dec_c.append(dcoords)
        dec_v.append(dvalues)
    ec, em = _pad_stack(enc_c)
    ev, _ = _pad_stack(enc_v)
    dc, dm = _pad_stack(dec_c)
    dv, _ = _pad_stack(dec_v)
    return ec, ev, em, dc, dv, dm


def principal_batch(
    model: FunctionalAutoencoder, snapshots: Sequence[FieldSnapshot], observations: Sequence[SparseObservation]
) -> np.ndarray:
    """Full-grid principal reconstructions for a batch of observations.

    Returns (B, I, m) with invalid points zeroed. Fast padded-batch path for
    training and evaluation loops; agrees with the scalar API to float
    precision but not bit-for-bit (pooling reduction order differs).
    """
    enc_c, enc_m = _pad_stack([_sorted_coords(o) for o in observations])
    enc_v, _ = _pad_stack([_sorted_values(o) for o in observations])
    grid_coords = to_tensor(np.stack([s.grid.coords for s in snapshots]))
    with torch.no_grad():
        z = model.encode_batch(enc_c, enc_v, enc_m)
        out = model.decode_batch(z, grid_coords).numpy()
    for i, snap in enumerate(snapshots):
        out[i, ~snap.validity] = 0.0
    return out


def _sorted_coords(obs: SparseObservation) -> np.ndarray:
    return obs.coords[_canonical_order(obs.coords, obs.values)]


def _sorted_values(obs: SparseObservation) -> np.ndarray:
    return obs.values[_canonical_order(obs.coords, obs.values)]


def validation_rmse(
    model: FunctionalAutoencoder, snapshots: Sequence[FieldSnapshot], batch_size: int = 16
) -> float:
    """Mean full-observation reconstruction RMSE over snapshots."""
    if not snapshots:
        return float("nan")
    total = []
    for start in range(0, len(snapshots), batch_size):
        chunk = list(snapshots[start : start + batch_size])
        recon = principal_batch(model, chunk, [full_observation(s) for s in chunk])
        for snap, rec in zip(chunk, recon):
            err = (rec.astype(np.float64) - snap.values.astype(np.float64))[snap.validity]
            total.append(float(np.sqrt(np.mean(err**2))))
    return float(np.mean(total))


def train_fae(
    train_snapshots: Sequence[FieldSnapshot],
    r_enc: float,
    train_config: TrainConfig,
    model_config: AutoencoderConfig | None = None,
    beta: float = 1e-4,
    val_snapshots: Sequence[FieldSnapshot] = (),
    max_val_snapshots: int = 32,
    max_decoder_points: int | None = None,
) -> tuple[FunctionalAutoencoder, list[dict]]:
    """Train with complement-mask splits redrawn freshly every step.

    Returns the model and per-epoch history rows {epoch, loss, val_rmse}.
    """
    if not train_snapshots:
        raise EmptyDomainError("training requires at least one snapshot")
    model_config = model_config or AutoencoderConfig(
        channels=train_snapshots[0].channels, init_seed=train_config.seed
    )
    model = build_autoencoder(model_config)
    rng = np.random.default_rng(train_config.seed)
    val_subset = list(val_snapshots[:max_val_snapshots]) or list(train_snapshots[:max_val_snapshots])

    def batch_stream(epoch: int):
        order = rng.permutation(len(train_snapshots))
        for start in range(0, len(order), train_config.batch_size):
            chunk = [train_snapshots[i] for i in order[start : start + train_config.batch_size]]
            seeds = [int(rng.integers(2**31)) for _ in chunk]
            yield _prepare_split_batch(chunk, r_enc, seeds, max_decoder_points)

    history: list[dict] = []

    def on_epoch_end(epoch: int, m: FunctionalAutoencoder, loss: float):
        history.append({"epoch": epoch, "loss": loss, "val_rmse": validation_rmse(m, val_subset)})

    train_loop(model, lambda m, b: _batch_loss(m, b, beta), batch_stream, train_config, on_epoch_end)
    model.eval()
    return model, history


def export_latents(
    items: Iterable[tuple[str, FieldSnapshot]],
    model: FunctionalAutoencoder,
    out_path: Path | str | None = None,
) -> tuple[list[str], np.ndarray]:
    """Latent vector of every snapshot's full observation; optional CSV dump."""
    ids, rows = [], []
    for snap_id, snap in items:
        ids.append(snap_id)
        rows.append(encode(full_observation(snap), model))
    latents = np.stack(rows) if rows else np.zeros((0, model.config.latent_dim))
    if out_path is not None:
        with open(out_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["id"] + [f"z{i}" for i in range(model.config.latent_dim)])
            for snap_id, z in zip(ids, latents):
                writer.writerow([snap_id] + [repr(float(v)) for v in z])
    return ids, latents


def dataset_snapshots(dataset: Dataset, split: str) -> list[tuple[str, FieldSnapshot]]:
    return [(e.snapshot_id, dataset.load(e)) for e in dataset.split_entries(split)]


def save_autoencoder(
    path: Path | str, model: FunctionalAutoencoder, train_config: TrainConfig | None = None
) -> None:
    save_checkpoint(
        path,
        module_tensors(model),
        train_config=train_config,
        extra={"kind": "functional_autoencoder", "config": asdict(model.config)},
    )


def load_autoencoder(path: Path | str) -> FunctionalAutoencoder:
    tensors, _, extra = load_checkpoint(path)
    cfg = AutoencoderConfig(**extra["config"])
    model = build_autoencoder(cfg)
    load_into_module(model, tensors)
    model.eval()
    return model
