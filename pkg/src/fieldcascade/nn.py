"""Shared trainable blocks: Fourier feature embeddings, GELU MLPs, Adam training.

Networks are torch modules; forward passes on frozen parameters are pure and
safe to call concurrently, parameters are mutated only inside train_loop.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ParameterError, TrainingDivergedError

# torch CPU picks matmul kernels by problem size, and small-batch kernels
# reduce in a different order bitwise. Running every row-wise op on fixed
# 512-row zero-padded chunks pins the kernel shape, so per-row outputs never
# depend on how points are batched together (row position and the content of
# other rows are irrelevant to a row's GEMM result).
_CHUNK_ROWS = 512


def _chunked_rows(fn, flat: torch.Tensor) -> torch.Tensor:
    """Apply a row-wise module to fixed-size zero-padded row chunks."""
    n = flat.shape[0]
    outs = []
    for start in range(0, max(n, 1), _CHUNK_ROWS):
        chunk = flat[start : start + _CHUNK_ROWS]
        k = chunk.shape[0]
        if k < _CHUNK_ROWS:
            chunk = torch.cat([chunk, chunk.new_zeros(_CHUNK_ROWS - k, chunk.shape[1])])
        outs.append(fn(chunk)[:k])
    return outs[0] if len(outs) == 1 else torch.cat(outs)


def to_tensor(array, dtype=np.float32) -> torch.Tensor:
    """Copying numpy-to-torch converter; safe for read-only arrays."""
    return torch.from_numpy(np.array(array, dtype=dtype))


class FourierFeatureMap(nn.Module):
    """Random Fourier features [cos(2 pi B x), sin(2 pi B x), x].

    The frequency matrix B (n_frequencies x in_dim, entries N(0, scale^2)) is
    drawn once at construction and persisted with the model, never trained.
    """

    def __init__(self, n_frequencies: int = 16, in_dim: int = 2, scale: float = 5.0, seed: int = 0):
        super().__init__()
        if n_frequencies < 1 or in_dim < 1:
            raise ParameterError("fourier map needs at least one frequency and one input dim")
        gen = torch.Generator().manual_seed(seed)
        freqs = torch.randn(n_frequencies, in_dim, generator=gen) * scale
        self.register_buffer("frequencies", freqs)
        self.scale = scale

    @property
    def in_dim(self) -> int:
        return self.frequencies.shape[1]

    @property
    def out_dim(self) -> int:
        return 2 * self.frequencies.shape[0] + self.frequencies.shape[1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ParameterError(
                f"coordinate dim {x.shape[-1]} does not match fourier map dim {self.in_dim}"
            )
        lead = x.shape[:-1]
        flat = x.reshape(-1, self.in_dim).contiguous()

        def embed(rows: torch.Tensor) -> torch.Tensor:
            proj = 2.0 * torch.pi * (rows @ self.frequencies.to(rows.dtype).T)
            return torch.cat([torch.cos(proj), torch.sin(proj), rows], dim=-1)

        return _chunked_rows(embed, flat).reshape(*lead, self.out_dim)


def fourier_embed(coords: np.ndarray, fmap: FourierFeatureMap) -> np.ndarray:
    """Embed an (n, d) coordinate array; returns (n, 2*n_frequencies + d)."""
    x = torch.as_tensor(np.asarray(coords, dtype=np.float64))
    with torch.no_grad():
        return fmap(x).numpy()


class MLP(nn.Module):
    """Fully connected net, GELU on hidden layers, identity output.

    widths = [in, hidden..., out]; a two-entry list is a single linear layer.
    Inputs of any leading shape are flattened to rows and run through fixed
    512-row chunks, so per-point outputs are independent of how points are
    batched together.
    """

    def __init__(self, widths: list[int] | tuple[int, ...]):
        super().__init__()
        if len(widths) < 2:
            raise ParameterError("an MLP needs at least input and output widths")
        layers: list[nn.Module] = []
        for i in range(len(widths) - 1):
            layers.append(nn.Linear(widths[i], widths[i + 1]))
            if i < len(widths) - 2:
                layers.append(nn.GELU())
        self.layers = nn.Sequential(*layers)
        self.widths = tuple(int(w) for w in widths)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.widths[0]:
            raise ParameterError(f"input dim {x.shape[-1]} does not match MLP input {self.widths[0]}")
        lead = x.shape[:-1]
        flat = x.reshape(-1, self.widths[0]).contiguous()
        return _chunked_rows(self.layers, flat).reshape(*lead, self.widths[-1])


def mlp_forward(params: MLP, inputs: np.ndarray) -> np.ndarray:
    """Run an MLP on a numpy array (rows = samples)."""
    x = torch.as_tensor(np.asarray(inputs), dtype=torch.float32)
    with torch.no_grad():
        return params(x).numpy()


@dataclass(frozen=True)
class TrainConfig:
    """Adam-style optimizer settings plus batching and seeding."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 16
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ParameterError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ParameterError("batch size must be at least 1")
        if self.epochs < 1:
            raise ParameterError("epoch count must be at least 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ParameterError("moment decay rates must lie in [0, 1)")


def train_loop(
    model: nn.Module,
    loss_fn: Callable[[nn.Module, object], torch.Tensor],
    batch_stream: Callable[[int], Iterable],
    config: TrainConfig,
    on_epoch_end: Callable[[int, nn.Module, float], None] | None = None,
) -> list[float]:
    """Adam optimization over epochs of batches; returns per-epoch mean losses.

    batch_stream(epoch) must yield batches deterministically; any randomness
    inside loss_fn must come from generators the caller seeded. Aborts on a
    non-finite loss, naming the offending batch.
    """
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=config.learning_rate,
        betas=(config.beta1, config.beta2),
        eps=config.epsilon,
    )
    history: list[float] = []
    for epoch in range(config.epochs):
        losses = []
        for batch_index, batch in enumerate(batch_stream(epoch)):
            optimizer.zero_grad()
            loss = loss_fn(model, batch)
            value = float(loss.detach())
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at epoch {epoch}, batch {batch_index}"
                )
            loss.backward()
            optimizer.step()
            losses.append(value)
        epoch_loss = float(np.mean(losses)) if losses else float("nan")
        history.append(epoch_loss)
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, epoch_loss)
    return history


# ---------------------------------------------------------------------------
# Checkpoint format: a JSON manifest naming each tensor (name, shape, dtype
# f32le, byte offset) plus a single raw little-endian float32 blob.
# ---------------------------------------------------------------------------

CHECKPOINT_MANIFEST = "checkpoint.json"
CHECKPOINT_BLOB = "params.bin"


def save_checkpoint(
    path: Path | str,
    tensors: dict[str, torch.Tensor | np.ndarray],
    train_config: TrainConfig | None = None,
    extra: dict | None = None,
) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    records = []
    blob = bytearray()
    for name in sorted(tensors):
        t = tensors[name]
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        records.append(
            {"name": name, "shape": list(arr.shape), "dtype": "f32le", "offset": len(blob)}
        )
        blob.extend(arr.tobytes())
    manifest = {
        "format_version": 1,
        "blob_file": CHECKPOINT_BLOB,
        "tensors": records,
        "train_config": asdict(train_config) if train_config is not None else None,
        "extra": extra or {},
    }
    (path / CHECKPOINT_MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    (path / CHECKPOINT_BLOB).write_bytes(bytes(blob))


def load_checkpoint(path: Path | str) -> tuple[dict[str, np.ndarray], dict | None, dict]:
    path = Path(path)
    manifest_path = path / CHECKPOINT_MANIFEST
    if not manifest_path.is_file():
        raise CheckpointError(f"missing checkpoint manifest {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed checkpoint manifest: {exc}") from exc
    if manifest.get("format_version") != 1:
        raise CheckpointError("unsupported checkpoint format version")
    blob = (path / manifest["blob_file"]).read_bytes()
    tensors: dict[str, np.ndarray] = {}
    for rec in manifest["tensors"]:
        if rec["dtype"] != "f32le":
            raise CheckpointError(f"unsupported tensor dtype {rec['dtype']!r}")
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = rec["offset"]
        end = start + count * 4
        if end > len(blob):
            raise CheckpointError(f"tensor {rec['name']!r} overruns the parameter blob")
        tensors[rec["name"]] = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape).copy()
    return tensors, manifest.get("train_config"), manifest.get("extra", {})


def module_tensors(module: nn.Module) -> dict[str, torch.Tensor]:
    """State dict including buffers (e.g. Fourier frequency matrices)."""
    return {k: v for k, v in module.state_dict().items()}


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over all state tensors in sorted name order."""
    import hashlib

    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(state[name].detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def load_into_module(module: nn.Module, tensors: dict[str, np.ndarray]) -> None:
    state = {k: torch.as_tensor(v) for k, v in tensors.items()}
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint does not match module: {exc}") from exc
