"""Field snapshots, sensor masks, synthetic wake generation, and snapshot file I/O.

All types are immutable after construction and all operations are pure
functions of their inputs plus explicit seeds, so they are safe to call
concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import (
    EmptyDomainError,
    MaskMismatchError,
    ParameterError,
    SnapshotFormatError,
)

FORMAT_VERSION = 1

SNAPSHOT_MANIFEST = "snapshot.json"
DATASET_MANIFEST = "dataset.json"


@dataclass(frozen=True)
class DomainGrid:
    """Uniform row-major lattice of height x width nodes over a rectangle."""

    height: int
    width: int
    extent: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)  # x0, y0, x1, y1

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ParameterError(f"grid must be at least 2x2, got {self.height}x{self.width}")
        x0, y0, x1, y1 = self.extent
        if not (x1 > x0 and y1 > y0):
            raise ParameterError(f"degenerate extent {self.extent}")
        object.__setattr__(self, "extent", (float(x0), float(y0), float(x1), float(y1)))

    @property
    def n_points(self) -> int:
        return self.height * self.width

    @cached_property
    def coords(self) -> np.ndarray:
        """(I, 2) array of node coordinates; index i maps to row i // W, column i % W."""
        x0, y0, x1, y1 = self.extent
        xs = np.linspace(x0, x1, self.width)
        ys = np.linspace(y0, y1, self.height)
        xv, yv = np.meshgrid(xs, ys)  # row-major: y varies with the row index
        out = np.stack([xv.ravel(), yv.ravel()], axis=1)
        out.setflags(write=False)
        return out


@dataclass(frozen=True)
class FieldSnapshot:
    """A discretized field sample: per-node values plus in-domain validity flags.

    Values are float32 of shape (I, m); nodes flagged invalid (inside solid
    boundaries) hold exactly zero.
    """

    grid: DomainGrid
    values: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim == 1:
            values = values[:, None]
        validity = np.asarray(self.validity, dtype=bool).reshape(-1)
        if values.shape[0] != self.grid.n_points or values.ndim != 2 or values.shape[1] < 1:
            raise ParameterError(
                f"values shape {values.shape} does not match grid with {self.grid.n_points} points"
            )
        if validity.shape[0] != self.grid.n_points:
            raise ParameterError("validity length does not match grid")
        if not np.isfinite(values).all():
            raise ParameterError("snapshot values must be finite")
        if np.any(values[~validity] != 0.0):
            raise ParameterError("values at invalid points must be exactly zero")
        values.setflags(write=False)
        validity.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "validity", validity)

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def n_valid(self) -> int:
        return int(self.validity.sum())

    def values_grid(self) -> np.ndarray:
        """Values reshaped to (H, W, m)."""
        return self.values.reshape(self.grid.height, self.grid.width, self.channels)


@dataclass(frozen=True)
class SensorMask:
    """Sorted unique node indices selected as sensors."""

    indices: np.ndarray
    ratio: float
    seed: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if idx.size == 0:
            raise ParameterError("a sensor mask must select at least one point")
        if np.any(np.diff(idx) <= 0):
            raise ParameterError("mask indices must be sorted and unique")
        if idx[0] < 0:
            raise ParameterError("mask indices must be non-negative")
        if not 0.0 < self.ratio <= 1.0:
            raise ParameterError(f"mask ratio must lie in (0, 1], got {self.ratio}")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def n_sensors(self) -> int:
        return int(self.indices.size)


@dataclass(frozen=True)
class SparseObservation:
    """Measured (coordinate, value) pairs gathered from a snapshot at a mask."""

    mask: SensorMask
    coords: np.ndarray  # (k, 2)
    values: np.ndarray  # (k, m) float32

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim == 1:
            values = values[:, None]
        if coords.shape[0] != values.shape[0]:
            raise ParameterError("coords and values must have the same length")
        coords.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "values", values)

    @property
    def n_points(self) -> int:
        return int(self.values.shape[0])


def mask_cardinality(ratio: float, n_valid: int) -> int:
    """Sensor count for a sensing ratio: round(ratio * n_valid), floored at one point."""
    return max(1, int(round(ratio * n_valid)))


def random_mask(grid: DomainGrid, validity: np.ndarray, ratio: float, seed: int) -> SensorMask:
    """Draw a uniform random sensor mask over the valid points of a grid."""
    if not 0.0 < ratio <= 1.0:
        raise ParameterError(f"sensing ratio must lie in (0, 1], got {ratio}")
    validity = np.asarray(validity, dtype=bool).reshape(-1)
    if validity.shape[0] != grid.n_points:
        raise MaskMismatchError("validity length does not match grid")
    valid_idx = np.flatnonzero(validity)
    if valid_idx.size == 0:
        raise EmptyDomainError("cannot draw a mask: no valid points")
    k = mask_cardinality(ratio, valid_idx.size)
    rng = np.random.default_rng(seed)
    picked = rng.choice(valid_idx.size, size=k, replace=False)
    return SensorMask(indices=np.sort(valid_idx[picked]), ratio=float(ratio), seed=int(seed))


def apply_mask(snapshot: FieldSnapshot, mask: SensorMask) -> SparseObservation:
    """Gather the snapshot values at the mask's sensor locations (bit-exact)."""
    idx = mask.indices
    if idx[-1] >= snapshot.grid.n_points:
        raise MaskMismatchError(
            f"mask index {idx[-1]} out of range for grid with {snapshot.grid.n_points} points"
        )
    if not snapshot.validity[idx].all():
        raise MaskMismatchError("mask selects points that are invalid on this snapshot")
    return SparseObservation(
        mask=mask,
        coords=snapshot.grid.coords[idx],
        values=snapshot.values[idx],
    )


def full_observation(snapshot: FieldSnapshot) -> SparseObservation:
    """Observation covering every valid point of a snapshot."""
    valid_idx = np.flatnonzero(snapshot.validity)
    if valid_idx.size == 0:
        raise EmptyDomainError("snapshot has no valid points")
    mask = SensorMask(indices=valid_idx, ratio=1.0, seed=0)
    return apply_mask(snapshot, mask)


def complement_split(
    snapshot: FieldSnapshot, r_enc: float, seed: int
) -> tuple[SparseObservation, SparseObservation]:
    """Partition the valid points into an encoder set and its complement.

    The encoder set holds round(r_enc * n_valid) points (clamped so both sets
    stay non-empty); the decoder set is exactly the remaining valid points.
    """
    if not 0.0 < r_enc < 1.0:
        raise ParameterError(f"encoder ratio must lie strictly in (0, 1), got {r_enc}")
    valid_idx = np.flatnonzero(snapshot.validity)
    n = valid_idx.size
    if n < 2:
        raise EmptyDomainError("complement split needs at least two valid points")
    k_enc = int(np.clip(round(r_enc * n), 1, n - 1))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    enc_idx = np.sort(valid_idx[perm[:k_enc]])
    dec_idx = np.sort(valid_idx[perm[k_enc:]])
    enc_mask = SensorMask(indices=enc_idx, ratio=float(r_enc), seed=int(seed))
    dec_mask = SensorMask(indices=dec_idx, ratio=float(1.0 - r_enc), seed=int(seed))
    return apply_mask(snapshot, enc_mask), apply_mask(snapshot, dec_mask)


@dataclass(frozen=True)
class SyntheticWakeConfig:
    """Parameters of one synthetic cylinder-wake boundary configuration.

    ``amp_large``/``amp_small`` are the RMS amplitudes (over valid points) of
    the large- and small-scale components; ``k_small`` multiplies the base
    wavenumber 2*pi/wavelength for the small-scale component.
    """

    center_x: float
    center_y: float
    radius: float
    wavelength: float
    amp_large: float
    amp_small: float
    k_small: int
    phase: float
    seed: int

    def __post_init__(self):
        if self.radius <= 0:
            raise ParameterError("cylinder radius must be positive")
        if self.wavelength <= 0:
            raise ParameterError("wake wavelength must be positive")
        if self.amp_large <= 0:
            raise ParameterError("large-scale amplitude must be positive")
        if not 0.0 <= self.amp_small < self.amp_large:
            raise ParameterError("small-scale amplitude must satisfy 0 <= amp_small < amp_large")
        if self.k_small < 4:
            raise ParameterError("small-scale wavenumber multiplier must be >= 4")


def _wake_components(config: SyntheticWakeConfig, grid: DomainGrid):
    """Raw (unscaled) large- and small-scale wake patterns plus validity flags.

    Closed form, fixed for this repository. With dx = x - cx, dy = y - cy,
    r = hypot(dx, dy), lam = wavelength, rho = radius and
    phi = phase + jitter(seed),

        ramp(r)  = smoothstep((r - rho) / rho) in [0, 1]    no jump at the cylinder
        gate(dx) = 1 / (1 + exp(-dx / (0.5 lam)))           smooth upstream cutoff
        w(dx)    = 2 rho + 0.3 max(dx, 0)                   widening wake half-width
        E(x, y)  = ramp gate exp(-(dy / w)^2) exp(-max(dx, 0) / (5 lam))
        large    = E sin(2 pi dx / lam + phi)
        small    = E sin(2 pi k dx / lam + k phi) cos(pi dy / w)

    smoothstep(u) = 3u^2 - 2u^3 on clipped u; jitter(seed) is one
    Uniform(0, 2 pi) draw, so consecutive phases of one configuration stay
    phase-locked across both components. Points with r < rho are invalid and
    zeroed. Each component is later rescaled so its RMS over valid points
    equals its configured amplitude.
    """
    coords = grid.coords
    dx = coords[:, 0] - config.center_x
    dy = coords[:, 1] - config.center_y
    dist = np.hypot(dx, dy)
    valid = dist >= config.radius

    lam = config.wavelength
    rng = np.random.default_rng(config.seed)
    phi = config.phase + rng.uniform(0.0, 2.0 * np.pi)

    dxp = np.maximum(dx, 0.0)
    u = np.clip((dist - config.radius) / config.radius, 0.0, 1.0)
    ramp = u * u * (3.0 - 2.0 * u)
    gate = 1.0 / (1.0 + np.exp(-dx / (0.5 * lam)))
    half_width = 2.0 * config.radius + 0.3 * dxp
    envelope = ramp * gate * np.exp(-((dy / half_width) ** 2)) * np.exp(-dxp / (5.0 * lam))

    k = config.k_small
    large = envelope * np.sin(2.0 * np.pi * dx / lam + phi)
    small = envelope * np.sin(2.0 * np.pi * k * dx / lam + k * phi) * np.cos(np.pi * dy / half_width)
    large[~valid] = 0.0
    small[~valid] = 0.0
    return large, small, valid


def _rms(values: np.ndarray, valid: np.ndarray) -> float:
    return float(np.sqrt(np.mean(values[valid] ** 2)))


def generate_wake(config: SyntheticWakeConfig, grid: DomainGrid) -> FieldSnapshot:
    """Evaluate the synthetic multi-scale wake field on a grid.

    See ``_wake_components`` for the exact closed form. The returned values
    are amp_large * large/rms(large) + amp_small * small/rms(small), so the
    component RMS amplitudes over valid points are exactly the configured
    ones and the small-scale component always carries less energy.
    """
    x0, y0, x1, y1 = grid.extent
    if not (
        x0 <= config.center_x - config.radius
        and config.center_x + config.radius <= x1
        and y0 <= config.center_y - config.radius
        and config.center_y + config.radius <= y1
    ):
        raise ParameterError("cylinder must lie fully inside the domain extent")

    large, small, valid = _wake_components(config, grid)
    if not valid.any():
        raise EmptyDomainError("wake configuration leaves no valid points")

    rms_large = _rms(large, valid)
    if rms_large < 1e-12:
        raise ParameterError("degenerate wake: large-scale component vanishes on this grid")
    field = config.amp_large * large / rms_large
    if config.amp_small > 0.0:
        rms_small = _rms(small, valid)
        if rms_small < 1e-12:
            raise ParameterError("degenerate wake: small-scale component vanishes on this grid")
        field = field + config.amp_small * small / rms_small

    field[~valid] = 0.0
    return FieldSnapshot(grid=grid, values=field.astype(np.float32), validity=valid)


def wake_component_fields(
    config: SyntheticWakeConfig, grid: DomainGrid
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """RMS-scaled large and small components as separate (I,) arrays plus validity."""
    large, small, valid = _wake_components(config, grid)
    large = config.amp_large * large / _rms(large, valid)
    if config.amp_small > 0.0:
        small = config.amp_small * small / _rms(small, valid)
    else:
        small = np.zeros_like(small)
    return large, small, valid


# ---------------------------------------------------------------------------
# Snapshot file format: a directory holding a JSON manifest plus raw
# little-endian float32 values (row-major, channels-last) and one 0/1 byte
# of validity per point.
# ---------------------------------------------------------------------------


def save_snapshot(snapshot: FieldSnapshot, path: Path | str) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "height": snapshot.grid.height,
        "width": snapshot.grid.width,
        "channels": snapshot.channels,
        "dtype": "f32le",
        "extent": list(snapshot.grid.extent),
        "values_file": "values.bin",
        "validity_file": "validity.bin",
    }
    (path / SNAPSHOT_MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    (path / "values.bin").write_bytes(np.ascontiguousarray(snapshot.values, dtype="<f4").tobytes())
    (path / "validity.bin").write_bytes(snapshot.validity.astype(np.uint8).tobytes())


def load_snapshot(path: Path | str) -> FieldSnapshot:
    path = Path(path)
    manifest_path = path / SNAPSHOT_MANIFEST
    if not manifest_path.is_file():
        raise SnapshotFormatError(f"missing snapshot manifest {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise SnapshotFormatError(f"malformed snapshot manifest {manifest_path}: {exc}") from exc

    for key in ("format_version", "height", "width", "channels", "dtype", "extent", "values_file", "validity_file"):
        if key not in manifest:
            raise SnapshotFormatError(f"snapshot manifest missing key {key!r}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise SnapshotFormatError(f"unsupported snapshot format version {manifest['format_version']}")
    if manifest["dtype"] != "f32le":
        raise SnapshotFormatError(f"unsupported dtype {manifest['dtype']!r}")

    height, width, channels = int(manifest["height"]), int(manifest["width"]), int(manifest["channels"])
    grid = DomainGrid(height=height, width=width, extent=tuple(manifest["extent"]))
    n = grid.n_points

    raw_values = (path / manifest["values_file"]).read_bytes()
    if len(raw_values) != n * channels * 4:
        raise SnapshotFormatError(
            f"values payload holds {len(raw_values) // 4} floats, manifest declares {n * channels}"
        )
    values = np.frombuffer(raw_values, dtype="<f4").reshape(n, channels)

    raw_validity = (path / manifest["validity_file"]).read_bytes()
    if len(raw_validity) != n:
        raise SnapshotFormatError(
            f"validity payload holds {len(raw_validity)} bytes, manifest declares {n}"
        )
    validity_bytes = np.frombuffer(raw_validity, dtype=np.uint8)
    if not np.isin(validity_bytes, (0, 1)).all():
        raise SnapshotFormatError("validity bytes must be 0 or 1")

    if not np.isfinite(values).all():
        raise SnapshotFormatError("snapshot payload contains non-finite values")
    try:
        return FieldSnapshot(grid=grid, values=values, validity=validity_bytes.astype(bool))
    except ParameterError as exc:
        raise SnapshotFormatError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Dataset: a manifest listing snapshot directories plus a train/test split
# by boundary configuration.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetEntry:
    snapshot_id: str
    config_index: int
    path: str


@dataclass(frozen=True)
class Dataset:
    root: Path
    entries: tuple[DatasetEntry, ...]
    train_configs: tuple[int, ...]
    test_configs: tuple[int, ...]

    def load(self, entry: DatasetEntry) -> FieldSnapshot:
        return load_snapshot(self.root / entry.path)

    def split_entries(self, split: str) -> list[DatasetEntry]:
        configs = {"train": self.train_configs, "test": self.test_configs}[split]
        wanted = set(configs)
        return [e for e in self.entries if e.config_index in wanted]


def save_dataset_manifest(root: Path | str, entries, train_configs, test_configs) -> None:
    root = Path(root)
    manifest = {
        "format_version": FORMAT_VERSION,
        "snapshots": [
            {"id": e.snapshot_id, "config_index": e.config_index, "path": e.path} for e in entries
        ],
        "split": {"train_configs": list(train_configs), "test_configs": list(test_configs)},
    }
    (root / DATASET_MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")


def load_dataset(root: Path | str) -> Dataset:
    root = Path(root)
    manifest_path = root / DATASET_MANIFEST
    if not manifest_path.is_file():
        raise SnapshotFormatError(f"missing dataset manifest {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise SnapshotFormatError(f"malformed dataset manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise SnapshotFormatError("unsupported dataset format version")
    entries = tuple(
        DatasetEntry(snapshot_id=s["id"], config_index=int(s["config_index"]), path=s["path"])
        for s in manifest["snapshots"]
    )
    split = manifest.get("split", {})
    return Dataset(
        root=root,
        entries=entries,
        train_configs=tuple(split.get("train_configs", ())),
        test_configs=tuple(split.get("test_configs", ())),
    )


@dataclass(frozen=True)
class WakeFamilyConfig:
    """Ranges for sampling a family of wake boundary configurations."""

    n_configs: int = 20
    snapshots_per_config: int = 50
    train_configs: int = 16
    center_x_range: tuple[float, float] = (0.15, 0.3)
    center_y_range: tuple[float, float] = (0.38, 0.62)
    radius_range: tuple[float, float] = (0.05, 0.09)
    wavelength_range: tuple[float, float] = (0.24, 0.34)
    amp_large: float = 1.0
    amp_small_range: tuple[float, float] = (0.12, 0.2)
    k_small_choices: tuple[int, ...] = (4, 5)
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.train_configs < self.n_configs:
            raise ParameterError("train_configs must split the configuration set")


def sample_wake_configs(family: WakeFamilyConfig) -> list[SyntheticWakeConfig]:
    """One boundary configuration per index, drawn deterministically from the family seed."""
    rng = np.random.default_rng(family.seed)
    configs = []
    for i in range(family.n_configs):
        configs.append(
            SyntheticWakeConfig(
                center_x=float(rng.uniform(*family.center_x_range)),
                center_y=float(rng.uniform(*family.center_y_range)),
                radius=float(rng.uniform(*family.radius_range)),
                wavelength=float(rng.uniform(*family.wavelength_range)),
                amp_large=float(family.amp_large),
                amp_small=float(rng.uniform(*family.amp_small_range)),
                k_small=int(rng.choice(family.k_small_choices)),
                phase=0.0,
                seed=int(family.seed * 100003 + i),
            )
        )
    return configs


def build_wake_dataset(root: Path | str, grid: DomainGrid, family: WakeFamilyConfig) -> Dataset:
    """Generate and save a dataset of wake snapshots, split by boundary configuration.

    Snapshot k of a configuration advances the wake phase by 2*pi*k/K,
    mimicking consecutive shedding-cycle samples.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    configs = sample_wake_configs(family)
    entries = []
    for ci, base in enumerate(configs):
        for k in range(family.snapshots_per_config):
            phase = 2.0 * np.pi * k / family.snapshots_per_config
            cfg = SyntheticWakeConfig(
                center_x=base.center_x,
                center_y=base.center_y,
                radius=base.radius,
                wavelength=base.wavelength,
                amp_large=base.amp_large,
                amp_small=base.amp_small,
                k_small=base.k_small,
                phase=phase,
                seed=base.seed,
            )
            snap = generate_wake(cfg, grid)
            snap_id = f"cfg{ci:03d}_t{k:03d}"
            rel = f"snapshots/{snap_id}"
            save_snapshot(snap, root / rel)
            entries.append(DatasetEntry(snapshot_id=snap_id, config_index=ci, path=rel))
    train = tuple(range(family.train_configs))
    test = tuple(range(family.train_configs, family.n_configs))
    save_dataset_manifest(root, entries, train, test)
    return load_dataset(root)
