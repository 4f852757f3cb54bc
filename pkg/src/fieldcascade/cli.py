"""Command-line front end: dataset generation, training, reconstruction, sweeps.

Every subcommand reads an optional flat config file plus flag overrides and
writes its outputs under a run directory together with a config snapshot and
a manifest (resolved config, git describe, wall times). Exit codes: 0 on
success, 1 on usage errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .autoencoder import (
    AutoencoderConfig,
    dataset_snapshots,
    export_latents,
    load_autoencoder,
    principal_batch,
    save_autoencoder,
    train_fae,
)
from .cascade import (
    CascadeBundle,
    CascadeConfig,
    load_cascade_bundle,
    mask_cascade_train,
    reconstruct,
    save_cascade_bundle,
)
from .data import (
    Dataset,
    DomainGrid,
    FieldSnapshot,
    WakeFamilyConfig,
    apply_mask,
    build_wake_dataset,
    load_dataset,
    random_mask,
    save_snapshot,
)
from .diffusion import ConditionalDenoiser, DenoiserConfig, GuidanceConfig, make_schedule
from .errors import FieldCascadeError, ParameterError
from .metrics import kde_rmse, rmse
from .nn import TrainConfig
from .plots import (
    save_field_figure,
    save_history_figure,
    save_kde_figure,
    save_ratio_summary_figure,
)
from .runconfig import parse_config_file, resolve, write_config_snapshot, write_run_manifest


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _str2bool(value: str) -> bool:
    return value.strip().lower() in ("1", "true", "yes", "on")


def _ratio_list(raw: str) -> list[float]:
    ratios = [float(r) for r in raw.split(",") if r.strip()]
    if not ratios:
        raise ParameterError("empty ratio list")
    if any(not 0.0 < r <= 1.0 for r in ratios):
        raise ParameterError("ratios must lie in (0, 1]")
    if any(b <= a for a, b in zip(ratios, ratios[1:])):
        raise ParameterError("ratios must be strictly increasing")
    return ratios


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _make_run_dir(out: str) -> Path:
    run_dir = Path(out)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "plots").mkdir(exist_ok=True)
    return run_dir


def _resolve_params(args, spec: dict[str, tuple]) -> dict:
    file_values = parse_config_file(args.config) if getattr(args, "config", None) else {}
    resolved = {}
    for key, (cast, default) in spec.items():
        attr = key.replace("-", "_")
        resolved[key] = resolve(file_values, {key: getattr(args, attr, None)}, key, default, cast)
    return resolved


def _pick_snapshot(dataset: Dataset, snapshot_id: str | None, split: str = "test"):
    entries = dataset.split_entries(split) or list(dataset.entries)
    if snapshot_id:
        matches = [e for e in dataset.entries if e.snapshot_id == snapshot_id]
        if not matches:
            raise ParameterError(f"snapshot id {snapshot_id!r} not found in dataset")
        entry = matches[0]
    else:
        entry = entries[0]
    return entry, dataset.load(entry)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

_GEN_SPEC = {
    "out": (str, None),
    "height": (int, 32),
    "width": (int, 64),
    "n-configs": (int, 20),
    "snapshots-per-config": (int, 50),
    "train-configs": (int, 16),
    "seed": (int, 0),
}


def cmd_gen_data(args) -> int:
    t0 = time.time()
    p = _resolve_params(args, _GEN_SPEC)
    run_dir = _make_run_dir(p["out"])
    grid = DomainGrid(height=p["height"], width=p["width"])
    family = WakeFamilyConfig(
        n_configs=p["n-configs"],
        snapshots_per_config=p["snapshots-per-config"],
        train_configs=p["train-configs"],
        seed=p["seed"],
    )
    dataset = build_wake_dataset(run_dir, grid, family)
    first = dataset.load(dataset.entries[0])
    save_field_figure(
        run_dir / "plots" / "example_field.png",
        [("sample snapshot", first.values)],
        grid,
        first.validity,
    )
    write_config_snapshot(run_dir, p)
    write_run_manifest(run_dir, "gen-data", p, {"total_s": time.time() - t0})
    print(f"wrote {len(dataset.entries)} snapshots to {run_dir}")
    return 0


_TRAIN_FAE_SPEC = {
    "dataset": (str, None),
    "out": (str, None),
    "epochs": (int, 60),
    "batch-size": (int, 16),
    "learning-rate": (float, 2e-3),
    "r-enc": (float, 0.5),
    "beta": (float, 1e-4),
    "latent-dim": (int, 32),
    "max-decoder-points": (int, 0),  # 0 = supervise on the full complement
    "fourier-scale": (float, 5.0),
    "val-snapshots": (int, 32),
    "seed": (int, 0),
}


def cmd_train_fae(args) -> int:
    t0 = time.time()
    p = _resolve_params(args, _TRAIN_FAE_SPEC)
    run_dir = _make_run_dir(p["out"])
    dataset = load_dataset(p["dataset"])
    train_snaps = [dataset.load(e) for e in dataset.split_entries("train")]
    val_snaps = [dataset.load(e) for e in dataset.split_entries("test")]
    train_cfg = TrainConfig(
        learning_rate=p["learning-rate"],
        batch_size=p["batch-size"],
        epochs=p["epochs"],
        seed=p["seed"],
    )
    model_cfg = AutoencoderConfig(
        latent_dim=p["latent-dim"],
        channels=train_snaps[0].channels,
        fourier_scale=p["fourier-scale"],
        init_seed=p["seed"],
    )
    model, history = train_fae(
        train_snaps,
        p["r-enc"],
        train_cfg,
        model_cfg,
        beta=p["beta"],
        val_snapshots=val_snaps,
        max_val_snapshots=p["val-snapshots"],
        max_decoder_points=p["max-decoder-points"] or None,
    )
    save_autoencoder(run_dir / "autoencoder", model, train_cfg)
    _write_csv(
        run_dir / "history.csv",
        ["epoch", "loss", "val_rmse"],
        [[row["epoch"], row["loss"], row["val_rmse"]] for row in history],
    )
    save_history_figure(run_dir / "plots" / "loss.png", history)
    write_config_snapshot(run_dir, p)
    write_run_manifest(run_dir, "train-fae", p, {"total_s": time.time() - t0})
    print(f"final val RMSE {history[-1]['val_rmse']:.5f}; checkpoint at {run_dir / 'autoencoder'}")
    return 0


_TRAIN_CDM_SPEC = {
    "dataset": (str, None),
    "fae": (str, None),
    "out": (str, None),
    "steps": (int, 1000),
    "epochs": (int, 0),  # 0 = derive from steps
    "batch-size": (int, 16),
    "learning-rate": (float, 2e-4),
    "train-ratio": (float, 0.005),
    "timesteps": (int, 1000),
    "beta-min": (float, 1e-4),
    "beta-max": (float, 0.02),
    "sigma-sq": (float, 10000.0),
    "mode": (str, "mcg"),
    "widths": (str, "32,64,128"),
    "seed": (int, 0),
}


def _load_fae_checkpoint(path: str):
    root = Path(path)
    for candidate in (root, root / "autoencoder"):
        if (candidate / "checkpoint.json").is_file():
            return load_autoencoder(candidate)
    raise FieldCascadeError(f"missing autoencoder checkpoint under {root}")


def cmd_train_cdm(args) -> int:
    t0 = time.time()
    p = _resolve_params(args, _TRAIN_CDM_SPEC)
    run_dir = _make_run_dir(p["out"])
    dataset = load_dataset(p["dataset"])
    train_snaps = [dataset.load(e) for e in dataset.split_entries("train")]
    fae = _load_fae_checkpoint(p["fae"])

    steps_per_epoch = max(1, (len(train_snaps) + p["batch-size"] - 1) // p["batch-size"])
    epochs = p["epochs"] if p["epochs"] > 0 else max(1, round(p["steps"] / steps_per_epoch))
    train_cfg = TrainConfig(
        learning_rate=p["learning-rate"],
        batch_size=p["batch-size"],
        epochs=epochs,
        seed=p["seed"],
    )
    schedule = make_schedule(p["timesteps"], p["beta-min"], p["beta-max"])
    widths = tuple(int(w) for w in p["widths"].split(","))
    net = ConditionalDenoiser(
        DenoiserConfig(channels=train_snaps[0].channels, widths=widths, init_seed=p["seed"])
    )
    cascade_cfg = CascadeConfig(
        train_ratio=p["train-ratio"],
        guidance=GuidanceConfig(sigma_sq=p["sigma-sq"], mode=p["mode"]),
    )
    history, scale = mask_cascade_train(train_snaps, fae, net, schedule, cascade_cfg, train_cfg)
    bundle = CascadeBundle(
        fae=fae, net=net, schedule=schedule, config=cascade_cfg, residual_scale=scale
    )
    save_cascade_bundle(run_dir, bundle)
    _write_csv(
        run_dir / "history.csv",
        ["epoch", "loss"],
        [[i, loss] for i, loss in enumerate(history)],
    )
    save_history_figure(run_dir / "plots" / "loss.png", [{"epoch": i, "loss": v} for i, v in enumerate(history)])
    write_config_snapshot(run_dir, p)
    write_run_manifest(run_dir, "train-cdm", p, {"total_s": time.time() - t0})
    print(f"trained {epochs} epochs; residual scale {scale:.5f}; bundle at {run_dir}")
    return 0


_RECONSTRUCT_SPEC = {
    "bundle": (str, None),
    "dataset": (str, None),
    "snapshot": (str, ""),
    "ratio": (float, 0.005),
    "mask-seed": (int, 0),
    "seed": (int, 0),
    "mode": (str, ""),
    "sigma-sq": (float, 0.0),  # 0 = bundle default
    "out": (str, None),
}


def _guidance_override(bundle: CascadeBundle, mode: str, sigma_sq: float) -> GuidanceConfig:
    base = bundle.config.guidance
    return GuidanceConfig(
        sigma_sq=sigma_sq if sigma_sq > 0 else base.sigma_sq,
        mode=mode if mode else base.mode,
        grad_through_network=base.grad_through_network,
    )


def cmd_reconstruct(args) -> int:
    t0 = time.time()
    p = _resolve_params(args, _RECONSTRUCT_SPEC)
    run_dir = _make_run_dir(p["out"])
    bundle = load_cascade_bundle(p["bundle"])
    dataset = load_dataset(p["dataset"])
    entry, snap = _pick_snapshot(dataset, p["snapshot"] or None)
    guidance = _guidance_override(bundle, p["mode"], p["sigma-sq"])

    mask = random_mask(snap.grid, snap.validity, p["ratio"], p["mask-seed"])
    obs = apply_mask(snap, mask)
    result = bundle.reconstruct(obs, snap.grid, snap.validity, p["seed"], truth=snap, guidance=guidance)

    fields_dir = run_dir / "fields"
    for name, values in (
        ("full", result.full),
        ("principal", result.principal),
        ("detail", result.detail),
        ("truth", snap.values),
    ):
        save_snapshot(FieldSnapshot(grid=snap.grid, values=values, validity=snap.validity), fields_dir / name)
    _write_csv(
        run_dir / "metrics.csv",
        ["snapshot", "ratio", "mask_seed", "sample_seed", "rmse", "observed_mean_abs_residual"],
        [[entry.snapshot_id, p["ratio"], p["mask-seed"], p["seed"], result.rmse, result.observed_mean_abs_residual]],
    )
    save_field_figure(
        run_dir / "plots" / "reconstruction.png",
        [
            ("truth", snap.values),
            ("principal", result.principal),
            ("detail", result.detail),
            ("reconstruction", result.full),
        ],
        snap.grid,
        snap.validity,
    )
    write_config_snapshot(run_dir, p)
    write_run_manifest(run_dir, "reconstruct", p, {"total_s": time.time() - t0})
    print(f"rmse {result.rmse:.5f} at ratio {p['ratio']} on {entry.snapshot_id}")
    return 0


_SWEEP_SPEC = {
    "bundle": (str, None),
    "dataset": (str, None),
    "snapshot": (str, ""),
    "ratios": (str, "0.001,0.005,0.01,0.03,0.05"),
    "masks-per-ratio": (int, 1),
    "samples-per-mask": (int, 100),
    "mask-seed-base": (int, 1000),
    "sample-seed-base": (int, 5000),
    "mode": (str, ""),
    "sigma-sq": (float, 0.0),
    "out": (str, None),
}


def cmd_sweep(args) -> int:
    t0 = time.time()
    p = _resolve_params(args, _SWEEP_SPEC)
    run_dir = _make_run_dir(p["out"])
    bundle = load_cascade_bundle(p["bundle"])
    dataset = load_dataset(p["dataset"])
    entry, snap = _pick_snapshot(dataset, p["snapshot"] or None)
    guidance = _guidance_override(bundle, p["mode"], p["sigma-sq"])
    ratios = _ratio_list(p["ratios"])

    rows, timing_rows = [], []
    rmse_by_ratio: dict[float, list[float]] = {r: [] for r in ratios}
    for ri, ratio in enumerate(ratios):
        for j in range(p["masks-per-ratio"]):
            mask_seed = p["mask-seed-base"] + ri * p["masks-per-ratio"] + j
            mask = random_mask(snap.grid, snap.validity, ratio, mask_seed)
            obs = apply_mask(snap, mask)
            principal = None
            for k in range(p["samples-per-mask"]):
                sample_seed = (
                    p["sample-seed-base"]
                    + (ri * p["masks-per-ratio"] + j) * p["samples-per-mask"]
                    + k
                )
                t_start = time.time()
                result = reconstruct(
                    obs,
                    snap.grid,
                    snap.validity,
                    bundle.fae,
                    bundle.net,
                    bundle.schedule,
                    guidance,
                    bundle.residual_scale,
                    sample_seed,
                    truth=snap,
                    principal=principal,
                )
                principal = result.principal
                elapsed = time.time() - t_start
                rows.append(
                    [ratio, mask_seed, sample_seed, result.rmse, result.observed_mean_abs_residual]
                )
                timing_rows.append([ratio, mask_seed, sample_seed, elapsed])
                rmse_by_ratio[ratio].append(result.rmse)

    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    timing_rows.sort(key=lambda r: (r[0], r[1], r[2]))
    _write_csv(
        run_dir / "metrics.csv",
        ["ratio", "mask_seed", "sample_seed", "rmse", "observed_mean_abs_residual"],
        rows,
    )
    _write_csv(run_dir / "timings.csv", ["ratio", "mask_seed", "sample_seed", "wall_time_s"], timing_rows)

    curves = {}
    summary_rows = []
    for ratio in ratios:
        samples = np.array(rmse_by_ratio[ratio])
        grid_pts, density = kde_rmse(samples)
        curves[ratio] = (grid_pts, density)
        _write_csv(
            run_dir / f"kde_{ratio:g}.csv",
            ["rmse", "density"],
            [[float(g), float(d)] for g, d in zip(grid_pts, density)],
        )
        summary_rows.append(
            [ratio, float(samples.mean()), float(samples.std(ddof=1) if samples.size > 1 else 0.0), samples.size]
        )
    _write_csv(run_dir / "summary.csv", ["ratio", "mean_rmse", "std_rmse", "n"], summary_rows)
    save_kde_figure(run_dir / "plots" / "kde.png", curves, "reconstruction RMSE")
    save_ratio_summary_figure(
        run_dir / "plots" / "rmse_vs_ratio.png",
        ratios,
        [r[1] for r in summary_rows],
        [r[2] for r in summary_rows],
    )
    write_config_snapshot(run_dir, p)
    write_run_manifest(run_dir, "sweep", p, {"total_s": time.time() - t0})
    print(f"swept {len(rows)} reconstructions on {entry.snapshot_id}; outputs in {run_dir}")
    return 0


_EVAL_FAE_SPEC = {
    "fae": (str, None),
    "dataset": (str, None),
    "snapshot": (str, ""),
    "ratios": (str, "0.005,0.01,0.03,0.1,0.5"),
    "masks-per-ratio": (int, 100),
    "mask-seed-base": (int, 1000),
    "out": (str, None),
}


def cmd_eval_fae(args) -> int:
    t0 = time.time()
    p = _resolve_params(args, _EVAL_FAE_SPEC)
    run_dir = _make_run_dir(p["out"])
    model = _load_fae_checkpoint(p["fae"])
    dataset = load_dataset(p["dataset"])
    entry, snap = _pick_snapshot(dataset, p["snapshot"] or None)
    ratios = _ratio_list(p["ratios"])

    rows = []
    rmse_by_ratio: dict[float, list[float]] = {r: [] for r in ratios}
    for ri, ratio in enumerate(ratios):
        observations, masks = [], []
        for j in range(p["masks-per-ratio"]):
            mask_seed = p["mask-seed-base"] + ri * p["masks-per-ratio"] + j
            mask = random_mask(snap.grid, snap.validity, ratio, mask_seed)
            masks.append(mask)
            observations.append(apply_mask(snap, mask))
        # batched evaluation over masks; one snapshot repeated
        recon = principal_batch(model, [snap] * len(observations), observations)
        for mask, rec in zip(masks, recon):
            value = rmse(rec, snap.values, snap.validity)
            rows.append([ratio, mask.seed, value])
            rmse_by_ratio[ratio].append(value)

    rows.sort(key=lambda r: (r[0], r[1]))
    _write_csv(run_dir / "metrics.csv", ["ratio", "mask_seed", "rmse"], rows)
    curves, summary_rows = {}, []
    for ratio in ratios:
        samples = np.array(rmse_by_ratio[ratio])
        grid_pts, density = kde_rmse(samples)
        curves[ratio] = (grid_pts, density)
        _write_csv(
            run_dir / f"kde_{ratio:g}.csv",
            ["rmse", "density"],
            [[float(g), float(d)] for g, d in zip(grid_pts, density)],
        )
        summary_rows.append(
            [ratio, float(samples.mean()), float(samples.std(ddof=1) if samples.size > 1 else 0.0), samples.size]
        )
    _write_csv(run_dir / "summary.csv", ["ratio", "mean_rmse", "std_rmse", "n"], summary_rows)
    save_kde_figure(run_dir / "plots" / "kde_fae.png", curves, "principal-structure RMSE")
    save_ratio_summary_figure(
        run_dir / "plots" / "rmse_vs_ratio.png",
        ratios,
        [r[1] for r in summary_rows],
        [r[2] for r in summary_rows],
    )
    write_config_snapshot(run_dir, p)
    write_run_manifest(run_dir, "eval-fae", p, {"total_s": time.time() - t0})
    print(f"evaluated {len(rows)} masks on {entry.snapshot_id}; outputs in {run_dir}")
    return 0


_EXPORT_SPEC = {
    "fae": (str, None),
    "dataset": (str, None),
    "split": (str, "all"),
    "out": (str, None),
}


def cmd_export_latents(args) -> int:
    t0 = time.time()
    p = _resolve_params(args, _EXPORT_SPEC)
    run_dir = _make_run_dir(p["out"])
    model = _load_fae_checkpoint(p["fae"])
    dataset = load_dataset(p["dataset"])
    if p["split"] == "all":
        items = [(e.snapshot_id, dataset.load(e)) for e in dataset.entries]
    else:
        items = dataset_snapshots(dataset, p["split"])
    ids, _ = export_latents(items, model, run_dir / "latents.csv")
    write_config_snapshot(run_dir, p)
    write_run_manifest(run_dir, "export-latents", p, {"total_s": time.time() - t0})
    print(f"exported {len(ids)} latent vectors to {run_dir / 'latents.csv'}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fieldcascade", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, spec, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="flat key=value config file")
        for key, (cast, default) in spec.items():
            required = default is None
            sp.add_argument(
                f"--{key}",
                type=_str2bool if cast is bool else cast,
                default=None,
                required=required,
                help=f"default: {default}" if not required else "required",
            )
        sp.set_defaults(handler=handler)

    add("gen-data", cmd_gen_data, _GEN_SPEC, "generate a synthetic wake dataset")
    add("train-fae", cmd_train_fae, _TRAIN_FAE_SPEC, "train the functional autoencoder")
    add("train-cdm", cmd_train_cdm, _TRAIN_CDM_SPEC, "mask-cascade train the diffusion model")
    add("reconstruct", cmd_reconstruct, _RECONSTRUCT_SPEC, "reconstruct one masked snapshot")
    add("sweep", cmd_sweep, _SWEEP_SPEC, "sparsity sweep with RMSE KDEs")
    add("eval-fae", cmd_eval_fae, _EVAL_FAE_SPEC, "autoencoder-only sparsity evaluation")
    add("export-latents", cmd_export_latents, _EXPORT_SPEC, "dump latent vectors to CSV")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except (FieldCascadeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
