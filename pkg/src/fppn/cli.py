"""Command-line entry point wiring all pipeline stages end to end.

Configuration can come from a simple key=value text file (--config); flags
given on the command line win over file values. Exit codes: 0 success,
1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import dataio, metrics, pseudolidar
from .dataio import SampleIndex, load_sample
from .network import LossConfig, PredictionNetConfig, RefineNetConfig
from .pipeline import EdgeParams, evaluate_model, predict_sample, warp_fill_baseline
from .synthscene import SceneSpec, write_dataset
from .train import TrainConfig, build_model, load_checkpoint, save_checkpoint, train


def _parse_kv_file(path):
    """key=value per line; '#' comments and blank lines ignored."""
    out = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise click.UsageError(f"{path}:{ln}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _merged(config_file, **flags):
    """File values fill in flags the user left unset (None)."""
    merged = dict(flags)
    if config_file:
        file_vals = _parse_kv_file(config_file)
        for k, v in file_vals.items():
            key = k.replace("-", "_")
            if merged.get(key) is None:
                merged[key] = v
    return merged


def _load_samples(manifest):
    idx = SampleIndex.load(manifest)
    return [load_sample(idx, i) for i in range(len(idx))]


def _toggles(f):
    for opt in (
        click.option("--aggregation/--no-aggregation", "use_aggregation", default=True, show_default=True),
        click.option("--edges/--no-edges", "use_edges", default=True, show_default=True),
        click.option("--cbam/--no-cbam", "use_cbam", default=True, show_default=True),
        click.option("--second-warp/--no-second-warp", "include_second_warp", default=True, show_default=True),
    ):
        f = opt(f)
    return f


def _edge_opts(f):
    for opt in (
        click.option("--edge-sigma", type=float, default=EdgeParams.sigma, show_default=True),
        click.option("--edge-low", type=float, default=EdgeParams.low, show_default=True),
        click.option("--edge-high", type=float, default=EdgeParams.high, show_default=True),
    ):
        f = opt(f)
    return f


@click.group()
def main():
    """Future dense-depth / pseudo-LiDAR prediction pipeline."""


# ---------------------------------------------------------------------------


@main.command()
@click.option("--out", required=True, type=click.Path(), help="Dataset output directory.")
@click.option("--config", "config_file", type=click.Path(exists=True), help="SceneSpec key=value file.")
@click.option("--seed", type=int, default=None)
@click.option("--n-train", type=int, default=None)
@click.option("--n-val", type=int, default=None)
@click.option("--width", type=int, default=None)
@click.option("--height", type=int, default=None)
@click.option("--sparsity", type=float, default=None)
@click.option("--flow-noise-sigma", type=float, default=None)
@click.option("--background-depth", type=float, default=None)
def synth(out, config_file, **flags):
    """Render a synthetic dataset and its manifests."""
    vals = _merged(config_file, **flags)
    spec_kwargs = {}
    for key, cast in (("seed", int), ("width", int), ("height", int), ("sparsity", float),
                      ("flow_noise_sigma", float), ("background_depth", float)):
        if vals.get(key) is not None:
            spec_kwargs[key] = cast(vals[key])
    try:
        spec = SceneSpec(**spec_kwargs)
    except ValueError as exc:
        raise click.UsageError(f"invalid scene spec: {exc}")
    n_train = int(vals["n_train"]) if vals.get("n_train") is not None else 200
    n_val = int(vals["n_val"]) if vals.get("n_val") is not None else 40
    tm, vm = write_dataset(out, spec, n_train, n_val)
    click.echo(f"wrote {n_train} train / {n_val} val samples")
    click.echo(f"train manifest: {tm}")
    click.echo(f"val manifest: {vm}")


# ---------------------------------------------------------------------------


@main.command("train")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(), help="Checkpoint output path.")
@click.option("--config", "config_file", type=click.Path(exists=True))
@click.option("--epochs", type=int, default=None, help="Default 30.")
@click.option("--lr", type=float, default=None, help="Default 1e-5, halved every 5 epochs.")
@click.option("--seed", type=int, default=None)
@click.option("--no-flip", is_flag=True, help="Disable vertical-flip augmentation.")
@click.option("--bn-freeze-after", type=int, default=None,
              help="Epoch after which batch-norm statistics freeze and training "
                   "continues against them (recommended ~2/3 of the budget).")
@click.option("--log", "log_path", type=click.Path(), default=None, help="Training log CSV.")
@_toggles
@_edge_opts
def cmd_train(manifest, out, config_file, epochs, lr, seed, no_flip, bn_freeze_after, log_path,
              use_aggregation, use_edges, use_cbam, include_second_warp,
              edge_sigma, edge_low, edge_high):
    """Train the prediction + refinement networks and write a checkpoint."""
    vals = _merged(config_file, epochs=epochs, lr=lr, seed=seed, bn_freeze_after=bn_freeze_after)
    tc = TrainConfig(
        epochs=int(vals["epochs"]) if vals["epochs"] is not None else 30,
        learning_rate=float(vals["lr"]) if vals["lr"] is not None else TrainConfig.learning_rate,
        seed=int(vals["seed"]) if vals["seed"] is not None else 0,
        vertical_flip=not no_flip,
        bn_freeze_after=int(vals["bn_freeze_after"]) if vals["bn_freeze_after"] is not None else None,
    )
    pc = PredictionNetConfig(use_aggregation=use_aggregation, use_edges=use_edges,
                             use_cbam=use_cbam, include_second_warp=include_second_warp)
    ep = EdgeParams(edge_sigma, edge_low, edge_high)
    samples = _load_samples(manifest)
    try:
        if tc.epochs == 0:
            store, _, _ = build_model(pc, seed=tc.seed)
            save_checkpoint(out, store, pc)
            click.echo(f"wrote initialized checkpoint (no training steps): {out}")
            return
        res = train(samples, pc, tc, edge_params=ep, log_path=log_path,
                    progress=lambda e, l, r: click.echo(f"epoch {e}: loss {l:.5f} lr {r:.3g}"))
    except RuntimeError as exc:
        click.echo(f"training aborted: {exc}", err=True)
        sys.exit(1)
    save_checkpoint(out, res.store, pc)
    click.echo(f"wrote checkpoint: {out}")


# ---------------------------------------------------------------------------


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
@click.option("--no-refinement", is_flag=True, help="Emit the coarse head's output.")
@_edge_opts
def predict(manifest, checkpoint, out, no_refinement, edge_sigma, edge_low, edge_high):
    """Predict a depth PNG + pseudo-LiDAR PLY per sample, plus a summary CSV."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    store, pred_net, ref_net = load_checkpoint(checkpoint)
    ep = EdgeParams(edge_sigma, edge_low, edge_high)
    idx = SampleIndex.load(manifest)
    rows = ["sample,rmse_mm,mae_mm,irmse_1perkm,imae_1perkm,valid_pixels,points"]
    failures = 0
    for i in range(len(idx)):
        try:
            sample = load_sample(idx, i)
            coarse, refined = predict_sample(pred_net, ref_net if not no_refinement else None, sample, ep)
            depth = coarse if no_refinement else refined
            (out / f"sample_{i:04d}_depth.png").write_bytes(dataio.encode_depth_png(depth))
            cloud = pseudolidar.backproject(depth, sample.intrinsics, rgb=sample.rgb_tp1)
            pseudolidar.export_ply(cloud, out / f"sample_{i:04d}.ply")
            click.echo(f"sample {i}: {pseudolidar.summarize(cloud)}")
            rep = metrics.evaluate(depth, sample.gt)
            rows.append(f"{i},{rep.row()},{len(cloud)}")
        except Exception as exc:
            failures += 1
            click.echo(f"sample {i} failed: {exc}", err=True)
    (out / "summary.csv").write_text("\n".join(rows) + "\n")
    if failures:
        click.echo(f"{failures} sample(s) failed", err=True)
        sys.exit(1)


# ---------------------------------------------------------------------------


@main.command("eval")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", type=click.Path(exists=True), default=None,
              help="Omit to evaluate the non-learned warp-fill baseline.")
@click.option("--out", type=click.Path(), default=None, help="Write the report CSV here.")
@click.option("--rmse-gate", type=float, default=None,
              help="Exit 1 if RMSE (mm) exceeds this threshold.")
@_edge_opts
def cmd_eval(manifest, checkpoint, out, rmse_gate, edge_sigma, edge_low, edge_high):
    """Evaluate a checkpoint (or the warp-fill baseline) against ground truth."""
    samples = _load_samples(manifest)
    ep = EdgeParams(edge_sigma, edge_low, edge_high)
    if checkpoint:
        store, pred_net, ref_net = load_checkpoint(checkpoint)
        rep = evaluate_model(pred_net, ref_net, samples, ep)
        name = Path(checkpoint).name
    else:
        rep = metrics.mean_report([metrics.evaluate(warp_fill_baseline(s), s.gt) for s in samples])
        name = "warp-fill-baseline"
    table = metrics.compare([(name, rep)])
    click.echo(table, nl=False)
    if out:
        Path(out).write_text(table)
    if rmse_gate is not None and rep.rmse > rmse_gate:
        click.echo(f"RMSE {rep.rmse:.2f} mm exceeds gate {rmse_gate:.2f} mm", err=True)
        sys.exit(1)


# ---------------------------------------------------------------------------

ABLATION_ROWS = (
    # (label, use_aggregation, use_edges, use_cbam)
    ("baseline", False, False, False),
    ("+aggregation", True, False, False),
    ("+edge", False, True, False),
    ("+attention", False, False, True),
    ("full", True, True, True),
)


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True), help="Training manifest.")
@click.option("--val-manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(), help="Comparison CSV path.")
@click.option("--epochs", type=int, default=10, show_default=True)
@click.option("--lr", type=float, default=3e-3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def ablate(manifest, val_manifest, out, epochs, lr, seed):
    """Train every toggle row under one seed and budget; emit a ranked table."""
    tr = _load_samples(manifest)
    va = _load_samples(val_manifest)
    # freeze batch-norm statistics for the last third so validation numbers
    # reflect the normalization actually used at inference
    tc = TrainConfig(epochs=epochs, learning_rate=lr, seed=seed,
                     bn_freeze_after=max(1, (2 * epochs) // 3) if epochs > 1 else None)
    reports = []
    for label, agg, edges, cbam in ABLATION_ROWS:
        pc = PredictionNetConfig(use_aggregation=agg, use_edges=edges, use_cbam=cbam)
        try:
            res = train(tr, pc, tc)
        except RuntimeError as exc:
            click.echo(f"row {label!r} aborted: {exc}", err=True)
            sys.exit(1)
        rep = evaluate_model(res.pred_net, res.ref_net, va)
        click.echo(f"{label}: RMSE {rep.rmse:.2f} mm")
        reports.append((label, rep))
    table = metrics.compare(reports)
    Path(out).write_text(table)
    click.echo(table, nl=False)


# ---------------------------------------------------------------------------


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host, port):
    """Run the HTTP prediction service."""
    import uvicorn

    from .service import app

    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
