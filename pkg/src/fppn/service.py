"""HTTP service exposing the prediction side of the pipeline.

Endpoints operate on server-local paths (manifests, checkpoints, output
directories), so the service fronts the same on-disk formats the CLI uses.
Long-running batch jobs (training, ablation sweeps) stay on the CLI.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import dataio, metrics, pseudolidar
from .dataio import SampleIndex, load_sample
from .pipeline import EdgeParams, evaluate_model, predict_sample, warp_fill_baseline
from .synthscene import SceneSpec, write_dataset
from .train import load_checkpoint

app = FastAPI(title="fppn", description="Future dense-depth / pseudo-LiDAR prediction service")


class EdgeOptions(BaseModel):
    sigma: float = EdgeParams.sigma
    low: float = EdgeParams.low
    high: float = EdgeParams.high

    def to_params(self) -> EdgeParams:
        return EdgeParams(self.sigma, self.low, self.high)


class MetricsOut(BaseModel):
    rmse_mm: float
    mae_mm: float
    irmse_1perkm: float
    imae_1perkm: float
    valid_pixels: int

    @classmethod
    def from_report(cls, r: metrics.MetricReport) -> "MetricsOut":
        return cls(rmse_mm=r.rmse, mae_mm=r.mae, irmse_1perkm=r.irmse,
                   imae_1perkm=r.imae, valid_pixels=r.valid_pixel_count)


class SynthRequest(BaseModel):
    out_dir: str
    seed: int = 0
    n_train: int = 200
    n_val: int = 40
    width: int = 64
    height: int = 64
    sparsity: float = Field(default=0.08, gt=0, le=1)
    flow_noise_sigma: float = Field(default=1.5, ge=0)
    background_depth: float = 12.0


class SynthResponse(BaseModel):
    train_manifest: str
    val_manifest: str


class PredictRequest(BaseModel):
    manifest: str
    checkpoint: str
    out_dir: str
    use_refinement: bool = True
    edge: EdgeOptions = EdgeOptions()


class SampleResult(BaseModel):
    index: int
    depth_png: str
    ply: str
    points: int
    metrics: MetricsOut


class PredictResponse(BaseModel):
    results: list[SampleResult]


class EvalRequest(BaseModel):
    manifest: str
    checkpoint: str | None = None  # None evaluates the warp-fill baseline
    edge: EdgeOptions = EdgeOptions()


@app.get("/health")
def health():
    return {"status": "ok"}


def _load_index(manifest: str) -> SampleIndex:
    if not Path(manifest).is_file():
        raise HTTPException(status_code=404, detail=f"manifest not found: {manifest}")
    return SampleIndex.load(manifest)


def _load_model(checkpoint: str):
    if not Path(checkpoint).is_file():
        raise HTTPException(status_code=404, detail=f"checkpoint not found: {checkpoint}")
    try:
        return load_checkpoint(checkpoint)
    except (ValueError, KeyError) as exc:
        raise HTTPException(status_code=400, detail=f"bad checkpoint: {exc}")


@app.post("/synth", response_model=SynthResponse)
def synth(req: SynthRequest):
    try:
        spec = SceneSpec(width=req.width, height=req.height, background_depth=req.background_depth,
                         sparsity=req.sparsity, flow_noise_sigma=req.flow_noise_sigma, seed=req.seed)
        tm, vm = write_dataset(req.out_dir, spec, req.n_train, req.n_val)
    except ValueError as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    return SynthResponse(train_manifest=str(tm), val_manifest=str(vm))


@app.post("/predict", response_model=PredictResponse)
def predict(req: PredictRequest):
    idx = _load_index(req.manifest)
    _, pred_net, ref_net = _load_model(req.checkpoint)
    out_dir = Path(req.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ep = req.edge.to_params()
    results = []
    for i in range(len(idx)):
        sample = load_sample(idx, i)
        coarse, refined = predict_sample(pred_net, ref_net if req.use_refinement else None, sample, ep)
        depth = refined if req.use_refinement else coarse
        png = out_dir / f"sample_{i:04d}_depth.png"
        ply = out_dir / f"sample_{i:04d}.ply"
        png.write_bytes(dataio.encode_depth_png(depth))
        cloud = pseudolidar.backproject(depth, sample.intrinsics, rgb=sample.rgb_tp1)
        pseudolidar.export_ply(cloud, ply)
        results.append(SampleResult(index=i, depth_png=str(png), ply=str(ply), points=len(cloud),
                                    metrics=MetricsOut.from_report(metrics.evaluate(depth, sample.gt))))
    return PredictResponse(results=results)


@app.post("/evaluate", response_model=MetricsOut)
def evaluate(req: EvalRequest):
    idx = _load_index(req.manifest)
    samples = [load_sample(idx, i) for i in range(len(idx))]
    if req.checkpoint is None:
        rep = metrics.mean_report([metrics.evaluate(warp_fill_baseline(s), s.gt) for s in samples])
    else:
        _, pred_net, ref_net = _load_model(req.checkpoint)
        rep = evaluate_model(pred_net, ref_net, samples, req.edge.to_params())
    return MetricsOut.from_report(rep)
