"""Adaptive-moment training of the prediction + refinement networks.

One ParamStore holds both networks, so a single checkpoint captures the whole
model. Training is deterministic under a fixed seed: sample order, flip
coins, and weight init all come from seeded generators, and every numeric op
is schedule-independent.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataio import Sample
from .network import (LossConfig, ParamStore, PredictionNet, PredictionNetConfig,
                      RefineNet, RefineNetConfig, masked_l2, total_loss)
from .pipeline import EdgeParams, assemble_planes, flip_planes


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-5
    lr_half_every: int = 5  # epochs between halvings
    beta1: float = 0.9  # "momentum"
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    vertical_flip: bool = True
    seed: int = 0
    # With batch size 1, batch-norm normalizes each sample by its own spatial
    # statistics, which running averages cannot reproduce at inference. From
    # this epoch on, running statistics are frozen and forward passes use them
    # (eval mode), so the weights fine-tune against the exact normalization
    # applied at inference. None disables the phase.
    bn_freeze_after: int | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.lr_half_every < 1:
            raise ValueError("lr_half_every must be >= 1")
        if self.bn_freeze_after is not None and self.bn_freeze_after < 1:
            raise ValueError("bn_freeze_after must be >= 1 (need at least one epoch of statistics)")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * 0.5 ** (epoch // self.lr_half_every)


class Adam:
    """Adaptive-moment optimizer over a ParamStore."""

    def __init__(self, store: ParamStore, cfg: TrainConfig):
        self.store = store
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in store.tensors.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in store.tensors.items()}

    def step(self, lr: float):
        self.t += 1
        c = self.cfg
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name, p in self.store.tensors.items():
            g = p.grad
            if g is None:
                continue
            self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
            p.data = p.data - lr * (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + c.eps)


def build_model(pred_cfg: PredictionNetConfig, ref_cfg: RefineNetConfig = RefineNetConfig(), seed: int = 0):
    """Both networks over one shared parameter store."""
    store = ParamStore()
    pred = PredictionNet(pred_cfg, seed=seed, store=store)
    ref = RefineNet(ref_cfg, seed=seed + 1, store=store)
    return store, pred, ref


@dataclass
class TrainResult:
    store: ParamStore
    pred_net: PredictionNet
    ref_net: RefineNet
    log_rows: list  # (epoch, step, loss, coarse_part, refined_part, lr)
    final_epoch_loss: float


def train(samples: list, pred_cfg: PredictionNetConfig, train_cfg: TrainConfig = TrainConfig(),
          ref_cfg: RefineNetConfig = RefineNetConfig(), loss_cfg: LossConfig = LossConfig(),
          edge_params: EdgeParams = EdgeParams(), log_path=None, progress=None) -> TrainResult:
    """Optimize the combined masked loss over the dataset.

    `samples` is a list of loaded Sample tuples. A non-finite loss aborts
    with the offending sample index.
    """
    if not samples:
        raise ValueError("training requires a non-empty dataset")
    store, pred_net, ref_net = build_model(pred_cfg, ref_cfg, seed=train_cfg.seed)
    opt = Adam(store, train_cfg)
    rng = np.random.default_rng(train_cfg.seed + 0x5EED)

    # input planes are data-determined; assemble once, flip on the fly
    cached = [(assemble_planes(s, pred_cfg, edge_params), s.gt, s.rgb_tp1) for s in samples]

    rows = []
    step = 0
    epoch_loss = 0.0
    freeze = train_cfg.bn_freeze_after
    for epoch in range(train_cfg.epochs):
        lr = train_cfg.lr_at(epoch)
        mode = "eval" if freeze is not None and epoch >= freeze else "train"
        order = rng.permutation(len(cached))
        epoch_loss = 0.0
        for idx in order:
            planes, gt, rgb = cached[idx]
            if train_cfg.vertical_flip and rng.random() < 0.5:
                planes = flip_planes(planes)
                gt = gt[::-1].copy()
                rgb = rgb[::-1].copy()
            store.zero_grad()
            coarse = pred_net.forward(planes, mode=mode)
            refined = ref_net.forward(coarse, rgb, mode=mode)
            loss = total_loss(coarse, refined, gt, loss_cfg)
            val = float(loss.data)
            if not np.isfinite(val):
                raise RuntimeError(f"non-finite loss at sample index {idx} (epoch {epoch}, step {step})")
            loss.backward()
            opt.step(lr)
            c_part = float(masked_l2(T.Tensor(coarse.data), gt).data)
            r_part = float(masked_l2(T.Tensor(refined.data), gt).data)
            rows.append((epoch, step, val, c_part, r_part, lr))
            epoch_loss += val
            step += 1
        epoch_loss /= len(cached)
        if progress is not None:
            progress(epoch, epoch_loss, lr)

    if log_path is not None:
        header = "epoch,step,loss,coarse_l2,refined_l2,lr\n"
        body = "".join(f"{e},{s},{l!r},{c!r},{r!r},{lr!r}\n" for e, s, l, c, r, lr in rows)
        Path(log_path).write_text(header + body)
    return TrainResult(store, pred_net, ref_net, rows, epoch_loss)


# ---------------------------------------------------------------------------
# Checkpoint plumbing (model arrays + enough config to rebuild the nets)

_BOOL_FIELDS = ("use_cbam", "use_aggregation", "include_second_warp", "use_edges")


def save_checkpoint(path, store: ParamStore, pred_cfg: PredictionNetConfig,
                    ref_cfg: RefineNetConfig = RefineNetConfig()):
    arrays = dict(store.state_arrays())
    meta = [
        float(pred_cfg.base_channels), float(pred_cfg.encoder_stages), float(pred_cfg.decoder_deconvs),
        float(pred_cfg.cbam_reduction), float(pred_cfg.stem_channels_per_input),
    ] + [float(getattr(pred_cfg, f)) for f in _BOOL_FIELDS] + [
        float(ref_cfg.conv_layers), float(ref_cfg.stride2_layers),
    ] + [float(w) for w in ref_cfg.widths]
    arrays["meta.config"] = np.asarray(meta, dtype=np.float64)
    T.save_arrays(path, arrays)


def load_checkpoint(path):
    """Rebuild both networks from a checkpoint; returns (store, pred_net, ref_net)."""
    arrays = T.load_arrays(path)
    meta = arrays.pop("meta.config")
    pred_cfg = PredictionNetConfig(
        base_channels=int(meta[0]), encoder_stages=int(meta[1]), decoder_deconvs=int(meta[2]),
        cbam_reduction=int(meta[3]), stem_channels_per_input=int(meta[4]),
        **{f: bool(meta[5 + i]) for i, f in enumerate(_BOOL_FIELDS)},
    )
    ref_cfg = RefineNetConfig(conv_layers=int(meta[9]), stride2_layers=int(meta[10]),
                              widths=tuple(int(w) for w in meta[11:]))
    store, pred_net, ref_net = build_model(pred_cfg, ref_cfg)
    store.load_state(arrays)
    return store, pred_net, ref_net
