"""Attention-based depth prediction network, refinement network, and losses.

Both networks are encoder-decoders with skip connections, built from the
tensor module's autodiff ops. Widths are toy-scale by default (trainable on
CPU in minutes) but fully configurable.

Parameter count scales quadratically in `base_channels` b:
    count(b) = A*b^2 + B*b + C
with A/B/C determined by the layer wiring (conv kernels contribute the b^2
term, batch-norm affines and input stems the linear term, the spatial
attention convolution the constant).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ConvSpec, Tensor


# ---------------------------------------------------------------------------
# Parameter store


class ParamStore:
    """Named trainable tensors plus batch-norm layers, checkpointable."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.bns: dict[str, T.BatchNormParams] = {}

    def param(self, name, array) -> Tensor:
        if name in self.tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = T.Tensor(array)
        t.requires_grad = True
        self.tensors[name] = t
        return t

    def bn(self, name, channels, dtype) -> T.BatchNormParams:
        p = T.BatchNormParams.create(channels, dtype=dtype)
        self.bns[name] = p
        self.tensors[name + ".gamma"] = p.gamma
        self.tensors[name + ".beta"] = p.beta
        return p

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def num_parameters(self):
        return sum(t.data.size for t in self.tensors.values())

    def state_arrays(self) -> dict:
        out = {name: t.data for name, t in self.tensors.items()}
        for name, bn in self.bns.items():
            out[name + ".running_mean"] = bn.running_mean
            out[name + ".running_var"] = bn.running_var
        return out

    def load_state(self, arrays: dict):
        for name, t in self.tensors.items():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            if arrays[name].shape != t.data.shape:
                raise ValueError(f"checkpoint shape {arrays[name].shape} != {t.data.shape} for {name!r}")
            t.data = arrays[name].astype(t.data.dtype)
        for name, bn in self.bns.items():
            bn.running_mean = arrays[name + ".running_mean"].astype(bn.running_mean.dtype)
            bn.running_var = arrays[name + ".running_var"].astype(bn.running_var.dtype)


def _he_init(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


# ---------------------------------------------------------------------------
# Layers


class Conv:
    """Conv (or transposed conv) + optional batch norm + ReLU."""

    def __init__(self, store, rng, name, ic, oc, k=3, stride=1, pad=1,
                 transposed=False, bn=True, act="relu", dtype=np.float64):
        self.spec = ConvSpec(ic, oc, (k, k), stride, pad, transposed)
        wshape = (ic, oc, k, k) if transposed else (oc, ic, k, k)
        self.w = store.param(name + ".w", _he_init(rng, wshape, ic * k * k, dtype))
        self.bn = store.bn(name + ".bn", oc, dtype) if bn else None
        self.bias = None if bn else store.param(name + ".b", np.zeros((1, oc, 1, 1), dtype=dtype))
        self.act = act

    def __call__(self, x, mode="train"):
        y = T.deconv2d(x, self.w, self.spec) if self.spec.transposed else T.conv2d(x, self.w, self.spec)
        if self.bn is not None:
            y = T.batchnorm(y, self.bn, mode)
        else:
            y = T.add(y, self.bias)
        if self.act == "relu":
            y = T.relu(y)
        return y


class ResBlock:
    """Two 3x3 convs with a projection shortcut; first conv carries the stride."""

    def __init__(self, store, rng, name, ic, oc, stride, dtype):
        self.c1 = Conv(store, rng, name + ".c1", ic, oc, stride=stride, dtype=dtype)
        self.c2 = Conv(store, rng, name + ".c2", oc, oc, act=None, dtype=dtype)
        self.proj = None
        if stride != 1 or ic != oc:
            self.proj = Conv(store, rng, name + ".proj", ic, oc, k=1, stride=stride, pad=0, act=None, dtype=dtype)

    def __call__(self, x, mode="train"):
        y = self.c2(self.c1(x, mode), mode)
        s = self.proj(x, mode) if self.proj is not None else x
        return T.relu(T.add(y, s))


class Cbam:
    """Channel-then-spatial attention gate (sequential, multiplicative)."""

    def __init__(self, store, rng, name, channels, reduction=4, spatial_kernel=7, dtype=np.float64):
        if channels < reduction:
            raise T.ShapeError(f"CBAM needs channels >= reduction, got {channels} < {reduction}")
        mid = channels // reduction
        self.fc1 = Conv(store, rng, name + ".fc1", channels, mid, k=1, pad=0, bn=False, act="relu", dtype=dtype)
        self.fc2 = Conv(store, rng, name + ".fc2", mid, channels, k=1, pad=0, bn=False, act=None, dtype=dtype)
        self.spatial = Conv(store, rng, name + ".sp", 2, 1, k=spatial_kernel, pad=spatial_kernel // 2,
                            bn=False, act=None, dtype=dtype)

    def __call__(self, x, mode="train"):
        # channel attention from pooled descriptors through the shared bottleneck
        avg = self.fc2(self.fc1(T.global_avg(x), mode), mode)
        mx = self.fc2(self.fc1(T.global_max(x), mode), mode)
        mc = T.sigmoid(T.add(avg, mx))
        xc = T.multiply(x, mc)
        # spatial attention from channelwise max / mean maps
        ms = T.sigmoid(self.spatial(T.concat([T.channel_max(xc), T.channel_mean(xc)], axis=1), mode))
        return T.multiply(xc, ms)


# ---------------------------------------------------------------------------
# Prediction network


# input plane name -> channel count (assembly order is fixed)
PLANE_CHANNELS = {
    "d_t": 1,
    "flow": 2,
    "d_warp_t": 1,
    "d_warp_tm1": 1,
    "d_agg": 1,
    "edges": 1,
}


@dataclass(frozen=True)
class PredictionNetConfig:
    base_channels: int = 16
    encoder_stages: int = 4  # stride-2 residual stages
    decoder_deconvs: int = 5
    use_cbam: bool = True
    use_aggregation: bool = True
    include_second_warp: bool = True
    use_edges: bool = True
    cbam_reduction: int = 4
    stem_channels_per_input: int = 2

    def __post_init__(self):
        if not 1 <= self.encoder_stages <= self.decoder_deconvs:
            raise ValueError(f"need 1 <= encoder_stages <= decoder_deconvs, got {self.encoder_stages}")

    def input_planes(self):
        names = ["d_t", "flow", "d_warp_t"]
        if self.include_second_warp:
            names.append("d_warp_tm1")
        if self.use_aggregation:
            names.append("d_agg")
        if self.use_edges:
            names.append("edges")
        return names


class PredictionNet:
    """Coarse dense-depth prediction from the stacked motion/context planes."""

    def __init__(self, cfg: PredictionNetConfig, seed=0, store=None, dtype=np.float64):
        self.cfg = cfg
        self.dtype = dtype
        self.store = store if store is not None else ParamStore()
        rng = np.random.default_rng(seed)
        st = self.store
        b = cfg.base_channels

        self.stems = {}
        for name in cfg.input_planes():
            self.stems[name] = Conv(st, rng, f"pred.stem.{name}", PLANE_CHANNELS[name],
                                    cfg.stem_channels_per_input, dtype=dtype)
        stem_total = cfg.stem_channels_per_input * len(self.stems)
        self.merge = Conv(st, rng, "pred.merge", stem_total, b, dtype=dtype)

        self.enc_widths = [b * (s + 1) for s in range(cfg.encoder_stages)]
        self.encoder = []
        ic = b
        for s, oc in enumerate(self.enc_widths):
            self.encoder.append(ResBlock(st, rng, f"pred.enc{s}", ic, oc, stride=2, dtype=dtype))
            ic = oc
        self.bottleneck = Conv(st, rng, "pred.neck", ic, ic, dtype=dtype)

        # decoder: one stride-2 deconv per encoder stage, stride-1 deconvs after,
        # then a 1x1 head. Skip concat (+ optional CBAM) after every upsample.
        skip_chs = [b] + self.enc_widths[:-1]  # same-size encoder features, full res first
        self.decoder = []
        self.cbams = []
        ch = ic
        for d in range(cfg.decoder_deconvs):
            up = d < cfg.encoder_stages
            oc = max(b, ch // 2) if up else b
            k, pad = (2, 0) if up else (3, 1)
            self.decoder.append(Conv(st, rng, f"pred.dec{d}", ch, oc, k=k, stride=2 if up else 1,
                                     pad=pad, transposed=True, dtype=dtype))
            ch = oc
            if up:
                ch += skip_chs[cfg.encoder_stages - 1 - d]
                if cfg.use_cbam:
                    self.cbams.append(Cbam(st, rng, f"pred.cbam{d}", ch, cfg.cbam_reduction, dtype=dtype))
                else:
                    self.cbams.append(None)
        self.head = Conv(st, rng, "pred.head", ch, 1, k=1, pad=0, bn=False, act=None, dtype=dtype)
        # start the softplus output near metric depth scale instead of ~0.7 m
        self.head.bias.data[:] = 3.0

    def _check_size(self, h, w):
        f = 2 ** self.cfg.encoder_stages
        if h % f or w % f:
            raise T.ShapeError(
                f"input {h}x{w} not divisible by 2^{self.cfg.encoder_stages}; "
                f"pad to {-(-h // f) * f}x{-(-w // f) * f}"
            )

    def forward(self, planes: dict, mode="train") -> Tensor:
        """planes: name -> (1, C, H, W) float arrays for the configured inputs."""
        names = self.cfg.input_planes()
        missing = [n for n in names if n not in planes]
        if missing:
            raise KeyError(f"missing input planes: {missing}")
        h, w = planes[names[0]].shape[2:]
        self._check_size(h, w)
        feats = [self.stems[n](T.Tensor(np.asarray(planes[n], dtype=self.dtype)), mode) for n in names]
        x = self.merge(T.concat(feats, axis=1), mode)

        skips = [x]
        for block in self.encoder:
            x = block(x, mode)
            skips.append(x)
        x = self.bottleneck(x, mode)

        for d, layer in enumerate(self.decoder):
            x = layer(x, mode)
            if d < self.cfg.encoder_stages:
                skip = skips[self.cfg.encoder_stages - 1 - d]
                x = T.concat([x, skip], axis=1)
                if self.cbams[d] is not None:
                    x = self.cbams[d](x, mode)
        return T.softplus(self.head(x, mode))


# ---------------------------------------------------------------------------
# Refinement network


@dataclass(frozen=True)
class RefineNetConfig:
    conv_layers: int = 5
    stride2_layers: int = 5  # how many of the 5 encoder convs downsample
    widths: tuple = (16, 16, 24, 24, 32)

    def __post_init__(self):
        if len(self.widths) != self.conv_layers:
            raise ValueError("widths must list one channel count per conv layer")
        if not 0 <= self.stride2_layers <= self.conv_layers:
            raise ValueError("stride2_layers out of range")


class RefineNet:
    """Sharpens the coarse depth under guidance of the future RGB frame."""

    def __init__(self, cfg: RefineNetConfig = RefineNetConfig(), seed=1, store=None, dtype=np.float64):
        self.cfg = cfg
        self.dtype = dtype
        self.store = store if store is not None else ParamStore()
        rng = np.random.default_rng(seed)
        st = self.store
        self.stem_d = Conv(st, rng, "ref.stem_d", 1, 4, dtype=dtype)
        self.stem_rgb = Conv(st, rng, "ref.stem_rgb", 3, 4, dtype=dtype)

        strides = [2] * cfg.stride2_layers + [1] * (cfg.conv_layers - cfg.stride2_layers)
        self.encoder = []
        ic = 8
        enc_out = []
        for i, (oc, s) in enumerate(zip(cfg.widths, strides)):
            self.encoder.append(Conv(st, rng, f"ref.enc{i}", ic, oc, stride=s, dtype=dtype))
            enc_out.append(oc)
            ic = oc
        self.strides = strides

        self.decoder = []
        ch = ic
        for i, s in enumerate(reversed(strides)):
            skip_ch = 8 if i == cfg.conv_layers - 1 else enc_out[cfg.conv_layers - 2 - i]
            oc = max(8, ch // 2)
            k, pad = (2, 0) if s == 2 else (3, 1)
            self.decoder.append(Conv(st, rng, f"ref.dec{i}", ch, oc, k=k, stride=s, pad=pad,
                                     transposed=True, dtype=dtype))
            ch = oc + skip_ch
        self.head = Conv(st, rng, "ref.head", ch, 1, k=1, pad=0, bn=False, act=None, dtype=dtype)
        self.head.bias.data[:] = 3.0

    def _check_size(self, h, w):
        f = 2 ** self.cfg.stride2_layers
        if h % f or w % f:
            raise T.ShapeError(
                f"input {h}x{w} not divisible by 2^{self.cfg.stride2_layers}; "
                f"pad to {-(-h // f) * f}x{-(-w // f) * f}"
            )

    def forward(self, coarse: Tensor, rgb: np.ndarray, mode="train") -> Tensor:
        """coarse: (1,1,H,W) Tensor; rgb: (H,W,3) array. Returns (1,1,H,W)."""
        h, w = coarse.shape[2:]
        if rgb.shape[:2] != (h, w):
            raise T.ShapeError(f"rgb {rgb.shape[:2]} does not match coarse depth {(h, w)}")
        self._check_size(h, w)
        rgb_t = T.Tensor(np.ascontiguousarray(rgb.transpose(2, 0, 1)[None]).astype(self.dtype))
        x = T.concat([self.stem_d(coarse, mode), self.stem_rgb(rgb_t, mode)], axis=1)
        skips = [x]
        for layer in self.encoder:
            x = layer(x, mode)
            skips.append(x)
        skips.pop()  # bottom feature is the decoder input, not a skip
        for layer in self.decoder:
            x = layer(x, mode)
            x = T.concat([x, skips.pop()], axis=1)
        return T.softplus(self.head(x, mode))


# ---------------------------------------------------------------------------
# Losses


@dataclass(frozen=True)
class LossConfig:
    lambda_coarse: float = 0.1
    lambda_refined: float = 0.9

    def __post_init__(self):
        if self.lambda_coarse < 0 or self.lambda_refined < 0:
            raise ValueError("loss weights must be non-negative")


def masked_l2(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Mean squared error over pixels where the sparse ground truth is valid."""
    g = np.asarray(gt, dtype=pred.dtype)
    if pred.shape[2:] != g.shape:
        raise T.ShapeError(f"prediction {pred.shape[2:]} vs ground truth {g.shape}")
    mask = (g > 0).astype(pred.dtype)
    n = mask.sum()
    if n == 0:
        warnings.warn("masked_l2 over zero valid pixels; loss defined as 0", RuntimeWarning)
        return T.scale(T.tsum(T.multiply(pred, T.Tensor(np.zeros_like(mask[None, None])))), 0.0)
    diff = T.subtract(pred, T.Tensor(g[None, None]))
    return T.scale(T.tsum(T.square(T.multiply(diff, T.Tensor(mask[None, None])))), 1.0 / n)


def total_loss(coarse: Tensor, refined: Tensor, gt: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    return T.add(T.scale(masked_l2(coarse, gt), cfg.lambda_coarse),
                 T.scale(masked_l2(refined, gt), cfg.lambda_refined))
