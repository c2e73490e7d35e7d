"""DPS-Net building blocks and the end-to-end network.

Data flow for one image (all maps NCHW, C unified channels)::

    encoder -> 4 stage maps (stride 4/8/16/32)
      -> MFFM per stage -> DPS transformer per stage (X_a)
      -> boundary decoder (E_pred, stride 4)
      -> BFM per stage (X_f) -> FPN decoder -> I_pred (input resolution)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import MLP, Conv2d, Linear, Module, MultiHeadSelfAttention
from .tensor import Tensor

STRIDES = (4, 8, 16, 32)
MFFM_RATES = (6, 12, 18)


@dataclass(frozen=True)
class NetConfig:
    channels: int = 64
    patches: int = 12
    ref_points: int = 3
    offset_scale: float = 1.0
    stage_channels: tuple[int, ...] = (32, 64, 96, 128)
    input_size: tuple[int, int] = (384, 384)
    heads: int = 4
    # 0 means "same as channels"
    mlp_hidden: int = 0
    offset_hidden: int = 0
    normalized_global_pool: bool = False

    def __post_init__(self):
        h, w = self.input_size
        if h % 32 or w % 32:
            raise ValueError(f"input size {self.input_size} must be divisible by 32")
        if (h // 32) % self.patches or (w // 32) % self.patches:
            raise ValueError(
                f"stage-4 size {(h // 32, w // 32)} is not divisible by patches={self.patches}"
            )
        if self.channels % self.heads:
            raise ValueError(f"channels={self.channels} not divisible by heads={self.heads}")
        if len(self.stage_channels) != 4:
            raise ValueError("stage_channels needs exactly 4 entries")
        if self.ref_points < 1 or self.offset_scale < 0:
            raise ValueError("ref_points must be >= 1 and offset_scale >= 0")

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or self.channels

    def stage_size(self, stage: int) -> tuple[int, int]:
        h, w = self.input_size
        return h // STRIDES[stage], w // STRIDES[stage]


@dataclass(frozen=True)
class Ablation:
    """Which of the four contributed blocks are active (ablation rows a-g)."""

    mffm: bool = True
    dps: bool = True
    boundary_decoder: bool = True
    bfm: bool = True

    def __post_init__(self):
        if self.bfm and not self.boundary_decoder:
            raise ValueError("bfm needs the boundary decoder")

    @classmethod
    def row(cls, index: str) -> "Ablation":
        flags = {
            "a": (False, False, False, False),
            "b": (True, False, False, False),
            "c": (True, False, True, False),
            "d": (True, False, True, True),
            "e": (True, True, False, False),
            "f": (True, True, True, False),
            "g": (True, True, True, True),
        }[index]
        return cls(*flags)


def receptive_field(rates=MFFM_RATES, kernel: int = 3) -> int:
    """Receptive field along one axis of the sequential dilated path."""
    return 1 + sum((kernel - 1) * r for r in rates)


class MFFM(Module):
    """Project to C channels, then fuse dilated 3x3 branches sequentially (small to large rate)."""

    def __init__(self, rng, in_ch: int, channels: int, rates=MFFM_RATES, enabled: bool = True):
        self.proj = Conv2d(rng, in_ch, channels, kernel=1)
        self.enabled = enabled
        self.branches = [Conv2d(rng, channels, channels, 3, dilation=r) for r in rates] if enabled else []
        self.fuse = [Conv2d(rng, channels, channels, 1) for _ in rates] if enabled else []

    def forward(self, x):
        x = self.proj(x)
        for branch, fuse in zip(self.branches, self.fuse):
            x = fuse(x + T.gelu(branch(x)))
        return x


def global_templates(x, normalized: bool = False) -> Tensor:
    """Soft-region pooled templates, [N, C, C]; row i is the template of channel i.

    Each channel is turned into a spatial distribution by a softmax over its
    H*W positions; the template is the spatial mean of the whole feature map
    weighted by that distribution.  ``normalized`` divides by the weight sum
    (which is 1) instead of H*W.
    """
    n, c, h, w = x.shape
    flat = T.reshape(x, (n, c, h * w))
    regions = T.softmax(flat, axis=-1)
    tg = T.matmul(regions, T.swap_last(flat))
    return tg if normalized else tg * (1.0 / (h * w))


def reference_grid(patches: int, ref_points: int, patch_h: int, patch_w: int) -> np.ndarray:
    """Uniform reference points in pixel coordinates, [patches^2 * ref_points^2, 2] as (y, x).

    Point k of a patch sits at the center of cell k of an ref_points x ref_points
    split of the patch; integer arithmetic keeps lattice-aligned grids exact.
    """
    k = np.arange(ref_points)
    oy = (patch_h * (2 * k + 1) - ref_points) / (2 * ref_points)
    ox = (patch_w * (2 * k + 1) - ref_points) / (2 * ref_points)
    py = np.arange(patches) * patch_h
    px = np.arange(patches) * patch_w
    ys = py[:, None, None, None] + oy[None, None, :, None]
    xs = px[None, :, None, None] + ox[None, None, None, :]
    ys, xs = np.broadcast_arrays(ys, xs)
    grid = np.stack([ys, xs], axis=-1)
    return grid.reshape(patches * patches * ref_points * ref_points, 2).astype(np.float64)


class LocalExtractor(Module):
    """Deformable point sampling: N_r x N_r bounded-offset points per patch."""

    def __init__(self, rng, cfg: NetConfig):
        c = cfg.channels
        hidden = cfg.offset_hidden or c
        self.patches = cfg.patches
        self.ref_points = cfg.ref_points
        self.scale = cfg.offset_scale
        self.conv1 = Conv2d(rng, c, hidden, 3)
        self.conv2 = Conv2d(rng, hidden, 2, 3, zero_init=True)

    def offsets(self, x) -> Tensor:
        """Offset fields [N, Np^2, 2, Nr, Nr] in patch units, channel 0 = y, 1 = x."""
        n, c, h, w = x.shape
        npat, nr = self.patches, self.ref_points
        ph, pw = h // npat, w // npat
        tiles = T.reshape(x, (n, c, npat, ph, npat, pw)).transpose(0, 2, 4, 1, 3, 5)
        tiles = T.reshape(tiles, (n * npat * npat, c, ph, pw))
        field_ = self.conv2(T.gelu(self.conv1(tiles)))
        field_ = T.adaptive_avg_pool2d(field_, nr, nr)
        # tanh rounds to exactly +-1 for large inputs; one ulp below s keeps |offset| < s
        bound = float(np.nextafter(self.scale, 0.0))
        return T.reshape(T.tanh(field_) * bound, (n, npat * npat, 2, nr, nr))

    def forward(self, x, details: bool = False):
        n, c, h, w = x.shape
        npat, nr = self.patches, self.ref_points
        if h % npat or w % npat:
            raise ValueError(f"feature size {(h, w)} not divisible by patches={npat}")
        ph, pw = h // npat, w // npat
        offs = self.offsets(x)
        shift = T.reshape(offs.transpose(0, 1, 3, 4, 2), (n, npat * npat * nr * nr, 2))
        shift = shift * np.array([ph, pw], dtype=x.data.dtype)
        points = shift + reference_grid(npat, nr, ph, pw)
        samples = T.bilinear_sample(x, points)
        tl = T.reshape(samples, (n, c, npat * npat, nr * nr))
        if details:
            return tl, offs, points
        return tl


def attentive_pool(tokens, scorer: Linear, axis: int) -> Tensor:
    """Per-element softmax scores along ``axis`` followed by the weighted sum."""
    scores = T.softmax(scorer(tokens), axis=axis)
    return (scores * tokens).sum(axis=axis)


class Aggregator(Module):
    def __init__(self, rng, cfg: NetConfig):
        c, hid = cfg.channels, cfg.hidden
        self.attn_global = MultiHeadSelfAttention(rng, c, cfg.heads)
        self.attn_local = MultiHeadSelfAttention(rng, c, cfg.heads)
        self.pool_inter = Linear(rng, c, c, bias=False)
        self.pool_intra = Linear(rng, c, c, bias=False)
        self.mlp_global = MLP(rng, c, hid, c)
        self.mlp_inter = MLP(rng, c, hid, c)
        self.mlp_intra = MLP(rng, c, hid, c)
        self.value_inter = MLP(rng, c, hid, c)
        self.value_intra = MLP(rng, c, hid, c)
        self.mlp_out = MLP(rng, 2 * c, hid, c)

    def forward(self, tg, tl, details: bool = False):
        n, c, npp, nrr = tl.shape
        g = self.attn_global(tg)
        tokens = self.attn_local(T.reshape(tl, (n, c, npp * nrr)).transpose(0, 2, 1))
        tokens = T.reshape(tokens, (n, npp, nrr, c))
        inter = attentive_pool(tokens, self.pool_inter, axis=1)  # [N, Nr^2, C]
        intra = attentive_pool(tokens, self.pool_intra, axis=2)  # [N, Np^2, C]
        gm = self.mlp_global(g)
        s_inter = T.softmax(T.matmul(gm, T.swap_last(self.mlp_inter(inter))), axis=-1)
        s_intra = T.softmax(T.matmul(gm, T.swap_last(self.mlp_intra(intra))), axis=-1)
        ta_inter = T.matmul(s_inter, self.value_inter(inter))
        ta_intra = T.matmul(s_intra, self.value_intra(intra))
        ta = self.mlp_out(T.concat([ta_inter, ta_intra], axis=-1))
        if details:
            return ta, {
                "s_inter": s_inter,
                "s_intra": s_intra,
                "t_inter": inter,
                "t_intra": intra,
                "ta_inter": ta_inter,
                "ta_intra": ta_intra,
            }
        return ta


def correlation(ta, x) -> Tensor:
    """Apply each row of ``ta`` [N, C, C] as a 1x1 kernel over ``x`` [N, C, H, W]."""
    n, c, h, w = x.shape
    return T.reshape(T.matmul(ta, T.reshape(x, (n, c, h * w))), x.shape)


class CorrelationMap(Module):
    def __init__(self, rng, channels: int):
        self.fuse = Conv2d(rng, 2 * channels, channels, 1)

    def forward(self, ta, x, details: bool = False):
        ca = correlation(ta, x)
        xa = self.fuse(T.concat([ca, x], axis=1))
        return (xa, ca) if details else xa


class DPSTransformer(Module):
    def __init__(self, rng, cfg: NetConfig, enabled: bool = True):
        self.enabled = enabled
        self.normalized = cfg.normalized_global_pool
        if enabled:
            self.local = LocalExtractor(rng, cfg)
            self.aggregator = Aggregator(rng, cfg)
            self.correlation = CorrelationMap(rng, cfg.channels)

    def forward(self, x, details: bool = False):
        if not self.enabled:
            return (x, {}) if details else x
        tg = global_templates(x, self.normalized)
        tl, offs, points = self.local(x, details=True)
        ta, agg = self.aggregator(tg, tl, details=True)
        xa, ca = self.correlation(ta, x, details=True)
        if details:
            return xa, dict(agg, tg=tg, tl=tl, offsets=offs, points=points, ta=ta, ca=ca)
        return xa


class BoundaryDecoder(Module):
    def __init__(self, rng, channels: int, levels: int = 4):
        self.convs = [Conv2d(rng, channels, channels, 3) for _ in range(levels)]
        self.out = Conv2d(rng, levels * channels, 1, 3)

    def forward(self, feats) -> Tensor:
        th, tw = feats[0].shape[-2:]
        parts = [T.upsample_bilinear(T.gelu(conv(f)), th, tw) for conv, f in zip(self.convs, feats)]
        return T.sigmoid(self.out(T.concat(parts, axis=1)))


class BFM(Module):
    """Boundary fusion: boundary-weighted pooling drives a channel gate on X_a * E."""

    eps = 1e-8

    def __init__(self, rng, channels: int):
        self.mlp = MLP(rng, channels, channels, channels)
        self.fuse = Conv2d(rng, channels, channels, 1)

    def forward(self, xa, edge) -> Tensor:
        n, c, h, w = xa.shape
        e = T.upsample_bilinear(edge, h, w)
        xm = xa * e
        pooled = (xm * e).sum(axis=(2, 3)) / (e.sum(axis=(2, 3)) + self.eps)
        gate = T.reshape(T.sigmoid(self.mlp(pooled)), (n, c, 1, 1))
        return self.fuse(gate * xm + xa)


class BoundaryConcat(Module):
    """Fallback when the boundary decoder runs without BFM: concat E and project."""

    def __init__(self, rng, channels: int):
        self.fuse = Conv2d(rng, channels + 1, channels, 1)

    def forward(self, xa, edge) -> Tensor:
        h, w = xa.shape[-2:]
        return self.fuse(T.concat([xa, T.upsample_bilinear(edge, h, w)], axis=1))


class Encoder(Module):
    """Plain 4-stage CNN with outputs at strides 4/8/16/32."""

    def __init__(self, rng, stage_channels=(32, 64, 96, 128)):
        c1 = stage_channels[0]
        self.stem = [
            Conv2d(rng, 3, max(c1 // 2, 1), 3, stride=2),
            Conv2d(rng, max(c1 // 2, 1), c1, 3, stride=2),
            Conv2d(rng, c1, c1, 3),
        ]
        self.stages = [
            [Conv2d(rng, cin, cout, 3, stride=2), Conv2d(rng, cout, cout, 3)]
            for cin, cout in zip(stage_channels[:-1], stage_channels[1:])
        ]

    def forward(self, image) -> list[Tensor]:
        x = T.as_tensor(image) - 0.5
        for conv in self.stem:
            x = T.gelu(conv(x))
        feats = [x]
        for convs in self.stages:
            for conv in convs:
                x = T.gelu(conv(x))
            feats.append(x)
        return feats


class Decoder(Module):
    """Top-down FPN: upsample, add 1x1 lateral, smooth with 3x3; 1x1 head + sigmoid."""

    def __init__(self, rng, channels: int, levels: int = 4):
        self.lateral = [Conv2d(rng, channels, channels, 1) for _ in range(levels - 1)]
        self.smooth = [Conv2d(rng, channels, channels, 3) for _ in range(levels - 1)]
        self.head = Conv2d(rng, channels, 1, 1)

    def forward(self, feats, out_h: int, out_w: int) -> Tensor:
        p = feats[-1]
        for i in reversed(range(len(feats) - 1)):
            h, w = feats[i].shape[-2:]
            p = T.upsample_bilinear(p, h, w) + self.lateral[i](feats[i])
            p = T.gelu(self.smooth[i](p))
        return T.sigmoid(T.upsample_bilinear(self.head(p), out_h, out_w))


@dataclass
class Prediction:
    mask: Tensor
    boundary: Tensor | None
    stages: dict = field(default_factory=dict)


class DPSNet(Module):
    def __init__(self, cfg: NetConfig, ablation: Ablation = Ablation(), seed: int = 0):
        rng = np.random.Generator(np.random.Philox(seed))
        c = cfg.channels
        self.cfg = cfg
        self.ablation = ablation
        self.encoder = Encoder(rng, cfg.stage_channels)
        self.mffm = [MFFM(rng, ch, c, enabled=ablation.mffm) for ch in cfg.stage_channels]
        self.dps = [DPSTransformer(rng, cfg, enabled=ablation.dps) for _ in STRIDES]
        self.boundary = BoundaryDecoder(rng, c) if ablation.boundary_decoder else None
        if ablation.bfm:
            self.fusion = [BFM(rng, c) for _ in STRIDES]
        elif ablation.boundary_decoder:
            self.fusion = [BoundaryConcat(rng, c) for _ in STRIDES]
        else:
            self.fusion = []
        self.decoder = Decoder(rng, c)

    def forward(self, image, keep_stages: bool = False) -> Prediction:
        image = T.as_tensor(image)
        if image.ndim == 3:
            image = T.reshape(image, (1,) + image.shape)
        n, ch, h, w = image.shape
        if ch != 3:
            raise ValueError(f"expected 3-channel images, got shape {image.shape}")
        if h % 32 or w % 32:
            raise ValueError(f"image size {(h, w)} must be divisible by 32")
        if self.ablation.dps and ((h // 32) % self.cfg.patches or (w // 32) % self.cfg.patches):
            raise ValueError(f"image size {(h, w)} does not tile into {self.cfg.patches} patches")
        feats = self.encoder(image)
        xa = [dps(mffm(f)) for mffm, dps, f in zip(self.mffm, self.dps, feats)]
        edge = self.boundary(xa) if self.boundary is not None else None
        xf = [fuse(x, edge) for fuse, x in zip(self.fusion, xa)] if self.fusion else xa
        mask = self.decoder(xf, h, w)
        stages = {"encoder": feats, "xa": xa, "xf": xf} if keep_stages else {}
        return Prediction(mask, edge, stages)
