"""Central finite-difference checks for every differentiable op and block.

Each suite builder takes a seeded generator and returns ``(fn, tensors)``:
``fn()`` recomputes the output from ``tensors`` (inputs and parameters), and
the check compares the autodiff gradient of ``sum(fn() * R)`` for a fixed
random ``R`` with central differences on a sample of coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import blocks as B
from . import losses
from . import nn
from . import tensor as T
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    error: float
    coords: int

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``; plain ``||a - n||`` when both norms are tiny."""
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    return diff if scale < 1e-8 else diff / scale


def check(fn: Callable[[], Tensor], tensors: dict[str, Tensor], rng: np.random.Generator,
          per_tensor: int = 24, max_coords: int | None = None, step: float = STEP) -> tuple[float, int]:
    """Norm-wise relative error over all probed coordinates, and their count.

    The error is taken over the whole probed gradient vector rather than per
    tensor: some parameters (e.g. attention weights fed by spatially averaged
    templates) carry gradients near 1e-8, where the roundoff of a central
    difference at ``step`` is of the same order as the gradient itself.
    """
    for t in tensors.values():
        t.data = np.ascontiguousarray(t.data, dtype=np.float64)
        t.requires_grad = True
        t.grad = None
    out = fn()
    proj = rng.standard_normal(out.shape)
    (out * proj).sum().backward()

    picks = []
    for name, t in tensors.items():
        k = min(t.size, per_tensor)
        for i in rng.choice(t.size, size=k, replace=False):
            picks.append((name, int(i)))
    if max_coords is not None and len(picks) > max_coords:
        keep = np.sort(rng.choice(len(picks), size=max_coords, replace=False))
        picks = [picks[i] for i in keep]

    def loss() -> float:
        with T.no_grad():
            return float((fn().data * proj).sum())

    numeric, analytic = [], []
    for name, i in picks:
        t = tensors[name]
        flat = t.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        hi = loss()
        flat[i] = orig - step
        lo = loss()
        flat[i] = orig
        numeric.append((hi - lo) / (2.0 * step))
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        analytic.append(float(g.reshape(-1)[i]))
    return relative_error(np.array(analytic), np.array(numeric)), len(picks)


# -- suite builders -----------------------------------------------------------

def _t(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _away_from_zero(rng, *shape, gap=0.05) -> Tensor:
    a = rng.uniform(gap, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(a, requires_grad=True)


def _distinct(rng, *shape) -> Tensor:
    # values spaced >= 0.01 apart so max has no ties within the step
    n = int(np.prod(shape))
    vals = (rng.permutation(n) + rng.uniform(0.1, 0.9, size=n)) * (2.0 / n) - 1.0
    return Tensor(vals.reshape(shape), requires_grad=True)


def _unary(op, make=_t):
    def build(rng):
        x = make(rng, 3, 4)
        return (lambda: op(x)), {"x": x}
    return build


def _binary(op, positive_b=False):
    def build(rng):
        a = _t(rng, 2, 3, 4)
        b = _t(rng, 3, 1, lo=0.5, hi=1.5) if positive_b else _t(rng, 3, 1)
        return (lambda: op(a, b)), {"a": a, "b": b}
    return build


def _params(module: nn.Module, **inputs: Tensor) -> dict[str, Tensor]:
    out = dict(inputs)
    out.update(module.named_parameters())
    return out


def _randomize_offsets(local: B.LocalExtractor, rng) -> None:
    # the zero-initialised offset head would otherwise hide the sampling-point path
    w = local.conv2.weight
    w.data = rng.uniform(-0.3, 0.3, size=w.shape)


def toy_config(**overrides) -> B.NetConfig:
    kw = dict(channels=8, patches=2, ref_points=2, heads=2, stage_channels=(4, 8, 8, 8),
              input_size=(64, 64))
    kw.update(overrides)
    return B.NetConfig(**kw)


def _conv(stride, padding, dilation, bias=True):
    def build(rng):
        x = _t(rng, 2, 3, 7, 6)
        w = _t(rng, 4, 3, 3, 3)
        b = _t(rng, 4) if bias else None
        ts = {"x": x, "w": w}
        if bias:
            ts["b"] = b
        return (lambda: T.conv2d(x, w, b, stride, padding, dilation)), ts
    return build


def _conv1x1(rng):
    x = _t(rng, 2, 5, 4, 3)
    w = _t(rng, 3, 5, 1, 1)
    b = _t(rng, 3)
    return (lambda: T.conv2d(x, w, b)), {"x": x, "w": w, "b": b}


def _getitem_fancy(rng):
    x = _t(rng, 4, 5)
    idx = np.array([0, 2, 2, 3])
    return (lambda: x[idx, 1:4]), {"x": x}


def _concat(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 2, 1, 4)
    return (lambda: T.concat([a, b], axis=1)), {"a": a, "b": b}


def _split(rng):
    x = _t(rng, 2, 6, 3)
    return (lambda: T.concat(T.split(x, [1, 2, 3], axis=1)[::-1], axis=1) * T.concat(
        T.split(x, [4, 2], axis=1), axis=1)), {"x": x}


def _matmul(rng):
    a, b = _t(rng, 2, 1, 3, 4), _t(rng, 3, 4, 5)
    return (lambda: T.matmul(a, b)), {"a": a, "b": b}


def _matmul_vec_batch(rng):
    a, b = _t(rng, 3, 4), _t(rng, 2, 4, 2)
    return (lambda: a @ b), {"a": a, "b": b}


def _upsample(rng):
    x = _t(rng, 2, 3, 3, 4)
    return (lambda: T.upsample_bilinear(x, 7, 9)), {"x": x}


def _adaptive_pool(rng):
    x = _t(rng, 2, 3, 7, 5)
    return (lambda: T.adaptive_avg_pool2d(x, 3, 2)), {"x": x}


def _bilinear_sample(rng):
    x = _t(rng, 2, 3, 6, 5)
    # keep points off the integer lattice and inside the map so the check avoids kinks
    base = rng.integers(0, 4, size=(2, 7, 2)).astype(np.float64)
    pts = Tensor(base + rng.uniform(0.1, 0.9, size=(2, 7, 2)), requires_grad=True)
    return (lambda: T.bilinear_sample(x, pts)), {"feature": x, "points": pts}


def _linear(rng):
    m = nn.Linear(rng, 5, 3)
    x = _t(rng, 2, 4, 5)
    return (lambda: m(x)), _params(m, x=x)


def _mlp(rng):
    m = nn.MLP(rng, 4, 6, 3)
    x = _t(rng, 2, 5, 4)
    return (lambda: m(x)), _params(m, x=x)


def _mhsa(rng):
    m = nn.MultiHeadSelfAttention(rng, 8, 2)
    x = _t(rng, 2, 5, 8)
    return (lambda: m(x)), _params(m, x=x)


def _mffm(rng):
    m = B.MFFM(rng, 4, 8)
    x = _t(rng, 1, 4, 16, 16)
    return (lambda: m(x)), _params(m, x=x)


def _global_templates(normalized):
    def build(rng):
        x = _t(rng, 2, 8, 4, 4)
        return (lambda: B.global_templates(x, normalized)), {"x": x}
    return build


def _local_extractor(rng):
    m = B.LocalExtractor(rng, toy_config())
    _randomize_offsets(m, rng)
    x = _t(rng, 2, 8, 8, 8)
    return (lambda: m(x)), _params(m, x=x)


def _aggregator(rng):
    cfg = toy_config()
    m = B.Aggregator(rng, cfg)
    tg = _t(rng, 2, 8, 8)
    tl = _t(rng, 2, 8, 4, 4)
    return (lambda: m(tg, tl)), _params(m, tg=tg, tl=tl)


def _correlation_map(rng):
    m = B.CorrelationMap(rng, 8)
    ta = _t(rng, 2, 8, 8)
    x = _t(rng, 2, 8, 4, 4)
    return (lambda: m(ta, x)), _params(m, ta=ta, x=x)


def _dps_transformer(rng):
    m = B.DPSTransformer(rng, toy_config())
    _randomize_offsets(m.local, rng)
    x = _t(rng, 2, 8, 8, 8)
    return (lambda: m(x)), _params(m, x=x)


def _boundary_decoder(rng):
    m = B.BoundaryDecoder(rng, 8)
    feats = [_t(rng, 2, 8, 16 // s, 16 // s) for s in (1, 2, 4, 8)]
    return (lambda: m(feats)), _params(m, **{f"f{i}": f for i, f in enumerate(feats)})


def _bfm(rng):
    m = B.BFM(rng, 8)
    xa = _t(rng, 2, 8, 4, 4)
    edge = Tensor(rng.uniform(0.05, 0.95, size=(2, 1, 16, 16)), requires_grad=True)
    return (lambda: m(xa, edge)), _params(m, xa=xa, edge=edge)


def _boundary_concat(rng):
    m = B.BoundaryConcat(rng, 8)
    xa = _t(rng, 2, 8, 4, 4)
    edge = Tensor(rng.uniform(0.05, 0.95, size=(2, 1, 16, 16)), requires_grad=True)
    return (lambda: m(xa, edge)), _params(m, xa=xa, edge=edge)


def _encoder(rng):
    m = B.Encoder(rng, (4, 8, 8, 8))
    x = _t(rng, 1, 3, 32, 32, lo=0.0, hi=1.0)
    return (lambda: T.concat([T.reshape(f, (1, -1)) for f in m(x)], axis=1)), _params(m, x=x)


def _decoder(rng):
    m = B.Decoder(rng, 8)
    feats = [_t(rng, 1, 8, 16 // s, 16 // s) for s in (1, 2, 4, 8)]
    return (lambda: m(feats, 32, 32)), _params(m, **{f"f{i}": f for i, f in enumerate(feats)})


def _full_net(ablation: B.Ablation):
    def build(rng):
        net = B.DPSNet(toy_config(), ablation, seed=int(rng.integers(1 << 30)))
        for dps in net.dps:
            if dps.enabled:
                _randomize_offsets(dps.local, rng)
        x = _t(rng, 1, 3, 64, 64, lo=0.0, hi=1.0)

        def fn():
            pred = net(x)
            parts = [T.reshape(pred.mask, (1, -1))]
            if pred.boundary is not None:
                parts.append(T.reshape(pred.boundary, (1, -1)))
            return T.concat(parts, axis=1)

        return fn, _params(net, x=x)
    return build


def _mask_loss(rng):
    pred = Tensor(rng.uniform(0.05, 0.95, size=(2, 1, 8, 8)), requires_grad=True)
    gt = (rng.random((2, 1, 8, 8)) < 0.4).astype(np.float64)

    def fn():
        wbce, wiou = losses.mask_loss(pred, gt)
        return T.concat([T.reshape(wbce, (1,)), T.reshape(wiou, (1,))])
    return fn, {"pred": pred}


def _boundary_loss(rng):
    pred = Tensor(rng.uniform(0.05, 0.95, size=(2, 1, 8, 8)), requires_grad=True)
    gt = (rng.random((2, 1, 8, 8)) < 0.2).astype(np.float64)
    return (lambda: T.reshape(losses.boundary_loss(pred, gt), (1,))), {"pred": pred}


# name -> (builder, per-tensor coordinate cap, overall cap)
SUITES: dict[str, tuple[Callable, int, int | None]] = {
    "add": (_binary(T.add), 24, None),
    "sub": (_binary(T.sub), 24, None),
    "mul": (_binary(T.mul), 24, None),
    "div": (_binary(T.div, positive_b=True), 24, None),
    "neg": (_unary(T.neg), 24, None),
    "power": (_unary(lambda x: T.power(x, 3.0)), 24, None),
    "power_frac": (_unary(lambda x: T.power(x, 1.5), lambda r, *s: _t(r, *s, lo=0.2, hi=2.0)), 24, None),
    "exp": (_unary(T.exp), 24, None),
    "log": (_unary(T.log, lambda r, *s: _t(r, *s, lo=0.2, hi=2.0)), 24, None),
    "abs": (_unary(T.absolute, _away_from_zero), 24, None),
    "clip": (_unary(lambda x: T.clip(x, -0.5, 0.5), lambda r, *s: Tensor(
        r.choice([-0.9, -0.3, 0.0, 0.3, 0.9], size=s) + r.uniform(-0.1, 0.1, size=s), requires_grad=True)), 24, None),
    "sigmoid": (_unary(T.sigmoid), 24, None),
    "tanh": (_unary(T.tanh), 24, None),
    "gelu": (_unary(T.gelu, lambda r, *s: _t(r, *s, lo=-3.0, hi=3.0)), 24, None),
    "relu": (_unary(T.relu, _away_from_zero), 24, None),
    "reshape": (_unary(lambda x: T.reshape(x, (4, 3)) * T.reshape(x, (2, 6)).reshape(4, 3)), 24, None),
    "transpose": (_unary(lambda x: T.transpose(x) @ x), 24, None),
    "swap_last": (_unary(lambda x: T.swap_last(x)), 24, None),
    "getitem_basic": (_unary(lambda x: x[1:, ::2]), 24, None),
    "getitem_fancy": (_getitem_fancy, 24, None),
    "concat": (_concat, 24, None),
    "split": (_split, 24, None),
    "sum": (_unary(lambda x: x.sum(axis=1, keepdims=True) * x), 24, None),
    "mean": (_unary(lambda x: x.mean(axis=0) * x.mean()), 24, None),
    "max": (_unary(lambda x: x.max(axis=1), _distinct), 24, None),
    "softmax": (_unary(lambda x: T.softmax(x, axis=-1)), 24, None),
    "softmax_axis0": (_unary(lambda x: T.softmax(x * 3.0, axis=0)), 24, None),
    "matmul": (_matmul, 24, None),
    "matmul_broadcast": (_matmul_vec_batch, 24, None),
    "conv2d": (_conv(1, 1, 1), 24, None),
    "conv2d_stride2": (_conv(2, 1, 1), 24, None),
    "conv2d_dilated": (_conv(1, 2, 2), 24, None),
    "conv2d_nopad_nobias": (_conv(1, 0, 1, bias=False), 24, None),
    "conv2d_1x1": (_conv1x1, 24, None),
    "upsample_bilinear": (_upsample, 24, None),
    "adaptive_avg_pool2d": (_adaptive_pool, 24, None),
    "bilinear_sample": (_bilinear_sample, 24, None),
    "linear": (_linear, 24, None),
    "mlp": (_mlp, 24, None),
    "mhsa": (_mhsa, 12, None),
    "mffm": (_mffm, 8, None),
    "global_templates": (_global_templates(False), 24, None),
    "global_templates_normalized": (_global_templates(True), 24, None),
    "local_extractor": (_local_extractor, 12, None),
    "aggregator": (_aggregator, 6, None),
    "correlation_map": (_correlation_map, 12, None),
    "dps_transformer": (_dps_transformer, 4, None),
    "boundary_decoder": (_boundary_decoder, 8, None),
    "bfm": (_bfm, 8, None),
    "boundary_concat": (_boundary_concat, 8, None),
    "encoder": (_encoder, 8, None),
    "decoder": (_decoder, 8, None),
    "dpsnet": (_full_net(B.Ablation()), 1, 40),
    "dpsnet_no_dps": (_full_net(B.Ablation.row("d")), 1, 30),
    "dpsnet_concat_fusion": (_full_net(B.Ablation.row("f")), 1, 30),
    "mask_loss": (_mask_loss, 32, None),
    "boundary_loss": (_boundary_loss, 32, None),
}


def run_suite(name: str, seed: int) -> CheckResult:
    builder, per_tensor, max_coords = SUITES[name]
    rng = np.random.Generator(np.random.Philox(seed))
    fn, tensors = builder(rng)
    error, coords = check(fn, tensors, rng, per_tensor, max_coords)
    return CheckResult(name, seed, error, coords)


def run_all(seeds=(0,), names=None) -> list[CheckResult]:
    names = list(SUITES) if names is None else list(names)
    return [run_suite(n, s) for s in seeds for n in names]
