"""Training loop, optimizer, learning-rate schedule and evaluation."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .blocks import Ablation, DPSNet, NetConfig
from .losses import total_loss
from .metrics import evaluate_all
from .synth import Sample, hflip, philox, synthetic_dataset

LOG_HEADER = "epoch,step,lr,wbce,wiou,bbce,total"
CHECKPOINT_NAME = "checkpoint.bin"
LOG_NAME = "train_log.csv"


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    input_size: tuple[int, int] = (96, 96)
    channels: int = 32
    patches: int = 3
    ref_points: int = 3
    offset_scale: float = 1.0
    heads: int = 4
    stage_channels: tuple[int, ...] = (32, 64, 96, 128)
    mffm: bool = True
    dps: bool = True
    boundary_decoder: bool = True
    bfm: bool = True
    boundary_dilation_radius: int = 1
    # used when training on generated data
    synthetic_count: int = 16
    difficulty: float = 0.6
    data_seed: int = 0

    def __post_init__(self):
        if self.lr_end > self.lr_start:
            raise ConfigError(f"lr_end {self.lr_end} exceeds lr_start {self.lr_start}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.boundary_dilation_radius < 0:
            raise ConfigError("boundary_dilation_radius must be >= 0")
        try:
            self.net_config()
            self.ablation()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def net_config(self) -> NetConfig:
        return NetConfig(
            channels=self.channels,
            patches=self.patches,
            ref_points=self.ref_points,
            offset_scale=self.offset_scale,
            stage_channels=tuple(self.stage_channels),
            input_size=tuple(self.input_size),
            heads=self.heads,
        )

    def ablation(self) -> Ablation:
        return Ablation(self.mffm, self.dps, self.boundary_decoder, self.bfm)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                values[key] = _parse(types[key], value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
        return cls(**values)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except UnicodeDecodeError as exc:
            raise ConfigError(f"{path}: not UTF-8 text") from exc
        return cls.from_text(text)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value)


def _parse(kind: str, value: str):
    if kind == "bool":
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    # tuples accept "96,96" or "96x96"
    parts = [p for p in value.replace("x", ",").split(",") if p.strip()]
    return tuple(int(p) for p in parts)


# -- optimizer --------------------------------------------------------------

def cosine_lr(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    if total_steps <= 0 or step >= total_steps:
        return lr_end if step >= total_steps else lr_start
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * step / total_steps))


def adam_step(param, grad, m, v, step: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; ``step`` counts from 1.  Returns (param, m, v)."""
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ValueError(
            f"adam_step shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"m {m.shape}, v {v.shape}"
        )
    if step < 1:
        raise ValueError(f"adam step counter starts at 1, got {step}")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.step_count = 0

    def step(self, lr: float) -> None:
        self.step_count += 1
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data, self.m[name], self.v[name] = adam_step(
                p.data, grad, self.m[name], self.v[name], self.step_count, lr,
                self.beta1, self.beta2, self.eps,
            )


# -- checkpoints --------------------------------------------------------------

def build_model(cfg: TrainConfig) -> DPSNet:
    return DPSNet(cfg.net_config(), cfg.ablation(), seed=cfg.seed)


def make_checkpoint(cfg: TrainConfig, model: DPSNet, opt: Adam) -> ckpt_io.Checkpoint:
    tensors = {}
    for name, p in model.named_parameters():
        tensors[f"param/{name}"] = p.data
    for name in opt.params:
        tensors[f"adam_m/{name}"] = opt.m[name]
    for name in opt.params:
        tensors[f"adam_v/{name}"] = opt.v[name]
    return ckpt_io.Checkpoint(cfg.to_text(), opt.step_count, tensors)


def restore(ck: ckpt_io.Checkpoint) -> tuple[TrainConfig, DPSNet, Adam]:
    cfg = TrainConfig.from_text(ck.config_text)
    model = build_model(cfg)
    opt = Adam(model.named_parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    for name, p in opt.params.items():
        for prefix, store in (("param/", None), ("adam_m/", opt.m), ("adam_v/", opt.v)):
            key = prefix + name
            if key not in ck.tensors:
                raise ckpt_io.CheckpointError(f"checkpoint lacks tensor {key!r}")
            arr = ck.tensors[key]
            if arr.shape != p.shape:
                raise ckpt_io.CheckpointError(
                    f"tensor {key!r} has shape {arr.shape}, model expects {p.shape}"
                )
            if store is None:
                p.data = arr.copy()
            else:
                store[name] = arr.copy()
    opt.step_count = ck.step
    return cfg, model, opt


# -- training -----------------------------------------------------------------

def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (
        np.stack([s.image for s in samples]).astype(T.default_dtype()),
        np.stack([s.mask for s in samples]).astype(np.float64),
        np.stack([s.boundary for s in samples]).astype(np.float64),
    )


def training_samples(cfg: TrainConfig) -> list[Sample]:
    return synthetic_dataset(cfg.data_seed, cfg.synthetic_count, tuple(cfg.input_size), cfg.difficulty)


@dataclass
class TrainResult:
    model: DPSNet
    optimizer: Adam
    log: list[dict] = field(default_factory=list)

    def epoch_means(self) -> list[float]:
        sums: dict[int, list[float]] = {}
        for row in self.log:
            sums.setdefault(row["epoch"], []).append(row["total"])
        return [float(np.mean(sums[e])) for e in sorted(sums)]


def train(cfg: TrainConfig, samples: list[Sample], out_dir, max_steps: int | None = None,
          progress=None) -> TrainResult:
    """Train on ``samples`` for ``cfg.epochs`` epochs, checkpointing after each epoch.

    ``max_steps`` stops early (mid-epoch) once that many optimizer steps ran; the
    cosine schedule still spans the full ``epochs`` budget.
    """
    if not samples:
        raise ValueError("training set is empty")
    size = tuple(cfg.input_size)
    for s in samples:
        if s.image.shape[1:] != size:
            raise ValueError(f"sample of size {s.image.shape[1:]} does not match input_size {size}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg)
    opt = Adam(model.named_parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    rng = philox(cfg.seed + 1)
    per_epoch = math.ceil(len(samples) / cfg.batch_size)
    total_steps = cfg.epochs * per_epoch
    result = TrainResult(model, opt)
    log_path = out / LOG_NAME
    ckpt_path = out / CHECKPOINT_NAME
    with open(log_path, "w", encoding="utf-8") as log:
        log.write(LOG_HEADER + "\n")
        ckpt_io.save(ckpt_path, make_checkpoint(cfg, model, opt))
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(samples))
            flips = rng.random(len(samples)) < 0.5
            for b in range(per_epoch):
                if max_steps is not None and opt.step_count >= max_steps:
                    return result
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                batch = [hflip(samples[i]) if flips[i] else samples[i] for i in idx]
                image, mask, edge = stack(batch)
                lr = cosine_lr(opt.step_count, total_steps, cfg.lr_start, cfg.lr_end)
                model.zero_grad()
                pred = model(image)
                loss, rep = total_loss(pred.mask, pred.boundary, mask, edge, cfg.boundary_dilation_radius)
                loss.backward()
                opt.step(lr)
                row = dict(epoch=epoch, step=opt.step_count, lr=lr, wbce=rep.mask_wbce,
                           wiou=rep.mask_wiou, bbce=rep.boundary_bce, total=rep.total)
                result.log.append(row)
                log.write(",".join(_log_field(row[k]) for k in LOG_HEADER.split(",")) + "\n")
                log.flush()
                if progress is not None:
                    progress(row)
            ckpt_io.save(ckpt_path, make_checkpoint(cfg, model, opt))
    return result


def _log_field(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else f"{v:.10g}"


# -- evaluation ---------------------------------------------------------------

def predict(model: DPSNet, samples: list[Sample], batch_size: int = 4) -> list[np.ndarray]:
    preds = []
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            image, _, _ = stack(samples[i : i + batch_size])
            preds.extend(model(image).mask.data[:, 0].astype(np.float64))
    return preds


EVAL_COLUMNS = ("name", "mae", "s_measure", "e_measure", "weighted_f")


def evaluate(model: DPSNet, names: list[str], samples: list[Sample], csv_path=None) -> list[dict]:
    """Per-image metric rows followed by a ``mean`` row; optionally written as CSV."""
    rows = []
    for name, s, pred in zip(names, samples, predict(model, samples)):
        rep = evaluate_all(pred, s.mask[0])
        rows.append(dict(name=name, **dataclasses.asdict(rep)))
    mean = {"name": "mean"}
    for key in EVAL_COLUMNS[1:]:
        mean[key] = float(np.mean([r[key] for r in rows]))
    rows.append(mean)
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(EVAL_COLUMNS)
            for r in rows:
                writer.writerow([r["name"]] + [f"{r[k]:.10g}" for k in EVAL_COLUMNS[1:]])
    return rows
