"""Training loops for the three model kinds, with checkpoint plumbing.

The mask-predicting model trains on the composite objective against the
clean mask, the noise-predicting baseline on MSE against the injected
noise, and the plain UNet pre-segmenter on Dice alone.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import IMAGE_MAX, NUM_CLASSES, STRUCTURES, SliceSample
from .diffusion import NoiseSchedule, forward_noise, make_schedule, scale_mask
from .evaluation import dice_score
from .losses import composite_loss, dice_loss, mse_loss
from .networks import build_model, make_descriptor

CHECKPOINT_FORMAT = "spinesegdiff-ckpt-v1"
MODEL_KINDS = ("spinesegdiff", "iisdm", "unet")
MODALITY_CHOICES = ("t1", "t2", "both")
GRAD_CLIP_NORM = 1.0

# full-scale training defaults per model kind
_DEFAULTS = {
    "spinesegdiff": {"epochs": 2500, "batch_size": 4, "lr": 1e-4},
    "iisdm": {"epochs": 2600, "batch_size": 10, "lr": 1e-4},
    "unet": {"epochs": 1000, "batch_size": 10, "lr": 1e-4},
}


class TrainingError(RuntimeError):
    """Raised on invalid configuration or a diverged run."""


@dataclass
class TrainConfig:
    """Everything a training run needs; serializes to a flat dict."""

    model: str = "spinesegdiff"
    epochs: int = 2500
    batch_size: int = 4
    optimizer: str = "adamw"
    lr: float = 1e-4
    schedule: str = "linear"
    timesteps: int = 1000
    modality: str = "both"
    fold: int = 0
    seed: int = 42
    size: int = 320
    preset: str = "full"
    max_steps: int | None = None
    val_every: int = 100
    grad_clip: float = GRAD_CLIP_NORM

    def __post_init__(self) -> None:
        if self.model not in MODEL_KINDS:
            raise TrainingError(f"unknown model kind '{self.model}'")
        if self.modality not in MODALITY_CHOICES:
            raise TrainingError(f"unknown modality filter '{self.modality}'")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise TrainingError("epochs and batch size must be positive")
        if self.lr <= 0:
            raise TrainingError("learning rate must be positive")
        if self.optimizer != "adamw":
            raise TrainingError(f"unsupported optimizer '{self.optimizer}'")
        if self.max_steps is not None and self.max_steps <= 0:
            raise TrainingError("max_steps must be positive when set")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        return cls(**raw)

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:12]


def default_config(model: str, **overrides) -> TrainConfig:
    if model not in _DEFAULTS:
        raise TrainingError(f"unknown model kind '{model}'")
    params = {"model": model, **_DEFAULTS[model]}
    params.update(overrides)
    return TrainConfig(**params)


@dataclass
class TrainResult:
    model: torch.nn.Module
    config: TrainConfig
    best_metric: float
    metric_name: str
    best_step: int
    history: list[dict] = field(default_factory=list)
    best_state: dict | None = None


# ---------------------------------------------------------------------------
# batching helpers


def filter_modality(samples: list[SliceSample], modality: str) -> list[SliceSample]:
    if modality == "both":
        return list(samples)
    return [s for s in samples if s.modality == modality]


def to_tensors(samples: list[SliceSample]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack samples into (images in [0,1], one-hot masks), both float32."""

    images = np.stack([s.image for s in samples]).astype(np.float32) / IMAGE_MAX
    masks = np.stack([s.mask for s in samples]).astype(np.float32)
    return torch.from_numpy(images), torch.from_numpy(masks)


def draw_timestep(rng: np.random.Generator, timesteps: int) -> int:
    """Uniform draw over [0, timesteps)."""

    return int(rng.integers(0, timesteps))


class _BatchStream:
    """Cycles shuffled epochs over the training indices."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n == 0:
            raise TrainingError("training split is empty")
        self._n = n
        self._batch = batch_size
        self._rng = rng
        self._order: list[int] = []

    def next_batch(self) -> list[int]:
        if len(self._order) < self._batch:
            fresh = self._rng.permutation(self._n).tolist()
            self._order.extend(fresh)
        picked = self._order[: self._batch]
        del self._order[: self._batch]
        return picked


# ---------------------------------------------------------------------------
# validation metrics


def _mean_foreground_dice(pred_classes: np.ndarray, true_classes: np.ndarray) -> float:
    scores = [
        dice_score(pred_classes, true_classes, class_id=c)
        for c in range(1, NUM_CLASSES)
    ]
    return float(np.mean(scores))


@torch.no_grad()
def validation_dice(
    model: torch.nn.Module,
    samples: list[SliceSample],
    schedule: NoiseSchedule,
    seed: int,
) -> float:
    """Single-pass proxy Dice: predict x0 from pure noise at t = T - 1.

    Fixed-seed noise keeps the metric stable between calls.
    """

    if not samples:
        raise TrainingError("validation split is empty")
    images, masks = to_tensors(samples)
    gen = torch.Generator().manual_seed(seed)
    t = schedule.T - 1
    x0 = scale_mask(masks)
    eps = torch.randn(x0.shape, generator=gen, dtype=torch.float32)
    x_t = forward_noise(x0, t, eps, schedule)
    logits = model(x_t, t, images)
    pred = torch.argmax(logits, dim=1).numpy()
    true = torch.argmax(masks, dim=1).numpy()
    scores = [_mean_foreground_dice(pred[i], true[i]) for i in range(len(samples))]
    return float(np.mean(scores))


@torch.no_grad()
def validation_noise_mse(
    model: torch.nn.Module,
    samples: list[SliceSample],
    schedule: NoiseSchedule,
    seed: int,
    draws: int = 8,
) -> float:
    """Held-out noise-prediction MSE over fixed (t, eps) draws."""

    if not samples:
        raise TrainingError("validation split is empty")
    images, masks = to_tensors(samples)
    x0 = scale_mask(masks)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    total = 0.0
    for _ in range(draws):
        t = draw_timestep(rng, schedule.T)
        eps = torch.randn(x0.shape, generator=gen, dtype=torch.float32)
        x_t = forward_noise(x0, t, eps, schedule)
        eps_hat = model(x_t, t, images)
        total += float(mse_loss(eps_hat, eps))
    return total / draws


@torch.no_grad()
def validation_unet_dice(model: torch.nn.Module, samples: list[SliceSample]) -> float:
    if not samples:
        raise TrainingError("validation split is empty")
    images, masks = to_tensors(samples)
    logits = model(images)
    pred = torch.argmax(logits, dim=1).numpy()
    true = torch.argmax(masks, dim=1).numpy()
    scores = [_mean_foreground_dice(pred[i], true[i]) for i in range(len(samples))]
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# the shared loop


def _total_steps(config: TrainConfig, n_train: int) -> int:
    per_epoch = max(1, math.ceil(n_train / config.batch_size))
    steps = config.epochs * per_epoch
    if config.max_steps is not None:
        steps = min(steps, config.max_steps)
    return steps


def _loop(
    model: torch.nn.Module,
    train: list[SliceSample],
    val: list[SliceSample],
    config: TrainConfig,
    schedule: NoiseSchedule | None,
    step_fn,
    val_fn,
    higher_is_better: bool,
    metric_name: str,
) -> TrainResult:
    images, masks = to_tensors(train)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed + 1)
    stream = _BatchStream(len(train), config.batch_size, rng)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr)

    history: list[dict] = []
    best = -math.inf if higher_is_better else math.inf
    best_state: dict | None = None
    best_step = 0
    total = _total_steps(config, len(train))

    def is_better(value: float) -> bool:
        return value > best if higher_is_better else value < best

    for step in range(1, total + 1):
        idx = stream.next_batch()
        batch_y = images[idx]
        batch_mask = masks[idx]
        optimizer.zero_grad()
        losses = step_fn(model, batch_y, batch_mask, rng, gen, schedule)
        loss = losses["loss"]
        if not torch.isfinite(loss):
            raise TrainingError(f"loss became non-finite at step {step}")
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        optimizer.step()

        row = {
            "step": step,
            **{k: float(v.detach()) for k, v in losses.items()},
            "val": None,
        }
        if step % config.val_every == 0 or step == total:
            model.eval()
            value = val_fn(model, val)
            model.train()
            row["val"] = value
            if is_better(value):
                best = value
                best_step = step
                best_state = {
                    k: v.detach().clone() for k, v in model.state_dict().items()
                }
        history.append(row)

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(
        model=model,
        config=config,
        best_metric=best,
        metric_name=metric_name,
        best_step=best_step,
        history=history,
        best_state=best_state,
    )


def _split_check(train: list[SliceSample], val: list[SliceSample]) -> None:
    if not train:
        raise TrainingError("training split is empty")
    if not val:
        raise TrainingError("validation split is empty")


def train_spinesegdiff(
    train: list[SliceSample],
    val: list[SliceSample],
    config: TrainConfig,
    model: torch.nn.Module | None = None,
) -> TrainResult:
    """Direct-mask training: noise the scaled mask, predict x0, composite loss."""

    _split_check(train, val)
    schedule = make_schedule(config.schedule, config.timesteps)
    torch.manual_seed(config.seed)
    if model is None:
        model = build_model(make_descriptor("spinesegdiff", preset=config.preset))
    model.train()

    def step_fn(model, batch_y, batch_mask, rng, gen, schedule):
        t = draw_timestep(rng, schedule.T)
        x0 = scale_mask(batch_mask)
        eps = torch.randn(x0.shape, generator=gen, dtype=torch.float32)
        x_t = forward_noise(x0, t, eps, schedule)
        logits = model(x_t, t, batch_y)
        breakdown = composite_loss(logits, batch_mask)
        return {
            "loss": breakdown.total,
            "mse": breakdown.mse,
            "dice": breakdown.dice,
            "bce": breakdown.bce,
        }

    def val_fn(model, val_samples):
        return validation_dice(model, val_samples, schedule, seed=config.seed + 2)

    return _loop(
        model, train, val, config, schedule, step_fn, val_fn,
        higher_is_better=True, metric_name="val_dice",
    )


def train_iisdm(
    train: list[SliceSample],
    val: list[SliceSample],
    config: TrainConfig,
    model: torch.nn.Module | None = None,
) -> TrainResult:
    """Noise-prediction training: MSE between estimated and true noise."""

    _split_check(train, val)
    schedule = make_schedule(config.schedule, config.timesteps)
    torch.manual_seed(config.seed)
    if model is None:
        model = build_model(make_descriptor("iisdm", preset=config.preset))
    model.train()

    def step_fn(model, batch_y, batch_mask, rng, gen, schedule):
        t = draw_timestep(rng, schedule.T)
        x0 = scale_mask(batch_mask)
        eps = torch.randn(x0.shape, generator=gen, dtype=torch.float32)
        x_t = forward_noise(x0, t, eps, schedule)
        eps_hat = model(x_t, t, batch_y)
        loss = mse_loss(eps_hat, eps)
        return {"loss": loss}

    def val_fn(model, val_samples):
        return validation_noise_mse(model, val_samples, schedule, seed=config.seed + 2)

    return _loop(
        model, train, val, config, schedule, step_fn, val_fn,
        higher_is_better=False, metric_name="val_noise_mse",
    )


def train_unet_preseg(
    train: list[SliceSample],
    val: list[SliceSample],
    config: TrainConfig,
    model: torch.nn.Module | None = None,
) -> TrainResult:
    """Supervised Dice-loss training of the plain UNet pre-segmenter."""

    _split_check(train, val)
    torch.manual_seed(config.seed)
    if model is None:
        model = build_model(make_descriptor("unet", preset=config.preset))
    model.train()

    def step_fn(model, batch_y, batch_mask, rng, gen, schedule):
        logits = model(batch_y)
        probs = torch.softmax(logits, dim=1)
        loss = dice_loss(probs, batch_mask)
        return {"loss": loss}

    def val_fn(model, val_samples):
        return validation_unet_dice(model, val_samples)

    return _loop(
        model, train, val, config, schedule=None, step_fn=step_fn, val_fn=val_fn,
        higher_is_better=True, metric_name="val_dice",
    )


TRAINERS = {
    "spinesegdiff": train_spinesegdiff,
    "iisdm": train_iisdm,
    "unet": train_unet_preseg,
}


# ---------------------------------------------------------------------------
# checkpoints and curves


def save_checkpoint(path: str | Path, result: TrainResult) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_state": result.model.state_dict(),
        "descriptor": result.model.descriptor,
        "config": result.config.to_dict(),
        "config_hash": result.config.hash(),
        "metric_name": result.metric_name,
        "best_metric": result.best_metric,
        "best_step": result.best_step,
    }
    torch.save(payload, path)
    sidecar = {
        "format": CHECKPOINT_FORMAT,
        "descriptor": result.model.descriptor,
        "config": result.config.to_dict(),
        "config_hash": result.config.hash(),
        "metric_name": result.metric_name,
        "best_metric": result.best_metric,
        "best_step": result.best_step,
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n"
    )
    return path


def load_checkpoint(path: str | Path) -> tuple[torch.nn.Module, dict]:
    path = Path(path)
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise TrainingError(f"{path}: not a recognized checkpoint file")
    model = build_model(payload["descriptor"])
    model.load_state_dict(payload["model_state"])
    model.eval()
    info = {k: v for k, v in payload.items() if k != "model_state"}
    return model, info


def write_curves(path: str | Path, history: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields: list[str] = []
    for row in history:
        for key in row:
            if key not in fields:
                fields.append(key)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in history:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in fields})
    return path
