"""Step-uncertainty ensemble inference and the variance-based baseline.

The direct-mask model is sampled S times from independent noise draws.
At each of the last T_s reverse steps the per-sample softmax maps are
averaged, an elementwise entropy uncertainty is taken on the average,
and the final mask is the weighted sum

    fused = sum_t exp(sigmoid(t / T_s)) * (1 - u_t) * pbar_t

over the fused steps in sampling order (the latest step gets the
largest weight). The noise-predicting baseline instead runs S full
denoising passes and reports the pixel-wise variance of the S crisp
masks as its uncertainty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .diffusion import NoiseSchedule, ddim_step, make_timestep_subsequence
from .losses import EPS_CLAMP

IMAGE_RANGE = 255.0


@dataclass
class EnsembleConfig:
    """Sampling knobs: S draws, K reverse steps, last T_s fused."""

    samples: int = 5
    ddim_steps: int = 10
    fuse_last: int = 10
    seed: int = 42

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.fuse_last > self.ddim_steps:
            raise ValueError(f"fuse_last {self.fuse_last} exceeds ddim_steps {self.ddim_steps}")
        if self.fuse_last < 1:
            raise ValueError("fuse_last must be >= 1")


@dataclass
class EnsemblePrediction:
    """Fused output plus the per-step maps it was built from."""

    per_step_mean_probs: np.ndarray  # [T_s, C, H, W]
    per_step_uncertainty: np.ndarray  # [T_s, C, H, W]
    fused: np.ndarray  # [C, H, W]
    label_map: np.ndarray  # [H, W] integer classes
    reverse_steps: int = 0  # total model evaluations spent
    meta: dict = field(default_factory=dict)


def mean_probability(samples: np.ndarray) -> np.ndarray:
    """Elementwise mean over the sample axis of [S, C, H, W] softmax maps."""
    samples = np.asarray(samples)
    if samples.ndim != 4 or samples.shape[0] == 0:
        raise ValueError(f"expected non-empty [S, C, H, W], got shape {samples.shape}")
    return samples.mean(axis=0)


def entropy_uncertainty(mean_probs: np.ndarray) -> np.ndarray:
    """Elementwise -p * ln(p) with p clamped below by EPS_CLAMP.

    Zero exactly where p is 0 or 1; at most 1/e per element.
    """
    p = np.asarray(mean_probs)
    return -p * np.log(np.clip(p, EPS_CLAMP, None))


def step_weight(step_index: int, fused_count: int) -> float:
    """Time scaling exp(sigmoid(t / T_s)) for 1-based step t of T_s."""
    s = 1.0 / (1.0 + math.exp(-step_index / fused_count))
    return math.exp(s)


def fuse_predictions(per_step_mean_probs: np.ndarray,
                     per_step_uncertainty: np.ndarray) -> np.ndarray:
    """Uncertainty-damped, time-weighted sum over the fused steps.

    Axis 0 is ordered earliest-fused to latest; the weighted sum is not
    renormalized.
    """
    probs = np.asarray(per_step_mean_probs)
    unc = np.asarray(per_step_uncertainty)
    if probs.shape != unc.shape:
        raise ValueError(f"shape mismatch: {probs.shape} vs {unc.shape}")
    ts = probs.shape[0]
    fused = np.zeros_like(probs[0])
    for i in range(ts):
        fused += step_weight(i + 1, ts) * (1.0 - unc[i]) * probs[i]
    return fused


def _sample_seeds(seed: int, count: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(s.generate_state(1)[0]) for s in ss.spawn(count)]


def _prepare_image(y, model) -> torch.Tensor:
    yb = torch.as_tensor(np.asarray(y, dtype=np.float32))
    if yb.ndim == 2:
        yb = yb[None]
    if yb.ndim != 3:
        raise ValueError(f"image must be [C, H, W], got shape {tuple(yb.shape)}")
    size = model.image_size
    if yb.shape[-2:] != (size, size):
        raise ValueError(f"image spatial size {tuple(yb.shape[-2:])} != trained size {size}")
    return (yb / IMAGE_RANGE)[None]


def _ensemble_from_probs(all_probs: np.ndarray, reverse_steps: int, meta: dict) -> EnsemblePrediction:
    """Reduce recorded [S, T_s, C, H, W] softmax maps to a prediction."""
    per_step_mean = np.stack([mean_probability(all_probs[:, i]) for i in range(all_probs.shape[1])])
    per_step_unc = entropy_uncertainty(per_step_mean)
    fused = fuse_predictions(per_step_mean, per_step_unc)
    label_map = np.argmax(fused, axis=0).astype(np.int16)
    return EnsemblePrediction(
        per_step_mean_probs=per_step_mean,
        per_step_uncertainty=per_step_unc,
        fused=fused,
        label_map=label_map,
        reverse_steps=reverse_steps,
        meta=meta,
    )


def run_spinesegdiff_inference(model, y, schedule: NoiseSchedule, config: EnsembleConfig,
                               sample_seeds: list[int] | None = None,
                               init_states: torch.Tensor | None = None,
                               steps: tuple | None = None) -> EnsemblePrediction:
    """Step-uncertainty ensemble for the direct-mask model.

    Each of S seeded noise draws is denoised with deterministic DDIM;
    softmax maps from the last T_s model calls are fused. Deterministic
    given (model, y, seed). ``init_states``/``steps`` support the
    pre-segmentation path, which starts from a partially noised mask.
    """
    yb = _prepare_image(y, model)
    c = model.classes
    size = model.image_size
    if steps is None:
        steps = make_timestep_subsequence(schedule.T, config.ddim_steps).steps
    fuse_last = min(config.fuse_last, len(steps))
    if sample_seeds is None:
        sample_seeds = _sample_seeds(config.seed, config.samples)
    elif len(sample_seeds) != config.samples:
        raise ValueError("need one seed per sample")

    model.eval()
    all_probs = np.empty((config.samples, fuse_last, c, size, size), dtype=np.float32)
    n_calls = 0
    with torch.no_grad():
        for s in range(config.samples):
            if init_states is not None:
                x = init_states[s].clone()
            else:
                gen = torch.Generator().manual_seed(sample_seeds[s])
                x = torch.randn(1, c, size, size, generator=gen)
            for i, t in enumerate(steps):
                logits = model(x, torch.tensor([t], dtype=torch.float32), yb)
                n_calls += 1
                probs = torch.softmax(logits, dim=1)
                slot = i - (len(steps) - fuse_last)
                if slot >= 0:
                    all_probs[s, slot] = probs[0].numpy()
                x0_state = 2.0 * probs - 1.0
                t_prev = steps[i + 1] if i + 1 < len(steps) else -1
                x = ddim_step(x, x0_state, t, t_prev, schedule)

    meta = {
        "model": model.kind,
        "samples": config.samples,
        "ddim_steps": len(steps),
        "fuse_last": fuse_last,
        "seed": config.seed,
        "schedule": {"kind": schedule.kind, "T": schedule.T},
    }
    return _ensemble_from_probs(all_probs, n_calls, meta)


@dataclass
class VariancePrediction:
    """Mean-of-masks output of the noise-predicting baseline."""

    mean_mask: np.ndarray  # [C, H, W] fraction of samples voting per class
    variance: np.ndarray  # [C, H, W] pixel-wise variance of the crisp masks
    label_map: np.ndarray  # [H, W]
    reverse_steps: int = 0
    meta: dict = field(default_factory=dict)


def run_iisdm_inference(model, y, schedule: NoiseSchedule, samples: int, seed: int,
                        ddim_steps: int | None = None,
                        sample_seeds: list[int] | None = None) -> VariancePrediction:
    """S full denoising runs of the noise-predicting model.

    Each run starts from an independent noise draw; the final mask is
    the argmax of the mean one-hot mask and the uncertainty map is the
    pixel-wise variance of the S crisp masks.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    yb = _prepare_image(y, model)
    c = model.classes
    size = model.image_size
    steps = make_timestep_subsequence(schedule.T, ddim_steps or schedule.T).steps
    if sample_seeds is None:
        sample_seeds = _sample_seeds(seed, samples)
    elif len(sample_seeds) != samples:
        raise ValueError("need one seed per sample")

    model.eval()
    crisp = np.empty((samples, c, size, size), dtype=np.float32)
    n_calls = 0
    with torch.no_grad():
        for s in range(samples):
            gen = torch.Generator().manual_seed(sample_seeds[s])
            x = torch.randn(1, c, size, size, generator=gen)
            for i, t in enumerate(steps):
                eps_hat = model(x, torch.tensor([t], dtype=torch.float32), yb)
                n_calls += 1
                ab = schedule.alpha_bar(t)
                x0_pred = (x - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
                x0_pred = torch.clamp(x0_pred, -1.0, 1.0)
                t_prev = steps[i + 1] if i + 1 < len(steps) else -1
                x = ddim_step(x, x0_pred, t, t_prev, schedule)
            labels = torch.argmax(x[0], dim=0).numpy()
            crisp[s] = np.eye(c, dtype=np.float32)[labels].transpose(2, 0, 1)

    mean_mask = crisp.mean(axis=0)
    variance = crisp.var(axis=0)
    label_map = np.argmax(mean_mask, axis=0).astype(np.int16)
    meta = {
        "model": model.kind,
        "samples": samples,
        "ddim_steps": len(steps),
        "seed": seed,
        "schedule": {"kind": schedule.kind, "T": schedule.T},
    }
    return VariancePrediction(mean_mask=mean_mask, variance=variance, label_map=label_map,
                              reverse_steps=n_calls, meta=meta)
