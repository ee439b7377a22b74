"""Pre-segmentation acceleration.

An externally produced mask is partially noised to a shallow timestep
and refined with the few DDIM steps that fit below it, instead of
denoising all the way from pure noise. t_noise = 0 passes the external
mask through untouched.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import NUM_CLASSES, STRUCTURES, SliceSample
from .diffusion import NoiseSchedule, forward_noise, make_timestep_subsequence
from .inference import EnsembleConfig, EnsemblePrediction, run_spinesegdiff_inference
from .nifti import read_label_slice

DEFAULT_GRID = (0, 30, 100, 300, 500, 1000)


class PresegError(ValueError):
    """Raised on malformed preseg masks or noising depths."""


@dataclass
class PresegInput:
    """One-hot mask from an external segmenter, tied to an image slice."""

    mask: np.ndarray  # uint8 one-hot [C, H, W]
    source: str = "external"
    image_key: str = ""

    def __post_init__(self) -> None:
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.mask.ndim != 3:
            raise PresegError(f"mask must be [C, H, W], got shape {self.mask.shape}")
        if not np.all(self.mask.sum(axis=0) == 1):
            raise PresegError("mask must be one-hot at every pixel")

    def label_map(self) -> np.ndarray:
        return np.argmax(self.mask, axis=0).astype(np.int16)


def preseg_from_label_map(
    classes2d: np.ndarray,
    n_classes: int = NUM_CLASSES,
    source: str = "external",
    image_key: str = "",
) -> PresegInput:
    arr = np.asarray(classes2d)
    if arr.ndim != 2:
        raise PresegError(f"expected a 2D class map, got shape {arr.shape}")
    codes = np.round(arr).astype(np.int64)
    if codes.min() < 0 or codes.max() >= n_classes:
        raise PresegError(
            f"class ids must lie in [0, {n_classes - 1}], found [{codes.min()}, {codes.max()}]"
        )
    onehot = np.eye(n_classes, dtype=np.uint8)[codes].transpose(2, 0, 1)
    return PresegInput(mask=onehot, source=source, image_key=image_key)


def load_preseg_mask(path: str | Path, n_classes: int = NUM_CLASSES) -> PresegInput:
    classes = read_label_slice(path)
    return preseg_from_label_map(
        classes, n_classes=n_classes, source=str(path), image_key=Path(path).stem
    )


def _pass_through(preseg: PresegInput) -> EnsemblePrediction:
    c, h, w = preseg.mask.shape
    empty = np.zeros((0, c, h, w), dtype=np.float32)
    return EnsemblePrediction(
        per_step_mean_probs=empty,
        per_step_uncertainty=empty.copy(),
        fused=preseg.mask.astype(np.float32),
        label_map=preseg.label_map(),
        reverse_steps=0,
        meta={"t_noise": 0, "pass_through": True, "source": preseg.source},
    )


def refine_from_preseg(
    model,
    y,
    preseg: PresegInput,
    t_noise: int,
    schedule: NoiseSchedule,
    config: EnsembleConfig,
) -> EnsemblePrediction:
    """Noise the external mask to depth ``t_noise`` and denoise it back.

    ``t_noise`` counts noising steps, so t_noise = T starts from (nearly)
    pure noise and t_noise = 0 is an exact pass-through of the input.
    The reverse pass uses min(ddim_steps, t_noise) uniform DDIM steps
    restricted to timesteps below t_noise.
    """

    if not 0 <= t_noise <= schedule.T:
        raise PresegError(f"t_noise must lie in [0, {schedule.T}], got {t_noise}")
    y_arr = np.asarray(y)
    if y_arr.shape[-2:] != preseg.mask.shape[-2:]:
        raise PresegError(
            f"image {y_arr.shape[-2:]} and preseg mask {preseg.mask.shape[-2:]} differ"
        )
    if t_noise == 0:
        return _pass_through(preseg)

    x0 = torch.from_numpy(
        (2.0 * preseg.mask.astype(np.float32) - 1.0)[None]
    )
    seeds = np.random.SeedSequence(config.seed).spawn(config.samples)
    init_states = []
    for child in seeds:
        gen = torch.Generator().manual_seed(int(child.generate_state(1)[0]))
        eps = torch.randn(x0.shape, generator=gen, dtype=torch.float32)
        init_states.append(forward_noise(x0, t_noise - 1, eps, schedule))
    steps = make_timestep_subsequence(
        schedule.T, min(config.ddim_steps, t_noise), t_start=t_noise - 1
    ).steps
    pred = run_spinesegdiff_inference(
        model, y, schedule, config, init_states=init_states, steps=steps
    )
    pred.meta.update({"t_noise": t_noise, "pass_through": False, "source": preseg.source})
    return pred


@dataclass
class AblationGrid:
    """Per-depth, per-structure Dice summary of the preseg experiment."""

    t_values: tuple[int, ...]
    dice: dict[int, dict[str, tuple[float, float]]]
    reverse_steps: dict[int, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.t_values = tuple(int(t) for t in self.t_values)
        if list(self.t_values) != sorted(self.t_values):
            raise PresegError("t_values must be sorted ascending")
        if len(set(self.t_values)) != len(self.t_values):
            raise PresegError("t_values must be distinct")
        for t in self.t_values:
            if t not in self.dice:
                raise PresegError(f"missing Dice entry for t = {t}")
            for structure, (mean, std) in self.dice[t].items():
                if not 0.0 <= mean <= 1.0 or std < 0:
                    raise PresegError(
                        f"bad Dice summary at t = {t}, structure {structure}"
                    )


def run_ablation(
    model,
    cases: list[tuple[SliceSample, PresegInput]],
    schedule: NoiseSchedule,
    config: EnsembleConfig,
    grid: tuple[int, ...] = DEFAULT_GRID,
    jobs: int = 1,
) -> AblationGrid:
    """Refine every case at every noising depth and summarize Dice.

    Cases are independent; ``jobs`` bounds per-case parallelism without
    changing the results.
    """

    from .evaluation import dice_score

    if not cases:
        raise PresegError("no evaluation cases supplied")
    t_values = tuple(sorted(int(t) for t in grid))
    dice: dict[int, dict[str, tuple[float, float]]] = {}
    reverse_steps: dict[int, int] = {}
    for t_noise in t_values:

        def refine(case):
            sample, preseg = case
            return refine_from_preseg(model, sample.image, preseg, t_noise, schedule, config)

        if jobs > 1 and len(cases) > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=jobs) as pool:
                preds = list(pool.map(refine, cases))
        else:
            preds = [refine(case) for case in cases]

        per_structure: dict[str, list[float]] = {s: [] for s in STRUCTURES}
        for (sample, _preseg), pred in zip(cases, preds):
            reverse_steps[t_noise] = pred.reverse_steps
            true = np.argmax(sample.mask, axis=0)
            for class_id, structure in enumerate(STRUCTURES, start=1):
                per_structure[structure].append(
                    dice_score(pred.label_map, true, class_id=class_id)
                )
        dice[t_noise] = {
            s: (
                float(np.mean(vals)),
                float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
            )
            for s, vals in per_structure.items()
        }
    return AblationGrid(t_values=t_values, dice=dice, reverse_steps=reverse_steps)


def write_ablation_csv(path: str | Path, grid: AblationGrid) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "structure", "dice_mean", "dice_std", "reverse_steps"])
        for t in grid.t_values:
            for structure in STRUCTURES:
                mean, std = grid.dice[t][structure]
                writer.writerow(
                    [t, structure, f"{mean:.6f}", f"{std:.6f}", grid.reverse_steps.get(t, "")]
                )
    return path


def write_ablation_meta(path: str | Path, grid: AblationGrid, config: EnsembleConfig) -> Path:
    path = Path(path)
    payload = {
        "t_values": list(grid.t_values),
        "reverse_steps": {str(t): n for t, n in grid.reverse_steps.items()},
        "samples": config.samples,
        "ddim_steps": config.ddim_steps,
        "fuse_last": config.fuse_last,
        "seed": config.seed,
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path
