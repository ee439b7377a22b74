"""Shared fixtures: toy cohort splits and session-trained toy models.

Training fixtures are session-scoped so the expensive runs happen once;
wall-clock seconds are recorded for the trainability checks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import pytest

from spinesegdiff.evaluation import make_folds
from spinesegdiff.synthetic import make_toy_dataset
from spinesegdiff.training import (
    TrainResult,
    default_config,
    save_checkpoint,
    train_iisdm,
    train_spinesegdiff,
    train_unet_preseg,
)


@dataclass
class TimedRun:
    result: TrainResult
    seconds: float
    max_steps: int


def _split(samples, records, fold=0, seed=42):
    folds = make_folds(records, k=5, seed=seed)
    val_ids = folds.validation(fold)
    train = [s for s in samples if s.patient_id not in val_ids]
    val = [s for s in samples if s.patient_id in val_ids]
    return train, val


@pytest.fixture(scope="session")
def toy_cohort():
    samples, records = make_toy_dataset(n_patients=6, modalities=("t1",), seed=0)
    return samples, records


@pytest.fixture(scope="session")
def toy_split(toy_cohort):
    samples, records = toy_cohort
    return _split(samples, records)


def _train(trainer, train, val, **overrides) -> TimedRun:
    config = default_config(overrides.pop("model"), preset="small", size=64,
                            lr=3e-3, val_every=100, seed=42, **overrides)
    start = time.monotonic()
    result = trainer(train, val, config)
    return TimedRun(result=result, seconds=time.monotonic() - start,
                    max_steps=config.max_steps)


@pytest.fixture(scope="session")
def ssd_linear(toy_split) -> TimedRun:
    train, val = toy_split
    return _train(train_spinesegdiff, train, val, model="spinesegdiff",
                  max_steps=800)


@pytest.fixture(scope="session")
def ssd_cosine(toy_split) -> TimedRun:
    train, val = toy_split
    return _train(train_spinesegdiff, train, val, model="spinesegdiff",
                  schedule="cosine", max_steps=800)


@pytest.fixture(scope="session")
def iisdm_run(toy_split) -> TimedRun:
    train, val = toy_split
    return _train(train_iisdm, train, val, model="iisdm",
                  batch_size=4, max_steps=1500)


@pytest.fixture(scope="session")
def unet_run(toy_split) -> TimedRun:
    train, val = toy_split
    return _train(train_unet_preseg, train, val, model="unet",
                  batch_size=4, max_steps=400)


@pytest.fixture(scope="session")
def ckpt_dir(tmp_path_factory, ssd_linear, ssd_cosine, iisdm_run, unet_run):
    """Trained toy checkpoints on disk for the CLI tests."""

    root = tmp_path_factory.mktemp("checkpoints")
    save_checkpoint(root / "ssd_linear.pt", ssd_linear.result)
    save_checkpoint(root / "ssd_cosine.pt", ssd_cosine.result)
    save_checkpoint(root / "iisdm.pt", iisdm_run.result)
    save_checkpoint(root / "unet.pt", unet_run.result)
    return root
