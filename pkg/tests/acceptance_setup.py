"""Shared protocol for the acceptance benchmarks: datasets, training recipe and an optional disk cache.

Set ``SCENEGEN_ACCEPTANCE_CACHE`` to a directory to reuse trained weights across runs;
without it both models are trained from scratch inside the test session.
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from scenegen.model import ModelConfig, SceneGenModel
from scenegen.nn.params import load_weights, save_weights
from scenegen.trainer import TrainConfig, fit, mean_nll
from scenegen.worldsim import oracle_dataset

TRAIN_SEED, HELDOUT_SEED, EVAL_SEED = 1, 2, 3
N_TRAIN, N_HELDOUT, N_EVAL = 500, 100, 500
RECIPE = TrainConfig(lr=1e-3, batch_size=1, steps=2000, augment_rotation=False, seed=0)
INIT_SEED = 0

RESULTS: dict[int, str] = {}  # criterion number -> summary line, printed at the end of the session


def record(criterion: int, passed: bool, detail: str) -> bool:
    """Store and print the pass/fail line of one criterion; returns ``passed``."""
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    RESULTS[criterion] = line
    print(line)
    return passed


def datasets():
    return (oracle_dataset(N_TRAIN, seed=TRAIN_SEED), oracle_dataset(N_HELDOUT, seed=HELDOUT_SEED),
            oracle_dataset(N_EVAL, seed=EVAL_SEED))


def _cache_dir() -> Path | None:
    d = os.environ.get("SCENEGEN_ACCEPTANCE_CACHE")
    if not d:
        return None
    p = Path(d)
    p.mkdir(parents=True, exist_ok=True)
    return p


def trained_model(mixtures: int, train, heldout, log=None) -> tuple[SceneGenModel, dict]:
    """Model with ``mixtures`` components trained by the fixed recipe, plus a summary dict.

    The summary holds the held-out NLL before and after training, the per-epoch
    metrics and the wall time of the training run.
    """
    cfg = ModelConfig.desk(mixtures=mixtures)
    cache = _cache_dir()
    tag = f"k{mixtures}_steps{RECIPE.steps}_lr{RECIPE.lr:g}"
    if cache is not None and (cache / f"{tag}.weights").exists() and (cache / f"{tag}.json").exists():
        params, header = load_weights(cache / f"{tag}.weights", dtype=np.float32)
        model = SceneGenModel(params, ModelConfig.from_dict(header["model"]))
        return model, json.loads((cache / f"{tag}.json").read_text())
    model = SceneGenModel.create(cfg, seed=INIT_SEED)
    init_nll = mean_nll(model, heldout)
    t0 = time.perf_counter()
    res = fit(model, train, RECIPE, val=heldout, log=log)
    wall = time.perf_counter() - t0
    summary = {"mixtures": mixtures, "init_heldout_nll": init_nll, "final_heldout_nll": res.metrics[-1]["val_nll"],
               "train_seconds": wall, "steps": res.steps, "metrics": res.metrics, "recipe": asdict(RECIPE)}
    if cache is not None:
        save_weights(cache / f"{tag}.weights", model.params, {"model": cfg.to_dict(), "train": asdict(RECIPE)})
        (cache / f"{tag}.json").write_text(json.dumps(summary, indent=1))
    return model, summary
