"""Maximum-likelihood training with teacher forcing, truncated windows and hard-mined location loss."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import SceneGenModel, location_logp_grad
from .nn.optim import Adam
from .nn.params import save_weights
from .scene import Scene, rotate_scene


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    bptt_window: int = 25
    hard_mining_k: int = 10000
    epochs: int = 1
    seed: int = 0
    augment_rotation: bool = True
    steps: int | None = None          # stop after this many updates, whatever the epoch count
    grad_clip: float | None = None

    def __post_init__(self):
        if self.hard_mining_k < 1:
            raise ValueError("hard_mining_k must be at least 1")
        if self.batch_size < 1 or self.bptt_window < 1 or self.epochs < 1:
            raise ValueError("batch_size, bptt_window and epochs must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def location_loss_hard_mined(grid_logits: np.ndarray, target_bin, k: int) -> float:
    """Cross-entropy of the target bin with the softmax restricted to the top ``k`` bins plus the target.

    ``target_bin`` is a flat index or a ``(row, col)`` pair; ``k`` is clamped to the grid size.
    """
    logits = np.asarray(grid_logits, dtype=np.float64)
    flat = logits.reshape(1, -1)
    if isinstance(target_bin, (tuple, list, np.ndarray)) and np.ndim(target_bin) == 1:
        target = int(np.ravel_multi_index(tuple(int(t) for t in target_bin), logits.shape))
    else:
        target = int(target_bin)
    if not 0 <= target < flat.shape[1]:
        raise ValueError("target bin out of range")
    lp, _ = location_logp_grad(flat, np.array([target]), min(int(k), flat.shape[1]))
    return float(-lp[0])


def _rotated(scene: Scene, rng: np.random.Generator | None) -> Scene:
    if rng is None:
        return scene
    return rotate_scene(scene, float(rng.uniform(0.0, 2.0 * math.pi)))


def scene_loss(scene: Scene, model: SceneGenModel, cfg: TrainConfig, rng: np.random.Generator | None = None,
               weight: float = 1.0, map_img: np.ndarray | None = None) -> float:
    """Negative log-likelihood of one scene; ``weight * dloss/dparams`` is added to the parameter grads.

    A rotation is applied when ``cfg.augment_rotation`` and an ``rng`` are given.
    """
    if cfg.augment_rotation and rng is not None:
        scene, map_img = _rotated(scene, rng), None
    k = min(cfg.hard_mining_k, model.cfg.raster.size ** 2)
    lik = model.log_likelihood(scene, hard_mining_k=k, window=cfg.bptt_window, map_img=map_img)
    loss = -float(lik.total.data)
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss in the {_bad_head(lik.records)} head")
    (lik.total * (-weight)).backward()
    return loss


def _bad_head(records) -> str:
    for r in records:
        for name, v in (("class", r.class_), ("location", r.location), ("box", r.box), ("velocity", r.velocity)):
            if not math.isfinite(v):
                return name
    return "unknown"


def _check_grads(model: SceneGenModel) -> None:
    for name, t in model.params.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise TrainingError(f"non-finite gradient in parameter {name}")


@dataclass
class FitResult:
    model: SceneGenModel
    metrics: list[dict]
    steps: int


def mean_nll(model: SceneGenModel, scenes: Sequence[Scene], map_cache: dict | None = None) -> float:
    if not scenes:
        return float("nan")
    total = 0.0
    for s in scenes:
        img = None if map_cache is None else _cached_map(model, s, map_cache)
        total += model.scene_nll(s, map_img=img)
    return total / len(scenes)


def _cached_map(model: SceneGenModel, scene: Scene, cache: dict) -> np.ndarray:
    key = id(scene.map)
    hit = cache.get(key)
    if hit is None or hit[0] is not scene.map:
        hit = cache[key] = (scene.map, model.prepare_map(scene.map))
    return hit[1]


def fit(model: SceneGenModel, train: Sequence[Scene], cfg: TrainConfig, val: Sequence[Scene] = (),
        out_dir: str | Path | None = None, log: Callable[[dict], None] | None = None) -> FitResult:
    """Train ``model`` in place with Adam.

    Each epoch visits the training scenes in a seeded random order, in batches
    whose gradient is the mean over scenes.  With ``cfg.steps`` set, training
    stops after that many updates.  When ``out_dir`` is given, one line per
    epoch is appended to ``metrics.jsonl`` and a checkpoint is written per epoch.
    """
    if not train:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    aug_rng = np.random.default_rng([cfg.seed, 1]) if cfg.augment_rotation else None
    opt = Adam(model.params, lr=cfg.lr, grad_clip=cfg.grad_clip)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")
    cache: dict = {}
    metrics = []
    step = 0
    epoch = 0
    max_epochs = cfg.epochs if cfg.steps is None else math.inf
    t0 = time.perf_counter()
    while epoch < max_epochs and (cfg.steps is None or step < cfg.steps):
        epoch += 1
        order = rng.permutation(len(train))
        losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            if cfg.steps is not None and step >= cfg.steps:
                break
            batch = [train[i] for i in order[b0:b0 + cfg.batch_size]]
            opt.zero_grad()
            for s in batch:
                img = None if cfg.augment_rotation else _cached_map(model, s, cache)
                losses.append(scene_loss(s, model, cfg, aug_rng, weight=1.0 / len(batch), map_img=img))
            _check_grads(model)
            opt.step()
            step += 1
        val_cache = cache if not cfg.augment_rotation else {}
        row = {"epoch": epoch, "step": step, "train_nll": float(np.mean(losses)) if losses else float("nan"),
               "val_nll": mean_nll(model, val, val_cache) if val else None,
               "wall_s": round(time.perf_counter() - t0, 3)}
        metrics.append(row)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            save_weights(out / f"epoch_{epoch:04d}.weights", model.params, {"model": model.cfg.to_dict(),
                                                                            "train": asdict(cfg), "epoch": epoch})
        if log is not None:
            log(row)
    return FitResult(model, metrics, step)
