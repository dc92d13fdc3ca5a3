"""Rank scenes by per-actor NLL to surface unusual ones, here vehicles driving against a one-way lane.

    python demos/mine_violations.py path/to/model.weights

Without a weights file the fitted reference model (uniform location, one mixture
component per head) does the scoring.  It cannot see lane direction, so the
wrong-way scenes rank no higher than chance; a trained model moves them up.
"""
import sys

from scenegen.cli import load_model
from scenegen.metrics import fit_reference_model, mine
from scenegen.worldsim import oracle_dataset, wrong_way_scene


def main(weights: str | None) -> None:
    scenes = oracle_dataset(200, seed=3)
    n_normal = len(scenes)
    scenes += [wrong_way_scene(seed) for seed in range(5)]
    scorer = load_model(weights) if weights else fit_reference_model(oracle_dataset(200, seed=1))
    ranked = mine(scorer, scenes)
    for pos, (idx, score) in enumerate(ranked[:10], 1):
        tag = "wrong-way" if idx >= n_normal else ""
        print(f"{pos:3d}. scene {idx:4d}  {score:8.2f} nats/actor  {tag}")
    ranks = sorted(pos for pos, (idx, _) in enumerate(ranked, 1) if idx >= n_normal)
    print(f"wrong-way scenes at ranks {ranks} of {len(scenes)}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
