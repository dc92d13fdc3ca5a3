"""Train a small scene model on the synthetic world, then sample, score and draw a scene.

    python demos/train_and_sample.py [out_dir]

Runs in about a minute on one core.  The model is far smaller than the desk
configuration used by the acceptance tests, so its samples are rough.
"""
import sys
from pathlib import Path

from scenegen.cli import render_svg
from scenegen.generator import GenerationTrace, SamplerConfig, generate_scene
from scenegen.io import save_scene
from scenegen.model import ModelConfig, SceneGenModel
from scenegen.raster import RasterConfig
from scenegen.trainer import TrainConfig, fit, mean_nll
from scenegen.worldsim import oracle_dataset

CONFIG = ModelConfig(raster=RasterConfig(40.0, 2.5), hidden=8, lstm_kernel=3, backbone_channels=8,
                     backbone_layers=3, loc_channels=8, mlp_hidden=16, mixtures=2, groups=2)


def main(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    train, val = oracle_dataset(60, seed=1), oracle_dataset(20, seed=2)
    model = SceneGenModel.create(CONFIG, seed=0)
    print(f"held-out NLL at init: {mean_nll(model, val):.1f} nats")
    fit(model, train, TrainConfig(lr=3e-3, batch_size=1, steps=120, augment_rotation=False, seed=0), val=val,
        log=lambda row: print(f"  step {row['step']}: val NLL {row['val_nll']:.1f}"))

    target = val[0]
    trace = GenerationTrace()
    scene = generate_scene(target.map, target.sdv, model, SamplerConfig(proposals=10, seed=3), trace)
    print(f"sampled {len(scene.actors)} actors ({trace.rejections} collision rejections)")
    save_scene(out / "sample.json", scene)
    (out / "sample.svg").write_text(render_svg(scene))

    print("per-actor log-density of the sample:")
    for rec in model.sequential_log_likelihood(scene):
        d = rec.as_dict()
        print(f"  {d['class']:<10} class {d['class_term']:7.2f}  location {d['location']:7.2f}  "
              f"box {d['box']:7.2f}  velocity {d['velocity']:7.2f}")
    print(f"wrote {out / 'sample.json'} and {out / 'sample.svg'}")


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out"))
