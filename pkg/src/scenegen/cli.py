"""Command-line interface: data generation, training, sampling, baselines, evaluation, NLL, mining, rendering."""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path
from xml.sax.saxutils import escape

from .generator import SamplerConfig, generate_scene
from .io import SceneParseError, actor_from_dict, load_map, load_scene, save_scene
from .metrics import eval_report, normalized_nll
from .model import ModelConfig, SceneGenModel
from .nn.autograd import no_grad
from .nn.params import WeightFormatError, load_weights, save_weights
from .scene import ActorClass, Scene, SDVState
from .trainer import TrainConfig, TrainingError, fit
from .worldsim import GrammarPrior, ProceduralParams, fit_size_kde, sample_grammar_scene, sample_procedural_scene, \
    write_dataset

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# --- config and data helpers ------------------------------------------------------------------

def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        text = p.read_bytes()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        if p.suffix == ".toml":
            return tomllib.loads(text.decode())
        return json.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from None


def _merge(section: dict, overrides: dict) -> dict:
    out = dict(section)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def _build(cls, values: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {what} option(s): {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {what} configuration: {e}") from None


def model_config_from(values: dict) -> ModelConfig:
    values = dict(values)
    raster = values.pop("raster", None)
    base = ModelConfig.desk().to_dict()
    if raster is not None:
        base["raster"].update(raster)
    base.update(values)
    try:
        return ModelConfig.from_dict(base)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid model configuration: {e}") from None


def read_manifest(data_dir: str | Path) -> list[Scene]:
    root = Path(data_dir)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise DataError(f"{manifest} not found")
    scenes = []
    for i, line in enumerate(manifest.read_text().splitlines()):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            scenes.append(load_scene(root / entry["scene_path"]))
        except (ValueError, KeyError) as e:
            raise DataError(f"{manifest}:{i + 1}: {e}") from None
    if not scenes:
        raise DataError(f"{manifest} lists no scenes")
    return scenes


def load_model(path: str) -> SceneGenModel:
    try:
        params, header = load_weights(path)
    except OSError as e:
        raise DataError(f"cannot read weights {path}: {e.strerror}") from None
    cfg = header.get("model")
    if cfg is None:
        raise DataError(f"{path}: weight header lacks a model configuration")
    return SceneGenModel(params, ModelConfig.from_dict(cfg))


def load_sdv(arg: str | None) -> SDVState:
    """``None`` gives a stationary SDV facing +x; otherwise a JSON file with an actor, a scene, or {heading, speed}."""
    if arg is None:
        return SDVState.default()
    try:
        d = json.loads(Path(arg).read_text())
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read SDV file {arg}: {e}") from None
    if "sdv" in d:
        d = d["sdv"]
    if "class" in d:
        return SDVState(actor_from_dict(d, "sdv"))
    return SDVState.default(float(d.get("heading", 0.0)), float(d.get("speed", 0.0)))


def _jobs(n: int | None) -> int:
    return max(1, n if n is not None else (os.cpu_count() or 1))


def _pmap(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# --- commands ------------------------------------------------------------------------------

def cmd_gen_data(a) -> int:
    cfg = load_config(a.config).get("data", {})
    opts = _merge(cfg, {"n": a.n, "seed": a.seed, "style": a.style})
    n = int(opts.get("n", 100))
    if n < 0:
        raise ConfigError("--n must be non-negative")
    manifest = write_dataset(a.out, n, int(opts.get("seed", 0)), opts.get("style"))
    print(json.dumps({"manifest": str(manifest), "scenes": n}))
    return 0


def cmd_train(a) -> int:
    conf = load_config(a.config)
    mcfg = model_config_from(_merge(conf.get("model", {}), {"mixtures": a.mixtures}))
    tvals = _merge(conf.get("train", {}), {"lr": a.lr, "batch_size": a.batch_size, "epochs": a.epochs,
                                           "steps": a.steps, "seed": a.seed})
    if a.no_augment:
        tvals["augment_rotation"] = False
    tcfg = _build(TrainConfig, tvals, "train")
    scenes = read_manifest(a.data)
    n_val = int(round(len(scenes) * a.val_fraction))
    train, val = scenes[n_val:], scenes[:n_val]
    if not train:
        raise ConfigError("no training scenes left after the validation split")
    model = SceneGenModel.create(mcfg, seed=tcfg.seed)
    try:
        res = fit(model, train, tcfg, val, a.out)
    except TrainingError as e:
        raise DataError(str(e)) from None
    save_weights(Path(a.out) / "final.weights", model.params, {"model": mcfg.to_dict(), "train": asdict(tcfg)})
    print(json.dumps({"steps": res.steps, "epochs": len(res.metrics), "final": res.metrics[-1]}))
    return 0


def _sample_job(job):
    model, hdmap, sdv, cfg = job
    return generate_scene(hdmap, sdv, model, cfg)


def cmd_sample(a) -> int:
    model = load_model(a.weights)
    hdmap = load_map(a.map)
    sdv = load_sdv(a.sdv)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        base = SamplerConfig(proposals=a.M, max_actors=a.max_actors, seed=a.seed)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    jobs = [(model, hdmap, sdv, SamplerConfig(base.proposals, base.max_actors, base.max_rejections_per_actor,
                                              a.seed + i)) for i in range(a.n)]
    scenes = _pmap(_sample_job, jobs, _jobs(a.jobs))
    map_ref = os.path.relpath(Path(a.map).resolve(), out.resolve())
    for i, s in enumerate(scenes):
        save_scene(out / f"sample_{i:05d}.json", s, map_ref=map_ref)
    print(json.dumps({"scenes": len(scenes), "actors": [len(s.actors) for s in scenes]}))
    return 0


def _baseline_job(job):
    method, hdmap, sdv, seed, kde = job
    if method == "grammar":
        return sample_grammar_scene(hdmap, sdv, GrammarPrior(), seed)
    return sample_procedural_scene(hdmap, sdv, kde, ProceduralParams(), seed)


def cmd_baseline(a) -> int:
    hdmap = load_map(a.map)
    sdv = load_sdv(a.sdv)
    kde = None
    if a.method == "procedural":
        if a.data is None:
            raise ConfigError("the procedural baseline needs --data to fit its size distribution")
        kde = fit_size_kde(read_manifest(a.data))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = _pmap(_baseline_job, [(a.method, hdmap, sdv, a.seed + i, kde) for i in range(a.n)], _jobs(a.jobs))
    map_ref = os.path.relpath(Path(a.map).resolve(), out.resolve())
    for i, s in enumerate(scenes):
        save_scene(out / f"{a.method}_{i:05d}.json", s, map_ref=map_ref)
    print(json.dumps({"scenes": len(scenes), "actors": [len(s.actors) for s in scenes]}))
    return 0


def cmd_eval(a) -> int:
    model = load_model(a.weights)
    eval_set = read_manifest(a.eval_data)
    if a.n is not None:
        eval_set = eval_set[:a.n]
    methods = [m.strip() for m in a.methods.split(",") if m.strip()]
    bad = set(methods) - {"scenegen", "grammar", "procedural"}
    if bad:
        raise ConfigError(f"unknown method(s): {', '.join(sorted(bad))}")
    samples = {}
    kde = fit_size_kde(read_manifest(a.train_data)) if a.train_data else fit_size_kde(eval_set)
    for m in methods:
        if m == "scenegen":
            jobs = [(model, s.map, s.sdv, SamplerConfig(proposals=a.M, seed=a.seed + i)) for i, s in enumerate(eval_set)]
            samples[m] = _pmap(_sample_job, jobs, _jobs(a.jobs))
        else:
            samples[m] = [_baseline_job((m, s.map, s.sdv, a.seed + i, kde)) for i, s in enumerate(eval_set)]
    nll = {"scenegen": model.scene_nll} if "scenegen" in methods else {}
    report = eval_report(eval_set, samples, model, nll, vehicles_only=a.vehicles_only)
    text = json.dumps(report, indent=2, sort_keys=True)
    Path(a.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_nll(a) -> int:
    model = load_model(a.weights)
    scene = load_scene(a.scene)
    with no_grad():
        lik = model.log_likelihood(scene)
    out = {"scene_nll": lik.nll, "normalized_nll": normalized_nll(lik.nll, scene),
           "terms": [r.as_dict() for r in lik.records]}
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_mine(a) -> int:
    model = load_model(a.weights)
    root = Path(a.data)
    manifest = root / "manifest.jsonl"
    scenes = read_manifest(root)
    paths = [json.loads(l)["scene_path"] for l in manifest.read_text().splitlines() if l.strip()]
    scores = sorted(((normalized_nll(model.scene_nll(s), s), i) for i, s in enumerate(scenes)),
                    key=lambda t: (-t[0], t[1]))
    for score, i in scores[:a.top]:
        print(json.dumps({"rank_score": score, "scene_path": paths[i], "actors": len(scenes[i].actors)}))
    return 0


# --- rendering -------------------------------------------------------------------------------

COLORS = {"sdv": "#d62728", ActorClass.VEHICLE: "#1f77b4", ActorClass.PEDESTRIAN: "#ff7f0e",
          ActorClass.BICYCLIST: "#2ca02c", "map": "#d9d9d9", "lane": "#c4c4c4", "crosswalk": "#7f7f7f"}


def render_svg(scene: Scene, px_per_m: float = 10.0) -> str:
    """SVG 1.1 drawing of a scene: one ``rect`` per boxed actor (SDV included), circles for pedestrians."""
    r = scene.region
    size = 2 * r * px_per_m

    def pt(x, y):
        return (x + r) * px_per_m, (r - y) * px_per_m

    def poly(points, fill, stroke="none"):
        coords = " ".join("%.2f,%.2f" % pt(x, y) for x, y in points)
        return f'<polygon points="{coords}" fill="{fill}" stroke="{stroke}" stroke-width="0.5"/>'

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{size:.0f}" height="{size:.0f}" '
             f'viewBox="0 0 {size:.0f} {size:.0f}" style="background:#ffffff">',
             f"<title>{escape(f'scene with {len(scene.actors)} actors')}</title>"]
    parts += [poly(p, COLORS["map"]) for p in scene.map.drivable_area]
    parts += [poly(s.polygon, "none", COLORS["lane"]) for s in scene.map.lane_segments]
    parts += [poly(c, COLORS["crosswalk"]) for c in scene.map.crosswalks]

    def box(a, color):
        cx, cy = pt(a.x, a.y)
        w, l = a.box.width * px_per_m, a.box.length * px_per_m
        deg = -math.degrees(a.box.heading)
        return (f'<rect x="{cx - l / 2:.2f}" y="{cy - w / 2:.2f}" width="{l:.2f}" height="{w:.2f}" fill="{color}" '
                f'transform="rotate({deg:.3f} {cx:.2f} {cy:.2f})"/>')

    parts.append(box(scene.sdv.actor, COLORS["sdv"]))
    for a in scene.actors:
        if a.box is not None:
            parts.append(box(a, COLORS[a.cls]))
        else:
            cx, cy = pt(a.x, a.y)
            parts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{0.4 * px_per_m:.2f}" fill="{COLORS[a.cls]}"/>')
        if a.speed > 0:
            x0, y0 = pt(a.x, a.y)
            x1, y1 = pt(a.x + 0.5 * a.speed * math.cos(a.direction), a.y + 0.5 * a.speed * math.sin(a.direction))
            parts.append(f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y1:.2f}" stroke="#000000" '
                         f'stroke-width="1"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_render(a) -> int:
    scene = load_scene(a.scene)
    Path(a.out).write_text(render_svg(scene))
    return 0


# --- entry point -------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors: exit 2 with a JSON diagnostic."""

    def error(self, message):
        sys.exit(_fail(2, "config", f"{self.prog}: {message}"))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scenegen", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic maps and ground-truth scenes")
    g.add_argument("--style", choices=["straight", "curved", "intersection"])
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--jobs", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fit a scene model")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--mixtures", type=int)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--val-fraction", type=float, default=0.1)
    t.add_argument("--jobs", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate scenes with a trained model")
    s.add_argument("--weights", required=True)
    s.add_argument("--map", required=True)
    s.add_argument("--sdv")
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--M", type=int, default=10)
    s.add_argument("--max-actors", type=int, default=25)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int)
    s.set_defaults(func=cmd_sample)

    b = sub.add_parser("baseline", help="generate scenes with a heuristic baseline")
    b.add_argument("--method", choices=["grammar", "procedural"], required=True)
    b.add_argument("--map", required=True)
    b.add_argument("--sdv")
    b.add_argument("--data", help="scene corpus for the procedural size distribution")
    b.add_argument("--n", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.add_argument("--jobs", type=int)
    b.set_defaults(func=cmd_baseline)

    e = sub.add_parser("eval", help="NLL and MMD report against an evaluation set")
    e.add_argument("--weights", required=True)
    e.add_argument("--eval-data", required=True)
    e.add_argument("--train-data")
    e.add_argument("--methods", default="scenegen,grammar,procedural")
    e.add_argument("--n", type=int)
    e.add_argument("--M", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--vehicles-only", action="store_true")
    e.add_argument("--out", required=True)
    e.add_argument("--jobs", type=int)
    e.set_defaults(func=cmd_eval)

    n = sub.add_parser("nll", help="per-actor decomposed NLL of one scene")
    n.add_argument("--weights", required=True)
    n.add_argument("--scene", required=True)
    n.set_defaults(func=cmd_nll)

    m = sub.add_parser("mine", help="scenes with the highest per-actor NLL")
    m.add_argument("--weights", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--top", type=int, default=10)
    m.set_defaults(func=cmd_mine)

    r = sub.add_parser("render", help="draw a scene as SVG")
    r.add_argument("--scene", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help, or a usage error already reported
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        return _fail(2, "config", str(e))
    except (DataError, SceneParseError, WeightFormatError) as e:
        return _fail(3, "data", str(e))
    except FileNotFoundError as e:
        return _fail(3, "data", f"{e.filename}: not found")
    except (OSError, ValueError) as e:
        return _fail(3, "data", str(e))


if __name__ == "__main__":
    sys.exit(main())
