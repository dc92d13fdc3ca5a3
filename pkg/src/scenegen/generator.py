"""Autoregressive scene sampling with ordering masks, M-proposal selection and collision rejection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import distributions as D
from .model import SceneGenModel
from .raster import RasterConfig
from .scene import Actor, ActorClass, HDMap, OrientedBox, Scene, SDVState, canonical_order, collides_with_any, \
    wrap_angle


@dataclass(frozen=True)
class SamplerConfig:
    proposals: int = 10
    max_actors: int = 25
    max_rejections_per_actor: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.proposals < 1:
            raise ValueError("proposals must be at least 1")
        if self.max_actors < 1 or self.max_rejections_per_actor < 1:
            raise ValueError("max_actors and max_rejections_per_actor must be positive")


@dataclass
class ProposalRecord:
    """Log-densities of the M candidates drawn for one head and the index kept."""
    head: str
    candidates: list[float]
    chosen: int

    @property
    def kept(self) -> float:
        return self.candidates[self.chosen]


@dataclass
class GenerationTrace:
    rejections: int = 0
    skipped: int = 0
    mask_fallbacks: int = 0
    steps: int = 0
    proposals: list[list[ProposalRecord]] = field(default_factory=list)  # one list per placed actor
    placed: list[Actor] = field(default_factory=list)  # in generation order

    def kept_log_densities(self) -> list[float]:
        """Per placed actor, the summed log-density of the kept location, heading and velocity proposals."""
        return [sum(r.kept for r in recs) for recs in self.proposals]


def ordering_mask(last: Actor | None, cfg: RasterConfig) -> np.ndarray:
    """Bins that may hold the next actor given the last placed one (row = y bin, col = x bin)."""
    if last is None:
        return np.ones(cfg.shape, dtype=bool)
    r, c = cfg.to_bin(last.x, last.y)
    centers = cfg.centers()
    cx = centers[None, :]
    rows = np.arange(cfg.size)[:, None]
    cols = np.arange(cfg.size)[None, :]
    return (cx > last.x) | ((cols == c) & (rows >= r))


def _best_of(draw, log_prob, m: int, head: str):
    cands = [draw() for _ in range(m)]
    lps = [float(log_prob(v)) for v in cands]
    i = int(np.argmax(lps))
    return cands[i], ProposalRecord(head, lps, i)


def generate_scene(hdmap: HDMap, sdv: SDVState, model: SceneGenModel, cfg: SamplerConfig = SamplerConfig(),
                   trace: GenerationTrace | None = None) -> Scene:
    """Sample one scene conditioned on a map and the SDV.

    Class and box size take a single draw; location, heading and velocity keep
    the most likely of ``cfg.proposals`` draws.  A vehicle or bicyclist whose box
    collides with the SDV or an already placed box is discarded and the whole
    actor is redrawn, at most ``max_rejections_per_actor`` times before the step
    is skipped.
    """
    rc = model.cfg.raster
    trace = trace if trace is not None else GenerationTrace()
    rng = np.random.default_rng(cfg.seed)
    m = cfg.proposals
    ctx = model.map_context(model.prepare_map(hdmap))
    state = model.initial_state()
    placed: list[Actor] = []
    boxed: list[Actor] = [sdv.actor]
    last: Actor | None = None

    for _ in range(cfg.max_actors):
        trace.steps += 1
        out = model.step(ctx, model.prepare_actors(sdv, placed), state)
        state = out.state
        allowed = ordering_mask(last, rc)
        stop = False
        accepted = None
        for _attempt in range(cfg.max_rejections_per_actor):
            cls = ActorClass(out.class_probs.sample(rng))
            if cls is ActorClass.STOP:
                stop = True
                break
            try:
                loc = D.mask_and_renormalize(out.location(cls), allowed)
            except D.DegenerateMaskError:
                trace.mask_fallbacks += 1
                loc = out.location(cls)
            records = []
            (r, c), rec = _best_of(lambda: loc.sample_bin(rng), lambda b: loc.bin_log_prob(*b), m, "location")
            records.append(rec)
            same_col = last is not None and rc.to_bin(last.x, last.y)[1] == c
            x, y = loc.sample_in_bin(r, c, rng, x_min=last.x if same_col else None)
            heads = out.heads(cls, r, c)
            box = None
            heading = 0.0
            if cls.has_box:
                w, l = heads.box.sample(rng)
                heading, rec = _best_of(lambda: heads.heading.sample(rng), heads.heading.log_prob, m, "heading")
                records.append(rec)
                heading = wrap_angle(heading)
                box = OrientedBox(float(w), float(l), heading)
            (speed, omega), rec = _best_of(lambda: heads.velocity.sample(rng),
                                           lambda v: heads.velocity.log_prob(*v), m, "velocity")
            records.append(rec)
            speed = float(speed)
            if speed > 0.0:
                direction = wrap_angle(omega + heading) if cls.has_box else wrap_angle(omega)
            else:
                direction = 0.0
            cand = Actor(cls, float(x), float(y), box, speed, direction)
            if cls.has_box and collides_with_any(cand, boxed):
                trace.rejections += 1
                continue
            accepted = cand
            trace.proposals.append(records)
            break
        if stop:
            break
        if accepted is None:
            trace.skipped += 1
            continue
        placed.append(accepted)
        trace.placed.append(accepted)
        if accepted.cls.has_box:
            boxed.append(accepted)
        last = accepted
    return Scene(sdv, hdmap, canonical_order(placed), rc.region_m)


def generate_scenes(hdmap: HDMap, sdv: SDVState, model: SceneGenModel, n: int, cfg: SamplerConfig = SamplerConfig(),
                    traces: list | None = None) -> list[Scene]:
    """``n`` independent scenes; scene ``i`` uses seed ``cfg.seed + i``."""
    scenes = []
    for i in range(n):
        t = GenerationTrace()
        scenes.append(generate_scene(hdmap, sdv, model, SamplerConfig(cfg.proposals, cfg.max_actors,
                                                                      cfg.max_rejections_per_actor, cfg.seed + i), t))
        if traces is not None:
            traces.append(t)
    return scenes
