"""The autoregressive scene model: ConvLSTM backbone plus per-class distribution heads.

Two evaluation paths share the same parameters:

* :meth:`SceneGenModel.log_likelihood` runs teacher forcing over a whole scene,
  batching every non-recurrent computation across generation steps.  It builds
  an autodiff graph and is what training differentiates.
* :meth:`SceneGenModel.step` advances one generation step at a time and exposes
  the heads as distribution objects; the sampler and
  :meth:`SceneGenModel.sequential_log_likelihood` use it.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import distributions as D
from .nn import autograd as ag
from .nn.autograd import Tensor, no_grad
from .nn.layers import (avg_pool_spatial, conv_gn_relu, conv_lstm_cell, index_spatial, mlp3, take_rows,
                        unbind)
from .nn.params import ModelParams
from .raster import (ACTOR_CHANNELS, SPEED_CH, SPEED_LIMIT_CH, RasterConfig, rasterize_actors, rasterize_map,
                     rasterize_prefixes)
from .scene import BOXED, PLACEABLE, Actor, ActorClass, HDMap, Scene, SDVState, canonical_order, wrap_angle

HEAD_KEY = {ActorClass.VEHICLE: "vehicle", ActorClass.PEDESTRIAN: "pedestrian", ActorClass.BICYCLIST: "bicyclist"}
NUM_CLASSES = 4  # vehicle, pedestrian, bicyclist, stop
_SPEED_SCALE = 0.1  # speed channels enter the network in units of 10 m/s


@dataclass(frozen=True)
class ModelConfig:
    raster: RasterConfig = field(default_factory=RasterConfig)
    hidden: int = 32
    lstm_kernel: int = 5
    backbone_channels: int = 32
    backbone_layers: int = 5
    loc_channels: int = 32
    mlp_hidden: int = 32
    mixtures: int = 10
    groups: int = 8

    def __post_init__(self):
        if self.mixtures < 1:
            raise ValueError("need at least one mixture component")
        for name in ("hidden", "backbone_channels", "loc_channels"):
            if getattr(self, name) % self.groups:
                raise ValueError(f"{name} must be divisible by groups={self.groups}")
        if self.lstm_kernel % 2 == 0:
            raise ValueError("ConvLSTM kernel size must be odd")

    @property
    def velocity_components(self) -> int:
        return max(self.mixtures, 2)

    @classmethod
    def desk(cls, mixtures: int = 4, **kw) -> "ModelConfig":
        """Small configuration for CPU-scale training on a 64 x 64 raster."""
        base = dict(raster=RasterConfig(40.0, 1.25), hidden=16, lstm_kernel=3, backbone_channels=16,
                    backbone_layers=5, loc_channels=16, mlp_hidden=32, mixtures=mixtures, groups=4)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["raster"] = asdict(self.raster)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["raster"] = RasterConfig(**d["raster"])
        return cls(**d)


# --- parameter construction ----------------------------------------------------

_HEAD_OUT_SCALE = 0.1


def _kaiming(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _orthogonal(rng, rows, cols):
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    return q if rows >= cols else q.T


def head_sizes(cfg: ModelConfig) -> dict[str, int]:
    k, kv = cfg.mixtures, cfg.velocity_components
    return {"box": 6 * k, "heading": 4 * k, "vel_w": kv, "vel_s": 2 * (kv - 1), "vel_dir": 3 * (kv - 1)}


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    p = ModelParams()
    h, k = cfg.hidden, cfg.lstm_kernel
    cm = cfg.raster.map_channels
    fan0 = (cm + ACTOR_CHANNELS) * k * k
    p.add("lstm0.w_map", _kaiming(rng, (4 * h, cm, k, k), fan0))
    p.add("lstm0.w_actor", _kaiming(rng, (4 * h, ACTOR_CHANNELS, k, k), fan0))
    p.add("lstm1.w_x", _kaiming(rng, (4 * h, h, k, k), h * k * k))
    for layer in (0, 1):
        p.add(f"lstm{layer}.w_h", _orthogonal(rng, 4 * h, h * k * k).reshape(4 * h, h, k, k))
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0  # forget gate
        p.add(f"lstm{layer}.b", b)

    def conv_block(prefix, cin, cout, ks, norm=True):
        p.add(f"{prefix}.w", _kaiming(rng, (cout, cin, ks, ks), cin * ks * ks))
        p.add(f"{prefix}.b", np.zeros(cout))
        if norm:
            p.add(f"{prefix}.gamma", np.ones(cout))
            p.add(f"{prefix}.beta", np.zeros(cout))

    def mlp(prefix, cin, cout):
        dims = [cin, cfg.mlp_hidden, cfg.mlp_hidden, cout]
        for i in range(3):
            w = _kaiming(rng, (dims[i], dims[i + 1]), dims[i])
            # a small output layer starts every head near a broad, low-curvature density
            p.add(f"{prefix}.{i}.w", w * _HEAD_OUT_SCALE if i == 2 else w)
            p.add(f"{prefix}.{i}.b", np.zeros(dims[i + 1]))

    cin = h
    for i in range(cfg.backbone_layers):
        conv_block(f"backbone.{i}", cin, cfg.backbone_channels, 3)
        cin = cfg.backbone_channels
    c = cfg.backbone_channels
    mlp("class", c, NUM_CLASSES)
    sizes = head_sizes(cfg)
    for cls in PLACEABLE:
        key = HEAD_KEY[cls]
        conv_block(f"loc.{key}.0", c, cfg.loc_channels, 3)
        conv_block(f"loc.{key}.1", cfg.loc_channels, cfg.loc_channels, 3)
        conv_block(f"loc.{key}.2", cfg.loc_channels, 1, 1, norm=False)
        if cls in BOXED:
            mlp(f"box.{key}", c, sizes["box"])
            mlp(f"heading.{key}", c, sizes["heading"])
        for name in ("vel_w", "vel_s", "vel_dir"):
            mlp(f"{name}.{key}", c, sizes[name])
    p.freeze()
    return p.astype(dtype)


# --- likelihood records ----------------------------------------------------------

@dataclass(frozen=True)
class ActorLogProb:
    cls: ActorClass
    class_: float
    location: float = 0.0
    box: float = 0.0
    velocity: float = 0.0

    @property
    def total(self) -> float:
        return self.class_ + self.location + self.box + self.velocity

    def as_dict(self) -> dict:
        return {"class": self.cls.name.lower(), "class_term": self.class_, "location": self.location,
                "box": self.box, "velocity": self.velocity, "total": self.total}


@dataclass
class SceneLikelihood:
    total: Tensor                  # scalar log-likelihood (differentiable)
    records: list[ActorLogProb]

    @property
    def nll(self) -> float:
        return -float(self.total.data)


@dataclass(frozen=True)
class ActorHeads:
    """Distributions for one actor: its class distribution plus the heads of the given class and bin."""
    classes: D.Categorical
    location: D.QuantizedLocation | None = None
    box: D.LogNormal2Mixture | None = None
    heading: D.VonMisesMixture | None = None
    velocity: D.VelocityMixture | None = None


def velocity_angle(actor: Actor) -> float:
    """Direction as modelled: heading-relative for boxed actors, absolute for pedestrians."""
    if actor.speed == 0.0:
        return 0.0
    if actor.box is not None:
        return wrap_angle(actor.direction - actor.box.heading)
    return actor.direction


def actor_log_prob(heads: ActorHeads, actor: Actor | None) -> ActorLogProb:
    """Decomposed log-density of one actor; ``None`` stands for the stop token."""
    if actor is None:
        return ActorLogProb(ActorClass.STOP, heads.classes.log_prob(int(ActorClass.STOP)))
    cls = actor.cls
    class_lp = heads.classes.log_prob(int(cls))
    loc_lp = heads.location.log_prob(actor.x, actor.y)
    box_lp = 0.0
    if cls.has_box:
        box_lp = heads.box.log_prob(actor.box.width, actor.box.length) + heads.heading.log_prob(actor.box.heading)
    vel_lp = heads.velocity.log_prob(actor.speed, velocity_angle(actor))
    return ActorLogProb(cls, class_lp, loc_lp, float(box_lp), vel_lp)


# --- hard-mined location likelihood ------------------------------------------------------

def location_logp_grad(logits: np.ndarray, targets: np.ndarray, k: int | None = None):
    """Log-probability of each row's target bin, normalized over the ``k`` highest logits plus the target.

    ``logits``: (B, N); returns ``(lp, dlp/dlogits)``.  ``k=None`` or ``k >= N`` is the full softmax.
    """
    logits = np.asarray(logits, dtype=np.float64)
    b, n = logits.shape
    targets = np.asarray(targets, dtype=int)
    rows = np.arange(b)
    if k is None or k >= n:
        lsm = D.log_softmax(logits, axis=-1)
        grad = -np.exp(lsm)
        grad[rows, targets] += 1.0
        return lsm[rows, targets], grad
    lp = np.empty(b)
    grad = np.zeros_like(logits)
    for i in range(b):
        top = np.argpartition(-logits[i], k - 1)[:k]
        subset = np.union1d(top, [targets[i]])
        sub = logits[i, subset]
        m = sub.max()
        lse = m + math.log(np.exp(sub - m).sum())
        lp[i] = logits[i, targets[i]] - lse
        grad[i, subset] = -np.exp(sub - lse)
        grad[i, targets[i]] += 1.0
    return lp, grad


# --- the model ----------------------------------------------------------------------------

class StepOutput:
    """Outputs of one generation step; location grids and actor heads are computed on demand."""

    def __init__(self, model: "SceneGenModel", features: Tensor, class_logits: Tensor, state):
        self.model = model
        self.features = features
        self.class_probs = D.Categorical.from_logits(class_logits.data[0])
        self.state = state
        self._loc: dict[ActorClass, D.QuantizedLocation] = {}

    def location_logits(self, cls: ActorClass) -> np.ndarray:
        with no_grad():
            return self.model._location_logits(self.features, cls).data[0, 0].astype(np.float64)

    def location(self, cls: ActorClass) -> D.QuantizedLocation:
        if cls not in self._loc:
            self._loc[cls] = D.QuantizedLocation.from_logits(self.location_logits(cls), self.model.cfg.raster)
        return self._loc[cls]

    def heads(self, cls: ActorClass, row: int, col: int) -> ActorHeads:
        if cls is ActorClass.STOP:
            return ActorHeads(self.class_probs)
        with no_grad():
            f = index_spatial(self.features, [row], [col])
            raw = {name: t.data.astype(np.float64) for name, t in self.model._head_raw(f, cls).items()}
        k, kv = self.model.cfg.mixtures, self.model.cfg.velocity_components
        box = heading = None
        if cls.has_box:
            box = D.LogNormal2Mixture.from_raw(raw["box"][0], k)
            heading = D.VonMisesMixture.from_raw(raw["heading"][0], k)
        velocity = D.VelocityMixture.from_raw(raw["velocity"][0], kv)
        return ActorHeads(self.class_probs, self.location(cls), box, heading, velocity)

    def heads_for(self, actor: Actor | None) -> ActorHeads:
        if actor is None:
            return ActorHeads(self.class_probs)
        r, c = self.model.cfg.raster.to_bin(actor.x, actor.y)
        return self.heads(actor.cls, r, c)


class SceneGenModel:
    def __init__(self, params: ModelParams, cfg: ModelConfig):
        self.params = params
        self.cfg = cfg

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> "SceneGenModel":
        return cls(init_params(cfg, seed, dtype), cfg)

    @property
    def dtype(self):
        return self.params.dtype

    # --- inputs ------------------------------------------------------------------
    def prepare_map(self, hdmap: HDMap) -> np.ndarray:
        img = rasterize_map(hdmap, self.cfg.raster, dtype=self.dtype).data
        if self.cfg.raster.map_variant == "atg4d":
            img[SPEED_LIMIT_CH] *= _SPEED_SCALE
        return img

    def prepare_actors(self, sdv: SDVState, actors: Sequence[Actor]) -> np.ndarray:
        img = rasterize_actors(sdv, actors, self.cfg.raster, dtype=self.dtype).data
        img[SPEED_CH] *= _SPEED_SCALE
        return img

    def map_context(self, map_img: np.ndarray) -> Tensor:
        """Map contribution to the first ConvLSTM layer's gates (constant across steps)."""
        p = self.params
        return ag.conv2d(Tensor(map_img[None]), p["lstm0.w_map"], p["lstm0.b"])

    # --- network pieces ---------------------------------------------------------------
    def _backbone(self, h: Tensor) -> Tensor:
        for i in range(self.cfg.backbone_layers):
            h = conv_gn_relu(h, self.params, f"backbone.{i}", self.cfg.groups)
        return h

    def _class_logits(self, f: Tensor) -> Tensor:
        return mlp3(avg_pool_spatial(f), self.params, "class")

    def _location_logits(self, f: Tensor, cls: ActorClass) -> Tensor:
        key = HEAD_KEY[cls]
        x = conv_gn_relu(f, self.params, f"loc.{key}.0", self.cfg.groups)
        x = conv_gn_relu(x, self.params, f"loc.{key}.1", self.cfg.groups)
        return ag.conv2d(x, self.params[f"loc.{key}.2.w"], self.params[f"loc.{key}.2.b"])

    def _head_raw(self, feats: Tensor, cls: ActorClass) -> dict[str, Tensor]:
        key = HEAD_KEY[cls]
        p = self.params
        out = {}
        if cls.has_box:
            out["box"] = mlp3(feats, p, f"box.{key}")
            out["heading"] = mlp3(feats, p, f"heading.{key}")
        out["velocity"] = ag.concat([mlp3(feats, p, f"vel_w.{key}"), mlp3(feats, p, f"vel_s.{key}"),
                                     mlp3(feats, p, f"vel_dir.{key}")], axis=-1)
        return out

    # --- step-by-step path ----------------------------------------------------------------
    def initial_state(self):
        return [(None, None), (None, None)]

    def step(self, map_ctx: Tensor, actor_img: np.ndarray, state) -> StepOutput:
        """One generation step from the current actor raster (already prepared)."""
        p = self.params
        with no_grad():
            (h0, c0), (h1, c1) = state
            gx = map_ctx + ag.conv2d(Tensor(actor_img[None]), p["lstm0.w_actor"])
            h0, c0 = conv_lstm_cell(gx, h0, c0, p["lstm0.w_h"])
            h1, c1 = conv_lstm_cell(ag.conv2d(h0, p["lstm1.w_x"], p["lstm1.b"]), h1, c1, p["lstm1.w_h"])
            f = self._backbone(h1)
            logits = self._class_logits(f)
        return StepOutput(self, f, logits, [(h0, c0), (h1, c1)])

    def sequential_log_likelihood(self, scene: Scene) -> list[ActorLogProb]:
        """Per-actor decomposed log-densities computed one step at a time."""
        actors = canonical_order(scene.actors)
        with no_grad():
            ctx = self.map_context(self.prepare_map(scene.map))
        state = self.initial_state()
        records = []
        for i in range(len(actors) + 1):
            out = self.step(ctx, self.prepare_actors(scene.sdv, actors[:i]), state)
            state = out.state
            target = actors[i] if i < len(actors) else None
            records.append(actor_log_prob(out.heads_for(target), target))
        return records

    # --- teacher-forced batched path --------------------------------------------------------
    def log_likelihood(self, scene: Scene, hard_mining_k: int | None = None, window: int | None = None,
                       map_img: np.ndarray | None = None) -> SceneLikelihood:
        """Teacher-forced log-likelihood of a scene over its canonical actor order.

        ``window`` truncates scenes with more actors than the window to their first
        ``window`` actors and drops the stop term.  ``hard_mining_k`` restricts each
        location softmax to the hardest ``k`` bins plus the target.
        """
        cfg, p = self.cfg, self.params
        rc = cfg.raster
        actors = canonical_order(scene.actors)
        include_stop = True
        if window is not None and window < 1:
            raise ValueError("window must be at least 1")
        if window is not None and len(actors) > window:
            actors, include_stop = actors[:window], False
        steps = len(actors) + int(include_stop)
        if map_img is None:
            map_img = self.prepare_map(scene.map)
        act = rasterize_prefixes(scene.sdv, actors, rc, steps=steps, dtype=self.dtype)
        act[:, SPEED_CH] *= _SPEED_SCALE

        gx0 = ag.conv2d(Tensor(act), p["lstm0.w_actor"]) + self.map_context(map_img)
        h0s = self._run_layer(gx0, p["lstm0.w_h"])
        gx1 = ag.conv2d(ag.concat(h0s, axis=0), p["lstm1.w_x"], p["lstm1.b"])
        h1s = self._run_layer(gx1, p["lstm1.w_h"])
        f = self._backbone(ag.concat(h1s, axis=0))

        targets = [int(a.cls) for a in actors] + ([int(ActorClass.STOP)] if include_stop else [])
        # float64 log-softmax so the scene total equals the sum of the per-actor records
        class_lp = ag.function(self._class_logits(f), lambda z: location_logp_grad(z, np.array(targets)))
        terms = [class_lp.sum()]
        loc_v = np.zeros(steps)
        box_v = np.zeros(steps)
        vel_v = np.zeros(steps)
        loc_const = -2.0 * math.log(rc.resolution_m)
        k, kv = cfg.mixtures, cfg.velocity_components

        for cls in PLACEABLE:
            idx = [i for i, a in enumerate(actors) if a.cls is cls]
            if not idx:
                continue
            group = [actors[i] for i in idx]
            bins = np.array([rc.to_bin(a.x, a.y) for a in group])
            rows, cols = bins[:, 0], bins[:, 1]
            fc = f if len(idx) == steps else take_rows(f, idx)
            logits = self._location_logits(fc, cls).reshape(len(idx), rc.size * rc.size)
            flat = rows * rc.size + cols
            loc_lp = ag.function(logits, lambda L: location_logp_grad(L, flat, hard_mining_k))
            terms.append(loc_lp.sum())
            loc_v[idx] = loc_lp.data + loc_const

            raw = self._head_raw(index_spatial(f, rows, cols, steps=idx), cls)
            if cls.has_box:
                w = np.array([a.box.width for a in group])
                l = np.array([a.box.length for a in group])
                th = np.array([a.box.heading for a in group])
                size_lp = ag.function(raw["box"], lambda r: D.lognormal2_mixture_logp_grad(r, w, l, k))
                head_lp = ag.function(raw["heading"], lambda r: D.von_mises_mixture_logp_grad(r, th, k))
                terms += [size_lp.sum(), head_lp.sum()]
                box_v[idx] = size_lp.data + head_lp.data
            speed = np.array([a.speed for a in group])
            omega = np.array([velocity_angle(a) for a in group])
            vel_lp = ag.function(raw["velocity"], lambda r: D.velocity_logp_grad(r, speed, omega, kv))
            terms.append(vel_lp.sum())
            vel_v[idx] = vel_lp.data

        total = terms[0]
        for t in terms[1:]:
            total = total + t
        n_loc = len(actors)
        total = total + loc_const * n_loc
        records = []
        for i in range(steps):
            cls = ActorClass(targets[i])
            records.append(ActorLogProb(cls, float(class_lp.data[i]), float(loc_v[i]), float(box_v[i]),
                                        float(vel_v[i])))
        return SceneLikelihood(total, records)

    def _run_layer(self, gates_x: Tensor, w_h: Tensor) -> list[Tensor]:
        hs, h, c = [], None, None
        for g in unbind(gates_x):
            h, c = conv_lstm_cell(g, h, c, w_h)
            hs.append(h)
        return hs

    def scene_nll(self, scene: Scene, map_img: np.ndarray | None = None) -> float:
        with no_grad():
            return self.log_likelihood(scene, map_img=map_img).nll

    def scene_features(self, scene: Scene, map_img: np.ndarray | None = None) -> np.ndarray:
        """Spatially pooled backbone features of the complete scene, from the zero state."""
        if map_img is None:
            map_img = self.prepare_map(scene.map)
        with no_grad():
            out = self.step(self.map_context(map_img), self.prepare_actors(scene.sdv, scene.actors),
                            self.initial_state())
            return avg_pool_spatial(out.features).data[0].astype(np.float64)


def scene_nll(scene: Scene, model: SceneGenModel) -> float:
    """Negative log-likelihood of a scene in nats."""
    return model.scene_nll(scene)
