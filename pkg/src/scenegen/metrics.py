"""Scene statistics, MMD estimators, a closed-form reference likelihood, and NLL-based outlier mining."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import brentq

from . import distributions as D
from .scene import PLACEABLE, ActorClass, Scene, canonical_order, wrap_angle

N_BINS = 16
SIZE_EDGES = np.linspace(0.0, 40.0, N_BINS + 1)        # box area, m^2
SPEED_EDGES = np.linspace(0.0, 40.0, N_BINS + 1)       # m/s
HEADING_EDGES = np.linspace(0.0, 2 * math.pi, N_BINS + 1)  # relative to the SDV heading
STATISTICS = ("class", "size", "speed", "heading")


def _hist(values: Sequence[float], edges: np.ndarray) -> np.ndarray:
    h = np.zeros(len(edges) - 1)
    if len(values) == 0:
        return h
    width = edges[1] - edges[0]
    idx = np.clip(np.floor((np.asarray(values, dtype=float) - edges[0]) / width).astype(int), 0, len(h) - 1)
    np.add.at(h, idx, 1.0)
    return h / h.sum()


@dataclass(frozen=True)
class SceneStats:
    class_hist: np.ndarray
    size_hist: np.ndarray
    speed_hist: np.ndarray
    heading_hist: np.ndarray

    def hist(self, name: str) -> np.ndarray:
        return getattr(self, f"{name}_hist")

    def is_empty(self, name: str) -> bool:
        return not self.hist(name).any()


def scene_stats(s: Scene, vehicles_only: bool = False) -> SceneStats:
    """Per-scene histograms of class, box area, speed, and heading relative to the SDV.

    Sizes and headings come from boxed actors only (pedestrians have no box).
    Histograms with nothing to count are all zero.
    """
    actors = [a for a in s.actors if not vehicles_only or a.cls is ActorClass.VEHICLE]
    classes = np.zeros(3)
    for a in actors:
        classes[int(a.cls)] += 1
    if classes.sum():
        classes /= classes.sum()
    sdv_heading = s.sdv.actor.box.heading
    boxed = [a for a in actors if a.box is not None]
    return SceneStats(
        classes,
        _hist([a.box.width * a.box.length for a in boxed], SIZE_EDGES),
        _hist([a.speed for a in actors], SPEED_EDGES),
        _hist([wrap_angle(a.box.heading - sdv_heading) for a in boxed], HEADING_EDGES),
    )


def tv_hist(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def tv_distance(p: SceneStats, q: SceneStats) -> float:
    """Mean over the four statistics of the total variation distance between histograms."""
    return float(np.mean([tv_hist(p.hist(n), q.hist(n)) for n in STATISTICS]))


# --- MMD -------------------------------------------------------------------------------------

def gaussian_kernel(d: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    return np.exp(-np.square(d) / (2.0 * sigma * sigma))


def exponential_kernel(d: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Alternative composition exp(-d / 2 sigma^2)."""
    return np.exp(-np.asarray(d) / (2.0 * sigma * sigma))


KERNELS = {"gaussian": gaussian_kernel, "exponential": exponential_kernel}


def tv_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise total variation between rows of two histogram arrays."""
    return 0.5 * np.abs(a[:, None, :] - b[None, :, :]).sum(-1)


def euclidean_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(sq, 0.0))


def mmd2(P, Q, distance: Callable[[np.ndarray, np.ndarray], np.ndarray] = euclidean_matrix,
         sigma: float = 1.0, kernel: str = "gaussian") -> float:
    """Biased (V-statistic) MMD^2 between two samples of vectors, diagonal terms included."""
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    if P.shape[0] == 0 or Q.shape[0] == 0 or P.size == 0 or Q.size == 0:
        raise ValueError("MMD needs two non-empty samples")
    k = KERNELS[kernel]
    kxx = k(distance(P, P), sigma).mean()
    kyy = k(distance(Q, Q), sigma).mean()
    kxy = k(distance(P, Q), sigma).mean()
    return float(kxx + kyy - 2.0 * kxy)


def mmd2_from_distances(dxx: np.ndarray, dyy: np.ndarray, dxy: np.ndarray, sigma: float = 1.0,
                        kernel: str = "gaussian") -> float:
    k = KERNELS[kernel]
    return float(k(dxx, sigma).mean() + k(dyy, sigma).mean() - 2.0 * k(dxy, sigma).mean())


def stat_mmd(P: Sequence[Scene], Q: Sequence[Scene], name: str, vehicles_only: bool = False,
             sigma: float = 1.0, kernel: str = "gaussian") -> float:
    """MMD^2 of one scene statistic with a TV-distance kernel.

    Empty scenes, and scenes whose histogram for this statistic is empty, are dropped from both sets.
    """
    def hists(scenes):
        out = []
        for s in scenes:
            st = scene_stats(s, vehicles_only)
            if not st.is_empty("class") and not st.is_empty(name):
                out.append(st.hist(name))
        return np.array(out)
    a, b = hists(P), hists(Q)
    if len(a) == 0 or len(b) == 0:
        return float("nan")
    return mmd2(a, b, tv_matrix, sigma, kernel)


def scene_features(model, scenes: Sequence[Scene]) -> np.ndarray:
    return np.stack([model.scene_features(s) for s in scenes])


def feature_mmd(P: Sequence[Scene], Q: Sequence[Scene], model, sigma: float = 1.0) -> float:
    """MMD^2 between pooled backbone features of a scene model, Gaussian kernel on Euclidean distance."""
    P = [s for s in P if s.actors]
    Q = [s for s in Q if s.actors]
    if not P or not Q:
        return float("nan")
    return mmd2(scene_features(model, P), scene_features(model, Q), euclidean_matrix, sigma)


# --- reference likelihood model ---------------------------------------------------------------

def _fit_von_mises(theta: np.ndarray) -> tuple[float, float]:
    """Maximum-likelihood mean direction and concentration."""
    c, s = np.cos(theta).mean(), np.sin(theta).mean()
    mu = math.atan2(s, c) % (2 * math.pi)
    rbar = min(math.hypot(c, s), 1.0 - 1e-9)
    if rbar < 1e-6:
        return mu, 1e-6
    kappa = brentq(lambda k: float(D.bessel_ratio(k)) - rbar, 1e-8, 1e7)
    return mu, kappa


def _fit_lognormal2(w: np.ndarray, l: np.ndarray) -> D.LogNormal2Mixture:
    x = np.stack([np.log(w), np.log(l)], 1)
    mean = x.mean(0)
    cov = np.cov(x.T, bias=True) + 1e-6 * np.eye(2)
    s = np.sqrt(np.diag(cov))
    rho = float(np.clip(cov[0, 1] / (s[0] * s[1]), -0.999, 0.999))
    return D.LogNormal2Mixture(np.ones(1), mean[None], np.log(s)[None], np.array([rho]))


@dataclass
class ClassReference:
    box: D.LogNormal2Mixture | None
    heading: D.VonMisesMixture | None
    velocity: D.VelocityMixture


@dataclass
class ReferenceModel:
    """Uniform location plus single-component maximum-likelihood fits of every other head.

    The class distribution is fitted over all generation steps (actors and the
    stop token).  Velocity directions are heading-relative for boxed classes,
    matching the learned model's parameterization.
    """
    classes: D.Categorical
    per_class: dict
    region: float

    def actor_log_prob(self, a) -> float:
        ref = self.per_class[a.cls]
        lp = self.classes.log_prob(int(a.cls)) - 2.0 * math.log(2.0 * self.region)
        if a.box is not None:
            lp += ref.box.log_prob(a.box.width, a.box.length) + ref.heading.log_prob(a.box.heading)
        omega = 0.0 if a.speed == 0 else (wrap_angle(a.direction - a.box.heading) if a.box else a.direction)
        return lp + ref.velocity.log_prob(a.speed, omega)

    def scene_nll(self, s: Scene) -> float:
        lp = sum(self.actor_log_prob(a) for a in s.actors) + self.classes.log_prob(int(ActorClass.STOP))
        return -float(lp)


def fit_reference_model(scenes: Sequence[Scene], window: int | None = None) -> ReferenceModel:
    counts = np.full(4, 1.0)  # add-one smoothing
    by_class: dict = {c: [] for c in PLACEABLE}
    for s in scenes:
        acts = canonical_order(s.actors)
        for a in acts:
            counts[int(a.cls)] += 1
            by_class[a.cls].append(a)
        counts[int(ActorClass.STOP)] += 1
    region = scenes[0].region if scenes else 40.0
    per = {}
    for cls, acts in by_class.items():
        box = heading = None
        if cls.has_box and acts:
            box = _fit_lognormal2(np.array([a.box.width for a in acts]), np.array([a.box.length for a in acts]))
            heading = D.VonMisesMixture.single(*_fit_von_mises(np.array([a.box.heading for a in acts])))
        elif cls.has_box:
            box = D.LogNormal2Mixture(np.ones(1), np.zeros((1, 2)), np.zeros((1, 2)), np.zeros(1))
            heading = D.VonMisesMixture.single(0.0, 1e-6)
        moving = [a for a in acts if a.speed > 0]
        p0 = (len(acts) - len(moving) + 1) / (len(acts) + 2)
        if moving:
            ls = np.log([a.speed for a in moving])
            mu_s, sd_s = float(ls.mean()), float(max(ls.std(), 1e-3))
            om = np.array([wrap_angle(a.direction - a.box.heading) if a.box else a.direction for a in moving])
            mu_d, k_d = _fit_von_mises(om)
        else:
            mu_s, sd_s, mu_d, k_d = 0.0, 1.0, 0.0, 1e-6
        vel = D.VelocityMixture(np.array([p0, 1.0 - p0]), np.array([mu_s]), np.array([math.log(sd_s)]),
                                D.VonMisesMixture.single(mu_d, k_d))
        per[cls] = ClassReference(box, heading, vel)
    return ReferenceModel(D.Categorical(counts / counts.sum()), per, region)


# --- NLL aggregation and mining ------------------------------------------------------------------

def normalized_nll(nll: float, scene: Scene) -> float:
    """Scene NLL divided by its number of actors (at least one)."""
    return nll / max(1, len(scene.actors))


def mine(model, scenes: Sequence[Scene], top: int | None = None) -> list[tuple[int, float]]:
    """Scene indices ranked by actor-normalized NLL, highest first."""
    scores = [(i, normalized_nll(model.scene_nll(s), s)) for i, s in enumerate(scenes)]
    scores.sort(key=lambda t: (-t[1], t[0]))
    return scores if top is None else scores[:top]


def eval_report(eval_set: Sequence[Scene], methods: Mapping[str, Sequence[Scene]], model=None,
                nll_models: Mapping[str, Callable[[Scene], float]] | None = None,
                vehicles_only: bool = False, sigma: float = 1.0) -> dict:
    """One row per method: MMD^2 of each scene statistic against the evaluation set, plus features and NLL.

    ``nll_models`` maps method names to a scene-NLL function evaluated on ``eval_set``;
    methods without a likelihood carry no ``nll`` entry.
    """
    report = {}
    for name, samples in methods.items():
        row = {}
        if nll_models and name in nll_models:
            row["nll"] = float(np.mean([nll_models[name](s) for s in eval_set]))
        if model is not None:
            row["feature_mmd"] = feature_mmd(eval_set, samples, model, sigma)
        for stat in STATISTICS:
            row[f"{stat}_mmd"] = stat_mmd(eval_set, samples, stat, vehicles_only, sigma)
        report[name] = row
    return report
